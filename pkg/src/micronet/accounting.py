"""Analytic MAdds and parameter ledgers.

One MAdd is one multiply-accumulate. Operations that only add (average
pooling, residual additions) go in a separate ``adds`` column and are not part
of the MAdds totals. Batch norm has parameters but no MAdds since it folds
into the preceding convolution at inference time.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .layers import (BatchNorm2d, ChannelShuffle, Conv2d, Dropout, GlobalAvgPool, Identity,
                     Linear, Module, ReLU, SkipAdd, Upsample2x)
from .shiftmax import DynamicShiftMax
from .tensor import Tensor

# Published totals (MAdds, params) each architecture is checked against.
REFERENCE_BUDGETS: Dict[str, Tuple[float, float]] = {
    "M0": (6e6, 1.8e6),
    "M1": (12e6, 2.4e6),
    "M2": (21e6, 3.3e6),
    "M3": (44e6, 4.5e6),
    "M0-kp": (77.7e6, 1.0e6),
    "M1-kp": (116.8e6, 1.8e6),
    "M2-kp": (163.2e6, 2.2e6),
    "M3-kp": (263.2e6, 4.0e6),
}
BUDGET_TOLERANCE = 0.20


class UnsupportedLayerError(TypeError):
    pass


class LayerCost(NamedTuple):
    madds: int
    params: int
    adds: int = 0


def conv_madds(h_out: int, w_out: int, kh: int, kw: int, c_in: int, c_out: int,
               groups: int = 1) -> int:
    return h_out * w_out * kh * kw * (c_in // groups) * c_out


def mf_pointwise_madds(c_in: int, c_mid: int, c_out: int, g1: int, g2: int,
                       h: int = 1, w: int = 1) -> int:
    return h * w * (c_in * c_mid // g1 + c_mid * c_out // g2)


def mf_depthwise_madds(h_out: int, w_mid: int, w_out: int, kh: int, kw: int, c: int,
                       t: int = 1) -> int:
    """k x 1 pass at (h_out, w_mid) then 1 x k pass at (h_out, w_out)."""
    return h_out * w_mid * kh * c * t + h_out * w_out * kw * c * t


def _n_params(layer: Module) -> int:
    return int(sum(p.size for p in layer._params.values()))


def _leaf_cost(layer: Module, shape) -> LayerCost:
    n, c, h, w = shape
    if isinstance(layer, Conv2d):
        _, co, ho, wo = layer.out_shape(shape)
        kh, kw = layer.kernel
        return LayerCost(n * conv_madds(ho, wo, kh, kw, c, co, layer.groups), _n_params(layer))
    if isinstance(layer, Linear):
        return LayerCost(n * layer.c_in * layer.c_out, _n_params(layer))
    if isinstance(layer, DynamicShiftMax):
        cfg = layer.cfg
        s, jk = cfg.hidden, cfg.J * cfg.K
        madds = n * (c * s + s * c * jk + h * w * c * jk)
        return LayerCost(madds, _n_params(layer.fc1) + _n_params(layer.fc2), n * h * w * c)
    if isinstance(layer, BatchNorm2d):
        return LayerCost(0, _n_params(layer))
    if isinstance(layer, GlobalAvgPool):
        return LayerCost(0, 0, n * h * w * c)
    if isinstance(layer, SkipAdd):
        return LayerCost(0, 0, n * c * h * w)
    if isinstance(layer, Upsample2x):
        return LayerCost(n * (2 * c * (2 * h) * w + 2 * c * (2 * h) * (2 * w)), 0)
    if isinstance(layer, (ReLU, Identity, ChannelShuffle, Dropout)):
        return LayerCost(0, 0)
    raise UnsupportedLayerError(f"no cost rule for {type(layer).__name__}")


_KIND = {Conv2d: "conv", Linear: "fc", DynamicShiftMax: "shift-max", BatchNorm2d: "bn",
         GlobalAvgPool: "avgpool", SkipAdd: "skip-add", Upsample2x: "upsample", ReLU: "relu",
         Identity: "identity", ChannelShuffle: "shuffle", Dropout: "dropout"}


def _kind(layer: Module) -> str:
    if isinstance(layer, Conv2d):
        kh, kw = layer.kernel
        if layer.groups == layer.c_in and layer.c_in > 1 and (kh, kw) != (1, 1):
            return "dwconv"
        return "gconv" if layer.groups > 1 else "conv"
    if isinstance(layer, Identity) and layer.excluded:
        return "attention(pass-through)"
    return _KIND.get(type(layer), type(layer).__name__)


def count_layer(layer: Module, input_shape: Sequence[int]) -> LayerCost:
    """Cost of any module; composite modules are summed over their leaves."""
    records = []
    layer.trace(tuple(input_shape), "x", records)
    costs = [_leaf_cost(leaf, s) for _, leaf, s in records]
    return LayerCost(sum(c.madds for c in costs), sum(c.params for c in costs),
                     sum(c.adds for c in costs))


@dataclass
class CostEntry:
    name: str
    kind: str
    out_shape: Tuple[int, ...]
    madds: int
    params: int
    adds: int = 0
    classifier: bool = False
    excluded: bool = False


@dataclass
class CostReport:
    arch: str
    input_shape: Tuple[int, ...]
    entries: List[CostEntry] = field(default_factory=list)

    @property
    def total_madds(self) -> int:
        return sum(e.madds for e in self.entries)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_adds(self) -> int:
        return sum(e.adds for e in self.entries)

    def totals(self, exclude: Sequence[str] = ()) -> Dict[str, int]:
        keep = [e for e in self.entries
                if not ("classifier" in exclude and e.classifier)]
        return dict(madds=sum(e.madds for e in keep), params=sum(e.params for e in keep),
                    adds=sum(e.adds for e in keep))

    def check(self, tol: float = BUDGET_TOLERANCE) -> Dict[str, object]:
        if self.arch not in REFERENCE_BUDGETS:
            raise KeyError(f"no reference budget for {self.arch!r}")
        ref_m, ref_p = REFERENCE_BUDGETS[self.arch]
        dm = self.total_madds / ref_m - 1
        dp = self.total_params / ref_p - 1
        return dict(arch=self.arch, madds=self.total_madds, ref_madds=ref_m, madds_dev=dm,
                    params=self.total_params, ref_params=ref_p, params_dev=dp,
                    madds_ok=abs(dm) <= tol, params_ok=abs(dp) <= tol,
                    ok=abs(dm) <= tol and abs(dp) <= tol)

    def to_dict(self, exclude: Sequence[str] = ()) -> dict:
        layers = {}
        for e in self.entries:
            d = asdict(e)
            d["out_shape"] = list(e.out_shape)
            layers[d.pop("name")] = d
        return dict(arch=self.arch, input_shape=list(self.input_shape), layers=layers,
                    totals=self.totals(), totals_without_classifier=self.totals(["classifier"]),
                    reported=self.totals(exclude))

    def to_json(self, exclude: Sequence[str] = ()) -> str:
        return json.dumps(self.to_dict(exclude), indent=2)

    def to_text(self, exclude: Sequence[str] = (), nonzero_only: bool = True) -> str:
        rows = [e for e in self.entries if not ("classifier" in exclude and e.classifier)]
        if nonzero_only:
            rows = [e for e in rows if e.madds or e.params or e.adds or e.excluded]
        w = max([len(e.name) for e in rows] + [5])
        lines = [f"{'layer':<{w}}  {'kind':<24} {'output':<16} {'MAdds':>12} {'params':>10} "
                 f"{'adds':>10}"]
        for e in rows:
            shp = "x".join(map(str, e.out_shape[1:]))
            kind = e.kind + (" [excluded]" if e.excluded else "")
            lines.append(f"{e.name:<{w}}  {kind:<24} {shp:<16} {e.madds:>12,d} {e.params:>10,d} "
                         f"{e.adds:>10,d}")
        t = self.totals(exclude)
        lines.append(f"{'total':<{w}}  {'':<24} {'':<16} {t['madds']:>12,d} {t['params']:>10,d} "
                     f"{t['adds']:>10,d}")
        return "\n".join(lines)


def count_model(net: Module, input_shape: Optional[Sequence[int]] = None,
                name: Optional[str] = None) -> CostReport:
    arch = getattr(net, "arch", None)
    if input_shape is None:
        input_shape = net.input_shape()
    records = []
    net.trace(tuple(input_shape), "", records)
    report = CostReport(name or (arch.name if arch else type(net).__name__), tuple(input_shape))
    for lname, leaf, shape in records:
        c = _leaf_cost(leaf, shape)
        out = leaf.out_shape(shape) if not isinstance(leaf, SkipAdd) else shape
        report.entries.append(CostEntry(
            lname, _kind(leaf), tuple(out), c.madds, c.params, c.adds,
            classifier=lname.startswith("head.") and arch is not None
            and arch.task == "classification",
            excluded=isinstance(leaf, Identity) and leaf.excluded))
    return report


def empirical_madds_probe(net: Module, x) -> int:
    """Multiply-accumulates executed by one inference-mode forward pass."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    was = net.training
    net.eval()
    try:
        with T.no_grad(), T.count_madds() as counter:
            net(x)
    finally:
        net.train(was)
    return counter[0]
