"""Declarative network descriptions and the builders that turn them into modules.

An architecture is a plain-text document: ``key: value`` header lines followed
by one row per block::

    # kind  k  C    C/R  G1  G2  stride  flags
    stem    3  8    4    1   4   2
    A       3  32   12   4   -   2
    B       3  144  24   4   6   1

For Micro-Block-A, ``C`` is the width after the expanding depthwise stage and
``C/R`` is the block output. Optional flags: ``up`` (bilinear x2 after the
block), ``noexpand`` (depthwise multiplier 1) and ``attn`` (a pass-through
placeholder for spatial attention, flagged in the cost ledger).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .factorized import MFDepthwise, channel_shuffle_perm
from .layers import (BatchNorm2d, ChannelShuffle, Conv2d, Dropout, GlobalAvgPool, Identity,
                     Linear, Module, ReLU, Sequential, SkipAdd, Upsample2x)
from .shiftmax import DynamicShiftMax, ShiftMaxConfig
from .tensor import ConfigError, ShapeError, Tensor

KINDS = ("stem", "A", "B", "C")
FLAGS = ("up", "noexpand", "attn")
PUBLISHED = ("M0", "M1", "M2", "M3", "M0-kp", "M1-kp", "M2-kp", "M3-kp")


class ArchError(ConfigError):
    """Invalid or unknown architecture description."""


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    k: int
    C: int
    CR: int
    G1: int
    G2: int  # 0 when the block has no second pointwise stage
    stride: int = 1
    flags: Tuple[str, ...] = ()
    row: int = field(default=0, compare=False)  # source line, for diagnostics

    @property
    def R(self) -> float:
        return self.C / self.CR

    def has(self, flag: str) -> bool:
        return flag in self.flags

    def describe(self) -> str:
        g2 = str(self.G2) if self.G2 else "-"
        return f"{self.kind} {self.k} {self.C} {self.CR} {self.G1} {g2} {self.stride}"


@dataclass
class ArchSpec:
    name: str
    blocks: List[BlockSpec]
    task: str = "classification"
    input_hw: Tuple[int, int] = (224, 224)
    in_channels: int = 3
    classes: int = 1000
    hidden: int = 1024
    dropout: float = 0.05
    keypoints: int = 17
    activation: str = "shiftmax"
    J: int = 2
    K: int = 2
    r: int = 16
    gamma: float = 0.5
    b_expand: int = 2
    source: str = field(default="", repr=False)

    def shiftmax_cfg(self, C: int, G: int) -> ShiftMaxConfig:
        return ShiftMaxConfig(C, G, self.J, self.K, self.r, self.gamma)

    def plan(self) -> List[dict]:
        """Per-block channel widths; raises ArchError naming the first bad row."""
        if not self.blocks or self.blocks[0].kind != "stem":
            raise ArchError(f"{self.name}: the first row must be a stem")
        if self.task not in ("classification", "keypoint"):
            raise ArchError(f"{self.name}: unknown task {self.task!r}")
        cin = self.in_channels
        out = []
        for b in self.blocks:
            try:
                out.append(_plan_block(self, b, cin))
            except ConfigError as exc:
                raise ArchError(f"row {b.row} ({b.describe()}): {exc}") from None
            cin = out[-1]["c_out"]
        return out

    def to_text(self) -> str:
        lines = [f"name: {self.name}", f"task: {self.task}",
                 f"input: {self.input_hw[0]}x{self.input_hw[1]}"]
        if self.task == "classification":
            lines += [f"classes: {self.classes}", f"hidden: {self.hidden}",
                      f"dropout: {self.dropout}"]
        else:
            lines.append(f"keypoints: {self.keypoints}")
        lines += [f"activation: {self.activation}", f"J: {self.J}", f"K: {self.K}",
                  f"r: {self.r}", f"gamma: {self.gamma}", f"b_expand: {self.b_expand}"]
        for b in self.blocks:
            lines.append(" ".join([b.describe(), *b.flags]))
        return "\n".join(lines) + "\n"


def _check_div(what: str, n: int, g: int) -> None:
    if g < 1 or n % g:
        raise ConfigError(f"{what}: groups {g} do not divide {n} channels")


def _plan_block(spec: ArchSpec, b: BlockSpec, cin: int) -> dict:
    if b.k < 1 or b.stride < 1 or b.C < 1 or b.CR < 1:
        raise ConfigError("k, C, C/R and stride must be positive")
    if b.kind == "stem":
        _check_div("stem 1x3 conv", b.CR, b.G2)
        _check_div("stem 1x3 conv", b.C, b.G2)
        return dict(c_in=cin, t=None, mid=b.CR, c_out=b.C)
    if b.kind == "A":
        if b.has("noexpand"):
            if b.C != cin:
                raise ConfigError(f"non-expanding block needs C == input channels ({cin})")
            t = 1
        else:
            if b.C % cin:
                raise ConfigError(f"C={b.C} is not a multiple of the {cin} input channels")
            t = b.C // cin
        mid, c_out = b.C, b.CR
    elif b.kind == "B":
        t, mid, c_out = spec.b_expand, cin * spec.b_expand, b.C
    elif b.kind == "C":
        t, mid, c_out = 1, cin, b.C
    else:
        raise ConfigError(f"unknown block kind {b.kind!r}")
    _check_div("first pointwise input", mid, b.G1)
    _check_div("first pointwise output", b.CR, b.G1)
    if b.kind != "A":
        if b.G2 < 1:
            raise ConfigError("blocks B and C need G2")
        _check_div("second pointwise input", b.CR, b.G2)
        _check_div("second pointwise output", b.C, b.G2)
        _check_div("shift-max after second pointwise", b.C, b.G1)
    return dict(c_in=cin, t=t, mid=mid, c_out=c_out)


# ----------------------------------------------------------------------------
# parsing


def parse_arch(text: str, name: Optional[str] = None) -> ArchSpec:
    header = {}
    blocks = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" in line:
            key, val = (s.strip() for s in line.split(":", 1))
            header[key] = val
            continue
        parts = line.split()
        try:
            if len(parts) < 7:
                raise ValueError("expected: kind k C C/R G1 G2 stride [flags]")
            kind = parts[0]
            if kind not in KINDS:
                raise ValueError(f"unknown block kind {kind!r}")
            flags = tuple(parts[7:])
            bad = [f for f in flags if f not in FLAGS]
            if bad:
                raise ValueError(f"unknown flags {bad}")
            g2 = 0 if parts[5] == "-" else int(parts[5])
            blocks.append(BlockSpec(kind, int(parts[1]), int(parts[2]), int(parts[3]),
                                    int(parts[4]), g2, int(parts[6]), flags, lineno))
        except ValueError as exc:
            raise ArchError(f"row {lineno} ({raw.strip()}): {exc}") from None
    try:
        kw = {}
        if "input" in header:
            h, w = header["input"].lower().split("x")
            kw["input_hw"] = (int(h), int(w))
        for key, typ in (("task", str), ("classes", int), ("hidden", int), ("dropout", float),
                         ("keypoints", int), ("activation", str), ("J", int), ("K", int),
                         ("r", int), ("gamma", float), ("b_expand", int)):
            if key in header:
                kw[key] = typ(header[key])
    except ValueError as exc:
        raise ArchError(f"bad header value: {exc}") from None
    spec = ArchSpec(name=header.get("name", name or "custom"), blocks=blocks, source=text, **kw)
    if spec.activation not in ("shiftmax", "relu"):
        raise ArchError(f"unknown activation {spec.activation!r}")
    spec.plan()
    return spec


def config_path(name: str) -> Path:
    return Path(str(resources.files("micronet") / "configs" / f"{name}.cfg"))


def available_archs() -> List[str]:
    d = Path(str(resources.files("micronet") / "configs"))
    return sorted(p.stem for p in d.glob("*.cfg"))


def load_arch(name_or_path: Union[str, Path]) -> ArchSpec:
    p = Path(name_or_path)
    if p.suffix == ".cfg" and p.exists():
        return parse_arch(p.read_text(), p.stem)
    cfg = config_path(str(name_or_path))
    if not cfg.exists():
        raise ArchError(f"unknown architecture {str(name_or_path)!r}; "
                        f"available: {', '.join(available_archs())}")
    return parse_arch(cfg.read_text(), str(name_or_path))


# ----------------------------------------------------------------------------
# modules


def _activation(spec: ArchSpec, C: int, G: int, rng) -> Module:
    if spec.activation == "relu":
        return ReLU()
    return DynamicShiftMax(spec.shiftmax_cfg(C, G), rng)


class Stem(Module):
    """3x1 conv halving rows, then a 1x3 group conv halving columns and expanding by R."""

    def __init__(self, b: BlockSpec, c_in: int = 3, rng=None):
        super().__init__()
        self.spec = b
        self.conv1 = Conv2d(c_in, b.CR, (3, 1), (b.stride, 1), (1, 0), groups=b.G1 or 1, rng=rng)
        self.bn1 = BatchNorm2d(b.CR)
        self.conv2 = Conv2d(b.CR, b.C, (1, 3), (1, b.stride), (0, 1), groups=b.G2, rng=rng)
        self.bn2 = BatchNorm2d(b.C)
        self.act = ReLU()

    _order = ("conv1", "bn1", "conv2", "bn2", "act")

    def forward(self, x):
        for n in self._order:
            x = getattr(self, n)(x)
        return x

    def trace(self, shape, prefix, out):
        for n in self._order:
            shape = getattr(self, n).trace(shape, f"{prefix}.{n}", out)
        return shape


class MicroBlock(Module):
    """One Micro-Block of any kind.

    Layout: factorized depthwise -> BN -> act1 -> grouped squeeze -> BN ->
    (shuffle, B and C only) -> act2 [-> grouped expand -> BN -> act3], then an
    optional residual, bilinear x2 upsampling and attention placeholder.
    With ``full_rank`` every grouped pointwise conv becomes dense, the shuffle
    is dropped and the depthwise pair becomes one k x k depthwise conv.
    """

    def __init__(self, spec: ArchSpec, b: BlockSpec, plan: dict, rng=None,
                 full_rank: bool = False):
        super().__init__()
        self.spec, self.full_rank = b, full_rank
        cin, t, mid = plan["c_in"], plan["t"], plan["mid"]
        self.c_in, self.c_out = cin, plan["c_out"]
        if full_rank:
            self.dw = Conv2d(cin, mid, b.k, b.stride, b.k // 2, groups=cin, rng=rng)
        else:
            self.dw = MFDepthwise(cin, b.k, t, b.stride, rng)
        self.bn_dw = BatchNorm2d(mid)
        self.act1 = _activation(spec, mid, b.G1, rng)
        self.conv1 = Conv2d(mid, b.CR, 1, groups=1 if full_rank else b.G1, rng=rng)
        self.bn1 = BatchNorm2d(b.CR)
        order = ["dw", "bn_dw", "act1", "conv1", "bn1"]
        if b.kind != "A":
            if not full_rank:
                self.shuffle = ChannelShuffle(channel_shuffle_perm(b.CR, b.G1))
                order.append("shuffle")
        self.act2 = _activation(spec, b.CR, b.G1, rng)
        order.append("act2")
        if b.kind != "A":
            self.conv2 = Conv2d(b.CR, b.C, 1, groups=1 if full_rank else b.G2, rng=rng)
            self.bn2 = BatchNorm2d(b.C)
            self.act3 = _activation(spec, b.C, b.G1, rng)
            order += ["conv2", "bn2", "act3"]
        self._order = order
        self.skip = cin == self.c_out and b.stride == 1
        self.up = Upsample2x() if b.has("up") else None
        self.attn = Identity(excluded=True) if b.has("attn") else None

    def branch(self, x):
        for n in self._order:
            x = getattr(self, n)(x)
        return x

    def forward(self, x):
        y = self.branch(x)
        if self.skip:
            y = y + x
        if self.up is not None:
            y = self.up(y)
        if self.attn is not None:
            y = self.attn(y)
        return y

    def trace(self, shape, prefix, out):
        s0 = shape
        for n in self._order:
            shape = getattr(self, n).trace(shape, f"{prefix}.{n}", out)
        if self.skip:
            if shape != s0:
                raise ShapeError(f"{prefix}: residual shapes differ {s0} vs {shape}")
            out.append((f"{prefix}.skip", SkipAdd(), shape))
        if self.up is not None:
            shape = self.up.trace(shape, f"{prefix}.up", out)
        if self.attn is not None:
            shape = self.attn.trace(shape, f"{prefix}.attn", out)
        return shape


class Classifier(Module):
    """Average pool, two fully connected layers with ReLU and dropout between."""

    def __init__(self, c_last: int, hidden: int, classes: int, dropout: float = 0.0,
                 rng=None, seed: int = 0):
        super().__init__()
        self.pool = GlobalAvgPool()
        self.fc1 = Linear(c_last, hidden, rng=rng)
        self.act = ReLU()
        self.drop = Dropout(dropout, seed)
        self.fc2 = Linear(hidden, classes, rng=rng)

    _order = ("pool", "fc1", "act", "drop", "fc2")

    def forward(self, x):
        for n in self._order:
            x = getattr(self, n)(x)
        return x

    def trace(self, shape, prefix, out):
        for n in self._order:
            shape = getattr(self, n).trace(shape, f"{prefix}.{n}", out)
        return shape


class MicroNet(Module):
    def __init__(self, spec: ArchSpec, seed: int = 0, full_rank: bool = False):
        super().__init__()
        self.arch = spec
        self.full_rank = full_rank
        rng = np.random.default_rng(seed)
        plans = spec.plan()
        layers, names = [], []
        for i, (b, p) in enumerate(zip(spec.blocks, plans)):
            if b.kind == "stem":
                layers.append(Stem(b, p["c_in"], rng))
                names.append("stem")
            else:
                layers.append(MicroBlock(spec, b, p, rng, full_rank))
                names.append(f"block{i}")
        self.features = Sequential(*layers, names=names)
        c_last = plans[-1]["c_out"]
        if spec.task == "classification":
            self.head = Classifier(c_last, spec.hidden, spec.classes, spec.dropout, rng, seed)
        else:
            self.head = Conv2d(c_last, spec.keypoints, 1, bias=True, rng=rng)

    def forward(self, x):
        return self.head(self.features(x))

    def predict(self, x) -> np.ndarray:
        """Class probabilities (classification) or heatmaps (keypoint), inference mode."""
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                y = self(x if isinstance(x, Tensor) else Tensor(x))
                if self.arch.task == "classification":
                    y = T.softmax(y, axis=1)
            return y.data
        finally:
            self.train(was)

    def input_shape(self, batch: int = 1) -> Tuple[int, int, int, int]:
        return (batch, self.arch.in_channels, *self.arch.input_hw)

    def trace(self, shape, prefix, out):
        shape = self.features.trace(shape, prefix, out)
        return self.head.trace(shape, "head", out)

    def blocks(self) -> List[Tuple[str, Module]]:
        return [(n, getattr(self.features, n)) for n in self.features._order]


def build_stem(b: BlockSpec, c_in: int = 3, seed: int = 0) -> Stem:
    if b.kind != "stem":
        raise ArchError(f"expected a stem row, got {b.kind!r}")
    return Stem(b, c_in, np.random.default_rng(seed))


def _build_block(kind: str, b: BlockSpec, c_in: int, spec: Optional[ArchSpec], seed: int,
                 full_rank: bool) -> MicroBlock:
    if b.kind != kind:
        raise ArchError(f"expected a {kind} row, got {b.kind!r}")
    spec = spec or ArchSpec("block", [])
    try:
        plan = _plan_block(spec, b, c_in)
    except ConfigError as exc:
        raise ArchError(f"{b.describe()}: {exc}") from None
    return MicroBlock(spec, b, plan, np.random.default_rng(seed), full_rank)


def build_micro_a(b, c_in, spec=None, seed=0, full_rank=False) -> MicroBlock:
    return _build_block("A", b, c_in, spec, seed, full_rank)


def build_micro_b(b, c_in, spec=None, seed=0, full_rank=False) -> MicroBlock:
    return _build_block("B", b, c_in, spec, seed, full_rank)


def build_micro_c(b, c_in, spec=None, seed=0, full_rank=False) -> MicroBlock:
    return _build_block("C", b, c_in, spec, seed, full_rank)


def build_classifier(c_last: int, hidden: int, classes: int, dropout: float = 0.0,
                     seed: int = 0) -> Classifier:
    if min(c_last, hidden, classes) < 1:
        raise ArchError("classifier dimensions must be positive")
    return Classifier(c_last, hidden, classes, dropout, np.random.default_rng(seed), seed)


def build_arch(name_or_spec: Union[str, Path, ArchSpec], seed: int = 0,
               full_rank: bool = False, **overrides) -> MicroNet:
    """Build a network by name, config path or spec. ``overrides`` replace spec fields."""
    spec = name_or_spec if isinstance(name_or_spec, ArchSpec) else load_arch(name_or_spec)
    if overrides:
        spec = replace(spec, **overrides)
    return MicroNet(spec, seed=seed, full_rank=full_rank)


def full_rank_partner(student: MicroNet, seed: int = 1) -> MicroNet:
    """Same widths and strides as ``student`` with unfactorized convolutions."""
    return MicroNet(student.arch, seed=seed, full_rank=True)


def summary_rows(net: MicroNet) -> List[dict]:
    """One row per block plus the head layers, with output shapes."""
    rows = []
    shape = net.input_shape()
    for (name, block), b in zip(net.blocks(), net.arch.blocks):
        shape = block.trace(shape, name, [])
        rows.append(dict(name=name, kind=b.kind if b.kind == "stem" else f"micro-{b.kind}",
                         k=b.k, C=b.C, CR=b.CR, G=(b.G1, b.G2), stride=b.stride,
                         out=shape[1:]))
    head = net.head
    if isinstance(head, Classifier):
        s = head.pool.trace(shape, "", [])
        rows.append(dict(name="head.pool", kind="avgpool", out=s[1:]))
        s = head.fc1.out_shape(s)
        rows.append(dict(name="head.fc1", kind="fc", C=head.fc1.c_out, out=s[1:]))
        s = head.fc2.out_shape(s)
        rows.append(dict(name="head.fc2", kind="fc", C=head.fc2.c_out, out=s[1:]))
    else:
        s = head.out_shape(shape)
        rows.append(dict(name="head", kind="heatmap-conv", k=1, C=head.c_out, out=s[1:]))
    return rows
