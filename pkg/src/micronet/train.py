"""Toy-scale training: SGD with momentum, cosine decay, label smoothing and
mutual learning against a full-rank partner."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .arch import MicroNet
from .layers import Module
from .tensor import ShapeError, Tensor


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 3e-5
    label_smoothing: float = 0.1
    beta: float = 1.0
    temperature: float = 1.0
    mutual: bool = False
    symmetric: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "momentum", "weight_decay", "label_smoothing",
                     "beta", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.temperature <= 0 or self.batch_size < 1:
            raise ValueError("temperature and batch_size must be positive")


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * (1 + math.cos(math.pi * step / total_steps)) / 2


def smoothed_ce(logits: Tensor, labels: np.ndarray, eps: float = 0.0) -> Tensor:
    """Mean cross-entropy against one-hot targets mixed with the uniform distribution."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    target = np.full((n, k), eps / k)
    target[np.arange(n), labels] += 1 - eps
    logp = T.log_softmax(logits, axis=1)
    return T.tsum(T.mul(logp, Tensor(target.astype(logits.dtype)))) * (-1.0 / n)


def kl_divergence(p: Tensor, q_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean KL(p || softmax(q_logits / T)); ``p`` is treated as a constant target."""
    n = q_logits.shape[0]
    if p.shape != q_logits.shape:
        raise ShapeError(f"KL between {p.shape} and {q_logits.shape}")
    pd = p.data
    logq = T.log_softmax(q_logits * (1.0 / temperature), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = float(np.where(pd > 0, pd * np.log(pd), 0.0).sum())
    cross = T.tsum(T.mul(logq, Tensor(pd))) * (-1.0 / n)
    return cross + ent / n


def heatmap_mse(pred: Tensor, target: np.ndarray) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"heatmaps {pred.shape} vs targets {target.shape}")
    d = pred - Tensor(target.astype(pred.dtype))
    return T.mean(d * d)


class SGD:
    """Momentum SGD; weight decay is added to the gradient so lr=0 is a no-op."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _check_finite(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"nonfinite loss {value} at {where}")


def train_step(model: Module, opt: SGD, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
               lr: float) -> float:
    model.train()
    opt.zero_grad()
    loss = smoothed_ce(model(Tensor(x)), y, cfg.label_smoothing)
    _check_finite(float(loss.data), "train_step")
    loss.backward()
    opt.step(lr)
    return float(loss.data)


def keypoint_step(model: Module, opt: SGD, x: np.ndarray, target: np.ndarray,
                  lr: float) -> float:
    model.train()
    opt.zero_grad()
    loss = heatmap_mse(model(Tensor(x)), target)
    _check_finite(float(loss.data), "keypoint_step")
    loss.backward()
    opt.step(lr)
    return float(loss.data)


def mutual_learn_step(student: Module, partner: Module, x: np.ndarray, y: np.ndarray,
                      cfg: TrainConfig, opt_s: SGD, opt_p: SGD, lr: float) -> Dict[str, float]:
    """Student minimises CE + beta * KL(partner || student); the partner minimises CE
    (plus the mirrored KL when ``cfg.symmetric``). Both take one SGD step."""
    student.train()
    partner.train()
    opt_s.zero_grad()
    opt_p.zero_grad()
    zs, zp = student(Tensor(x)), partner(Tensor(x))
    if zs.shape != zp.shape:
        raise ShapeError(f"student output {zs.shape} vs partner output {zp.shape}")
    ce_s = smoothed_ce(zs, y, cfg.label_smoothing)
    ce_p = smoothed_ce(zp, y, cfg.label_smoothing)
    p_partner = Tensor(T.softmax(Tensor(zp.data / cfg.temperature)).data)
    kl = kl_divergence(p_partner, zs, cfg.temperature)
    loss_s = ce_s + kl * cfg.beta
    loss_p = ce_p
    if cfg.symmetric:
        p_student = Tensor(T.softmax(Tensor(zs.data / cfg.temperature)).data)
        loss_p = ce_p + kl_divergence(p_student, zp, cfg.temperature) * cfg.beta
    for v, w in ((loss_s, "student"), (loss_p, "partner")):
        _check_finite(float(v.data), f"mutual_learn_step ({w})")
    loss_s.backward()
    loss_p.backward()
    opt_s.step(lr)
    opt_p.step(lr)
    return dict(ce_student=float(ce_s.data), kl=float(kl.data), ce_partner=float(ce_p.data),
                loss_student=float(loss_s.data))


def evaluate(model: Module, x: np.ndarray, y: np.ndarray, batch_size: int = 256,
             eps: float = 0.0) -> Dict[str, float]:
    """Cross-entropy and accuracy in inference mode."""
    was = model.training
    model.eval()
    ce, correct = 0.0, 0
    try:
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                z = model(Tensor(x[i:i + batch_size]))
                ce += float(smoothed_ce(z, y[i:i + batch_size], eps).data) * len(z.data)
                correct += int((z.data.argmax(axis=1) == y[i:i + batch_size]).sum())
    finally:
        model.train(was)
    return dict(ce=ce / len(x), acc=correct / len(x))


@dataclass
class TrainResult:
    model: Module
    log: List[dict] = field(default_factory=list)
    partner: Optional[Module] = None


def train_toy(model: MicroNet, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
              partner: Optional[Module] = None, val: Optional[tuple] = None,
              log_path=None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs; one metric record per epoch.

    Classification models take integer labels; keypoint models take target
    heatmaps and minimise their mean squared error. With ``cfg.mutual`` a
    partner (normally the full-rank twin) is co-trained.
    """
    keypoint = getattr(getattr(model, "arch", None), "task", "") == "keypoint"
    if keypoint and cfg.mutual:
        raise ValueError("mutual learning is defined for classifiers only")
    if len(x) == 0:
        raise TrainingError("empty dataset")
    if len(x) != len(y):
        raise ShapeError(f"{len(x)} images but {len(y)} labels")
    if cfg.mutual and partner is None:
        raise ValueError("mutual learning needs a partner network")
    rng = np.random.default_rng(cfg.seed)
    dtype = model.parameters()[0].dtype
    x = x.astype(dtype, copy=False)
    opt_s = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    opt_p = SGD(partner.parameters(), cfg.momentum, cfg.weight_decay) if cfg.mutual else None
    steps_per_epoch = math.ceil(len(x) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step, log = 0, []
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(x))
            sums: Dict[str, float] = {}
            kl_min = math.inf
            lr = cosine_lr(step, total, cfg.lr0)
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                lr = cosine_lr(step, total, cfg.lr0)
                if keypoint:
                    out = dict(ce_student=keypoint_step(model, opt_s, x[idx], y[idx], lr))
                elif cfg.mutual:
                    out = mutual_learn_step(model, partner, x[idx], y[idx], cfg, opt_s, opt_p, lr)
                else:
                    out = dict(ce_student=train_step(model, opt_s, x[idx], y[idx], cfg, lr))
                for k, v in out.items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
                if "kl" in out:
                    kl_min = min(kl_min, out["kl"])
                step += 1
            rec = dict(epoch=epoch, lr=lr, loss=sums["ce_student"] / len(x))
            if not keypoint:
                train_metrics = evaluate(model, x, y)
                rec.update(acc=train_metrics["acc"], train_ce=train_metrics["ce"])
            if cfg.mutual:
                rec.update(kl=sums["kl"] / len(x), kl_min=kl_min,
                           partner_loss=sums["ce_partner"] / len(x))
            if val is not None:
                vm = evaluate(model, *val)
                rec.update(val_ce=vm["ce"], val_acc=vm["acc"])
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    return TrainResult(model, log, partner)
