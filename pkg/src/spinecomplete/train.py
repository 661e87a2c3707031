"""AdamW, the training loop and finite-difference gradient checks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, record_branches, replay_branches
from .errors import ConfigError, DimensionMismatchError, InvalidInputError
from .metrics import chamfer
from .model import CompletionModel, cd_loss, complete, normalize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    coarse_weight: float = 1.0  # weight of the CD on the coarse centres

    def __post_init__(self):
        if not (self.lr > 0 and self.weight_decay >= 0):
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        object.__setattr__(self, "betas", tuple(self.betas))


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adamw_step(params, grads, state: AdamState, t: int, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=5e-4):
    """One AdamW update in place on ``params`` (ndarrays); returns the state.

    Decay is decoupled (``w -= lr * wd * w``) and applied before the
    bias-corrected Adam step, matching the common reference implementation.
    """
    if len(params) != len(grads):
        raise DimensionMismatchError("params and grads differ in length")
    b1, b2 = betas
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if p.shape != g.shape:
            raise DimensionMismatchError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        if weight_decay:
            p -= lr * weight_decay * p
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    state.t = t
    return state


class AdamW:
    def __init__(self, params: list[Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=5e-4):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state = AdamState()

    def step(self):
        adamw_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.state.t + 1,
            self.lr,
            self.betas,
            self.eps,
            self.weight_decay,
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def prepare_pair(partial: np.ndarray, complete_pts: np.ndarray):
    """Normalise a (partial, complete) pair with the partial's centroid and scale."""
    normed, centroid, scale = normalize(partial)
    return normed, (np.asarray(complete_pts, dtype=np.float64) - centroid) / scale


def batch_loss(model: CompletionModel, partials: np.ndarray, completes: np.ndarray, coarse_weight: float = 1.0) -> Tensor:
    coarse, fine = model.forward(partials)
    loss = cd_loss(fine, completes)
    if coarse_weight:
        loss = loss + cd_loss(coarse, completes) * coarse_weight
    return loss


def evaluate_cd(model: CompletionModel, pairs) -> float:
    """Mean Chamfer distance (original units) of ``complete`` over (partial, complete) pairs."""
    values = [chamfer(complete(model, p), c).cd for p, c in pairs]
    return float(np.mean(values))


@dataclass
class TrainResult:
    model: CompletionModel
    history: list[dict]
    steps: int


def _points(x) -> np.ndarray:
    return x.points if hasattr(x, "points") else np.asarray(x, dtype=np.float64)


def train(model: CompletionModel, dataset, cfg: TrainConfig, validation=None, log_every: int = 0) -> TrainResult:
    """Mini-batch AdamW on the Chamfer loss.

    ``dataset`` and ``validation`` are sequences of (partial, complete) pairs
    (PointCloud or arrays); every partial must have ``n_input`` points and all
    completes one shared cardinality.  History rows are written at epoch 0
    (before any update) and after every epoch; ``max_steps`` stops early.
    """
    pairs = [prepare_pair(_points(p), _points(c)) for p, c in dataset]
    if not pairs:
        raise InvalidInputError("training set is empty")
    val_pairs = [(_points(p), _points(c)) for p, c in (validation or [])]
    x_all = np.stack([p for p, _ in pairs])
    y_all = np.stack([c for _, c in pairs])
    opt = AdamW(model.parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = []

    def record(epoch, step, train_cd):
        row = {"epoch": epoch, "step": step, "train_cd": train_cd}
        row["val_cd"] = evaluate_cd(model, val_pairs) if val_pairs else float("nan")
        history.append(row)
        logger.info("epoch %d step %d train_cd %.6g val_cd %.6g", epoch, step, train_cd, row["val_cd"])

    record(0, 0, float("nan"))
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(pairs))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            sel = order[s:s + cfg.batch_size]
            opt.zero_grad()
            loss = batch_loss(model, x_all[sel], y_all[sel], cfg.coarse_weight)
            loss.backward()
            opt.step()
            step += 1
            losses.append(float(loss.data))
            if log_every and step % log_every == 0:
                logger.info("step %d loss %.6g", step, losses[-1])
        if losses:
            record(epoch, step, float(np.mean(losses)))
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return TrainResult(model, history, step)


def grad_check(
    fn, tensors: list[Tensor], n_samples: int = 40, seed: int = 0, floor_frac: float = 1e-3, freeze_branches: bool = True
) -> float:
    """Max relative error of analytic vs central-difference gradients.

    ``fn()`` must return a scalar Tensor built from ``tensors`` (leaves with
    ``requires_grad``).  Coordinates are perturbed by
    ``h = 1e-5 * (1 + |x|)``; a random subset of at most ``n_samples``
    coordinates per tensor is checked.  The relative error of one coordinate
    is ``|a - n| / max(|a|, |n|, floor)`` with ``floor = floor_frac * max|a|``
    over all analytic gradients, so entries that are structurally zero (e.g.
    a key bias under softmax) are judged against the gradient's scale rather
    than against finite-difference roundoff.

    With ``freeze_branches`` the discrete choices of the analytic pass
    (argmax in max-pooling, kNN graphs, Chamfer correspondences) are replayed
    during the perturbed evaluations, so a step of size ``h`` that would cross
    a switching surface still measures the active smooth piece.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise InvalidInputError("gradient checks need float64 tensors")
        t.requires_grad = True
        t.grad = None
    if freeze_branches:
        with record_branches() as log:
            out = fn()

        def evaluate():
            with replay_branches(log):
                return float(fn().data)
    else:
        out = fn()

        def evaluate():
            return float(fn().data)

    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    scale = max((float(np.abs(a).max()) for a in analytic if a.size), default=0.0)
    floor = max(floor_frac * scale, 1e-12)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
        for i in picks:
            x0 = flat[i]
            h = 1e-5 * (1 + abs(x0))
            flat[i] = x0 + h
            fp = evaluate()
            flat[i] = x0 - h
            fm = evaluate()
            flat[i] = x0
            num = (fp - fm) / (2 * h)
            ana = float(a.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
