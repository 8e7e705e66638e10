"""Local client optimisation: MAE objective, proximal pull toward the broadcast
embeddings, Adam with global-norm clipping, and a finite-difference gradient check."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import ContractError, DimensionError, GradTape, Tensor
from .stgcn import ForwardParams, ModelParams, forward_tensors


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.003
    mu: float = 0.01
    epochs: int = 2
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    max_batches: int | None = None  # cap on mini-batches per epoch; None = full pass

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning rate and batch size must be positive and epochs >= 1")
        if self.mu < 0:
            raise ValueError("proximal coefficient must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid optimizer hyperparameters")


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: list[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


@dataclass
class LocalStats:
    epoch_loss: list[float]
    samples: int
    seconds: float
    steps: int = 0


@dataclass
class ClientWindows:
    """A client's normalized training windows over its own nodes."""

    inputs: np.ndarray  # S x n_k x (T*F)
    targets: np.ndarray  # S x n_k x (horizon*F)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def samples(self) -> int:
        """Training examples = windows x owned nodes."""
        return self.inputs.shape[0] * self.inputs.shape[1]


# ---------------------------------------------------------------- objective pieces


def mae_loss(pred: Tensor, target) -> Tensor:
    target = nk.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mae_loss: prediction {pred.shape} vs target {target.shape}")
    return nk.mean(nk.absolute(nk.sub(pred, target)))


def proximal_penalty(local: ForwardParams | ModelParams, global_: ModelParams, mu: float) -> Tensor:
    """(mu/2) * (||EA_local - EA_global||^2 + ||EG_local - EG_global||^2)."""
    if isinstance(local, ModelParams):
        local = ForwardParams.of(local)
    pairs = [(local.ea, global_.ea), (local.eg, global_.eg)]
    terms = []
    for loc, glo in pairs:
        if (loc is None) != (glo is None):
            raise ContractError("proximal_penalty: local and global architectures differ")
        if loc is None:
            continue
        if loc.shape != glo.shape:
            raise ContractError(f"proximal_penalty: embedding shapes {loc.shape} vs {glo.shape}")
        terms.append(nk.sum_squares(nk.sub(loc, Tensor(glo))))
    if not terms or mu == 0.0:
        return Tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = nk.add(acc, t)
    return nk.scale(acc, mu / 2.0)


def objective(fp: ForwardParams, arch, x, y, anchor: ModelParams | None, mu: float) -> Tensor:
    loss = mae_loss(forward_tensors(arch, fp, x), y)
    if anchor is not None and mu > 0:
        loss = nk.add(loss, proximal_penalty(fp, anchor, mu))
    return loss


def loss_and_grads(p: ModelParams, x, y, anchor: ModelParams | None = None, mu: float = 0.0):
    fp = ForwardParams.of(p, requires_grad=True)
    with GradTape() as tape:
        loss = objective(fp, p.arch, x, y, anchor, mu)
    return float(loss.data), nk.backward(tape, loss, fp.tensors())


# ---------------------------------------------------------------- optimizer


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        f = max_norm / norm
        return [g * f for g in grads], norm
    return grads, norm


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: OptimizerState,
    cfg: TrainConfig,
    names: list[str] | None = None,
) -> tuple[list[np.ndarray], OptimizerState]:
    """Bias-corrected Adam update; returns new arrays and a new state."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("adam_step: parameter, gradient and state lists differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ContractError(f"adam_step: block {i} shapes disagree: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise TrainingError(f"non-finite gradient in parameter block {label}")
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, OptimizerState(new_m, new_v, t)


# ---------------------------------------------------------------- local training


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic per-epoch shuffle derived from (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch,)))
    return rng.permutation(n)


def local_train(
    data: ClientWindows, globals_: ModelParams, cfg: TrainConfig
) -> tuple[ModelParams, LocalStats]:
    """Start from the broadcast parameters and run ``cfg.epochs`` epochs of
    mini-batch Adam on MAE + proximal penalty. Pure given (data, globals, seed)."""
    if len(data) == 0:
        raise ContractError("local_train: client has no training windows")
    start = time.perf_counter()
    params = globals_.copy()
    anchor = globals_ if cfg.mu > 0 else None
    names = [n for n, _ in params.blocks()]
    state = OptimizerState.zeros_like(params.arrays())
    epoch_loss: list[float] = []
    steps = 0
    n = len(data)
    for epoch in range(cfg.epochs):
        order = epoch_order(n, cfg.seed, epoch)
        batches = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        if cfg.max_batches is not None:
            batches = batches[:cfg.max_batches]
        total, count = 0.0, 0
        for idx in batches:
            loss, grads = loss_and_grads(params, data.inputs[idx], data.targets[idx], anchor, cfg.mu)
            if not math.isfinite(loss):
                raise TrainingError(f"training diverged (non-finite loss) in epoch {epoch}")
            grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            try:
                arrays, state = adam_step(params.arrays(), grads, state, cfg, names)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
            params = params.with_arrays(arrays)
            total += loss * len(idx)
            count += len(idx)
            steps += 1
        if count:
            epoch_loss.append(total / count)
    stats = LocalStats(epoch_loss, data.samples, time.perf_counter() - start, steps)
    return params, stats


# ---------------------------------------------------------------- gradient check


def grad_check(
    p: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    h: float = 1e-5,
    anchor: ModelParams | None = None,
    mu: float = 0.0,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between tape gradients and central differences.

    Error per scalar parameter is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    _, analytic = loss_and_grads(p, x, y, anchor, mu)
    arrays = [a.copy() for a in p.arrays()]

    def f(arrs):
        fp = ForwardParams.of(p.with_arrays(arrs))
        return float(objective(fp, p.arch, x, y, anchor, mu).data)

    worst = 0.0
    for bi, block in enumerate(arrays):
        flat = block.reshape(-1)
        ga = analytic[bi].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = f(arrays)
            flat[j] = orig - h
            down = f(arrays)
            flat[j] = orig
            num = (up - down) / (2 * h)
            err = abs(ga[j] - num) / max(abs(ga[j]), abs(num), floor)
            worst = max(worst, err)
    return worst
