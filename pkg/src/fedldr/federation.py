"""Federated round protocol and aggregation strategies.

Clients own disjoint, contiguous node ranges. Under FED_LDR a client downloads
its rows of both embedding matrices plus every weight/bias pool, trains
locally with a proximal pull toward what it received, and uploads the same
pieces. The server blends each returned embedding row into the global one,
``g + blend * (local - g)``, and takes the sample-weighted mean of the pools.

The ``*_LDR`` hybrids use the same model but exchange whole-model copies and
aggregate them with the plain rule (mean, coordinate-wise median, or a server
Adam step on the pseudo-gradient). FEDAVG / FEDMEDIAN / FEDOPT do the same on
the shared-weight, uniform-adjacency ablation model. LOCAL_ONLY never
communicates.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import datakit as dk
from .metrics import MetricReport, report
from .numkit import ContractError
from .stgcn import Architecture, ModelParams, init_params, model_forward
from .trainer import ClientWindows, OptimizerState, TrainConfig, local_train

log = logging.getLogger(__name__)


class AggregationError(RuntimeError):
    pass


class StrategyKind(str, enum.Enum):
    FED_LDR = "FED_LDR"
    FEDAVG = "FEDAVG"
    FEDMEDIAN = "FEDMEDIAN"
    FEDOPT = "FEDOPT"
    FEDAVG_LDR = "FEDAVG_LDR"
    FEDMEDIAN_LDR = "FEDMEDIAN_LDR"
    FEDOPT_LDR = "FEDOPT_LDR"
    LOCAL_ONLY = "LOCAL_ONLY"

    @property
    def uses_ldr_model(self) -> bool:
        return self in (StrategyKind.FED_LDR, StrategyKind.FEDAVG_LDR, StrategyKind.FEDMEDIAN_LDR,
                        StrategyKind.FEDOPT_LDR, StrategyKind.LOCAL_ONLY)

    @property
    def rule(self) -> str:
        return {
            StrategyKind.FED_LDR: "fedldr",
            StrategyKind.FEDAVG: "mean", StrategyKind.FEDAVG_LDR: "mean",
            StrategyKind.FEDMEDIAN: "median", StrategyKind.FEDMEDIAN_LDR: "median",
            StrategyKind.FEDOPT: "opt", StrategyKind.FEDOPT_LDR: "opt",
            StrategyKind.LOCAL_ONLY: "none",
        }[self]

    @property
    def whole_model(self) -> bool:
        """Uploads and downloads carry every embedding row, not just the client's own."""
        return self.rule in ("mean", "median", "opt")

    def architecture(self, base: Architecture) -> Architecture:
        if self.uses_ldr_model:
            return replace(base, adaptive_graph=True, node_specific=True)
        return base.ablation()

    @classmethod
    def parse(cls, name: str) -> "StrategyKind":
        try:
            return cls(name.strip().upper())
        except ValueError:
            raise ValueError(
                f"unknown strategy {name!r}; choose from {', '.join(s.value for s in cls)}"
            ) from None


@dataclass
class ServerConfig:
    blend: float = 0.5
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class GlobalState:
    params: ModelParams
    round: int = 0
    server: ServerConfig = field(default_factory=ServerConfig)
    opt_state: OptimizerState | None = None


@dataclass
class ClientView:
    client_id: int
    lo: int
    hi: int
    params: ModelParams
    download_bytes: int


@dataclass
class ClientUpdate:
    client_id: int
    lo: int
    hi: int
    params: ModelParams
    samples: int

    def __post_init__(self):
        if self.samples <= 0:
            raise ContractError(f"client {self.client_id}: sample count must be positive")


@dataclass
class RoundReport:
    round: int
    metrics: dict[str, MetricReport]
    mean_train_loss: float
    bytes_up: int
    bytes_down: int
    seconds: float


# ---------------------------------------------------------------- broadcast


def _check_tiling(ranges, n: int) -> None:
    try:
        dk.check_partition(dk.ClientPartition(tuple(ranges)), n)
    except dk.ConfigurationError as exc:
        raise ContractError(str(exc)) from None


def broadcast(g: GlobalState, partition: dk.ClientPartition, whole_model: bool = False) -> list[ClientView]:
    """Per-client copies of the global state: own embedding rows plus all pools
    (or the whole model when ``whole_model``)."""
    n = g.params.num_nodes
    if n is not None:
        _check_tiling(partition.ranges, n)
    views = []
    for k, (lo, hi) in enumerate(partition):
        p = g.params.copy() if whole_model else g.params.rows(lo, hi)
        views.append(ClientView(k, lo, hi, p, p.nbytes))
    return views


def comm_bytes(u: ClientUpdate, strategy: StrategyKind) -> int:
    """Exact size of the serialized upload for ``strategy``."""
    if strategy is StrategyKind.LOCAL_ONLY:
        return 0
    return u.params.nbytes


# ---------------------------------------------------------------- aggregation rules


def _sorted(updates: list[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ContractError("aggregation needs at least one client update")
    return sorted(updates, key=lambda u: u.client_id)


def _weights(updates: list[ClientUpdate]) -> list[float]:
    total = float(sum(u.samples for u in updates))
    return [u.samples / total for u in updates]


def _check_layout(updates: list[ClientUpdate]) -> list[list[np.ndarray]]:
    ref = [a.shape for a in updates[0].params.arrays()]
    out = []
    for u in updates:
        arrs = u.params.arrays()
        if [a.shape for a in arrs] != ref:
            raise ContractError(f"client {u.client_id}: parameter shapes differ from client "
                                f"{updates[0].client_id}")
        out.append(arrs)
    return out


def _weighted_mean(ref: list[np.ndarray], stacks: list[list[np.ndarray]], w: list[float]) -> list[np.ndarray]:
    # accumulate offsets from ref so identical inputs return ref bit-for-bit
    out = []
    for b, r in enumerate(ref):
        acc = np.zeros_like(r)
        for wk, arrs in zip(w, stacks):
            acc += wk * (arrs[b] - r)
        out.append(r + acc)
    return out


def aggregate_fedavg(updates: list[ClientUpdate]) -> ModelParams:
    """Sample-weighted elementwise mean of whole-model updates."""
    updates = _sorted(updates)
    stacks = _check_layout(updates)
    ref = updates[0].params
    return ref.with_arrays(_weighted_mean(stacks[0], stacks, _weights(updates)))


def aggregate_fedmedian(updates: list[ClientUpdate]) -> ModelParams:
    """Coordinate-wise median; an even count averages the two middle values."""
    updates = _sorted(updates)
    stacks = _check_layout(updates)
    merged = [np.median(np.stack([s[b] for s in stacks]), axis=0) for b in range(len(stacks[0]))]
    return updates[0].params.with_arrays(merged)


def aggregate_fedopt(g: GlobalState, updates: list[ClientUpdate]) -> GlobalState:
    """One server Adam step on the pseudo-gradient ``global - weighted_mean(updates)``."""
    mean = aggregate_fedavg(updates).arrays()
    old = g.params.arrays()
    if [a.shape for a in mean] != [a.shape for a in old]:
        raise ContractError("aggregate_fedopt: updates do not match the global layout")
    delta = [o - m for o, m in zip(old, mean)]
    if not all(np.all(np.isfinite(d)) for d in delta):
        raise AggregationError("non-finite pseudo-gradient")
    state = g.opt_state or OptimizerState.zeros_like(old)
    s = g.server
    t = state.t + 1
    c1, c2 = 1.0 - s.beta1**t, 1.0 - s.beta2**t
    new, ms, vs = [], [], []
    for p, d, m, v in zip(old, delta, state.m, state.v):
        m = s.beta1 * m + (1 - s.beta1) * d
        v = s.beta2 * v + (1 - s.beta2) * d * d
        new.append(p - s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps))
        ms.append(m)
        vs.append(v)
    return GlobalState(g.params.with_arrays(new), g.round + 1, s, OptimizerState(ms, vs, t))


def aggregate_fedldr(g: GlobalState, updates: list[ClientUpdate]) -> GlobalState:
    """Blend returned embedding rows into their owners' global rows; weighted-mean the pools."""
    updates = _sorted(updates)
    p = g.params
    n = p.num_nodes
    _check_tiling([(u.lo, u.hi) for u in updates], n)
    rho = g.server.blend
    ea = p.ea.copy() if p.ea is not None else None
    eg = p.eg.copy() if p.eg is not None else None
    for u in updates:
        rows = u.hi - u.lo
        for old, new in ((ea, u.params.ea), (eg, u.params.eg)):
            if old is None:
                continue
            if new is None or new.shape != (rows, old.shape[1]):
                raise ContractError(f"client {u.client_id}: embedding rows do not match range "
                                    f"[{u.lo}, {u.hi})")
            base = old[u.lo:u.hi]
            # offset form keeps unchanged rows bit-exact; full trust copies exactly
            old[u.lo:u.hi] = new if rho == 1.0 else base + rho * (new - base)
    pools_old = p.pools()
    stacks = []
    for u in updates:
        pl = u.params.pools()
        if [a.shape for a in pl] != [a.shape for a in pools_old]:
            raise ContractError(f"client {u.client_id}: pool shapes differ from the global model")
        stacks.append(pl)
    pools = _weighted_mean(pools_old, stacks, _weights(updates))
    arrays = [a for a in (ea, eg) if a is not None] + pools
    return GlobalState(p.with_arrays(arrays), g.round + 1, g.server, g.opt_state)


def aggregate(strategy: StrategyKind, g: GlobalState, updates: list[ClientUpdate]) -> GlobalState:
    rule = strategy.rule
    if rule == "fedldr":
        return aggregate_fedldr(g, updates)
    if rule == "mean":
        return GlobalState(aggregate_fedavg(updates), g.round + 1, g.server, g.opt_state)
    if rule == "median":
        return GlobalState(aggregate_fedmedian(updates), g.round + 1, g.server, g.opt_state)
    if rule == "opt":
        return aggregate_fedopt(g, updates)
    raise ContractError(f"strategy {strategy.value} does not aggregate")


# ---------------------------------------------------------------- data and evaluation


@dataclass
class SplitArrays:
    inputs: np.ndarray  # S x N x (T*F), normalized
    targets: np.ndarray  # S x N x (horizon*F), normalized
    raw_targets: np.ndarray  # same, denormalized


@dataclass
class FederatedData:
    partition: dk.ClientPartition
    stats: dk.NormStats
    splits: dict[str, SplitArrays]
    num_nodes: int

    def client_train(self, k: int) -> ClientWindows:
        lo, hi = self.partition.ranges[k]
        s = self.splits["train"]
        return ClientWindows(s.inputs[:, lo:hi], s.targets[:, lo:hi])


def prepare_data(ds: dk.TimeSeriesDataset, history: int, horizon: int, clients: int) -> FederatedData:
    """Split, normalize with train statistics, window each segment, partition nodes."""
    train, val, test = dk.split_temporal(ds, history, horizon)
    stats = dk.fit_norm(train)
    splits = {}
    for name, seg in (("train", train), ("val", val), ("test", test)):
        x, y = dk.stack_windows(dk.make_windows(dk.normalize(seg, stats), history, horizon))
        splits[name] = SplitArrays(x, y, dk.denormalize_flat(y, stats))
    return FederatedData(dk.partition_nodes(ds.num_nodes, clients), stats, splits, ds.num_nodes)


def predict(models: list[ModelParams], data: FederatedData, split: str, chunk: int = 256) -> np.ndarray:
    """Normalized predictions for all nodes, each client's model on its own nodes."""
    s = data.splits[split]
    out = np.empty(s.targets.shape)
    for p, (lo, hi) in zip(models, data.partition):
        for a in range(0, s.inputs.shape[0], chunk):
            out[a:a + chunk, lo:hi] = model_forward(p, s.inputs[a:a + chunk, lo:hi])
    return out


def evaluate(models: list[ModelParams], data: FederatedData, split: str) -> MetricReport:
    pred = dk.denormalize_flat(predict(models, data, split), data.stats)
    return report(pred, data.splits[split].raw_targets)


def client_models(g: GlobalState, partition: dk.ClientPartition) -> list[ModelParams]:
    return [g.params.rows(lo, hi) for lo, hi in partition]


# ---------------------------------------------------------------- round loop


def derive_seed(master: int, *key: int) -> int:
    """Counter-based sub-seed: first word of SeedSequence(master, spawn_key=key).

    Key (0,) seeds the initial global model; (1, round, client) seeds a
    client's local training in a round. Adding clients leaves other clients'
    streams unchanged.
    """
    return int(np.random.SeedSequence(master, spawn_key=key).generate_state(1)[0])


@dataclass
class FederationConfig:
    strategy: StrategyKind = StrategyKind.FED_LDR
    arch: Architecture = field(default_factory=Architecture)
    train: TrainConfig = field(default_factory=TrainConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    max_rounds: int = 50
    patience: int = 5
    min_delta: float = 1e-4
    seed: int = 0
    workers: int = 1
    record_wallclock: bool = False


@dataclass
class RunResult:
    reports: list[RoundReport]
    best_round: int | None
    best_models: list[ModelParams]
    best_global: ModelParams | None
    final_test: MetricReport | None
    initial: GlobalState


def run_rounds(cfg: FederationConfig, data: FederatedData) -> RunResult:
    """Broadcast, train every client, aggregate, evaluate; repeat until
    ``max_rounds`` or ``patience`` rounds without a validation MAE gain of ``min_delta``."""
    strategy = cfg.strategy
    arch = strategy.architecture(cfg.arch)
    partition = data.partition
    if len(partition) < 1:
        raise ContractError("run_rounds needs at least one client")
    g = GlobalState(init_params(arch, data.num_nodes, derive_seed(cfg.seed, 0)), 0, cfg.server)
    initial = GlobalState(g.params.copy(), 0, cfg.server)
    local_models = client_models(g, partition) if strategy is StrategyKind.LOCAL_ONLY else None
    mu = cfg.train.mu if strategy is StrategyKind.FED_LDR else 0.0

    reports: list[RoundReport] = []
    best_mae, best_round, stale = np.inf, None, 0
    best_models = client_models(g, partition) if local_models is None else local_models
    best_global = g.params if local_models is None else None

    for r in range(cfg.max_rounds):
        start = time.perf_counter()
        if local_models is not None:
            views = [ClientView(k, lo, hi, local_models[k], 0) for k, (lo, hi) in enumerate(partition)]
        else:
            views = broadcast(g, partition, whole_model=strategy.whole_model)
        bytes_down = sum(v.download_bytes for v in views)

        def work(v: ClientView):
            start_p = v.params.rows(v.lo, v.hi) if strategy.whole_model and v.params.num_nodes else v.params
            tc = replace(cfg.train, seed=derive_seed(cfg.seed, 1, r, v.client_id), mu=mu)
            try:
                trained, stats = local_train(data.client_train(v.client_id), start_p, tc)
            except Exception as exc:
                raise RuntimeError(f"round {r}, client {v.client_id}: {exc}") from exc
            if strategy.whole_model and v.params.num_nodes:
                full = v.params.copy()
                for name in ("ea", "eg"):
                    arr = getattr(full, name)
                    if arr is not None:
                        arr[v.lo:v.hi] = getattr(trained, name)
                trained = full
            return ClientUpdate(v.client_id, v.lo, v.hi, trained, stats.samples), stats

        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                results = list(pool.map(work, views))
        else:
            results = [work(v) for v in views]
        results.sort(key=lambda pair: pair[0].client_id)
        updates = [u for u, _ in results]
        losses = [s.epoch_loss[-1] for _, s in results if s.epoch_loss]
        mean_loss = float(np.mean(losses)) if losses else 0.0

        if local_models is not None:
            local_models = [u.params for u in updates]
            bytes_up = 0
            models = local_models
        else:
            bytes_up = sum(comm_bytes(u, strategy) for u in updates)
            g = aggregate(strategy, g, updates)
            models = client_models(g, partition)

        metrics = {split: evaluate(models, data, split) for split in ("train", "val", "test")}
        seconds = time.perf_counter() - start if cfg.record_wallclock else 0.0
        reports.append(RoundReport(r + 1, metrics, mean_loss, bytes_up, bytes_down, seconds))
        log.info("%s round %d: val mae %.4f", strategy.value, r + 1, metrics["val"].mae)

        val = metrics["val"].mae
        if val < best_mae - cfg.min_delta:
            best_mae, best_round, stale = val, r + 1, 0
            best_models = [m.copy() for m in models]
            best_global = g.params.copy() if local_models is None else None
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    final = evaluate(best_models, data, "test") if reports else None
    return RunResult(reports, best_round, best_models, best_global, final, initial)


REPORT_COLUMNS = ["round", "strategy", "split", "mae", "rmse", "mape", "corr",
                  "mean_train_loss", "bytes_up", "bytes_down", "seconds"]


def reports_csv(reports: list[RoundReport], strategy: StrategyKind) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for rep in reports:
        for split, m in rep.metrics.items():
            w.writerow([rep.round, strategy.value, split, repr(m.mae), repr(m.rmse), repr(m.mape),
                        repr(m.corr), repr(rep.mean_train_loss), rep.bytes_up, rep.bytes_down,
                        repr(rep.seconds)])
    return buf.getvalue()
