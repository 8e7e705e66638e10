"""Experiment configuration, single runs, sweeps and strategy comparisons.

Config files are flat ``key = value`` text, one key per line, ``#`` starts a
comment. Every key is optional; ``config.resolved`` written next to each
run's outputs lists all keys with their effective values and can be fed back
in unchanged. If ``FEDLDR_OUTPUT_ROOT`` is set, a relative ``output_dir`` is
resolved under it.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import datakit as dk
from .federation import (FederationConfig, RunResult, ServerConfig, StrategyKind, prepare_data,
                         reports_csv, run_rounds)
from .stgcn import Architecture, init_params, save_checkpoint
from .trainer import TrainConfig, grad_check

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FEDLDR_OUTPUT_ROOT"
SWEEP_PARAMS = ("local_epochs", "clients")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ExperimentConfig:
    data_source: str = "synthetic"  # synthetic | csv
    data_path: str = ""
    synth_nodes: int = 16
    synth_steps: int = 480
    synth_noise: float = 0.05
    synth_offset_scale: float = 2.0
    synth_level: float = 5.0
    synth_seed: int = 0
    strategy: str = "FED_LDR"
    clients: int = 4
    local_epochs: int = 2
    rounds: int = 50
    patience: int = 5
    min_delta: float = 1e-4
    history: int = 12
    horizon: int = 12
    embed_dim: int = 10
    pool_dim: int = 10
    hidden: int = 32
    layers: int = 2
    lr: float = 0.003
    mu: float = 0.01
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    server_lr: float = 0.01
    blend: float = 0.5
    seed: int = 0
    workers: int = 1
    record_wallclock: bool = False
    output_dir: str = "runs/experiment"

    def validate(self) -> "ExperimentConfig":
        if self.data_source not in ("synthetic", "csv"):
            raise ConfigError("data_source", f"must be 'synthetic' or 'csv', got {self.data_source!r}")
        if self.data_source == "csv" and not self.data_path:
            raise ConfigError("data_path", "required when data_source = csv")
        try:
            StrategyKind.parse(self.strategy)
        except ValueError as exc:
            raise ConfigError("strategy", str(exc)) from None
        positive = ("synth_nodes", "synth_steps", "clients", "local_epochs", "patience", "history",
                    "horizon", "embed_dim", "pool_dim", "hidden", "layers", "lr", "batch_size",
                    "eps", "server_lr", "workers")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be positive")
        for name in ("rounds", "mu", "synth_noise", "synth_offset_scale", "min_delta", "clip_norm"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(name, "must lie in [0, 1)")
        if not 0 <= self.blend <= 1:
            raise ConfigError("blend", "must lie in [0, 1]")
        if self.data_source == "synthetic" and self.synth_nodes < 2:
            raise ConfigError("synth_nodes", "synthetic data needs at least 2 nodes")
        if self.data_source == "synthetic" and self.clients > self.synth_nodes:
            raise ConfigError("clients", f"{self.clients} clients exceed {self.synth_nodes} nodes")
        return self

    @property
    def strategy_kind(self) -> StrategyKind:
        return StrategyKind.parse(self.strategy)

    def architecture(self) -> Architecture:
        return Architecture(history=self.history, horizon=self.horizon, hidden=self.hidden,
                            layers=self.layers, embed_dim=self.embed_dim, pool_dim=self.pool_dim)

    def federation(self) -> FederationConfig:
        train = TrainConfig(lr=self.lr, mu=self.mu, epochs=self.local_epochs,
                            batch_size=self.batch_size, beta1=self.beta1, beta2=self.beta2,
                            eps=self.eps, clip_norm=self.clip_norm, seed=self.seed)
        return FederationConfig(
            strategy=self.strategy_kind, arch=self.architecture(), train=train,
            server=ServerConfig(blend=self.blend, lr=self.server_lr, beta1=self.beta1,
                                beta2=self.beta2, eps=self.eps),
            max_rounds=self.rounds, patience=self.patience, min_delta=self.min_delta,
            seed=self.seed, workers=self.workers, record_wallclock=self.record_wallclock,
        )

    def output_path(self) -> Path:
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p

    # ------------------------------------------------------------ text form

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, origin: str = "<config>") -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected 'key = value' in {origin}")
            key, _, val = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ConfigError(key, f"unknown key (line {lineno} of {origin})")
            values[key] = _coerce(key, types[key], val)
        return cls(**values).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        return cls.loads(text, str(path))


def _coerce(key: str, typ: str, val: str):
    try:
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        if typ == "bool":
            low = val.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(val)
    except ValueError:
        raise ConfigError(key, f"expected {typ}, got {val!r}") from None
    return val


# ---------------------------------------------------------------- data


def load_dataset(cfg: ExperimentConfig) -> dk.TimeSeriesDataset:
    if cfg.data_source == "csv":
        return dk.load_csv(cfg.data_path)
    ds, _ = dk.generate_synthetic(cfg.synth_nodes, cfg.synth_steps, cfg.synth_seed, cfg.synth_noise,
                                  offset_scale=cfg.synth_offset_scale, level=cfg.synth_level)
    return ds


# ---------------------------------------------------------------- single run

SUMMARY_COLUMNS = ["strategy", "seed", "best_round", "rounds_run", "mae", "rmse", "mape", "corr",
                   "bytes_up", "bytes_down"]


def execute(cfg: ExperimentConfig, out_dir: Path | None = None) -> RunResult:
    """Run one experiment and write metrics.csv, summary.csv, config.resolved and checkpoints."""
    out = out_dir or cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg)
    if cfg.clients > ds.num_nodes:
        raise ConfigError("clients", f"{cfg.clients} clients exceed {ds.num_nodes} nodes")
    try:
        data = prepare_data(ds, cfg.history, cfg.horizon, cfg.clients)
    except dk.ConfigurationError as exc:
        raise ConfigError("history/horizon", str(exc)) from None
    (out / "config.resolved").write_text(cfg.dumps(), encoding="utf-8")
    strategy = cfg.strategy_kind
    result = run_rounds(cfg.federation(), data)
    (out / "metrics.csv").write_text(reports_csv(result.reports, strategy), encoding="utf-8")
    if result.best_global is not None:
        save_checkpoint(out / "best.params", result.best_global)
    else:
        for k, p in enumerate(result.best_models):
            save_checkpoint(out / f"best_client{k}.params", p)
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerow(_summary_row(cfg, result))
    return result


def _summary_row(cfg: ExperimentConfig, result: RunResult) -> list:
    m = result.final_test
    up = sum(r.bytes_up for r in result.reports)
    down = sum(r.bytes_down for r in result.reports)
    metrics = [repr(m.mae), repr(m.rmse), repr(m.mape), repr(m.corr)] if m else ["", "", "", ""]
    best = "" if result.best_round is None else result.best_round
    return [cfg.strategy_kind.value, cfg.seed, best, len(result.reports)] + metrics + [up, down]


def run_experiment(config_path) -> int:
    """CLI-style wrapper: 0 on success, 1 on training failure, 2 on config error."""
    try:
        cfg = ExperimentConfig.load(config_path)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return 2
    try:
        execute(cfg)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported with context, exit status 1
        log.error("run failed: %s", exc)
        return 1
    return 0


# ---------------------------------------------------------------- sweeps


def _child(cfg: ExperimentConfig, out: Path, **changes) -> tuple[str, RunResult | None, str]:
    try:
        child = replace(cfg, **changes).validate()
        return "ok", execute(child, out), ""
    except Exception as exc:  # noqa: BLE001 - isolate child failures per row
        log.warning("child run %s failed: %s", changes, exc)
        return "failed", None, str(exc)


def _metric_cells(result: RunResult | None) -> list[str]:
    if result is None or result.final_test is None:
        return ["", "", "", ""]
    m = result.final_test
    return [repr(m.mae), repr(m.rmse), repr(m.mape), repr(m.corr)]


def sweep(cfg: ExperimentConfig, param: str, values: list[int]) -> Path:
    """One child run per value (same seed); writes ``sweep_<param>.csv`` under output_dir."""
    if param not in SWEEP_PARAMS:
        raise ConfigError("param", f"must be one of {', '.join(SWEEP_PARAMS)}, got {param!r}")
    root = cfg.output_path()
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in values:
        status, result, err = _child(cfg, root / f"sweep_{param}" / f"{param}={v}", **{param: v})
        rows.append([v] + _metric_cells(result) + [status, err])
    path = root / f"sweep_{param}.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "mae", "rmse", "mape", "corr", "status", "error"])
        w.writerows(rows)
    return path


def compare_strategies(cfg: ExperimentConfig, strategies: list[str]) -> Path:
    """Same data and seed for every strategy; one row of final test metrics each."""
    kinds = []
    for s in strategies:
        try:
            kinds.append(StrategyKind.parse(s))
        except ValueError as exc:
            raise ConfigError("strategies", str(exc)) from None
    root = cfg.output_path()
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for kind in kinds:
        status, result, err = _child(cfg, root / "compare" / kind.value, strategy=kind.value)
        up = sum(r.bytes_up for r in result.reports) if result else ""
        down = sum(r.bytes_down for r in result.reports) if result else ""
        rows.append([kind.value, cfg.seed] + _metric_cells(result) + [up, down, status, err])
    path = root / "compare.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "seed", "mae", "rmse", "mape", "corr", "bytes_up", "bytes_down",
                    "status", "error"])
        w.writerows(rows)
    return path


# ---------------------------------------------------------------- utilities


def generate_data(cfg: ExperimentConfig, out_path, adjacency_path=None) -> dk.TimeSeriesDataset:
    ds, w = dk.generate_synthetic(cfg.synth_nodes, cfg.synth_steps, cfg.synth_seed, cfg.synth_noise,
                                  offset_scale=cfg.synth_offset_scale, level=cfg.synth_level)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    dk.save_csv(ds, out_path)
    if adjacency_path:
        np.savetxt(adjacency_path, w, delimiter=",", fmt="%.17g")
    return ds


def run_grad_check(cfg: ExperimentConfig, h: float = 1e-5) -> tuple[float, float]:
    """Finite-difference check of the full local objective on a random model.

    Uses the config's architecture, ``synth_nodes`` nodes, a batch of two
    inputs drawn from U(-1, 1), and the proximal term against a perturbed
    anchor so every parameter block is exercised. Returns (max error, seconds).
    """
    arch = cfg.architecture()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.synth_nodes
    p = init_params(arch, n, cfg.seed)
    anchor = p.with_arrays([a + 0.05 * rng.standard_normal(a.shape) for a in p.arrays()])
    x = rng.uniform(-1, 1, size=(2, n, arch.input_width))
    y = rng.uniform(-1, 1, size=(2, n, arch.output_width))
    start = time.perf_counter()
    err = grad_check(p, x, y, h=h, anchor=anchor, mu=max(cfg.mu, 0.01))
    return err, time.perf_counter() - start


def config_field_names() -> list[str]:
    return [f.name for f in dataclasses.fields(ExperimentConfig)]
