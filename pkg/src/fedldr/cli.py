"""Command-line entry point.

    fedldr run <config>
    fedldr sweep <config> --param {local_epochs,clients} --values 1,2,4
    fedldr compare <config> --strategies FED_LDR,FEDAVG
    fedldr gen-data <spec> --out data.csv [--adjacency w.csv]
    fedldr grad-check <config> [--step 1e-5] [--tol 1e-4]

Exit status: 0 ok, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .harness import ConfigError, ExperimentConfig

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedldr", description="Federated adaptive-graph forecasting simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("config")

    p = sub.add_parser("sweep", help="repeat an experiment over local epochs or client counts")
    p.add_argument("config")
    p.add_argument("--param", required=True, choices=harness.SWEEP_PARAMS)
    p.add_argument("--values", required=True, type=_int_list)

    p = sub.add_parser("compare", help="run several strategies on identical data and seed")
    p.add_argument("config")
    p.add_argument("--strategies", required=True,
                   type=lambda s: [x.strip() for x in s.split(",") if x.strip()])

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    p.add_argument("spec", help="config file; only synth_* keys are used")
    p.add_argument("--out", required=True)
    p.add_argument("--adjacency", help="also write the hidden graph to this CSV")

    p = sub.add_parser("grad-check", help="compare tape gradients with central differences")
    p.add_argument("config")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config if args.command != "gen-data" else args.spec)
        if args.command == "run":
            harness.execute(cfg)
            print(f"wrote {cfg.output_path()}")
        elif args.command == "sweep":
            print(f"wrote {harness.sweep(cfg, args.param, args.values)}")
        elif args.command == "compare":
            print(f"wrote {harness.compare_strategies(cfg, args.strategies)}")
        elif args.command == "gen-data":
            ds = harness.generate_data(cfg, args.out, args.adjacency)
            print(f"wrote {args.out}: {ds.steps} steps x {ds.num_nodes} nodes")
        elif args.command == "grad-check":
            err, secs = harness.run_grad_check(cfg, args.step)
            ok = err < args.tol
            print(f"max relative error {err:.3e} (tol {args.tol:g}, {secs:.2f}s): {'PASS' if ok else 'FAIL'}")
            return EXIT_OK if ok else EXIT_FAILURE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
