"""Command line driver: generate, pretrain, run, sweep, verify-report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import nn
from .data import SyntheticConfig, generate, load_dataset, save_dataset
from .experiment import SWEEPS, ExperimentConfig, run_experiment, run_sweep, verify_report, write_report, write_sweep
from .pretrain import PretrainConfig, pretrain, save_checkpoint
from .protocol import MISCLASS_MODES
from .transport import TransportError

SPLITS = ("train", "id_test", "ood_test")


def _load_json(path) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _parse_value(text: str):
    try:
        return float(text) if "." in text else int(text)
    except ValueError:
        return text


def cmd_generate(args) -> int:
    cfg = _load_json(args.config)
    cfg = cfg.get("synthetic", cfg)
    for key in ("patch_size", "num_classes", "train_per_class", "n_id_test", "n_ood_test",
                "artifact", "ood_kind", "noise_sigma", "seed"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    config = SyntheticConfig(**cfg)
    splits = generate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in zip(SPLITS, splits):
        save_dataset(ds, out / f"{name}.bin")
        print(f"{name}: {len(ds)} samples -> {out / f'{name}.bin'}")
    (out / "synthetic.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_pretrain(args) -> int:
    path = Path(args.data) / "train.bin"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file {path}")
    train = load_dataset(path)
    spec = nn.preset(args.network, train.patch_size ** 2, num_classes=train.num_classes, seed=args.seed)
    params, log = pretrain(PretrainConfig(spec, args.epochs, args.batch_size, args.optimizer, args.lr, args.seed), train)
    save_checkpoint(args.out, spec, params)
    final = log[-1]
    print(f"epoch {final['epoch']}: loss {final['loss']:.4f}, train accuracy {final['accuracy']:.4f} -> {args.out}")
    return 0


# flag name -> ExperimentConfig field
RUN_FLAGS = {
    "mode": "mode", "transport": "transport", "role": "role", "addr": "addr",
    "alpha": "alpha", "local_steps": "local_steps", "e_stab": "e_stab", "tau": "tau",
    "r_max": "r_max", "augment": "augment", "misclass": "misclass", "seeds": "seeds",
    "out": "out", "n_id": "n_id", "n_ood": "n_ood", "data": "data_dir",
    "checkpoint": "checkpoint", "workers": "workers", "optimizer": "optimizer", "lr": "learning_rate",
    "batch_size": "batch_size", "network": "network",
}


def experiment_config(args) -> ExperimentConfig:
    cfg = _load_json(args.config)
    for flag, key in RUN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    return ExperimentConfig.from_dict(cfg).validate()


def _summary_lines(report: dict) -> list[str]:
    s = report["summary"]
    return [
        f"mode {report['mode']} misclass {report['misclass']} augment {report['augment']}",
        f"AUROC {s['auroc']['mean']:.4f} +- {s['auroc']['std']:.4f}   FPR95 {s['fpr95']['mean']:.4f} +- {s['fpr95']['std']:.4f}",
        f"MSP AUROC {s['msp_auroc']['mean']:.4f} +- {s['msp_auroc']['std']:.4f}",
        f"mean rounds ID {s['mean_rounds_id']['mean']:.2f}  OOD {s['mean_rounds_ood']['mean']:.2f}",
    ]


def cmd_run(args) -> int:
    config = experiment_config(args)
    report = run_experiment(config)
    if report is None:
        print("source node finished")
        return 0
    if not config.out:
        print("no --out given; report not written", file=sys.stderr)
    else:
        json_path, csv_path = write_report(report, config.out)
        print(f"wrote {json_path} and {csv_path}")
    print("\n".join(_summary_lines(report)))
    return 0


def cmd_sweep(args) -> int:
    config = experiment_config(args)
    if config.transport != "inproc":
        raise ValueError("sweeps run in-process only")
    values = [_parse_value(v) for v in args.values.split(",")] if args.values else None
    result = run_sweep(config, args.sweep, values)
    if config.out:
        json_path, csv_path = write_sweep(result, config.out)
        print(f"wrote {json_path} and {csv_path}")
    for point in result["points"]:
        s = point["report"]["summary"]
        print(f"{args.sweep}={point['point']}: AUROC {s['auroc']['mean']:.4f}  mean rounds {s['mean_rounds']['mean']:.2f}")
    return 0


def cmd_verify(args) -> int:
    problems = verify_report(args.report)
    for p in problems:
        print(p)
    print("report consistent" if not problems else f"{len(problems)} mismatches")
    return 0 if not problems else 1


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def _add_run_flags(p):
    p.add_argument("--config", help="JSON file with ExperimentConfig fields; flags override it")
    p.add_argument("--mode", choices=("centralized", "dison", "cc_dison"))
    p.add_argument("--transport", choices=("inproc", "tcp"))
    p.add_argument("--role", choices=("source", "target"))
    p.add_argument("--addr", help="host:port for tcp mode")
    p.add_argument("--alpha", type=float)
    p.add_argument("--local-steps", type=int)
    p.add_argument("--e-stab", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--r-max", type=int)
    p.add_argument("--augment", choices=("none", "source_only", "target_only", "both"))
    p.add_argument("--misclass", choices=MISCLASS_MODES)
    p.add_argument("--seeds", type=_seeds, help="comma separated, e.g. 0,1,2")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n-id", type=int)
    p.add_argument("--n-ood", type=int)
    p.add_argument("--data", help="directory written by generate (default: generate per seed)")
    p.add_argument("--checkpoint", help="checkpoint written by pretrain (default: pretrain per seed)")
    p.add_argument("--workers", type=int)
    p.add_argument("--optimizer", choices=("sgd", "sgd_momentum", "adam"))
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--network", choices=tuple(nn.PRESETS))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dison", description="Isolation-network OOD scoring experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write the synthetic train/id_test/ood_test files")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--patch-size", type=int)
    g.add_argument("--num-classes", type=int)
    g.add_argument("--train-per-class", type=int)
    g.add_argument("--n-id-test", type=int)
    g.add_argument("--n-ood-test", type=int)
    g.add_argument("--artifact", choices=("corner_square", "stripe"))
    g.add_argument("--ood-kind", choices=("artifact", "intensity_shift"))
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="train the primary classifier and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--network", choices=tuple(nn.PRESETS), default="base")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--optimizer", choices=("sgd", "sgd_momentum", "adam"), default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("run", help="score a target pool and write report.json + targets.csv")
    _add_run_flags(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run an ablation sweep and write a tidy CSV")
    _add_run_flags(s)
    s.add_argument("--sweep", choices=tuple(SWEEPS), required=True)
    s.add_argument("--values", help="comma separated sweep points (default: the standard grid)")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify-report", help="recompute aggregates from targets.csv")
    v.add_argument("report", help="directory holding report.json and targets.csv")
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, TypeError, FileNotFoundError, TransportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
