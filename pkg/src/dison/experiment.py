"""Experiment driver: score a pool of ID/OOD targets, aggregate, write and verify reports."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import nn
from .data import AUGMENT_VARIANTS, AugmentPolicy, Dataset, SyntheticConfig, generate, load_dataset
from .isolation import ConvergenceConfig, run_centralized
from .metrics import auroc, fpr_at_tpr, msp_score, quantiles
from .pretrain import PretrainConfig, evaluate_accuracy, load_checkpoint, pretrain
from .protocol import RoundPlan, SourceNode, TargetNode, run_dison
from .transport import TcpListener, tcp_dial

log = logging.getLogger(__name__)

MODES = ("centralized", "dison", "cc_dison")
TCP_TIMEOUT = 300.0  # peers may still be pretraining

CSV_COLUMNS = (
    "seed", "target_id", "split", "ood", "score", "censored", "predicted_class",
    "forced_wrong", "msp", "rounds_run", "final_checksum",
)


@dataclass
class ExperimentConfig:
    mode: str = "cc_dison"
    transport: str = "inproc"
    role: str | None = None
    addr: str = "127.0.0.1:5701"
    # protocol
    alpha: float = 0.8
    local_steps: int | None = None
    batch_size: int = 16
    n_target: int = 4
    misclass: str = "none"
    # convergence
    e_stab: int = 5
    tau: float = 0.85
    r_max: int = 50
    source_eval_subsample: int | None = None
    # isolation optimizer
    optimizer: str = "sgd"
    learning_rate: float = 0.01
    # augmentation
    augment: str = "both"
    flip_prob: float = 0.5
    max_shift: int = 2
    aug_noise: float = 0.05
    # data and primary model
    synthetic: dict = field(default_factory=dict)
    data_dir: str | None = None
    checkpoint: str | None = None
    network: str = "base"
    pretrain_epochs: int = 50
    pretrain_batch_size: int = 32
    pretrain_lr: float = 1e-3
    # pool and seeds
    n_id: int = 50
    n_ood: int = 50
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    workers: int = 1
    out: str | None = None

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.transport not in ("inproc", "tcp"):
            raise ValueError("transport must be inproc or tcp")
        if self.transport == "tcp":
            if self.role not in ("source", "target"):
                raise ValueError("tcp transport needs --role source or --role target")
            if self.mode == "centralized":
                raise ValueError("centralized mode has no network transport")
        if self.augment not in AUGMENT_VARIANTS:
            raise ValueError(f"augment must be one of {tuple(AUGMENT_VARIANTS)}")
        if self.n_id < 1 or self.n_ood < 1:
            raise ValueError("AUROC is undefined without at least one ID and one OOD target")
        if not self.seeds:
            raise ValueError("at least one seed is needed")
        if self.misclass != "none" and self.mode != "cc_dison":
            raise ValueError("--misclass only applies to cc_dison")
        self.plan()
        self.convergence()
        return self

    def plan(self) -> RoundPlan:
        return RoundPlan(
            local_steps=self.local_steps, max_rounds=self.r_max, alpha=self.alpha,
            batch_size=self.batch_size, class_conditional=self.mode == "cc_dison",
            misclass_mode=self.misclass,
        )

    def convergence(self) -> ConvergenceConfig:
        return ConvergenceConfig(self.e_stab, self.tau, self.r_max, self.source_eval_subsample)

    def optimizer_state(self) -> nn.OptimizerState:
        return nn.OptimizerState(self.optimizer, self.learning_rate)

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy.variant(self.augment, flip_prob=self.flip_prob,
                                     max_shift=self.max_shift, noise_sigma=self.aug_noise)

    def synthetic_config(self, seed: int) -> SyntheticConfig:
        return SyntheticConfig(**{**self.synthetic, "seed": seed})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SeedContext:
    seed: int
    spec: nn.NetworkSpec
    pretrained: nn.ParameterVector
    train: Dataset | None
    id_test: Dataset
    ood_test: Dataset
    source_size: int
    pretrain_log: list


def prepare(config: ExperimentConfig, seed: int, need_train: bool = True) -> SeedContext:
    """Datasets and the primary model for one seed (generated, or loaded from files)."""
    if config.data_dir:
        d = Path(config.data_dir)
        for name in ("train", "id_test", "ood_test"):
            if not (d / f"{name}.bin").exists():
                raise FileNotFoundError(f"missing dataset file {d / f'{name}.bin'}")
        train = load_dataset(d / "train.bin")
        id_test, ood_test = load_dataset(d / "id_test.bin"), load_dataset(d / "ood_test.bin")
    else:
        train, id_test, ood_test = generate(config.synthetic_config(seed))
    if config.checkpoint:
        spec, pretrained = load_checkpoint(config.checkpoint)
        plog = []
    else:
        spec = nn.preset(config.network, train.patch_size ** 2, num_classes=train.num_classes, seed=seed)
        pretrained, plog = pretrain(
            PretrainConfig(spec, config.pretrain_epochs, config.pretrain_batch_size, "adam", config.pretrain_lr, seed),
            train,
        )
    if len(id_test) < config.n_id or len(ood_test) < config.n_ood:
        raise ValueError(f"pool of {config.n_id}/{config.n_ood} targets exceeds the test splits "
                         f"({len(id_test)}/{len(ood_test)})")
    return SeedContext(seed, spec, pretrained, train if need_train else None,
                       id_test.subset(slice(0, config.n_id)), ood_test.subset(slice(0, config.n_ood)),
                       len(train), plog)


def target_pool(ctx: SeedContext):
    """(target_id, split, is_ood, pixels) for every target, ID first."""
    pool = [(f"id-{i}", "id_test", False, ctx.id_test.x[i]) for i in range(len(ctx.id_test))]
    pool += [(f"ood-{i}", "ood_test", True, ctx.ood_test.x[i]) for i in range(len(ctx.ood_test))]
    return pool


def target_seed(seed: int, index: int) -> tuple[int, int]:
    return (seed, index)


def score_target(config: ExperimentConfig, ctx: SeedContext, index: int, is_ood: bool, x_t) -> dict:
    tseed = target_seed(ctx.seed, index)
    if config.mode == "centralized":
        res = run_centralized(ctx.spec, ctx.pretrained, ctx.train.x, x_t, config.optimizer_state(),
                              config.convergence(), config.n_target, config.batch_size, config.policy(), tseed)
        return {"score": res.score, "censored": res.censored, "predicted_class": None,
                "forced_wrong": False, "rounds_run": len(res.target_scores), "final_checksum": None}
    plan = config.plan()
    wrong = plan.force_wrong(is_ood)
    res = run_dison(ctx.spec, ctx.pretrained, ctx.train, x_t, plan, config.convergence(),
                    config.optimizer_state(), config.policy(), tseed, force_wrong_class=wrong)
    return {"score": res.score, "censored": res.censored, "predicted_class": res.predicted_class,
            "forced_wrong": wrong, "rounds_run": len(res.rounds), "final_checksum": res.final_checksum}


def _records(ctx: SeedContext, pool, results) -> list[dict]:
    msp = msp_score(ctx.spec, ctx.pretrained, np.stack([p[3] for p in pool]))
    out = []
    for (tid, split, is_ood, _), m, r in zip(pool, msp, results):
        out.append({"seed": ctx.seed, "target_id": tid, "split": split, "ood": is_ood, "msp": float(m), **r})
    return out


def aggregate(records: list[dict]) -> dict:
    """Metrics for one seed's records; every value is recomputable from the CSV table."""
    ids = [r for r in records if not r["ood"]]
    oods = [r for r in records if r["ood"]]
    s_id = [r["score"] for r in ids]
    s_ood = [r["score"] for r in oods]
    m_id = [r["msp"] for r in ids]
    m_ood = [r["msp"] for r in oods]
    return {
        "auroc": auroc(s_id, s_ood),
        "fpr95": fpr_at_tpr(s_id, s_ood),
        "msp_auroc": auroc(m_id, m_ood),
        "msp_fpr95": fpr_at_tpr(m_id, m_ood),
        "mean_rounds_id": float(np.mean(s_id)),
        "mean_rounds_ood": float(np.mean(s_ood)),
        "mean_rounds": float(np.mean(s_id + s_ood)),
        "quantiles_id": quantiles(s_id),
        "quantiles_ood": quantiles(s_ood),
        "censored_id": int(sum(r["censored"] for r in ids)),
        "censored_ood": int(sum(r["censored"] for r in oods)),
    }


def summarize(per_seed: list[dict]) -> dict:
    """Mean and (population) std over seeds for every scalar metric."""
    out = {}
    for key, value in per_seed[0]["metrics"].items():
        if isinstance(value, list):
            continue
        vals = np.array([p["metrics"][key] for p in per_seed], dtype=float)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def run_seed(config: ExperimentConfig, seed: int) -> tuple[SeedContext, list[dict]]:
    ctx = prepare(config, seed)
    pool = target_pool(ctx)

    def job(i):
        _, _, is_ood, x = pool[i]
        return score_target(config, ctx, i, is_ood, x)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as ex:
            results = list(ex.map(job, range(len(pool))))
    else:
        results = [job(i) for i in range(len(pool))]
    return ctx, _records(ctx, pool, results)


def build_report(config: ExperimentConfig, contexts, records_by_seed) -> dict:
    per_seed = []
    for ctx, recs in zip(contexts, records_by_seed):
        per_seed.append({
            "seed": ctx.seed,
            "metrics": aggregate(recs),
            "primary_accuracy": {
                "id": evaluate_accuracy(ctx.spec, ctx.pretrained, ctx.id_test),
                "ood": evaluate_accuracy(ctx.spec, ctx.pretrained, ctx.ood_test),
            },
            "pretrain_final": ctx.pretrain_log[-1] if ctx.pretrain_log else None,
        })
    return {
        "config": config.to_dict(),
        "mode": config.mode,
        "misclass": config.misclass,
        "augment": config.augment,
        "per_seed": per_seed,
        "summary": summarize(per_seed),
        "records": [r for recs in records_by_seed for r in recs],
    }


def run_experiment(config: ExperimentConfig) -> dict:
    config.validate()
    if config.transport == "tcp":
        return run_tcp(config)
    contexts, records = [], []
    for seed in config.seeds:
        ctx, recs = run_seed(config, seed)
        log.info("seed %s: AUROC %.3f", seed, aggregate(recs)["auroc"])
        contexts.append(ctx)
        records.append(recs)
    return build_report(config, contexts, records)


def run_tcp(config: ExperimentConfig) -> dict | None:
    """One side of a two-process run. The target side holds ground truth and writes the report."""
    plan = config.plan()
    if config.role == "source":
        listener = TcpListener(config.addr, timeout=TCP_TIMEOUT)
        try:
            for seed in config.seeds:
                ctx = prepare(config, seed)
                for i in range(config.n_id + config.n_ood):
                    node = SourceNode(ctx.spec, ctx.pretrained, ctx.train, plan, config.convergence(),
                                      config.optimizer_state(), config.policy(), target_seed(seed, i))
                    with listener.accept() as ep:
                        node.run(ep)
        finally:
            listener.close()
        return None

    contexts, records = [], []
    for seed in config.seeds:
        ctx = prepare(config, seed, need_train=False)
        pool = target_pool(ctx)
        steps_plan = plan.resolved(ctx.source_size)
        results = []
        for i, (_, _, is_ood, x) in enumerate(pool):
            wrong = plan.force_wrong(is_ood)
            node = TargetNode(ctx.spec, ctx.pretrained, x, steps_plan, config.convergence(),
                              config.optimizer_state(), config.policy(), target_seed(seed, i), wrong)
            with tcp_dial(config.addr, timeout=TCP_TIMEOUT, recv_timeout=TCP_TIMEOUT) as ep:
                tlog = node.run(ep)
            results.append({"score": tlog.score, "censored": tlog.censored,
                            "predicted_class": tlog.predicted_class, "forced_wrong": wrong,
                            "rounds_run": len(tlog.scores),
                            "final_checksum": tlog.checksums[-1] if tlog.checksums else None})
        contexts.append(ctx)
        records.append(_records(ctx, pool, results))
    return build_report(config, contexts, records)


def write_report(report: dict, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out / "report.json", out / "targets.csv"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_records_csv(report["records"], csv_path)
    return json_path, csv_path


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in CSV_COLUMNS})


def read_records_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({
                "seed": int(row["seed"]),
                "target_id": row["target_id"],
                "split": row["split"],
                "ood": row["ood"] == "True",
                "score": int(row["score"]),
                "censored": row["censored"] == "True",
                "msp": float(row["msp"]),
            })
    return out


def _close(a, b) -> bool:
    if isinstance(a, list):
        return len(a) == len(b) and all(_close(x, y) for x, y in zip(a, b))
    return abs(float(a) - float(b)) <= 1e-12 * max(1.0, abs(float(a)))


def verify_report(out_dir) -> list[str]:
    """Recompute every aggregate from targets.csv; return a list of mismatches (empty if consistent)."""
    out = Path(out_dir)
    report = json.loads((out / "report.json").read_text())
    records = read_records_csv(out / "targets.csv")
    problems = []
    per_seed = []
    for entry in report["per_seed"]:
        recs = [r for r in records if r["seed"] == entry["seed"]]
        if not recs:
            problems.append(f"seed {entry['seed']}: no rows in targets.csv")
            continue
        metrics = aggregate(recs)
        per_seed.append({"metrics": metrics})
        for key, value in metrics.items():
            if not _close(value, entry["metrics"][key]):
                problems.append(f"seed {entry['seed']}: {key} is {entry['metrics'][key]}, recomputed {value}")
    if per_seed and len(per_seed) == len(report["per_seed"]):
        for key, stats in summarize(per_seed).items():
            for stat in ("mean", "std"):
                if not _close(stats[stat], report["summary"][key][stat]):
                    problems.append(f"summary {key}.{stat} is {report['summary'][key][stat]}, recomputed {stats[stat]}")
    return problems


SWEEPS = {
    "alpha": ("alpha", [0.4, 0.5, 0.8, 0.95]),
    "augment": ("augment", list(AUGMENT_VARIANTS)),
    "width": ("network", list(nn.PRESETS)),
}

TIDY_COLUMNS = ("sweep", "point", "seed", "auroc", "fpr95", "msp_auroc", "mean_rounds",
                "mean_rounds_id", "mean_rounds_ood", "median_rounds_id", "median_rounds_ood")


def run_sweep(config: ExperimentConfig, sweep: str, values=None) -> dict:
    """cmd_run per sweep point; returns the per-point reports and one tidy row per (point, seed)."""
    key, defaults = SWEEPS[sweep]
    values = list(defaults if values is None else values)
    points, rows = [], []
    for value in values:
        cfg = replace(config, **{key: value})
        report = run_experiment(cfg)
        points.append({"point": value, "report": report})
        for entry in report["per_seed"]:
            m = entry["metrics"]
            rows.append({
                "sweep": sweep, "point": value, "seed": entry["seed"],
                "auroc": m["auroc"], "fpr95": m["fpr95"], "msp_auroc": m["msp_auroc"],
                "mean_rounds": m["mean_rounds"], "mean_rounds_id": m["mean_rounds_id"],
                "mean_rounds_ood": m["mean_rounds_ood"],
                "median_rounds_id": m["quantiles_id"][1], "median_rounds_ood": m["quantiles_ood"][1],
            })
    return {"sweep": sweep, "values": values, "config": config.to_dict(), "points": points, "rows": rows}


def write_sweep(result: dict, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, point in enumerate(result["points"]):
        write_report(point["report"], out / f"point_{i}_{point['point']}")
    json_path, csv_path = out / "sweep.json", out / "sweep.csv"
    json_path.write_text(json.dumps(
        {k: v for k, v in result.items() if k != "points"} | {"points": [p["point"] for p in result["points"]]},
        indent=2, sort_keys=True) + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TIDY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(result["rows"])
    return json_path, csv_path


def dump_embeddings(spec: nn.NetworkSpec, params: nn.ParameterVector, x, path) -> np.ndarray:
    """Latent features of ``x`` saved as .npy, for external visualization."""
    z = nn.features(spec, params, np.atleast_2d(np.asarray(x, dtype=params.values.dtype)))
    np.save(path, z)
    return z
