"""Command-line entry point: train, eval, synth, benchmark, sweep, gradcheck.

Configs and reports are JSON, datasets and plot series CSV, checkpoints the
versioned JSON container. Numeric outputs are deterministic given the config
and seeds; wall-clock timings live only in the run manifest. Commands refuse
to overwrite a non-empty output target unless --force is passed.

Exit codes: 0 success, 2 usage or config error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    BASELINE_KINDS,
    BaselineConfig,
    benchmark_csv,
    build_baseline,
    run_benchmark,
    run_tau_sweep,
    sweep_csv,
)
from .data import (
    IMAGE_DIM,
    SENSOR_DIM,
    ParseError,
    SensorScaler,
    SplitDataset,
    SyntheticSpec,
    fit_sensor_scaler,
    generate_synthetic,
    load_csv,
    save_csv,
)
from .gradcheck import DEFAULT_TOLERANCE, jitter_parameters, model_gradcheck
from .metrics import compute_metrics, ensemble_predict, ensemble_weights
from .model import FusionModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import (
    EnsembleRunError,
    NonFiniteGradientError,
    NonFiniteLossError,
    TrainConfig,
    train_ensemble,
)

log = logging.getLogger(__name__)

OUT_ROOT_ENV = "CROSSFUSE_OUT_ROOT"


class UsageError(Exception):
    """Bad flags, config, or input files; maps to exit code 2."""


# The training recipe of the original heritage study: AdamW at 5e-4 with
# strong decoupled decay, batch 8, 30 epochs with early stopping and plateau
# halving, 15x augmentation, and the tau=0.3 correlation target.
def reference_run_config() -> "RunConfig":
    return RunConfig(model=ModelConfig(), train=TrainConfig(), n_seeds=10)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline: BaselineConfig | None = None
    n_seeds: int = 10

    def to_dict(self) -> dict:
        out = {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "n_seeds": self.n_seeds,
        }
        if self.baseline is not None:
            out["baseline"] = self.baseline.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"model", "train", "baseline", "n_seeds"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs: dict = {}
        if "model" in d:
            kwargs["model"] = ModelConfig.from_dict(d["model"])
        if "train" in d:
            kwargs["train"] = TrainConfig.from_dict(d["train"])
        if d.get("baseline") is not None:
            kwargs["baseline"] = BaselineConfig.from_dict(d["baseline"])
        if "n_seeds" in d:
            kwargs["n_seeds"] = int(d["n_seeds"])
        return cls(**kwargs)


def _load_run_config(args) -> RunConfig:
    if getattr(args, "reference_defaults", False):
        cfg = reference_run_config()
    elif args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = RunConfig.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise UsageError(f"invalid config {path}: {exc}") from exc
    else:
        raise UsageError("pass --config FILE or --reference-defaults")
    if args.seeds is not None:
        if args.seeds < 1:
            raise UsageError("--seeds must be >= 1")
        cfg = replace(cfg, n_seeds=args.seeds)
    return cfg


def _json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _resolve_out(arg: str | None, command: str) -> Path:
    if arg is not None:
        return Path(arg)
    root = os.environ.get(OUT_ROOT_ENV)
    if root is None:
        raise UsageError(f"pass --out or set {OUT_ROOT_ENV}")
    return Path(root) / command


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(
                f"output directory {path} is not empty; pass --force to overwrite"
            )
    path.mkdir(parents=True, exist_ok=True)


def _prepare_file(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"output file {path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)


def _load_dataset(path_arg: str) -> SplitDataset:
    path = Path(path_arg)
    if not path.exists():
        raise UsageError(f"data file not found: {path}")
    try:
        return load_csv(path)
    except ParseError as exc:
        raise UsageError(f"invalid data file: {exc}") from exc


def _standardized(data: SplitDataset) -> tuple[SplitDataset, SensorScaler]:
    scaler = fit_sensor_scaler(data.train)
    return scaler.transform(data), scaler


def _write_manifest(out_dir: Path, command: str, config: dict, seeds: list[int],
                    artifacts: list[str], started: float) -> None:
    manifest = {
        "tool": "crossfuse",
        "version": __version__,
        "command": command,
        "config": config,
        "seeds": seeds,
        "artifacts": sorted(artifacts),
        "timings": {"wall_seconds": time.time() - started},
    }
    (out_dir / "manifest.json").write_text(_json_text(manifest), encoding="utf-8")


def _ensemble_metrics(models, records, data: SplitDataset) -> dict:
    test_batch = models[0].make_batch(data.test)
    weights = ensemble_weights([r.best_val_accuracy for r in records])
    probs, labels = ensemble_predict(models, weights, test_batch)
    report = compute_metrics(test_batch.labels, labels,
                             n_classes=models[0].config.n_classes)
    per_seed = []
    for model, record in zip(models, records):
        pred = model.predict_proba(test_batch).argmax(axis=1)
        per_seed.append({
            "seed": record.seed,
            "best_epoch": record.best_epoch,
            "stopped_epoch": record.stopped_epoch,
            "best_val_accuracy": record.best_val_accuracy,
            "test_accuracy": float((pred == test_batch.labels).mean()),
        })
    return {
        "ensemble": report.to_dict(),
        "ensemble_weights": weights.to_list(),
        "per_seed": per_seed,
        "mean_seed_test_accuracy": float(np.mean([p["test_accuracy"]
                                                  for p in per_seed])),
        "n_seeds": len(models),
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    started = time.time()
    cfg = _load_run_config(args)
    raw = _load_dataset(args.data)
    data, scaler = _standardized(raw)
    out_dir = _resolve_out(args.out, "train")
    _prepare_dir(out_dir, args.force)
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    (out_dir / "records").mkdir(exist_ok=True)
    (out_dir / "logs").mkdir(exist_ok=True)

    results = train_ensemble(cfg.model, cfg.train, data,
                             n_seeds=cfg.n_seeds, jobs=args.jobs)
    models = [m for m, _ in results]
    records = [r for _, r in results]

    artifacts = ["config.json", "preprocess.json", "metrics.json"]
    (out_dir / "config.json").write_text(_json_text(cfg.to_dict()),
                                         encoding="utf-8")
    (out_dir / "preprocess.json").write_text(_json_text(scaler.to_dict()),
                                             encoding="utf-8")
    for model, record in zip(models, records):
        ckpt = f"checkpoints/seed_{record.seed:04d}.json"
        save_checkpoint(model, out_dir / ckpt)
        rec = f"records/seed_{record.seed:04d}.json"
        rec_dict = record.to_dict()
        steps = rec_dict.pop("steps")
        (out_dir / rec).write_text(_json_text(rec_dict), encoding="utf-8")
        log_path = f"logs/seed_{record.seed:04d}.jsonl"
        with (out_dir / log_path).open("w", encoding="utf-8") as fh:
            for s in steps:
                fh.write(json.dumps(s, sort_keys=True) + "\n")
        artifacts += [ckpt, rec, log_path]

    metrics = _ensemble_metrics(models, records, data)
    (out_dir / "metrics.json").write_text(_json_text(metrics), encoding="utf-8")
    _write_manifest(out_dir, "train", cfg.to_dict(),
                    [r.seed for r in records], artifacts, started)
    log.info("ensemble test accuracy %.4f over %d seeds -> %s",
             metrics["ensemble"]["accuracy"], cfg.n_seeds, out_dir)
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.checkpoints)
    ckpt_dir = run_dir / "checkpoints"
    if not ckpt_dir.is_dir():
        raise UsageError(f"no checkpoints directory under {run_dir}")
    ckpts = sorted(ckpt_dir.glob("seed_*.json"))
    if not ckpts:
        raise UsageError(f"no seed checkpoints found in {ckpt_dir}")
    preprocess = run_dir / "preprocess.json"
    if not preprocess.exists():
        raise UsageError(f"missing {preprocess}")
    scaler = SensorScaler.from_dict(
        json.loads(preprocess.read_text(encoding="utf-8")))
    raw = _load_dataset(args.data)
    data = scaler.transform(raw)
    samples = data.split(args.split)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty in {args.data}")

    models, val_accuracies = [], []
    for ckpt in ckpts:
        models.append(load_checkpoint(ckpt))
        record_path = run_dir / "records" / ckpt.name
        if not record_path.exists():
            raise UsageError(f"missing train record {record_path}")
        record = json.loads(record_path.read_text(encoding="utf-8"))
        val_accuracies.append(record["best_val_accuracy"])

    batch = models[0].make_batch(samples)
    weights = ensemble_weights(val_accuracies)
    probs, labels = ensemble_predict(models, weights, batch)
    report = compute_metrics(batch.labels, labels,
                             n_classes=models[0].config.n_classes)
    payload = {
        "split": args.split,
        "n_models": len(models),
        "ensemble_weights": weights.to_list(),
        "metrics": report.to_dict(),
    }
    text = _json_text(payload)
    if args.out is not None:
        out = Path(args.out)
        _prepare_file(out, args.force)
        out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise UsageError(f"spec file not found: {spec_path}")
    try:
        spec = SyntheticSpec.from_json(spec_path)
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from exc
    if spec.d_s != SENSOR_DIM or spec.d_i != IMAGE_DIM:
        raise UsageError(
            f"the CSV schema is fixed at d_s={SENSOR_DIM}, d_i={IMAGE_DIM}; "
            f"got d_s={spec.d_s}, d_i={spec.d_i}"
        )
    out = Path(args.out) if args.out else _resolve_out(None, "synth") / "data.csv"
    _prepare_file(out, args.force)
    dataset = generate_synthetic(spec)
    save_csv(dataset, out)
    sizes = dataset.sizes()
    log.info("wrote %d samples (%d/%d/%d) to %s", sum(sizes), *sizes, out)
    return 0


def cmd_benchmark(args) -> int:
    started = time.time()
    cfg = _load_run_config(args)
    kinds = list(BASELINE_KINDS) if args.kinds is None \
        else [k.strip() for k in args.kinds.split(",") if k.strip()]
    raw = _load_dataset(args.data)
    data, _ = _standardized(raw)
    out_dir = _resolve_out(args.out, "benchmark")
    _prepare_dir(out_dir, args.force)
    try:
        report = run_benchmark(data, cfg.train, kinds=kinds,
                               model_cfg=cfg.model, baseline_cfg=cfg.baseline,
                               n_seeds=cfg.n_seeds, jobs=args.jobs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    (out_dir / "benchmark.json").write_text(_json_text(report), encoding="utf-8")
    (out_dir / "benchmark.csv").write_text(benchmark_csv(report), encoding="utf-8")
    _write_manifest(out_dir, "benchmark", cfg.to_dict(),
                    list(range(cfg.train.seed, cfg.train.seed + cfg.n_seeds)),
                    ["benchmark.json", "benchmark.csv"], started)
    log.info("ranking: %s", " > ".join(report["ranking"]))
    return 0


def cmd_sweep(args) -> int:
    started = time.time()
    cfg = _load_run_config(args)
    try:
        taus = [float(t) for t in args.taus.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --taus list: {exc}") from exc
    raw = _load_dataset(args.data)
    data, _ = _standardized(raw)
    out_dir = _resolve_out(args.out, "sweep")
    _prepare_dir(out_dir, args.force)
    try:
        report = run_tau_sweep(data, cfg.train, taus=taus, model_cfg=cfg.model,
                               n_seeds=cfg.n_seeds, jobs=args.jobs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    (out_dir / "sweep.json").write_text(_json_text(report), encoding="utf-8")
    (out_dir / "tau_curve.csv").write_text(sweep_csv(report), encoding="utf-8")
    _write_manifest(out_dir, "sweep", cfg.to_dict(),
                    list(range(cfg.train.seed, cfg.train.seed + cfg.n_seeds)),
                    ["sweep.json", "tau_curve.csv"], started)
    return 0


def _gradcheck_toy_models():
    toy_model = ModelConfig(d_sensor=4, d_image=6, d_latent=8, num_heads=2,
                            dropout=0.4, head_hidden=8)
    yield "fusion", FusionModel.init(toy_model, seed=0)
    for kind in BASELINE_KINDS:
        toy = dict(d_sensor=4, d_image=6, num_heads=2, hidden_dim=8)
        if kind not in ("sensor_only", "image_only"):
            toy.update(latent_dim=8, num_latents=2)
        yield kind, build_baseline(BaselineConfig(kind=kind, **toy), seed=0)


def cmd_gradcheck(args) -> int:
    from .data import Sample, make_batch

    rng = np.random.default_rng(2024)
    samples = []
    for i in range(3):
        samples.append(Sample(
            sensor=rng.normal(size=4),
            image=None if i == 1 else rng.normal(size=6),
            label=int(rng.integers(0, 5)),
            site_id=f"gradcheck_{i}",
        ))
    batch = make_batch(samples, image_dim=6)
    worst_overall = 0.0
    failed = False
    for name, model in _gradcheck_toy_models():
        jitter_parameters(model, seed=1)
        errors = model_gradcheck(model, batch, dropout_seed=7)
        worst = max(errors.values())
        worst_overall = max(worst_overall, worst)
        status = "ok" if worst < args.tol else "FAIL"
        print(f"{name:22s} max rel err {worst:.3e}  [{status}]")
        if worst >= args.tol:
            failed = True
            for pname, err in sorted(errors.items(), key=lambda kv: -kv[1])[:5]:
                print(f"  {pname}: {err:.3e}")
    print(f"overall max rel err {worst_overall:.3e} (tolerance {args.tol:g})")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--reference-defaults", action="store_true",
                   help="use the reference heritage-study training recipe")
    p.add_argument("--seeds", type=int, default=None,
                   help="override the number of ensemble seeds")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker threads for independent runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossfuse",
        description="train and evaluate the sensor+image fusion classifier",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--quiet", action="store_true",
                        help="suppress progress lines on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the seed ensemble on a dataset CSV")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--out", help="output run directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run directory on a CSV")
    p.add_argument("--checkpoints", required=True, help="run directory")
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="write metrics JSON here instead of stdout")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    p.add_argument("--spec", required=True, help="synthetic spec JSON")
    p.add_argument("--out", help="output CSV path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("benchmark",
                       help="train all architectures and emit a ranking report")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--kinds", help="comma-separated baseline kinds "
                                   f"(default: {','.join(BASELINE_KINDS)})")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("sweep", help="sweep the diagonal correlation target")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--taus", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck",
                       help="compare backward gradients against finite differences")
    p.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteGradientError, NonFiniteLossError, EnsembleRunError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"unexpected failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
