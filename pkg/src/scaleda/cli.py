"""Config-driven experiment runner.

Subcommands::

    gen-data        write source / target / val datasets and a manifest
    train           one training run with the configured flags
    ablate          the seven-row component ablation, median over seeds
    resample-bench  the seven-row resampling-baseline comparison
    eval            evaluate a checkpoint on a dataset
    report          loss curves, metrics, attention mass and embeddings of a run

Every command takes ``--config`` (YAML, see ``configs/example.yaml``).
Exit codes: 0 success, 2 configuration or usage error, 3 run failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import shutil
import statistics
import sys
import time
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import torch
import yaml

from . import segnet
from .core import Dataset, Location, Split
from .metrics import EvalReport, evaluate, render_table
from .resample import resample_dataset
from .sam import attention, attention_report, pool_and_concat
from .scenegen import CLASS_NAMES, PROFILES, SceneSpec, generate, read_dataset, stock_profile, write_dataset
from .trainer import OptimizerSpec, TrainConfig, run_datasets

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3

# TrainConfig fields the runner fills in itself
_MANAGED_TRAIN_KEYS = {"source_dir", "target_dir", "val_dir", "checkpoint_dir", "resume"}


class ConfigError(ValueError):
    pass


class RunError(RuntimeError):
    pass


# -- configuration -----------------------------------------------------------

@dataclass
class DomainData:
    profile: str = "loc-A"
    gsd_m: float = 0.05
    tile_px: int = 320
    num_tiles: int = 16
    seed: int = 1


@dataclass
class DataConfig:
    source: DomainData = field(default_factory=DomainData)
    target: DomainData = field(default_factory=lambda: DomainData("loc-B", 0.09, 176, 16, 2))
    val_tiles: int = 8
    val_seed: int = 3


@dataclass
class MetricsConfig:
    margin: float = 1.0


@dataclass
class EvalConfig:
    checkpoint: Optional[str] = None
    dataset: Optional[str] = None


@dataclass
class ExperimentConfig:
    out_dir: str = "runs/default"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> list[str]:
        problems = []
        if not self.seeds:
            problems.append("seeds must not be empty")
        for name in ("source", "target"):
            d = getattr(self.data, name)
            if d.profile not in PROFILES:
                problems.append(f"data.{name}.profile: unknown profile {d.profile!r}")
                continue
            problems += [f"data.{name}: {p}" for p in scene_spec(d).validate()]
        if self.data.val_tiles < 1:
            problems.append("data.val_tiles must be >= 1")
        problems += [f"train: {p}" for p in self.train.validate()]
        if self.metrics.margin < 0:
            problems.append("metrics.margin must be >= 0")
        return problems


def _is_instance(value, tp) -> bool:
    if tp is Any:
        return True
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        return any(_is_instance(value, a) for a in typing.get_args(tp))
    if tp is type(None):
        return value is None
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if origin in (list, tuple):
        return isinstance(value, (list, tuple))
    return isinstance(value, tp)


def _build(cls, data, path: str, skip: frozenset = frozenset(), base=None):
    """Strictly typed dataclass from a mapping; missing keys keep ``base``'s values."""
    if base is None:
        base = cls()
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)} - skip
    unknown = sorted(set(data) - known)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key {where}{unknown[0]}")
    kwargs = {}
    for name in known & set(data):
        tp, value, here = hints[name], data[name], f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, here, base=getattr(base, name))
            continue
        if not _is_instance(value, tp):
            raise ConfigError(f"{here}: expected {getattr(tp, '__name__', tp)}, got {value!r}")
        origin = typing.get_origin(tp)
        if origin is tuple:
            value = tuple(value)
        elif origin is list:
            elem = typing.get_args(tp)[0]
            if not all(_is_instance(v, elem) for v in value):
                raise ConfigError(f"{here}: every entry must be {elem.__name__}")
            value = list(value)
        elif tp is float:
            value = float(value)
        kwargs[name] = value
    try:
        return replace(base, **kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d or {})
    train = d.pop("train", None)
    cfg = _build(ExperimentConfig, d, "")
    if train is not None:
        train = dict(train)
        opt = train.pop("optimizer", None)
        t = _build(TrainConfig, train, "train", frozenset(_MANAGED_TRAIN_KEYS | {"optimizer"}))
        if opt is not None:
            t = replace(t, optimizer=_build(OptimizerSpec, opt, "train.optimizer"))
        cfg.train = t
    problems = cfg.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    for key in _MANAGED_TRAIN_KEYS:
        d["train"].pop(key)
    d["train"]["optimizer"]["d_betas"] = list(cfg.train.optimizer.d_betas)
    return d


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from None
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


# -- helpers -----------------------------------------------------------------

def scene_spec(d: DomainData, location=Location.SOURCE, split=Split.TRAIN, seed=None, num_tiles=None, prefix="t"):
    return SceneSpec(seed=d.seed if seed is None else seed, gsd_m=d.gsd_m, tile_px=d.tile_px,
                     location_profile=stock_profile(d.profile),
                     num_tiles=d.num_tiles if num_tiles is None else num_tiles,
                     location=location, split=split, id_prefix=prefix)


@dataclass
class DataDirs:
    source: Path
    target: Path
    val: Path

    @classmethod
    def under(cls, out: Path) -> "DataDirs":
        root = out / "data"
        return cls(root / "source", root / "target", root / "val")


@dataclass
class Datasets:
    source: Dataset
    target: Dataset          # labels kept on disk for the oracle; hidden from adaptation
    val: Dataset

    @property
    def target_unlabelled(self) -> Dataset:
        return Dataset(self.target.tiles, None, self.target.split, self.target.num_classes)


def load_datasets(out: Path) -> Datasets:
    dirs = DataDirs.under(out)
    for p in (dirs.source, dirs.target, dirs.val):
        if not (p / "meta.json").is_file():
            raise RunError(f"dataset missing at {p}; run gen-data first")
    return Datasets(read_dataset(dirs.source), read_dataset(dirs.target), read_dataset(dirs.val))


def _prepare_output(path: Path, force: bool) -> None:
    if path.exists():
        if not force:
            raise ConfigError(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()


def _names(k: int) -> tuple:
    return CLASS_NAMES if k == len(CLASS_NAMES) else tuple(f"class{i}" for i in range(k))


def _train(cfg: ExperimentConfig, tcfg: TrainConfig, source: Dataset, target: Dataset, val: Dataset,
           ckdir: Path, verbose=False):
    tcfg = replace(tcfg, checkpoint_dir=str(ckdir), resume=False)
    return run_datasets(tcfg, source, target, val, verbose=verbose)


# -- gen-data ----------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, out: Path, force: bool) -> dict:
    root = out / "data"
    _prepare_output(root, force)
    dirs = DataDirs.under(out)
    src, tgt = cfg.data.source, cfg.data.target
    write_dataset(generate(scene_spec(src, prefix="s")), dirs.source)
    write_dataset(generate(scene_spec(tgt, Location.TARGET, prefix="t")), dirs.target)
    val_spec = scene_spec(tgt, Location.TARGET, Split.VAL, seed=cfg.data.val_seed, num_tiles=cfg.data.val_tiles,
                          prefix="v")
    write_dataset(generate(val_spec), dirs.val)
    manifest = {
        "theta_gsd_m": src.gsd_m,
        "sigma_gsd_m": tgt.gsd_m,
        "source": asdict(src),
        "target": asdict(tgt),
        "val": {"num_tiles": cfg.data.val_tiles, "seed": cfg.data.val_seed},
        "class_names": list(CLASS_NAMES),
        "note": "target labels are used only by the oracle row and by evaluation",
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {dirs.source}, {dirs.target}, {dirs.val} (theta {src.gsd_m} m, sigma {tgt.gsd_m} m)")
    return manifest


# -- train -------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out: Path, force: bool) -> EvalReport:
    ds = load_datasets(out)
    ckdir = out / "train"
    _prepare_output(ckdir, force)
    res = _train(cfg, cfg.train, ds.source, ds.target_unlabelled, ds.val, ckdir, verbose=True)
    rep = evaluate(res.trainer.g, ds.val, _names(ds.val.num_classes))
    rep.save(ckdir / "eval.json")
    print(render_table([("final", rep)], _names(ds.val.num_classes)))
    return rep


# -- experiment matrices -----------------------------------------------------

FLAGS = ("enable_d_feat", "enable_d_scale", "enable_sam")

ABLATION_ROWS = (
    ("source-only", (False, False, False)),
    ("source-only+SAM", (False, False, True)),
    ("D_feat", (True, False, False)),
    ("D_feat+D_scale", (True, True, False)),
    ("D_feat+SAM", (True, False, True)),
    ("D_feat+D_scale+SAM", (True, True, True)),
    ("oracle", (False, False, False)),
)

# (row, training recipe, evaluation on resampled val)
RESAMPLE_ROWS = (
    ("no-DA native", "no-da", False),
    ("no-DA test-resampled", "no-da", True),
    ("no-DA train-resampled", "no-da-train-resampled", False),
    ("standard-DA native", "std-da", False),
    ("standard-DA test-resampled", "std-da", True),
    ("standard-DA train-resampled", "std-da-train-resampled", False),
    ("ours", "ours", False),
)

RESAMPLE_RECIPES = {
    "no-da": (False, False, False),
    "no-da-train-resampled": (False, False, False),
    "std-da": (True, False, False),
    "std-da-train-resampled": (True, False, False),
    "ours": (True, True, True),
}


def row_train_config(cfg: ExperimentConfig, flags: tuple, seed: int, **extra) -> TrainConfig:
    return replace(cfg.train, seed=seed, **dict(zip(FLAGS, flags)), **extra)


@dataclass
class RowResult:
    name: str
    reports: dict = field(default_factory=dict)      # seed -> EvalReport
    errors: dict = field(default_factory=dict)       # seed -> message

    def median(self) -> Optional[float]:
        vals = [r.miou for r in self.reports.values()]
        return statistics.median(vals) if vals else None

    def median_report(self) -> Optional[EvalReport]:
        """The report of the median-mIoU seed (lower median for even counts)."""
        if not self.reports:
            return None
        ranked = sorted(self.reports.items(), key=lambda kv: (kv[1].miou, kv[0]))
        return ranked[(len(ranked) - 1) // 2][1]


def _run_row(row: RowResult, seed: int, fn) -> None:
    t0 = time.time()
    try:
        row.reports[seed] = fn()
        print(f"  {row.name:30s} seed {seed}: mIoU {100 * row.reports[seed].miou:.2f} ({time.time() - t0:.0f}s)",
              flush=True)
    except Exception as e:  # a failed row is recorded; the matrix carries on
        log.exception("row %s seed %d failed", row.name, seed)
        row.errors[seed] = f"{type(e).__name__}: {e}"
        print(f"  {row.name:30s} seed {seed}: FAILED ({row.errors[seed]})", flush=True)


def _matrix_summary(rows: list[RowResult], oracle: Optional[str], names) -> dict:
    oracle_med = None
    if oracle is not None:
        oracle_med = next(r for r in rows if r.name == oracle).median()
    out = {}
    for r in rows:
        med = r.median()
        rep = r.median_report()
        out[r.name] = {
            "median_miou": med,
            "median_miou_pct": None if med is None else round(100 * med, 2),
            "miou_by_seed": {str(s): rep_.miou for s, rep_ in sorted(r.reports.items())},
            "per_class_iou_median_seed": None if rep is None else rep.per_class_iou,
            "iou_gap": None if med is None or oracle_med is None else oracle_med - med,
            "errors": {str(s): e for s, e in r.errors.items()},
        }
    return out


def _table(rows: list[RowResult], summary: dict, names) -> str:
    table_rows = []
    for r in rows:
        rep = r.median_report()
        if rep is None:
            continue
        s = summary[r.name]
        table_rows.append((r.name, EvalReport(rep.per_class_iou, s["median_miou"], None, s["iou_gap"], names)))
    return render_table(table_rows, names)


def _verdicts(summary: dict, checks, margin_pts: float) -> list[dict]:
    out = []
    for lo, op, hi in checks:
        a, b = summary[lo]["median_miou"], summary[hi]["median_miou"]
        if a is None or b is None:
            ok = False
        elif op == "<":
            ok = 100 * (b - a) >= margin_pts
        else:
            ok = b >= a
        out.append({"claim": f"{lo} {op} {hi}", "holds": ok,
                    "difference_pts": None if a is None or b is None else round(100 * (b - a), 2)})
    return out


ABLATION_CHECKS = (
    ("source-only", "<", "D_feat"),
    ("D_feat", "<", "D_feat+D_scale"),
    ("D_feat+D_scale", "<=", "D_feat+D_scale+SAM"),
    ("D_feat+D_scale+SAM", "<", "oracle"),
    ("source-only", "<", "source-only+SAM"),
)

RESAMPLE_CHECKS = (
    ("no-DA native", "<", "ours"),
    ("standard-DA test-resampled", "<", "ours"),
)


def _write_matrix(root: Path, title: str, rows, summary, verdicts, names) -> None:
    table = _table(rows, summary, names)
    (root / "results.json").write_text(json.dumps({"rows": summary, "verdicts": verdicts}, indent=2))
    lines = [f"# {title}", "", "Median over seeds; per-class IoU from the median-mIoU seed.", "", "```", table, "```",
             "", "Ordering verdicts:", ""]
    lines += [f"- {v['claim']}: {'holds' if v['holds'] else 'FAILS'} ({v['difference_pts']} pts)" for v in verdicts]
    (root / "results.md").write_text("\n".join(lines) + "\n")
    print(table)
    for v in verdicts:
        print(f"{v['claim']}: {'holds' if v['holds'] else 'FAILS'} ({v['difference_pts']} pts)")


def cmd_ablate(cfg: ExperimentConfig, out: Path, force: bool) -> dict:
    ds = load_datasets(out)
    root = out / "ablate"
    _prepare_output(root, force)
    root.mkdir(parents=True)
    names = _names(ds.val.num_classes)
    rows = [RowResult(name) for name, _ in ABLATION_ROWS]
    for seed in cfg.seeds:
        for row, (name, flags) in zip(rows, ABLATION_ROWS):
            ckdir = root / name / f"seed{seed}"
            tcfg = row_train_config(cfg, flags, seed)
            if name == "oracle":
                # trains on the labelled target set at its own scale
                fn = lambda tcfg=tcfg, ckdir=ckdir: evaluate(
                    _train(cfg, tcfg, ds.target, ds.target_unlabelled, ds.val, ckdir).trainer.g, ds.val, names)
            else:
                fn = lambda tcfg=tcfg, ckdir=ckdir: evaluate(
                    _train(cfg, tcfg, ds.source, ds.target_unlabelled, ds.val, ckdir).trainer.g, ds.val, names)
            _run_row(row, seed, fn)
    summary = _matrix_summary(rows, "oracle", names)
    verdicts = _verdicts(summary, ABLATION_CHECKS, cfg.metrics.margin)
    _write_matrix(root, "Component ablation", rows, summary, verdicts, names)
    return {"rows": summary, "verdicts": verdicts, "failed": any(r.errors for r in rows)}


def cmd_resample_bench(cfg: ExperimentConfig, out: Path, force: bool) -> dict:
    ds = load_datasets(out)
    root = out / "resample"
    _prepare_output(root, force)
    root.mkdir(parents=True)
    names = _names(ds.val.num_classes)
    theta, sigma = ds.source.gsd_m, ds.target.gsd_m
    val_resampled = resample_dataset(ds.val, theta)
    source_at_sigma = resample_dataset(ds.source, sigma)
    rows = [RowResult(name) for name, _, _ in RESAMPLE_ROWS]
    for seed in cfg.seeds:
        models: dict[str, Any] = {}

        def model_for(recipe):
            if recipe not in models:
                flags = RESAMPLE_RECIPES[recipe]
                extra = {"feat_target": "native"} if recipe.startswith("std-da") else {}
                source = source_at_sigma if recipe.endswith("train-resampled") else ds.source
                tcfg = row_train_config(cfg, flags, seed, **extra)
                res = _train(cfg, tcfg, source, ds.target_unlabelled, ds.val, root / recipe / f"seed{seed}")
                models[recipe] = res.trainer.g
            return models[recipe]

        for row, (name, recipe, test_resampled) in zip(rows, RESAMPLE_ROWS):
            eval_set = val_resampled if test_resampled else ds.val
            _run_row(row, seed, lambda recipe=recipe, eval_set=eval_set: evaluate(model_for(recipe), eval_set, names))
    summary = _matrix_summary(rows, None, names)
    verdicts = _verdicts(summary, RESAMPLE_CHECKS, cfg.metrics.margin)
    _write_matrix(root, "Resampling baselines", rows, summary, verdicts, names)
    return {"rows": summary, "verdicts": verdicts, "failed": any(r.errors for r in rows)}


# -- eval / report -----------------------------------------------------------

def cmd_eval(cfg: ExperimentConfig, out: Path, force: bool) -> EvalReport:
    ckpt = Path(cfg.eval.checkpoint) if cfg.eval.checkpoint else out / "train" / "final.pt"
    data = Path(cfg.eval.dataset) if cfg.eval.dataset else DataDirs.under(out).val
    if not ckpt.is_file():
        raise RunError(f"checkpoint not found: {ckpt}")
    target = out / "eval.json"
    _prepare_output(target, force)
    model = segnet.load(ckpt)
    ds = read_dataset(data)
    rep = evaluate(model, ds, _names(ds.num_classes))
    out.mkdir(parents=True, exist_ok=True)
    rep.save(target)
    print(render_table([(ckpt.name, rep)], _names(ds.num_classes)))
    return rep


TRACE_COLUMNS = ("iter", "l_seg", "l_adv_feat", "l_adv_scale", "l_d_feat", "l_d_scale", "lr_g", "lr_d")


def cmd_report(cfg: ExperimentConfig, out: Path, force: bool) -> Path:
    run_dir = out / "train"
    trace_path, ckpt = run_dir / "trace.jsonl", run_dir / "final.pt"
    for p in (trace_path, ckpt):
        if not p.is_file():
            raise RunError(f"missing run artifact {p}")
    ds = load_datasets(out)
    rdir = out / "report"
    _prepare_output(rdir, force)
    rdir.mkdir(parents=True)

    trace = [json.loads(l) for l in trace_path.read_text().splitlines() if l.strip()]
    with open(rdir / "loss_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for t in trace:
            w.writerow([repr(t[c]) for c in TRACE_COLUMNS])

    model = segnet.load(ckpt)
    names = _names(ds.val.num_classes)
    rep = evaluate(model, ds.val, names)
    rep.save(rdir / "metrics.json")
    table = render_table([("final", rep)], names)

    # embeddings of every source and val tile, tagged by domain and scale
    with open(rdir / "embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tile_id", "domain", "gsd_m"] + [f"e{i}" for i in range(model.config.aspp_channels)])
        for name, d in (("source", ds.source), ("target", ds.val)):
            for tile in d.tiles:
                w.writerow([tile.id, name, d.gsd_m] + [repr(float(v)) for v in segnet.encode_embedding(model, tile)])

    sections = ["# Run report", "", "## Metrics (target val)", "", "```", table, "```", "",
                f"Loss curves: loss_curves.csv ({len(trace)} iterations).",
                f"Embeddings: embeddings.csv ({len(ds.source) + len(ds.val)} tiles)."]
    if model.sam is not None:
        model.eval()
        with torch.no_grad():
            x = segnet.to_batch(ds.val.tiles[:8])
            taps = model.encode(x)
            attn = attention(pool_and_concat(taps, tuple(taps[-1].shape[-2:])), model.sam)
        summary = attention_report(attn, rdir / "attention.json")
        sections += ["", "## Scale attention", "",
                     "Most weighted channels (column mass of A): "
                     + ", ".join(f"{c} ({summary['channel_mass'][c]:.3f})" for c in summary["most_weighted"])]
    (rdir / "report.md").write_text("\n".join(sections) + "\n")
    print(f"report written to {rdir}")
    return rdir


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "resample-bench": cmd_resample_bench,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scaleda", description="Scale-aware adversarial domain adaptation experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment YAML file")
        s.add_argument("--seed", type=int, default=None, help="run a single training seed instead of config seeds")
        s.add_argument("--out", default=None, help="output root (overrides out_dir)")
        s.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seeds=[args.seed], train=replace(cfg.train, seed=args.seed))
        out = Path(args.out or cfg.out_dir)
        result = COMMANDS[args.command](cfg, out, args.force)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        log.debug("run failed", exc_info=True)
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUN
    if isinstance(result, dict) and result.get("failed"):
        return EXIT_RUN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
