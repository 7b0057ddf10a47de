"""
Config-driven experiment runner.

An experiment is a list of row entries (``variant`` or ``variant@train_size``)
crossed with seeds. Each (entry, seed) cell trains one predictor on the shared
frozen backbone, evaluates it and stores ``result.json`` in a directory keyed by
the cell's config hash, so reruns and overlapping experiments reuse finished
cells. Advisory file locks keep concurrent runners from training the same cell
twice. A failing cell is recorded and the table shows a gap.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from filelock import FileLock

from core.config import EXPERIMENT_DIR, PRESETS, LabConfig, build_section, config_hash, load_toml
from core.dataset_io import DatasetReader, assign_splits, read_dataset, write_dataset
from core.errors import ConfigValidationError, GateError, LabError
from core.evaluation import (
    BACKBONE_ROW,
    MetricReport,
    SeedScores,
    backbone_gate,
    evaluate_backbone,
    evaluate_seed,
    export_figures,
)
from core.metrics import METRIC_NAMES
from core.rollout import VARIANTS
from core.savi import SlotVideoModel, load_backbone
from core.scene import generate_samples
from core.training import LatentCache, train_predictor, train_savi
from core.utils import atomic_write_json, ensure_dir, resolve_device

logger = logging.getLogger(__name__)

ROW_LABELS = {
    "ours": "Ours",
    "ours_pure": "Ours-Pure",
    "ours_single": "Ours-Single",
    "ours_inaccurate": "Ours-Inaccurate",
    "slotformer": "SlotFormer",
    BACKBONE_ROW: "SAVi",
}
COLUMN_LABELS = {"miou": "mIoU", "miou_fg": "mIoU-FG", "ari": "ARI", "ari_fg": "ARI-FG"}
GAP = "n/a"


# ------------------------------
# Spec
# ------------------------------
def parse_entry(entry: str) -> Tuple[str, int]:
    """``"ours@300"`` -> ``("ours", 300)``; a bare variant trains on the whole split."""
    variant, _, size = entry.partition("@")
    if variant not in VARIANTS:
        raise ConfigValidationError("experiment.variants", f"unknown variant '{variant}'", entry)
    if not size:
        return variant, 0
    if not size.isdigit() or int(size) < 1:
        raise ConfigValidationError("experiment.variants", "train size after '@' must be a positive integer", entry)
    return variant, int(size)


def row_label(entry: str) -> str:
    if entry == BACKBONE_ROW:
        return ROW_LABELS[BACKBONE_ROW]
    variant, size = parse_entry(entry)
    return f"{ROW_LABELS[variant]}-{size}" if size else ROW_LABELS[variant]


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "baseline"
    preset: str = "desk"
    variants: Tuple[str, ...] = ("ours", "ours_pure", "slotformer")
    seeds: Tuple[int, ...] = (0, 1, 2)
    train_size: int = 0
    dt_factor: float = 2.0
    include_backbone: bool = True
    enforce_gate: bool = True
    gate_threshold: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "variants", tuple(str(v) for v in self.variants))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self.validate()

    def validate(self) -> None:
        if not self.name:
            raise ConfigValidationError("experiment.name", "must not be empty")
        if self.preset not in PRESETS:
            raise ConfigValidationError("experiment.preset", "must be paper or desk", self.preset)
        if not self.seeds:
            raise ConfigValidationError("experiment.seeds", "needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigValidationError("experiment.seeds", "seeds must be distinct", self.seeds)
        if not self.variants:
            raise ConfigValidationError("experiment.variants", "needs at least one row")
        for entry in self.variants:
            parse_entry(entry)
        if self.train_size < 0:
            raise ConfigValidationError("experiment.train_size", "must be >= 0", self.train_size)
        if not self.dt_factor > 0 or self.dt_factor == 1.0:
            raise ConfigValidationError("experiment.dt_factor", "must be > 0 and differ from 1", self.dt_factor)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentSpec":
        return build_section(cls, "experiment", data)

    def to_dict(self) -> Dict[str, Any]:
        payload = dataclasses.asdict(self)
        payload["variants"] = list(self.variants)
        payload["seeds"] = list(self.seeds)
        return payload

    def cells(self) -> List[Tuple[str, int]]:
        return [(entry, seed) for entry in self.variants for seed in self.seeds]


BUILTIN_EXPERIMENTS: Dict[str, ExperimentSpec] = {
    "baseline": ExperimentSpec(name="baseline", variants=("ours", "ours_pure", "slotformer")),
    "inaccurate": ExperimentSpec(
        name="inaccurate", variants=("ours", "ours_inaccurate", "slotformer"), include_backbone=False
    ),
    "data_efficiency": ExperimentSpec(
        name="data_efficiency", variants=("ours@300", "slotformer@300", "slotformer"), include_backbone=False
    ),
    "joint_latent": ExperimentSpec(
        name="joint_latent", variants=("ours", "ours_single", "slotformer"), include_backbone=False
    ),
}


def load_experiment(name_or_path: Union[str, Path]) -> ExperimentSpec:
    """Built-in name, a file under ``configs/experiments`` or any TOML path with an ``[experiment]`` table."""
    candidate = Path(name_or_path)
    if not candidate.suffix:
        bundled = EXPERIMENT_DIR / f"{name_or_path}.toml"
        if bundled.is_file():
            candidate = bundled
        elif str(name_or_path) in BUILTIN_EXPERIMENTS:
            return BUILTIN_EXPERIMENTS[str(name_or_path)]
    data = load_toml(candidate)
    if "experiment" not in data:
        raise ConfigValidationError("experiment", f"no [experiment] table in {candidate}")
    return ExperimentSpec.from_dict(data["experiment"])


# ------------------------------
# Shared artifacts
# ------------------------------
def ensure_dataset(config: LabConfig, workers: int = 0) -> DatasetReader:
    root = config.paths.data_path
    lock = FileLock(str(ensure_dir(root.parent) / f".{root.name}.lock"))
    with lock:
        if not (root / "manifest.json").is_file():
            logger.info("Generating %d samples -> %s", config.generator.num_samples, root)
            write_dataset(
                generate_samples(config.generator, workers=workers),
                root,
                config.generator,
                assign_splits(config.generator.num_samples),
            )
    return read_dataset(root)


def backbone_key(config: LabConfig) -> str:
    return config_hash(config, sections=("generator", "engine", "encoder", "savi_train"))


def ensure_backbone(config: LabConfig, reader: DatasetReader, device: torch.device) -> Tuple[SlotVideoModel, Path]:
    out_dir = ensure_dir(config.paths.runs_path / "backbone" / backbone_key(config))
    ckpt = out_dir / "savi.pt"
    with FileLock(str(out_dir / ".lock")):
        if ckpt.is_file():
            logger.info("Backbone cache hit: %s", ckpt)
        else:
            logger.info("Backbone cache miss, training -> %s", out_dir)
            train_savi(reader, config.encoder, config.savi_train, out_dir, device, config.paths.num_workers,
                       meta={"config_hash": backbone_key(config)})
    return load_backbone(ckpt, device), ckpt


def ensure_latents(
    config: LabConfig, reader: DatasetReader, encoder: SlotVideoModel, split: str, backbone_dir: Path
) -> LatentCache:
    horizon = config.rollout.train_horizon
    with_flow = config.train.use_flow_loss
    path = backbone_dir / f"latents_{split}_n{config.rollout.context_len}_h{horizon}{'_flow' if with_flow else ''}.pt"
    with FileLock(str(path) + ".lock"):
        if path.is_file():
            return LatentCache.load(path)
        cache = LatentCache.build(
            reader, encoder, reader.split(split), config.rollout.context_len, horizon,
            with_flow=with_flow, num_workers=config.paths.num_workers,
        )
        cache.save(path)
    return cache


def cell_config(config: LabConfig, spec: ExperimentSpec, entry: str, seed: int) -> LabConfig:
    variant, size = parse_entry(entry)
    rollout = dataclasses.replace(config.rollout, variant=variant, inaccurate_dt_factor=spec.dt_factor)
    train = dataclasses.replace(config.train, seed=seed, train_size=size or spec.train_size or config.train.train_size)
    return config.with_section(rollout=rollout, train=train, experiment={})


def cell_key(config: LabConfig, backbone_hash: str) -> str:
    payload = config.to_toml_dict()
    return config_hash({"rollout": payload["rollout"], "engine": payload["engine"], "train": payload["train"], "backbone": backbone_hash})


def _run_cell(
    config: LabConfig,
    encoder: SlotVideoModel,
    reader: DatasetReader,
    train_cache: LatentCache,
    val_cache: LatentCache,
    device: torch.device,
) -> Tuple[SeedScores, Dict[str, Any]]:
    backbone_hash = encoder.parameter_hash()
    key = cell_key(config, backbone_hash)
    cell_dir = ensure_dir(config.paths.runs_path / "cells" / key)
    result_path = cell_dir / "result.json"
    with FileLock(str(cell_dir / ".lock")):
        if result_path.is_file():
            logger.info("Cell cache hit: %s seed %d (%s)", config.rollout.variant, config.train.seed, key)
            cached = json.loads(result_path.read_text(encoding="utf-8"))
            return SeedScores(**cached["scores"]), cached["provenance"]

        logger.info("Cell cache miss: %s seed %d (%s)", config.rollout.variant, config.train.seed, key)
        model, result = train_predictor(
            train_cache, val_cache, encoder, config.rollout, config.train, cell_dir, device,
            meta={"config_hash": key},
        )
        scores = evaluate_seed(model, encoder, reader, reader.split("test"), config.rollout.eval_horizon)
        provenance = {
            "checkpoint": str(result.checkpoint),
            "config_hash": key,
            "backbone_hash": backbone_hash,
            "train_examples": min(len(train_cache), config.train.train_size or len(train_cache)),
            "steps": result.steps,
            "curve": str(result.curve),
        }
        atomic_write_json(result_path, {"scores": dataclasses.asdict(scores), "provenance": provenance})
    return scores, provenance


def run_experiment(
    spec: ExperimentSpec,
    config: LabConfig,
    out_dir: Optional[Union[str, Path]] = None,
    device: Optional[Union[str, torch.device]] = None,
) -> MetricReport:
    """Train and evaluate every (row, seed) cell, then write report, tables, figures and ordering checks."""
    device = resolve_device(device or config.paths.device) if not isinstance(device, torch.device) else device
    out_dir = ensure_dir(out_dir or config.paths.runs_path / "experiments" / spec.name)
    report = MetricReport(name=spec.name, meta={"spec": spec.to_dict(), "preset": config.preset})

    reader = ensure_dataset(config, config.paths.num_workers)
    encoder, backbone_ckpt = ensure_backbone(config, reader, device)
    report.meta["backbone"] = {"checkpoint": str(backbone_ckpt), "hash": encoder.parameter_hash()}
    try:
        report.meta["backbone"]["gate_ari_fg"] = backbone_gate(encoder, reader, "val", spec.gate_threshold)
    except GateError as exc:
        report.meta["backbone"]["gate"] = exc.to_dict()
        if spec.enforce_gate:
            raise
        logger.warning("Backbone gate failed, continuing: %s", exc.message)

    if spec.include_backbone:
        row = report.row(BACKBONE_ROW)
        row.seeds["0"] = evaluate_backbone(
            encoder, reader, reader.split("test"), config.rollout.context_len, config.rollout.eval_horizon
        )
        row.provenance["0"] = {"checkpoint": str(backbone_ckpt), "config_hash": backbone_key(config)}

    train_cache = ensure_latents(config, reader, encoder, "train", backbone_ckpt.parent)
    val_cache = ensure_latents(config, reader, encoder, "val", backbone_ckpt.parent)

    for entry, seed in spec.cells():
        row = report.row(entry)
        try:
            cfg = cell_config(config, spec, entry, seed)
            row.seeds[str(seed)], row.provenance[str(seed)] = _run_cell(cfg, encoder, reader, train_cache, val_cache, device)
        except Exception as exc:
            logger.exception("Cell %s seed %d failed", entry, seed)
            payload = exc.to_dict() if isinstance(exc, LabError) else {"error": type(exc).__name__, "message": str(exc)}
            row.errors[str(seed)] = json.dumps(payload, default=str)

    write_bundle(report, out_dir)
    return report


# ------------------------------
# Tables and checks
# ------------------------------
def table_rows(report: MetricReport) -> List[Dict[str, str]]:
    rows = []
    for entry, result in report.rows.items():
        summary = result.summary()
        cells = {"row": _label_for(entry)}
        for name in METRIC_NAMES:
            stats = summary[name]
            cells[COLUMN_LABELS[name]] = GAP if stats["n"] == 0 else f"{stats['mean']:.1f} ± {stats['std']:.1f}"
        cells["seeds"] = f"{len(result.completed)}/{len(result.completed) + len(result.errors)}"
        rows.append(cells)
    return rows


def _label_for(entry: str) -> str:
    head, _, tail = entry.rpartition("/")
    return f"{head}/{row_label(tail)}" if head else row_label(entry)


def write_tables(report: MetricReport, out_dir: Union[str, Path]) -> Dict[str, Path]:
    out_dir = ensure_dir(out_dir)
    rows = table_rows(report)
    columns = ["row", *COLUMN_LABELS.values(), "seeds"]
    md_lines = [
        f"### {report.name}",
        "",
        "| " + " | ".join(columns) + " |",
        "|" + "|".join("---" for _ in columns) + "|",
    ]
    md_lines += ["| " + " | ".join(r[c] for c in columns) + " |" for r in rows]
    md_path = out_dir / f"{report.name}_table.md"
    md_path.write_text("\n".join(md_lines) + "\n", encoding="utf-8")

    csv_path = out_dir / f"{report.name}_table.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return {"markdown": md_path, "csv": csv_path}


def write_bundle(report: MetricReport, out_dir: Union[str, Path]) -> Dict[str, Path]:
    out_dir = ensure_dir(out_dir)
    paths = {"report": report.save(out_dir / "report.json")}
    paths.update(write_tables(report, out_dir))
    if any(row.completed for row in report.rows.values()):
        paths.update(export_figures(report, out_dir))
    paths["orderings"] = atomic_write_json(out_dir / "orderings.json", check_orderings(report))
    logger.info("Wrote %s bundle -> %s", report.name, out_dir)
    return paths


def merge_reports(reports: Sequence[MetricReport], name: str = "merged") -> MetricReport:
    """Join several reports into one; rows are keyed ``<report>/<row>``."""
    merged = MetricReport(name=name, meta={"sources": [r.name for r in reports]})
    for report in reports:
        for entry, row in report.rows.items():
            key = f"{report.name}/{entry}"
            if key in merged.rows:
                raise LabError("duplicate row while merging reports", row=key)
            merged.rows[key] = row
    return merged


def union_report(reports: Sequence[MetricReport], name: str = "union") -> MetricReport:
    """Rows of several reports under their plain keys; the first report holding a row wins."""
    union = MetricReport(name=name, meta={"sources": [r.name for r in reports]})
    for report in reports:
        for entry, row in report.rows.items():
            union.rows.setdefault(entry, row)
    return union


def _seed_mean(report: MetricReport, entry: str, metric: str) -> Optional[float]:
    row = report.rows.get(entry)
    if row is None or not row.completed:
        return None
    return row.summary()[metric]["mean"]


def _per_seed(report: MetricReport, entry: str, metric: str) -> Dict[str, float]:
    row = report.rows.get(entry)
    return {} if row is None else {s: row.seeds[s].overall[metric] for s in row.completed}


def _majority(count: int, total: int) -> bool:
    return total > 0 and count >= math.ceil(2 * total / 3)


def _chain_by_seed(report: MetricReport, chain: Sequence[str], metric: str) -> Dict[str, Any]:
    per_entry = [_per_seed(report, e, metric) for e in chain]
    if any(not p for p in per_entry):
        return {"status": "skipped", "detail": f"missing rows among {list(chain)}"}
    seeds = sorted(set.intersection(*(set(p) for p in per_entry)), key=int)
    wins = [s for s in seeds if all(per_entry[i][s] > per_entry[i + 1][s] for i in range(len(chain) - 1))]
    ok = _majority(len(wins), len(seeds))
    return {"status": "pass" if ok else "fail", "detail": f"{metric}: {' > '.join(chain)} in {len(wins)}/{len(seeds)} seeds"}


def unroll_slope(curve: Sequence[float]) -> float:
    """Least-squares slope of a per-frame curve over frames 1..T."""
    y = np.asarray(curve, dtype=np.float64)
    x = np.arange(1, y.size + 1, dtype=np.float64)
    return float(np.polyfit(x, y, 1)[0])


def check_orderings(report: MetricReport) -> Dict[str, Dict[str, Any]]:
    """Directional checks on a finished bundle; rows a check needs but lacks mark it ``skipped``."""
    checks: Dict[str, Dict[str, Any]] = {}

    means = {e: [_seed_mean(report, e, m) for m in ("ari_fg", "miou_fg")] for e in ("ours", "ours_pure", "slotformer")}
    if any(v is None for vals in means.values() for v in vals):
        checks["baseline_ordering"] = {"status": "skipped", "detail": "needs ours, ours_pure and slotformer"}
    else:
        ok = all(means["ours"][i] > means["ours_pure"][i] > means["slotformer"][i] for i in range(2))
        checks["baseline_ordering"] = {"status": "pass" if ok else "fail", "detail": {e: v for e, v in means.items()}}

    ours, slot = report.rows.get("ours"), report.rows.get("slotformer")
    if ours is None or slot is None or not ours.completed or not slot.completed:
        checks["unroll_stability"] = {"status": "skipped", "detail": "needs ours and slotformer"}
    else:
        seeds = sorted(set(ours.completed) & set(slot.completed), key=int)
        slopes = {
            s: (unroll_slope(slot.seeds[s].per_frame["miou"]), unroll_slope(ours.seeds[s].per_frame["miou"])) for s in seeds
        }
        wins = sum(1 for sf, ou in slopes.values() if sf < ou)
        checks["unroll_stability"] = {
            "status": "pass" if _majority(wins, len(seeds)) else "fail",
            "detail": {s: {"slotformer": v[0], "ours": v[1]} for s, v in slopes.items()},
        }

    pure = report.rows.get("ours_pure")
    maes = [] if pure is None else [pure.seeds[s].state_mae for s in pure.completed if pure.seeds[s].state_mae]
    if not maes:
        checks["state_fidelity"] = {"status": "skipped", "detail": "needs ours_pure state errors"}
    else:
        worst = float(max(max(m) for m in maes))
        checks["state_fidelity"] = {"status": "pass" if worst < 1e-4 else "fail", "detail": {"max_frame_mae": worst}}

    checks["inaccurate_ordering"] = _chain_by_seed(report, ("ours", "ours_inaccurate", "slotformer"), "miou")
    checks["single_ordering"] = _chain_by_seed(report, ("ours", "ours_single", "slotformer"), "miou")

    small = _chain_by_seed(report, ("ours@300", "slotformer@300"), "miou")
    full = _chain_by_seed(report, ("ours@300", "slotformer"), "miou")
    if "skipped" in (small["status"], full["status"]):
        checks["data_efficiency"] = {"status": "skipped", "detail": "needs ours@300, slotformer@300 and slotformer"}
    else:
        ok = small["status"] == full["status"] == "pass"
        checks["data_efficiency"] = {"status": "pass" if ok else "fail", "detail": [small["detail"], full["detail"]]}
    return checks
