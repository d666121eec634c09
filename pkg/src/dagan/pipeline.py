"""Pipeline configuration, regime orchestration, evaluation and reports.

The two phases run in order: translation models are trained and applied to
the labeled source set, then one detector per training regime is fit and
scored on the target test split.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .core import Tensor
from .cyclegan import INDEX_FILE, GanConfig, run_training, transform_dataset
from .data import (
    AugmentKind,
    DatasetManifest,
    allow_target_labels,
    audit_log,
    audit_scope,
    classic_augment,
    edge_energy,
    gen_synthetic_corpus,
    load_corpus,
    read_manifest,
    reset_audit_log,
    saturation,
)
from .detector import DetectorSpec, detect, read_detections, train_detector, write_detections
from .metrics import Detection, corloc, corloc_per_image, mean_ap

log = logging.getLogger(__name__)

ENV_OUTPUT_ROOT = "DAGAN_OUTPUT_ROOT"
CONFIG_FILE = "config.json"

SOURCE, FORWARD, CYCLE, CONDITIONED, UPPER = (
    "source", "forward_gan", "cycle_gan", "conditioned_cycle_gan", "target_supervised",
)
GAN_REGIMES = {FORWARD: ("forward", False), CYCLE: ("cycle", False), CONDITIONED: ("cycle", True)}
LABELS = {
    SOURCE: "Source only (lower bound)",
    FORWARD: "ForwardGAN-translated source",
    CYCLE: "CycleGAN-translated source",
    CONDITIONED: "Class-conditioned CycleGAN-translated source",
    UPPER: "Labeled target (upper bound)",
}


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class CorpusSettings:
    n_train_source: int = 200
    n_train_target: int = 200
    n_test_target: int = 100
    n_test_source: int = 100
    n_classes: int = 3
    image_side: int = 64

    def __post_init__(self):
        if min(self.n_train_source, self.n_train_target, self.n_test_target) < 1 or self.n_test_source < 0:
            raise ValueError("corpus split sizes must be positive (n_test_source may be 0)")
        if not 1 <= self.n_classes <= 3:
            raise ValueError("corpus n_classes must be in 1..3")


@dataclass(frozen=True)
class DetectorSettings:
    grid: int = 4
    anchor_sizes: tuple[float, ...] = (0.25, 0.5)
    base_width: int = 16
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 0.001
    jitter: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0 or self.base_width < 1:
            raise ValueError("detector epochs, batch_size, base_width and learning_rate must be positive")


@dataclass(frozen=True)
class EvalSettings:
    iou_threshold: float = 0.5
    conf_threshold: float = 0.05
    nms_iou: float = 0.45
    ap_mode: str = "all_point"

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1 or not 0 < self.nms_iou <= 1:
            raise ValueError("IoU thresholds must lie in (0, 1]")
        if not 0 <= self.conf_threshold <= 1:
            raise ValueError("conf_threshold must lie in [0, 1]")
        if self.ap_mode not in ("all_point", "voc11"):
            raise ValueError("ap_mode must be all_point or voc11")


@dataclass(frozen=True)
class CompareSettings:
    replicates: int = 3
    noise_sigmas: tuple[float, ...] = (0.01, 0.05, 0.1, 0.5, 1.0)
    blur_kernels: tuple[int, ...] = (5, 9, 13)
    blur_sigmas: tuple[float, ...] = (2.0, 4.0)
    # kernel sizes and sigmas were chosen for ~256-pixel images; scale to the corpus side
    blur_reference_side: int = 256
    conditioned: bool = True

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if any(s < 0 for s in self.noise_sigmas) or any(s <= 0 for s in self.blur_sigmas):
            raise ValueError("augmentation sigmas must be non-negative (blur: positive)")
        if any(k < 1 or k % 2 == 0 for k in self.blur_kernels):
            raise ValueError("blur kernels must be odd and positive")
        if self.blur_reference_side < 1:
            raise ValueError("blur_reference_side must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    gan: GanConfig = field(default_factory=GanConfig)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    compare: CompareSettings = field(default_factory=CompareSettings)
    output_dir: str = "runs"
    seed: int = 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["gan"].pop("seed")
        return out

    def gan_config(self, seed: int, mode: str | None = None, conditioned: bool | None = None) -> GanConfig:
        return replace(
            self.gan,
            seed=seed,
            mode=self.gan.mode if mode is None else mode,
            conditioned=self.gan.conditioned if conditioned is None else conditioned,
        )

    def detector_spec(self) -> DetectorSpec:
        d = self.detector
        return DetectorSpec(self.corpus.n_classes, self.corpus.image_side, d.grid, d.anchor_sizes, d.base_width)


SECTIONS = {
    "corpus": CorpusSettings,
    "gan": GanConfig,
    "detector": DetectorSettings,
    "evaluation": EvalSettings,
    "compare": CompareSettings,
}
# the top-level seed drives every stage, so the GAN section does not take its own
_EXCLUDED = {"gan": {"seed"}}


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(f"{where}: expected a non-empty list, got {value!r}")
        return tuple(_coerce(v, default[0], f"{where}[{i}]") for i, v in enumerate(value))
    raise ConfigError(f"{where}: unsupported setting")


def _build_section(name: str, cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    defaults = cls()
    allowed = {f.name for f in fields(cls)} - _EXCLUDED.get(name, set())
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    values = {k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in data.items()}
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _set_dotted(tree: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    if len(parts) > 2 or not all(parts):
        raise ConfigError(f"override key {key!r} must be 'name' or 'section.name'")
    if len(parts) == 2:
        if parts[0] not in SECTIONS:
            raise ConfigError(f"unknown config section {parts[0]!r}")
        tree.setdefault(parts[0], {})[parts[1]] = value
    else:
        tree[parts[0]] = value


def config_from_dict(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS) - {"output_dir", "seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    sections = {name: _build_section(name, cls, raw.get(name, {})) for name, cls in SECTIONS.items()}
    seed = _coerce(raw.get("seed", 0), 0, "seed")
    if seed < 0:
        raise ConfigError("seed must be >= 0")
    output_dir = _coerce(raw.get("output_dir", "runs"), "", "output_dir")
    return PipelineConfig(output_dir=output_dir, seed=seed, **sections)


def parse_config(path=None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Defaults, then the JSON file at ``path``, then dotted ``overrides``."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"config file {path} not found")
        text = path.read_text().strip()
        try:
            raw = json.loads(text) if text else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: configuration must be a JSON object")
    for key, value in (overrides or {}).items():
        _set_dotted(raw, key, value)
    return config_from_dict(raw)


def output_root(config: PipelineConfig) -> Path:
    """``output_dir``, resolved against the env-var root when relative."""
    out = Path(config.output_dir)
    root = os.environ.get(ENV_OUTPUT_ROOT)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def write_config(config: PipelineConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_FILE
    path.write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


def _dump(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# detector artifacts and evaluation


def save_detector(path, params: dict[str, Tensor], spec: DetectorSpec, meta: dict | None = None) -> Path:
    return save_checkpoint(path, {k: v.data for k, v in params.items()}, {"spec": spec.to_dict(), **(meta or {})})


def load_detector(path) -> tuple[dict[str, Tensor], DetectorSpec]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"detector checkpoint {path} not found")
    tensors, meta = load_checkpoint(path)
    if not meta or "spec" not in meta:
        raise MissingArtifact(f"{path} carries no detector spec")
    return {k: Tensor(v) for k, v in tensors.items()}, DetectorSpec(**meta["spec"])


def score(detections: Sequence[Sequence[Detection]], manifest: DatasetManifest, settings: EvalSettings) -> dict:
    """mAP and CorLoc of per-image detections against the manifest's boxes."""
    gts = [s.boxes for s in manifest.samples]
    result = mean_ap(detections, gts, manifest.classes, settings.iou_threshold, settings.ap_mode)
    return {
        "map": result.map,
        "per_class_ap": result.per_class_ap,
        "excluded_classes": result.excluded,
        "corloc": corloc(result.outcomes),
        "corloc_per_image": corloc_per_image(detections, gts, settings.iou_threshold),
        "n_detections": sum(len(d) for d in detections),
        "n_images": len(manifest),
    }


def evaluate_detector(params, spec: DetectorSpec, manifest: DatasetManifest, settings: EvalSettings, out_dir=None) -> dict:
    images = np.stack(manifest.images())
    dets: list[list[Detection]] = []
    for start in range(0, len(images), 32):
        dets += detect(params, images[start:start + 32], spec, settings.conf_threshold, settings.nms_iou)
    metrics = score(dets, manifest, settings)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_detections(out_dir / "detections.jsonl", dets, [s.image for s in manifest.samples])
        _dump(out_dir / "metrics.json", metrics)
    return metrics


def evaluate_detection_file(path, manifest: DatasetManifest, settings: EvalSettings) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"detections file {path} not found")
    return score(read_detections(path, [s.image for s in manifest.samples]), manifest, settings)


# ---------------------------------------------------------------------------
# regimes


def augment_grid(settings: CompareSettings, image_side: int) -> list[AugmentKind]:
    """Noise grid as given; blur kernels and sigmas scaled from the reference side."""
    kinds = [AugmentKind("noise", float(s)) for s in settings.noise_sigmas]
    scale = image_side / settings.blur_reference_side
    for sigma in settings.blur_sigmas:
        for k in settings.blur_kernels:
            # at least 3 taps so every row actually blurs; coinciding pairs are kept once
            size = max(3, int(round(k * scale)))
            size += 1 - size % 2
            kind = AugmentKind("blur", round(sigma * scale, 6), size)
            if kind not in kinds:
                kinds.append(kind)
    return kinds


def regime_order(settings: CompareSettings, image_side: int, include_upper: bool) -> list[str]:
    """Lower bound first, hand-crafted augmentations, translations, upper bound last."""
    order = [SOURCE] + [f"augment:{k.tag}" for k in augment_grid(settings, image_side)] + [FORWARD, CYCLE]
    if settings.conditioned:
        order.append(CONDITIONED)
    if include_upper:
        order.append(UPPER)
    return order


def translation_stats(source: np.ndarray, translated: np.ndarray, target: np.ndarray) -> dict:
    return {
        "l1_to_source": float(np.abs(translated - source).mean()),
        "edge_energy": float(np.mean([edge_energy(x) for x in translated])),
        "saturation": float(np.mean([saturation(x) for x in translated])),
        "source_edge_energy": float(np.mean([edge_energy(x) for x in source])),
        "target_edge_energy": float(np.mean([edge_energy(x) for x in target])),
    }


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def train_and_score(
    regime: str,
    manifest: DatasetManifest,
    test: DatasetManifest,
    config: PipelineConfig,
    seed: int,
    out_dir: Path,
    source_test: DatasetManifest | None = None,
) -> dict:
    d = config.detector
    spec = config.detector_spec()
    with audit_scope(regime):
        res = train_detector(
            manifest, spec, d.epochs, seed, d.batch_size, d.learning_rate, d.jitter, out_dir / "losses.csv"
        )
    save_detector(out_dir / "detector.ckpt", res.params, spec, {"regime": regime, "seed": seed})
    with audit_scope(f"evaluate:{regime}"):
        metrics = evaluate_detector(res.params, spec, test, config.evaluation, out_dir)
        if source_test is not None and len(source_test):
            # in-domain sanity check for the detector itself
            metrics["source_test_map"] = evaluate_detector(res.params, spec, source_test, config.evaluation)["map"]
    return metrics


def _median(values: Sequence[float]) -> float:
    return float(np.median(values))


def _corpus(config: PipelineConfig, root: Path):
    c = config.corpus
    return gen_synthetic_corpus(
        root / "corpus", c.n_train_source, c.n_train_target, c.n_test_target, c.n_classes,
        c.image_side, config.seed, c.n_test_source,
    )


def run_compare(config: PipelineConfig, root=None, allow_upper: bool = False) -> dict:
    """Every regime, every replicate; returns and writes the comparison table."""
    root = Path(root) if root is not None else output_root(config)
    started = time.time()
    timing: dict[str, float] = {}
    reset_audit_log()
    write_config(config, root)
    corpus = _corpus(config, root)
    test = corpus.target_test
    side = config.corpus.image_side
    order = regime_order(config.compare, side, allow_upper)
    kinds = {f"augment:{k.tag}": k for k in augment_grid(config.compare, side)}
    target_images = np.stack(corpus.target_train.images())
    source_images = np.stack(corpus.source_train.images())

    results: dict[str, list[dict]] = {r: [] for r in order}
    stats: dict[str, list[dict]] = {r: [] for r in GAN_REGIMES if r in order}
    digests: dict[str, str] = {}
    for rep in range(config.compare.replicates):
        seed = config.seed + rep
        tag = f"seed{seed}"
        for regime in order:
            t0 = time.time()
            if regime == SOURCE:
                manifest = corpus.source_train
            elif regime in kinds:
                manifest = classic_augment(
                    corpus.source_train, kinds[regime], root / "augmented" / kinds[regime].tag / tag, seed
                )
            elif regime in GAN_REGIMES:
                mode, cond = GAN_REGIMES[regime]
                gan_dir = root / "gan" / regime / tag
                with audit_scope(regime):
                    run = run_training(
                        corpus.source_train, corpus.target_train, config.gan_config(seed, mode, cond), gan_dir
                    )
                write_config(config, gan_dir)
                for p in sorted(gan_dir.iterdir()):
                    if p.suffix in (".ckpt", ".csv"):
                        digests[str(p.relative_to(root))] = file_digest(p)
                manifest = transform_dataset(run.index_path, corpus.source_train, root / "translated" / regime / tag)
                stats[regime].append(translation_stats(source_images, np.stack(manifest.images()), target_images))
            else:
                with allow_target_labels(), audit_scope(UPPER):
                    manifest = corpus.target_train_labeled
                    manifest.images()
            det_dir = root / "detectors" / regime.replace(":", "-") / tag
            with allow_target_labels() if regime == UPPER else contextlib.nullcontext():
                held_out = corpus.source_test if regime == SOURCE else None
                metrics = train_and_score(regime, manifest, test, config, seed, det_dir, held_out)
            write_config(config, det_dir)
            for name in ("detector.ckpt", "losses.csv"):
                digests[str((det_dir / name).relative_to(root))] = file_digest(det_dir / name)
            results[regime].append({"seed": seed, **metrics})
            timing[f"{regime}/{tag}"] = round(time.time() - t0, 2)
            log.info("%s %s: mAP %.4f (%.0fs)", regime, tag, metrics["map"], timing[f"{regime}/{tag}"])

    table = summarize(order, results, test.classes)
    audit = premise_audit()
    summary = criteria_summary(table, stats)
    payload = {"rows": table, "translation_stats": stats, "summary": summary, "audit": audit, "digests": digests}
    out = root / "compare"
    _dump(out / "compare.json", payload)
    write_table_csv(out / "compare.csv", table)
    write_config(config, out)
    timing["total"] = round(time.time() - started, 2)
    _dump(out / "timing.json", timing)
    return payload


def summarize(order: Sequence[str], results: dict[str, list[dict]], classes: Sequence[str]) -> list[dict]:
    rows = []
    for regime in order:
        runs = results[regime]
        maps = [r["map"] for r in runs]
        corlocs = [r["corloc"] for r in runs if r["corloc"] is not None]
        rows.append({
            "regime": regime,
            "label": LABELS.get(regime, f"Hand-crafted {regime.split(':', 1)[-1]}"),
            "seeds": [r["seed"] for r in runs],
            "map": maps,
            "map_median": _median(maps),
            "per_class_ap_median": {
                c: _median([r["per_class_ap"][c] for r in runs if c in r["per_class_ap"]])
                for c in classes
                if any(c in r["per_class_ap"] for r in runs)
            },
            "corloc_median": _median(corlocs) if corlocs else None,
        })
        held_out = [r["source_test_map"] for r in runs if "source_test_map" in r]
        if held_out:
            rows[-1]["source_test_map"] = held_out
            rows[-1]["source_test_map_median"] = _median(held_out)
    return rows


def criteria_summary(table: Sequence[dict], stats: dict[str, list[dict]]) -> dict:
    med = {row["regime"]: row["map_median"] for row in table}
    augments = {r: v for r, v in med.items() if r.startswith("augment:")}
    out: dict[str, Any] = {"map_median": med}
    for row in table:
        if "source_test_map_median" in row:
            out["source_test_map_median"] = row["source_test_map_median"]
    if CYCLE in med:
        out["cycle_minus_source"] = med[CYCLE] - med[SOURCE]
        if FORWARD in med:
            out["cycle_minus_forward"] = med[CYCLE] - med[FORWARD]
        if augments:
            best = max(augments, key=augments.get)
            out["best_augment"] = best
            out["cycle_minus_best_augment"] = med[CYCLE] - augments[best]
    for regime, runs in stats.items():
        out[f"{regime}_l1_to_source_median"] = _median([s["l1_to_source"] for s in runs])
        out[f"{regime}_edge_energy_median"] = _median([s["edge_energy"] for s in runs])
    return out


def premise_audit() -> dict:
    """Who read target-domain boxes, grouped by (scope, split)."""
    counts: dict[str, int] = {}
    violations = 0
    for scope, split, _ in audit_log():
        key = f"{scope}|{split}"
        counts[key] = counts.get(key, 0) + 1
        if split.startswith("target_train") and scope != UPPER:
            violations += 1
    return {"reads": dict(sorted(counts.items())), "violations": violations, "premise_ok": violations == 0}


TABLE_COLUMNS = ("regime", "label", "map_median", "corloc_median", "seeds", "map")


def write_table_csv(path, table: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for row in table:
            w.writerow([
                row["regime"], row["label"], repr(row["map_median"]),
                "" if row["corloc_median"] is None else repr(row["corloc_median"]),
                " ".join(map(str, row["seeds"])), " ".join(repr(v) for v in row["map"]),
            ])
    return path


# ---------------------------------------------------------------------------
# report


REPORT_COLUMNS = ("source", "regime", "seed", "map", "corloc", "corloc_per_image", "n_detections")


def report_rows(paths: Sequence) -> list[dict]:
    """Flatten metrics.json and compare.json files into plot-ready rows."""
    rows: list[dict] = []
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"result file {path} not found")
        data = json.loads(path.read_text())
        if "rows" in data:
            for row in data["rows"]:
                for seed, value in zip(row["seeds"], row["map"]):
                    rows.append({"source": str(path), "regime": row["regime"], "seed": seed, "map": value})
        elif "map" in data:
            rows.append({
                "source": str(path),
                "regime": data.get("regime", path.parent.name),
                "seed": data.get("seed", ""),
                "map": data["map"],
                "corloc": data.get("corloc"),
                "corloc_per_image": data.get("corloc_per_image"),
                "n_detections": data.get("n_detections"),
            })
        else:
            raise ConfigError(f"{path} is neither a metrics nor a compare result")
    return rows


def write_report(out_path, paths: Sequence) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, restval="")
        w.writeheader()
        for row in report_rows(paths):
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return out_path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"manifest {path} not found")
    return read_manifest(path)


def load_corpus_dir(path):
    path = Path(path)
    try:
        return load_corpus(path)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from exc


def gan_index(path) -> Path:
    path = Path(path)
    index = path / INDEX_FILE if path.is_dir() else path
    if not index.exists():
        raise MissingArtifact(f"translation model index {index} not found")
    return index
