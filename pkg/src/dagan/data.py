"""Images, manifests, the synthetic two-domain corpus and pixel pipelines.

Images are float arrays of shape (3, H, W) in [-1, 1]. On disk they are
binary P6 pixmaps. A manifest is a JSON-lines file (one sample per line)
with a sidecar ``<stem>.classes.json`` holding the class registry, split
name and provenance note.

Target-domain box annotations are guarded: reading ``ImageSample.boxes`` on
a target training sample raises :class:`PremiseViolation` unless the caller
is inside :func:`allow_target_labels`, and every target-domain box read is
appended to the audit log together with the active :func:`audit_scope`.
"""

from __future__ import annotations

import colorsys
import contextlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import convolve1d

from .metrics import BoundingBox, GroundTruth, iou, mask_to_bbox

SHAPE_CLASSES = ("circle", "triangle", "rectangle")
SPLIT_CODES = {"source_train": 0, "target_train": 1, "target_test": 2, "source_test": 3}


class ImageFormatError(ValueError):
    pass


class PremiseViolation(RuntimeError):
    """A target-domain training annotation was read without permission."""


# ---------------------------------------------------------------------------
# annotation audit

_audit: dict = {"scope": None, "allow": False, "log": []}


@contextlib.contextmanager
def audit_scope(name: str) -> Iterator[None]:
    old = _audit["scope"]
    _audit["scope"] = name
    try:
        yield
    finally:
        _audit["scope"] = old


@contextlib.contextmanager
def allow_target_labels() -> Iterator[None]:
    old = _audit["allow"]
    _audit["allow"] = True
    try:
        yield
    finally:
        _audit["allow"] = old


def audit_log() -> list[tuple[str | None, str, str]]:
    """(scope, split, image) for every target-domain box read so far."""
    return list(_audit["log"])


def reset_audit_log() -> None:
    _audit["log"].clear()


# ---------------------------------------------------------------------------
# pixmap I/O

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_header(raw: bytes) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = _TOKEN.match(raw, pos)
        if not m:
            raise ImageFormatError("malformed pixmap header")
        tokens.append(m.group(1))
        pos = m.end()
    if pos >= len(raw) or raw[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise ImageFormatError("malformed pixmap header")
    return tokens, pos + 1


def decode_ppm(raw: bytes) -> np.ndarray:
    if raw[:2] != b"P6":
        raise ImageFormatError(f"unsupported pixmap format {raw[:2]!r}; only binary P6 is accepted")
    tokens, start = _read_header(raw)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError("non-numeric pixmap header") from exc
    if maxval != 255 or width < 1 or height < 1:
        raise ImageFormatError(f"unsupported pixmap geometry {width}x{height} maxval {maxval}")
    need = width * height * 3
    payload = raw[start:start + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated pixmap payload: {len(payload)} of {need} bytes")
    pix = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0


def to_uint8(image) -> np.ndarray:
    """(3, H, W) in [-1, 1] to (H, W, 3) bytes, rounding half away from zero."""
    x = (np.asarray(image, dtype=np.float64) + 1.0) * 127.5
    x = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(x, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def quantize(image) -> np.ndarray:
    """What ``image`` becomes after a save/load round trip."""
    return to_uint8(image).transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0


def encode_ppm(image) -> bytes:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ImageFormatError(f"expected (3, H, W) image, got {arr.shape}")
    pix = to_uint8(arr)
    h, w = pix.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def load_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_image(path, image) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_ppm(image))


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ImageSample:
    image: str
    domain: str
    labels: list[int]
    _boxes: list[GroundTruth] | None = None
    split: str = ""

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"unknown domain {self.domain!r}")

    @property
    def has_boxes(self) -> bool:
        return self._boxes is not None

    @property
    def boxes(self) -> list[GroundTruth]:
        if self.domain == "target" and self._boxes is not None:
            if self.split.startswith("target_train") and not _audit["allow"]:
                raise PremiseViolation(
                    f"target training annotation {self.image} read outside the upper-bound regime"
                )
            _audit["log"].append((_audit["scope"], self.split, self.image))
        return list(self._boxes or [])

    def dominant_class(self) -> int:
        """Class of the largest annotated box (source samples), else the first label."""
        if self._boxes:
            return max(self._boxes, key=lambda g: g.box.area).class_id
        if not self.labels:
            raise ValueError(f"{self.image} has no labels")
        return self.labels[0]

    def to_json(self) -> dict:
        rec: dict = {"image": self.image, "domain": self.domain, "labels": list(self.labels)}
        if self._boxes is not None:
            rec["boxes"] = [{"class": g.class_id, "box": g.box.as_list()} for g in self._boxes]
        return rec


@dataclass
class DatasetManifest:
    samples: list[ImageSample]
    classes: list[str]
    root: Path
    split: str = ""
    provenance: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    def __post_init__(self):
        self.root = Path(self.root)
        for s in self.samples:
            if any(not 0 <= c < len(self.classes) for c in s.labels):
                raise ValueError(f"{s.image}: label outside class registry")
            s.split = self.split

    def path_of(self, sample: ImageSample) -> Path:
        return self.root / sample.image

    def load(self, index: int) -> np.ndarray:
        if index not in self._cache:
            self._cache[index] = load_image(self.path_of(self.samples[index]))
        return self._cache[index]

    def images(self) -> list[np.ndarray]:
        return [self.load(i) for i in range(len(self))]

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        out = DatasetManifest(
            [self.samples[i] for i in indices], list(self.classes), self.root, self.split, self.provenance
        )
        out._cache = {k: self._cache[i] for k, i in enumerate(indices) if i in self._cache}
        return out

    def filter_class(self, class_id: int) -> "DatasetManifest":
        return self.subset([i for i, s in enumerate(self.samples) if class_id in s.labels])

    def box_count(self) -> int:
        """Number of stored box annotations, counted without reading them."""
        return sum(len(s._boxes or []) for s in self.samples)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = []
        for s in self.samples:
            rec = s.to_json()
            rec["image"] = Path(os.path.relpath(self.root / s.image, path.parent)).as_posix()
            lines.append(json.dumps(rec, sort_keys=True))
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
        registry = {"classes": list(self.classes), "split": self.split, "provenance": self.provenance}
        sidecar_path(path).write_text(json.dumps(registry, indent=1, sort_keys=True) + "\n")
        return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".classes.json")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} not found")
    side = sidecar_path(path)
    registry = json.loads(side.read_text()) if side.exists() else {}
    samples = []
    for n, line in enumerate(path.read_text().splitlines()):
        if not line.strip():
            continue
        rec = json.loads(line)
        boxes = None
        if "boxes" in rec:
            boxes = [GroundTruth(int(b["class"]), BoundingBox.from_list(b["box"])) for b in rec["boxes"]]
        samples.append(ImageSample(rec["image"], rec["domain"], [int(c) for c in rec.get("labels", [])], boxes))
    return DatasetManifest(
        samples,
        list(registry.get("classes", [])),
        path.parent,
        registry.get("split", ""),
        registry.get("provenance", ""),
    )


def write_images(manifest: DatasetManifest, images: Sequence[np.ndarray]) -> None:
    for sample, img in zip(manifest.samples, images):
        save_image(manifest.path_of(sample), img)


# ---------------------------------------------------------------------------
# filters


def gaussian_kernel(sigma: float, size: int | None = None) -> np.ndarray:
    if sigma <= 0:
        return np.ones(1)
    if size is None:
        size = 2 * int(math.ceil(3 * sigma)) + 1
    if size % 2 == 0 or size < 1:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    r = np.arange(size) - size // 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def separable_blur(image: np.ndarray, kernel_rows: np.ndarray, kernel_cols: np.ndarray | None = None) -> np.ndarray:
    """Convolve each channel with outer(kernel_rows, kernel_cols), symmetric borders."""
    out = np.asarray(image, dtype=np.float64)
    if kernel_cols is None:
        kernel_cols = kernel_rows
    if kernel_rows.size > 1:
        out = convolve1d(out, kernel_rows, axis=1, mode="reflect")
    if kernel_cols.size > 1:
        out = convolve1d(out, kernel_cols, axis=2, mode="reflect")
    return out


def luma(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def edge_energy(image) -> float:
    """Mean absolute 4-neighbour Laplacian response over interior pixels."""
    x = np.asarray(image, dtype=np.float64)
    lap = x[:, 1:-1, :-2] + x[:, 1:-1, 2:] + x[:, :-2, 1:-1] + x[:, 2:, 1:-1] - 4 * x[:, 1:-1, 1:-1]
    return float(np.abs(lap).mean())


def saturation(image) -> float:
    """Mean per-pixel chroma (max minus min over channels)."""
    x = np.asarray(image, dtype=np.float64)
    return float((x.max(axis=0) - x.min(axis=0)).mean())


# ---------------------------------------------------------------------------
# degradation


@dataclass(frozen=True)
class DegradeConfig:
    blur_sigma: tuple[float, float] = (1.0, 2.5)
    desaturation: tuple[float, float] = (0.3, 0.7)
    contrast: tuple[float, float] = (0.2, 0.5)
    noise_sigma: tuple[float, float] = (0.01, 0.03)
    motion_lengths: tuple[int, ...] = (3, 5, 7)

    def __post_init__(self):
        for name in ("blur_sigma", "desaturation", "contrast", "noise_sigma"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"DegradeConfig.{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.desaturation[1] > 1 or self.contrast[1] > 1:
            raise ValueError("blend factors must not exceed 1")
        if not self.motion_lengths or any(k < 1 or k % 2 == 0 for k in self.motion_lengths):
            raise ValueError("motion blur lengths must be odd positive integers")

    @classmethod
    def identity(cls) -> "DegradeConfig":
        return cls((0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (1,))


def degrade(image, config: DegradeConfig, rng: np.random.Generator) -> np.ndarray:
    """Gaussian blur, horizontal motion blur, desaturation, contrast compression, noise; clamped."""
    x = np.asarray(image, dtype=np.float64)
    sigma = rng.uniform(*config.blur_sigma)
    length = int(rng.choice(config.motion_lengths))
    desat = rng.uniform(*config.desaturation)
    contrast = rng.uniform(*config.contrast)
    noise = rng.uniform(*config.noise_sigma)
    x = separable_blur(x, gaussian_kernel(sigma))
    if length > 1:
        x = convolve1d(x, np.full(length, 1.0 / length), axis=2, mode="reflect")
    if desat > 0:
        x = (1.0 - desat) * x + desat * luma(x)[None]
    if contrast > 0:
        x = x.mean() + (1.0 - contrast) * (x - x.mean())
    if noise > 0:
        # noise is a fraction of the dynamic range, which spans 2 in [-1, 1] units
        x = x + rng.normal(0.0, 2.0 * noise, size=x.shape)
    return np.clip(x, -1.0, 1.0)


# ---------------------------------------------------------------------------
# resampling


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights of shape (n_out, n_in)."""
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize(image, height: int, width: int | None = None) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    width = height if width is None else width
    if x.shape[1:] == (height, width):
        return x.copy()
    rows = _bilinear_matrix(x.shape[1], height)
    cols = _bilinear_matrix(x.shape[2], width)
    return rows @ x @ cols.T


def resize_and_crop(image, resize_to: int, crop_to: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Bilinear resize to ``resize_to`` square, then a random (or centre, when rng is None) crop."""
    if crop_to > resize_to:
        raise ValueError(f"crop_to {crop_to} exceeds resize_to {resize_to}")
    x = resize(image, resize_to)
    span = resize_to - crop_to
    if rng is None:
        top = left = span // 2
    else:
        top, left = (int(v) for v in rng.integers(0, span + 1, size=2))
    return x[:, top:top + crop_to, left:left + crop_to].copy()


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class Scene:
    image: np.ndarray
    boxes: list[GroundTruth]


def _shape_mask(kind: str, side: int, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    if kind == "rectangle":
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    if kind == "circle":
        r = w / 2.0
        return (xx - (x0 + r)) ** 2 + (yy - (y0 + r)) ** 2 <= r * r
    if kind == "triangle":
        # apex at top centre, base along the bottom edge
        ax, ay = x0 + w / 2.0, float(y0)
        bx, by = float(x0), float(y0 + h)
        cx, cy = float(x0 + w), float(y0 + h)

        def side_of(px, py, qx, qy):
            return (xx - qx) * (py - qy) - (px - qx) * (yy - qy)

        d1, d2, d3 = side_of(ax, ay, bx, by), side_of(bx, by, cx, cy), side_of(cx, cy, ax, ay)
        has_neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        has_pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(has_neg & has_pos)
    raise ValueError(f"unknown shape {kind!r}")


def _saturated_color(rng) -> np.ndarray:
    rgb = colorsys.hsv_to_rgb(rng.uniform(), 1.0, rng.uniform(0.8, 1.0))
    return np.asarray(rgb) * 2.0 - 1.0


TEXTURE_SIGMA = 0.06


def make_scene(rng: np.random.Generator, n_classes: int, side: int = 64, max_tries: int = 50) -> Scene:
    """One source-domain scene: smooth background, 1-3 shapes, pixel texture."""
    ang = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1)
    t = np.cos(ang) * xx + np.sin(ang) * yy
    t = (t - t.min()) / (t.max() - t.min())
    ends = [rng.uniform(-0.5, 0.5) + rng.uniform(-0.15, 0.15, size=3) for _ in range(2)]
    img = ends[0][:, None, None] * (1 - t) + ends[1][:, None, None] * t

    n_shapes = int(rng.integers(1, 4))
    while True:
        placed: list[tuple[str, int, BoundingBox, np.ndarray]] = []
        for _ in range(n_shapes):
            for _ in range(max_tries):
                cls = int(rng.integers(0, n_classes))
                kind = SHAPE_CLASSES[cls]
                w = int(rng.integers(10, 29))
                h = w if kind == "circle" else int(rng.integers(10, 29))
                x0 = int(rng.integers(0, side - w + 1))
                y0 = int(rng.integers(0, side - h + 1))
                mask = _shape_mask(kind, side, x0, y0, w, h)
                if not mask.any():
                    continue
                box = mask_to_bbox(mask)
                if all(iou(box, other) < 0.3 for _, _, other, _ in placed):
                    placed.append((kind, cls, box, mask))
                    break
            else:
                break
        if len(placed) == n_shapes:
            break
        n_shapes -= 1  # infeasible placement: retry the scene with fewer shapes
    boxes = []
    for kind, cls, box, mask in placed:
        img = np.where(mask[None], _saturated_color(rng)[:, None, None], img)
        boxes.append(GroundTruth(cls, box))
    img = img + rng.normal(0.0, TEXTURE_SIGMA, size=img.shape)
    return Scene(quantize(np.clip(img, -1, 1)), boxes)


@dataclass
class Corpus:
    source_train: DatasetManifest
    target_train: DatasetManifest
    target_test: DatasetManifest
    target_train_labeled: DatasetManifest
    source_test: DatasetManifest | None = None

    def __iter__(self):
        return iter((self.source_train, self.target_train, self.target_test))


MANIFEST_FILES = {
    "source_train": "source_train.jsonl",
    "target_train": "target_train.jsonl",
    "target_test": "target_test.jsonl",
    "target_train_labeled": "target_train_labeled.jsonl",
    "source_test": "source_test.jsonl",
}


def _scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLIT_CODES[split], index])


def _degrade_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLIT_CODES[split], index, 1])


def _build_split(
    out_dir: Path,
    split: str,
    n: int,
    n_classes: int,
    side: int,
    seed: int,
    degrade_config: DegradeConfig | None,
) -> tuple[list[ImageSample], list[np.ndarray]]:
    domain = "source" if split.startswith("source") else "target"
    samples, images = [], []
    for i in range(n):
        scene = make_scene(_scene_rng(seed, split, i), n_classes, side)
        img = scene.image
        if domain == "target":
            img = quantize(degrade(img, degrade_config or DegradeConfig(), _degrade_rng(seed, split, i)))
        labels = sorted({g.class_id for g in scene.boxes})
        samples.append(ImageSample(f"images/{split}/{i:05d}.ppm", domain, labels, scene.boxes))
        images.append(img)
    return samples, images


def gen_synthetic_corpus(
    out_dir,
    n_train_source: int,
    n_train_target: int,
    n_test_target: int,
    n_classes: int = 3,
    image_side: int = 64,
    seed: int = 0,
    n_test_source: int = 0,
    degrade_config: DegradeConfig | None = None,
) -> Corpus:
    """Write the seeded two-domain corpus and return its manifests.

    The target training manifest carries image-level labels but no boxes;
    its boxes go to a separate restricted manifest used only by the
    target-supervised upper bound.
    """
    if not 1 <= n_classes <= len(SHAPE_CLASSES):
        raise ValueError(f"n_classes must be in 1..{len(SHAPE_CLASSES)}")
    if image_side < 32:
        raise ValueError("image_side must be at least 32")
    out_dir = Path(out_dir)
    classes = list(SHAPE_CLASSES[:n_classes])
    note = f"synthetic seed={seed} side={image_side} classes={n_classes}"
    sizes = {
        "source_train": n_train_source,
        "target_train": n_train_target,
        "target_test": n_test_target,
        "source_test": n_test_source,
    }
    built: dict[str, DatasetManifest] = {}
    for split, n in sizes.items():
        if split == "source_test" and n == 0:
            continue
        samples, images = _build_split(out_dir, split, n, n_classes, image_side, seed, degrade_config)
        manifest = DatasetManifest(samples, classes, out_dir, split, note)
        write_images(manifest, images)
        for i, img in enumerate(images):
            manifest._cache[i] = img
        built[split] = manifest

    labeled = built["target_train"]
    unlabeled = DatasetManifest(
        [ImageSample(s.image, s.domain, s.labels, None) for s in labeled.samples],
        classes, out_dir, "target_train", note,
    )
    unlabeled._cache = labeled._cache
    labeled.split = "target_train_labeled"
    for s in labeled.samples:
        s.split = "target_train_labeled"
    built["target_train_labeled"] = labeled
    built["target_train"] = unlabeled
    for key, manifest in built.items():
        manifest.write(out_dir / MANIFEST_FILES[key])
    return Corpus(
        built["source_train"], built["target_train"], built["target_test"],
        built["target_train_labeled"], built.get("source_test"),
    )


def load_corpus(corpus_dir) -> Corpus:
    corpus_dir = Path(corpus_dir)
    parts = {}
    for key, name in MANIFEST_FILES.items():
        path = corpus_dir / name
        if path.exists():
            parts[key] = read_manifest(path)
        elif key != "source_test":
            raise FileNotFoundError(f"corpus manifest {path} missing")
    return Corpus(**parts)


# ---------------------------------------------------------------------------
# classical augmentation baselines


@dataclass(frozen=True)
class AugmentKind:
    kind: str  # "noise" or "blur"
    sigma: float
    kernel: int = 0

    def __post_init__(self):
        if self.kind not in ("noise", "blur"):
            raise ValueError(f"unknown augmentation {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.kind == "blur" and (self.kernel < 1 or self.kernel % 2 == 0):
            raise ValueError("blur kernel size must be odd and positive")

    @property
    def tag(self) -> str:
        if self.kind == "noise":
            return f"noise-{self.sigma:g}"
        return f"blur-k{self.kernel}-s{self.sigma:g}"


def augment_image(image, kind: AugmentKind, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if kind.kind == "noise":
        if kind.sigma == 0:
            return x.copy()
        return np.clip(x + rng.normal(0.0, 2.0 * kind.sigma, size=x.shape), -1.0, 1.0)
    k = gaussian_kernel(kind.sigma, kind.kernel) if kind.sigma > 0 else np.ones(1)
    return separable_blur(x, k)


def classic_augment(manifest: DatasetManifest, kind: AugmentKind, out_dir, seed: int = 0) -> DatasetManifest:
    """Hand-crafted noise or blur copy of ``manifest``; annotations carried over."""
    out_dir = Path(out_dir)
    samples, images = [], []
    for i, s in enumerate(manifest.samples):
        rng = np.random.default_rng([seed, 7, i])
        images.append(quantize(augment_image(manifest.load(i), kind, rng)))
        samples.append(ImageSample(f"images/{i:05d}.ppm", s.domain, list(s.labels), s._boxes))
    out = DatasetManifest(samples, list(manifest.classes), out_dir, manifest.split, f"{manifest.provenance}; {kind.tag}")
    write_images(out, images)
    for i, img in enumerate(images):
        out._cache[i] = img
    out.write(out_dir / "manifest.jsonl")
    return out
