"""Compact single-shot anchor-grid detector.

A stride-2 convolutional backbone maps a (3, S, S) image onto a G x G grid
(S = G * 16). Every cell carries ``anchors_per_cell`` square anchors and the
head emits, per anchor, an objectness logit, class logits and four box
offsets ``(tx, ty, tw, th)`` relative to that anchor.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    AdamState,
    ShapeError,
    Tensor,
    adam_step,
    bce_from_logits,
    collect_grads,
    conv2d,
    l1_loss,
    leaky_relu,
    no_grad,
    precision,
    softmax_cross_entropy,
)
from .data import DatasetManifest
from .metrics import BoundingBox, Detection, GroundTruth, iou_matrix

log = logging.getLogger(__name__)

Params = dict[str, Tensor]

N_BLOCKS = 4
POS_IOU = 0.5
NEG_IOU = 0.4
NEGATIVE, IGNORE = -1, -2


@dataclass(frozen=True)
class DetectorSpec:
    n_classes: int = 3
    image_side: int = 64
    grid: int = 4
    anchor_sizes: tuple[float, ...] = (0.25, 0.5)
    base_width: int = 16

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.grid * 2**N_BLOCKS != self.image_side:
            raise ValueError(f"grid {self.grid} * 2**{N_BLOCKS} must equal image_side {self.image_side}")
        if not self.anchor_sizes or any(not 0 < a <= 1 for a in self.anchor_sizes):
            raise ValueError("anchor sizes must lie in (0, 1]")
        object.__setattr__(self, "anchor_sizes", tuple(float(a) for a in self.anchor_sizes))

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_sizes)

    @property
    def n_anchors(self) -> int:
        return self.grid * self.grid * self.anchors_per_cell

    @property
    def head_channels(self) -> int:
        return self.anchors_per_cell * (5 + self.n_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchor_sizes"] = list(self.anchor_sizes)
        return d


def detector_layout(spec: DetectorSpec) -> list[tuple[str, tuple[int, ...]]]:
    layout = []
    cin = 3
    for i in range(N_BLOCKS):
        cout = spec.base_width * 2 ** min(i, 2)
        layout += [(f"block{i}.w", (cout, cin, 3, 3)), (f"block{i}.b", (cout,))]
        cin = cout
    layout += [("neck.w", (cin, cin, 3, 3)), ("neck.b", (cin,))]
    layout += [("head.w", (spec.head_channels, cin, 1, 1)), ("head.b", (spec.head_channels,))]
    return layout


def build_detector(spec: DetectorSpec, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in detector_layout(spec):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            std = 0.02 if name.startswith("head") else np.sqrt(2.0 / fan_in)
            data = rng.normal(0.0, std, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def head_forward(params: Params, images) -> Tensor:
    """Raw head output of shape (B, anchors * (5 + n_classes), grid, grid)."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"detector expects (B, 3, S, S), got {x.shape}")
    h = x
    for i in range(N_BLOCKS):
        h = leaky_relu(conv2d(h, params[f"block{i}.w"], params[f"block{i}.b"], stride=2, padding=1), 0.1)
    h = leaky_relu(conv2d(h, params["neck.w"], params["neck.b"], padding=1), 0.1)
    return conv2d(h, params["head.w"], params["head.b"])


def _per_anchor(head: Tensor, spec: DetectorSpec) -> Tensor:
    """(B, A*(5+C), G, G) -> (B * G * G * A, 5 + C), anchors ordered (row, col, anchor)."""
    b = head.shape[0]
    k = 5 + spec.n_classes
    h = head.reshape(b, spec.anchors_per_cell, k, spec.grid, spec.grid).transpose(0, 3, 4, 1, 2)
    return h.reshape(b * spec.n_anchors, k)


def anchor_boxes(spec: DetectorSpec) -> np.ndarray:
    """Anchor boxes (n_anchors, 4) in pixel xyxy, ordered (row, col, anchor)."""
    cell = spec.image_side / spec.grid
    out = []
    for i in range(spec.grid):
        for j in range(spec.grid):
            cx, cy = (j + 0.5) * cell, (i + 0.5) * cell
            for a in spec.anchor_sizes:
                half = a * spec.image_side / 2
                out.append([cx - half, cy - half, cx + half, cy + half])
    return np.asarray(out)


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    boxes, anchors = np.atleast_2d(boxes), np.atleast_2d(anchors)
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    ax, ay = anchors[:, 0] + aw / 2, anchors[:, 1] + ah / 2
    bw, bh = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    bx, by = boxes[:, 0] + bw / 2, boxes[:, 1] + bh / 2
    return np.stack([(bx - ax) / aw, (by - ay) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1)


def decode_boxes(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    offsets, anchors = np.atleast_2d(offsets), np.atleast_2d(anchors)
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    ax, ay = anchors[:, 0] + aw / 2, anchors[:, 1] + ah / 2
    cx, cy = ax + offsets[:, 0] * aw, ay + offsets[:, 1] * ah
    w = aw * np.exp(np.clip(offsets[:, 2], -10, 10))
    h = ah * np.exp(np.clip(offsets[:, 3], -10, 10))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


@dataclass
class AnchorAssignment:
    """Per-anchor label: a GT index (positive), NEGATIVE or IGNORE."""

    labels: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    @property
    def valid(self) -> np.ndarray:
        return np.flatnonzero(self.labels != IGNORE)


def match_anchors(gt: Sequence[GroundTruth], spec: DetectorSpec) -> AnchorAssignment:
    anchors = anchor_boxes(spec)
    labels = np.full(len(anchors), NEGATIVE, dtype=np.int64)
    if not gt:
        return AnchorAssignment(labels)
    boxes = np.array([g.box.as_list() for g in gt])
    overlaps = iou_matrix(anchors, boxes)
    best_gt = overlaps.argmax(axis=1)
    best = overlaps.max(axis=1)
    labels[(best >= NEG_IOU) & (best < POS_IOU)] = IGNORE
    pos = best >= POS_IOU
    labels[pos] = best_gt[pos]
    # every GT keeps its best free anchor; strongest GTs choose first, ties by geometry
    order = sorted(range(len(gt)), key=lambda j: (-overlaps[:, j].max(), tuple(boxes[j]), gt[j].class_id))
    forced: set[int] = set()
    for j in order:
        for a in np.argsort(-overlaps[:, j], kind="stable"):
            if int(a) not in forced:
                forced.add(int(a))
                labels[a] = j
                break
    return AnchorAssignment(labels)


def _targets(assignments: Sequence[AnchorAssignment], gts: Sequence[Sequence[GroundTruth]], spec: DetectorSpec):
    anchors = anchor_boxes(spec)
    n = spec.n_anchors
    valid, obj_t, pos, cls_t, box_t = [], [], [], [], []
    for b, (asg, gt) in enumerate(zip(assignments, gts)):
        v = asg.valid
        valid.append(v + b * n)
        obj_t.append((asg.labels[v] >= 0).astype(float))
        p = asg.positives
        if p.size:
            idx = asg.labels[p]
            pos.append(p + b * n)
            cls_t.append([gt[j].class_id for j in idx])
            box_t.append(encode_boxes(np.array([gt[j].box.as_list() for j in idx]), anchors[p]))
    valid = np.concatenate(valid)
    obj_t = np.concatenate(obj_t)
    if pos:
        return valid, obj_t, np.concatenate(pos), np.concatenate(cls_t), np.concatenate(box_t)
    return valid, obj_t, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 4))


def detector_loss(
    params: Params,
    images,
    assignments: Sequence[AnchorAssignment],
    gts: Sequence[Sequence[GroundTruth]],
    spec: DetectorSpec,
) -> Tensor:
    """Objectness BCE (ignores excluded) + class cross-entropy + L1 offsets on positives."""
    flat = _per_anchor(head_forward(params, images), spec)
    valid, obj_t, pos, cls_t, box_t = _targets(assignments, gts, spec)
    loss = bce_from_logits(flat[valid, 0], obj_t)
    if pos.size:
        c = spec.n_classes
        loss = loss + softmax_cross_entropy(flat[pos, 1:1 + c], cls_t)
        loss = loss + l1_loss(flat[pos, 1 + c:], box_t)
    return loss


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy suppression; returns kept indices in descending score order."""
    order = list(np.argsort(-np.asarray(scores), kind="stable"))
    keep: list[int] = []
    while order:
        i = order.pop(0)
        keep.append(int(i))
        if order:
            ov = iou_matrix(boxes[i:i + 1], boxes[order])[0]
            order = [o for o, v in zip(order, ov) if v <= iou_threshold]
    return keep


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def detect(
    params: Params,
    images,
    spec: DetectorSpec,
    conf_threshold: float = 0.05,
    nms_iou: float = 0.45,
) -> list[list[Detection]]:
    """Detections for each image of a (B, 3, S, S) batch (or a single (3, S, S) image)."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    with no_grad(), precision(32):
        flat = _per_anchor(head_forward(params, arr), spec).data.astype(np.float64)
    anchors = anchor_boxes(spec)
    side = float(spec.image_side)
    out: list[list[Detection]] = []
    for b in range(arr.shape[0]):
        rows = flat[b * spec.n_anchors:(b + 1) * spec.n_anchors]
        conf = _sigmoid(rows[:, 0])
        cls = rows[:, 1:1 + spec.n_classes].argmax(axis=1)
        boxes = np.clip(decode_boxes(rows[:, 1 + spec.n_classes:], anchors), 0.0, side)
        ok = (conf >= conf_threshold) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        dets: list[Detection] = []
        for c in range(spec.n_classes):
            idx = np.flatnonzero(ok & (cls == c))
            if idx.size == 0:
                continue
            for k in nms(boxes[idx], conf[idx], nms_iou):
                i = idx[k]
                dets.append(Detection(BoundingBox(*map(float, boxes[i])), c, float(conf[i])))
        dets.sort(key=lambda d: -d.confidence)
        out.append(dets)
    return out


def _jitter_batch(images: np.ndarray, gts, side: int, rng: np.random.Generator):
    """Random horizontal flip and translation that keeps every box inside the frame.

    Vacated pixels replicate the nearest edge.
    """
    out, out_gts = [], []
    for img, gt in zip(images, gts):
        boxes = np.array([g.box.as_list() for g in gt]).reshape(-1, 4)
        if rng.random() < 0.5:
            img = img[:, :, ::-1]
            boxes = np.stack([side - boxes[:, 2], boxes[:, 1], side - boxes[:, 0], boxes[:, 3]], axis=1)
        if len(gt):
            lo_x, hi_x = -int(np.floor(boxes[:, 0].min())), side - int(np.ceil(boxes[:, 2].max()))
            lo_y, hi_y = -int(np.floor(boxes[:, 1].min())), side - int(np.ceil(boxes[:, 3].max()))
        else:
            lo_x = lo_y = -side // 4
            hi_x = hi_y = side // 4
        dx = int(rng.integers(max(lo_x, -side // 4), min(hi_x, side // 4) + 1))
        dy = int(rng.integers(max(lo_y, -side // 4), min(hi_y, side // 4) + 1))
        cols = np.clip(np.arange(side) - dx, 0, side - 1)
        rows = np.clip(np.arange(side) - dy, 0, side - 1)
        out.append(img[:, rows][:, :, cols])
        boxes = boxes + np.array([dx, dy, dx, dy])
        out_gts.append([GroundTruth(g.class_id, BoundingBox(*map(float, b))) for g, b in zip(gt, boxes)])
    return np.stack(out), out_gts


@dataclass
class DetectorTrainResult:
    params: Params
    epoch_losses: list[float] = field(default_factory=list)


def train_detector(
    manifest: DatasetManifest,
    spec: DetectorSpec,
    epochs: int,
    seed: int,
    batch_size: int = 8,
    learning_rate: float = 1e-3,
    jitter: bool = True,
    loss_csv=None,
) -> DetectorTrainResult:
    """Adam-train a fresh detector on every annotated image of ``manifest``."""
    if len(manifest) == 0:
        raise ValueError("cannot train a detector on an empty manifest")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    images = np.stack(manifest.images())
    if images.shape[2:] != (spec.image_side, spec.image_side):
        raise ShapeError(f"images are {images.shape[2:]}, detector expects side {spec.image_side}")
    gts = [s.boxes for s in manifest.samples]
    assignments = [match_anchors(g, spec) for g in gts]
    rng = np.random.default_rng([seed, 11])
    with precision(32):
        params = build_detector(spec, seed)
        state = AdamState(learning_rate=learning_rate, beta1=0.9, beta2=0.999)
        losses: list[float] = []
        for epoch in range(epochs):
            order = rng.permutation(len(images))
            total = 0.0
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                if jitter:
                    batch, gt = _jitter_batch(images[idx], [gts[i] for i in idx], spec.image_side, rng)
                    asg = [match_anchors(g, spec) for g in gt]
                else:
                    batch, gt, asg = images[idx], [gts[i] for i in idx], [assignments[i] for i in idx]
                loss = detector_loss(params, batch, asg, gt, spec)
                loss.backward()
                params, state = adam_step(params, collect_grads(params), state)
                total += loss.item() * len(idx)
            losses.append(total / len(images))
            log.debug("detector epoch %d loss %.4f", epoch, losses[-1])
    if loss_csv is not None:
        path = Path(loss_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for e, v in enumerate(losses):
                w.writerow([e, repr(v)])
    return DetectorTrainResult(params, losses)


def write_detections(path, per_image: Sequence[Sequence[Detection]], image_ids: Sequence[str]) -> None:
    """JSON lines, one detection per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for image_id, dets in zip(image_ids, per_image):
            for d in dets:
                rec = {"image": image_id, "class": d.class_id, "confidence": d.confidence, "box": d.box.as_list()}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_detections(path, image_ids: Sequence[str]) -> list[list[Detection]]:
    index = {i: k for k, i in enumerate(image_ids)}
    out: list[list[Detection]] = [[] for _ in image_ids]
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["image"] not in index:
            raise KeyError(f"detection for unknown image {rec['image']!r}")
        out[index[rec["image"]]].append(
            Detection(BoundingBox.from_list(rec["box"]), int(rec["class"]), float(rec["confidence"]))
        )
    return out
