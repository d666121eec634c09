"""Cycle-consistent adversarial translation between a source and a target domain.

Four networks: G maps source (X) to target (Y), F maps Y back to X, and
patch discriminators D_Y and D_X judge each domain. ``mode="forward"``
keeps only G and D_Y (no cycle, no reverse direction). Conditioned runs
train one independent model per class.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .core import (
    AdamState,
    NonFiniteError,
    ShapeError,
    Tensor,
    adam_step,
    bce_from_logits,
    collect_grads,
    l1_loss,
    no_grad,
    precision,
)
from .data import DatasetManifest, ImageSample, quantize, resize, write_images
from .nets import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_generator,
    build_patch_discriminator,
    discriminator_forward,
    frozen,
    generator_forward,
    infer_discriminator_spec,
    infer_generator_spec,
)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "d_y", "d_x", "g_adv", "f_adv", "cyc_fwd", "cyc_bwd", "total")
MODES = ("cycle", "forward")
NETWORKS = ("G", "F", "D_X", "D_Y")
INDEX_FILE = "checkpoints.json"


class TrainingDiverged(NonFiniteError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class GanConfig:
    lambda_cycle: float = 10.0
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    resize_to: int = 36
    crop_to: int = 32
    total_steps: int = 1200
    mode: str = "cycle"
    conditioned: bool = False
    seed: int = 0
    base_width: int = 16
    n_resblocks: int = 3
    n_downsample: int = 1
    disc_layers: int = 3
    norm: str = "residual"

    def __post_init__(self):
        checks = [
            (self.lambda_cycle >= 0, f"lambda_cycle >= 0 (got {self.lambda_cycle})"),
            (self.crop_to <= self.resize_to, f"crop_to <= resize_to (got {self.crop_to} > {self.resize_to})"),
            (
                self.crop_to % 2**self.n_downsample == 0,
                f"crop_to divisible by generator factor {2**self.n_downsample} (got {self.crop_to})",
            ),
            (self.crop_to >= 2**self.disc_layers, f"crop_to >= {2**self.disc_layers} for the discriminator"),
            (self.learning_rate > 0, "learning_rate > 0"),
            (0 < self.beta1 < 1 and 0 < self.beta2 < 1, "Adam betas in (0, 1)"),
            (self.batch_size >= 1, "batch_size >= 1"),
            (self.total_steps >= 1, "total_steps >= 1"),
            (self.mode in MODES, f"mode in {MODES} (got {self.mode!r})"),
        ]
        for ok, text in checks:
            if not ok:
                raise ValueError(f"GanConfig invariant violated: {text}")

    @property
    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(3, self.base_width, self.n_resblocks, self.n_downsample, self.norm)

    @property
    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(3, self.disc_layers, self.base_width)

    @property
    def networks(self) -> tuple[str, ...]:
        return NETWORKS if self.mode == "cycle" else ("G", "D_Y")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    step: int
    params: dict[str, dict[str, Tensor]]
    adam: dict[str, AdamState]
    rng: np.random.Generator
    history: list[tuple] = field(default_factory=list)


# ---------------------------------------------------------------------------
# losses


def _as_map(net) -> Callable[[Tensor], Tensor]:
    if callable(net):
        return net
    spec = infer_generator_spec(net)
    return lambda x: generator_forward(net, x, spec)


def _disc(d_params, batch) -> Tensor:
    return discriminator_forward(d_params, batch, infer_discriminator_spec(d_params))


def discriminator_loss(d_params, real_batch, fake_batch) -> Tensor:
    """BCE(D(real), 1) + BCE(D(fake), 0), each averaged over patches."""
    real_batch = real_batch if isinstance(real_batch, Tensor) else Tensor(real_batch)
    fake_batch = fake_batch if isinstance(fake_batch, Tensor) else Tensor(fake_batch)
    if real_batch.shape != fake_batch.shape:
        raise ShapeError(f"real batch {real_batch.shape} and fake batch {fake_batch.shape} differ")
    real = _disc(d_params, real_batch)
    fake = _disc(d_params, fake_batch.detach())
    return bce_from_logits(real, np.ones(real.shape)) + bce_from_logits(fake, np.zeros(fake.shape))


def generator_adv_loss(d_params, fake_batch) -> Tensor:
    """Non-saturating generator loss BCE(D(fake), 1)."""
    logits = _disc(d_params, fake_batch)
    return bce_from_logits(logits, np.ones(logits.shape))


def cycle_loss(first, second, batch) -> Tensor:
    """Mean absolute error between ``second(first(batch))`` and ``batch``.

    ``first`` and ``second`` are generator parameter dicts or plain callables.
    """
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    return l1_loss(_as_map(second)(_as_map(first)(batch)), batch.detach())


def total_objective(adv_g, adv_f, cyc_fwd, cyc_bwd, lambda_cycle: float):
    return adv_g + adv_f + lambda_cycle * (cyc_fwd + cyc_bwd)


def generator_losses(
    params: dict[str, dict[str, Tensor]], x_batch, y_batch, config: GanConfig, fakes=None
) -> dict[str, Tensor | float]:
    """Adversarial and cycle terms of the G (and F) objective plus their total.

    Discriminators are evaluated as fixed opponents, so gradients reach
    only the generators. ``fakes`` may carry precomputed ``(G(x), F(y))``.
    """
    fake_y, fake_x = fakes if fakes is not None else (None, None)
    if fake_y is None:
        fake_y = _as_map(params["G"])(Tensor(x_batch))
    terms: dict[str, Tensor | float] = {"g_adv": generator_adv_loss(frozen(params["D_Y"]), fake_y)}
    if config.mode == "cycle":
        if fake_x is None:
            fake_x = _as_map(params["F"])(Tensor(y_batch))
        terms["f_adv"] = generator_adv_loss(frozen(params["D_X"]), fake_x)
        terms["cyc_fwd"] = l1_loss(_as_map(params["F"])(fake_y), Tensor(x_batch))
        terms["cyc_bwd"] = l1_loss(_as_map(params["G"])(fake_x), Tensor(y_batch))
    else:
        terms.update(f_adv=0.0, cyc_fwd=0.0, cyc_bwd=0.0)
    terms["total"] = total_objective(
        terms["g_adv"], terms["f_adv"], terms["cyc_fwd"], terms["cyc_bwd"], config.lambda_cycle
    )
    return terms


# ---------------------------------------------------------------------------
# optimisation


def _seed_for(config: GanConfig, net: str, class_index: int) -> list[int]:
    return [config.seed, class_index + 1, NETWORKS.index(net)]


def init_state(config: GanConfig, class_index: int = -1) -> TrainState:
    """Fresh networks and optimizers; ``class_index`` separates conditioned models."""
    params: dict[str, dict[str, Tensor]] = {}
    for net in config.networks:
        seed = _seed_for(config, net, class_index)
        if net in ("G", "F"):
            params[net] = build_generator(config.generator_spec, seed)
        else:
            params[net] = build_patch_discriminator(config.discriminator_spec, seed)
    adam = {net: AdamState(config.learning_rate, config.beta1, config.beta2) for net in params}
    rng = np.random.default_rng([config.seed, class_index + 1, 23])
    return TrainState(0, params, adam, rng)


def _value(t) -> float:
    return t.item() if isinstance(t, Tensor) else float(t)


def _check(step: int, name: str, value: float) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(step, f"{name}={value}")


def train_step(state: TrainState, x_batch, y_batch, config: GanConfig) -> TrainState:
    """One alternating update: D_Y, then D_X (cycle mode), then G and F jointly."""
    if state.step >= config.total_steps:
        raise ValueError(f"state already at step {state.step} of {config.total_steps}")
    step = state.step + 1
    params, adam = dict(state.params), dict(state.adam)
    cycle = config.mode == "cycle"
    x, y = Tensor(x_batch), Tensor(y_batch)
    try:
        fake_y = _as_map(params["G"])(x)
        fake_x = _as_map(params["F"])(y) if cycle else None

        d_y = discriminator_loss(params["D_Y"], y, fake_y.detach())
        _check(step, "d_y", d_y.item())
        d_y.backward()
        params["D_Y"], adam["D_Y"] = adam_step(params["D_Y"], collect_grads(params["D_Y"]), adam["D_Y"])

        d_x_value = 0.0
        if cycle:
            d_x = discriminator_loss(params["D_X"], x, fake_x.detach())
            d_x_value = d_x.item()
            _check(step, "d_x", d_x_value)
            d_x.backward()
            params["D_X"], adam["D_X"] = adam_step(params["D_X"], collect_grads(params["D_X"]), adam["D_X"])

        terms = generator_losses(params, x_batch, y_batch, config, fakes=(fake_y, fake_x))
        row_values = {k: _value(v) for k, v in terms.items()}
        for k, v in row_values.items():
            _check(step, k, v)
        terms["total"].backward()
        for net in ("G", "F") if cycle else ("G",):
            params[net], adam[net] = adam_step(params[net], collect_grads(params[net]), adam[net])
    except TrainingDiverged:
        raise
    except NonFiniteError as exc:
        raise TrainingDiverged(step, str(exc)) from exc
    row = (
        step, d_y.item(), d_x_value, row_values["g_adv"], row_values["f_adv"],
        row_values["cyc_fwd"], row_values["cyc_bwd"], row_values["total"],
    )
    return replace(state, step=step, params=params, adam=adam, history=state.history + [row])


def _prepare(manifest: DatasetManifest, resize_to: int) -> np.ndarray:
    return np.stack([resize(img, resize_to) for img in manifest.images()])


def _crop_batch(pool: np.ndarray, rng: np.random.Generator, batch_size: int, crop_to: int) -> np.ndarray:
    idx = rng.integers(0, len(pool), size=batch_size)
    span = pool.shape[2] - crop_to
    out = []
    for i in idx:
        top, left = (int(v) for v in rng.integers(0, span + 1, size=2))
        out.append(pool[i, :, top:top + crop_to, left:left + crop_to])
    return np.stack(out)


def train(source: DatasetManifest, target: DatasetManifest, config: GanConfig, class_index: int = -1) -> TrainState:
    """Run ``config.total_steps`` steps on unpaired random crops of both domains."""
    if len(source) == 0 or len(target) == 0:
        raise ValueError("GAN training needs non-empty source and target manifests")
    with precision(32):
        xs, ys = _prepare(source, config.resize_to), _prepare(target, config.resize_to)
        state = init_state(config, class_index)
        while state.step < config.total_steps:
            xb = _crop_batch(xs, state.rng, config.batch_size, config.crop_to)
            yb = _crop_batch(ys, state.rng, config.batch_size, config.crop_to)
            state = train_step(state, xb, yb, config)
            if state.step % 100 == 0:
                log.info("gan step %d total %.4f", state.step, state.history[-1][-1])
    return state


# ---------------------------------------------------------------------------
# persistence


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    return {f"{net}/{k}": v.data for net, p in state.params.items() for k, v in p.items()}


def write_loss_csv(path, history: Sequence[tuple]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return path


def read_loss_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != LOSS_COLUMNS:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(LOSS_COLUMNS))


def _save_model(out_dir: Path, stem: str, state: TrainState, config: GanConfig, class_name: str | None) -> dict:
    meta = {
        "config": config.to_dict(),
        "generator": config.generator_spec.to_dict(),
        "discriminator": config.discriminator_spec.to_dict(),
        "class": class_name,
        "steps": state.step,
    }
    ckpt = save_checkpoint(out_dir / f"{stem}.ckpt", state_tensors(state), meta)
    losses = write_loss_csv(out_dir / f"{stem}_losses.csv", state.history)
    return {"checkpoint": ckpt.name, "losses": losses.name}


@dataclass
class GanRun:
    index_path: Path
    index: dict
    states: dict[str, TrainState]


def run_training(source: DatasetManifest, target: DatasetManifest, config: GanConfig, out_dir) -> GanRun:
    """Train and save translation model(s) under ``out_dir``.

    Writes ``checkpoints.json`` mapping each class name (or ``"*"`` for the
    unconditioned model) to its checkpoint and loss CSV.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index: dict = {"mode": config.mode, "conditioned": config.conditioned, "models": {}, "fallback": []}
    states: dict[str, TrainState] = {}

    def unconditioned():
        if "*" not in states:
            states["*"] = train(source, target, config)
            index["models"]["*"] = _save_model(out_dir, "model", states["*"], config, None)
        return index["models"]["*"]

    if not config.conditioned:
        unconditioned()
    else:
        present = sorted({c for s in source.samples for c in s.labels})
        for c in present:
            name = source.classes[c]
            src_c, tgt_c = source.filter_class(c), target.filter_class(c)
            if len(tgt_c) == 0:
                warnings.warn(f"class {name!r} absent from the target domain; using the unconditioned model")
                index["fallback"].append(name)
                index["models"][name] = unconditioned()
                continue
            states[name] = train(src_c, tgt_c, config, class_index=c)
            index["models"][name] = _save_model(out_dir, f"model_{name}", states[name], config, name)
    path = out_dir / INDEX_FILE
    path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return GanRun(path, index, states)


def load_generators(index_path) -> tuple[dict[str, dict[str, Tensor]], dict]:
    """Generator G per class key (``"*"`` when unconditioned) and the saved meta."""
    index_path = Path(index_path)
    index = json.loads(index_path.read_text())
    gens: dict[str, dict[str, Tensor]] = {}
    meta: dict = {}
    cache: dict[str, dict[str, Tensor]] = {}
    for key, entry in index["models"].items():
        name = entry["checkpoint"]
        if name not in cache:
            tensors, meta = load_checkpoint(index_path.parent / name)
            cache[name] = {k[2:]: Tensor(v) for k, v in tensors.items() if k.startswith("G/")}
            if not cache[name]:
                raise KeyError(f"{name} holds no generator tensors")
        gens[key] = cache[name]
    return gens, meta or {}


def translate(gen: dict[str, Tensor], images: np.ndarray, crop_to: int, batch: int = 16) -> np.ndarray:
    """Resize to ``crop_to``, apply G, and resize back to the input resolution."""
    spec = infer_generator_spec(gen)
    out = []
    with no_grad():
        for start in range(0, len(images), batch):
            chunk = images[start:start + batch]
            small = np.stack([resize(img, crop_to) for img in chunk])
            fake = generator_forward(gen, small, spec).numpy()
            out.extend(resize(f, img.shape[1], img.shape[2]) for f, img in zip(fake, chunk))
    return np.stack(out)


def transform_dataset(index_path, source: DatasetManifest, out_dir) -> DatasetManifest:
    """Translate every source image; boxes and labels are carried over untouched."""
    gens, meta = load_generators(index_path)
    crop_to = int(meta.get("config", {}).get("crop_to", GanConfig.crop_to))
    out_dir = Path(out_dir)
    images = np.stack(source.images()) if len(source) else np.zeros((0, 3, 1, 1))
    keys = []
    for s in source.samples:
        if "*" in gens:
            keys.append("*")
            continue
        name = source.classes[s.dominant_class()]
        if name not in gens:
            raise KeyError(f"no translation model for class {name!r}")
        keys.append(name)
    translated = np.zeros(images.shape)
    with precision(32):
        for key in sorted(set(keys)):
            idx = [i for i, k in enumerate(keys) if k == key]
            translated[idx] = translate(gens[key], images[idx], crop_to)
    samples = [
        ImageSample(f"images/{i:05d}.ppm", s.domain, list(s.labels), s._boxes) for i, s in enumerate(source.samples)
    ]
    out = DatasetManifest(samples, list(source.classes), out_dir, source.split, f"{source.provenance}; translated")
    quantized = [quantize(img) for img in translated]
    write_images(out, quantized)
    for i, img in enumerate(quantized):
        out._cache[i] = img
    out.write(out_dir / "manifest.jsonl")
    return out
