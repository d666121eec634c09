"""Residual translation generators and patch discriminators.

Parameters live in plain ``dict[str, Tensor]`` collections keyed by layer
name, so they serialize directly into checkpoints and feed ``adam_step``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import ShapeError, Tensor, conv2d, conv2d_transpose, instance_norm, leaky_relu, relu, tanh

Params = dict[str, Tensor]

INIT_STD = 0.02
# "residual": instance norm only inside residual branches, so per-image colour
# statistics survive the main path; "all": norm after every hidden conv.
NORM_SCOPES = ("residual", "all")


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 3
    base_width: int = 16
    n_resblocks: int = 3
    n_downsample: int = 2
    norm: str = "residual"

    def __post_init__(self):
        if self.in_channels < 1 or self.base_width < 1 or self.n_downsample < 1:
            raise ValueError(f"invalid generator spec {self}")
        if self.n_resblocks < 0:
            raise ValueError("n_resblocks must be >= 0")
        if self.norm not in NORM_SCOPES:
            raise ValueError(f"norm must be one of {NORM_SCOPES}, got {self.norm!r}")

    @property
    def factor(self) -> int:
        return 2**self.n_downsample

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 3
    n_layers: int = 3
    base_width: int = 16

    def __post_init__(self):
        if self.in_channels < 1 or self.n_layers < 1 or self.base_width < 1:
            raise ValueError(f"invalid discriminator spec {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def generator_layout(spec: GeneratorSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list for every generator parameter."""
    layout: list[tuple[str, tuple[int, ...]]] = []

    def conv(prefix, cout, cin, k, transpose=False):
        layout.append((f"{prefix}.w", (cin, cout, k, k) if transpose else (cout, cin, k, k)))
        layout.append((f"{prefix}.b", (cout,)))

    def norm(prefix, c):
        layout.extend([(f"{prefix}.g", (c,)), (f"{prefix}.beta", (c,))])

    outer = spec.norm == "all"
    width = spec.base_width
    conv("stem", width, spec.in_channels, 7)
    if outer:
        norm("stem.n", width)
    for i in range(spec.n_downsample):
        conv(f"down{i}", width * 2, width, 3)
        if outer:
            norm(f"down{i}.n", width * 2)
        width *= 2
    for i in range(spec.n_resblocks):
        conv(f"res{i}.c1", width, width, 3)
        norm(f"res{i}.n1", width)
        conv(f"res{i}.c2", width, width, 3)
        norm(f"res{i}.n2", width)
    for i in range(spec.n_downsample):
        conv(f"up{i}", width // 2, width, 4, transpose=True)
        if outer:
            norm(f"up{i}.n", width // 2)
        width //= 2
    conv("out", spec.in_channels, width, 7)
    return layout


def _init_std(name: str, shape: tuple[int, ...], spec: GeneratorSpec) -> float:
    """N(0, 0.02) where a norm follows; fan-in scaling on unnormalized main-path convs.

    Without a following norm, 0.02 shrinks the signal roughly tenfold per
    layer and the skip path vanishes under the normalized residual branches.
    """
    if spec.norm == "all" or name.startswith("res"):
        return INIT_STD
    if name.startswith("up"):
        fan_in = shape[1] * shape[2] * shape[3] // 4  # stride-2 transpose: each output sees a quarter of the taps
    else:
        fan_in = shape[1] * shape[2] * shape[3]
    gain = 1.0 if name.startswith("out") else 2.0
    return float(np.sqrt(gain / fan_in))


def build_generator(spec: GeneratorSpec, rng_seed) -> Params:
    rng = np.random.default_rng(rng_seed)
    params: Params = {}
    for name, shape in generator_layout(spec):
        if name.endswith(".w"):
            data = rng.normal(0.0, _init_std(name, shape, spec), size=shape)
        elif name.endswith(".g") and not (spec.norm == "residual" and name.endswith(".n2.g")):
            data = np.ones(shape)
        else:
            # zero gain on the closing norm makes every residual block start as the identity
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _norm(params: Params, prefix: str, x: Tensor) -> Tensor:
    return instance_norm(x, params[f"{prefix}.g"], params[f"{prefix}.beta"])


def _maybe_norm(params: Params, prefix: str, x: Tensor) -> Tensor:
    return _norm(params, prefix, x) if f"{prefix}.g" in params else x


def generator_forward(params: Params, image, spec: GeneratorSpec) -> Tensor:
    """Map (B, C, S, S) images in [-1, 1] to same-shape images in (-1, 1)."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"generator expects (B, {spec.in_channels}, S, S), got {x.shape}")
    if x.shape[2] % spec.factor or x.shape[3] % spec.factor:
        raise ShapeError(f"spatial size {x.shape[2:]} not divisible by {spec.factor}")
    p = params
    h = conv2d(x, p["stem.w"], p["stem.b"], padding=3, pad_mode="reflect")
    h = relu(_maybe_norm(p, "stem.n", h))
    for i in range(spec.n_downsample):
        h = conv2d(h, p[f"down{i}.w"], p[f"down{i}.b"], stride=2, padding=1)
        h = relu(_maybe_norm(p, f"down{i}.n", h))
    for i in range(spec.n_resblocks):
        r = conv2d(h, p[f"res{i}.c1.w"], p[f"res{i}.c1.b"], padding=1, pad_mode="reflect")
        r = relu(_norm(p, f"res{i}.n1", r))
        r = conv2d(r, p[f"res{i}.c2.w"], p[f"res{i}.c2.b"], padding=1, pad_mode="reflect")
        h = h + _norm(p, f"res{i}.n2", r)
    for i in range(spec.n_downsample):
        h = conv2d_transpose(h, p[f"up{i}.w"], p[f"up{i}.b"], stride=2, padding=1)
        h = relu(_maybe_norm(p, f"up{i}.n", h))
    h = conv2d(h, p["out.w"], p["out.b"], padding=3, pad_mode="reflect")
    return tanh(h)


def discriminator_layout(spec: DiscriminatorSpec) -> list[tuple[str, tuple[int, ...]]]:
    layout: list[tuple[str, tuple[int, ...]]] = []
    cin, width = spec.in_channels, spec.base_width
    for i in range(spec.n_layers):
        layout += [(f"conv{i}.w", (width, cin, 4, 4)), (f"conv{i}.b", (width,))]
        if i > 0:
            layout += [(f"conv{i}.n.g", (width,)), (f"conv{i}.n.beta", (width,))]
        cin, width = width, min(width * 2, spec.base_width * 8)
    layout += [("final.w", (1, cin, 3, 3)), ("final.b", (1,))]
    return layout


def build_patch_discriminator(spec: DiscriminatorSpec, rng_seed) -> Params:
    rng = np.random.default_rng(rng_seed)
    params: Params = {}
    for name, shape in discriminator_layout(spec):
        if name.endswith(".w"):
            data = rng.normal(0.0, INIT_STD, size=shape)
        elif name.endswith(".g"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def discriminator_forward(params: Params, image, spec: DiscriminatorSpec) -> Tensor:
    """Raw patch logits of shape (B, 1, S / 2**n_layers, S / 2**n_layers)."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    side = 2**spec.n_layers
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"discriminator expects (B, {spec.in_channels}, S, S), got {x.shape}")
    if x.shape[2] < side or x.shape[3] < side:
        raise ShapeError(f"input {x.shape[2:]} smaller than {side}x{side} needed by {spec.n_layers} layers")
    h = x
    for i in range(spec.n_layers):
        h = conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=2, padding=1)
        if i > 0:
            h = _norm(params, f"conv{i}.n", h)
        h = leaky_relu(h, 0.2)
    return conv2d(h, params["final.w"], params["final.b"], padding=1)


def param_count(params: Params) -> int:
    return sum(p.size for p in params.values())


def frozen(params: Params) -> Params:
    """Copies that do not require gradients (for inference and fixed opponents)."""
    return {k: Tensor(v.data) for k, v in params.items()}


def trainable(params: Params) -> Params:
    return {k: Tensor(v.data, requires_grad=True, name=k) for k, v in params.items()}


def infer_generator_spec(params) -> GeneratorSpec:
    """Recover the architecture from parameter names and shapes."""
    width, cin = params["stem.w"].shape[:2]
    n_down = sum(1 for k in params if k.startswith("down") and k.endswith(".w"))
    n_res = sum(1 for k in params if k.startswith("res") and k.endswith(".c1.w"))
    norm = "all" if "stem.n.g" in params else "residual"
    return GeneratorSpec(in_channels=cin, base_width=width, n_resblocks=n_res, n_downsample=n_down, norm=norm)


def infer_discriminator_spec(params) -> DiscriminatorSpec:
    width, cin = params["conv0.w"].shape[:2]
    n_layers = sum(1 for k in params if k.startswith("conv") and k.endswith(".w"))
    return DiscriminatorSpec(in_channels=cin, n_layers=n_layers, base_width=width)
