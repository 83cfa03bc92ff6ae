"""Encoders, projection heads, and the bundle abstraction.

A :class:`ModelBundle` pairs a backbone encoder with an MLP projection
head. Contrastive losses act on the head output ("embedding"); probes
and transfer act on the backbone output ("representation") with the head
discarded. Bundles are built deterministically from (config, seed), so
two processes constructing the same bundle agree bit for bit, which the
checksum makes cheap to verify.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module
from .tensor import ShapeError, Tensor, rng_from_key

__all__ = [
    "EncoderConfig",
    "ConvEncoder",
    "MlpEncoder",
    "ProjectionHead",
    "ModelBundle",
    "build_encoder",
    "build_bundle",
    "forward_embed",
    "freeze",
    "param_count",
    "checksum",
    "expand_hidden_dim",
    "clone_bundle",
]

# Stage widths for the named architectures. Conv stages are 3x3 convs,
# so conv-large is both deeper and wider than conv-small (param ratio ~16).
ARCH_WIDTHS = {
    # conv-small ends in a narrow stage on purpose: its 24-dim pooled
    # output is the tightest channel in the student, so projection-head
    # width is a real knob rather than slack capacity.
    "conv-small": (32, 64, 24),
    "conv-large": (32, 64, 128, 256),
    "mlp-small": (128, 64),
    "mlp-large": (512, 512, 256),
}

# Per-stage strides. Downsampling stages use stride 2; conv-large's extra
# stage keeps resolution, otherwise small inputs would pool over a 2x2
# grid and lose the spatial layout that distinguishes fine geometry.
ARCH_STRIDES = {
    "conv-small": (2, 2, 2),
    "conv-large": (2, 2, 2, 1),
}


@dataclass(frozen=True)
class EncoderConfig:
    arch: str
    widths: tuple[int, ...] = ()
    in_channels: int = 3
    in_dim: int | None = None  # mlp input size; conv derives from data

    def resolved_widths(self) -> tuple[int, ...]:
        if self.widths:
            return tuple(int(w) for w in self.widths)
        if self.arch not in ARCH_WIDTHS:
            raise ValueError(f"unknown arch {self.arch!r} and no explicit widths")
        return ARCH_WIDTHS[self.arch]

    def resolved_strides(self) -> tuple[int, ...]:
        widths = self.resolved_widths()
        strides = ARCH_STRIDES.get(self.arch, ())
        if len(strides) == len(widths):
            return strides
        return (2,) * len(widths)

    @property
    def kind(self) -> str:
        if self.arch.startswith("conv"):
            return "conv"
        if self.arch.startswith("mlp"):
            return "mlp"
        raise ValueError(f"arch {self.arch!r} must start with 'conv' or 'mlp'")

    @property
    def repr_dim(self) -> int:
        return self.resolved_widths()[-1]


class ConvEncoder(Module):
    """Stack of 3x3 conv+ReLU stages, closed by global average pooling,
    so the representation width equals the last stage's channels."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        widths = config.resolved_widths()
        strides = config.resolved_strides()
        self.stages = []
        prev = config.in_channels
        for w, s in zip(widths, strides):
            self.stages.append(Conv2d(prev, w, 3, rng, stride=s, padding=1))
            prev = w
        self.repr_dim = widths[-1]

    def forward(self, x: Tensor, want_acts: bool = False):
        acts = []
        h = x
        for stage in self.stages:
            h = T.relu(stage(h))
            if want_acts:
                acts.append(h)
        rep = T.global_avg_pool(h)
        return (rep, acts) if want_acts else rep

    def relu_preactivations(self, x: Tensor):
        """(bias, pre-activation) pairs for kink nudging in gradient checks."""
        pairs = []
        h = x
        for stage in self.stages:
            z = stage(h)
            pairs.append((stage.bias, z.data))
            h = T.relu(z)
        return pairs


class MlpEncoder(Module):
    """Flatten, then Linear+ReLU per width; representation is the last layer."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        if config.in_dim is None:
            raise ValueError("mlp encoder needs in_dim")
        self.config = config
        widths = config.resolved_widths()
        self.layers = []
        prev = config.in_dim
        for w in widths:
            self.layers.append(Linear(prev, w, rng))
            prev = w
        self.repr_dim = widths[-1]

    def forward(self, x: Tensor, want_acts: bool = False):
        h = x if x.ndim == 2 else T.reshape(x, (x.shape[0], -1))
        acts = []
        for layer in self.layers:
            h = T.relu(layer(h))
            if want_acts:
                acts.append(h)
        return (h, acts) if want_acts else h

    def relu_preactivations(self, x: Tensor):
        h = x if x.ndim == 2 else T.reshape(x, (x.shape[0], -1))
        pairs = []
        for layer in self.layers:
            z = layer(h)
            pairs.append((layer.bias, z.data))
            h = T.relu(z)
        return pairs


def build_encoder(config: EncoderConfig, seed: int) -> Module:
    rng = rng_from_key(seed, "encoder", config.arch)
    if config.kind == "conv":
        return ConvEncoder(config, rng)
    return MlpEncoder(config, rng)


class ProjectionHead(Module):
    """One or two linear layers mapping representation to embedding space.

    ``hidden_dim=None`` drops the hidden layer entirely (single linear),
    which is the degenerate end of the hidden-width study.
    """

    def __init__(self, in_dim: int, hidden_dim: int | None, out_dim: int,
                 rng: np.random.Generator):
        self.in_dim = int(in_dim)
        self.hidden_dim = None if hidden_dim is None else int(hidden_dim)
        self.out_dim = int(out_dim)
        if self.hidden_dim is None:
            self.fc1 = Linear(in_dim, out_dim, rng)
            self.fc2 = None
        else:
            self.fc1 = Linear(in_dim, self.hidden_dim, rng)
            self.fc2 = Linear(self.hidden_dim, out_dim, rng)

    def forward(self, rep: Tensor) -> Tensor:
        if self.fc2 is None:
            return self.fc1(rep)
        return self.fc2(T.relu(self.fc1(rep)))


class ModelBundle:
    """Encoder + projection head + frozen flag."""

    def __init__(self, encoder: Module, head: ProjectionHead,
                 encoder_config: EncoderConfig, frozen: bool = False):
        self.encoder = encoder
        self.head = head
        self.encoder_config = encoder_config
        self.frozen = frozen

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"encoder.{n}", p) for n, p in self.encoder.named_parameters()]
        out += [(f"head.{n}", p) for n, p in self.head.named_parameters()]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @property
    def repr_dim(self) -> int:
        return self.encoder.repr_dim

    @property
    def embed_dim(self) -> int:
        return self.head.out_dim

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise ShapeError(f"bundle state mismatch on keys: {missing}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ShapeError(f"bundle param {name}: shape {arr.shape} != "
                                 f"{p.data.shape}")
            p.data = arr.astype(p.data.dtype)


def forward_embed(bundle: ModelBundle, batch: Tensor,
                  want_acts: bool = False):
    """Run batch -> (representation, raw embedding)[, activations]."""
    if want_acts:
        rep, acts = bundle.encoder(batch, want_acts=True)
        return rep, bundle.head(rep), acts
    rep = bundle.encoder(batch)
    return rep, bundle.head(rep)


def build_bundle(encoder_config: EncoderConfig, head_hidden: int | None,
                 embed_dim: int, seed: int) -> ModelBundle:
    """Deterministic bundle construction: same (config, seed) -> same bytes."""
    encoder = build_encoder(encoder_config, seed)
    head = ProjectionHead(encoder.repr_dim, head_hidden, embed_dim,
                          rng_from_key(seed, "head", encoder_config.arch))
    return ModelBundle(encoder, head, encoder_config)


def freeze(bundle: ModelBundle) -> ModelBundle:
    """Mark every parameter grad-free; forward passes stop taping entirely."""
    for p in bundle.parameters():
        p.requires_grad = False
        p.grad = None
    bundle.frozen = True
    return bundle


def param_count(bundle: ModelBundle) -> int:
    return sum(p.size for p in bundle.parameters())


def checksum(module_or_bundle) -> str:
    """Order-stable 64-bit digest of all parameters (hex string).

    Hashes name, dtype, shape, and little-endian bytes of every parameter
    in named order, so equal bundles give equal digests across processes.
    """
    h = hashlib.blake2b(digest_size=8)
    for name, p in module_or_bundle.named_parameters():
        h.update(name.encode())
        h.update(str(p.data.dtype).encode())
        h.update(np.asarray(p.data.shape, dtype="<i8").tobytes())
        arr = p.data.astype(p.data.dtype.newbyteorder("<"), copy=False)
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def expand_hidden_dim(head: ProjectionHead, new_hidden: int | None,
                      seed: int) -> ProjectionHead:
    """Fresh head with the hidden width changed; in/out dims are preserved.

    This is the single knob of the hidden-width study: weights are newly
    initialized, not copied, since the shapes are incompatible anyway.
    """
    rng = rng_from_key(seed, "head-expand", -1 if new_hidden is None else new_hidden)
    return ProjectionHead(head.in_dim, new_hidden, head.out_dim, rng)


def clone_bundle(bundle: ModelBundle) -> ModelBundle:
    """Structural copy with identical parameter values (e.g. key encoder init)."""
    out = build_bundle(bundle.encoder_config, bundle.head.hidden_dim,
                       bundle.head.out_dim, seed=0)
    for (_, src), (_, dst) in zip(bundle.named_parameters(),
                                  out.named_parameters()):
        dst.data = src.data.copy()
    return out
