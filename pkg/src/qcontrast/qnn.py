"""Quadratic convolution, the quadratic ResNet backbone, heads and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import (
    ParamGroup,
    RunningStats,
    Tensor,
    avg_pool_global,
    batch_norm1d,
    concat,
    conv1d,
    dense,
    flatten,
    hadamard,
    l2_normalize,
    max_pool1d,
    quadratic_conv1d,
    relu,
)

VARIANTS = ("full", "no_power", "single_inner")
NEURONS = ("quadratic", "conventional")

# parameter names per variant, in initialization order
_VARIANT_PARAMS = {
    "full": ("w_r", "b_r", "w_g", "b_g", "w_b", "c"),
    "no_power": ("w_r", "b_r", "w_g", "b_g"),
    "single_inner": ("w_r", "b_r", "w_b", "c"),
}
LINEAR_NAMES = frozenset({"w_r", "b_r"})


class QuadraticConv1d:
    """Quadratic convolution returning the pre-activation.

    ``full``: (x*w_r + b_r)(x*w_g + b_g) + (x.x)*w_b + c
    ``no_power``: drops the power term
    ``single_inner``: (x*w_r + b_r) + (x.x)*w_b + c
    """

    def __init__(self, ch_in: int, ch_out: int, k: int, stride: int = 1, padding: int = 0, variant: str = "full"):
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown quadratic variant {variant!r}")
        self.ch_in, self.ch_out, self.k = ch_in, ch_out, k
        self.stride, self.padding, self.variant = stride, padding, variant
        self.params: dict[str, Tensor] = {}
        for name in _VARIANT_PARAMS[variant]:
            shape = (ch_out, ch_in, k) if name.startswith("w") else (ch_out,)
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

    def __getattr__(self, name):
        params = self.__dict__.get("params", {})
        if name in params:
            return params[name]
        raise AttributeError(name)

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        return quadratic_conv1d(
            x, p["w_r"], p["b_r"], p.get("w_g"), p.get("b_g"), p.get("w_b"), p.get("c"), self.stride, self.padding
        )

    def composed(self, x: Tensor) -> Tensor:
        """Same pre-activation built from separate conv1d/hadamard ops."""
        p = self.params
        s, pad = self.stride, self.padding
        first = conv1d(x, p["w_r"], p["b_r"], s, pad)
        if self.variant == "single_inner":
            out = first
        else:
            out = hadamard(first, conv1d(x, p["w_g"], p["b_g"], s, pad))
        if self.variant != "no_power":
            out = out + conv1d(hadamard(x, x), p["w_b"], p["c"], s, pad)
        return out

    def named_parameters(self):
        for name, t in self.params.items():
            yield name, t, "linear" if name in LINEAR_NAMES else "quadratic"

    def init(self, rng: np.random.Generator) -> None:
        """ReLinear state: He-scaled first-order terms, neutral quadratic terms."""
        fan_in = self.ch_in * self.k
        p = self.params
        p["w_r"].data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), p["w_r"].shape)
        p["b_r"].data[...] = rng.normal(0.0, np.sqrt(1.0 / fan_in), p["b_r"].shape)
        for name in ("w_g", "w_b", "c"):
            if name in p:
                p[name].data[...] = 0.0
        if "b_g" in p:
            p["b_g"].data[...] = 1.0


class Conv1d:
    """Conventional convolution; parameters reuse the ``w_r``/``b_r`` names."""

    def __init__(self, ch_in: int, ch_out: int, k: int, stride: int = 1, padding: int = 0):
        self.ch_in, self.ch_out, self.k = ch_in, ch_out, k
        self.stride, self.padding = stride, padding
        self.params = {
            "w_r": Tensor(np.zeros((ch_out, ch_in, k)), requires_grad=True, name="w_r"),
            "b_r": Tensor(np.zeros(ch_out), requires_grad=True, name="b_r"),
        }

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.params["w_r"], self.params["b_r"], self.stride, self.padding)

    def named_parameters(self):
        for name, t in self.params.items():
            yield name, t, "linear"

    def init(self, rng: np.random.Generator) -> None:
        fan_in = self.ch_in * self.k
        self.params["w_r"].data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (self.ch_out, self.ch_in, self.k))
        self.params["b_r"].data[...] = rng.normal(0.0, np.sqrt(1.0 / fan_in), self.ch_out)


class BatchNorm1d:
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.params = {
            "gamma": Tensor(np.ones(channels), requires_grad=True, name="gamma"),
            "beta": Tensor(np.zeros(channels), requires_grad=True, name="beta"),
        }
        self.stats = RunningStats.fresh(channels)
        self.eps, self.momentum = eps, momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm1d(x, self.params["gamma"], self.params["beta"], self.stats, training, self.eps, self.momentum)

    def named_parameters(self):
        for name, t in self.params.items():
            yield name, t, "linear"

    def init(self, rng=None) -> None:
        self.params["gamma"].data[...] = 1.0
        self.params["beta"].data[...] = 0.0
        self.stats = RunningStats.fresh(len(self.stats.mean))


class Dense:
    def __init__(self, d_in: int, d_out: int):
        self.d_in, self.d_out = d_in, d_out
        self.params = {
            "weight": Tensor(np.zeros((d_out, d_in)), requires_grad=True, name="weight"),
            "bias": Tensor(np.zeros(d_out), requires_grad=True, name="bias"),
        }

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.params["weight"], self.params["bias"])

    def named_parameters(self):
        for name, t in self.params.items():
            yield name, t, "linear"

    def init(self, rng: np.random.Generator) -> None:
        self.params["weight"].data[...] = rng.normal(0.0, np.sqrt(2.0 / self.d_in), (self.d_out, self.d_in))
        self.params["bias"].data[...] = 0.0


@dataclass
class BackboneConfig:
    neuron: str = "quadratic"
    variant: str = "full"
    channels: list[int] = field(default_factory=lambda: [16, 16, 32, 64, 128])
    stem_kernel: int = 7
    block_kernel: int = 3
    input_len: int = 2048

    @property
    def n_blocks(self) -> int:
        return len(self.channels) - 1

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def validate(self) -> None:
        if self.neuron not in NEURONS:
            raise ConfigurationError(f"neuron must be one of {NEURONS}, got {self.neuron!r}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.channels) < 2:
            raise ConfigurationError("channel progression needs a stem width and at least one block")
        if any(c < 1 for c in self.channels):
            raise ConfigurationError(f"channel counts must be positive: {self.channels}")
        if self.channels[1] != self.channels[0]:
            raise ConfigurationError("the first residual block keeps the stem width (identity shortcut)")
        for k in (self.stem_kernel, self.block_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"kernel sizes must be odd and positive, got {k}")
        # each stride-2 stage needs something left to halve
        if self.input_len < 4 * 2 ** (self.n_blocks - 1):
            raise ConfigurationError(f"input_len {self.input_len} too short for {self.n_blocks} blocks")


def _make_conv(cfg: BackboneConfig, ch_in: int, ch_out: int, k: int, stride: int, padding: int):
    if cfg.neuron == "quadratic":
        return QuadraticConv1d(ch_in, ch_out, k, stride, padding, cfg.variant)
    return Conv1d(ch_in, ch_out, k, stride, padding)


class ResBlock:
    """conv-BN-ReLU-conv-BN plus shortcut, then ReLU.

    With ``downsample`` the first conv has stride 2 and the shortcut is a
    stride-2 width-1 conv followed by BN.
    """

    def __init__(self, cfg: BackboneConfig, ch_in: int, ch_out: int, downsample: bool):
        k = cfg.block_kernel
        stride = 2 if downsample else 1
        self.conv1 = _make_conv(cfg, ch_in, ch_out, k, stride, k // 2)
        self.bn1 = BatchNorm1d(ch_out)
        self.conv2 = _make_conv(cfg, ch_out, ch_out, k, 1, k // 2)
        self.bn2 = BatchNorm1d(ch_out)
        if downsample:
            self.short_conv = _make_conv(cfg, ch_in, ch_out, 1, 2, 0)
            self.short_bn = BatchNorm1d(ch_out)
        else:
            self.short_conv = self.short_bn = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = relu(self.bn1(self.conv1(x), training))
        out = self.bn2(self.conv2(out), training)
        short = x if self.short_conv is None else self.short_bn(self.short_conv(x), training)
        return relu(out + short)

    def modules(self):
        yield "conv1", self.conv1
        yield "bn1", self.bn1
        yield "conv2", self.conv2
        yield "bn2", self.bn2
        if self.short_conv is not None:
            yield "short_conv", self.short_conv
            yield "short_bn", self.short_bn


class Backbone:
    def __init__(self, cfg: BackboneConfig):
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels
        k = cfg.stem_kernel
        self.stem_conv = _make_conv(cfg, 1, ch[0], k, 2, k // 2)
        self.stem_bn = BatchNorm1d(ch[0])
        self.blocks = [ResBlock(cfg, ch[0], ch[1], downsample=False)]
        for i in range(2, len(ch)):
            self.blocks.append(ResBlock(cfg, ch[i - 1], ch[i], downsample=True))

    def stem(self, x: Tensor, training: bool) -> Tensor:
        out = relu(self.stem_bn(self.stem_conv(x), training))
        return max_pool1d(out, 3, 2, 1)

    def trace(self, x: Tensor, training: bool = False) -> list[Tensor]:
        """Stem output followed by every block output."""
        outs = [self.stem(x, training)]
        for block in self.blocks:
            outs.append(block(outs[-1], training))
        return outs

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim == 2:
            x = x.reshape(x.shape[0], 1, x.shape[1])
        return flatten(avg_pool_global(self.trace(x, training)[-1]))

    def modules(self):
        yield "stem.conv", self.stem_conv
        yield "stem.bn", self.stem_bn
        for i, block in enumerate(self.blocks):
            for name, mod in block.modules():
                yield f"block{i}.{name}", mod


class Heads:
    """Projection MLP (feature -> hidden -> out, unit-norm) and linear classifier."""

    def __init__(self, feature_dim: int, n_classes: int, proj_hidden: int = 128, proj_dim: int = 64):
        self.proj1 = Dense(feature_dim, proj_hidden)
        self.proj2 = Dense(proj_hidden, proj_dim)
        self.classifier = Dense(feature_dim, n_classes)

    def project(self, features: Tensor) -> Tensor:
        return l2_normalize(self.proj2(relu(self.proj1(features))))

    def classify(self, features: Tensor) -> Tensor:
        return self.classifier(features)

    def modules(self):
        yield "head.proj1", self.proj1
        yield "head.proj2", self.proj2
        yield "head.classifier", self.classifier


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    n_classes: int = 10
    proj_hidden: int = 128
    proj_dim: int = 64

    def digest(self) -> bytes:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


class Network:
    def __init__(self, cfg: ModelConfig):
        if cfg.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        self.heads = Heads(cfg.backbone.feature_dim, cfg.n_classes, cfg.proj_hidden, cfg.proj_dim)

    def modules(self):
        yield from self.backbone.modules()
        yield from self.heads.modules()

    def named_parameters(self):
        for prefix, mod in self.modules():
            for name, t, tag in mod.named_parameters():
                yield f"{prefix}.{name}", t, tag

    def parameters(self) -> list[Tensor]:
        return [t for _, t, _ in self.named_parameters()]

    def param_groups(self, exclude: tuple[str, ...] = ()) -> dict[str, ParamGroup]:
        """Linear and quadratic groups; names starting with an ``exclude`` prefix are left out."""
        groups = {"linear": ParamGroup("linear"), "quadratic": ParamGroup("quadratic")}
        for name, t, tag in self.named_parameters():
            if not (exclude and name.startswith(exclude)):
                groups[tag].members.append(t)
        return groups

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t, _ in self.named_parameters()}
        for prefix, mod in self.modules():
            if isinstance(mod, BatchNorm1d):
                state[f"{prefix}.running_mean"] = mod.stats.mean.copy()
                state[f"{prefix}.running_var"] = mod.stats.var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t, _ in self.named_parameters():
            if name not in state:
                raise ConfigurationError(f"state is missing parameter {name!r}")
            if state[name].shape != t.shape:
                raise DimensionError(f"{name}: stored shape {state[name].shape}, expected {t.shape}")
            t.data[...] = state[name]
        for prefix, mod in self.modules():
            if isinstance(mod, BatchNorm1d):
                mod.stats = RunningStats(
                    np.array(state[f"{prefix}.running_mean"], dtype=np.float64),
                    np.array(state[f"{prefix}.running_var"], dtype=np.float64),
                )

    def features(self, x, training: bool = False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self.backbone(x, training)

    def __call__(self, x, training: bool = False) -> Tensor:
        return self.heads.classify(self.features(x, training))


def relinear_init(network: Network, rng: np.random.Generator | int) -> dict[str, ParamGroup]:
    """Initialize every layer in module order; returns the two parameter groups."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    for _, mod in network.modules():
        mod.init(rng)
    return network.param_groups()


def build_backbone(cfg: BackboneConfig, seed) -> Backbone:
    backbone = Backbone(cfg)
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    for _, mod in backbone.modules():
        mod.init(rng)
    return backbone


def build_network(cfg: ModelConfig, seed) -> Network:
    net = Network(cfg)
    relinear_init(net, seed)
    return net


def conventional_twin(network: Network) -> Network:
    """Conventional network sharing the first-order and all non-conv parameters.

    For a ReLinear-initialized quadratic network both compute the same function.
    """
    bb = network.cfg.backbone
    twin_cfg = ModelConfig(
        BackboneConfig("conventional", "full", list(bb.channels), bb.stem_kernel, bb.block_kernel, bb.input_len),
        network.cfg.n_classes,
        network.cfg.proj_hidden,
        network.cfg.proj_dim,
    )
    twin = Network(twin_cfg)
    state = network.state_dict()
    twin.load_state_dict({k: v for k, v in state.items() if k.split(".")[-1] not in ("w_g", "b_g", "w_b", "c")})
    return twin


def forward_two_branch(network: Network, raw, views, training: bool = True) -> tuple[Tensor, Tensor]:
    """Run raw windows and their augmented views through one shared backbone.

    Returns classifier logits for the ``B`` raw windows and unit-norm
    projections for the ``2B`` views. Both branches share one forward pass so
    batch-norm statistics cover the whole step.
    """
    raw = np.asarray(raw, dtype=np.float64)
    views = np.asarray(views, dtype=np.float64)
    b = raw.shape[0]
    if views.shape[0] != 2 * b:
        raise DimensionError(f"expected {2 * b} views for {b} raw windows, got {views.shape[0]}")
    if raw.shape[1:] != views.shape[1:]:
        raise DimensionError(f"window length mismatch: raw {raw.shape[1:]}, views {views.shape[1:]}")
    x = Tensor(np.concatenate([raw, views], axis=0)[:, None, :])
    feats = network.features(x, training)
    logits = network.heads.classify(feats[:b])
    emb = network.heads.project(feats[b:])
    return logits, emb


# checkpoint file layout (little endian):
#   magic 4s | version u16 | digest 32s | n_blobs u32
#   per blob: name_len u16 | name | ndim u8 | dims u32*ndim | f64 data
MAGIC = b"QCKP"
VERSION = 1


def save_checkpoint(path, state: dict[str, np.ndarray], digest: bytes) -> None:
    if len(digest) != 32:
        raise ConfigurationError("config digest must be 32 bytes")
    parts = [struct.pack("<4sH32sI", MAGIC, VERSION, digest, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack(f"<H{len(raw_name)}sB", len(raw_name), raw_name, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    head = struct.calcsize("<4sH32sI")
    if len(buf) < head:
        raise ConfigurationError(f"{path}: truncated checkpoint header")
    magic, version, digest, count = struct.unpack_from("<4sH32sI", buf, 0)
    if magic != MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    off = head
    state = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            if off + 8 * size > len(buf):
                raise ConfigurationError(f"{path}: blob {name!r} truncated")
            state[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
            off += 8 * size
    except struct.error as exc:
        raise ConfigurationError(f"{path}: truncated checkpoint at byte {off}") from exc
    return digest, state


def load_checkpoint(path, network: Network) -> dict[str, np.ndarray]:
    """Load parameters into ``network``; returns blobs the network does not own."""
    digest, state = read_checkpoint(path)
    if digest != network.cfg.digest():
        raise ConfigurationError(f"{path}: config digest mismatch; checkpoint was written for a different model")
    network.load_state_dict(state)
    own = set(network.state_dict())
    return {k: v for k, v in state.items() if k not in own}
