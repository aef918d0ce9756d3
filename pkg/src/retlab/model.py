"""Encoder-only vision transformer for small binary image datasets.

The architecture: images are cut into non-overlapping square patches and
embedded by a convolutional patch encoder (kernel = stride = patch size,
so each patch sees one shared affine map). Token positions enter through
rotary rotation of queries and keys inside every attention layer, so
attention logits depend only on relative patch positions. Each layer runs
pre-norm grouped-query attention (query heads share key/value projections
within groups) followed by a pre-norm SwiGLU unit, with two additive skip
paths into the layer output. A mean-pooled two-hidden-layer MLP with a
sigmoid output turns the final tokens into a single class probability.

Every structural choice is switchable for ablation runs: learned additive
position embeddings instead of rotary, a dense patch embedding instead of
the convolutional one, plain multi-head attention or no attention at all,
a GELU MLP or nothing in place of the SwiGLU, and each normalization and
skip connection individually removable.

All blocks are built on :mod:`retlab.autodiff`, so analytic gradients of
any output with respect to any parameter or intermediate feature map are
available, and everything is checkable against finite differences.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    """Invalid architecture configuration."""


POSITION_ENCODINGS = ("rope", "learned")
PATCH_EMBEDDINGS = ("conv", "mlp")
ATTENTION_KINDS = ("gqa", "multihead", "none")
FEEDFORWARD_KINDS = ("swiglu", "gelu_mlp", "none")


@dataclass(frozen=True)
class AblationFlags:
    """Structural toggles; the defaults are the unmodified architecture."""

    position_encoding: str = "rope"
    patch_embedding: str = "conv"
    attention: str = "gqa"
    feedforward: str = "swiglu"
    norm1_enabled: bool = True
    norm2_enabled: bool = True
    residual1_enabled: bool = True
    residual2_enabled: bool = True

    def __post_init__(self):
        if self.position_encoding not in POSITION_ENCODINGS:
            raise ConfigError(f"unknown position_encoding {self.position_encoding!r}")
        if self.patch_embedding not in PATCH_EMBEDDINGS:
            raise ConfigError(f"unknown patch_embedding {self.patch_embedding!r}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention {self.attention!r}")
        if self.feedforward not in FEEDFORWARD_KINDS:
            raise ConfigError(f"unknown feedforward {self.feedforward!r}")


@dataclass(frozen=True)
class ModelConfig:
    """Architectural hyperparameters.

    `d_head` defaults to max(2, 2*floor(d_model / (2*n_heads))) when not
    given; it must be even because rotary encoding rotates coordinate
    pairs. Images whose side is not a multiple of `patch_size` are
    edge-replication padded up to the next multiple before patching.
    """

    image_size: int
    channels: int = 1
    patch_size: int = 4
    d_model: int = 62
    n_layers: int = 1
    n_heads: int = 12
    n_groups: int = 3
    d_head: int | None = None
    mlp_hidden_1: int = 47
    mlp_hidden_2: int = 31
    rope_all_layers: bool = True
    layer_norm_eps: float = 1e-6
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        for name in ("image_size", "patch_size", "d_model", "n_layers",
                     "n_heads", "n_groups", "mlp_hidden_1", "mlp_hidden_2"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.n_heads % self.n_groups != 0:
            raise ConfigError(
                f"n_heads ({self.n_heads}) must be divisible by n_groups ({self.n_groups})")
        if self.d_head is None:
            object.__setattr__(self, "d_head",
                               max(2, 2 * (self.d_model // (2 * self.n_heads))))
        if self.d_head < 2 or self.d_head % 2 != 0:
            raise ConfigError(f"d_head must be even and >= 2, got {self.d_head}")

    @property
    def padded_size(self) -> int:
        return -(-self.image_size // self.patch_size) * self.patch_size

    @property
    def grid_size(self) -> int:
        return self.padded_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def heads_per_group(self) -> int:
        return self.n_heads // self.n_groups

    @property
    def kv_groups(self) -> int:
        """Stored key/value projection count (every head owns one when the
        multi-head variant is selected)."""
        return self.n_heads if self.ablation.attention == "multihead" else self.n_groups

    def with_ablation(self, **changes) -> "ModelConfig":
        return replace(self, ablation=replace(self.ablation, **changes))

    @classmethod
    def oct_default(cls, image_size: int = 50) -> "ModelConfig":
        """Tuned single-channel (OCT slice) configuration."""
        return cls(image_size=image_size, channels=1, patch_size=4, d_model=62,
                   n_layers=1, n_heads=12, n_groups=3,
                   mlp_hidden_1=47, mlp_hidden_2=31)

    @classmethod
    def fundus_default(cls, image_size: int = 50) -> "ModelConfig":
        """Tuned three-channel (fundus photo) configuration."""
        return cls(image_size=image_size, channels=3, patch_size=4, d_model=32,
                   n_layers=4, n_heads=2, n_groups=1,
                   mlp_hidden_1=31, mlp_hidden_2=28)


# ---------------------------------------------------------------------------
# rotary position tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RopeTable:
    """Precomputed rotation phases for one head width.

    angles[m] = 10000**(-2 m / d_head) for m = 0..d_head/2-1, so the pair
    frequencies are non-increasing. cos/sin have shape (n_positions,
    d_head) with each angle repeated across its coordinate pair.
    """

    d_head: int
    angles: np.ndarray
    cos: np.ndarray
    sin: np.ndarray
    pair_swap: np.ndarray
    pair_sign: np.ndarray


def rope_angles(d_head: int) -> np.ndarray:
    if d_head % 2 != 0:
        raise ConfigError(f"rotary encoding needs an even head width, got {d_head}")
    m = np.arange(d_head // 2, dtype=np.float64)
    return 10000.0 ** (-2.0 * m / d_head)


def build_rope_table(d_head: int, positions) -> RopeTable:
    positions = np.asarray(positions, dtype=np.float64)
    angles = rope_angles(d_head)
    phase = np.outer(positions, np.repeat(angles, 2))
    half = d_head // 2
    pair_swap = np.arange(d_head).reshape(half, 2)[:, ::-1].ravel()
    pair_sign = np.tile([-1.0, 1.0], half)
    return RopeTable(d_head, angles, np.cos(phase), np.sin(phase), pair_swap, pair_sign)


def rope_rotate(x, positions=None, table: RopeTable | None = None) -> Tensor:
    """Rotate each row's coordinate pairs by (position * pair angle).

    `x` has shape (..., n, d_head); row i is rotated by angle
    positions[i] * angles[m] in pair m, which preserves row norms and
    makes q.k depend only on relative positions.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    d_head = x.shape[-1]
    n = x.shape[-2]
    if table is None:
        if positions is None:
            positions = np.arange(n)
        table = build_rope_table(d_head, positions)
    if table.d_head != d_head:
        raise ConfigError(f"rope table built for width {table.d_head}, input has {d_head}")
    swapped = ad.take_last(x, table.pair_swap) * table.pair_sign
    return x * table.cos + swapped * table.sin


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ModelParameters:
    """Named trainable arrays; shapes are determined by the config alone."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def named(self):
        return self.arrays.items()

    @property
    def total_count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ModelParameters":
        return ModelParameters({k: v.copy() for k, v in self.arrays.items()})

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, **self.arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParameters":
        with np.load(io.BytesIO(blob)) as data:
            return cls({k: np.asarray(data[k], dtype=np.float64) for k in data.files})

    def save(self, path: str) -> None:
        from .util import atomic_write_bytes
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: str) -> "ModelParameters":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> ModelParameters:
    """Fresh parameters: uniform +-sqrt(6/(fan_in+fan_out)) weights, zero
    biases, unit norm gains. Draw order is fixed so a seed pins the
    initialization bit-for-bit."""
    c = config
    flags = c.ablation
    feat = c.patch_size * c.patch_size * c.channels
    arrays: dict[str, np.ndarray] = {}

    if flags.patch_embedding == "conv":
        arrays["patch.kernel"] = _uniform_init(
            rng, (c.d_model, c.channels, c.patch_size, c.patch_size), feat, c.d_model)
    else:
        arrays["patch.weight"] = _uniform_init(rng, (feat, c.d_model), feat, c.d_model)
    arrays["patch.bias"] = np.zeros(c.d_model)

    if flags.position_encoding == "learned":
        arrays["pos_table"] = _uniform_init(
            rng, (c.n_patches, c.d_model), c.n_patches, c.d_model)

    for layer in range(c.n_layers):
        pre = f"layer{layer}."
        if flags.norm1_enabled:
            arrays[pre + "norm1.gain"] = np.ones(c.d_model)
            arrays[pre + "norm1.bias"] = np.zeros(c.d_model)
        if flags.attention != "none":
            arrays[pre + "wq"] = _uniform_init(
                rng, (c.n_heads, c.d_model, c.d_head), c.d_model, c.d_head)
            arrays[pre + "wk"] = _uniform_init(
                rng, (c.kv_groups, c.d_model, c.d_head), c.d_model, c.d_head)
            arrays[pre + "wv"] = _uniform_init(
                rng, (c.kv_groups, c.d_model, c.d_head), c.d_model, c.d_head)
            arrays[pre + "wo"] = _uniform_init(
                rng, (c.n_heads * c.d_head, c.d_model), c.n_heads * c.d_head, c.d_model)
        if flags.norm2_enabled:
            arrays[pre + "norm2.gain"] = np.ones(c.d_model)
            arrays[pre + "norm2.bias"] = np.zeros(c.d_model)
        if flags.feedforward == "swiglu":
            arrays[pre + "ffn.w_gate"] = _uniform_init(
                rng, (c.d_model, c.d_model), c.d_model, c.d_model)
            arrays[pre + "ffn.b_gate"] = np.zeros(c.d_model)
            arrays[pre + "ffn.w_val"] = _uniform_init(
                rng, (c.d_model, c.d_model), c.d_model, c.d_model)
            arrays[pre + "ffn.b_val"] = np.zeros(c.d_model)
        elif flags.feedforward == "gelu_mlp":
            arrays[pre + "ffn.weight"] = _uniform_init(
                rng, (c.d_model, c.d_model), c.d_model, c.d_model)
            arrays[pre + "ffn.bias"] = np.zeros(c.d_model)

    arrays["head.w1"] = _uniform_init(rng, (c.d_model, c.mlp_hidden_1), c.d_model, c.mlp_hidden_1)
    arrays["head.b1"] = np.zeros(c.mlp_hidden_1)
    arrays["head.w2"] = _uniform_init(rng, (c.mlp_hidden_1, c.mlp_hidden_2),
                                      c.mlp_hidden_1, c.mlp_hidden_2)
    arrays["head.b2"] = np.zeros(c.mlp_hidden_2)
    arrays["head.w3"] = _uniform_init(rng, (c.mlp_hidden_2, 1), c.mlp_hidden_2, 1)
    arrays["head.b3"] = np.zeros(1)
    return ModelParameters(arrays)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form count of trainable scalars.

    patch embed: feat*d + d (conv kernel and dense variant have the same
    element count); learned positions add n_patches*d; each layer holds
    the query stack h*d*d_head, key+value stacks 2*kv_groups*d*d_head and
    the output projection h*d_head*d when attention is on, 2*d per enabled
    norm, 2*(d*d + d) for the SwiGLU pair or d*d + d for the GELU MLP;
    the classifier head is the usual dense chain ending in one neuron.
    """
    c = config
    flags = c.ablation
    feat = c.patch_size * c.patch_size * c.channels
    count = feat * c.d_model + c.d_model
    if flags.position_encoding == "learned":
        count += c.n_patches * c.d_model
    per_layer = 0
    if flags.attention != "none":
        per_layer += c.n_heads * c.d_model * c.d_head
        per_layer += 2 * c.kv_groups * c.d_model * c.d_head
        per_layer += c.n_heads * c.d_head * c.d_model
    if flags.norm1_enabled:
        per_layer += 2 * c.d_model
    if flags.norm2_enabled:
        per_layer += 2 * c.d_model
    if flags.feedforward == "swiglu":
        per_layer += 2 * (c.d_model * c.d_model + c.d_model)
    elif flags.feedforward == "gelu_mlp":
        per_layer += c.d_model * c.d_model + c.d_model
    count += c.n_layers * per_layer
    count += c.d_model * c.mlp_hidden_1 + c.mlp_hidden_1
    count += c.mlp_hidden_1 * c.mlp_hidden_2 + c.mlp_hidden_2
    count += c.mlp_hidden_2 * 1 + 1
    return count


# ---------------------------------------------------------------------------
# patch handling
# ---------------------------------------------------------------------------


def pad_to_multiple(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Edge-replication pad spatial dims up to the next patch multiple."""
    h, w = image.shape[-3], image.shape[-2]
    ph = (-h) % patch_size
    pw = (-w) % patch_size
    if ph == 0 and pw == 0:
        return image
    pad = [(0, 0)] * image.ndim
    pad[-3] = (0, ph)
    pad[-2] = (0, pw)
    return np.pad(image, pad, mode="edge")


def extract_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut (H, W, C) into rows of flattened patches, raster order.

    Row k is the patch at grid position (k // gw, k % gw), flattened
    row-major over (patch_row, patch_col, channel). Raises when H or W is
    not a multiple of patch_size; pad with :func:`pad_to_multiple` first.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ConfigError(f"expected (H, W, C) image, got shape {image.shape}")
    h, w, ch = image.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(
            f"image size {h}x{w} not divisible by patch size {patch_size}; pad first")
    gh, gw = h // patch_size, w // patch_size
    patches = (image.reshape(gh, patch_size, gw, patch_size, ch)
                    .transpose(0, 2, 1, 3, 4)
                    .reshape(gh * gw, patch_size * patch_size * ch))
    return patches


def assemble_patches(patches: np.ndarray, image_shape: tuple, patch_size: int) -> np.ndarray:
    """Inverse of :func:`extract_patches`."""
    h, w, ch = image_shape
    gh, gw = h // patch_size, w // patch_size
    return (patches.reshape(gh, gw, patch_size, patch_size, ch)
                   .transpose(0, 2, 1, 3, 4)
                   .reshape(h, w, ch))


def _extract_patches_batch(images: np.ndarray, patch_size: int) -> np.ndarray:
    b, h, w, ch = images.shape
    gh, gw = h // patch_size, w // patch_size
    return (images.reshape(b, gh, patch_size, gw, patch_size, ch)
                  .transpose(0, 1, 3, 2, 4, 5)
                  .reshape(b, gh * gw, patch_size * patch_size * ch))


def conv_kernel_as_matrix(kernel: np.ndarray) -> np.ndarray:
    """Express a (d_out, C, P, P) patch-convolution kernel as the (P*P*C,
    d_out) matrix acting on flattened patches."""
    d_out, ch, p, _ = kernel.shape
    return kernel.transpose(2, 3, 1, 0).reshape(p * p * ch, d_out)


# ---------------------------------------------------------------------------
# forward blocks
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Intermediate tensors captured during one forward pass."""

    tokens: Tensor | None = None
    attention: list = field(default_factory=list)       # per layer: (B,H,N,N) softmax
    norm_outputs: list = field(default_factory=list)    # (name, Tensor) in forward order
    layer_outputs: list = field(default_factory=list)   # per layer: (B,N,D)
    logit: Tensor | None = None
    probability: Tensor | None = None

    def last_norm(self) -> Tensor | None:
        return self.norm_outputs[-1][1] if self.norm_outputs else None


def _leaves(params: ModelParameters) -> dict[str, Tensor]:
    return {name: ad.leaf(arr, name=name) for name, arr in params.named()}


def layer_norm(x, gain, bias, epsilon: float = 1e-6) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis, then gain and bias.

    Mean and variance are per row (population variance); epsilon guards
    constant rows.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    gain = gain if isinstance(gain, Tensor) else Tensor(gain)
    bias = bias if isinstance(bias, Tensor) else Tensor(bias)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normalized = centered / ad.sqrt(var + epsilon)
    return normalized * gain + bias


def swiglu(x, w_gate, b_gate, w_val, b_val) -> Tensor:
    """swish(x W + B) * (x V + C), elementwise product gating."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    gate = ad.swish(ad.matmul(x, w_gate if isinstance(w_gate, Tensor) else Tensor(w_gate))
                    + b_gate)
    value = ad.matmul(x, w_val if isinstance(w_val, Tensor) else Tensor(w_val)) + b_val
    return gate * value


def attention_head(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d_head)) v with row-wise softmax."""
    q = q if isinstance(q, Tensor) else Tensor(q)
    k = k if isinstance(k, Tensor) else Tensor(k)
    v = v if isinstance(v, Tensor) else Tensor(v)
    d_head = q.shape[-1]
    if k.shape[-1] != d_head or v.shape[-2] != k.shape[-2]:
        raise ConfigError("attention_head: mismatched q/k/v shapes")
    scores = ad.matmul(q, ad.transpose(k, _swap_last(k.value.ndim))) / np.sqrt(d_head)
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _attention_block(x: Tensor, leaves: dict, layer: int, config: ModelConfig,
                     rope: RopeTable | None, trace: ForwardTrace | None) -> Tensor:
    """Grouped-query attention over (B, N, D) tokens."""
    c = config
    pre = f"layer{layer}."
    b, n, d = x.shape
    x4 = ad.reshape(x, (b, 1, n, d))
    q = ad.matmul(x4, leaves[pre + "wq"])               # (B, H, N, d_head)
    k = ad.matmul(x4, leaves[pre + "wk"])               # (B, kv, N, d_head)
    v = ad.matmul(x4, leaves[pre + "wv"])
    if rope is not None:
        q = rope_rotate(q, table=rope)
        k = rope_rotate(k, table=rope)
    repeats = c.n_heads // c.kv_groups
    if repeats > 1:
        k = ad.repeat_axis(k, repeats, axis=1)
        v = ad.repeat_axis(v, repeats, axis=1)
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) / np.sqrt(c.d_head)
    attn = ad.softmax(scores, axis=-1)                  # (B, H, N, N)
    if trace is not None:
        trace.attention.append(attn)
    heads = ad.matmul(attn, v)                          # (B, H, N, d_head)
    merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (b, n, c.n_heads * c.d_head))
    return ad.matmul(merged, leaves[pre + "wo"])


def _feed_forward(x: Tensor, leaves: dict, layer: int, config: ModelConfig) -> Tensor:
    flags = config.ablation
    pre = f"layer{layer}."
    if flags.feedforward == "swiglu":
        return swiglu(x, leaves[pre + "ffn.w_gate"], leaves[pre + "ffn.b_gate"],
                      leaves[pre + "ffn.w_val"], leaves[pre + "ffn.b_val"])
    if flags.feedforward == "gelu_mlp":
        return ad.gelu_tanh(ad.matmul(x, leaves[pre + "ffn.weight"]) + leaves[pre + "ffn.bias"])
    return x


def _transformer_layer(p: Tensor, leaves: dict, layer: int, config: ModelConfig,
                       rope: RopeTable | None, trace: ForwardTrace | None) -> Tensor:
    flags = config.ablation
    pre = f"layer{layer}."
    if flags.norm1_enabled:
        a = layer_norm(p, leaves[pre + "norm1.gain"], leaves[pre + "norm1.bias"],
                       config.layer_norm_eps)
        if trace is not None:
            trace.norm_outputs.append((pre + "norm1", a))
    else:
        a = p
    if flags.attention == "none":
        m = a
    else:
        m = _attention_block(a, leaves, layer, config, rope, trace)
    if flags.norm2_enabled:
        nb = layer_norm(m, leaves[pre + "norm2.gain"], leaves[pre + "norm2.bias"],
                        config.layer_norm_eps)
        if trace is not None:
            trace.norm_outputs.append((pre + "norm2", nb))
    else:
        nb = m
    out = _feed_forward(nb, leaves, layer, config)
    if flags.residual2_enabled:
        out = out + m
    if flags.residual1_enabled:
        out = out + p
    if trace is not None:
        trace.layer_outputs.append(out)
    return out


def _embed(patches: np.ndarray, leaves: dict, config: ModelConfig) -> Tensor:
    """(B, N, feat) flattened patches -> (B, N, D) tokens."""
    flags = config.ablation
    if flags.patch_embedding == "conv":
        kernel = leaves["patch.kernel"]
        d_out, ch, p, _ = kernel.shape
        matrix = ad.reshape(ad.transpose(kernel, (2, 3, 1, 0)), (p * p * ch, d_out))
    else:
        matrix = leaves["patch.weight"]
    return ad.matmul(ad.constant(patches), matrix) + leaves["patch.bias"]


_ROPE_CACHE: dict[tuple[int, int], RopeTable] = {}


def _cached_rope(d_head: int, n: int) -> RopeTable:
    key = (d_head, n)
    table = _ROPE_CACHE.get(key)
    if table is None:
        table = _ROPE_CACHE[key] = build_rope_table(d_head, np.arange(n))
    return table


def _forward_patches(patches: np.ndarray, leaves: dict, config: ModelConfig,
                     trace: ForwardTrace | None = None) -> Tensor:
    """(B, N, feat) flattened patches -> (B,) probabilities."""
    c = config
    x = _embed(patches, leaves, c)
    if c.ablation.position_encoding == "learned":
        x = x + leaves["pos_table"]
    rope = None
    if c.ablation.position_encoding == "rope" and c.ablation.attention != "none":
        rope = _cached_rope(c.d_head, patches.shape[1])
    if trace is not None:
        trace.tokens = x
    for layer in range(c.n_layers):
        layer_rope = rope if (c.rope_all_layers or layer == 0) else None
        x = _transformer_layer(x, leaves, layer, c, layer_rope, trace)
    pooled = x.mean(axis=-2)                             # (B, D)
    h1 = ad.gelu_tanh(ad.matmul(pooled, leaves["head.w1"]) + leaves["head.b1"])
    h2 = ad.gelu_tanh(ad.matmul(h1, leaves["head.w2"]) + leaves["head.b2"])
    logit = ad.reshape(ad.matmul(h2, leaves["head.w3"]) + leaves["head.b3"],
                       (patches.shape[0],))
    prob = ad.sigmoid(logit)
    if trace is not None:
        trace.logit = logit
        trace.probability = prob
    return prob


def _forward_batch(images: np.ndarray, leaves: dict, config: ModelConfig,
                   trace: ForwardTrace | None = None) -> Tensor:
    c = config
    if images.shape[1] != c.image_size or images.shape[2] != c.image_size:
        raise ConfigError(
            f"expected {c.image_size}x{c.image_size} input, got {images.shape[1]}x{images.shape[2]}")
    if images.shape[3] != c.channels:
        raise ConfigError(f"expected {c.channels} channel(s), got {images.shape[3]}")
    padded = pad_to_multiple(images, c.patch_size)
    patches = _extract_patches_batch(padded, c.patch_size)
    return _forward_patches(patches, leaves, config, trace)


def _as_batch(images: np.ndarray) -> tuple[np.ndarray, bool]:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        return images[None, ...], True
    if images.ndim == 4:
        return images, False
    raise ConfigError(f"expected (H, W, C) or (B, H, W, C) input, got shape {images.shape}")


def model_forward(images, params: ModelParameters, config: ModelConfig,
                  trace: ForwardTrace | None = None,
                  leaves: dict[str, Tensor] | None = None) -> Tensor:
    """Full forward pass: probability of the positive class.

    Accepts one (H, W, C) image or a (B, H, W, C) batch; returns a scalar
    or a (B,) tensor accordingly. Deterministic given (images, params).
    Pass `leaves` to reuse one set of parameter leaf tensors when the
    gradients will be read back per parameter name.
    """
    batch, single = _as_batch(images)
    if leaves is None:
        leaves = _leaves(params)
    prob = _forward_batch(batch, leaves, config, trace)
    if single:
        prob = ad.reshape(prob, ())
        if trace is not None:
            trace.probability = prob
    return prob


# single-sample public wrappers -------------------------------------------------


def embed_patches(image, params: ModelParameters, config: ModelConfig) -> Tensor:
    """Embed one preprocessed image into the (n_patches, d_model) token matrix."""
    batch, _ = _as_batch(image)
    if batch.shape[1] != config.image_size or batch.shape[2] != config.image_size:
        raise ConfigError(
            f"expected {config.image_size}px input, got {batch.shape[1]}x{batch.shape[2]}")
    padded = pad_to_multiple(batch, config.patch_size)
    patches = _extract_patches_batch(padded, config.patch_size)
    out = _embed(patches, _leaves(params), config)
    return ad.reshape(out, (config.n_patches, config.d_model))


def grouped_query_attention(x, params: ModelParameters, config: ModelConfig,
                            layer: int = 0) -> Tensor:
    """Attention block over one (n, d_model) token matrix, honoring the
    attention and position-encoding ablation flags."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if config.ablation.attention == "none":
        return x
    n = x.shape[-2]
    rope = None
    if config.ablation.position_encoding == "rope":
        rope = build_rope_table(config.d_head, np.arange(n))
    x3 = ad.reshape(x, (1,) + tuple(x.shape))
    out = _attention_block(x3, _leaves(params), layer, config, rope, None)
    return ad.reshape(out, tuple(x.shape))


def transformer_layer(p, params: ModelParameters, config: ModelConfig,
                      layer: int = 0) -> Tensor:
    """One encoder layer over an (n, d_model) token matrix."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    n = p.shape[-2]
    rope = None
    if config.ablation.position_encoding == "rope" and config.ablation.attention != "none":
        rope = build_rope_table(config.d_head, np.arange(n))
    x3 = ad.reshape(p, (1,) + tuple(p.shape))
    out = _transformer_layer(x3, _leaves(params), layer, config, rope, None)
    return ad.reshape(out, tuple(p.shape))


def feed_forward(x, params: ModelParameters, config: ModelConfig, layer: int = 0) -> Tensor:
    """The layer's gated unit under the feedforward ablation flag."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return _feed_forward(x, _leaves(params), layer, config)


def classifier_head(tokens, params: ModelParameters, config: ModelConfig) -> Tensor:
    """Mean-pool (n, d_model) tokens and classify; scalar probability."""
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    leaves = _leaves(params)
    pooled = ad.reshape(tokens.mean(axis=-2), (1, config.d_model))
    h1 = ad.gelu_tanh(ad.matmul(pooled, leaves["head.w1"]) + leaves["head.b1"])
    h2 = ad.gelu_tanh(ad.matmul(h1, leaves["head.w2"]) + leaves["head.b2"])
    logit = ad.matmul(h2, leaves["head.w3"]) + leaves["head.b3"]
    return ad.reshape(ad.sigmoid(logit), ())


# ---------------------------------------------------------------------------
# whole-model gradient checking
# ---------------------------------------------------------------------------


@dataclass
class ModelGradientCheck:
    """Aggregate of per-parameter gradient comparisons."""

    max_rel_error: float
    per_parameter: dict[str, float]
    checked_coordinates: int

    @property
    def passed(self) -> bool:
        return bool(self.per_parameter)

    def within(self, rel_tol: float) -> bool:
        return self.max_rel_error < rel_tol


def full_model_gradient_check(config: ModelConfig, rng: np.random.Generator,
                              h: float = 1e-5,
                              coords_per_tensor: int | None = None) -> ModelGradientCheck:
    """Compare analytic d(probability)/d(parameter) against central finite
    differences for one random draw of parameters and input.

    When `coords_per_tensor` is given, a seeded random subset of that many
    coordinates per parameter tensor is probed; otherwise every
    coordinate is.
    """
    params = init_parameters(config, rng)
    image = rng.uniform(0.0, 1.0, size=(config.image_size, config.image_size,
                                        config.channels))
    leaves = _leaves(params)
    prob = model_forward(image, params, config, leaves=leaves)
    grads_by_tensor = ad.backward(prob, leaves=list(leaves.values()))
    analytic = {name: grads_by_tensor[leaves[name]] for name in leaves}

    # the finite-difference loop reuses one set of wrappers over the live
    # parameter arrays, so in-place coordinate nudges are visible to it
    padded = pad_to_multiple(image[None, ...], config.patch_size)
    patches = _extract_patches_batch(padded, config.patch_size)
    fd_leaves = {name: ad.constant(arr) for name, arr in params.named()}

    def forward_value() -> float:
        with ad.no_grad():
            return float(_forward_patches(patches, fd_leaves, config).value[0])

    per_parameter: dict[str, float] = {}
    worst = 0.0
    checked = 0
    for name, arr in params.named():
        flat = arr.ravel()
        if coords_per_tensor is None or coords_per_tensor >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=coords_per_tensor, replace=False)
        a_flat = analytic[name].ravel()
        tensor_worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = forward_value()
            flat[i] = orig - h
            fm = forward_value()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            tensor_worst = max(tensor_worst, abs(a_flat[i] - numeric) / denom)
            checked += 1
        per_parameter[name] = tensor_worst
        worst = max(worst, tensor_worst)
    return ModelGradientCheck(worst, per_parameter, checked)
