"""Generator architectures and the motion discriminator.

Three generators share one input/output contract (window features in,
per-frame axis-angle rotations out):

  * cnn    — residual temporal convolution stack
  * ahmt   — temporal transformer encoder over frames
  * pahmt  — ahmt plus a per-frame spatial transformer over joint tokens,
             fused into the temporal stream by element-wise addition through
             a learned width projection

Parameters live in a flat name -> Tensor map; the ahmt parameter set is a
strict subset of the pahmt one, which makes the parameter-census and
fusion-ablation invariants directly checkable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .tensor import Tensor

ROTATION_DIM = 144  # 48 joints x 3 axis-angle components

_CKPT_MAGIC = b"AHCKPT\x00\x01"

_ACTIVATIONS = {"gelu": tt.gelu, "relu": tt.relu}


class CheckpointError(ValueError):
    """A checkpoint file failed structural validation."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters; serialized into every checkpoint."""

    arch: str = "pahmt"              # cnn | ahmt | pahmt
    window: int = 32                 # frames per sample
    input_dim: int = 138             # flattened per-frame feature width
    token_count: int = 46            # spatial tokens per frame
    token_dim: int = 3
    d_t: int = 512                   # temporal latent width
    d_s: int = 64                    # spatial latent width
    l_t: int = 4                     # temporal encoder depth
    l_s: int = 2                     # spatial encoder depth
    heads_t: int = 8
    heads_s: int = 4
    mlp_ratio: int = 4
    activation: str = "gelu"
    dropout: float = 0.0
    out_joints: int = 48
    spatial_fusion: str = "mean"     # mean | per_frame
    embed_width: int = 256           # hidden width of the two embedding convs
    head_width: int = 256            # hidden width of the regression head
    cnn_width: int = 256
    cnn_blocks: int = 4
    disc_widths: tuple = (128, 128, 64, 64)
    disc_slope: float = 0.2
    init_seed: int = 0

    def __post_init__(self):
        if self.arch not in ("cnn", "ahmt", "pahmt"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.d_t % self.heads_t != 0:
            raise ValueError(f"d_t={self.d_t} not divisible by heads_t={self.heads_t}")
        if self.d_s % self.heads_s != 0:
            raise ValueError(f"d_s={self.d_s} not divisible by heads_s={self.heads_s}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.spatial_fusion not in ("mean", "per_frame"):
            raise ValueError(f"unknown fusion mode {self.spatial_fusion!r}")
        if self.input_dim != self.token_count * self.token_dim:
            raise ValueError("input_dim must equal token_count * token_dim")
        self.disc_widths = tuple(self.disc_widths)

    @classmethod
    def defaults(cls, arch: str, **overrides) -> "ModelConfig":
        """Per-architecture defaults: the CNN baseline uses ReLU."""
        if arch == "cnn" and "activation" not in overrides:
            overrides["activation"] = "relu"
        return cls(arch=arch, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["disc_widths"] = tuple(d.get("disc_widths", (128, 128, 64, 64)))
        return cls(**d)

    @property
    def output_dim(self) -> int:
        return self.out_joints * 3


@dataclass
class ModelParams:
    """Named parameter tensors for one network."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.tensors.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameter_count(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self.tensors.items() if n.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.tensors):
            missing = set(self.tensors) - set(arrays)
            extra = set(arrays) - set(self.tensors)
            raise CheckpointError(
                f"parameter names do not match (missing {sorted(missing)[:4]}, "
                f"unexpected {sorted(extra)[:4]})")
        for n, arr in arrays.items():
            if arr.shape != self.tensors[n].shape:
                raise CheckpointError(
                    f"parameter {n}: shape {arr.shape} != expected {self.tensors[n].shape}")
            self.tensors[n] = Tensor(arr, requires_grad=True)


# -- parameter construction -----------------------------------------------------


class _Init:
    """Scaled-uniform fan-in initializer drawing in a fixed order."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A17]))

    def weight(self, shape, fan_in: int) -> Tensor:
        s = 1.0 / np.sqrt(fan_in)
        return Tensor(self.rng.uniform(-s, s, size=shape), requires_grad=True)

    @staticmethod
    def zeros(shape) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=True)


def _add_encoder_block(t: dict, init: _Init, prefix: str, d: int, hidden: int):
    t[f"{prefix}.ln1.gain"] = Tensor(np.ones(d), requires_grad=True)
    t[f"{prefix}.ln1.bias"] = init.zeros(d)
    for name in ("wq", "wk", "wv", "wo"):
        t[f"{prefix}.attn.{name}"] = init.weight((d, d), d)
    for name in ("bq", "bk", "bv", "bo"):
        t[f"{prefix}.attn.{name}"] = init.zeros(d)
    t[f"{prefix}.ln2.gain"] = Tensor(np.ones(d), requires_grad=True)
    t[f"{prefix}.ln2.bias"] = init.zeros(d)
    t[f"{prefix}.mlp.w1"] = init.weight((d, hidden), d)
    t[f"{prefix}.mlp.b1"] = init.zeros(hidden)
    t[f"{prefix}.mlp.w2"] = init.weight((hidden, d), hidden)
    t[f"{prefix}.mlp.b2"] = init.zeros(d)


def _add_temporal_trunk(t: dict, init: _Init, cfg: ModelConfig):
    w = cfg.embed_width
    t["temporal.embed0.weight"] = init.weight((3, cfg.input_dim, w), 3 * cfg.input_dim)
    t["temporal.embed0.bias"] = init.zeros(w)
    t["temporal.embed1.weight"] = init.weight((3, w, cfg.d_t), 3 * w)
    t["temporal.embed1.bias"] = init.zeros(cfg.d_t)
    t["temporal.pos"] = init.zeros((cfg.window, cfg.d_t))
    for i in range(cfg.l_t):
        _add_encoder_block(t, init, f"temporal.block{i}", cfg.d_t,
                           cfg.mlp_ratio * cfg.d_t)
    hw = cfg.head_width
    t["head.conv0.weight"] = init.weight((3, cfg.d_t, hw), 3 * cfg.d_t)
    t["head.conv0.bias"] = init.zeros(hw)
    t["head.conv1.weight"] = init.weight((3, hw, hw), 3 * hw)
    t["head.conv1.bias"] = init.zeros(hw)
    t["head.conv2.weight"] = init.weight((1, hw, cfg.output_dim), hw)
    t["head.conv2.bias"] = init.zeros(cfg.output_dim)


def _add_spatial_branch(t: dict, init: _Init, cfg: ModelConfig):
    t["spatial.embed.weight"] = init.weight((1, cfg.token_dim, cfg.d_s), cfg.token_dim)
    t["spatial.embed.bias"] = init.zeros(cfg.d_s)
    t["spatial.token"] = init.zeros(cfg.d_s)
    t["spatial.pos"] = init.zeros((cfg.token_count + 1, cfg.d_s))
    for i in range(cfg.l_s):
        _add_encoder_block(t, init, f"spatial.block{i}", cfg.d_s,
                           cfg.mlp_ratio * cfg.d_s)
    t["fusion.weight"] = init.weight((cfg.d_s, cfg.d_t), cfg.d_s)
    t["fusion.bias"] = init.zeros(cfg.d_t)


def _add_cnn_trunk(t: dict, init: _Init, cfg: ModelConfig):
    w = cfg.cnn_width
    t["cnn.stem.weight"] = init.weight((3, cfg.input_dim, w), 3 * cfg.input_dim)
    t["cnn.stem.bias"] = init.zeros(w)
    for i in range(cfg.cnn_blocks):
        t[f"cnn.block{i}.conv0.weight"] = init.weight((3, w, w), 3 * w)
        t[f"cnn.block{i}.conv0.bias"] = init.zeros(w)
        t[f"cnn.block{i}.conv1.weight"] = init.weight((3, w, w), 3 * w)
        t[f"cnn.block{i}.conv1.bias"] = init.zeros(w)
    t["cnn.head.weight"] = init.weight((1, w, cfg.output_dim), w)
    t["cnn.head.bias"] = init.zeros(cfg.output_dim)


def build_generator(config: ModelConfig) -> ModelParams:
    init = _Init(config.init_seed)
    t: dict[str, Tensor] = {}
    if config.arch == "cnn":
        _add_cnn_trunk(t, init, config)
    else:
        _add_temporal_trunk(t, init, config)
        if config.arch == "pahmt":
            _add_spatial_branch(t, init, config)
    return ModelParams(config, t)


def build_discriminator(config: ModelConfig) -> ModelParams:
    init = _Init(config.init_seed + 1)
    t: dict[str, Tensor] = {}
    widths = (ROTATION_DIM,) + config.disc_widths
    for i in range(len(config.disc_widths)):
        t[f"disc.conv{i}.weight"] = init.weight((3, widths[i], widths[i + 1]),
                                                3 * widths[i])
        t[f"disc.conv{i}.bias"] = init.zeros(widths[i + 1])
    t["disc.out.weight"] = init.weight((widths[-1], 1), widths[-1])
    t["disc.out.bias"] = init.zeros(1)
    return ModelParams(config, t)


# -- forward passes ---------------------------------------------------------------


def _as_feature_tensor(features) -> Tensor:
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise tt.ShapeError(
            f"window features must be (batch, f, tokens, 3), got {x.shape}")
    return x


def _attention(x: Tensor, p: ModelParams, prefix: str, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    q = tt.add_bias(tt.matmul(x, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
    k = tt.add_bias(tt.matmul(x, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
    v = tt.add_bias(tt.matmul(x, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
    # (b, n, d) -> (b, heads, n, dh)
    q = q.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
    k = k.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
    v = v.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
    scores = tt.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    attn = tt.softmax(scores, axis=-1)
    out = tt.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return tt.add_bias(tt.matmul(out, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def _encoder_stack(x: Tensor, p: ModelParams, prefix: str, depth: int, heads: int,
                   act, dropout: float, rng) -> Tensor:
    for i in range(depth):
        blk = f"{prefix}.block{i}"
        h = tt.layer_norm(x, p[f"{blk}.ln1.gain"], p[f"{blk}.ln1.bias"])
        h = _attention(h, p, f"{blk}.attn", heads)
        if dropout > 0.0 and rng is not None:
            h = tt.dropout(h, dropout, rng)
        x = x + h
        h = tt.layer_norm(x, p[f"{blk}.ln2.gain"], p[f"{blk}.ln2.bias"])
        h = tt.add_bias(tt.matmul(h, p[f"{blk}.mlp.w1"]), p[f"{blk}.mlp.b1"])
        h = act(h)
        h = tt.add_bias(tt.matmul(h, p[f"{blk}.mlp.w2"]), p[f"{blk}.mlp.b2"])
        if dropout > 0.0 and rng is not None:
            h = tt.dropout(h, dropout, rng)
        x = x + h
    return x


def temporal_encode(features, params: ModelParams, rng=None) -> Tensor:
    """Embed flattened frame features and run the temporal encoder.

    features: (batch, f, 46, 3) tokens (or unbatched). Returns (batch, f, d_t).
    """
    cfg = params.config
    x = _as_feature_tensor(features)
    b, f = x.shape[0], x.shape[1]
    if x.shape[2] * x.shape[3] != cfg.input_dim:
        raise tt.ShapeError(
            f"feature dim {x.shape[2] * x.shape[3]} != configured {cfg.input_dim}")
    act = _ACTIVATIONS[cfg.activation]
    x = x.reshape(b, f, cfg.input_dim)
    x = tt.conv1d(x, params["temporal.embed0.weight"], params["temporal.embed0.bias"])
    x = act(x)
    x = tt.conv1d(x, params["temporal.embed1.weight"], params["temporal.embed1.bias"])
    x = tt.broadcast_add(x, params["temporal.pos"])
    if cfg.dropout > 0.0 and rng is not None:
        x = tt.dropout(x, cfg.dropout, rng)
    return _encoder_stack(x, params, "temporal", cfg.l_t, cfg.heads_t,
                          act, cfg.dropout, rng)


def spatial_encode(features, params: ModelParams, rng=None) -> Tensor:
    """Per-frame joint-token encoder; returns the regression-token state.

    features: (batch, f, 46, 3). Every frame is encoded independently with
    shared weights; output is (batch, f, d_s).
    """
    cfg = params.config
    x = _as_feature_tensor(features)
    b, f, n, c = x.shape
    if n != cfg.token_count or c != cfg.token_dim:
        raise tt.ShapeError(
            f"expected {cfg.token_count} tokens of {cfg.token_dim} values, "
            f"got {n} x {c}")
    act = _ACTIVATIONS[cfg.activation]
    x = x.reshape(b * f, n, c)
    x = tt.conv1d(x, params["spatial.embed.weight"], params["spatial.embed.bias"])
    token = params["spatial.token"].reshape(1, 1, cfg.d_s)
    token = tt.broadcast_add(Tensor(np.zeros((b * f, 1, cfg.d_s))), token)
    x = tt.concat([token, x], axis=1)
    x = tt.broadcast_add(x, params["spatial.pos"])
    if cfg.dropout > 0.0 and rng is not None:
        x = tt.dropout(x, cfg.dropout, rng)
    x = _encoder_stack(x, params, "spatial", cfg.l_s, cfg.heads_s,
                       act, cfg.dropout, rng)
    return x[:, 0, :].reshape(b, f, cfg.d_s)


def _regression_head(z: Tensor, params: ModelParams) -> Tensor:
    cfg = params.config
    act = _ACTIVATIONS[cfg.activation]
    b, f = z.shape[0], z.shape[1]
    h = tt.conv1d(z, params["head.conv0.weight"], params["head.conv0.bias"])
    h = act(h)
    h = tt.conv1d(h, params["head.conv1.weight"], params["head.conv1.bias"])
    h = act(h)
    h = tt.conv1d(h, params["head.conv2.weight"], params["head.conv2.bias"])
    return h.reshape(b, f, cfg.out_joints, 3)


def ahmt_forward(features, params: ModelParams, rng=None) -> Tensor:
    """Temporal-only transformer: (batch, f, 46, 3) -> (batch, f, 48, 3)."""
    return _regression_head(temporal_encode(features, params, rng), params)


def pahmt_forward(features, params: ModelParams, rng=None) -> Tensor:
    """Spatial-temporal parallel transformer with additive fusion."""
    cfg = params.config
    z_t = temporal_encode(features, params, rng)
    z_s = spatial_encode(features, params, rng)
    if cfg.spatial_fusion == "mean":
        pooled = z_s.mean(axis=1)  # (batch, d_s): one spatial summary per window
        fused = tt.add_bias(tt.matmul(pooled, params["fusion.weight"]),
                            params["fusion.bias"])
        z = tt.broadcast_add(z_t, fused.reshape(z_t.shape[0], 1, cfg.d_t))
    else:
        fused = tt.add_bias(tt.matmul(z_s, params["fusion.weight"]),
                            params["fusion.bias"])
        z = z_t + fused
    return _regression_head(z, params)


def cnn_forward(features, params: ModelParams, rng=None) -> Tensor:
    """Residual temporal convolution baseline with the shared contract."""
    cfg = params.config
    x = _as_feature_tensor(features)
    b, f = x.shape[0], x.shape[1]
    act = _ACTIVATIONS[cfg.activation]
    x = x.reshape(b, f, cfg.input_dim)
    x = tt.conv1d(x, params["cnn.stem.weight"], params["cnn.stem.bias"])
    for i in range(cfg.cnn_blocks):
        h = act(tt.conv1d(x, params[f"cnn.block{i}.conv0.weight"],
                          params[f"cnn.block{i}.conv0.bias"]))
        h = tt.conv1d(h, params[f"cnn.block{i}.conv1.weight"],
                      params[f"cnn.block{i}.conv1.bias"])
        x = x + h
    y = tt.conv1d(x, params["cnn.head.weight"], params["cnn.head.bias"])
    return y.reshape(b, f, cfg.out_joints, 3)


_FORWARDS = {"cnn": cnn_forward, "ahmt": ahmt_forward, "pahmt": pahmt_forward}


def generator_forward(features, params: ModelParams, rng=None) -> Tensor:
    """Dispatch on the configured architecture."""
    return _FORWARDS[params.config.arch](features, params, rng)


def cnn_receptive_radius(config: ModelConfig) -> int:
    """Frames of influence on either side of an output frame."""
    return 1 + 2 * config.cnn_blocks  # stem + two width-3 convs per block


def discriminate(rotations, disc: ModelParams) -> Tensor:
    """Probability in (0, 1) that a rotation window is real motion.

    rotations: (batch, f, 48, 3) array or Tensor. Returns (batch,) probabilities.
    """
    cfg = disc.config
    x = rotations if isinstance(rotations, Tensor) else Tensor(rotations)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    b, f = x.shape[0], x.shape[1]
    x = x.reshape(b, f, ROTATION_DIM)
    for i in range(len(cfg.disc_widths)):
        x = tt.conv1d(x, disc[f"disc.conv{i}.weight"], disc[f"disc.conv{i}.bias"])
        x = tt.leaky_relu(x, cfg.disc_slope)
    pooled = x.mean(axis=1)  # (b, width)
    logit = tt.add_bias(tt.matmul(pooled, disc["disc.out.weight"]), disc["disc.out.bias"])
    return tt.sigmoid(logit).reshape(b)


# -- checkpoint format ---------------------------------------------------------------


def save_checkpoint(path, config: ModelConfig, arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Versioned binary: config JSON, named float64 tensors, meta JSON.

    Layout (little-endian): 8-byte magic; u32 config length + UTF-8 JSON;
    u32 meta length + UTF-8 JSON; u32 tensor count; then per tensor
    u16 name length, name, u8 ndim, u32 extents, raw float64 values.
    """
    cfg_blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            blob = name.encode()
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint -> (ModelConfig, arrays, meta)."""
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic or unsupported checkpoint version")
    off = 8
    try:
        def take(n):
            nonlocal off
            if off + n > len(raw):
                raise CheckpointError(f"{path}: truncated checkpoint")
            out = raw[off:off + n]
            off += n
            return out

        cfg_len, = struct.unpack("<I", take(4))
        config = ModelConfig.from_dict(json.loads(take(cfg_len)))
        meta_len, = struct.unpack("<I", take(4))
        meta = json.loads(take(meta_len))
        count, = struct.unpack("<I", take(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len, = struct.unpack("<H", take(2))
            name = take(name_len).decode()
            ndim, = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape)
            arrays[name] = arr.astype(np.float64)
        if off != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    except (struct.error, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return config, arrays, meta


def save_params(path, params: ModelParams, meta: dict | None = None) -> None:
    save_checkpoint(path, params.config, params.state_arrays(), meta)


def load_params(path) -> tuple[ModelParams, dict]:
    config, arrays, meta = load_checkpoint(path)
    which = meta.get("kind", "generator")
    params = (build_discriminator(config) if which == "discriminator"
              else build_generator(config))
    params.load_state_arrays(arrays)
    return params, meta
