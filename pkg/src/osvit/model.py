"""Volumetric Vision Transformer for three-class survival prediction.

The network consumes a [batch, 50, 64, 64] volume scaled to [0, 1]:

    patchify   -> [b, 640, 320]   non-overlapping 5x8x8 blocks, flattened
    embed      -> [b, 641, 192]   linear projection, class token, pos embedding
    2 encoder layers (pre-norm: x + MHSA(LN(x)), then x + MLP(LN(x)))
    final LN   -> class token readout [b, 192]
    age fusion -> [b, 193]        concatenate age / age_scale_divisor
    head       -> LN over 193 dims, then FC to [b, 3] logits

Class code order is (Long, Medium, Short) = (0, 1, 2). Parameters live in a
name-ordered table that also defines the checkpoint layout, so saved models
are portable byte for byte.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, FormatError

OSVT_MAGIC = b"OSVT"
OSVT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple = (50, 64, 64)
    patch_dims: tuple = (5, 8, 8)
    embed_dim: int = 192
    num_layers: int = 2
    num_heads: int = 12
    head_dim: int = 16
    mlp_dim: int = 1536
    num_classes: int = 3
    age_scale_divisor: float = 10.0
    dropout: float = 0.0
    final_norm: bool = True

    def __post_init__(self):
        for axis in range(3):
            if self.input_dims[axis] % self.patch_dims[axis] != 0:
                raise ConfigError(f"input extent {self.input_dims[axis]} is not divisible "
                                  f"by patch extent {self.patch_dims[axis]} on axis {axis}")
        if self.num_heads * self.head_dim != self.embed_dim:
            raise ConfigError(f"num_heads * head_dim must equal embed_dim: "
                              f"{self.num_heads} * {self.head_dim} != {self.embed_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.age_scale_divisor <= 0:
            raise ConfigError(f"age_scale_divisor must be > 0, got {self.age_scale_divisor}")

    @property
    def grid_dims(self):
        return tuple(i // p for i, p in zip(self.input_dims, self.patch_dims))

    @property
    def num_patches(self):
        gd, gh, gw = self.grid_dims
        return gd * gh * gw

    @property
    def patch_volume(self):
        pd, ph, pw = self.patch_dims
        return pd * ph * pw


# initialization kinds for each parameter tensor
_TRUNC, _ONES, _ZEROS = "trunc_normal", "ones", "zeros"


def param_table(cfg: ModelConfig):
    """Ordered (name, shape, init kind) rows; the single source of truth for
    initialization, parameter counting, and checkpoint layout."""
    e, m, c = cfg.embed_dim, cfg.mlp_dim, cfg.num_classes
    rows = [
        ("patch_proj.weight", (e, cfg.patch_volume), _TRUNC),
        ("patch_proj.bias", (e,), _ZEROS),
        ("class_token", (1, e), _TRUNC),
        ("pos_embedding", (cfg.num_patches + 1, e), _TRUNC),
    ]
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        rows += [
            (p + "ln1.gamma", (e,), _ONES),
            (p + "ln1.beta", (e,), _ZEROS),
        ]
        for proj in ("q", "k", "v", "o"):
            rows += [
                (p + f"attn.{proj}.weight", (e, e), _TRUNC),
                (p + f"attn.{proj}.bias", (e,), _ZEROS),
            ]
        rows += [
            (p + "ln2.gamma", (e,), _ONES),
            (p + "ln2.beta", (e,), _ZEROS),
            (p + "mlp.w1", (e, m), _TRUNC),
            (p + "mlp.b1", (m,), _ZEROS),
            (p + "mlp.w2", (m, e), _TRUNC),
            (p + "mlp.b2", (e,), _ZEROS),
        ]
    if cfg.final_norm:
        rows += [("final_ln.gamma", (e,), _ONES), ("final_ln.beta", (e,), _ZEROS)]
    rows += [
        ("head.ln.gamma", (e + 1,), _ONES),
        ("head.ln.beta", (e + 1,), _ZEROS),
        ("head.fc.weight", (e + 1, c), _TRUNC),
        ("head.fc.bias", (c,), _ZEROS),
    ]
    return rows


class ModelParams:
    """Name-ordered parameter tensors, all trainable."""

    def __init__(self, tensors):
        self.tensors = dict(tensors)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({name: Tensor(t.data.astype(dtype), requires_grad=True)
                            for name, t in self.items()})


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Truncated-normal weights (std 0.02, cut at two sigma), unit LN gains,
    zero biases; one seeded PCG64 stream drawn in table order."""
    rng = np.random.Generator(np.random.PCG64(seed))
    lo, hi = special.ndtr(-2.0), special.ndtr(2.0)
    tensors = {}
    for name, shape, kind in param_table(cfg):
        if kind == _TRUNC:
            u = rng.uniform(lo, hi, size=shape)
            data = (special.ndtri(u) * 0.02).astype(np.float32)
        elif kind == _ONES:
            data = np.ones(shape, dtype=np.float32)
        else:
            data = np.zeros(shape, dtype=np.float32)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors)


def patchify(volume: Tensor, cfg: ModelConfig) -> Tensor:
    """[b, D, H, W] -> [b, num_patches, patch_volume].

    Patch blocks are enumerated (depth, height, width)-lexicographically and
    each block is flattened row-major, matching the Volume memory layout.
    """
    shape = volume.data.shape
    if len(shape) != 4 or tuple(shape[1:]) != tuple(cfg.input_dims):
        raise ConfigError(f"expected volume batch of shape [b, "
                          f"{'x'.join(map(str, cfg.input_dims))}], got {list(shape)}")
    b = shape[0]
    (gd, gh, gw), (pd, ph, pw) = cfg.grid_dims, cfg.patch_dims
    x = ad.reshape(volume, (b, gd, pd, gh, ph, gw, pw))
    x = ad.transpose(x, (0, 1, 3, 5, 2, 4, 6))
    return ad.reshape(x, (b, cfg.num_patches, cfg.patch_volume))


def embed(patches: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Project patches, prepend the class token, add positional embeddings."""
    b = patches.data.shape[0]
    w = ad.transpose(params["patch_proj.weight"], (1, 0))
    tokens = ad.add(ad.matmul(patches, w), params["patch_proj.bias"])
    cls = ad.reshape(params["class_token"], (1, 1, cfg.embed_dim))
    cls = ad.broadcast_batch(cls, b)
    seq = ad.concat(cls, tokens, axis=1)
    return ad.add(seq, params["pos_embedding"])


def _attention(x: Tensor, params: ModelParams, prefix: str, cfg: ModelConfig) -> Tensor:
    b, n = x.data.shape[0], x.data.shape[1]
    heads, hd = cfg.num_heads, cfg.head_dim

    def proj(name):
        out = ad.add(ad.matmul(x, params[prefix + name + ".weight"]),
                     params[prefix + name + ".bias"])
        out = ad.reshape(out, (b, n, heads, hd))
        return ad.transpose(out, (0, 2, 1, 3))  # [b, heads, n, head_dim]

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    attn = ad.softmax(scores, axis=-1)
    mixed = ad.matmul(attn, v)
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, n, heads * hd))
    return ad.add(ad.matmul(mixed, params[prefix + "o.weight"]), params[prefix + "o.bias"])


def encoder_layer(x: Tensor, params: ModelParams, layer: int, cfg: ModelConfig,
                  dropout_rng=None) -> Tensor:
    """Pre-norm residual block; preserves [b, n, embed_dim]."""
    p = f"layers.{layer}."
    h = ad.layer_norm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"])
    a = _attention(h, params, p + "attn.", cfg)
    if cfg.dropout > 0.0:
        a = ad.dropout(a, cfg.dropout, dropout_rng)
    x = ad.add(x, a)
    h = ad.layer_norm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"])
    m = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h, params[p + "mlp.w1"]),
                                        params[p + "mlp.b1"])),
                         params[p + "mlp.w2"]),
               params[p + "mlp.b2"])
    if cfg.dropout > 0.0:
        m = ad.dropout(m, cfg.dropout, dropout_rng)
    return ad.add(x, m)


def forward(volume: Tensor, ages, params: ModelParams, cfg: ModelConfig,
            dropout_rng=None) -> Tensor:
    """Full pass: [b, D, H, W] volume in [0, 1] plus per-row ages -> [b, num_classes]."""
    if cfg.dropout > 0.0 and dropout_rng is None:
        raise ConfigError("dropout > 0 requires a dropout_rng")
    ages = np.asarray(ages, dtype=np.float64).reshape(-1)
    if ages.shape[0] != volume.data.shape[0]:
        raise ConfigError(f"got {ages.shape[0]} ages for a batch of {volume.data.shape[0]}")
    if np.any(ages <= 0):
        raise ConfigError("ages must be > 0")

    x = embed(patchify(volume, cfg), params, cfg)
    for layer in range(cfg.num_layers):
        x = encoder_layer(x, params, layer, cfg, dropout_rng)
    if cfg.final_norm:
        x = ad.layer_norm(x, params["final_ln.gamma"], params["final_ln.beta"])
    cls = ad.select(x, axis=1, index=0)  # [b, embed_dim]

    scaled_age = (ages / cfg.age_scale_divisor).reshape(-1, 1)
    age_col = Tensor(scaled_age.astype(volume.data.dtype), requires_grad=False)
    fused = ad.concat(cls, age_col, axis=1)  # [b, embed_dim + 1]

    h = ad.layer_norm(fused, params["head.ln.gamma"], params["head.ln.beta"])
    return ad.add(ad.matmul(h, params["head.fc.weight"]), params["head.fc.bias"])


def unit_scale_u8(data: np.ndarray) -> np.ndarray:
    """u8 voxels -> float32 in [0, 1], the model's expected input scale."""
    return data.astype(np.float32) / np.float32(255.0)


def _config_to_jsonable(cfg: ModelConfig) -> dict:
    out = asdict(cfg)
    out["input_dims"] = list(cfg.input_dims)
    out["patch_dims"] = list(cfg.patch_dims)
    return out


def _config_from_jsonable(raw: dict) -> ModelConfig:
    raw = dict(raw)
    raw["input_dims"] = tuple(raw["input_dims"])
    raw["patch_dims"] = tuple(raw["patch_dims"])
    return ModelConfig(**raw)


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path) -> None:
    """Write magic, version, manifest length, JSON manifest, then raw f32 blobs."""
    table = []
    offset = 0
    blobs = []
    for name, tensor in params.items():
        data = np.ascontiguousarray(tensor.data, dtype="<f4")
        table.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    manifest = json.dumps({"config": _config_to_jsonable(cfg), "tensors": table},
                          sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(OSVT_MAGIC)
        fh.write(struct.pack("<I", OSVT_VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Read a checkpoint back as (ModelParams, ModelConfig); bitwise faithful.

    When ``expected_config`` is given, any differing field is a config
    conflict (all listed in the error).
    """
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: file too short for a checkpoint header")
    if raw[:4] != OSVT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != OSVT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    manifest_len = struct.unpack_from("<Q", raw, 8)[0]
    if 16 + manifest_len > len(raw):
        raise FormatError(f"{path}: manifest length {manifest_len} overruns the file")
    try:
        manifest = json.loads(raw[16:16 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: manifest is not valid JSON: {exc}") from None
    cfg = _config_from_jsonable(manifest["config"])
    data_section = raw[16 + manifest_len:]

    tensors = {}
    consumed = 0
    for row in manifest["tensors"]:
        shape = tuple(row["shape"])
        count = int(np.prod(shape))
        start = row["offset"]
        if start + count * 4 > len(data_section):
            raise FormatError(f"{path}: tensor {row['name']!r} declares shape {list(shape)} "
                              f"({count * 4} bytes at offset {start}) but only "
                              f"{len(data_section) - start} bytes remain")
        consumed = max(consumed, start + count * 4)
        block = np.frombuffer(data_section, dtype="<f4", count=count, offset=start)
        tensors[row["name"]] = Tensor(block.reshape(shape).astype(np.float32, copy=True),
                                      requires_grad=True)
    if consumed != len(data_section):
        raise FormatError(f"{path}: {len(data_section) - consumed} trailing bytes after the "
                          "last declared tensor")

    expected_names = [name for name, _, _ in param_table(cfg)]
    if list(tensors) != expected_names:
        raise FormatError(f"{path}: tensor table does not match the config's "
                          "parameter layout")
    for name, shape, _ in param_table(cfg):
        if tensors[name].data.shape != shape:
            raise FormatError(f"{path}: tensor {name!r} has shape "
                              f"{list(tensors[name].data.shape)}, config implies {list(shape)}")

    if expected_config is not None and cfg != expected_config:
        diffs = [f"{key}: checkpoint={getattr(cfg, key)!r} runtime={getattr(expected_config, key)!r}"
                 for key in asdict(cfg) if getattr(cfg, key) != getattr(expected_config, key)]
        raise ConfigError("checkpoint config conflicts with runtime config: "
                          + "; ".join(diffs))
    return ModelParams(tensors), cfg
