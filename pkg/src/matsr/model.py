"""The full network: shallow conv, RMAG trunk, pixel-shuffle reconstruction.

Also owns :class:`ModelConfig`, the presets, the config-driven shape ledger,
weight initialisation and the checkpoint file format.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Union

import numpy as np

from .attention import AttentionSpec
from .blocks import Scope, mixer_hidden, rmag_forward, rmag_shapes
from .errors import (
    CheckpointIntegrityError, CheckpointMagicError, CheckpointShapeError,
    ConfigurationError, DimensionError, GeometryError,
)
from .tensor import Tensor, add, conv2d, pixel_shuffle

MAGIC = b"MATCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 60
    n_rmag: int = 4
    n_mab: int = 2
    range_sizes: tuple = (7, 9, 11)
    dilation_policy: Union[str, tuple] = "max"
    heads_per_range: int = 2
    scale: int = 4
    ca_reduction: int = 16
    msconv_scales: tuple = (3, 5)
    expansion_ratio: float = 3.5
    variant: str = "light"
    schedule: str = "alternate"
    zero_init_residual: bool = False
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "range_sizes", tuple(int(k) for k in self.range_sizes))
        object.__setattr__(self, "msconv_scales", tuple(int(k) for k in self.msconv_scales))
        if isinstance(self.dilation_policy, (list, tuple)):
            object.__setattr__(self, "dilation_policy", tuple(int(d) for d in self.dilation_policy))
        self.validate()

    def validate(self) -> None:
        if self.channels < 1 or self.n_rmag < 1 or self.n_mab < 1:
            raise ConfigurationError("channels, n_rmag and n_mab must be positive")
        if not self.range_sizes or any(k < 1 or k % 2 == 0 for k in self.range_sizes):
            raise ConfigurationError(f"range sizes must be odd positive ints, got {self.range_sizes}")
        if self.channels % self.total_heads:
            raise ConfigurationError(
                f"{self.channels} channels not divisible by {self.total_heads} attention heads")
        if self.dilation_policy != "max":
            if not isinstance(self.dilation_policy, tuple) or len(self.dilation_policy) != len(self.range_sizes):
                raise ConfigurationError("dilation_policy must be 'max' or one int per range size")
            if any(d < 1 for d in self.dilation_policy):
                raise ConfigurationError("dilations must be >= 1")
        if self.scale < 1:
            raise ConfigurationError(f"scale must be >= 1, got {self.scale}")
        if any(s % 2 == 0 for s in self.msconv_scales):
            raise ConfigurationError("MSConv kernel sizes must be odd")
        if self.schedule not in ("alternate", "parallel"):
            raise ConfigurationError(f"unknown MAB schedule {self.schedule!r}")
        if self.expansion_ratio <= 0:
            raise ConfigurationError("expansion_ratio must be positive")

    @property
    def total_heads(self) -> int:
        return self.heads_per_range * len(self.range_sizes)

    @property
    def head_dim(self) -> int:
        return self.channels // self.total_heads

    @property
    def hidden(self) -> int:
        return mixer_hidden(self.channels, self.expansion_ratio)

    def attention_specs(self) -> list[AttentionSpec]:
        dils = (["max"] * len(self.range_sizes) if self.dilation_policy == "max"
                else list(self.dilation_policy))
        return [AttentionSpec(k, self.heads_per_range, self.head_dim, d)
                for k, d in zip(self.range_sizes, dils)]

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, val in d.items():
            if isinstance(val, tuple):
                d[key] = list(val)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        d = self.to_dict()
        d.update(kw)
        return ModelConfig.from_dict(d)


def light_preset(scale: int = 4) -> ModelConfig:
    return ModelConfig(scale=scale)


def classical_preset(scale: int = 4) -> ModelConfig:
    return ModelConfig(channels=156, n_rmag=6, n_mab=3, range_sizes=(13, 15, 17),
                       scale=scale, variant="classical")


def tiny_preset(scale: int = 2) -> ModelConfig:
    """Desk-scale surrogate that still runs every block type."""
    return ModelConfig(channels=24, n_rmag=2, n_mab=2, range_sizes=(3, 5), heads_per_range=1,
                       scale=scale, variant="tiny")


PRESETS = {"light": light_preset, "classical": classical_preset, "tiny": tiny_preset}


def preset(name: str, scale: int | None = None) -> ModelConfig:
    try:
        fn = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return fn() if scale is None else fn(scale)


# ---------------------------------------------------------------------------
# shape ledger and initialisation
# ---------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Every parameter name and shape, in a fixed order, from the config alone."""
    c = cfg.channels
    shapes = {"head.weight": (c, 3, 3, 3), "head.bias": (c,)}
    group = rmag_shapes(c, cfg.n_mab, cfg.attention_specs(), cfg.hidden, cfg.msconv_scales,
                        cfg.ca_reduction, cfg.schedule)
    for i in range(cfg.n_rmag):
        shapes.update({f"rmag.{i}.{k}": v for k, v in group.items()})
    shapes["body.weight"] = (c, c, 3, 3)
    shapes["body.bias"] = (c,)
    out = 3 * cfg.scale * cfg.scale
    shapes["recon.weight"] = (out, c, 3, 3)
    shapes["recon.bias"] = (out,)
    return shapes


_PROJECTIONS = ("qkv", "fuse", "fc_a", "fc_b", "proj", "lab.conv", "fc1", "fc2")
_RESIDUAL_TERMINALS = ("attn.fuse", "attn_sparse.fuse", "mixer.proj", "lab.dw")


def _trunc_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


def _is_projection(name: str) -> bool:
    stem = name.rsplit(".", 1)[0]
    return any(stem.endswith(p) for p in _PROJECTIONS)


def _is_residual_terminal(name: str) -> bool:
    stem = name.rsplit(".", 1)[0]
    if any(stem.endswith(t) for t in _RESIDUAL_TERMINALS):
        return True
    return stem.startswith("rmag.") and stem.endswith(".conv") and stem.count(".") == 2


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Truncated normal (0.02) for 1x1 projections and bias tables, fan-in
    uniform for spatial convolutions, unit/zero for norms."""
    rng = np.random.default_rng(seed)
    params = {}
    shapes = param_shapes(cfg)
    for name, shape in shapes.items():
        if ".norm" in name:
            arr = np.ones(shape) if name.endswith("weight") else np.zeros(shape)
        elif ".rpb." in name:
            arr = _trunc_normal(rng, shape)
        elif name.endswith("ca.fc1.bias"):
            # the bottleneck can be a single unit; start its ReLU in the active region
            arr = np.full(shape, 0.1)
        elif _is_projection(name):
            arr = _trunc_normal(rng, shape) if name.endswith("weight") else np.zeros(shape)
        else:
            wshape = shapes[name.rsplit(".", 1)[0] + ".weight"]
            fan_in = int(np.prod(wshape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        if cfg.zero_init_residual and _is_residual_terminal(name):
            arr = np.zeros(shape)
        params[name] = Tensor(arr, dtype=dtype)
    return params


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class MATModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "MATModel":
        return cls(cfg, init_params(cfg, seed, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return mat_forward(x, self)

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "MATModel":
        return MATModel(self.config, {k: Tensor(v.data, dtype=dtype) for k, v in self.params.items()})

    def copy(self) -> "MATModel":
        return MATModel(self.config, {k: Tensor(v.data.copy(), dtype=v.dtype) for k, v in self.params.items()})

    def requires_grad_(self, flag: bool = True) -> "MATModel":
        for p in self.params.values():
            p.requires_grad = flag
        return self


def mat_forward(x: Tensor, model: MATModel) -> Tensor:
    """y = PixelShuffle(Conv(x_s + x_d)), x_s = Conv(x), x_d = Conv(RMAG...(x_s))."""
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"expected an (N, 3, H, W) image batch, got {x.shape}")
    p = Scope(model.params)
    specs = cfg.attention_specs()
    try:
        xs = conv2d(x, p["head.weight"], p["head.bias"])
        t = xs
        for i in range(cfg.n_rmag):
            t = rmag_forward(t, p.sub(f"rmag.{i}"), cfg.n_mab, specs, cfg.msconv_scales,
                             cfg.schedule, cfg.ln_eps)
        xd = conv2d(t, p["body.weight"], p["body.bias"])
        y = conv2d(add(xs, xd), p["recon.weight"], p["recon.bias"])
    except GeometryError as err:
        hint = "" if cfg.dilation_policy == "max" else " (hint: dilation_policy='max' adapts to the input size)"
        raise GeometryError(f"input {x.shape[2]}x{x.shape[3]} too small: {err}{hint}") from err
    return pixel_shuffle(y, cfg.scale)


def mat_forward_tiled(x: Tensor, model: MATModel, tile: int = 64, overlap: int = 16) -> Tensor:
    """Run on overlapping tiles and average the overlaps (inference only)."""
    n, c, h, w = x.shape
    s = model.config.scale
    if h <= tile and w <= tile:
        return mat_forward(x, model)
    step = tile - overlap
    if step <= 0:
        raise ConfigurationError("tile overlap must be smaller than the tile")

    def starts(size):
        if size <= tile:
            return [0]
        pos = list(range(0, size - tile, step))
        return pos + [size - tile]

    acc = np.zeros((n, 3, h * s, w * s), dtype=np.float64)
    cnt = np.zeros((1, 1, h * s, w * s), dtype=np.float64)
    for i in starts(h):
        for j in starts(w):
            th, tw = min(tile, h), min(tile, w)
            patch = Tensor(x.data[:, :, i:i + th, j:j + tw], dtype=x.dtype)
            out = mat_forward(patch, model).data
            acc[:, :, i * s:(i + th) * s, j * s:(j + tw) * s] += out
            cnt[:, :, i * s:(i + th) * s, j * s:(j + tw) * s] += 1
    return Tensor(acc / cnt, dtype=x.dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    step: int
    arrays: dict  # name -> ndarray, parameters plus any extra state
    meta: dict = field(default_factory=dict)


def write_checkpoint(path, config: ModelConfig, arrays: dict, step: int = 0, meta: dict | None = None) -> None:
    """MAGIC | u64 header length | JSON header | little-endian payload."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format": MAGIC.decode(), "config": config.to_dict(), "step": int(step),
              "meta": meta or {}, "payload_bytes": offset, "tensors": entries}
    hbytes = json.dumps(header, indent=1).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {data[:8]!r}, expected {MAGIC!r}")
    if len(data) < 16:
        raise CheckpointIntegrityError(f"{path}: truncated header length at byte 8")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise CheckpointIntegrityError(
            f"{path}: header truncated at byte {len(data)} (expected to end at {16 + hlen})")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointIntegrityError(f"{path}: unreadable header: {err}") from err
    base = 16 + hlen
    expected_end = base + header["payload_bytes"]
    if len(data) != expected_end:
        raise CheckpointIntegrityError(
            f"{path}: payload size mismatch: file ends at byte {len(data)}, expected byte {expected_end}")
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if zlib.crc32(raw) != e["crc32"]:
            raise CheckpointIntegrityError(
                f"{path}: checksum mismatch in {e['name']!r} (bytes {start}..{start + e['nbytes']})")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(ModelConfig.from_dict(header["config"]), header["step"], arrays, header.get("meta", {}))


def save_checkpoint(model: MATModel, path, step: int = 0, extra: dict | None = None,
                    meta: dict | None = None) -> None:
    arrays = {k: v.data for k, v in model.params.items()}
    if extra:
        arrays.update(extra)
    write_checkpoint(path, model.config, arrays, step, meta)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> MATModel:
    """Load a model; with ``expected_config``, every parameter must match its ledger shape."""
    ck = read_checkpoint(path)
    cfg = expected_config or ck.config
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name not in ck.arrays:
            raise CheckpointShapeError(f"{path}: missing parameter {name!r}")
        arr = ck.arrays[name]
        if tuple(arr.shape) != tuple(shape):
            raise CheckpointShapeError(
                f"{path}: parameter {name!r} has shape {tuple(arr.shape)}, config expects {tuple(shape)}")
        params[name] = Tensor(arr, dtype=arr.dtype)
    return MATModel(cfg, params)
