"""Image I/O, bicubic degradation, Y-channel metrics, self-ensemble and evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.signal import correlate2d

from .errors import DimensionError, MatError, ValidationError
from .tensor import Tensor

log = logging.getLogger(__name__)

_CACHE_RE = re.compile(r"_x\d+$")


# ---------------------------------------------------------------------------
# bicubic resampling (Matlab imresize convention)
# ---------------------------------------------------------------------------

def _cubic(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (1.5 * ax3 - 2.5 * ax2 + 1) * (ax <= 1)
    far = (-0.5 * ax3 + 2.5 * ax2 - 4 * ax + 2) * ((ax > 1) & (ax <= 2))
    return near + far


@lru_cache(maxsize=64)
def resize_weights(in_len: int, out_len: int) -> np.ndarray:
    """Dense (out_len, in_len) resampling matrix for one axis."""
    scale = out_len / in_len
    kernel_scale = min(scale, 1.0)
    width = 4.0 / kernel_scale
    u = (np.arange(out_len) + 0.5) / scale + 0.5  # 1-based source coordinate
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel_scale * _cubic(kernel_scale * (u[:, None] - idx))
    w /= w.sum(axis=1, keepdims=True)
    # symmetric boundary: reflect 1-based indices into [1, in_len]
    period = 2 * in_len
    src = np.mod(idx - 1, period)
    src = np.where(src < in_len, src, period - 1 - src).astype(np.int64)
    mat = np.zeros((out_len, in_len))
    np.add.at(mat, (np.repeat(np.arange(out_len), taps), src.ravel()), w.ravel())
    mat.setflags(write=False)
    return mat


def bicubic_resize(img, out_h: int, out_w: int):
    """Separable cubic (a=-0.5) resize over the last two axes.

    Downscaling widens the kernel by the inverse ratio (antialiasing); edges
    are handled by symmetric reflection.  Accepts a Tensor or an ndarray and
    returns the same kind.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValidationError(f"target size must be positive, got {out_h}x{out_w}")
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim < 2:
        raise DimensionError(f"need at least 2 dims, got shape {arr.shape}")
    h, w = arr.shape[-2:]
    wh = resize_weights(h, out_h)
    ww = resize_weights(w, out_w)
    out = np.einsum("oh,...hw,pw->...op", wh, arr.astype(np.float64), ww, optimize=True)
    if isinstance(img, Tensor):
        return Tensor(out, dtype=img.dtype)
    return out.astype(arr.dtype if arr.dtype.kind == "f" else np.float64)


# ---------------------------------------------------------------------------
# colour and metrics
# ---------------------------------------------------------------------------

_Y_COEF = np.array([65.481, 128.553, 24.966])


def rgb_to_y(img):
    """BT.601 studio-swing luma, RGB in [0,1] on axis -3 -> (..., 1, H, W)."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    if arr.ndim < 3 or arr.shape[-3] != 3:
        raise DimensionError(f"expected 3 channels on axis -3, got shape {arr.shape}")
    y = (16.0 + np.tensordot(np.moveaxis(arr, -3, -1), _Y_COEF, axes=([-1], [0]))) / 255.0
    y = y[..., None, :, :]
    return Tensor(y, dtype=img.dtype) if isinstance(img, Tensor) else y


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _crop(a: np.ndarray, crop: int) -> np.ndarray:
    return a[..., crop:a.shape[-2] - crop, crop:a.shape[-1] - crop] if crop else a


PSNR_CAP = 100.0


def psnr(a, b, crop: int = 0) -> float:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((_crop(a, crop) - _crop(b, crop)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-((np.arange(size) - size // 2) ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, crop: int = 0, size: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM of two single-channel images (leading unit axes allowed)."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    a, b = _crop(np.squeeze(a), crop), _crop(np.squeeze(b), crop)
    if a.ndim != 2:
        raise DimensionError(f"ssim expects a single-channel image, got shape {a.shape}")
    if min(a.shape) < size:
        raise ValidationError(f"image {a.shape} smaller than the {size}x{size} window")
    if np.array_equal(a, b):
        return 1.0
    win = _gaussian_window(size, sigma)

    def filt(z):
        return correlate2d(z, win, mode="valid")

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def quantize(x: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] and snap to the nearest 8-bit level."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def load_png(path) -> Tensor:
    """8-bit RGB or grayscale PNG -> (1, 3, H, W) tensor with values k/255."""
    if not Path(path).is_file():
        raise ValidationError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise ValidationError(f"{path}: unsupported bit depth (mode {mode})")
            if mode == "P":
                im = im.convert("RGBA")
            if im.mode in ("L", "LA"):
                im = im.convert("L").convert("RGB")
            elif im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as err:
        raise MatError(f"cannot read image {path}: {err}") from err
    return Tensor(arr.transpose(2, 0, 1)[None].astype(np.float64) / 255.0)


def to_uint8(img) -> np.ndarray:
    arr = _arr(img)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise DimensionError(f"save_png takes a single image, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DimensionError(f"expected (3, H, W) or (1, H, W), got {arr.shape}")
    out = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return out[0] if out.shape[0] == 1 else out.transpose(1, 2, 0)


def save_png(img, path) -> None:
    """Clamp to [0,1], round to the nearest 8-bit level, write PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class ImagePair:
    name: str
    lr: Tensor  # (1, 3, H, W)
    hr: Tensor  # (1, 3, sH, sW)
    scale: int
    path: str = ""

    def __post_init__(self):
        h, w = self.lr.shape[-2:]
        if self.hr.shape[-2:] != (h * self.scale, w * self.scale):
            raise DimensionError(
                f"{self.name}: HR {self.hr.shape[-2:]} is not {self.scale}x LR {(h, w)}")


def crop_to_multiple(img: Tensor, scale: int) -> Tensor:
    h, w = img.shape[-2:]
    return Tensor(img.data[..., :h - h % scale, :w - w % scale], dtype=img.dtype)


def degrade(hr: Tensor, scale: int) -> Tensor:
    """Bicubic x1/scale downscale, quantized to 8 bits like a stored LR PNG."""
    h, w = hr.shape[-2:]
    lr = bicubic_resize(hr, h // scale, w // scale)
    return Tensor(quantize(lr.data), dtype=hr.dtype)


def make_pair(hr: Tensor, scale: int, name: str = "image") -> ImagePair:
    hr = crop_to_multiple(hr, scale)
    return ImagePair(name, degrade(hr, scale), hr, scale)


def hr_files(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"dataset directory not found: {root}")
    return sorted(p for p in root.glob("*.png") if not _CACHE_RE.search(p.stem))


def load_dataset(root, scale: int, cache: bool = True) -> list[ImagePair]:
    """HR PNGs in ``root``; LR versions are cached beside them as ``<name>_x{s}.png``."""
    pairs = []
    for path in hr_files(root):
        hr = crop_to_multiple(load_png(path), scale)
        lr_path = path.with_name(f"{path.stem}_x{scale}.png")
        if cache and lr_path.exists():
            lr = load_png(lr_path)
            if lr.shape[-2:] != (hr.shape[-2] // scale, hr.shape[-1] // scale):
                log.warning("stale LR cache %s, regenerating", lr_path)
                lr = degrade(hr, scale)
                save_png(lr, lr_path)
        else:
            lr = degrade(hr, scale)
            if cache:
                save_png(lr, lr_path)
        pairs.append(ImagePair(path.stem, lr, hr, scale, str(path)))
    if not pairs:
        raise ValidationError(f"no HR PNG files in {root}")
    return pairs


# ---------------------------------------------------------------------------
# dihedral group
# ---------------------------------------------------------------------------

def dihedral(x: np.ndarray, t: int) -> np.ndarray:
    """Transform t in 0..7: rotate by 90*(t % 4) degrees, then flip left-right if t >= 4."""
    y = np.rot90(x, t % 4, axes=(-2, -1))
    if t >= 4:
        y = y[..., ::-1]
    return np.ascontiguousarray(y)


def dihedral_inverse(x: np.ndarray, t: int) -> np.ndarray:
    y = x[..., ::-1] if t >= 4 else x
    return np.ascontiguousarray(np.rot90(y, -(t % 4), axes=(-2, -1)))


def self_ensemble(forward: Callable[[Tensor], Tensor], lr: Tensor) -> Tensor:
    """Average of the 8 inverse-transformed predictions on transformed inputs."""
    acc = None
    for t in range(8):
        y = forward(Tensor(dihedral(lr.data, t), dtype=lr.dtype)).data
        y = dihedral_inverse(y, t).astype(np.float64)
        acc = y if acc is None else acc + y
    return Tensor(acc / 8.0, dtype=lr.dtype)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class ImageScore:
    name: str
    psnr_db: float
    ssim: float
    bicubic_psnr_db: float
    bicubic_ssim: float
    ensemble_psnr_db: float | None = None
    ensemble_ssim: float | None = None


def _mean(vals: Sequence[float]) -> float:
    return float(np.mean(vals)) if len(vals) else float("nan")


@dataclass
class EvalReport:
    scale: int
    scores: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return _mean([s.psnr_db for s in self.scores])

    @property
    def mean_ssim(self) -> float:
        return _mean([s.ssim for s in self.scores])

    @property
    def mean_bicubic_psnr(self) -> float:
        return _mean([s.bicubic_psnr_db for s in self.scores])

    @property
    def mean_bicubic_ssim(self) -> float:
        return _mean([s.bicubic_ssim for s in self.scores])

    @property
    def has_ensemble(self) -> bool:
        return any(s.ensemble_psnr_db is not None for s in self.scores)

    @property
    def mean_ensemble_psnr(self) -> float:
        return _mean([s.ensemble_psnr_db for s in self.scores if s.ensemble_psnr_db is not None])

    @property
    def mean_ensemble_ssim(self) -> float:
        return _mean([s.ensemble_ssim for s in self.scores if s.ensemble_ssim is not None])

    def table(self) -> str:
        cols = ["image", "psnr_db", "ssim", "bicubic_db", "bicubic_ssim"]
        if self.has_ensemble:
            cols += ["ens_psnr_db", "ens_ssim"]
        rows = []
        for s in self.scores:
            row = [s.name, f"{s.psnr_db:.3f}", f"{s.ssim:.4f}", f"{s.bicubic_psnr_db:.3f}", f"{s.bicubic_ssim:.4f}"]
            if self.has_ensemble:
                row += [f"{s.ensemble_psnr_db:.3f}", f"{s.ensemble_ssim:.4f}"]
            rows.append(row)
        mean = ["MEAN", f"{self.mean_psnr:.3f}", f"{self.mean_ssim:.4f}",
                f"{self.mean_bicubic_psnr:.3f}", f"{self.mean_bicubic_ssim:.4f}"]
        if self.has_ensemble:
            mean += [f"{self.mean_ensemble_psnr:.3f}", f"{self.mean_ensemble_ssim:.4f}"]
        widths = [max(len(r[i]) for r in [cols, mean] + rows) for i in range(len(cols))]

        def fmt(r):
            return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))

        sep = "-" * len(fmt(cols))
        return "\n".join([f"Y-channel metrics, x{self.scale}, border crop {self.scale}", fmt(cols), sep]
                         + [fmt(r) for r in rows] + [sep, fmt(mean)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["name", "psnr_db", "ssim", "bicubic_psnr_db", "bicubic_ssim"]
        if self.has_ensemble:
            header += ["ensemble_psnr_db", "ensemble_ssim"]
        w.writerow(header)
        for s in self.scores:
            row = [s.name, f"{s.psnr_db:.6f}", f"{s.ssim:.6f}", f"{s.bicubic_psnr_db:.6f}", f"{s.bicubic_ssim:.6f}"]
            if self.has_ensemble:
                row += [f"{s.ensemble_psnr_db:.6f}", f"{s.ensemble_ssim:.6f}"]
            w.writerow(row)
        return buf.getvalue()


def score_images(sr: np.ndarray, hr: np.ndarray, scale: int) -> tuple[float, float]:
    """Y-channel PSNR/SSIM after 8-bit quantization, border crop = scale."""
    ys, yh = rgb_to_y(quantize(sr)), rgb_to_y(np.asarray(hr, dtype=np.float64))
    return psnr(ys, yh, scale), ssim(ys, yh, scale)


def evaluate(forward: Callable[[Tensor], Tensor], pairs: Sequence[ImagePair],
             ensemble: bool = False) -> EvalReport:
    """Score ``forward`` and the bicubic baseline on each pair, in name order."""
    if not pairs:
        raise ValidationError("no images to evaluate")
    scale = pairs[0].scale
    report = EvalReport(scale)
    for pair in sorted(pairs, key=lambda p: p.name):
        hh, ww = pair.hr.shape[-2:]
        sr = forward(pair.lr).data
        p_db, s_val = score_images(sr, pair.hr.data, scale)
        bic = bicubic_resize(pair.lr.data.astype(np.float64), hh, ww)
        b_db, b_val = score_images(bic, pair.hr.data, scale)
        score = ImageScore(pair.name, p_db, s_val, b_db, b_val)
        if ensemble:
            e = self_ensemble(forward, pair.lr).data
            score.ensemble_psnr_db, score.ensemble_ssim = score_images(e, pair.hr.data, scale)
        report.scores.append(score)
    return report
