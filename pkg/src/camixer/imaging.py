"""Image IO (binary PPM/PGM), bicubic degradation, tiled inference and
quality metrics.

Images travel as float64 ``[C, H, W]`` arrays in ``[0, 1]``; files hold
8-bit samples.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy import signal

from camixer.rng import Rng


class ImageFormatError(ValueError):
    pass


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class UnsupportedMaxvalError(ImageFormatError):
    pass


# -- IO -----------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_pnm(buf: bytes) -> np.ndarray:
    """Parse a binary P5/P6 file into a ``uint8`` array ``[H, W, C]``."""
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise MalformedHeaderError("incomplete PNM header")
        fields.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = fields
    if magic not in (b"P5", b"P6"):
        raise MalformedHeaderError(f"unsupported magic {magic!r}; expected P5 or P6")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise MalformedHeaderError(f"non-integer header field in {fields!r}") from None
    if w <= 0 or h <= 0:
        raise MalformedHeaderError(f"invalid dimensions {w}x{h}")
    if maxval != 255:
        raise UnsupportedMaxvalError(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    pos += 1
    c = 3 if magic == b"P6" else 1
    need = w * h * c
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c).copy()


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.dtype != np.uint8 or img.shape[2] not in (1, 3):
        raise ImageFormatError(f"expected uint8 [H, W, 1|3], got {img.dtype} {img.shape}")
    h, w, c = img.shape
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def read_image(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_image(path: str, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img))


def to_float(img: np.ndarray) -> np.ndarray:
    """``uint8 [H, W, C]`` -> float ``[C, H, W]`` in [0, 1]."""
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def to_uint8(arr: np.ndarray) -> np.ndarray:
    """float ``[C, H, W]`` -> ``uint8 [H, W, C]`` (round to nearest, clipped)."""
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(a + 0.5).astype(np.uint8).transpose(1, 2, 0)


# -- resampling ------------------------------------------------------------------

def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _bicubic_matrix(n_in: int, s: int) -> np.ndarray:
    """Anti-aliased 1-D downsampling operator (kernel stretched by ``s``), mirror borders."""
    n_out = n_in // s
    centers = (np.arange(n_out) + 0.5) * s - 0.5
    reach = 2 * s
    taps = np.arange(-reach, reach + 1)
    mat = np.zeros((n_out, n_in))
    for o, u in enumerate(centers):
        js = np.floor(u).astype(int) + taps
        w = cubic((u - js) / s)
        w /= w.sum()
        idx = js.copy()
        # half-sample symmetric reflection
        period = 2 * n_in
        idx = np.mod(idx, period)
        idx = np.where(idx >= n_in, period - 1 - idx, idx)
        np.add.at(mat[o], idx, w)
    return mat


def bicubic_downsample(img: np.ndarray, s: int) -> np.ndarray:
    """Downscale a float ``[C, H, W]`` image by integer ``s`` (H, W multiples of ``s``)."""
    if s not in (2, 4):
        raise ValueError(f"scale must be 2 or 4, got {s}")
    C, H, W = img.shape
    if H % s or W % s:
        raise ValueError(f"image {H}x{W} not divisible by {s}; crop first")
    ry, rx = _bicubic_matrix(H, s), _bicubic_matrix(W, s)
    return np.einsum("oh,chw,pw->cop", ry, img, rx)


def crop_to_multiple(img: np.ndarray, s: int) -> np.ndarray:
    C, H, W = img.shape
    return img[:, : H - H % s, : W - W % s]


# -- tiling ------------------------------------------------------------------------

@dataclass
class TilePlan:
    height: int
    width: int
    tile: int
    overlap: int
    rects: list[tuple[int, int, int, int]]  # (y, x, h, w)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "TilePlan":
        d = json.loads(text)
        d["rects"] = [tuple(r) for r in d["rects"]]
        return cls(**d)


def _starts(n: int, tile: int, overlap: int) -> list[int]:
    if tile >= n:
        return [0]
    step = tile - overlap
    starts = [0]
    while starts[-1] + tile < n:
        starts.append(min(starts[-1] + step, n - tile))
    return starts


def tile_split(height: int, width: int, tile: int, overlap: int) -> TilePlan:
    """Cover an image with ``tile``-sized squares stepping by ``tile - overlap``.

    The last tile on each axis is shifted back to end at the border.
    """
    if tile <= 2 * overlap:
        raise ValueError(f"tile ({tile}) must exceed twice the overlap ({overlap})")
    th, tw = min(tile, height), min(tile, width)
    rects = [
        (y, x, th, tw)
        for y in _starts(height, tile, overlap)
        for x in _starts(width, tile, overlap)
    ]
    return TilePlan(height, width, tile, overlap, rects)


def tile_stitch(tiles: list[np.ndarray], plan: TilePlan, s: int = 1) -> np.ndarray:
    """Average ``s``-times upscaled tiles into one image (float64 accumulation)."""
    C = tiles[0].shape[0]
    acc = np.zeros((C, plan.height * s, plan.width * s))
    cnt = np.zeros((1, plan.height * s, plan.width * s))
    for t, (y, x, h, w) in zip(tiles, plan.rects):
        acc[:, y * s : (y + h) * s, x * s : (x + w) * s] += t
        cnt[:, y * s : (y + h) * s, x * s : (x + w) * s] += 1
    out = acc / cnt
    return out.astype(tiles[0].dtype)


def tiled_apply(fn: Callable[[np.ndarray], np.ndarray], img: np.ndarray, tile: int, overlap: int, s: int) -> np.ndarray:
    """Run ``fn`` on each tile of ``img`` ``[C, H, W]`` and stitch the results."""
    plan = tile_split(img.shape[1], img.shape[2], tile, overlap)
    outs = [fn(img[:, y : y + h, x : x + w]) for y, x, h, w in plan.rects]
    return tile_stitch(outs, plan, s)


# -- metrics ---------------------------------------------------------------------------

PSNR_CAP = 100.0


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a ``[3, H, W]`` image in [0, 1], kept in [0, 1]."""
    r, g, b = img
    return ((16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0)[None]


def _prepare(a, b, y_channel: bool):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"metric shape mismatch: {a.shape} vs {b.shape}")
    if y_channel and a.shape[0] == 3:
        a, b = rgb_to_y(a), rgb_to_y(b)
    return a, b


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def psnr(a, b, peak: float = 1.0, y_channel: bool = False) -> float:
    a, b = _prepare(a, b, y_channel)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def ws_weights(H: int) -> np.ndarray:
    rows = np.arange(H, dtype=np.float64)
    return np.cos((rows + 0.5 - H / 2) / H * np.pi)


def ws_psnr(a, b, peak: float = 1.0, y_channel: bool = False, weights: np.ndarray | None = None) -> float:
    """PSNR with squared errors weighted per row (latitude weights by default)."""
    a, b = _prepare(a, b, y_channel)
    H = a.shape[-2]
    w = ws_weights(H) if weights is None else np.asarray(weights, dtype=np.float64)
    wmap = np.broadcast_to(w[:, None], a.shape[-2:])
    se = ((a - b) ** 2).mean(axis=0)
    return _psnr_from_mse(float((se * wmap).sum() / wmap.sum()), peak)


_SSIM_WIN = 11
_SSIM_SIGMA = 1.5


def _gaussian_window() -> np.ndarray:
    r = np.arange(_SSIM_WIN) - _SSIM_WIN // 2
    g = np.exp(-(r**2) / (2 * _SSIM_SIGMA**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b, peak: float = 1.0, y_channel: bool = False) -> np.ndarray:
    """Per-pixel SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a, b = _prepare(a, b, y_channel)
    if min(a.shape[-2:]) < _SSIM_WIN:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {_SSIM_WIN}x{_SSIM_WIN} SSIM window")
    win = _gaussian_window()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    maps = []
    for x, y in zip(a, b):
        filt = lambda z: signal.correlate2d(z, win, mode="valid")  # noqa: E731
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        maps.append(((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return np.mean(maps, axis=0)


def ssim(a, b, peak: float = 1.0, y_channel: bool = False) -> float:
    return float(ssim_map(a, b, peak, y_channel).mean())


def ws_ssim(a, b, peak: float = 1.0, y_channel: bool = False, weights: np.ndarray | None = None) -> float:
    """SSIM map averaged with the row weights of each window's centre row."""
    m = ssim_map(a, b, peak, y_channel)
    H = np.shape(a)[-2]
    w = ws_weights(H) if weights is None else np.asarray(weights, dtype=np.float64)
    half = _SSIM_WIN // 2
    w = w[half : half + m.shape[0]]
    wmap = np.broadcast_to(w[:, None], m.shape)
    return float((m * wmap).sum() / wmap.sum())


# -- synthetic data ------------------------------------------------------------------------

KINDS = ("flat", "texture", "half-split")


def _gradient(H: int, W: int, rng: Rng) -> np.ndarray:
    # a grey level with a slight tint; kept low-contrast next to the textures
    base = 0.3 + 0.4 * rng.uniform_open(1) + 0.06 * (rng.uniform_open(3) - 0.5)
    slope = (rng.uniform_open(3) - 0.5) * 0.1
    rows = np.linspace(0.0, 1.0, H)[None, :, None]
    return np.broadcast_to(base[:, None, None] + slope[:, None, None] * rows, (3, H, W)).copy()


def _texture(H: int, W: int, rng: Rng, lo: float = 0.04, hi: float = 0.22) -> np.ndarray:
    """Band-limited noise (radial frequency band ``[lo, hi]`` cycles/pixel)."""
    noise = rng.normal((H, W))
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.fftfreq(W)[None, :]
    f = np.sqrt(fy**2 + fx**2)
    band = ((f >= lo) & (f <= hi)).astype(float)
    tex = np.real(np.fft.ifft2(np.fft.fft2(noise) * band))
    tex /= tex.std() + 1e-12
    tint = 0.8 + 0.4 * rng.uniform_open(3)
    return 0.5 + 0.18 * tint[:, None, None] * tex[None]


def make_synthetic_hr(kind: str, size: int, rng: Rng) -> np.ndarray:
    if kind == "flat":
        hr = _gradient(size, size, rng)
    elif kind == "texture":
        hr = _texture(size, size, rng)
    elif kind == "half-split":
        hr = _gradient(size, size, rng)
        half = size // 2
        hr[:, :, half:] = _texture(size, size - half, rng)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
    return np.clip(hr, 0.0, 1.0)


def make_synthetic_pair(kind: str, size: int, s: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(LR, HR)`` float ``[3, H, W]`` arrays, LR bicubic-downsampled by ``s``."""
    if size % s:
        raise ValueError(f"size {size} not divisible by scale {s}")
    hr = make_synthetic_hr(kind, size, rng)
    return bicubic_downsample(hr, s), hr
