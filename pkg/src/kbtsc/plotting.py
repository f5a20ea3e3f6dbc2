"""Deterministic line-plot PNG rendering of time series."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, EmptyInput

DEFAULT_PALETTE = (
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (214, 39, 40),
    (148, 103, 189),
    (140, 86, 75),
    (227, 119, 194),
    (23, 190, 207),
)

PNG_COMPRESS_LEVEL = 6
N_TICKS = 5
TICK_LEN = 4


@dataclass(frozen=True)
class PlotConfig:
    width_px: int = 800
    height_px: int = 400
    margin_px: int = 20
    palette: tuple = DEFAULT_PALETTE
    background: tuple = (255, 255, 255)
    axis_color: tuple = (96, 96, 96)
    line_width: int = 2
    draw_axes: bool = True
    y_range: tuple | None = None  # None = auto (data range padded by 5%)

    def __post_init__(self):
        object.__setattr__(self, "palette", tuple(tuple(c) for c in self.palette))
        object.__setattr__(self, "background", tuple(self.background))
        object.__setattr__(self, "axis_color", tuple(self.axis_color))
        if self.y_range is not None:
            object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        self.validate()

    def validate(self, n_channels: int = 0):
        if self.width_px < 64 or self.height_px < 64:
            raise ConfigError("plot must be at least 64x64 pixels")
        if self.margin_px < 0 or 2 * self.margin_px >= min(self.width_px, self.height_px):
            raise ConfigError("margin leaves no drawable area")
        if self.line_width < 1:
            raise ConfigError("line_width must be >= 1")
        if self.y_range is not None and not self.y_range[0] < self.y_range[1]:
            raise ConfigError("fixed y_range must satisfy lo < hi")
        if len(self.palette) < n_channels:
            raise ConfigError(f"palette has {len(self.palette)} colors for {n_channels} channels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["palette"] = [list(c) for c in self.palette]
        d["background"] = list(self.background)
        d["axis_color"] = list(self.axis_color)
        d["y_range"] = list(self.y_range) if self.y_range is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlotConfig":
        return cls(**d)


def padded_range(lo: float, hi: float, pad: float = 0.05) -> tuple:
    if hi - lo <= 0:
        half = max(abs(lo) * pad, 0.5)
        return (lo - half, hi + half)
    extra = (hi - lo) * pad
    return (lo - extra, hi + extra)


def _values(sample) -> np.ndarray:
    arr = np.asarray(getattr(sample, "values", sample), dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.size == 0:
        raise EmptyInput("cannot plot an empty sample")
    return arr


def _draw_axes(draw, config: PlotConfig):
    m, w, h = config.margin_px, config.width_px, config.height_px
    x0, x1, y0, y1 = m, w - 1 - m, m, h - 1 - m
    draw.line([(x0, y0), (x0, y1)], fill=config.axis_color, width=1)
    draw.line([(x0, y1), (x1, y1)], fill=config.axis_color, width=1)
    for i in range(N_TICKS):
        tx = round(x0 + (x1 - x0) * i / (N_TICKS - 1))
        ty = round(y1 - (y1 - y0) * i / (N_TICKS - 1))
        draw.line([(tx, y1), (tx, min(h - 1, y1 + TICK_LEN))], fill=config.axis_color, width=1)
        draw.line([(max(0, x0 - TICK_LEN), ty), (x0, ty)], fill=config.axis_color, width=1)


def render_line_plot(sample, config: PlotConfig | None = None) -> bytes:
    """PNG bytes of the sample's channels overlaid as polylines (y axis up)."""
    config = config or PlotConfig()
    arr = _values(sample)
    n_ch, w = arr.shape
    config.validate(n_ch)
    lo, hi = config.y_range if config.y_range is not None else padded_range(float(arr.min()), float(arr.max()))

    m = config.margin_px
    x0, x1 = m, config.width_px - 1 - m
    y_top, y_bot = m, config.height_px - 1 - m
    xs = np.full(1, (x0 + x1) / 2) if w == 1 else x0 + (x1 - x0) * np.arange(w) / (w - 1)
    ys = y_bot - (arr - lo) / (hi - lo) * (y_bot - y_top)
    xs = np.rint(xs).astype(int)
    ys = np.rint(np.clip(ys, 0, config.height_px - 1)).astype(int)

    img = Image.new("RGB", (config.width_px, config.height_px), config.background)
    draw = ImageDraw.Draw(img)
    if config.draw_axes:
        _draw_axes(draw, config)
    r = max(1, config.line_width)
    for c in range(n_ch):
        color = config.palette[c]
        pts = list(zip(xs.tolist(), ys[c].tolist()))
        if w == 1:
            (px, py), = pts
            draw.rectangle([px - r, py - r, px + r, py + r], fill=color)
        else:
            draw.line(pts, fill=color, width=config.line_width)

    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False, compress_level=PNG_COMPRESS_LEVEL)
    return buf.getvalue()


def shared_range(*samples) -> tuple:
    lo = min(float(_values(s).min()) for s in samples)
    hi = max(float(_values(s).max()) for s in samples)
    return padded_range(lo, hi)


def render_contrast_pair(positive, negative, config: PlotConfig | None = None) -> tuple[bytes, bytes]:
    """Render both samples on a common y range so they compare at the same scale."""
    config = config or PlotConfig()
    fixed = replace(config, y_range=shared_range(positive, negative))
    return render_line_plot(positive, fixed), render_line_plot(negative, fixed)


def content_hash(sample, config: PlotConfig) -> str:
    arr = _values(sample)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    h.update(json.dumps(config.to_dict(), sort_keys=True).encode())
    return h.hexdigest()


@dataclass
class ImageCache:
    """On-disk PNG cache keyed by the hash of (values, config)."""

    directory: Path | None = None
    _mem: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.directory is not None:
            self.directory = Path(self.directory)
            self.directory.mkdir(parents=True, exist_ok=True)

    def get(self, sample, config: PlotConfig) -> bytes:
        key = content_hash(sample, config)
        if key in self._mem:
            return self._mem[key]
        path = self.directory / f"{key}.png" if self.directory else None
        if path is not None and path.exists():
            data = path.read_bytes()
        else:
            data = render_line_plot(sample, config)
            if path is not None:
                path.write_bytes(data)
        self._mem[key] = data
        return data

    def pair(self, positive, negative, config: PlotConfig) -> tuple[bytes, bytes]:
        fixed = replace(config, y_range=shared_range(positive, negative))
        return self.get(positive, fixed), self.get(negative, fixed)
