"""Quantitative maps, relative-error metrics, and 16-bit map rendering."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container

log = logging.getLogger(__name__)

MAP_MAGIC = b"MRFM"
CHANNELS = ("t1", "t2")
DEFAULT_WINDOWS = {"t1": (0.0, 4000.0), "t2": (0.0, 600.0)}
BACKGROUND_MS = -200.0


class EvaluationError(ValueError):
    pass


@dataclass
class QuantitativeMap:
    t1_ms: np.ndarray
    t2_ms: np.ndarray
    valid: np.ndarray
    provenance: str = "predicted"

    def __post_init__(self):
        self.t1_ms = np.asarray(self.t1_ms, dtype=np.float64)
        self.t2_ms = np.asarray(self.t2_ms, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.t1_ms.shape == self.t2_ms.shape == self.valid.shape):
            raise ValueError("map planes must share one shape")

    @property
    def shape(self):
        return self.valid.shape

    def channel(self, name: str) -> np.ndarray:
        return {"t1": self.t1_ms, "t2": self.t2_ms}[name]

    def save(self, path, header: dict | None = None) -> None:
        h = {"kind": "map", "provenance": self.provenance, **(header or {})}
        container.write_container(
            path, MAP_MAGIC, h, {"t1_ms": self.t1_ms, "t2_ms": self.t2_ms, "valid": self.valid}
        )

    @classmethod
    def load(cls, path) -> "QuantitativeMap":
        header, planes = container.read_container(path, MAP_MAGIC)
        return cls(planes["t1_ms"], planes["t2_ms"], planes["valid"] > 0.5, header.get("provenance", "predicted"))


def _relative_errors(pred: QuantitativeMap, gt: QuantitativeMap, name: str):
    if pred.shape != gt.shape:
        raise EvaluationError(f"map shapes differ: {pred.shape} vs {gt.shape}")
    g = gt.channel(name)
    p = pred.channel(name)
    both = pred.valid & gt.valid
    usable = both & (g != 0)
    excluded = int(both.sum() - usable.sum())
    if excluded:
        log.warning("%s: %d pixels with zero ground truth excluded", name, excluded)
    err = np.full(g.shape, np.nan)
    err[usable] = 100.0 * np.abs(p[usable] - g[usable]) / np.abs(g[usable])
    return err, usable, excluded


def relative_mean_error(pred: QuantitativeMap, gt: QuantitativeMap) -> dict:
    """Per-channel mean and population std of ``100 |pred - gt| / gt`` in percent."""
    out = {}
    for name in CHANNELS:
        err, usable, excluded = _relative_errors(pred, gt, name)
        vals = err[usable]
        if vals.size == 0:
            raise EvaluationError(f"{name}: no pixel is valid in both maps")
        # sorted summation keeps the statistics independent of pixel order
        vals = np.sort(vals)
        mean = float(vals.sum() / vals.size)
        std = float(np.sqrt(np.sum((vals - mean) ** 2) / vals.size))
        out[name] = {"rme_percent": mean, "std_percent": std, "n_pixels": int(vals.size), "excluded": excluded}
    return out


def error_map(pred: QuantitativeMap, gt: QuantitativeMap, channel: str, clip_percent: float | None = 100.0):
    """Per-pixel relative error in percent (nan where invalid), optionally clipped."""
    err, _, _ = _relative_errors(pred, gt, channel)
    if clip_percent is not None:
        err = np.minimum(err, clip_percent)
    return err


def window(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if not lo < hi:
        raise ValueError("window needs lo < hi")
    scaled = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) * 65535.0
    return np.floor(np.clip(scaled, 0.0, 65535.0) + 0.5).astype(np.uint16)


def render_map(qmap: QuantitativeMap, channel: str, window_ms=None, background_value: float = BACKGROUND_MS):
    lo, hi = DEFAULT_WINDOWS[channel] if window_ms is None else window_ms
    vals = np.where(qmap.valid, qmap.channel(channel), background_value)
    return window(vals, lo, hi)


def render_error(err: np.ndarray, clip_percent: float = 100.0) -> np.ndarray:
    return window(np.nan_to_num(err, nan=0.0), 0.0, clip_percent)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5); 16-bit samples are written big-endian as the format requires."""
    image = np.asarray(image)
    maxval = 255 if image.dtype == np.uint8 else 65535
    data = image.astype(">u1" if maxval == 255 else ">u2")
    H, W = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n{maxval}\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end : end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    W, H, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dt = ">u1" if maxval < 256 else ">u2"
    return np.frombuffer(buf, dtype=dt, count=W * H, offset=pos).reshape(H, W).astype(
        np.uint8 if maxval < 256 else np.uint16
    )


def write_metrics(path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
