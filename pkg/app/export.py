"""Attention-map images: bilinear upsampling to pixel space, written as binary PGM."""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from app.exceptions import DataError, UnavailableError

logger = logging.getLogger(__name__)

UPSAMPLE = 16
FLAT_GRAY = 128


def head_average(attn: np.ndarray, local_count: int) -> np.ndarray:
    """(heads x K_len) or (K_len,) -> the L local weights averaged over heads."""
    if local_count <= 0:
        raise UnavailableError("no local attention: kv_choice=global has no spatial map")
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim > 1:
        attn = attn.reshape(-1, attn.shape[-1]).mean(axis=0)
    return attn[:local_count]


def bilinear_upsample(grid: np.ndarray, factor: int = UPSAMPLE) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping."""
    rows, cols = grid.shape

    def taps(size: int):
        src = (np.arange(size * factor) + 0.5) / factor - 0.5
        src = np.clip(src, 0.0, size - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, size - 1)
        return lo, hi, src - lo

    y0, y1, wy = taps(rows)
    x0, x1, wx = taps(cols)
    top = grid[y0][:, x0] * (1.0 - wx) + grid[y0][:, x1] * wx
    bottom = grid[y1][:, x0] * (1.0 - wx) + grid[y1][:, x1] * wx
    return top * (1.0 - wy)[:, None] + bottom * wy[:, None]


def to_gray(image: np.ndarray) -> np.ndarray:
    """Min-max to 0-255; a flat image becomes mid gray."""
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.full(image.shape, FLAT_GRAY, dtype=np.uint8)
    return np.rint((image - lo) / (hi - lo) * 255.0).astype(np.uint8)


def encode_pgm(pixels: np.ndarray) -> bytes:
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


def attention_image(attn: np.ndarray, grid_dims: Sequence[int], local_count: int, factor: int = UPSAMPLE) -> np.ndarray:
    rows, cols = grid_dims
    weights = head_average(attn, local_count)
    if weights.size != rows * cols:
        raise DataError(f"{weights.size} attention weights do not fill a {rows}x{cols} grid")
    if weights.max() == weights.min():
        return np.full((rows * factor, cols * factor), FLAT_GRAY, dtype=np.uint8)
    return to_gray(bilinear_upsample(weights.reshape(rows, cols), factor))


def export_attention_map(
    attn: np.ndarray,
    grid_dims: Sequence[int],
    local_count: int,
    out_path: Path,
    log_row: Optional[Dict[str, Any]] = None,
    log_path: Optional[Path] = None,
    config: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write the grounding map as a PGM and optionally append a metrics row to a CSV log.

    ``config`` is the run echo stored as JSON in the row's ``config`` column.
    """
    out_path = Path(out_path)
    pixels = attention_image(attn, grid_dims, local_count)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(encode_pgm(pixels))
    if log_row is not None:
        log_path = Path(log_path or out_path.parent / "attention_maps.csv")
        row = {"image": out_path.name, **log_row}
        if config is not None:
            row["config"] = json.dumps(config, sort_keys=True)
        pd.DataFrame([row]).to_csv(log_path, mode="a", header=not log_path.exists(), index=False)
    logger.info("wrote attention map %s", out_path)
    return out_path
