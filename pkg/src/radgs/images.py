"""Detector-plane line-integral images and their file formats."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class ProjImage:
    """2-D line-integral image; data indexed [v, u] (row = detector v)."""

    data: np.ndarray
    pixel_pitch: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise ValueError("projection image must be 2-D")
        if self.pixel_pitch <= 0:
            raise ValueError("pixel_pitch must be positive")

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


def _paths(path):
    base, ext = os.path.splitext(path)
    if ext not in (".json", ".raw", ""):
        base = path
    return base + ".json", base + ".raw"


def write_image(img: ProjImage, path):
    if not np.all(np.isfinite(img.data)):
        raise IOError("image field 'data' contains non-finite values")
    hdr_path, raw_path = _paths(path)
    header = {
        "w": img.width,
        "h": img.height,
        "pixel_pitch_mm": float(img.pixel_pitch),
        "dtype": "f32le",
    }
    with open(hdr_path, "w") as fh:
        json.dump(header, fh, indent=1)
    img.data.astype("<f4").tofile(raw_path)


def read_image(path) -> ProjImage:
    hdr_path, raw_path = _paths(path)
    if not os.path.exists(hdr_path):
        raise IOError(f"missing header file: {hdr_path}")
    if not os.path.exists(raw_path):
        raise IOError(f"missing data file: {raw_path}")
    with open(hdr_path) as fh:
        header = json.load(fh)
    for key in ("w", "h", "pixel_pitch_mm", "dtype"):
        if key not in header:
            raise IOError(f"image header missing field '{key}'")
    w, h = int(header["w"]), int(header["h"])
    raw = np.fromfile(raw_path, dtype="<f4")
    if raw.size != w * h:
        raise IOError(f"data length mismatch: field 'w','h' imply {w * h} scalars, "
                      f"file has {raw.size}")
    return ProjImage(raw.reshape(h, w).astype(float), float(header["pixel_pitch_mm"]))


def write_pgm(img: ProjImage, path):
    """16-bit PGM export for visual inspection, min-max scaled.

    The scaling is recorded next to the PGM in <path>.json so values can
    be mapped back.
    """
    lo = float(img.data.min())
    hi = float(img.data.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    pix = np.round((img.data - lo) * scale).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n65535\n".encode())
        fh.write(pix.tobytes())
    with open(os.path.splitext(path)[0] + "_scale.json", "w") as fh:
        json.dump({"pgm_min": lo, "pgm_max": hi, "pgm_levels": 65535}, fh)
