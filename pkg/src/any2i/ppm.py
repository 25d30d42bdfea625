"""Binary PPM (P6) image files, for dependency-free viewing of outputs."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm: expected (H, W, 3), got {img.shape}")
    h, w, _ = img.shape
    data = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"read_ppm: not a P6 file (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1
    data = np.frombuffer(raw[pos : pos + 3 * w * h], dtype=np.uint8)
    return (data.reshape(h, w, 3).astype(np.float32)) / float(maxval)
