"""Static raster figures in the portable pixmap family (PGM / PPM).

Only 2-D images are drawn; 3-D volumes are shown by their middle slice
along the last axis.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from segreg.metrics import boundary

PALETTE = np.array(
    [
        [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
        [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
    ],
    dtype=np.uint8,
)


def _slice2d(a):
    a = np.asarray(a)
    return a[..., a.shape[-1] // 2] if a.ndim == 3 else a


def to_gray(img) -> np.ndarray:
    img = _slice2d(np.asarray(img, dtype=float))
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    return np.round(255 * scaled).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> Path:
    gray = np.asarray(gray, dtype=np.uint8)
    p = Path(path)
    with open(p, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(gray).tobytes())
    return p


def write_ppm(path, rgb: np.ndarray) -> Path:
    rgb = np.asarray(rgb, dtype=np.uint8)
    p = Path(path)
    with open(p, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())
    return p


def read_pnm(path) -> np.ndarray:
    """Minimal reader for the binary P5/P6 files written here."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    magic, (w, h) = parts[0], map(int, parts[1].split())
    arr = np.frombuffer(parts[3], dtype=np.uint8)
    return arr.reshape((h, w, 3) if magic == b"P6" else (h, w))


def contour_overlay(image, labels) -> np.ndarray:
    """Grayscale image with each class boundary drawn in its palette colour."""
    g = to_gray(image)
    rgb = np.repeat(g[..., None], 3, axis=2)
    lab = _slice2d(labels)
    for k in np.unique(lab):
        edge = boundary(lab == k) & ~boundary(np.ones_like(lab, dtype=bool))
        rgb[edge] = PALETTE[int(k) % len(PALETTE)]
    return rgb


def _draw_points(canvas, pts, value):
    h, w = canvas.shape[:2]
    iy = np.round(pts[0]).astype(int)
    ix = np.round(pts[1]).astype(int)
    ok = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    canvas[iy[ok], ix[ok]] = value


def deformed_mesh(T, step: int = 6) -> np.ndarray:
    """White grid lines through ``x + T(x)`` on a black background."""
    T = np.asarray(T, dtype=float)
    if T.ndim == 4:
        T = T[:2, ..., T.shape[-1] // 2]
    h, w = T.shape[1:]
    canvas = np.zeros((h, w), dtype=np.uint8)
    ys, xs = np.arange(h), np.arange(w)
    for r in range(0, h, step):
        _draw_points(canvas, (r + T[0, r, :], xs + T[1, r, :]), 255)
    for c in range(0, w, step):
        _draw_points(canvas, (ys + T[0, :, c], c + T[1, :, c]), 255)
    # densify: sample between pixels so lines stay connected under stretch
    t = np.linspace(0, 1, 4, endpoint=False)[1:]
    for r in range(0, h, step):
        for a in t:
            y = r + T[0, r, :-1] * (1 - a) + T[0, r, 1:] * a
            x = xs[:-1] + a + T[1, r, :-1] * (1 - a) + T[1, r, 1:] * a
            _draw_points(canvas, (y, x), 255)
    for c in range(0, w, step):
        for a in t:
            y = ys[:-1] + a + T[0, :-1, c] * (1 - a) + T[0, 1:, c] * a
            x = c + T[1, :-1, c] * (1 - a) + T[1, 1:, c] * a
            _draw_points(canvas, (y, x), 255)
    return canvas


def displacement_raster(T, step: int = 6, scale: float = 1.0) -> np.ndarray:
    """Displacement magnitude in gray with red arrows sampled every ``step`` pixels."""
    T = np.asarray(T, dtype=float)
    if T.ndim == 4:
        T = T[:2, ..., T.shape[-1] // 2]
    mag = np.sqrt((T * T).sum(axis=0))
    g = to_gray(mag) // 2
    rgb = np.repeat(g[..., None], 3, axis=2)
    h, w = mag.shape
    s = np.linspace(0, 1, 12)
    for r in range(step // 2, h, step):
        for c in range(step // 2, w, step):
            v = T[:, r, c] * scale
            _draw_points(rgb, (r + s * v[0], c + s * v[1]), (255, 40, 40))
            rgb[r, c] = (255, 255, 0)
    return rgb
