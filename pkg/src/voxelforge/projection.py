"""Two-dimensional PCA view of latent codes, written as a standalone SVG."""
from __future__ import annotations

from pathlib import Path

import numpy as np

# Endpoints of the colour ramp: low score (dark blue) to high score (yellow).
_LOW = np.array([68, 1, 84], dtype=np.float64)
_MID = np.array([33, 145, 140], dtype=np.float64)
_HIGH = np.array([253, 231, 37], dtype=np.float64)


def pca_2d(points, basis=None):
    """Project onto the two leading principal axes.

    Signs are fixed so that each axis's largest-magnitude loading is positive,
    which keeps the picture stable between runs. Returns ``(coords, (mean, axes))``;
    pass the second item back as ``basis`` to project other points the same way.
    """
    points = np.asarray(points, dtype=np.float64)
    if basis is None:
        mean = points.mean(axis=0)
        _, _, vt = np.linalg.svd(points - mean, full_matrices=False)
        axes = vt[:2]
        if axes.shape[0] < 2:
            axes = np.vstack([axes, np.zeros((2 - axes.shape[0], points.shape[1]))])
        flip = np.sign(axes[np.arange(2), np.argmax(np.abs(axes), axis=1)])
        axes = axes * np.where(flip == 0, 1.0, flip)[:, None]
        basis = (mean, axes)
    mean, axes = basis
    return (points - mean) @ axes.T, basis


def ramp_color(t: float) -> str:
    t = float(np.clip(t, 0.0, 1.0))
    rgb = _LOW + (_MID - _LOW) * 2 * t if t < 0.5 else _MID + (_HIGH - _MID) * (2 * t - 1)
    return "#%02x%02x%02x" % tuple(int(round(c)) for c in rgb)


def _scale(values):
    v = np.asarray(values, dtype=np.float64)
    lo, hi = np.nanmin(v), np.nanmax(v)
    return np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)


def write_svg(path, coords, scores=None, path_coords=None, path_scores=None, title="latent PCA",
              size=480, margin=40) -> None:
    """Scatter ``coords`` coloured by ``scores`` (higher = better); optional
    polyline of sweep points coloured along the schedule."""
    all_pts = coords if path_coords is None else np.vstack([coords, path_coords])
    lo, hi = all_pts.min(axis=0), all_pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)

    def to_px(p):
        u = (p - lo) / span
        return margin + u[:, 0] * (size - 2 * margin), size - margin - u[:, 1] * (size - 2 * margin)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>',
           f'<text x="{margin}" y="{margin / 2}" font-family="sans-serif" font-size="14">{title}</text>',
           f'<text x="{size / 2}" y="{size - 8}" font-family="sans-serif" font-size="11">PC1</text>',
           f'<text x="8" y="{size / 2}" font-family="sans-serif" font-size="11">PC2</text>']
    shade = _scale(scores) if scores is not None else np.full(len(coords), 0.5)
    xs, ys = to_px(np.asarray(coords))
    for x, y, s in zip(xs, ys, shade):
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="{ramp_color(s)}" fill-opacity="0.7"/>')
    if path_coords is not None and len(path_coords):
        px, py = to_px(np.asarray(path_coords))
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
        out.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="0.8"/>')
        ps = _scale(path_scores) if path_scores is not None else np.linspace(0, 1, len(px))
        for x, y, s in zip(px, py, ps):
            out.append(f'<rect x="{x - 3:.2f}" y="{y - 3:.2f}" width="6" height="6" fill="{ramp_color(s)}" '
                       'stroke="black" stroke-width="0.5"/>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
