"""Synthetic camera views for alignment experiments.

Textures are analytic (sums of random plane waves), so a view rendered
under any warp is exact, with no resampling error baked into the truth.
"""
from __future__ import annotations

import numpy as np


class Texture:
    def __init__(self, seed: int = 0, waves: int = 14, min_wavelength: float = 10.0,
                 max_wavelength: float = 48.0):
        rng = np.random.default_rng(seed)
        lam = rng.uniform(min_wavelength, max_wavelength, waves)
        ang = rng.uniform(0, np.pi, waves)
        self.k = (2 * np.pi / lam)[:, None] * np.c_[np.cos(ang), np.sin(ang)]
        self.phase = rng.uniform(0, 2 * np.pi, waves)
        self.amp = rng.uniform(0.5, 1.0, waves) / waves

    def __call__(self, x, y):
        arg = x[..., None] * self.k[:, 0] + y[..., None] * self.k[:, 1] + self.phase
        return 0.5 + np.sum(self.amp * np.sin(arg), axis=-1)

    def render(self, shape, warp: np.ndarray | None = None, scale: float = 1.0) -> np.ndarray:
        """Image of the texture with its content moved by ``warp`` (full-resolution coords).

        ``scale`` renders a downsampled view: pixel (i, j) shows full-resolution
        coordinate scale*(i, j) + (scale - 1)/2, matching 2x2-block pyramids.
        """
        h, w = shape
        ys, xs = np.mgrid[0:h, 0:w].astype(float)
        off = (scale - 1) / 2
        xs, ys = scale * xs + off, scale * ys + off
        if warp is not None:
            inv = np.linalg.inv(warp)
            den = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
            xs, ys = ((inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / den,
                      (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / den)
        return np.clip(self(xs, ys), 0.0, 1.0)


def translation(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0, dx], [0, 1.0, dy], [0, 0, 1.0]])


def corner_homography(shape, displacement: np.ndarray) -> np.ndarray:
    """Homography moving the four image corners by ``displacement`` (4, 2)."""
    from ..calib import dlt
    h, w = shape
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], float)
    return dlt(corners, corners + displacement)


def random_sway(rng, shape, max_corner_px: float = 5.0) -> np.ndarray:
    return corner_homography(shape, rng.uniform(-max_corner_px, max_corner_px, (4, 2)))


def alignment_calibration_trial(cal, landmark_px: np.ndarray, landmark_en: np.ndarray, seed: int,
                                max_corner_px: float = 16.0, full_size: int = 1024,
                                small_size: int = 256, model: str = "homography") -> dict:
    """Perturb a camera view by pole sway, re-align it, and score the calibration.

    Landmarks labelled in the standard view at ``landmark_px`` appear at
    P(px) after the sway; alignment maps them back with the estimated T.
    Errors are mean plane distances under the unchanged calibration ``cal``.
    """
    from ..align import AlignTransform, estimate_transform, rescale

    rng = np.random.default_rng(seed)
    tex = Texture(seed, min_wavelength=40.0, max_wavelength=190.0)
    p_full = random_sway(rng, (full_size, full_size), max_corner_px)
    scale = full_size / small_size
    std = tex.render((small_size, small_size), None, scale)
    inp = tex.render((small_size, small_size), p_full, scale)
    t_small = estimate_transform(inp, std, model)
    t_full = AlignTransform(rescale(t_small.w, scale, (scale - 1) / 2), model)
    observed = AlignTransform(p_full).apply(landmark_px)
    aligned = t_full.apply(observed)

    def err(px):
        return float(np.mean(np.hypot(*(cal.pixels_to_plane(px) - landmark_en).T)))

    corners = np.array([[0, 0], [full_size - 1, 0], [full_size - 1, full_size - 1], [0, full_size - 1]], float)
    return {
        "error_unperturbed_m": err(landmark_px),
        "error_without_align_m": err(observed),
        "error_with_align_m": err(aligned),
        "corner_error_px": float(np.max(np.hypot(*(t_full.apply(AlignTransform(p_full).apply(corners)) - corners).T))),
        "ecc": t_small.ecc,
    }
