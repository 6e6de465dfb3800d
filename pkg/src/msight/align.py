"""Run-time view alignment by Enhanced Correlation Coefficient maximization.

Transforms follow the convention ``x_std = T @ x_in``: T maps input-image
pixel coordinates to standard-view coordinates, and warping the input by T
reproduces the standard view.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MODELS = ("translation", "affine", "homography")


class AlignmentError(Exception):
    pass


class EmptyImage(AlignmentError):
    pass


class FlatImage(AlignmentError):
    pass


class Diverged(AlignmentError):
    pass


class SingularTransform(AlignmentError):
    pass


@dataclass
class AlignTransform:
    w: np.ndarray
    model: str = "homography"
    ecc: float = float("nan")
    iterations: int = 0
    no_improvement: bool = False
    level_iterations: list = field(default_factory=list)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).reshape(3, 3)
        if self.model not in MODELS:
            raise ValueError(f"unknown motion model {self.model!r}")

    @classmethod
    def identity(cls, model: str = "homography") -> "AlignTransform":
        return cls(np.eye(3), model)

    def inverse(self) -> "AlignTransform":
        if abs(np.linalg.det(self.w)) < 1e-12:
            raise SingularTransform("transform is not invertible")
        inv = np.linalg.inv(self.w)
        return AlignTransform(inv / inv[2, 2], self.model)

    def apply(self, pts) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=float))
        q = p @ self.w[:, :2].T + self.w[:, 2]
        return q[:, :2] / q[:, 2:3]

    def translation(self) -> np.ndarray:
        return self.w[:2, 2] / self.w[2, 2]


def to_gray(rgb) -> np.ndarray:
    """Luminance 0.299 R + 0.587 G + 0.114 B in [0, 1]."""
    a = np.asarray(rgb)
    if a.size == 0:
        raise EmptyImage("empty image")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {a.shape}")
    x = a.astype(float) / 255.0 if np.issubdtype(a.dtype, np.integer) else a.astype(float)
    return np.clip(x @ np.array([0.299, 0.587, 0.114]), 0.0, 1.0)


# ---------------------------------------------------------------------------
# sampling


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample ``img`` at float coordinates; returns values and validity mask."""
    h, w = img.shape[:2]
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(int), max(h - 2, 0))
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy, valid


def _grid(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(float), ys.astype(float)


def _map_coords(m: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    den = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    return (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / den, (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / den, den


def warp_perspective(img, t: AlignTransform, fill: float = 0.0):
    """Inverse-mapping warp: out(x') = img(T^-1 x'). Returns (image, validity mask)."""
    img = np.asarray(img)
    if abs(np.linalg.det(t.w)) < 1e-12:
        raise SingularTransform("transform is not invertible")
    inv = np.linalg.inv(t.w)
    h, w = img.shape[:2]
    xs, ys = _grid(h, w)
    sx, sy, _ = _map_coords(inv, xs, ys)
    out, valid = _bilinear(img.astype(float), sx, sy)
    out = np.where(valid[..., None] if img.ndim == 3 else valid, out, fill)
    return out, valid


def gradients(img: np.ndarray):
    """Central differences with replicate borders."""
    p = np.pad(img, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


def downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    a = img[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


_UP = np.array([[2.0, 0, 0.5], [0, 2.0, 0.5], [0, 0, 1.0]])


def rescale(w: np.ndarray, factor: float, offset: float) -> np.ndarray:
    """Express a warp defined on a coarse grid on a fine grid (fine = factor*coarse + offset)."""
    s = np.array([[factor, 0, offset], [0, factor, offset], [0, 0, 1.0]])
    m = s @ w @ np.linalg.inv(s)
    return m / m[2, 2]


# ---------------------------------------------------------------------------
# ECC


def ecc_value(input_img: np.ndarray, standard: np.ndarray, m: np.ndarray) -> float:
    """Correlation coefficient between standard(x) and input(M x) over valid pixels."""
    h, w = standard.shape
    xs, ys = _grid(h, w)
    sx, sy, _ = _map_coords(m, xs, ys)
    iw, valid = _bilinear(input_img, sx, sy)
    if valid.sum() < 2:
        return -1.0
    t = standard[valid] - standard[valid].mean()
    i = iw[valid] - iw[valid].mean()
    den = np.linalg.norm(t) * np.linalg.norm(i)
    return float(t @ i / den) if den > 0 else 0.0


def _jacobian(model: str, gx, gy, xs, ys, mx, my, den):
    if model == "translation":
        return np.stack([gx, gy], axis=1)
    if model == "affine":
        return np.stack([gx * xs, gy * xs, gx * ys, gy * ys, gx, gy], axis=1)
    gxd, gyd = gx / den, gy / den
    cross = -(gx * mx + gy * my) / den
    return np.stack([gxd * xs, gyd * xs, gxd * ys, gyd * ys, gxd, gyd, cross * xs, cross * ys], axis=1)


def _update(m: np.ndarray, dp: np.ndarray, model: str) -> np.ndarray:
    m = m.copy()
    if model == "translation":
        m[0, 2] += dp[0]
        m[1, 2] += dp[1]
    else:
        m[0, 0] += dp[0]
        m[1, 0] += dp[1]
        m[0, 1] += dp[2]
        m[1, 1] += dp[3]
        m[0, 2] += dp[4]
        m[1, 2] += dp[5]
        if model == "homography":
            m[2, 0] += dp[6]
            m[2, 1] += dp[7]
    return m


def _ecc_level(inp: np.ndarray, tmpl: np.ndarray, m: np.ndarray, model: str,
               max_iters: int, eps: float):
    h, w = tmpl.shape
    xs_all, ys_all = _grid(h, w)
    xs_all, ys_all = xs_all.ravel(), ys_all.ravel()
    t_all = tmpl.ravel()
    gx_img, gy_img = gradients(inp)
    stacked = np.stack([inp, gx_img, gy_img], axis=-1)
    best_rho, worse, it = -np.inf, 0, 0
    prev_rho = -np.inf
    best_m = m.copy()
    for it in range(1, max_iters + 1):
        mx, my, den = _map_coords(m, xs_all, ys_all)
        samp, valid = _bilinear(stacked, mx, my)
        if valid.sum() < 16:
            raise Diverged("warp moved the image out of the frame")
        iw, gx, gy = samp[valid, 0], samp[valid, 1], samp[valid, 2]
        xs, ys = xs_all[valid], ys_all[valid]
        t = t_all[valid] - t_all[valid].mean()
        i = iw - iw.mean()
        tn, inn = np.linalg.norm(t), np.linalg.norm(i)
        if tn == 0:
            raise FlatImage("standard image has zero variance in the overlap")
        if inn == 0:
            raise FlatImage("input image has zero variance in the overlap")
        corr = float(t @ i)
        rho = corr / (tn * inn)
        if rho < prev_rho:
            worse += 1
            if worse >= 5:
                raise Diverged("ECC decreased for 5 consecutive iterations")
        else:
            worse = 0
        prev_rho = rho
        if rho > best_rho:
            best_rho, best_m = rho, m.copy()
        g = _jacobian(model, gx, gy, xs, ys, mx[valid], my[valid], den[valid])
        hess = g.T @ g
        try:
            hinv = np.linalg.inv(hess)
        except np.linalg.LinAlgError as exc:
            raise FlatImage("singular ECC Hessian (no texture)") from exc
        pi = g.T @ i
        pt = g.T @ t
        hpi = hinv @ pi
        lam_n = inn**2 - pi @ hpi
        lam_d = corr - pt @ hpi
        if lam_d > 0:
            lam = lam_n / lam_d
        else:
            lam_t = tn**2 - pt @ (hinv @ pt)
            lam = np.sqrt(max(lam_n, 0.0) / lam_t) if lam_t > 0 else 1.0
        err = lam * t - i
        dp = hinv @ (g.T @ err)
        m = _update(m, dp, model)
        if np.linalg.norm(dp) < eps:
            break
    final = ecc_value(inp, tmpl, m)
    if final < best_rho:
        return best_m, best_rho, it
    return m, final, it


def estimate_transform(input_img, standard, model: str = "homography", max_iters: int = 100,
                       eps: float = 1e-6, levels: int = 3, init: np.ndarray | None = None) -> AlignTransform:
    """Estimate T (input coords -> standard coords) maximizing the ECC objective.

    Coarse-to-fine over ``levels`` pyramid levels (x4, x2, x1 by default).
    """
    inp = np.asarray(input_img, dtype=float)
    tmpl = np.asarray(standard, dtype=float)
    if inp.size == 0 or tmpl.size == 0:
        raise EmptyImage("empty image")
    if inp.shape != tmpl.shape or inp.ndim != 2:
        raise ValueError(f"images must be same-size 2-D arrays, got {inp.shape} and {tmpl.shape}")
    if model not in MODELS:
        raise ValueError(f"unknown motion model {model!r}")
    if np.var(tmpl) == 0:
        raise FlatImage("standard image has zero variance")

    pyr_i, pyr_t = [inp], [tmpl]
    while len(pyr_i) < levels and min(pyr_i[-1].shape) >= 64:
        pyr_i.append(downsample(pyr_i[-1]))
        pyr_t.append(downsample(pyr_t[-1]))

    # internal warp maps standard coords -> input coords
    m = np.eye(3) if init is None else np.linalg.inv(init)
    for _ in range(len(pyr_i) - 1):
        m = np.linalg.inv(_UP) @ m @ _UP
    per_level = []
    for lvl in range(len(pyr_i) - 1, -1, -1):
        m, rho, it = _ecc_level(pyr_i[lvl], pyr_t[lvl], m, model, max_iters, eps)
        per_level.append(it)
        if lvl:
            m = _UP @ m @ np.linalg.inv(_UP)
    m = m / m[2, 2]
    ident = ecc_value(inp, tmpl, np.eye(3))
    final = ecc_value(inp, tmpl, m)
    if final < ident:
        log.info("alignment did not improve on identity (%.6f < %.6f)", final, ident)
        return AlignTransform(np.eye(3), model, ident, sum(per_level), True, per_level)
    t = np.linalg.inv(m)
    return AlignTransform(t / t[2, 2], model, final, sum(per_level), False, per_level)


# ---------------------------------------------------------------------------
# PGM / PPM


def read_pnm(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6), 8-bit; returns uint8 (H, W) or (H, W, 3)."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PNM supported")
    if magic == b"P5":
        return np.frombuffer(data, np.uint8, w * h, pos).reshape(h, w).copy()
    if magic == b"P6":
        return np.frombuffer(data, np.uint8, w * h * 3, pos).reshape(h, w, 3).copy()
    raise ValueError(f"unsupported PNM magic {magic!r}")


def write_pnm(path, img) -> None:
    a = np.asarray(img)
    if np.issubdtype(a.dtype, np.floating):
        a = np.clip(np.round(a * 255.0), 0, 255)
    a = a.astype(np.uint8)
    if a.ndim == 2:
        head = b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0])
    elif a.ndim == 3 and a.shape[2] == 3:
        head = b"P6\n%d %d\n255\n" % (a.shape[1], a.shape[0])
    else:
        raise ValueError(f"cannot write image of shape {a.shape}")
    Path(path).write_bytes(head + a.tobytes())
