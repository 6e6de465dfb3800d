"""Training data, plain gradient descent, and closed-form baselines."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import HISTORY, EncoderConfig, Params, fde, forward, init_params, loss
from .tensor import no_grad


class Diverged(ArithmeticError):
    pass


@dataclass
class Dataset:
    hist: np.ndarray  # (S, N, 6, 2) metres
    future: np.ndarray  # (S, N, K, 2) metres
    active: np.ndarray  # (S, N) bool

    def __len__(self):
        return len(self.hist)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.hist[idx], self.future[idx], self.active[idx])


def make_cv_dataset(n_scenes: int, seed: int = 0, horizon: int = 3, max_objects: int = 4,
                    speed=(3.0, 15.0), radius: float = 40.0, hist_noise_m: float = 0.2,
                    frame_interval: float = 0.4, inactive_prob: float = 0.1) -> Dataset:
    """Scenes of independent constant-velocity objects.

    Histories carry Gaussian position noise (as tracker output would); the
    future is noise-free. Slots beyond a scene's object count, and a random
    few others, are inactive.
    """
    rng = np.random.default_rng(seed)
    s, n = n_scenes, max_objects
    r = radius * np.sqrt(rng.random((s, n)))
    a = rng.uniform(-math.pi, math.pi, (s, n))
    p0 = np.stack([r * np.cos(a), r * np.sin(a)], -1)
    spd = rng.uniform(*speed, (s, n))
    hd = rng.uniform(-math.pi, math.pi, (s, n))
    v = np.stack([spd * np.cos(hd), spd * np.sin(hd)], -1) * frame_interval  # m / frame
    t_hist = np.arange(-HISTORY + 1, 1)
    t_fut = np.arange(1, horizon + 1)
    hist = p0[:, :, None] + t_hist[None, None, :, None] * v[:, :, None]
    hist = hist + rng.normal(0.0, hist_noise_m, hist.shape)
    fut = p0[:, :, None] + t_fut[None, None, :, None] * v[:, :, None]
    count = rng.integers(1, n + 1, s)
    active = (np.arange(n)[None] < count[:, None]) & (rng.random((s, n)) >= inactive_prob)
    active[np.arange(s), 0] = True
    hist = np.where(active[..., None, None], hist, 0.0)
    fut = np.where(active[..., None, None], fut, 0.0)
    return Dataset(hist, fut, active)


def stable_lr_max(cfg: EncoderConfig) -> float:
    """Largest plain-descent step we treat as safe for a given width.

    The residual stream's squared norm grows roughly with model_dim, so the
    usable step shrinks like 1/d. Checked empirically: d=64 is stable at 0.1
    and diverges at 0.2; d=256 is stable at 0.025. Narrow models do
    not tolerate more than 0.1 either.
    """
    return min(0.1, 6.4 / cfg.model_dim)


# small enough to train to convergence on one core in about a minute
FAST_CONFIG = EncoderConfig(model_dim=64, layers=2, heads=4)


@dataclass
class TrainResult:
    params: Params
    losses: list = field(default_factory=list)


def train(data: Dataset, cfg: EncoderConfig, lr: float = 0.05, steps: int = 500, batch: int = 32,
          seed: int = 0, params: Params | None = None, log_every: int = 0) -> TrainResult:
    """Plain minibatch gradient descent on normalised coordinates.

    Deterministic for a given seed (initialisation and batch order).
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    ps = params if params is not None else init_params(cfg, seed)
    scale = 1.0 / cfg.roi_radius
    out = TrainResult(ps)
    for step in range(steps):
        idx = rng.choice(len(data), size=min(batch, len(data)), replace=False)
        mean, var = forward(data.hist[idx] * scale, data.active[idx], ps, cfg)
        total, _ = loss(mean, var, data.future[idx] * scale, data.active[idx])
        if not math.isfinite(total.data):
            raise Diverged(f"loss became {total.data} at step {step}")
        ps.zero_grad()
        total.backward()
        for t in ps.values():
            t.data -= lr * t.grad
        out.losses.append(float(total.data))
        if log_every and step % log_every == 0:
            print(f"step {step:5d} loss {float(total.data):.6g}")
    return out


def dataset_loss(ps: Params, cfg: EncoderConfig, data: Dataset) -> float:
    s = 1.0 / cfg.roi_radius
    with no_grad():
        mean, var = forward(data.hist * s, data.active, ps, cfg)
        return loss(mean, var, data.future * s, data.active)[1]["total"]


def predict_means(ps: Params, cfg: EncoderConfig, data: Dataset, chunk: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(data), chunk):
            sl = slice(i, i + chunk)
            mean, _ = forward(data.hist[sl] / cfg.roi_radius, data.active[sl], ps, cfg)
            out.append(mean.data * cfg.roi_radius)
    return np.concatenate(out)


def constant_position(data: Dataset, horizon: int) -> np.ndarray:
    return np.repeat(data.hist[:, :, -1:, :], horizon, axis=2)


def constant_velocity(data: Dataset, horizon: int) -> np.ndarray:
    v = data.hist[:, :, -1] - data.hist[:, :, -2]
    k = np.arange(1, horizon + 1)[None, None, :, None]
    return data.hist[:, :, -1:, :] + k * v[:, :, None]


@dataclass(frozen=True)
class FDESummary:
    lat: float
    lon: float
    dist: float
    count: int


def fde_summary(pred: np.ndarray, data: Dataset, k: int, frame_interval: float = 0.4) -> FDESummary:
    """Mean lateral, longitudinal and Euclidean error at frame K over active objects."""
    lats, lons, dists = [], [], []
    for s, o in zip(*np.nonzero(data.active)):
        gt = data.future[s, o]
        prev = gt[k - 2] if k >= 2 else data.hist[s, o, -1]
        r = fde(pred[s, o], gt, k, (gt[k - 1] - prev) / frame_interval)
        lats.append(r.lat)
        lons.append(r.lon)
        dists.append(float(np.hypot(*(pred[s, o, k - 1] - gt[k - 1]))))
    return FDESummary(float(np.mean(lats)), float(np.mean(lons)), float(np.mean(dists)), len(dists))


def write_dataset(data: Dataset, stream) -> None:
    for s, o in zip(*np.nonzero(data.active)):
        stream.write(json.dumps({"history": data.hist[s, o].tolist(), "future": data.future[s, o].tolist()}) + "\n")


def read_dataset(stream) -> Dataset:
    """One object per line; each becomes a single-object scene."""
    hs, fs = [], []
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        d = json.loads(line)
        h = np.asarray(d["history"], dtype=float)
        f = np.asarray(d["future"], dtype=float)
        if h.shape != (HISTORY, 2) or f.ndim != 2 or f.shape[1] != 2:
            raise ValueError(f"line {lineno}: bad history/future shape")
        hs.append(h)
        fs.append(f)
    if not hs:
        return Dataset(np.zeros((0, 1, HISTORY, 2)), np.zeros((0, 1, 0, 2)), np.zeros((0, 1), bool))
    return Dataset(np.array(hs)[:, None], np.array(fs)[:, None], np.ones((len(hs), 1), bool))
