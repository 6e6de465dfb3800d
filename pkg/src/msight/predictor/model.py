"""Transformer trajectory predictor over per-object 6-frame histories.

One token per object: the object's whole history, passed through a sin/cos
positional map and flattened, is projected to the model width. Pre-norm
encoder layers let tokens attend to each other; two linear heads produce K
future means and (softplus) variances. The network works on coordinates
divided by the ROI radius; ``predict`` converts to and from metres.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, gelu, layer_norm, no_grad, softmax, softplus

HISTORY = 6
_MASKED = -1e9
_VAR_BIAS0 = math.log(math.expm1(1e-3))  # softplus^-1 of a small variance


class ShapeMismatch(ValueError):
    pass


class DegenerateHeading(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    model_dim: int = 256
    layers: int = 4
    heads: int = 8
    pos_len: int = 4  # L
    horizon: int = 3  # K
    frame_interval: float = 0.4
    mlp_dim: int = 0  # 0 -> 4 * model_dim
    roi_radius: float = 50.0

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.horizon < 1 or self.pos_len < 0 or self.layers < 0:
            raise ValueError("invalid encoder config")

    @property
    def hidden(self) -> int:
        return self.mlp_dim or 4 * self.model_dim

    @property
    def input_dim(self) -> int:
        return HISTORY * 2 * (2 * self.pos_len + 1)

    @property
    def horizon_s(self) -> float:
        return self.horizon * self.frame_interval


def param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple]]:
    """Declared parameter order; the model file stores them in this order."""
    d, h, k = cfg.model_dim, cfg.hidden, cfg.horizon
    out = [("in.w", (cfg.input_dim, d)), ("in.b", (d,))]
    for i in range(cfg.layers):
        p = f"l{i}."
        out += [(p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
                (p + "qkv.w", (d, 3 * d)), (p + "qkv.b", (3 * d,)),
                (p + "out.w", (d, d)), (p + "out.b", (d,)),
                (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
                (p + "fc1.w", (d, h)), (p + "fc1.b", (h,)),
                (p + "fc2.w", (h, d)), (p + "fc2.b", (d,))]
    out += [("mean.w", (d, 2 * k)), ("mean.b", (2 * k,)), ("var.w", (d, 2 * k)), ("var.b", (2 * k,))]
    return out


class Params(dict):
    """name -> Tensor, in declared order."""

    def tensors(self):
        return list(self.values())

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.values()])

    def copy(self) -> "Params":
        return Params({k: Tensor(v.data.copy(), True, k) for k, v in self.items()})


def init_params(cfg: EncoderConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    resid = 1.0 / math.sqrt(2.0 * max(cfg.layers, 1))
    ps = Params()
    for name, shape in param_shapes(cfg):
        if name.endswith(".g"):
            a = np.ones(shape)
        elif len(shape) == 1:
            a = np.zeros(shape)
        else:
            a = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
            if name.endswith(("out.w", "fc2.w")):
                a *= resid  # keep the residual stream near identity at init
            elif name in ("mean.w", "var.w"):
                a *= 0.01  # heads start near a constant prediction
        if name == "var.b":
            a = np.full(shape, _VAR_BIAS0)
        ps[name] = Tensor(a, True, name)
    return ps


# ---------------------------------------------------------------------------
# input encoding


def positional_map(x, L: int) -> np.ndarray:
    """Per scalar c: (c, sin(2^0 pi c), cos(2^0 pi c), ..., sin(2^(L-1) pi c), cos(2^(L-1) pi c))."""
    c = np.asarray(x, dtype=float)[..., None]
    parts = [c]
    for i in range(L):
        w = (2.0**i) * math.pi
        parts += [np.sin(w * c), np.cos(w * c)]
    return np.concatenate(parts, axis=-1)


def encode_histories(hist: np.ndarray, L: int) -> np.ndarray:
    """(..., 6, 2) normalised histories -> (..., 6 * 2 * (2L + 1))."""
    hist = np.asarray(hist, dtype=float)
    if hist.shape[-2:] != (HISTORY, 2):
        raise ShapeMismatch(f"history must end in ({HISTORY}, 2), got {hist.shape}")
    enc = positional_map(hist, L)
    return enc.reshape(hist.shape[:-2] + (-1,))


# ---------------------------------------------------------------------------
# forward


def _linear(x: Tensor, ps: Params, name: str) -> Tensor:
    return x @ ps[name + ".w"] + ps[name + ".b"]


def _attention(x: Tensor, ps: Params, p: str, cfg: EncoderConfig, mask_add: np.ndarray) -> Tensor:
    b, n, d = x.shape
    nh, dh = cfg.heads, d // cfg.heads
    qkv = _linear(x, ps, p + "qkv").reshape(b, n, 3, nh, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]  # (b, nh, n, dh)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)) + mask_add[:, None]
    att = softmax(scores, axis=-1)
    y = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return _linear(y, ps, p + "out")


def forward(hist: np.ndarray, active: np.ndarray, ps: Params, cfg: EncoderConfig):
    """Normalised histories (B, N, 6, 2) -> (mean, var) tensors of shape (B, N, K, 2).

    Inactive objects are zero-filled and never serve as attention keys for
    other objects, so they cannot influence any active output.
    """
    hist = np.asarray(hist, dtype=float)
    active = np.asarray(active, dtype=bool)
    if hist.ndim != 4 or active.shape != hist.shape[:2]:
        raise ShapeMismatch(f"expected (B, N, 6, 2) histories and (B, N) mask, got {hist.shape}, {active.shape}")
    b, n = active.shape
    if n < 1:
        raise ShapeMismatch("need at least one object")
    feats = encode_histories(np.where(active[..., None, None], hist, 0.0), cfg.pos_len)
    feats = feats * active[..., None]
    allowed = active[:, None, :] | np.eye(n, dtype=bool)[None]
    mask_add = np.where(allowed, 0.0, _MASKED)
    x = _linear(Tensor(feats), ps, "in")
    for i in range(cfg.layers):
        p = f"l{i}."
        x = x + _attention(layer_norm(x, ps[p + "ln1.g"], ps[p + "ln1.b"]), ps, p, cfg, mask_add)
        hdn = gelu(_linear(layer_norm(x, ps[p + "ln2.g"], ps[p + "ln2.b"]), ps, p + "fc1"))
        x = x + _linear(hdn, ps, p + "fc2")
    k = cfg.horizon
    mean = _linear(x, ps, "mean").reshape(b, n, k, 2)
    var = softplus(_linear(x, ps, "var")).reshape(b, n, k, 2)
    return mean, var


@dataclass(frozen=True)
class PredictionOutput:
    object_ids: tuple
    mean: np.ndarray  # (N, K, 2) metres
    var: np.ndarray  # (N, K, 2) m^2


def predict(histories: dict, ps: Params, cfg: EncoderConfig) -> PredictionOutput:
    """Track id -> list of (east, north) metres. Only full 6-frame histories are predicted."""
    ids = tuple(sorted(i for i, h in histories.items() if len(h) == HISTORY))
    if not ids:
        return PredictionOutput((), np.zeros((0, cfg.horizon, 2)), np.zeros((0, cfg.horizon, 2)))
    hist = np.array([histories[i] for i in ids], dtype=float)[None] / cfg.roi_radius
    with no_grad():
        mean, var = forward(hist, np.ones((1, len(ids)), bool), ps, cfg)
    return PredictionOutput(ids, mean.data[0] * cfg.roi_radius, var.data[0] * cfg.roi_radius**2)


# ---------------------------------------------------------------------------
# loss and FDE


def loss(mean: Tensor, var: Tensor, gt, mask=None):
    """Squared-error mean loss plus squared-residual variance matching.

    Per object and frame: l_mu = (x - mx)^2 + (y - my)^2,
    l_sx = ((x - mx)^2 - sx)^2, l_sy = ((y - my)^2 - sy)^2. Each term is
    averaged over active objects and frames; total is their sum.
    """
    gt = np.asarray(gt, dtype=float)
    if mean.shape != gt.shape or var.shape != gt.shape:
        raise ShapeMismatch(f"prediction {mean.shape}/{var.shape} vs ground truth {gt.shape}")
    if mask is None:
        m = np.ones(gt.shape[:-1])
    else:
        # one flag per object, shared by its K frames
        m = np.broadcast_to(np.asarray(mask, dtype=float)[..., None], gt.shape[:-1])
    count = m.sum()
    if count == 0:
        raise ShapeMismatch("no active objects in the loss")
    w = Tensor(m / count)
    sq = (Tensor(gt) - mean).square()  # (..., 2)
    l_mu = (sq.sum(axis=-1) * w).sum()
    res = (sq - var).square()
    l_sx = (res[..., 0] * w).sum()
    l_sy = (res[..., 1] * w).sum()
    total = l_mu + l_sx + l_sy
    return total, {"mu": float(l_mu.data), "sigma_x": float(l_sx.data), "sigma_y": float(l_sy.data),
                   "total": float(total.data)}


@dataclass(frozen=True)
class FDE:
    lat: float
    lon: float
    degenerate: bool = False  # heading undefined: lat/lon hold raw east/north errors


def fde(pred, gt, k: int, heading_vec=None, min_speed: float = 0.1, frame_interval: float = 0.4) -> FDE:
    """Final-frame error split across and along the ground-truth heading.

    ``heading_vec`` is the true velocity at frame K (m/s); by default it is
    taken from the last two ground-truth frames.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise ShapeMismatch("prediction and ground truth shapes differ")
    if not 1 <= k <= len(gt):
        raise ShapeMismatch(f"K={k} beyond horizon {len(gt)}")
    d = pred[k - 1] - gt[k - 1]
    if heading_vec is None:
        if k < 2:
            raise DegenerateHeading("heading needs two ground-truth frames or an explicit vector")
        heading_vec = (gt[k - 1] - gt[k - 2]) / frame_interval
    v = np.asarray(heading_vec, dtype=float)
    speed = float(np.hypot(*v))
    if speed < min_speed:
        return FDE(abs(float(d[0])), abs(float(d[1])), True)
    t = v / speed
    return FDE(abs(float(t[0] * d[1] - t[1] * d[0])), abs(float(t @ d)))


# ---------------------------------------------------------------------------
# model file

MAGIC = b"MSPT"
VERSION = 1
_HEADER = struct.Struct("<4sH7Idd")


class ModelFormatError(ValueError):
    pass


def save_model(ps: Params, cfg: EncoderConfig, stream) -> None:
    shapes = param_shapes(cfg)
    if list(ps) != [n for n, _ in shapes]:
        raise ShapeMismatch("parameter names differ from the declared order")
    stream.write(_HEADER.pack(MAGIC, VERSION, cfg.model_dim, cfg.layers, cfg.heads, cfg.pos_len,
                              cfg.horizon, cfg.hidden, len(shapes), cfg.frame_interval, cfg.roi_radius))
    for name, shape in shapes:
        a = ps[name].data
        if a.shape != shape:
            raise ShapeMismatch(f"{name}: {a.shape} != {shape}")
        stream.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(stream):
    head = stream.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise ModelFormatError("truncated header")
    magic, version, d, layers, heads, L, k, hidden, count, dt, radius = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    cfg = EncoderConfig(d, layers, heads, L, k, dt, hidden, radius)
    shapes = param_shapes(cfg)
    if count != len(shapes):
        raise ModelFormatError(f"header declares {count} tensors, config implies {len(shapes)}")
    ps = Params()
    for name, shape in shapes:
        n = int(np.prod(shape))
        raw = stream.read(8 * n)
        if len(raw) != 8 * n:
            raise ModelFormatError(f"truncated blob at {name}")
        ps[name] = Tensor(np.frombuffer(raw, dtype="<f8").astype(float).reshape(shape), True, name)
    if stream.read(1):
        raise ModelFormatError("trailing bytes after parameter blob")
    return ps, cfg


def save_model_file(path, ps: Params, cfg: EncoderConfig) -> None:
    with open(path, "wb") as f:
        save_model(ps, cfg, f)


def load_model_file(path):
    with open(path, "rb") as f:
        return load_model(f)
