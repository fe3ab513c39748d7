"""Command-branched waypoint predictor written directly in numpy.

Layout (NHWC throughout):

    pooled grid (32x32xC) -> 3x [conv 3x3 / stride 2 / pad 1, ReLU] -> 512 features
    [late fusion: same encoder over the visibility plane -> 512 more]
    concat scaled speed -> FC 128 ReLU -> FC 4 x 2K (zero-initialised) -> branch by command

All parameters live in one flat float64 vector; layers are views into it.
"""
from __future__ import annotations

import hashlib
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import Config
from .dataset import N_CHANNELS, Dataset, atomic_write, merge, pool_counts, refurbish

N_BRANCHES = 4
FUSIONS = ("none", "early", "late")
CKPT_MAGIC = b"LBWM"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


# ---------------------------------------------------------------------------
# architecture

@dataclass(frozen=True)
class Architecture:
    fusion: str
    grid: int
    pool: int
    conv_channels: tuple
    hidden: int
    num_waypoints: int
    speed_scale: float

    @classmethod
    def from_config(cls, cfg: Config) -> "Architecture":
        p = cfg.policy
        if p.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {p.fusion!r}")
        if cfg.bev.width != cfg.bev.height:
            raise ValueError("square grids required")
        return cls(p.fusion, cfg.bev.width, p.pool, tuple(int(c) for c in p.conv_channels), p.hidden,
                   cfg.dataset.num_waypoints, p.speed_scale)

    @property
    def in_channels(self) -> int:
        return N_CHANNELS + (self.fusion == "early")

    @property
    def side(self) -> int:
        return self.grid // self.pool

    def encoder_out(self) -> int:
        s = self.side
        for _ in self.conv_channels:
            s = (s - 1) // 2 + 1
        return s * s * self.conv_channels[-1]

    def layout(self) -> list:
        """Ordered (name, shape) of every parameter tensor."""
        out = []
        encs = [("enc", self.in_channels)] + ([("venc", 1)] if self.fusion == "late" else [])
        for prefix, cin in encs:
            for k, cout in enumerate(self.conv_channels):
                out.append((f"{prefix}{k}.w", (cin * 9, cout)))
                out.append((f"{prefix}{k}.b", (cout,)))
                cin = cout
        feat = self.encoder_out() * len(encs) + 1
        out.append(("fc.w", (feat, self.hidden)))
        out.append(("fc.b", (self.hidden,)))
        out.append(("head.w", (self.hidden, N_BRANCHES * 2 * self.num_waypoints)))
        out.append(("head.b", (N_BRANCHES * 2 * self.num_waypoints,)))
        return out

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())

    @property
    def fingerprint(self) -> str:
        return (f"fusion={self.fusion};grid={self.grid};pool={self.pool};"
                f"conv={'-'.join(map(str, self.conv_channels))};hidden={self.hidden};"
                f"K={self.num_waypoints};speed={self.speed_scale!r}")


@dataclass
class ModelParams:
    theta: np.ndarray
    fingerprint: str
    config_hash: str = ""
    seed: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams(self.theta.copy(), self.fingerprint, self.config_hash, self.seed)


def unpack(theta: np.ndarray, arch: Architecture) -> dict:
    views, off = {}, 0
    for name, shape in arch.layout():
        n = int(np.prod(shape))
        views[name] = theta[off:off + n].reshape(shape)
        off += n
    return views


def init_params(cfg: Config, seed: int | None = None) -> ModelParams:
    """Uniform fan-in initialisation; biases zero; output head all zero."""
    arch = Architecture.from_config(cfg)
    seed = cfg.policy.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    theta = np.zeros(arch.size)
    views = unpack(theta, arch)
    for name, shape in arch.layout():
        if name.endswith(".w") and not name.startswith("head"):
            bound = 1.0 / math.sqrt(shape[0])
            views[name][...] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(theta, arch.fingerprint, cfg.hash(), seed)


def _check(params: ModelParams, arch: Architecture) -> None:
    if params.fingerprint != arch.fingerprint or params.theta.shape != (arch.size,):
        raise ValueError(f"model fingerprint {params.fingerprint!r} does not match configuration {arch.fingerprint!r}")


# ---------------------------------------------------------------------------
# layers

def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]
    oh, ow = win.shape[1], win.shape[2]
    return win.reshape(n * oh * ow, c * 9), (n, oh, ow)


def _col2im(dcols: np.ndarray, shape: tuple, out_hw: tuple) -> np.ndarray:
    n, h, w, c = shape
    oh, ow = out_hw
    d = dcols.reshape(n, oh, ow, c, 3, 3)
    dxp = np.zeros((n, h + 2, w + 2, c))
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + 2 * oh:2, kj:kj + 2 * ow:2, :] += d[..., ki, kj]
    return dxp[:, 1:h + 1, 1:w + 1, :]


class _NonFinite(FloatingPointError):
    pass


def _finite(a: np.ndarray, layer: str, batch: int) -> None:
    if not np.all(np.isfinite(a)):
        raise _NonFinite(f"non-finite activation in layer {layer} (batch {batch})")


def _encode(x, views, prefix, nconv, batch, cache):
    for k in range(nconv):
        cols, (n, oh, ow) = _im2col(x)
        z = cols @ views[f"{prefix}{k}.w"] + views[f"{prefix}{k}.b"]
        a = np.maximum(z, 0.0)
        _finite(a, f"{prefix}{k}", batch)
        cache.append((prefix, k, x.shape, cols, z, (oh, ow)))
        x = a.reshape(n, oh, ow, -1)
    return x.reshape(x.shape[0], -1)


def _forward(theta, arch, x_main, x_vis, speed, cmd, batch=0):
    views = unpack(theta, arch)
    cache = []
    nconv = len(arch.conv_channels)
    feats = [_encode(x_main, views, "enc", nconv, batch, cache)]
    if arch.fusion == "late":
        feats.append(_encode(x_vis, views, "venc", nconv, batch, cache))
    feats.append((speed * arch.speed_scale)[:, None])
    f = np.concatenate(feats, axis=1)
    z = f @ views["fc.w"] + views["fc.b"]
    h = np.maximum(z, 0.0)
    _finite(h, "fc", batch)
    out = h @ views["head.w"] + views["head.b"]
    _finite(out, "head", batch)
    n = len(cmd)
    k2 = 2 * arch.num_waypoints
    pred = out.reshape(n, N_BRANCHES, k2)[np.arange(n), cmd]
    return pred, (views, cache, f, z, h)


def _backward(theta, arch, saved, dpred, cmd):
    views, cache, f, z, h = saved
    grad = np.zeros_like(theta)
    g = unpack(grad, arch)
    n = len(cmd)
    k2 = 2 * arch.num_waypoints
    dout = np.zeros((n, N_BRANCHES, k2))
    dout[np.arange(n), cmd] = dpred
    dout = dout.reshape(n, -1)
    g["head.w"][...] = h.T @ dout
    g["head.b"][...] = dout.sum(axis=0)
    dz = (dout @ views["head.w"].T) * (z > 0)
    g["fc.w"][...] = f.T @ dz
    g["fc.b"][...] = dz.sum(axis=0)
    df = dz @ views["fc.w"].T
    enc = arch.encoder_out()
    nconv = len(arch.conv_channels)
    prefixes = ["enc"] + (["venc"] if arch.fusion == "late" else [])
    for e, prefix in enumerate(prefixes):
        d = df[:, e * enc:(e + 1) * enc]
        layers = [c for c in cache if c[0] == prefix]
        for _, k, xshape, cols, zc, (oh, ow) in reversed(layers):
            dz_c = d.reshape(-1, zc.shape[1]) * (zc > 0)
            g[f"{prefix}{k}.w"][...] = cols.T @ dz_c
            g[f"{prefix}{k}.b"][...] = dz_c.sum(axis=0)
            if k > 0:
                dcols = dz_c @ views[f"{prefix}{k}.w"].T
                d = _col2im(dcols, xshape, (oh, ow))
    return grad


def _inputs(arch: Architecture, pooled: np.ndarray):
    """Split uint8 block counts (n, 8, s, s) into NHWC float inputs.

    The visibility plane enters as its complement (occluded fraction), which
    is zero over most of the grid like the semantic channels.
    """
    x = pooled.astype(np.float64) / float(arch.pool * arch.pool)
    x = x.transpose(0, 2, 3, 1)
    if arch.fusion != "none":
        x[..., N_CHANNELS] = 1.0 - x[..., N_CHANNELS]
    if arch.fusion == "early":
        return x, None
    if arch.fusion == "late":
        return x[..., :N_CHANNELS], x[..., N_CHANNELS:]
    return x[..., :N_CHANNELS], None


def predict_pooled(params: ModelParams, cfg: Config, pooled, speed, cmd) -> np.ndarray:
    arch = Architecture.from_config(cfg)
    _check(params, arch)
    xm, xv = _inputs(arch, np.asarray(pooled))
    pred, _ = _forward(params.theta, arch, xm, xv, np.asarray(speed, dtype=np.float64),
                       np.asarray(cmd, dtype=np.int64))
    return pred.reshape(len(cmd), arch.num_waypoints, 2)


def forward(params: ModelParams, cfg: Config, bev, vis, speed: float, command) -> np.ndarray:
    """Predicted (K, 2) agent-frame waypoints for one state."""
    arch = Architecture.from_config(cfg)
    if bev.data.shape[1:] != (arch.grid, arch.grid):
        raise ValueError("state grid does not match the configured grid size")
    planes = np.concatenate([bev.data, vis.data[None]])
    pooled = pool_counts(planes, arch.pool)[None]
    return predict_pooled(params, cfg, pooled, [speed], [int(command)])[0]


def predict_dataset(params: ModelParams, cfg: Config, ds: Dataset, batch: int = 256) -> np.ndarray:
    arch = Architecture.from_config(cfg)
    if ds.count == 0:
        return np.zeros((0, arch.num_waypoints, 2))
    pooled = ds.pooled(arch.pool)
    speed, cmd = ds.speeds(), ds.commands()
    out = [predict_pooled(params, cfg, pooled[i:i + batch], speed[i:i + batch], cmd[i:i + batch])
           for i in range(0, ds.count, batch)]
    return np.concatenate(out)


def wbc_loss(params: ModelParams, cfg: Config, pooled, speed, cmd, target, batch_index: int = 0) -> tuple:
    """Mean per-coordinate l1 error and its gradient (subgradient 0 at kinks)."""
    arch = Architecture.from_config(cfg)
    _check(params, arch)
    cmd = np.asarray(cmd, dtype=np.int64)
    if len(cmd) == 0:
        raise ValueError("empty batch")
    xm, xv = _inputs(arch, np.asarray(pooled))
    pred, saved = _forward(params.theta, arch, xm, xv, np.asarray(speed, dtype=np.float64), cmd, batch_index)
    diff = pred - np.asarray(target, dtype=np.float64).reshape(pred.shape)
    loss = float(np.mean(np.abs(diff)))
    dpred = np.sign(diff) / diff.size
    return loss, _backward(params.theta, arch, saved, dpred, cmd)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    val_l1: float = float("nan")
    wall_time: float = 0.0
    config_hash: str = ""
    seed: int = 0
    n_train: int = 0
    n_val: int = 0


def _split(n: int, frac: float, seed: int) -> tuple:
    perm = np.random.default_rng([seed, 1]).permutation(n)
    n_val = int(math.floor(n * frac)) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _optimise(params: ModelParams, cfg: Config, ds: Dataset, epochs: int, lr: float, seed: int) -> tuple:
    p = cfg.policy
    arch = Architecture.from_config(cfg)
    _check(params, arch)
    report = TrainReport(config_hash=cfg.hash(), seed=seed)
    t0 = time.perf_counter()
    theta = params.theta.copy()
    if ds.count == 0 or epochs == 0:
        report.wall_time = time.perf_counter() - t0
        return ModelParams(theta, params.fingerprint, params.config_hash, params.seed), report
    tr, va = _split(ds.count, p.val_fraction, seed)
    pooled = ds.pooled(arch.pool)
    speed, cmd, target = ds.speeds(), ds.commands(), ds.waypoints().reshape(ds.count, -1)
    report.n_train, report.n_val = len(tr), len(va)
    rng = np.random.default_rng([seed, 2])
    vel = np.zeros_like(theta)
    initial = None
    b = 0
    for epoch in range(epochs):
        order = tr[rng.permutation(len(tr))]
        total, count = 0.0, 0
        for i in range(0, len(order), p.batch_size):
            idx = order[i:i + p.batch_size]
            cur = ModelParams(theta, params.fingerprint)
            try:
                loss, grad = wbc_loss(cur, cfg, pooled[idx], speed[idx], cmd[idx], target[idx], b)
            except _NonFinite as exc:
                report.wall_time = time.perf_counter() - t0
                raise TrainingDiverged(str(exc), report) from exc
            if initial is None:
                initial = max(loss, 1e-12)
            if not math.isfinite(loss) or loss > 1e3 * initial:
                report.epoch_losses.append(loss)
                report.wall_time = time.perf_counter() - t0
                raise TrainingDiverged(f"loss {loss:.3g} exceeds 1000x the initial {initial:.3g}", report)
            vel = p.momentum * vel - lr * grad
            theta = theta + vel
            total += loss * len(idx)
            count += len(idx)
            b += 1
        report.epoch_losses.append(total / count)
    out = ModelParams(theta, params.fingerprint, params.config_hash, params.seed)
    if len(va):
        pred = predict_pooled(out, cfg, pooled[va], speed[va], cmd[va])
        report.val_l1 = float(np.mean(np.abs(pred.reshape(len(va), -1) - target[va])))
    report.wall_time = time.perf_counter() - t0
    return out, report


def train(cfg: Config, ds: Dataset, seed: int | None = None) -> tuple:
    """Fresh initialisation + momentum SGD; (cfg, data, seed) fixes theta bit-exactly."""
    seed = cfg.policy.seed if seed is None else seed
    if ds.count == 0:
        raise ValueError("cannot train on an empty dataset")
    params = init_params(cfg, seed)
    return _optimise(params, cfg, ds, cfg.policy.epochs, cfg.policy.lr, seed)


def adapt(params: ModelParams, cfg: Config, ds: Dataset, seed: int | None = None) -> tuple:
    """Continue training on adaptation data at a reduced learning rate."""
    seed = cfg.policy.seed if seed is None else seed
    return _optimise(params, cfg, ds, cfg.policy.adapt_epochs, cfg.policy.lr * cfg.policy.adapt_lr_scale, seed)


def baseline_predictor(params: ModelParams, cfg: Config):
    return lambda ds: predict_dataset(params, cfg, ds)


def train_lbw_pipeline(cfg: Config, ego: Dataset, lbw: Dataset, beta: float, seed: int | None = None) -> tuple:
    """Baseline on ego data, refurbish the watched samples with it, retrain from scratch on the union.

    Returns (params, report, refurbished lbw dataset).
    """
    base, _ = train(cfg, ego, seed)
    fixed = refurbish(lbw, baseline_predictor(base, cfg), beta) if lbw.count else lbw
    params, report = train(cfg, merge(ego, fixed), seed)
    return params, report, fixed


# ---------------------------------------------------------------------------
# checkpoints

def save_params(params: ModelParams, path) -> None:
    fp = params.fingerprint.encode()
    head = struct.pack("<4sHH16sqQ", CKPT_MAGIC, CKPT_VERSION, len(fp), params.config_hash.encode().ljust(16, b"\0")[:16],
                       params.seed, params.theta.size)
    atomic_write(path, head + fp + params.theta.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    fmt = struct.Struct("<4sHH16sqQ")
    magic, version, flen, chash, seed, n = fmt.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise ValueError("not a model checkpoint")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = fmt.size
    fp = raw[off:off + flen].decode()
    off += flen
    theta = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("checkpoint contains non-finite parameters")
    return ModelParams(theta, fp, chash.rstrip(b"\0").decode(), seed)


def params_digest(params: ModelParams) -> str:
    return hashlib.sha256(params.theta.tobytes()).hexdigest()
