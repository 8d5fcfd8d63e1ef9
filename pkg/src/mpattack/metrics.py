"""Imperceptibility metrics: PSNR, SSIM and an entropic Wasserstein distance."""

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

from mpattack.classifier import predict

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 8
SSIM_GLOBAL_BELOW = 11


def psnr(x, x_adv):
    """PSNR in dB of ``x_adv`` against ``x``.

    ``20 log10 ||x||_inf - 10 log10 ||x_adv - x||_2^2 + 10 log10 dim(x)``;
    returns ``inf`` when the two are identical.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    delta = np.asarray(x_adv, dtype=np.float64).ravel() - x
    peak = np.max(np.abs(x))
    if peak == 0:
        raise ValueError("PSNR is undefined for an all-zero reference image")
    energy = float(np.dot(delta, delta))
    if energy == 0:
        return math.inf
    return 20 * math.log10(peak) - 10 * math.log10(energy) + 10 * math.log10(x.size)


def _ssim_from_stats(mu_x, mu_y, var_x, var_y, cov, data_range):
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim(x, y, data_range=1.0):
    """Structural similarity of two grayscale images of equal shape.

    Images with a side shorter than 11 pixels are compared with a single
    global window; larger ones use the mean over all 8x8 windows (stride 1,
    uniform weights). Population statistics are used throughout.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"need two images of equal 2-D shape, got {x.shape} and {y.shape}")
    if min(x.shape) < SSIM_GLOBAL_BELOW:
        mx, my = x.mean(), y.mean()
        cov = np.mean((x - mx) * (y - my))
        return float(_ssim_from_stats(mx, my, x.var(), y.var(), cov, data_range))
    wx = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    wy = sliding_window_view(y, (SSIM_WINDOW, SSIM_WINDOW))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    vx = wx.var(axis=(-2, -1))
    vy = wy.var(axis=(-2, -1))
    cov = (wx * wy).mean(axis=(-2, -1)) - mx * my
    return float(np.mean(_ssim_from_stats(mx, my, vx, vy, cov, data_range)))


def _grid_cost(shape):
    h, w = shape
    rows = np.arange(h) / (h - 1) if h > 1 else np.zeros(1)
    cols = np.arange(w) / (w - 1) if w > 1 else np.zeros(1)
    pts = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1).reshape(-1, 2)
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sum(diff * diff, axis=-1)


def sinkhorn_cost(a, b, cost, reg, iters):
    """Transport cost ``<P, cost>`` of the entropic plan, via log-domain Sinkhorn.

    Only the supports of ``a`` and ``b`` enter the computation, so zero-mass
    bins never produce ``log(0)``.
    """
    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    m = cost[np.ix_(ia, ib)]
    log_a = np.log(a[ia])
    log_b = np.log(b[ib])
    f = np.zeros(len(ia))
    g = np.zeros(len(ib))
    for _ in range(iters):
        f = reg * (log_a - logsumexp((g[None, :] - m) / reg, axis=1))
        g = reg * (log_b - logsumexp((f[:, None] - m) / reg, axis=0))
    plan = np.exp((f[:, None] + g[None, :] - m) / reg)
    return float(np.sum(plan * m))


def wasserstein(x, y, reg=0.01, iters=200):
    """Entropic optimal-transport distance between two images seen as mass distributions.

    Each channel is normalised to unit mass; the ground cost is the squared
    Euclidean distance between pixel sites on a grid scaled to ``[0, 1]^2``.
    Channel-last colour images give the mean over channels.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim not in (2, 3):
        raise ValueError(f"need two images of equal shape, got {x.shape} and {y.shape}")
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("images must be nonnegative")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    cost = _grid_cost(x.shape[:2])
    out = []
    for ch in range(x.shape[2]):
        a = x[..., ch].ravel()
        b = y[..., ch].ravel()
        if a.sum() <= 0 or b.sum() <= 0:
            raise ValueError("images must have positive total mass")
        out.append(sinkhorn_cost(a / a.sum(), b / b.sum(), cost, reg, iters))
    return float(np.mean(out))


@dataclass
class MetricReport:
    """Means over the examples that were clean-correct and successfully attacked.

    With nothing to evaluate, ``n_evaluated`` is 0, ``empty`` is set and the
    metric fields are NaN.
    """

    psnr: float
    ssim: float
    wasserstein: float
    n_evaluated: int
    n_total: int

    @property
    def empty(self):
        return self.n_evaluated == 0


def filtered_metrics(model, x, y, attack_fn, image_shape, reg=0.01, iters=200, reports=None):
    """Run ``attack_fn(model, x, y) -> [AttackReport]`` and average the metrics.

    Only examples that the model classifies correctly before the attack and
    that the attack then flips are scored. Pass ``reports`` to reuse results
    of an attack that was already run on the same examples.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty clean set")
    correct = np.atleast_1d(predict(model, x)) == y
    if reports is None:
        reports = attack_fn(model, x, y)
    scores = []
    for i, rep in enumerate(reports):
        if not (correct[i] and rep.success):
            continue
        a = x[i].reshape(image_shape)
        b = rep.x_adv.reshape(image_shape)
        scores.append((psnr(a, b), ssim(a, b), wasserstein(a, b, reg, iters)))
    if not scores:
        nan = float("nan")
        return MetricReport(nan, nan, nan, 0, len(x))
    p, s, w = (float(v) for v in np.mean(scores, axis=0))
    return MetricReport(p, s, w, len(scores), len(x))
