"""Steepest-ascent directions and projections for l1, l2 and l-inf balls.

Every function works on the last axis, so a single vector of shape ``(d,)``
and a batch of shape ``(n, d)`` are handled by the same code.
"""

import math

import numpy as np

INF = math.inf
NORMS = (1, 2, INF)

_ALIASES = {
    "1": 1, "l1": 1,
    "2": 2, "l2": 2,
    "inf": INF, "linf": INF, "l_inf": INF, "∞": INF,
}


def parse_norm(p):
    """Map ``1``, ``2``, ``inf`` or a string alias such as ``"linf"`` to a norm id."""
    if isinstance(p, str):
        key = p.strip().lower()
        if key not in _ALIASES:
            raise ValueError(f"unsupported norm: {p!r}")
        return _ALIASES[key]
    if p == 1 or p == 2:
        return int(p)
    if p == INF:
        return INF
    raise ValueError(f"unsupported norm: {p!r}")


def norm_name(p):
    p = parse_norm(p)
    return "linf" if p == INF else f"l{p}"


def lp_norm(v, p):
    v = np.asarray(v, dtype=float)
    p = parse_norm(p)
    if p == INF:
        return np.max(np.abs(v), axis=-1, initial=0.0)
    if p == 1:
        return np.sum(np.abs(v), axis=-1)
    return np.sqrt(np.sum(v * v, axis=-1))


def default_topk(d):
    """Number of coordinates sharing the l1 step mass: 1% of ``d``, at least one."""
    return max(1, math.ceil(0.01 * d))


# steepest ascent

def steepest_ascent_linf(g, step):
    return step * np.sign(np.asarray(g, dtype=float))


def steepest_ascent_l2(g, step):
    g = np.asarray(g, dtype=float)
    norm = lp_norm(g, 2)[..., None]
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, g * (step / safe), 0.0)


def steepest_ascent_l1_canonical(g, step):
    """One-hot ascent on the largest-magnitude coordinate.

    ``np.argmax`` returns the first maximum, so ties go to the lowest index.
    An all-zero gradient gives the zero vector because ``sign(0) == 0``.
    """
    g = np.asarray(g, dtype=float)
    idx = np.argmax(np.abs(g), axis=-1)[..., None]
    out = np.zeros_like(g)
    np.put_along_axis(out, idx, step * np.sign(np.take_along_axis(g, idx, axis=-1)), axis=-1)
    return out


def steepest_ascent_l1_topk(g, step, k, x_adv):
    """Spread the l1 step evenly over the top-``k`` eligible coordinates.

    A coordinate is eligible when its gradient is nonzero and moving along
    ``sign(g_i)`` keeps ``x_adv_i`` inside ``[0, 1]``: a pixel already at 1
    cannot be pushed up, one at 0 cannot be pushed down. Ineligible
    coordinates are skipped and the next largest eligible ones take their
    place. When fewer than ``k`` coordinates qualify, the mass is split among
    those that do; with none, the result is zero.

    Args:
        g: gradient, shape ``(..., d)``.
        step: total l1 mass of the returned direction.
        k: number of coordinates to share the mass.
        x_adv: current point, same shape as ``g``.

    Returns:
        Array shaped like ``g``.
    """
    g = np.asarray(g, dtype=float)
    x_adv = np.broadcast_to(np.asarray(x_adv, dtype=float), g.shape)
    if k < 1:
        raise ValueError("k must be positive")
    s = np.sign(g)
    eligible = (s > 0) & (x_adv < 1.0) | (s < 0) & (x_adv > 0.0)
    score = np.where(eligible, np.abs(g), -1.0)
    # stable sort on the negated score keeps the lowest index first among ties
    order = np.argsort(-score, axis=-1, kind="stable")[..., :k]
    chosen = np.take_along_axis(eligible, order, axis=-1)
    count = chosen.sum(axis=-1, keepdims=True)
    share = np.where(count > 0, step / np.maximum(count, 1), 0.0)
    out = np.zeros_like(g)
    vals = np.where(chosen, share * np.take_along_axis(s, order, axis=-1), 0.0)
    np.put_along_axis(out, order, vals, axis=-1)
    return out


def steepest_ascent(g, p, step, *, k=None, x_adv=None):
    """Dispatch to the ascent rule for norm ``p``.

    For ``p = 1`` the top-k rule is used when ``x_adv`` is given, the
    canonical one-hot rule otherwise. ``k`` defaults to :func:`default_topk`.
    """
    p = parse_norm(p)
    if p == INF:
        return steepest_ascent_linf(g, step)
    if p == 2:
        return steepest_ascent_l2(g, step)
    if x_adv is None:
        return steepest_ascent_l1_canonical(g, step)
    g = np.asarray(g, dtype=float)
    if k is None:
        k = default_topk(g.shape[-1])
    return steepest_ascent_l1_topk(g, step, k, x_adv)


# projections

def project_linf(delta, eps):
    return np.clip(np.asarray(delta, dtype=float), -eps, eps)


def project_l2(delta, eps):
    delta = np.asarray(delta, dtype=float)
    norm = lp_norm(delta, 2)[..., None]
    scale = np.where(norm > eps, eps / np.where(norm > 0, norm, 1.0), 1.0)
    return delta * scale


def project_l1(delta, eps):
    """Euclidean projection onto the l1 ball of radius ``eps``.

    Sorts the magnitudes in descending order, finds the largest ``rho`` with
    ``gamma_rho > (sum(gamma[:rho]) - eps) / rho`` and soft-thresholds every
    coordinate by ``eta = (sum(gamma[:rho]) - eps) / rho``. Rows already
    inside the ball are returned untouched.
    """
    delta = np.asarray(delta, dtype=float)
    mag = np.abs(delta)
    gamma = -np.sort(-mag, axis=-1)
    csum = np.cumsum(gamma, axis=-1)
    j = np.arange(1, delta.shape[-1] + 1)
    positive = gamma - (csum - eps) / j > 0
    # index of the last True along the axis; rows with no True only occur
    # inside the ball and are masked out below
    rho = delta.shape[-1] - np.argmax(positive[..., ::-1], axis=-1)
    eta = (np.take_along_axis(csum, (rho - 1)[..., None], axis=-1) - eps) / rho[..., None]
    projected = np.sign(delta) * np.maximum(mag - eta, 0.0)
    inside = csum[..., -1:] <= eps
    return np.where(inside, delta, projected)


def project(delta, p, eps):
    p = parse_norm(p)
    if p == INF:
        return project_linf(delta, eps)
    if p == 2:
        return project_l2(delta, eps)
    return project_l1(delta, eps)


def clip_box(x, lo=0.0, hi=1.0):
    if lo > hi:
        raise ValueError("lo must not exceed hi")
    return np.clip(np.asarray(x, dtype=float), lo, hi)
