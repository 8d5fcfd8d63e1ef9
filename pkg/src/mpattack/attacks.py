"""PGD, the MSD adversary and the Multiple Perturbation Attack (MPA).

All attacks accept one example ``x (d,)`` with an integer label, or a batch
``x (n, d)`` with labels ``(n,)``. Batched attacks are per-example in
semantics: each row stops as soon as it is misclassified and frozen rows are
never touched again.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from mpattack import geometry as geo
from mpattack.classifier import forward, input_gradient, loss, predict

# CIFAR-scale reference settings, used to derive budgets for smaller inputs
REFERENCE_DIM = 3072
REFERENCE_EPS = {"l1": 12.0, "l2": 0.5, "linf": 0.03}
REFERENCE_STEP = {"l1": 0.05, "l2": 0.05, "linf": 0.003}


def scale_to_dim(value, p, d, ref_dim=REFERENCE_DIM):
    """Rescale an l_p size from ``ref_dim`` inputs to ``d`` inputs at equal per-pixel intensity."""
    p = geo.parse_norm(p)
    if p == 1:
        return value * d / ref_dim
    if p == 2:
        return value * math.sqrt(d / ref_dim)
    return value


def desk_budgets(d, scale=1.0, l1_step_ratio=None, ref_dim=REFERENCE_DIM):
    """Budgets and step sizes for ``d``-dimensional inputs, keyed by norm name.

    ``scale`` multiplies every budget and step. ``l1_step_ratio`` replaces
    the l1 step by ``ratio * eps_l1``; the reference l1 step only covers a
    twelfth of the l1 budget in 20 iterations.
    """
    eps = {k: scale * scale_to_dim(v, k, d, ref_dim) for k, v in REFERENCE_EPS.items()}
    step = {k: scale * scale_to_dim(v, k, d, ref_dim) for k, v in REFERENCE_STEP.items()}
    if l1_step_ratio is not None:
        step["l1"] = l1_step_ratio * eps["l1"]
    return eps, step


@dataclass
class AttackConfig:
    """Hyperparameters shared by PGD, MSD and MPA.

    ``eps`` and ``step`` map norm names (``"l1"``, ``"l2"``, ``"linf"``) to
    budgets and per-iteration step sizes in pixel units. ``n_inner``,
    ``coef_lr``, ``tau`` and ``reuse`` only matter for MPA. ``topk=None``
    means 1% of the input dimension; ``coef_init=None`` means the default
    bound of :func:`init_coefficients`.
    """

    norms: tuple = ("l1", "l2", "linf")
    eps: dict = field(default_factory=lambda: desk_budgets(64)[0])
    step: dict = field(default_factory=lambda: desk_budgets(64)[1])
    n_iter: int = 20
    n_inner: int = 17
    coef_lr: float = 1e-3
    tau: float = 0.01
    reuse: bool = True
    topk: int = None
    coef_init: float = None
    seed: int = 0

    def __post_init__(self):
        self.norms = tuple(geo.norm_name(p) for p in self.norms)
        if not self.norms or len(set(self.norms)) != len(self.norms):
            raise ValueError("norms must be nonempty and duplicate-free")
        self.eps = {geo.norm_name(k): float(v) for k, v in self.eps.items()}
        self.step = {geo.norm_name(k): float(v) for k, v in self.step.items()}
        for name in self.norms:
            if self.eps.get(name, 0) <= 0 or self.step.get(name, 0) <= 0:
                raise ValueError(f"{name}: budget and step size must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.n_iter < 0 or self.n_inner < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.topk is not None and self.topk < 1:
            raise ValueError("topk must be positive")
        if self.coef_init is not None and self.coef_init < 0:
            raise ValueError("coef_init must be >= 0")

    @property
    def norm_ids(self):
        return [geo.parse_norm(p) for p in self.norms]

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return AttackConfig(**d)

    def to_dict(self):
        return {
            "norms": list(self.norms),
            "eps": dict(self.eps),
            "step": dict(self.step),
            "n_iter": self.n_iter,
            "n_inner": self.n_inner,
            "coef_lr": self.coef_lr,
            "tau": self.tau,
            "reuse": self.reuse,
            "topk": self.topk,
            "coef_init": self.coef_init,
            "seed": self.seed,
        }


@dataclass
class AttackReport:
    success: bool
    iterations_used: int
    x_adv: np.ndarray
    assignment_counts: dict
    final_loss: float


def _prepare(x, y):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    y2 = np.atleast_1d(np.asarray(y))
    if len(y2) != len(x2):
        raise ValueError("one label per example required")
    return x2, y2, single


def _reports(model, x_adv, y, success, iters, counts, single):
    final = np.atleast_1d(loss(forward(model, x_adv), y))
    out = [
        AttackReport(bool(success[i]), int(iters[i]), x_adv[i].copy(), counts[i], float(final[i]))
        for i in range(len(y))
    ]
    return out[0] if single else out


def ascent_directions(grad, x_adv, cfg):
    """Steepest-ascent step for every norm in ``cfg``, stacked on a trailing axis ``(..., d, |P|)``."""
    return np.stack(
        [geo.steepest_ascent(grad, p, cfg.step[geo.norm_name(p)], k=cfg.topk, x_adv=x_adv) for p in cfg.norm_ids],
        axis=-1,
    )


# PGD

def pgd_attack(model, x, y, norm, eps, step, n_iter, topk=None, on_step=None):
    """Untargeted PGD under one l_p norm with per-example early stopping.

    Returns one :class:`AttackReport` per example (a single report for a
    single example).
    """
    x, y, single = _prepare(x, y)
    p = geo.parse_norm(norm)
    x_adv = x.copy()
    success = predict(model, x) != y
    active = ~success
    iters = np.zeros(len(y), dtype=int)
    for it in range(n_iter):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        xa, x0 = x_adv[idx], x[idx]
        g = input_gradient(model, xa, y[idx])
        v = geo.steepest_ascent(g, p, step, k=topk, x_adv=xa)
        delta = geo.project(xa + v - x0, p, eps)
        new = geo.clip_box(x0 + delta)
        x_adv[idx] = new
        iters[idx] += 1
        if on_step is not None:
            on_step(it, idx, new)
        fooled = predict(model, new) != y[idx]
        success[idx[fooled]] = True
        active[idx[fooled]] = False
    counts = [{geo.norm_name(p): x.shape[1]} for _ in range(len(y))]
    return _reports(model, x_adv, y, success, iters, counts, single)


# MSD

def msd_adversary(model, x, y, cfg, on_step=None):
    """Multi steepest descent adversary (training-time, no early stop).

    Each iteration builds one candidate per norm by stepping along that
    norm's steepest ascent and projecting onto its ball around ``x``, keeps
    the candidate with the highest loss (earliest norm on ties), and clips it
    to ``[0, 1]``.

    Args:
        on_step: optional ``on_step(iteration, candidate_losses, choice)``
            with losses shaped ``(|P|, n)``.

    Returns:
        Adversarial inputs with the shape of ``x``.
    """
    x, y, single = _prepare(x, y)
    x_adv = x.copy()
    rows = np.arange(len(y))
    for it in range(cfg.n_iter):
        g = input_gradient(model, x_adv, y)
        cands, losses = [], []
        for p in cfg.norm_ids:
            name = geo.norm_name(p)
            v = geo.steepest_ascent(g, p, cfg.step[name], k=cfg.topk, x_adv=x_adv)
            cand = x + geo.project(x_adv + v - x, p, cfg.eps[name])
            cands.append(cand)
            losses.append(np.atleast_1d(loss(forward(model, cand), y)))
        cands = np.stack(cands)
        losses = np.stack(losses)
        choice = np.argmax(losses, axis=0)
        if on_step is not None:
            on_step(it, losses, choice)
        x_adv = geo.clip_box(cands[choice, rows])
    return x_adv[0] if single else x_adv


# MPA building blocks

def temperature_softmax(c, tau):
    z = np.asarray(c, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mixed_perturbation(c, dirs, tau):
    """Per-pixel convex combination ``sum_p softmax(c_i / tau)_p * dirs_i,p``."""
    return np.sum(temperature_softmax(c, tau) * dirs, axis=-1)


def mixed_loss(model, x_adv, y, c, dirs, tau):
    """Loss at ``x_adv`` plus the soft mixture of directions (per example)."""
    return loss(forward(model, x_adv + mixed_perturbation(c, dirs, tau)), y)


def coefficient_gradient(model, x_adv, y, c, dirs, tau):
    """Exact gradient of :func:`mixed_loss` with respect to the coefficients.

    With ``s = softmax(c_i / tau)`` and ``m_i = sum_q s_q dirs_iq`` the chain
    rule through the softmax Jacobian collapses to
    ``dL/dc_ip = dL/dx_i * s_p * (dirs_ip - m_i) / tau``.
    """
    s = temperature_softmax(c, tau)
    mixed = np.sum(s * dirs, axis=-1)
    gx = input_gradient(model, x_adv + mixed, y)
    return gx[..., None] * s * (dirs - mixed[..., None]) / tau


def coefficient_ascent_step(model, x_adv, y, c, dirs, cfg):
    return c + cfg.coef_lr * coefficient_gradient(model, x_adv, y, c, dirs, cfg.tau)


def init_coefficients(rng, d, n_norms, bound=None):
    """Kaiming-uniform coefficients of shape ``(d, n_norms)``.

    The default bound ``sqrt(6 / (d * n_norms))`` takes the whole tensor as
    fan-in. It has to stay comparable to the softmax temperature: with
    coefficient gaps much larger than ``tau`` the softmax Jacobian vanishes
    and the inner ascent cannot change any pixel's assignment.
    """
    if bound is None:
        bound = math.sqrt(6.0 / (d * n_norms))
    return rng.uniform(-bound, bound, size=(d, n_norms))


def partition(c):
    """Index of the winning norm per pixel; ties go to the earliest norm."""
    return np.argmax(c, axis=-1)


def combine_and_project(x_adv, x, c, dirs, cfg, return_assignment=False):
    """Hard per-pixel norm selection followed by per-subset projection.

    Pixel ``i`` joins the subset ``S_p`` of its largest coefficient. Each
    subset takes its own steepest-ascent step, the perturbation restricted to
    the subset is projected onto that norm's ball, and the result is clipped
    to ``[0, 1]``.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    assign = partition(c)
    out = x_adv.copy()
    for j, p in enumerate(cfg.norm_ids):
        mask = assign == j
        if not mask.any():
            continue
        stepped = np.where(mask, x_adv + dirs[..., j], x_adv)
        # zeros outside the subset leave every l_p projection unaffected there
        delta = np.where(mask, stepped - x, 0.0)
        delta = geo.project(delta, p, cfg.eps[geo.norm_name(p)])
        out = np.where(mask, x + delta, out)
    out = geo.clip_box(out)
    return (out, assign) if return_assignment else out


def _count(assign, names):
    return {name: int(np.sum(assign == j)) for j, name in enumerate(names)}


def mpa_attack(model, x, y, cfg, index_offset=0, on_combine=None):
    """Multiple Perturbation Attack.

    Every outer iteration computes the input gradient, one steepest-ascent
    step per norm, refines the coefficients with ``n_inner`` gradient-ascent
    steps through the soft mixture, then commits to the per-pixel argmax via
    :func:`combine_and_project`. Rows stop at their first misclassification.

    Coefficients are drawn per example from a generator seeded by
    ``(cfg.seed, index_offset + row)``, so results do not depend on how a
    dataset is split into batches. With ``cfg.reuse`` they persist across
    outer iterations, otherwise they are redrawn at each one.

    Args:
        on_combine: optional ``on_combine(iteration, rows, x_new, x_clean, assignment)``.
    """
    x, y, single = _prepare(x, y)
    n, d = x.shape
    names = list(cfg.norms)
    rngs = [np.random.default_rng([cfg.seed, index_offset + i]) for i in range(n)]
    c = np.stack([init_coefficients(r, d, len(names), cfg.coef_init) for r in rngs])
    counts = [_count(partition(c[i]), names) for i in range(n)]
    x_adv = x.copy()
    success = predict(model, x) != y
    active = ~success
    iters = np.zeros(n, dtype=int)
    for it in range(cfg.n_iter):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        if it and not cfg.reuse:
            for i in idx:
                c[i] = init_coefficients(rngs[i], d, len(names), cfg.coef_init)
        xa, x0, ya = x_adv[idx], x[idx], y[idx]
        g = input_gradient(model, xa, ya)
        dirs = ascent_directions(g, xa, cfg)
        ci = c[idx]
        for _ in range(cfg.n_inner):
            ci = coefficient_ascent_step(model, xa, ya, ci, dirs, cfg)
        c[idx] = ci
        new, assign = combine_and_project(xa, x0, ci, dirs, cfg, return_assignment=True)
        x_adv[idx] = new
        iters[idx] += 1
        for r, i in enumerate(idx):
            counts[i] = _count(assign[r], names)
        if on_combine is not None:
            on_combine(it, idx, new, x0, assign)
        fooled = predict(model, new) != ya
        success[idx[fooled]] = True
        active[idx[fooled]] = False
    return _reports(model, x_adv, y, success, iters, counts, single)


def run_attack(model, x, y, kind, cfg, index_offset=0):
    """Run ``kind`` (``"pgd"`` or ``"mpa"``) on a batch and return its reports."""
    if kind == "mpa":
        return mpa_attack(model, x, y, cfg, index_offset=index_offset)
    if kind == "pgd":
        if len(cfg.norms) != 1:
            raise ValueError("PGD needs exactly one norm")
        name = cfg.norms[0]
        return pgd_attack(model, x, y, name, cfg.eps[name], cfg.step[name], cfg.n_iter, topk=cfg.topk)
    raise ValueError(f"unknown attack kind {kind!r}")
