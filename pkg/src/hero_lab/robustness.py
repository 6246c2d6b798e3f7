"""Perturbation bounds, their numerical verification, and curvature probes.

For a loss with batch gradient g and symmetric Hessian H at a point, the
smallest perturbation that can raise the local quadratic model by at
least c > 0 has a closed-form lower bound in each norm:

    l2:    2c / (||g||_2 + sqrt(||g||_2^2 + 2 v c))
    linf:  2c / (||g||_1 + sqrt(||g||_1^2 + 2 n v c))

with v the top Hessian eigenvalue (clipped at 0) and n the number of
nonzero coordinates. These are the usual "solve the quadratic in r" forms
rewritten without the subtraction, so they stay exact as the gradient
norm approaches zero: the limits sqrt(2c/v) and sqrt(2c/(n v)) fall out
of the same expression instead of needing a branch.

min_perturbation_bruteforce verifies the bounds from the other side: it
bisects on the radius, deciding feasibility of each radius by maximizing
the quadratic model over the ball. The l2 maximizer works in the
eigenbasis (trust-region style secular equation, with the degenerate
top-eigenspace case handled explicitly); the linf maximizer runs
projected gradient ascent from seeded starts and, for dimensions up to 8,
also enumerates every corner sign pattern, which is exact whenever the
quadratic is convex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models, seeding, trainers
from .errors import HeroLabError, SearchError, ShapeError

NORMS = ("l2", "linf")
CORNER_ENUM_MAX_DIM = 8


# ---------------------------------------------------------------------------
# closed-form lower bounds


def _check_bound_args(c: float, v: float):
    if not c > 0:
        raise HeroLabError(f"loss increase c must be positive, got {c}")
    if not v >= 0:
        raise HeroLabError(f"top eigenvalue v must be nonnegative, got {v}")


def lower_bound_l2(g_norm2: float, v: float, c: float) -> float:
    """Smallest l2 perturbation able to raise the quadratic model by c."""
    _check_bound_args(c, v)
    if not g_norm2 >= 0:
        raise HeroLabError(f"gradient norm must be nonnegative, got {g_norm2}")
    if g_norm2 == 0 and v == 0:
        raise HeroLabError("flat point: gradient norm and top eigenvalue are both zero")
    return 2.0 * c / (g_norm2 + math.hypot(g_norm2, math.sqrt(2.0 * v * c)))


def lower_bound_linf(g_norm1: float, v: float, c: float, n: int) -> float:
    """Smallest linf perturbation able to raise the quadratic model by c.

    ``n`` counts the coordinates the perturbation may touch (the nonzero
    entries of the weight vector under analysis).
    """
    _check_bound_args(c, v)
    if not g_norm1 >= 0:
        raise HeroLabError(f"gradient norm must be nonnegative, got {g_norm1}")
    if n < 1:
        raise HeroLabError(f"coordinate count n must be >= 1, got {n}")
    if g_norm1 == 0 and v == 0:
        raise HeroLabError("flat point: gradient norm and top eigenvalue are both zero")
    return 2.0 * c / (g_norm1 + math.hypot(g_norm1, math.sqrt(2.0 * n * v * c)))


# ---------------------------------------------------------------------------
# analytic problems


@dataclass(frozen=True)
class AnalyticProblem:
    """Gradient and Hessian of a loss at one evaluation point."""

    gradient: np.ndarray
    hessian: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gradient, dtype=np.float64).ravel()
        H = np.asarray(self.hessian, dtype=np.float64)
        if H.shape != (g.size, g.size):
            raise ShapeError(f"hessian shape {H.shape} does not match gradient size {g.size}")
        if g.size and not np.allclose(H, H.T, atol=1e-9 * (1.0 + np.abs(H).max())):
            raise ShapeError("hessian must be symmetric")
        object.__setattr__(self, "gradient", g)
        object.__setattr__(self, "hessian", (H + H.T) / 2.0)

    @property
    def dim(self) -> int:
        return self.gradient.size

    def top_eigenvalue(self) -> float:
        """Largest Hessian eigenvalue, clipped at zero."""
        return max(float(np.linalg.eigvalsh(self.hessian)[-1]), 0.0)


def quadratic_problem(A: np.ndarray, b: np.ndarray, w: np.ndarray) -> AnalyticProblem:
    """Loss 0.5 w'Aw + b'w evaluated at w."""
    A = np.asarray(A, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64).ravel()
    b = np.zeros_like(w) if b is None else np.asarray(b, dtype=np.float64).ravel()
    return AnalyticProblem(gradient=A @ w + b, hessian=A)


def logistic_problem(X: np.ndarray, y: np.ndarray, w: np.ndarray,
                     reg: float = 0.0) -> AnalyticProblem:
    """Mean logistic loss over rows of X with labels y in {-1, +1}."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    margins = y * (X @ w)
    s = 1.0 / (1.0 + np.exp(margins))  # sigma(-margin)
    n = X.shape[0]
    g = -(X * (y * s)[:, None]).mean(axis=0) + reg * w
    weights = s * (1.0 - s)
    H = (X.T * weights) @ X / n + reg * np.eye(w.size)
    return AnalyticProblem(gradient=g, hessian=H)


class QuadraticLoss:
    """0.5 w'Aw + b'w as a loss-record provider with a single 'w' weight.

    Lets the optimizer steps and curvature probes run on a problem whose
    gradient and Hessian are known exactly.
    """

    def __init__(self, A: np.ndarray, b: np.ndarray | None = None):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = None if b is None else np.asarray(b, dtype=np.float64).ravel()

    def initial_params(self, w0: np.ndarray) -> models.ParamSet:
        return models.ParamSet([models.ParamEntry(name="w", value=np.asarray(w0), kind="weight")])

    def loss_record(self, params, batch=None, *, mode="train", running=None, frozen_stats=None):
        def fn(leaves, _):
            w = leaves["w"]
            loss = ad.mul(ad.reduce_sum(ad.mul(w, ad.matmul(self.A, w))), 0.5)
            if self.b is not None:
                loss = ad.add(loss, ad.reduce_sum(ad.mul(self.b, w)))
            return loss
        return ad.forward(fn, params, batch)

    def gradient_at(self, w: np.ndarray) -> np.ndarray:
        g = self.A @ np.asarray(w).ravel()
        return g if self.b is None else g + self.b


# ---------------------------------------------------------------------------
# ball maximizers and the radius bisection


def _max_quadratic_l2(lam: np.ndarray, ghat: np.ndarray, r: float) -> float:
    """max of ghat'u + 0.5 u'diag(lam)u over ||u||_2 <= r (eigenbasis form)."""
    if r == 0.0:
        return 0.0
    top = float(lam[-1])

    def value(u):
        return float(ghat @ u + 0.5 * (lam * u) @ u)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if top < 0.0:
            # strictly concave: the unconstrained peak may sit inside
            u0 = ghat / (0.0 - lam)
            if float(u0 @ u0) <= r * r:
                return value(u0)
        lo = max(top, 0.0)
        if lo == top:
            eig_tol = 1e-12 * (1.0 + abs(top))
            is_top = lam > top - eig_tol
            g_top = math.sqrt(float(ghat[is_top] @ ghat[is_top]))
            rest = np.where(is_top, 0.0, ghat / np.where(is_top, 1.0, top - lam))
            rest_sq = float(rest @ rest)
            if g_top <= 1e-13 * (1.0 + float(np.linalg.norm(ghat))) and rest_sq < r * r:
                # degenerate case: nothing pulls along the top eigenspace,
                # so fill the remaining radius with a top eigenvector
                tau = math.sqrt(r * r - rest_sq)
                u = rest.copy()
                base = value(u) + 0.5 * top * tau * tau + g_top * tau
                return base

        def radius_sq(nu):
            u = ghat / (nu - lam)
            return float(u @ u)

        hi = lo + float(np.linalg.norm(ghat)) / r + 1.0
        for _ in range(200):
            if radius_sq(hi) <= r * r:
                break
            hi *= 2.0
        nu_lo = lo
        for _ in range(120):
            mid = 0.5 * (nu_lo + hi)
            if mid <= nu_lo or mid >= hi:
                break
            if radius_sq(mid) > r * r:
                nu_lo = mid
            else:
                hi = mid
        u = ghat / (hi - lam)
        norm_u = float(np.linalg.norm(u))
        if norm_u > 0:
            u = u * (r / norm_u)
        return value(u)


def _corner_coeffs(g: np.ndarray, H: np.ndarray):
    """Per sign pattern s: value(r) = r*(s.g) + r^2 * 0.5 s'Hs."""
    d = g.size
    signs = np.array(np.meshgrid(*([[-1.0, 1.0]] * d), indexing="ij")).reshape(d, -1).T
    lin = signs @ g
    quad = 0.5 * np.einsum("ij,ij->i", signs @ H, signs)
    return lin, quad


def _max_quadratic_linf(g: np.ndarray, H: np.ndarray, r: float, starts: np.ndarray,
                        corner_lin: np.ndarray | None, corner_quad: np.ndarray | None,
                        curvature_scale: float, iters: int = 80) -> float:
    if r == 0.0:
        return 0.0
    best = -math.inf
    if corner_lin is not None:
        best = float((r * corner_lin + r * r * corner_quad).max())
    x = r * starts
    g_norm = float(np.linalg.norm(g))
    eta = r / (g_norm + r * curvature_scale + 1e-12)
    for _ in range(iters):
        x = np.clip(x + eta * (g + x @ H), -r, r)
    vals = x @ g + 0.5 * np.einsum("ij,ij->i", x @ H, x)
    return max(best, float(vals.max()))


def min_perturbation_bruteforce(problem: AnalyticProblem, c: float, norm: str = "l2", *,
                                tol: float = 1e-6, r_max: float = 1e3,
                                seed: int = 0) -> float:
    """Smallest ball radius whose quadratic-model maximum reaches c.

    Bisects on the radius; feasibility of each radius comes from the
    exact l2 ball maximizer or the linf corner/ascent maximizer. Raises
    SearchError if even radius r_max cannot reach c.
    """
    if not c > 0:
        raise HeroLabError(f"loss increase c must be positive, got {c}")
    if norm not in NORMS:
        raise HeroLabError(f"norm must be one of {NORMS}, got {norm!r}")
    g, H = problem.gradient, problem.hessian
    if norm == "l2":
        lam, Q = np.linalg.eigh(H)
        ghat = Q.T @ g

        def feasible(r):
            return _max_quadratic_l2(lam, ghat, r) >= c
    else:
        corner_lin = corner_quad = None
        if problem.dim <= CORNER_ENUM_MAX_DIM:
            corner_lin, corner_quad = _corner_coeffs(g, H)
        starts = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(16, problem.dim))
        curvature_scale = float(np.abs(np.linalg.eigvalsh(H)).max()) if problem.dim else 0.0

        def feasible(r):
            return _max_quadratic_linf(g, H, r, starts, corner_lin, corner_quad,
                                       curvature_scale) >= c

    hi = min(1.0, r_max)
    while not feasible(hi):
        hi *= 2.0
        if hi > r_max:
            raise SearchError(f"no perturbation within radius {r_max} raises the model by {c}")
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    # hi is the smallest radius verified feasible, so the true minimum
    # lies in (hi - tol, hi] and the report never undershoots it
    return hi


# ---------------------------------------------------------------------------
# randomized bound verification


@dataclass(frozen=True)
class BoundCheckRow:
    index: int
    dim: int
    v: float
    g_norm2: float
    g_norm1: float
    c: float
    bound_l2: float
    brute_l2: float
    slack_l2: float
    bound_linf: float
    brute_linf: float
    slack_linf: float


@dataclass(frozen=True)
class BoundCheckSummary:
    trials: int
    violations_l2: int
    violations_linf: int
    median_slack_l2: float
    median_slack_linf: float


def bound_sweep(trials: int, dim_max: int, seed: int,
                violation_tol: float = 1e-6) -> tuple[list[BoundCheckRow], BoundCheckSummary]:
    """Random PSD problems; brute-forced minima must sit above the bounds."""
    if dim_max < 2:
        raise HeroLabError(f"dim_max must be >= 2, got {dim_max}")
    rng = seeding.derive_rng(seed, seeding.BOUNDS)
    rows: list[BoundCheckRow] = []
    for k in range(trials):
        d = int(rng.integers(2, dim_max + 1))
        scale = 10.0 ** rng.uniform(-1.0, 1.0)
        lam = rng.uniform(0.0, 1.0, size=d) * scale
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        H = (Q * lam) @ Q.T
        g = rng.standard_normal(d) * 10.0 ** rng.uniform(-1.0, 1.0)
        c = float(rng.uniform(0.01, 1.0))
        problem = AnalyticProblem(gradient=g, hessian=H)
        v = problem.top_eigenvalue()
        g2 = float(np.linalg.norm(g))
        g1 = float(np.abs(g).sum())
        bound2 = lower_bound_l2(g2, v, c)
        brute2 = min_perturbation_bruteforce(problem, c, "l2")
        boundinf = lower_bound_linf(g1, v, c, n=d)
        bruteinf = min_perturbation_bruteforce(problem, c, "linf",
                                               seed=int(rng.integers(0, 2**63 - 1)))
        rows.append(BoundCheckRow(
            index=k, dim=d, v=v, g_norm2=g2, g_norm1=g1, c=c,
            bound_l2=bound2, brute_l2=brute2, slack_l2=brute2 - bound2,
            bound_linf=boundinf, brute_linf=bruteinf, slack_linf=bruteinf - boundinf,
        ))
    summary = BoundCheckSummary(
        trials=trials,
        violations_l2=sum(1 for r in rows if r.slack_l2 < -violation_tol),
        violations_linf=sum(1 for r in rows if r.slack_linf < -violation_tol),
        median_slack_l2=float(np.median([r.slack_l2 for r in rows])) if rows else float("nan"),
        median_slack_linf=float(np.median([r.slack_linf for r in rows])) if rows else float("nan"),
    )
    return rows, summary


# ---------------------------------------------------------------------------
# curvature probes on models


def hessian_norm_metric(spec, params, dataset, h: float, *, batch_size: int = 256,
                        running=None) -> float:
    """Mean over fixed batches of || H z ||_2 restricted to weight tensors.

    z is the layer-rescaled gradient direction the perturbed optimizer
    rules use, and Hz comes from the same forward finite difference, so
    the number tracks exactly the curvature those rules penalize. The
    batch partition is sequential and unshuffled, making the metric a
    pure function of (params, dataset, h).
    """
    model = trainers._resolve_model(spec)
    if dataset is None:
        batches = [None]
    else:
        batches = [(dataset.inputs[s : s + batch_size], dataset.labels[s : s + batch_size])
                   for s in range(0, len(dataset), batch_size)]
    perturbable = [e.name for e in params if e.perturbable]
    values = []
    for batch in batches:
        def loss_fn(p, _batch=batch):
            return model.loss_record(p, _batch, mode="train", running=running)

        g = ad.backward(loss_fn(params))
        z = trainers.layer_perturbation(params, g)
        hz = ad.hvp_fd(loss_fn, params, z, h, base_grads=g)
        values.append(ad.global_norm(hz, perturbable))
    return float(np.mean(values))


def estimate_top_curvature(spec, params, batch, h: float, *, iters: int = 30,
                           seed: int = 0, running=None) -> float:
    """Power-iteration estimate of the top Hessian eigenvalue (diagnostic)."""
    model = trainers._resolve_model(spec)

    def loss_fn(p):
        return model.loss_record(p, batch, mode="train", running=running)

    rng = np.random.default_rng(seed)
    v = {e.name: rng.standard_normal(e.value.shape) for e in params if e.trainable}
    scale = ad.global_norm(v)
    v = {k: a / scale for k, a in v.items()}
    base = ad.backward(loss_fn(params))
    estimate = 0.0
    for _ in range(iters):
        hv = ad.hvp_fd(loss_fn, params, v, h, base_grads=base)
        estimate = ad.global_norm(hv)
        if estimate == 0.0:
            return 0.0
        v = {k: a / estimate for k, a in hv.items()}
    return float(estimate)


# ---------------------------------------------------------------------------
# loss contours


def contour_directions(params, seed: int) -> tuple[ad.GradientSet, ad.GradientSet]:
    """Two gaussian directions, rescaled per layer to the layer weight norm.

    Non-weight entries get zero directions, so a contour moves the model
    only along dimensions the perturbation analysis cares about.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(2):
        d: ad.GradientSet = {}
        for e in params:
            if not e.perturbable:
                d[e.name] = np.zeros_like(e.value)
                continue
            raw = rng.standard_normal(e.value.shape)
            rn = float(np.linalg.norm(raw))
            wn = float(np.linalg.norm(e.value))
            d[e.name] = raw * (wn / rn) if rn > 0 else raw
        out.append(d)
    return out[0], out[1]


def loss_contour(spec, params, dataset, half_width: float, steps: int, seed: int, *,
                 running=None, batch_size: int = 512):
    """Loss surface over a 2-D slice spanned by two seeded directions.

    Returns (offsets, grid) with grid[i, j] the loss at
    params + offsets[i] * d1 + offsets[j] * d2. ``steps`` must be odd so
    the exact center of the grid is the unperturbed loss.
    """
    if steps < 3 or steps % 2 == 0:
        raise HeroLabError(f"steps must be an odd number >= 3, got {steps}")
    if not half_width > 0:
        raise HeroLabError(f"half_width must be positive, got {half_width}")
    d1, d2 = contour_directions(params, seed)
    half = steps // 2
    offsets = (np.arange(steps) - half) * (half_width / half)
    is_net = isinstance(spec, models.ModelSpec)
    model = None if is_net else trainers._resolve_model(spec)
    grid = np.empty((steps, steps))
    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            if a == 0.0 and b == 0.0:
                p = params  # reuse the object itself: center is bitwise the plain loss
            else:
                p = params.shifted(d1, a).shifted(d2, b)
            if is_net:
                grid[i, j] = models.evaluate(spec, p, dataset, running=running,
                                             batch_size=batch_size)[0]
            else:
                grid[i, j] = model.loss_record(p, dataset).loss
    return offsets, grid
