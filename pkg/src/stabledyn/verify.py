"""Numerical stability audits for the learned models.

These checks restate the analytical guarantees at sample level: the
pointwise decrease condition, the exponential decay envelopes along
rollouts, the quadratic sandwich constants of the Lyapunov function, and
the data-coverage certificate that connects learned-model stability to the
true plant.  Every supremum and Lipschitz constant here is a Monte-Carlo
estimate over a recorded seed and sample count — an audit, not a formal
proof — and the reports say so.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

ORIGIN_EXCLUSION = 1e-3  # sampling stays clear of the 0/0 at the equilibrium
DECAY_TOL = 0.02
LIPSCHITZ_SEPARATION = 1e-3


def _report_json(report):
    return json.dumps(asdict(report), indent=2)


def _uniform_box(rng, lb, ub, count):
    return rng.uniform(lb, ub, size=(count, len(lb)))


def _chunks(total, size=20000):
    for start in range(0, total, size):
        yield slice(start, min(start + size, total))


# ---------------------------------------------------------------------------
# Decrease condition
# ---------------------------------------------------------------------------

@dataclass
class DecreaseReport:
    """Largest sampled violation of grad V . f*(x, u*(x)) <= -alpha V."""

    max_residual: float
    n_floor: int          # samples where ||grad V||^2 fell below eps_proj
    n_used: int
    n_samples: int
    seed: int
    ablated: bool
    estimate_kind: str = "sampled"

    def to_json(self):
        return _report_json(self)


def check_decrease(model, n_samples, seed, ablate_projection=False):
    """Max residual over box samples with an active projection denominator.

    Samples within ORIGIN_EXCLUSION of the origin are discarded; samples
    whose Lyapunov gradient falls under the eps_proj floor are counted but
    excluded from the max (the construction only guarantees decrease off
    the floor).
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    hp = model.hyper
    rng = np.random.default_rng(seed)
    X = _uniform_box(rng, hp.x_lb, hp.x_ub, n_samples)
    X = X[np.linalg.norm(X, axis=1) >= ORIGIN_EXCLUSION]
    max_resid = -np.inf
    n_floor = 0
    n_used = 0
    for sl in _chunks(len(X)):
        pieces = model.eval_pieces(X[sl], ablate_projection=ablate_projection)
        gn2 = np.sum(pieces["grad_v"] ** 2, axis=1)
        ok = gn2 >= hp.eps_proj
        n_floor += int(np.sum(~ok))
        n_used += int(np.sum(ok))
        if np.any(ok):
            resid = (np.sum(pieces["grad_v"] * pieces["fstar_star"], axis=1)
                     + hp.alpha * pieces["v"][:, 0])
            max_resid = max(max_resid, float(resid[ok].max()))
    return DecreaseReport(max_resid, n_floor, n_used, n_samples, int(seed),
                          bool(ablate_projection))


# ---------------------------------------------------------------------------
# Decay envelopes along a rollout
# ---------------------------------------------------------------------------

@dataclass
class DecayReport:
    """Pointwise exponential-envelope check along one learned-plant rollout."""

    passed: bool
    worst_v_ratio: float
    worst_norm_ratio: float
    tol: float

    def to_json(self):
        return _report_json(self)


def decay_bound_check(traj, hyper, tol=DECAY_TOL):
    """Verify V(x(t)) <= V(x(0)) e^{-alpha t} and the induced norm envelope.

    Both bounds carry a (1 + tol) multiplicative allowance.  A trajectory
    started exactly at the origin passes trivially.
    """
    v0 = float(traj.v_trace[0])
    v_env = v0 * np.exp(-hyper.alpha * traj.times)
    n_env = np.sqrt(v0 / hyper.eps_pd) * np.exp(-hyper.alpha * traj.times / 2.0)

    def worst(actual, env):
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(env > 0.0, actual / env,
                              np.where(actual <= 0.0, 0.0, np.inf))
        return float(np.max(ratios)) if len(ratios) else 0.0

    wv = worst(traj.v_trace, v_env)
    wn = worst(traj.norm_trace, n_env)
    return DecayReport(bool(wv <= 1.0 + tol and wn <= 1.0 + tol), wv, wn, tol)


# ---------------------------------------------------------------------------
# Quadratic sandwich constants
# ---------------------------------------------------------------------------

@dataclass
class QuadBoundReport:
    """Sampled sup of V(x)/||x||^2 over an annulus and over the whole box."""

    r1: float
    r2: float
    M: float
    c2_global: float
    c1: float
    n_samples: int
    seed: int
    estimate_kind: str = "sampled"

    def to_json(self):
        return _report_json(self)


def estimate_quadratic_ratio(model, r1, r2, n_samples, seed):
    """Monte-Carlo sup of V/||x||^2 on {r1<=||x||<=r2} and on the box.

    The annulus is sampled by rejection from its bounding cube; the global
    estimate uses the state box minus a small origin exclusion.  Both are
    lower bounds on the true suprema.
    """
    if not 0 < r1 <= r2:
        raise ValueError("need r2 >= r1 > 0")
    hp = model.hyper
    rng_ann = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    rng_box = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))

    cube = _uniform_box(rng_ann, -r2 * np.ones(hp.n), r2 * np.ones(hp.n), n_samples)
    norms = np.linalg.norm(cube, axis=1)
    annulus = cube[(norms >= r1) & (norms <= r2)]

    box = _uniform_box(rng_box, hp.x_lb, hp.x_ub, n_samples)
    box = box[np.linalg.norm(box, axis=1) >= ORIGIN_EXCLUSION]

    def sup_ratio(X):
        best = -np.inf
        for sl in _chunks(len(X)):
            v = model.eval_pieces(X[sl])["v"][:, 0]
            best = max(best, float(np.max(v / np.sum(X[sl] ** 2, axis=1))))
        return best

    return QuadBoundReport(float(r1), float(r2), sup_ratio(annulus),
                           sup_ratio(box), hp.eps_pd, int(n_samples), int(seed))


# ---------------------------------------------------------------------------
# Data-coverage certificate
# ---------------------------------------------------------------------------

@dataclass
class CertificateReport:
    """Sampled ingredients of the coverage condition

        (L_f + L_fstar) * delta + e  <  alpha * eps_pd * r^2 / M_r.

    ``holds`` is exactly the lhs < rhs predicate on the reported numbers.
    delta, M_r, and both Lipschitz constants are sampled estimates (delta a
    lower bound on the true supremum); e is exact over the dataset.
    """

    r: float
    delta: float
    e: float
    L_f: float
    L_fstar: float
    M_r: float
    lhs: float
    rhs: float
    holds: bool
    n_samples: int
    n_data: int
    seed: int
    estimate_kind: str = "sampled (delta, M_r, Lipschitz constants); exact (e)"

    def to_json(self):
        return _report_json(self)


def certificate(model, system, dataset, r, n_samples, seed):
    """Audit the coverage condition for a trained model on its dataset."""
    if len(dataset) == 0:
        raise ValueError("certificate needs a nonempty dataset")
    if r <= 0:
        raise ValueError("neighborhood radius must be positive")
    hp = model.hyper

    # e: exact max model error over the dataset
    e = 0.0
    for sl in _chunks(len(dataset)):
        f_true = system.dynamics(dataset.X[sl], dataset.U[sl])
        f_star = model.eval_pieces(dataset.X[sl], dataset.U[sl])["fstar_data"]
        err = np.sqrt(np.sum((f_true - f_star) ** 2, axis=1))
        e = max(e, float(err.max()))

    # delta: sampled sup over x of the distance from (x, u*(x)) to the data
    rng_delta = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    tree = cKDTree(np.hstack((dataset.X, dataset.U)))
    delta = 0.0
    Xq = _uniform_box(rng_delta, hp.x_lb, hp.x_ub, n_samples)
    for sl in _chunks(len(Xq)):
        u = model.eval_pieces(Xq[sl])["u_star"]
        dist, _ = tree.query(np.hstack((Xq[sl], u)), k=1)
        delta = max(delta, float(np.max(dist)))

    # M_r: sampled sup of ||grad V|| outside the target neighborhood
    rng_m = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    Xm = _uniform_box(rng_m, hp.x_lb, hp.x_ub, n_samples)
    Xm = Xm[np.linalg.norm(Xm, axis=1) >= r]
    if len(Xm) == 0:
        raise ValueError(f"radius r={r} leaves no box samples outside the neighborhood")
    M_r = 0.0
    for sl in _chunks(len(Xm)):
        g = model.eval_pieces(Xm[sl])["grad_v"]
        M_r = max(M_r, float(np.max(np.linalg.norm(g, axis=1))))

    # Lipschitz constants: max difference quotients over random close pairs
    rng_lz = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    rng_ld = np.random.default_rng(np.random.SeedSequence([int(seed), 4]))
    L_f = L_fstar = 0.0
    Z = _uniform_box(rng_lz, np.concatenate((hp.x_lb, -hp.u_lim)),
                     np.concatenate((hp.x_ub, hp.u_lim)), n_samples)
    dirs = rng_ld.standard_normal(Z.shape)
    dirs *= LIPSCHITZ_SEPARATION / np.linalg.norm(dirs, axis=1, keepdims=True)
    Z2 = Z + dirs
    nmax = hp.n
    for sl in _chunks(len(Z)):
        a, b = Z[sl], Z2[sl]
        sep = np.linalg.norm(b - a, axis=1)
        df = system.dynamics(a[:, :nmax], a[:, nmax:]) - system.dynamics(b[:, :nmax], b[:, nmax:])
        dfs = (model.eval_pieces(a[:, :nmax], a[:, nmax:])["fstar_data"]
               - model.eval_pieces(b[:, :nmax], b[:, nmax:])["fstar_data"])
        L_f = max(L_f, float(np.max(np.linalg.norm(df, axis=1) / sep)))
        L_fstar = max(L_fstar, float(np.max(np.linalg.norm(dfs, axis=1) / sep)))

    lhs = (L_f + L_fstar) * delta + e
    rhs = hp.alpha * hp.eps_pd * r * r / M_r
    return CertificateReport(
        r=float(r), delta=delta, e=e, L_f=L_f, L_fstar=L_fstar, M_r=M_r,
        lhs=lhs, rhs=rhs, holds=bool(lhs < rhs),
        n_samples=int(n_samples), n_data=len(dataset), seed=int(seed))


def default_radius(hyper):
    """Default certificate neighborhood: 5% of the box corner norm."""
    return 0.05 * float(np.linalg.norm(hyper.x_ub))
