"""Fixed-step RK4 integration, closed-loop rollouts, and planar grid exports.

Rollouts integrate either the true plant or the learned projected model,
always under the learned controller, recording the control, Lyapunov value,
and state norm at every step.  An escape guard truncates trajectories whose
norm exceeds ten domain diameters, and plant domain errors (the bicycle
singularity) truncate with a flag instead of crashing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import StableDynamicsModel
from .systems import DomainError, SystemSpec

ESCAPE_FACTOR = 10.0


class DimensionError(ValueError):
    """Grid export requested for a non-planar state space."""


@dataclass
class Trajectory:
    """A closed-loop rollout on a uniform time grid."""

    times: np.ndarray      # (T+1,)
    states: np.ndarray     # (T+1, n)
    controls: np.ndarray   # (T+1, m)
    v_trace: np.ndarray    # (T+1,)
    norm_trace: np.ndarray  # (T+1,)
    escaped: bool = False
    reason: str = ""

    def __len__(self):
        return len(self.times)

    def to_csv(self, path, comment=None):
        n = self.states.shape[1]
        m = self.controls.shape[1]
        names = (["t"] + [f"x{i + 1}" for i in range(n)]
                 + [f"u{i + 1}" for i in range(m)] + ["V", "normx"])
        body = np.hstack((self.times[:, None], self.states, self.controls,
                          self.v_trace[:, None], self.norm_trace[:, None]))
        header = ",".join(names)
        if comment:
            header = comment.rstrip("\n") + "\n" + header
        np.savetxt(path, body, fmt="%.17g", delimiter=",", header=header, comments="")


def rk4_step(field_fn, x, h):
    """One classical Runge-Kutta step of the autonomous field ``field_fn``."""
    if h <= 0:
        raise ValueError("step size must be positive")
    k1 = field_fn(x)
    k2 = field_fn(x + 0.5 * h * k1)
    k3 = field_fn(x + 0.5 * h * k2)
    k4 = field_fn(x + h * k3)
    for k in (k1, k2, k3, k4):
        if not np.all(np.isfinite(k)):
            raise FloatingPointError("non-finite RK4 stage")
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _domain_diameter(hyper):
    return float(np.linalg.norm(hyper.x_ub - hyper.x_lb))


def rollout(plant, model, x0, T=10.0, h=1e-3):
    """Integrate the closed-loop system from ``x0`` for horizon ``T``.

    ``plant`` is either the ``model`` itself (or None) for the learned
    closed loop f*(x, u*(x)), or a :class:`SystemSpec`, in which case the
    true dynamics run under the learned controller.
    """
    trajs = rollout_many(plant, model, np.atleast_2d(np.asarray(x0, dtype=np.float64)),
                         T=T, h=h)
    return trajs[0]


def rollout_many(plant, model, x0s, T=10.0, h=1e-3):
    """Batched rollouts from several starts; returns one Trajectory per row.

    Rows are integrated together for speed; a row that escapes or hits a
    plant domain error is frozen and its trajectory truncated at the last
    valid state.
    """
    if T <= 0 or h <= 0:
        raise ValueError("need T > 0 and h > 0")
    x0s = np.atleast_2d(np.asarray(x0s, dtype=np.float64))
    B, n = x0s.shape
    if n != model.n:
        raise ValueError(f"start states must have dimension {model.n}")
    steps = int(round(T / h))
    limit = ESCAPE_FACTOR * _domain_diameter(model.hyper)

    true_plant = isinstance(plant, SystemSpec)
    if not true_plant and plant is not None and plant is not model:
        raise ValueError("plant must be the model itself, None, or a SystemSpec")

    states = np.empty((steps + 1, B, n))
    controls = np.empty((steps + 1, B, model.m))
    v_trace = np.empty((steps + 1, B))
    active = np.ones(B, dtype=bool)
    end_step = np.full(B, steps, dtype=int)
    reasons = [""] * B

    if true_plant:
        def field(X):
            return plant.dynamics(X, model.controller_batch(X))

        def record(X):
            return model.controller_batch(X), model.lyapunov_batch(X), None
    else:
        def field(X):
            return model.eval_pieces(X)["fstar_star"]

        def record(X):
            pieces = model.eval_pieces(X)
            return pieces["u_star"], pieces["v"][:, 0], pieces["fstar_star"]

    X = x0s.copy()
    k = 0
    while True:
        u_rec, v_rec, fstar = record(X)
        states[k] = X
        controls[k] = u_rec
        v_trace[k] = v_rec
        if k == steps or not np.any(active):
            break
        idx = np.flatnonzero(active)
        Xa = X[idx]
        failed = np.empty(0, dtype=int)
        fail_reason = ""
        try:
            f1 = (plant.dynamics(Xa, u_rec[idx]) if true_plant
                  else fstar[idx])
            Xn = _rk4_masked(field, Xa, f1, h)
            bad = ~np.all(np.isfinite(Xn), axis=1)
            if np.any(bad):
                failed = np.flatnonzero(bad)
                fail_reason = "non-finite state"
        except (DomainError, FloatingPointError, ValueError) as exc:
            # isolate offending rows by stepping one at a time
            Xn = Xa.copy()
            bad = []
            for j in range(len(idx)):
                try:
                    f1j = field(Xa[j:j + 1])
                    Xn[j] = _rk4_masked(field, Xa[j:j + 1], f1j, h)[0]
                except (DomainError, FloatingPointError, ValueError):
                    bad.append(j)
            failed = np.asarray(bad, dtype=int)
            fail_reason = f"plant domain error: {exc}"
        for j in failed:
            row = idx[j]
            active[row] = False
            end_step[row] = k
            reasons[row] = fail_reason
            Xn[j] = Xa[j]
        newX = X.copy()
        newX[idx] = Xn
        k += 1
        escaped_now = active & (np.linalg.norm(newX, axis=1) > limit)
        for row in np.flatnonzero(escaped_now):
            active[row] = False
            end_step[row] = k  # the exceeding state is recorded, then we stop
            reasons[row] = "escape guard"
        X = newX

    times = np.arange(steps + 1) * h
    out = []
    for b in range(B):
        e = end_step[b]
        out.append(Trajectory(
            times=times[:e + 1].copy(),
            states=states[:e + 1, b].copy(),
            controls=controls[:e + 1, b].copy(),
            v_trace=v_trace[:e + 1, b].copy(),
            norm_trace=np.linalg.norm(states[:e + 1, b], axis=1),
            escaped=bool(reasons[b]),
            reason=reasons[b],
        ))
    return out


def _rk4_masked(field, X, k1, h):
    """RK4 step reusing the already-evaluated first stage."""
    k2 = field(X + 0.5 * h * k1)
    k3 = field(X + 0.5 * h * k2)
    k4 = field(X + h * k3)
    return X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rollout_ensemble(models, starts, T=10.0, h=1e-3):
    """Learned-plant rollouts for M same-architecture models in one sweep.

    ``starts`` has shape (M, B, n): B starts per model.  All models must be
    general-mode with identical layer dims and hyperparameters; their
    stacked weights run through the same evaluation pipeline as single
    models (the numpy backend broadcasts over the leading model axis).
    Returns a list of B trajectories per model.
    """
    from .diffcore import NumpyOps

    starts = np.asarray(starts, dtype=np.float64)
    M, B, n = starts.shape
    if len(models) != M:
        raise ValueError("starts leading axis must match the number of models")
    template = models[0]
    for m in models:
        if m.mode != "general":
            raise ValueError("ensemble rollouts support general-mode models only")
        for name, net in m.nets.items():
            ref = template.nets[name]
            if net.dims != ref.dims or net.activations != ref.activations:
                raise ValueError("ensemble models must share architecture")
    if T <= 0 or h <= 0:
        raise ValueError("need T > 0 and h > 0")
    steps = int(round(T / h))
    limit = ESCAPE_FACTOR * _domain_diameter(template.hyper)

    handles = {
        name: [
            (np.stack([m.nets[name].weights[i] for m in models]),
             np.stack([m.nets[name].biases[i][None, :] for m in models]))
            for i in range(len(template.nets[name].weights))
        ]
        for name in template.nets
    }
    origin = {
        key: np.stack([m._origin_offsets()[key] for m in models])
        for key in template._origin_offsets()
    }

    def pieces_of(X):
        return template.build_graph(NumpyOps, handles, X, None, origin=origin)

    states = np.empty((steps + 1, M, B, n))
    controls = np.empty((steps + 1, M, B, template.m))
    v_trace = np.empty((steps + 1, M, B))
    end_step = np.full((M, B), steps, dtype=int)
    escaped = np.zeros((M, B), dtype=bool)

    X = starts.copy()
    for k in range(steps + 1):
        pieces = pieces_of(X)
        states[k] = X
        controls[k] = pieces["u_star"]
        v_trace[k] = pieces["v"][..., 0]
        if k == steps:
            break
        k1 = pieces["fstar_star"]
        k2 = pieces_of(X + 0.5 * h * k1)["fstar_star"]
        k3 = pieces_of(X + 0.5 * h * k2)["fstar_star"]
        k4 = pieces_of(X + h * k3)["fstar_star"]
        newX = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        frozen = end_step < steps
        bad = (~np.all(np.isfinite(newX), axis=2)) & ~frozen
        newX[bad | frozen] = X[bad | frozen]
        end_step[bad] = k
        out = (np.linalg.norm(newX, axis=2) > limit) & ~frozen & ~bad
        end_step[out] = k + 1  # record the exceeding state, then stop
        escaped |= bad | out
        X = newX

    times = np.arange(steps + 1) * h
    result = []
    for i in range(M):
        rows = []
        for b in range(B):
            e = end_step[i, b]
            rows.append(Trajectory(
                times=times[:e + 1].copy(),
                states=states[:e + 1, i, b].copy(),
                controls=controls[:e + 1, i, b].copy(),
                v_trace=v_trace[:e + 1, i, b].copy(),
                norm_trace=np.linalg.norm(states[:e + 1, i, b], axis=1),
                escaped=bool(escaped[i, b]),
                reason="escape guard" if escaped[i, b] else "",
            ))
        result.append(rows)
    return result


# ---------------------------------------------------------------------------
# Grid exports
# ---------------------------------------------------------------------------

FIELD_KINDS = ("fstar", "fhat", "true", "v", "gv")


@dataclass
class FieldGrid:
    """Values of a planar field or scalar on a regular node grid.

    ``values[i, j]`` belongs to the node (xs[i], ys[j]); vector fields carry
    a trailing component axis.
    """

    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray
    kind: str

    def to_csv(self, path, comment=None):
        cols = ["x1", "x2"]
        if self.values.ndim == 3:
            cols += [f"f{i + 1}" for i in range(self.values.shape[2])]
        else:
            cols += ["value"]
        rows = []
        for i, xv in enumerate(self.xs):
            for j, yv in enumerate(self.ys):
                v = self.values[i, j]
                rows.append([xv, yv] + (list(v) if self.values.ndim == 3 else [v]))
        header = ",".join(cols)
        if comment:
            header = comment.rstrip("\n") + "\n" + header
        np.savetxt(path, np.asarray(rows), fmt="%.17g", delimiter=",",
                   header=header, comments="")


def export_field(model, kind, resolution, system=None):
    """Evaluate a model/system quantity on the state box grid (planar only).

    Kinds: "fstar" and "fhat" are the projected/nominal closed-loop fields,
    "true" is the true plant under the learned controller (needs
    ``system``), "v" and "gv" are the Lyapunov value and its raw network.
    """
    if model.n != 2:
        raise DimensionError(f"grid export needs a planar state space, n={model.n}")
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    if kind not in FIELD_KINDS:
        raise ValueError(f"unknown field kind {kind!r}; choose from {FIELD_KINDS}")
    if kind == "true" and system is None:
        raise ValueError("kind 'true' requires the true system")
    hp = model.hyper
    xs = np.linspace(hp.x_lb[0], hp.x_ub[0], resolution)
    ys = np.linspace(hp.x_lb[1], hp.x_ub[1], resolution)
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    grid = np.column_stack((XX.ravel(), YY.ravel()))
    pieces = model.eval_pieces(grid)
    if kind == "fstar":
        vals = pieces["fstar_star"]
    elif kind == "fhat":
        vals = pieces["fhat_star"]
    elif kind == "true":
        vals = system.dynamics(grid, pieces["u_star"])
    elif kind == "v":
        vals = pieces["v"][:, 0]
    else:
        vals = (pieces["gv_x"] - pieces["gv_0"])[:, 0]
    shape = (resolution, resolution) + ((vals.shape[1],) if vals.ndim == 2 else ())
    return FieldGrid(xs, ys, vals.reshape(shape), kind)
