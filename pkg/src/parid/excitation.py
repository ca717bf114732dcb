"""Excitation trajectories: finite Fourier series in the actuated joints and
their optimization for a well-conditioned observation matrix.

Each actuated coordinate follows

    q(t) = q0 + sum_j [ a_j / (w j) sin(w j t) - b_j / (w j) cos(w j t) ],  w = 2 pi f

so velocity and acceleration are linear in the coefficients too.  Joint
position/velocity/acceleration limits of the actuators are therefore linear
constraints on ``delta = [q0, a, b]``; passive-joint limits and the distance
from singularities are nonlinear ones, evaluated on a time grid.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .closure import (
    ParallelRobotModel,
    complete_state,
    full_regressor_row_block,
    newton_closure,
    solve_from_home,
)
from .errors import InfeasibleSample, InvalidInput, NoFeasiblePoint, SingularConfiguration

log = logging.getLogger(__name__)

N_HARMONICS = 5
BASE_FREQUENCY = 0.125
DURATION = 8.0
SAMPLE_RATE = 100.0
GRID_OPT = 64
GRID_VERIFY = 256
KAPPA_CAP = 1e16


@dataclass
class FourierTrajectory:
    q0: np.ndarray
    a: np.ndarray
    b: np.ndarray
    f: float = BASE_FREQUENCY
    duration: float = DURATION
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.q0 = np.asarray(self.q0, dtype=float).ravel()
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.b = np.atleast_2d(np.asarray(self.b, dtype=float))
        n = self.q0.size
        if self.a.shape != self.b.shape or self.a.shape[0] != n:
            raise InvalidInput("coefficient arrays must be (n_actuators, n_harmonics)")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))
                and np.all(np.isfinite(self.q0))):
            raise InvalidInput("non-finite Fourier coefficients")
        if not self.f > 0 or not self.duration > 0:
            raise InvalidInput("frequency and duration must be positive")
        periods = self.duration * self.f
        if abs(periods - round(periods)) > 1e-9 or round(periods) < 1:
            raise InvalidInput("duration must be a whole number of periods")

    @property
    def n_joints(self) -> int:
        return self.q0.size

    @property
    def n_harmonics(self) -> int:
        return self.a.shape[1]

    @property
    def period(self) -> float:
        return 1.0 / self.f

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q0, self.a.ravel(), self.b.ravel()])

    @classmethod
    def from_vector(cls, delta, n_joints, n_harmonics, f=BASE_FREQUENCY, duration=DURATION,
                    meta=None):
        delta = np.asarray(delta, dtype=float)
        k = n_joints * n_harmonics
        return cls(delta[:n_joints], delta[n_joints:n_joints + k].reshape(n_joints, n_harmonics),
                   delta[n_joints + k:].reshape(n_joints, n_harmonics), f, duration,
                   dict(meta or {}))

    @classmethod
    def zero(cls, q0, n_harmonics=N_HARMONICS, f=BASE_FREQUENCY, duration=DURATION):
        q0 = np.asarray(q0, dtype=float)
        z = np.zeros((q0.size, n_harmonics))
        return cls(q0, z, z.copy(), f, duration)

    def scaled(self, s: float) -> "FourierTrajectory":
        return FourierTrajectory(self.q0, s * self.a, s * self.b, self.f, self.duration,
                                 dict(self.meta))

    def to_dict(self) -> dict:
        return {"q0": self.q0.tolist(), "a": self.a.tolist(), "b": self.b.tolist(),
                "f": self.f, "n_H": self.n_harmonics, "duration": self.duration, **self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "FourierTrajectory":
        try:
            meta = {k: v for k, v in d.items() if k not in ("q0", "a", "b", "f", "n_H", "duration")}
            return cls(d["q0"], d["a"], d["b"], float(d.get("f", BASE_FREQUENCY)),
                       float(d.get("duration", DURATION)), meta)
        except KeyError as exc:
            raise InvalidInput(f"trajectory is missing field {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "FourierTrajectory":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInput(f"cannot read trajectory {path}: {exc}") from exc


def _basis(f, n_h, t):
    """Per-time basis rows: q = q0 + Sa a - Cb b etc.  Shapes (T, n_H)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    j = np.arange(1, n_h + 1)
    wj = 2 * np.pi * f * j
    arg = np.outer(t, wj)
    s, c = np.sin(arg), np.cos(arg)
    return (s / wj, -c / wj), (c, s), (-wj * s, wj * c)


def eval_trajectory(traj: FourierTrajectory, t):
    """Positions, velocities and accelerations at times ``t`` (each ``(T, n)``)."""
    (ps, pc), (vs, vc), (as_, ac) = _basis(traj.f, traj.n_harmonics, t)
    q = traj.q0 + ps @ traj.a.T + pc @ traj.b.T
    qd = vs @ traj.a.T + vc @ traj.b.T
    qdd = as_ @ traj.a.T + ac @ traj.b.T
    return q, qd, qdd


def linear_maps(n_joints: int, n_harmonics: int, f: float, t):
    """Matrices ``P``, ``V``, ``A`` of shape ``(T, n, n_delta)`` with
    ``q(t_k) = P[k] @ delta`` (likewise velocity / acceleration)."""
    (ps, pc), (vs, vc), (as_, ac) = _basis(f, n_harmonics, t)
    T = ps.shape[0]
    nd = n_joints * (1 + 2 * n_harmonics)
    out = []
    for s_, c_, const in ((ps, pc, 1.0), (vs, vc, 0.0), (as_, ac, 0.0)):
        M = np.zeros((T, n_joints, nd))
        for i in range(n_joints):
            M[:, i, i] = const
            ia = n_joints + i * n_harmonics
            ib = n_joints + n_joints * n_harmonics + i * n_harmonics
            M[:, i, ia:ia + n_harmonics] = s_
            M[:, i, ib:ib + n_harmonics] = c_
        out.append(M)
    return tuple(out)


def sample_times(traj: FourierTrajectory, per_period: int) -> np.ndarray:
    n = int(round(per_period * traj.duration * traj.f))
    return np.arange(n) * (traj.duration / n)


@dataclass
class TrajectoryConstraints:
    q_min: np.ndarray
    q_max: np.ndarray
    qd_max: np.ndarray
    qdd_max: np.ndarray
    dep_margin: float = 0.05
    cond_max: float = 1e3

    def __post_init__(self):
        for name in ("q_min", "q_max", "qd_max", "qdd_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.q_min >= self.q_max):
            raise InvalidInput("q_min must be below q_max")
        if np.any(self.qd_max <= 0) or np.any(self.qdd_max <= 0):
            raise InvalidInput("rate limits must be positive")
        if not (self.dep_margin >= 0 and self.cond_max > 1):
            raise InvalidInput("margins must be positive")

    @classmethod
    def from_model(cls, model: ParallelRobotModel, dep_margin=0.05, cond_max=1e3):
        ind = list(model.independent)
        return cls(model.q_min[ind], model.q_max[ind], model.qd_max[ind], model.qdd_max[ind],
                   dep_margin, cond_max)

    def tightened(self, frac: float) -> "TrajectoryConstraints":
        """Limits pulled in by ``frac`` of their range, to absorb inter-sample excursions."""
        span = self.q_max - self.q_min
        return TrajectoryConstraints(self.q_min + frac * span, self.q_max - frac * span,
                                     (1 - frac) * self.qd_max, (1 - frac) * self.qdd_max,
                                     self.dep_margin * (1 + frac) + frac * 0.1,
                                     self.cond_max * (1 - frac))

    def linear_system(self, n_harmonics, f, t):
        """``G delta <= h`` for the actuated position / rate limits at times ``t``."""
        P, V, A = linear_maps(self.q_min.size, n_harmonics, f, t)
        rows, rhs = [], []
        for M, lo, hi in ((P, self.q_min, self.q_max), (V, -self.qd_max, self.qd_max),
                          (A, -self.qdd_max, self.qdd_max)):
            flat = M.reshape(-1, M.shape[-1])
            rows += [flat, -flat]
            rhs += [np.tile(hi, M.shape[0]), -np.tile(lo, M.shape[0])]
        return np.vstack(rows), np.concatenate(rhs)


class ExcitationProblem:
    """Objective and constraints of one trajectory design, with closure caching.

    The passive coordinates at the grid points are solved from home once,
    then re-seeded from the closest previous solution so the finite-difference
    probes of the optimizer cost one or two Newton steps.
    """

    def __init__(self, model: ParallelRobotModel, basis, constraints: TrajectoryConstraints,
                 n_harmonics=N_HARMONICS, f=BASE_FREQUENCY, duration=DURATION,
                 per_period=GRID_OPT, asymmetric=False, branch=None, rigid_only=True,
                 shrink=0.04):
        self.model = model
        self.rigid_only = rigid_only
        self.basis = basis
        self.cons = constraints
        self.n_h = n_harmonics
        self.f = f
        self.duration = duration
        self.asymmetric = asymmetric
        self.branch = branch
        n = int(round(per_period * duration * f))
        self.t = np.arange(n) * (duration / n)
        self.G, self.h = constraints.tightened(shrink).linear_system(n_harmonics, f, self.t)
        self._P, self._V, self._A = linear_maps(model.dof, n_harmonics, f, self.t)
        self._seed = None
        self._cache = {}
        self.n_evals = 0

    def trajectory(self, delta, meta=None) -> FourierTrajectory:
        return FourierTrajectory.from_vector(delta, self.model.dof, self.n_h, self.f,
                                             self.duration, meta)

    def _evaluate(self, delta):
        key = np.asarray(delta, dtype=float).tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        self.n_evals += 1
        m = self.model
        dep = list(m.dependent)
        q_i = self._P @ delta
        qd_i = self._V @ delta
        qdd_i = self._A @ delta
        if self._seed is not None:
            q, ok = newton_closure(m, q_i, self._seed)
        else:
            q, ok = solve_from_home(m, q_i, self.branch)
        result = {"ok": bool(ok.all()), "kappa": KAPPA_CAP, "dep": None, "cond": np.inf}
        if result["ok"]:
            from .closure import partition_jacobian
            part = partition_jacobian(m, q, cond_limit=np.inf)
            result["cond"] = float(part.cond.max())
            result["dep"] = q[:, dep]
            if result["cond"] <= self.cons.cond_max:
                self._seed = q[:, dep]
                st = complete_state(m, q, qd_i, qdd_i, cond_limit=np.inf)
                K = _objective_rows(m, st, self.basis, self.asymmetric, self.rigid_only)
                result["kappa"] = kappa(K.reshape(-1, K.shape[-1]))
        if len(self._cache) > 256:
            self._cache.clear()
        self._cache[key] = result
        return result

    def objective(self, delta) -> float:
        return float(np.log10(self._evaluate(delta)["kappa"]))

    def nonlinear_slack(self, delta) -> np.ndarray:
        """Nonnegative when passive joints keep their margin and cond(A_d) is acceptable."""
        res = self._evaluate(delta)
        m = self.model
        dep = list(m.dependent)
        n_out = 2 * len(dep) + 1
        if not res["ok"]:
            return -np.ones(n_out)
        lo = np.where(np.isfinite(m.q_min[dep]), m.q_min[dep], -1e3) + self.cons.dep_margin
        hi = np.where(np.isfinite(m.q_max[dep]), m.q_max[dep], 1e3) - self.cons.dep_margin
        qd = res["dep"]
        slack = np.concatenate([qd.min(axis=0) - lo, hi - qd.max(axis=0)])
        cond_slack = np.log10(self.cons.cond_max) - np.log10(res["cond"])
        return np.concatenate([slack, [cond_slack]])

    def linear_slack(self, delta) -> np.ndarray:
        return self.h - self.G @ delta

    def feasible(self, delta, tol=1e-9) -> bool:
        if np.any(self.linear_slack(delta) < -tol * (1 + np.abs(self.h))):
            return False
        return bool(np.all(self.nonlinear_slack(delta) >= -tol))


def _objective_rows(model, state, basis, asymmetric, rigid_only):
    if rigid_only:
        from .closure import closed_chain_rigid_regressor
        if basis is None:
            basis = model.rigid_basis()[0]
        return closed_chain_rigid_regressor(model, state, basis=basis)
    return full_regressor_row_block(model, state, basis, asymmetric)


def kappa(W) -> float:
    """Condition number ``s_max / s_min`` capped at 1e16."""
    W = np.asarray(W, dtype=float)
    s = np.linalg.svd(W, compute_uv=False)
    if s.size == 0 or s[-1] <= max(W.shape) * s[0] * np.finfo(float).eps:
        return KAPPA_CAP
    return float(min(s[0] / s[-1], KAPPA_CAP))


def objective_kappa(model: ParallelRobotModel, basis, traj: FourierTrajectory,
                    n_samples: int = GRID_OPT, asymmetric: bool = False, branch=None,
                    rigid_only: bool = True) -> float:
    """Condition number of the identification matrix along ``traj``.

    Raises :class:`InfeasibleSample` if the closure cannot be solved at a sample
    or a sample is singular.
    """
    t = np.arange(n_samples) * (traj.duration / n_samples)
    q_i, qd_i, qdd_i = eval_trajectory(traj, t)
    q, ok = solve_from_home(model, q_i, branch)
    if not ok.all():
        raise InfeasibleSample(f"closure fails at t = {t[np.argmin(ok)]:.4g} s")
    try:
        st = complete_state(model, q, qd_i, qdd_i)
    except SingularConfiguration as exc:
        raise InfeasibleSample(str(exc)) from exc
    K = _objective_rows(model, st, basis, asymmetric, rigid_only)
    return kappa(K.reshape(-1, K.shape[-1]))


def _repair(problem: ExcitationProblem, delta, n_q0, check=None):
    """Shrink the harmonic amplitudes until the point is feasible."""
    check = check or problem.feasible
    d = np.array(delta, dtype=float)
    for _ in range(40):
        if problem.feasible(d) and check(d):
            return d
        d[n_q0:] *= 0.8
    d[n_q0:] = 0.0
    return d if problem.feasible(d) and check(d) else None


def random_initial(problem: ExcitationProblem, rng, q0=None, amplitude=0.5):
    """Random coefficients with harmonic weights decaying as 1/j."""
    n, nh = problem.model.dof, problem.n_h
    c = problem.cons
    q0 = 0.5 * (c.q_min + c.q_max) if q0 is None else np.asarray(q0, dtype=float)
    scale = amplitude * np.minimum(c.qd_max, 0.5 * (c.q_max - c.q_min) * 2 * np.pi * problem.f)
    w = 1.0 / np.arange(1, nh + 1)
    a = rng.standard_normal((n, nh)) * w * scale[:, None] / np.sqrt(nh)
    b = rng.standard_normal((n, nh)) * w * scale[:, None] / np.sqrt(nh)
    return np.concatenate([q0, a.ravel(), b.ravel()])


@dataclass
class OptimizationResult:
    trajectory: FourierTrajectory
    kappa: float
    kappa_init: float
    history: list
    n_evals: int


def optimize_trajectory(model: ParallelRobotModel, basis, constraints: TrajectoryConstraints,
                        init: FourierTrajectory, budget: int = 30, n_starts: int = 1,
                        rng=None, per_period: int = GRID_OPT, asymmetric: bool = False,
                        branch=None, rigid_only: bool = True) -> OptimizationResult:
    """Constrained minimization of log10 kappa by SLSQP with best-so-far bookkeeping.

    ``budget`` is the SLSQP iteration limit per start; ``n_starts - 1`` random
    starts are added to ``init``.  An infeasible ``init`` is repaired by
    scaling its harmonics down; :class:`NoFeasiblePoint` is raised if even
    the zero-amplitude trajectory violates the constraints.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    prob = ExcitationProblem(model, basis, constraints, init.n_harmonics, init.f,
                             init.duration, per_period, asymmetric, branch, rigid_only)
    n = model.dof
    zero = np.concatenate([init.q0, np.zeros(2 * n * init.n_harmonics)])
    if not prob.feasible(zero):
        raise NoFeasiblePoint("even the zero-amplitude trajectory violates the constraints")

    def dense_ok(delta):
        return verify_trajectory(model, prob.trajectory(delta), constraints, 4 * per_period,
                                 branch)["ok"]

    d0 = _repair(prob, init.as_vector(), n, dense_ok)
    best = {"delta": d0, "kappa": 10 ** prob.objective(d0)}
    kappa_init = best["kappa"]
    history = [kappa_init]

    def track(delta):
        delta = np.asarray(delta, dtype=float)
        k = 10 ** prob.objective(delta)
        if k < best["kappa"] and prob.feasible(delta, tol=1e-7):
            best["delta"], best["kappa"] = delta.copy(), k
            history.append(k)

    if budget > 0:
        starts = [d0]
        for _ in range(max(n_starts - 1, 0)):
            d = _repair(prob, random_initial(prob, rng, init.q0), n)
            if d is not None:
                starts.append(d)
        cons = [
            {"type": "ineq", "fun": prob.linear_slack, "jac": lambda d: -prob.G},
            {"type": "ineq", "fun": prob.nonlinear_slack},
        ]
        for s in starts:
            track(s)
            prob._seed = None
            try:
                minimize(prob.objective, s, method="SLSQP", constraints=cons, callback=track,
                         options={"maxiter": budget, "ftol": 1e-6, "eps": 1e-6})
            except (ValueError, np.linalg.LinAlgError) as exc:  # pragma: no cover
                log.warning("SLSQP start aborted: %s", exc)
    # the dense grid can catch excursions between optimization samples
    delta = best["delta"]
    for _ in range(60):
        if dense_ok(delta):
            break
        delta = delta.copy()
        delta[n:] *= 0.97
    else:
        delta = d0
    if delta is not best["delta"]:
        best["delta"], best["kappa"] = delta, 10 ** prob.objective(delta)
        if best["kappa"] > kappa_init:
            best["delta"], best["kappa"] = d0, kappa_init
    meta = {"kappa": best["kappa"], "kappa_init": kappa_init, "budget": budget,
            "n_starts": n_starts, "grid_per_period": per_period}
    traj = prob.trajectory(best["delta"], meta)
    return OptimizationResult(traj, best["kappa"], kappa_init, history, prob.n_evals)


def verify_trajectory(model: ParallelRobotModel, traj: FourierTrajectory,
                      constraints: TrajectoryConstraints, per_period: int = GRID_VERIFY,
                      branch=None, tol: float = 1e-7) -> dict:
    """Check every constraint on a dense grid; returns slack summary and ``ok``."""
    t = sample_times(traj, per_period)
    q_i, qd_i, qdd_i = eval_trajectory(traj, t)
    c = constraints
    lin = min(np.min(q_i - c.q_min), np.min(c.q_max - q_i), np.min(c.qd_max - np.abs(qd_i)),
              np.min(c.qdd_max - np.abs(qdd_i)))
    q, ok = solve_from_home(model, q_i, branch)
    out = {"linear_slack": float(lin), "closure_ok": bool(ok.all())}
    if ok.all():
        from .closure import partition_jacobian
        dep = list(model.dependent)
        qd = q[:, dep]
        lo = model.q_min[dep] + c.dep_margin
        hi = model.q_max[dep] - c.dep_margin
        out["dependent_slack"] = float(min(np.min(qd - lo), np.min(hi - qd)))
        out["max_cond"] = float(partition_jacobian(model, q, cond_limit=np.inf).cond.max())
        out["ok"] = bool(lin >= -tol and out["dependent_slack"] >= -tol
                         and out["max_cond"] <= c.cond_max * (1 + tol))
    else:
        out["ok"] = False
    return out
