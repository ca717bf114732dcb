"""Identification: repeated measurements, weighted least squares, stepwise
reduction to the relevant parameters and the physical-feasibility gate.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .baseparams import BaseParameterSet, ObservationSystem, numeric_rank
from .closure import (
    ParallelRobotModel,
    closed_chain_rigid_regressor,
    complete_state,
    friction_columns,
    full_regressor_row_block,
    rotor_columns,
    solve_from_home,
)
from .errors import InvalidInput, NeverFeasible, NoConvergence, RankDeficient
from .excitation import FourierTrajectory, _basis, eval_trajectory
from .kinmodel import N_BODY_PARAMS, centroidal_inertia

log = logging.getLogger(__name__)

GRID_POINTS = 50
GRID_SPREAD = 0.8


# ---------------------------------------------------------------------------
# measurements

@dataclass
class MeasurementSet:
    """``M`` repetitions of one trajectory: ``q`` and ``tau`` are ``(M, n, dof)``."""

    time: np.ndarray
    q: np.ndarray
    tau: np.ndarray
    rate: float = 100.0
    joint_names: list[str] = field(default_factory=list)
    trajectory: dict | None = None

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float).ravel()
        self.q = np.asarray(self.q, dtype=float)
        self.tau = np.asarray(self.tau, dtype=float)
        if self.q.ndim != 3 or self.q.shape != self.tau.shape:
            raise InvalidInput("q and tau must both be (repetitions, samples, joints)")
        if self.q.shape[1] != self.time.size:
            raise InvalidInput("all repetitions must have one sample per time stamp")
        if self.q.shape[0] < 2:
            raise InvalidInput("at least two repetitions are needed")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.tau))):
            raise InvalidInput("non-finite measurement values")
        if not self.joint_names:
            self.joint_names = [f"j{k + 1}" for k in range(self.dof)]

    @property
    def repetitions(self) -> int:
        return self.q.shape[0]

    @property
    def n_samples(self) -> int:
        return self.q.shape[1]

    @property
    def dof(self) -> int:
        return self.q.shape[2]

    def mean_q(self) -> np.ndarray:
        return self.q.mean(axis=0)

    def mean_tau(self) -> np.ndarray:
        return self.tau.mean(axis=0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "rep"] + [f"q_{n}" for n in self.joint_names]
                       + [f"tau_{n}" for n in self.joint_names])
            for r in range(self.repetitions):
                for k in range(self.n_samples):
                    w.writerow([f"{self.time[k]:.17g}", r]
                               + [f"{v:.17g}" for v in self.q[r, k]]
                               + [f"{v:.17g}" for v in self.tau[r, k]])

    @classmethod
    def from_csv(cls, path, rate: float | None = None) -> "MeasurementSet":
        try:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise InvalidInput(f"cannot read measurements {path}: {exc}") from exc
        if not rows:
            raise InvalidInput(f"{path} is empty")
        head = rows[0]
        qcols = [i for i, h in enumerate(head) if h.startswith("q_")]
        tcols = [i for i, h in enumerate(head) if h.startswith("tau_")]
        if head[:2] != ["time", "rep"] or not qcols or len(qcols) != len(tcols):
            raise InvalidInput("measurement header must be time, rep, q_*, tau_*")
        try:
            data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        except ValueError as exc:
            raise InvalidInput(f"bad number in {path}: {exc}") from exc
        reps = np.unique(data[:, 1]).astype(int)
        blocks = [data[data[:, 1] == r] for r in reps]
        if len({b.shape[0] for b in blocks}) != 1:
            raise InvalidInput("repetitions have different lengths")
        time = blocks[0][:, 0]
        if rate is None:
            rate = 1.0 / np.median(np.diff(time)) if time.size > 1 else 1.0
        names = [head[i][2:] for i in qcols]
        return cls(time, np.stack([b[:, qcols] for b in blocks]),
                   np.stack([b[:, tcols] for b in blocks]), float(rate), names)


def estimate_variances(ms: MeasurementSet) -> np.ndarray:
    """Per-joint force variance from the spread of the repetitions about their mean."""
    if ms.repetitions < 2:
        raise InvalidInput("at least two repetitions are needed")
    shifted = ms.tau - ms.tau[0]
    dev = shifted - shifted.mean(axis=0)
    return np.einsum("rkj,rkj->j", dev, dev) / (ms.n_samples * (ms.repetitions - 1))


def fit_positions_to_fourier(time, q, f: float, n_harmonics: int):
    """Least-squares fit of sampled positions ``(n, dof)`` onto the Fourier basis.

    Returns the fitted trajectory and its ``(q, qd, qdd)`` at ``time``.
    """
    time = np.asarray(time, dtype=float)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if q.shape[0] != time.size:
        q = q.T
    dt = float(np.median(np.diff(time))) if time.size > 1 else 0.0
    covered = (time.max() - time.min() + dt) * f if time.size else 0.0
    if covered < 1.0 - 1e-9:
        raise InvalidInput("fit needs at least one period of data")
    (ps, pc), _, _ = _basis(f, n_harmonics, time)
    A = np.column_stack([np.ones(time.size), ps, pc])
    if numeric_rank(A)[0] < A.shape[1]:
        raise InvalidInput("Fourier basis is ill-conditioned for these samples")
    coef = np.linalg.lstsq(A, q, rcond=None)[0]
    nh = n_harmonics
    periods = max(1, int(round(covered)))
    traj = FourierTrajectory(coef[0], coef[1:1 + nh].T, coef[1 + nh:].T, f, periods / f)
    return (traj,) + eval_trajectory(traj, time)


def relative_error_metric(tau_meas, tau_pred):
    """``100 sum|e| / sum|tau|`` per joint, and its mean over joints."""
    tau_meas = np.atleast_2d(np.asarray(tau_meas, dtype=float))
    tau_pred = np.atleast_2d(np.asarray(tau_pred, dtype=float))
    if tau_meas.shape != tau_pred.shape:
        raise InvalidInput("measured and predicted forces differ in shape")
    den = np.abs(tau_meas).sum(axis=0)
    if np.any(den == 0):
        raise InvalidInput("a measured force signal is identically zero")
    per = 100.0 * np.abs(tau_meas - tau_pred).sum(axis=0) / den
    return per, float(per.mean())


# ---------------------------------------------------------------------------
# regressor along a trajectory

def trajectory_states(model: ParallelRobotModel, q_i, qd_i, qdd_i, branch=None):
    q, ok = solve_from_home(model, q_i, branch)
    if not ok.all():
        raise NoConvergence(f"closure fails at {int((~ok).sum())} samples")
    return complete_state(model, q, qd_i, qdd_i)


def identification_blocks(model: ParallelRobotModel, state, basis=None, asymmetric=False):
    """``(N, dof, p)`` identification regressor (rigid base | friction | rotor)."""
    return full_regressor_row_block(model, state, basis, asymmetric)


def true_forces(model: ParallelRobotModel, state, raw_phi=None, friction=None, rotor=None,
                asymmetric=False) -> np.ndarray:
    """Actuator forces from the complete raw parameter vector (no base reduction)."""
    raw_phi = model.nominal_raw() if raw_phi is None else np.asarray(raw_phi, dtype=float)
    tau = closed_chain_rigid_regressor(model, state) @ raw_phi
    if model.friction:
        fr = model.nominal_friction(asymmetric) if friction is None else friction
        tau = tau + friction_columns(model, state, asymmetric) @ fr
    if model.actuators:
        rt = model.nominal_rotor() if rotor is None else rotor
        tau = tau + rotor_columns(model, state) @ rt
    return tau


def simulate_measurements(model: ParallelRobotModel, traj: FourierTrajectory, repetitions=5,
                          noise=0.0, rng=None, rate=100.0, raw_phi=None, friction=None,
                          rotor=None, noise_kind="relative", branch=None):
    """Synthetic repetitions of ``traj``.

    ``noise_kind = "relative"`` multiplies each force sample by ``1 + noise * n``;
    ``"additive"`` adds ``noise`` times the joint's RMS force.
    Returns the measurement set and the completed states.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = int(round(traj.duration * rate))
    t = np.arange(n) / rate
    q_i, qd_i, qdd_i = eval_trajectory(traj, t)
    st = trajectory_states(model, q_i, qd_i, qdd_i, branch)
    tau = true_forces(model, st, raw_phi, friction, rotor)
    reps = []
    for _ in range(repetitions):
        e = rng.standard_normal(tau.shape)
        if noise_kind == "relative":
            reps.append(tau * (1.0 + noise * e))
        elif noise_kind == "additive":
            reps.append(tau + noise * np.sqrt(np.mean(tau ** 2, axis=0)) * e)
        else:
            raise InvalidInput(f"unknown noise kind {noise_kind!r}")
    names = [model.joint_names[i] for i in model.independent]
    ms = MeasurementSet(t, np.repeat(q_i[None], repetitions, axis=0), np.stack(reps), rate,
                        names, traj.to_dict())
    return ms, st


# ---------------------------------------------------------------------------
# weighted least squares

@dataclass
class WLSResult:
    phi: np.ndarray
    cov: np.ndarray
    s2: float
    residual: float
    rows: int
    cols: int


def _weights(obs: ObservationSystem, variances):
    v = np.asarray(variances, dtype=float).ravel()
    if v.size != obs.dof:
        raise InvalidInput("one variance per joint is required")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise InvalidInput("variances must be finite and non-negative")
    if np.any(v == 0):
        return np.ones(obs.W.shape[0])
    w = 1.0 / np.sqrt(v)
    if obs.layout == "joint-major":
        return np.repeat(w, obs.n_samples)
    return np.tile(w, obs.n_samples)


def wls_solve(obs: ObservationSystem, variances) -> WLSResult:
    """Weighted least squares through a QR factorization of the weighted matrix.

    Rows are scaled by ``1 / sigma_j`` of their joint; zero variances fall
    back to unit weights.  ``s2 = |r|^2 / (rows - cols)``, ``C = s2 (R^T R)^-1``.
    """
    if obs.Y is None:
        raise InvalidInput("observation system has no forces")
    w = _weights(obs, variances)
    Ww = obs.W * w[:, None]
    yw = obs.Y * w
    r, c = Ww.shape
    if r <= c:
        raise RankDeficient(f"{r} rows for {c} parameters")
    Q, R = np.linalg.qr(Ww)
    rank = numeric_rank(R)[0]
    if rank < c:
        raise RankDeficient(f"weighted observation matrix has rank {rank} < {c}")
    phi = solve_triangular(R, Q.T @ yw)
    res = float(np.sum((yw - Ww @ phi) ** 2))
    s2 = res / (r - c)
    Rinv = solve_triangular(R, np.eye(c))
    cov = s2 * (Rinv @ Rinv.T)
    return WLSResult(phi, cov, s2, res, r, c)


def relative_std(phi, cov) -> np.ndarray:
    """``100 sqrt(C_ii) / |phi_i|`` in percent; infinite where ``phi_i == 0``."""
    phi = np.asarray(phi, dtype=float)
    sd = np.sqrt(np.clip(np.diag(np.atleast_2d(cov)), 0.0, None))
    out = np.full(phi.shape, np.inf)
    nz = phi != 0
    out[nz] = 100.0 * sd[nz] / np.abs(phi[nz])
    out[~nz & (sd == 0)] = np.inf
    return out


# ---------------------------------------------------------------------------
# physical feasibility

@dataclass
class FeasibilityProblem:
    """Grid search over the free (dropped) merged parameters named in ``grid``.

    The other dropped parameters are held at ``nominal``.  A rigid base
    parameter eliminated from the model no longer determines its kept link
    parameter, which is then assigned its nominal value like the rest of
    ``Phi_2``.  Non-rigid labels starting with one of ``positive_prefixes``
    must stay strictly positive.
    """

    model: ParallelRobotModel
    base_set: BaseParameterSet
    nominal: np.ndarray
    grid: tuple[str, ...]
    lb: np.ndarray
    ub: np.ndarray
    n_points: int = GRID_POINTS
    positive_prefixes: tuple[str, ...] = ("Fv", "Fc", "Jr")

    def __post_init__(self):
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        self.nominal = np.asarray(self.nominal, dtype=float)
        if self.n_points < 2:
            raise InvalidInput("at least two grid points per axis are needed")
        if self.lb.shape != (len(self.grid),) or np.any(self.lb >= self.ub):
            raise InvalidInput("grid bounds must satisfy lb < ub")
        labels = self.base_set.column_labels
        for g in self.grid:
            if g not in labels or labels.index(g) not in self.base_set.dropped:
                raise InvalidInput(f"grid parameter {g!r} is not a dropped column of the base set")

    @classmethod
    def from_model(cls, model: ParallelRobotModel, base_set: BaseParameterSet,
                   grid=None, n_points=GRID_POINTS, spread=GRID_SPREAD):
        lay = model.layout()
        nominal = lay.merge_values(model.nominal_raw())
        grid = tuple(grid or model.grid_params)
        centre = np.array([nominal[lay.index(g)] for g in grid])
        return cls(model, base_set, nominal, grid, (1 - spread) * centre, (1 + spread) * centre,
                   n_points)

    def axes(self):
        return [np.linspace(lo, hi, self.n_points) for lo, hi in zip(self.lb, self.ub)]

    def cell(self) -> np.ndarray:
        return (self.ub - self.lb) / (self.n_points - 1)

    def grid_points(self) -> np.ndarray:
        """All grid points, nearest to the nominal values first (stable order)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        labels = self.base_set.column_labels
        centre = np.array([self.nominal[labels.index(g)] for g in self.grid])
        d = np.sum(((pts - centre) / self.cell()) ** 2, axis=1)
        return pts[np.argsort(d, kind="stable")]

    def reconstruct(self, phi_base, points, identified=None) -> np.ndarray:
        """Raw link parameters ``(G, 10 n_bodies)`` for each grid point.

        ``identified`` flags the entries of ``phi_base`` that were estimated;
        the others are replaced by their nominal link value.
        """
        bs = self.base_set
        labels = bs.column_labels
        phi2 = np.tile(self.nominal[bs.dropped], (points.shape[0], 1))
        for k, g in enumerate(self.grid):
            phi2[:, bs.dropped.index(labels.index(g))] = points[:, k]
        merged = np.zeros((points.shape[0], len(labels)))
        merged[:, bs.dropped] = phi2
        merged[:, bs.kept] = np.asarray(phi_base, dtype=float) - phi2 @ bs.B.T
        if identified is not None:
            free = [k for k, ok in zip(bs.kept, identified) if not ok]
            merged[:, free] = self.nominal[free]
        return merged @ self.model.layout().matrix.T


def link_feasible(raw_phi, strict: float = 0.0) -> np.ndarray:
    """Per row: every body has ``m > 0`` and a positive definite centroidal inertia."""
    raw_phi = np.atleast_2d(raw_phi)
    G = raw_phi.shape[0]
    bodies = raw_phi.reshape(G, -1, N_BODY_PARAMS)
    m = bodies[..., 6]
    ok = np.all(m > strict, axis=1)
    safe = np.where(m > 0, m, 1.0)
    b2 = bodies.copy()
    b2[..., 6] = safe
    eig = np.linalg.eigvalsh(centroidal_inertia(b2))
    return ok & np.all(eig > strict, axis=(1, 2))


def check_feasibility(prob: FeasibilityProblem, phi_base, extras=None, identified=None):
    """First grid point (nearest nominal first) with a physically feasible model.

    ``phi_base`` holds the rigid base values in base-set order (zero for
    eliminated ones); ``extras`` maps other kept labels to their values and
    each with a prefix in ``positive_prefixes`` must be positive;
    ``identified`` marks which rigid entries were estimated.  Returns
    ``(flag, witness)`` with witness ``{"grid": {...}, "raw": [...]}`` or None.
    """
    for lab, v in (extras or {}).items():
        if lab.startswith(prob.positive_prefixes) and not v > 0:
            return False, None
    pts = prob.grid_points()
    raw = prob.reconstruct(phi_base, pts, identified)
    ok = link_feasible(raw)
    if not ok.any():
        return False, None
    k = int(np.argmax(ok))
    return True, {"grid": dict(zip(prob.grid, map(float, pts[k]))), "raw": raw[k].tolist()}


# ---------------------------------------------------------------------------
# stepwise reduction

@dataclass
class IdentifiedModel:
    labels: list[str]
    values: np.ndarray
    rel_std: np.ndarray
    cov: np.ndarray
    eliminated: list[tuple[str, float]]
    witness: dict | None
    trace: list[dict]
    s2: float

    def as_dict(self) -> dict:
        return {
            "parameters": [{"label": lab, "value": float(v), "rel_std": _num(s)}
                           for lab, v, s in zip(self.labels, self.values, self.rel_std)],
            "eliminated": [{"label": lab, "rel_std": _num(s)} for lab, s in self.eliminated],
            "feasibility_witness": self.witness,
            "trace": self.trace,
            "s2": self.s2,
        }

    def predict(self, obs: ObservationSystem) -> np.ndarray:
        cols = [obs.labels.index(lab) for lab in self.labels]
        return obs.W[:, cols] @ self.values


def _num(x):
    return float(x) if np.isfinite(x) else "inf"


def _split(labels, values, rigid_labels):
    pos = {lab: k for k, lab in enumerate(rigid_labels)}
    phi_base = np.zeros(len(rigid_labels))
    identified = np.zeros(len(rigid_labels), dtype=bool)
    extras = {}
    for lab, v in zip(labels, values):
        if lab in pos:
            phi_base[pos[lab]] = v
            identified[pos[lab]] = True
        else:
            extras[lab] = float(v)
    return phi_base, extras, identified


def stepwise_reduce(obs: ObservationSystem, variances, feasibility,
                    rigid_labels=None, check_extras: bool = True) -> IdentifiedModel:
    """Drop the parameter with the largest relative standard deviation until the
    estimate passes the feasibility gate.

    ``rigid_labels`` are the rigid base columns in base-set order (default:
    the kept labels of ``feasibility.base_set``, or every column).  With ``feasibility=None``
    the first estimate is returned; a callable ``feasibility(labels, values)``
    returning ``(flag, witness)`` replaces the grid test.  Ties go to the
    lowest column index.
    """
    labels = list(obs.labels)
    if not labels:
        raise InvalidInput("observation columns need labels")
    if rigid_labels is None:
        rigid_labels = (feasibility.base_set.kept_labels
                        if isinstance(feasibility, FeasibilityProblem) else labels)
    rigid_labels = list(rigid_labels)
    cols = list(range(len(labels)))
    eliminated, trace = [], []
    while True:
        sub = obs.select(cols)
        res = wls_solve(sub, variances)
        rs = relative_std(res.phi, res.cov)
        cur = [labels[c] for c in cols]
        flag, witness = True, None
        if callable(feasibility):
            flag, witness = feasibility(cur, res.phi)
        elif feasibility is not None:
            phi_base, extras, known = _split(cur, res.phi, feasibility.base_set.kept_labels)
            flag, witness = check_feasibility(feasibility, phi_base,
                                              extras if check_extras else None, known)
        trace.append({"n_params": len(cols), "s2": res.s2, "residual": res.residual,
                      "max_rel_std": _num(rs.max()), "feasible": bool(flag)})
        log.info("%d parameters, feasible=%s", len(cols), flag)
        if flag:
            return IdentifiedModel(cur, res.phi, rs, res.cov, eliminated, witness, trace, res.s2)
        k = int(np.argmax(rs))
        eliminated.append((cur[k], float(rs[k])))
        del cols[k]
        if not any(labels[c] in rigid_labels for c in cols) or not cols:
            raise NeverFeasible("all rigid-body parameters eliminated without a feasible model",
                                trace)


def observation_from_measurements(model: ParallelRobotModel, ms: MeasurementSet, basis=None,
                                  rigid_labels=None, asymmetric=False, fit=True):
    """Observation system of a measurement set's mean forces.

    Positions are smoothed by the trajectory's Fourier basis when the set
    carries its trajectory (and ``fit``), else differentiated numerically.
    """
    q = ms.mean_q()
    if fit and ms.trajectory:
        f = float(ms.trajectory.get("f", 0.125))
        nh = int(ms.trajectory.get("n_H", 5))
        _, q, qd, qdd = fit_positions_to_fourier(ms.time, q, f, nh)
    else:
        dt = 1.0 / ms.rate
        qd = np.gradient(q, dt, axis=0)
        qdd = np.gradient(qd, dt, axis=0)
    st = trajectory_states(model, q, qd, qdd)
    if basis is None:
        basis, rigid_labels = model.rigid_basis()
    K = identification_blocks(model, st, basis, asymmetric)
    labels = list(rigid_labels) + model.friction_labels(asymmetric) + model.rotor_labels()
    return ObservationSystem.from_blocks(K, ms.mean_tau(), labels)


def predict_forces(obs: ObservationSystem, labels, values) -> np.ndarray:
    """``(samples, dof)`` forces of a parameter subset on ``obs``."""
    cols = [obs.labels.index(lab) for lab in labels]
    y = obs.W[:, cols] @ np.asarray(values, dtype=float)
    return y.reshape(obs.dof, -1).T


def identify_measurements(model: ParallelRobotModel, ms: MeasurementSet, base_set=None,
                          basis=None, rigid_labels=None, asymmetric=False, fit=True,
                          feasibility=True, grid_points=GRID_POINTS) -> tuple:
    """Full pipeline on a measurement set: smoothing, regressor, reduction.

    Returns ``(IdentifiedModel, ObservationSystem)``.
    """
    if basis is None:
        basis, rigid_labels = model.rigid_basis()
    obs = observation_from_measurements(model, ms, basis, rigid_labels, asymmetric, fit)
    var = estimate_variances(ms) / ms.repetitions
    feas = None
    if feasibility and base_set is not None and model.grid_params:
        feas = FeasibilityProblem.from_model(model, base_set, n_points=grid_points)
    return stepwise_reduce(obs, var, feas, rigid_labels), obs
