"""Forward dynamics of the closed chain from an identified parameter set.

The actuated accelerations follow from

    (M + Jm) qdd_i = tau - C - G - F

where ``M``, ``C`` and ``G`` are extracted by evaluating the projected
regressor with selected inputs zeroed (unit accelerations for the columns of
``M``, velocities only for ``C``, gravity only for ``G``).  Integration runs
an adaptive Runge-Kutta 4(5) over the actuated coordinates; passive
coordinates are re-solved from the closure equations at every evaluation,
seeded from the last accepted step.  Coulomb friction on the actuators
switches between slip and stick at velocity zero crossings.
"""

from __future__ import annotations

import csv
import logging
import time as _time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import RK45
from scipy.linalg import cho_factor, cho_solve

from .closure import (
    ParallelRobotModel,
    _velocity_product,
    closed_chain_rigid_regressor,
    complete_state,
    constraint_residual,
    newton_closure,
    partition_jacobian,
    probe_regressor,
    project_rows,
    solve_from_home,
)
from .errors import InvalidInput, NoConvergence, SingularConfiguration, SingularMass, StepFailure

log = logging.getLogger(__name__)

STICK_VELOCITY = 1e-6
EVENT_TOL = 1e-12
BREAKAWAY_PROBE = 1e-9


@dataclass
class DynamicParameters:
    """Parameters driving the forward model.

    ``basis`` maps the identification columns to raw link parameters so that
    the rigid forces are ``K_raw @ basis @ phi``; friction arrays are per
    coordinate (zero where a joint has none); ``jm`` is per actuator.
    """

    basis: np.ndarray
    phi: np.ndarray
    fv_pos: np.ndarray
    fv_neg: np.ndarray
    fc_pos: np.ndarray
    fc_neg: np.ndarray
    jm: np.ndarray
    labels: list[str] = field(default_factory=list)

    @property
    def raw(self) -> np.ndarray:
        return self.basis @ self.phi

    @classmethod
    def nominal(cls, model: ParallelRobotModel, friction: bool = True, rotor: bool = True):
        """Complete model: every raw link parameter plus nominal friction / rotor."""
        n = model.n_coords
        arr = {k: np.zeros(n) for k in ("fv_pos", "fv_neg", "fc_pos", "fc_neg")}
        if friction:
            for c, fp in model.friction:
                arr["fv_pos"][c], arr["fv_neg"][c] = fp.fv_pos, fp.fv_neg
                arr["fc_pos"][c], arr["fc_neg"][c] = fp.fc_pos, fp.fc_neg
        jm = np.zeros(model.dof)
        if rotor:
            ind = list(model.independent)
            for c, rp in model.actuators:
                jm[ind.index(c)] = rp.j_effective
        raw = model.nominal_raw()
        return cls(np.eye(raw.size), raw, jm=jm, labels=list(model.raw_labels), **arr)

    @classmethod
    def from_labels(cls, model: ParallelRobotModel, labels, values, raw=None):
        """From identified labels: merged rigid columns, ``Fv_*``/``Fc_*`` (or the
        ``+``/``-`` variants) and ``Jr_*``.

        ``raw`` (full raw link parameters, e.g. a feasibility witness) replaces
        the rigid columns.  A witness reproduces every identified rigid value
        and fills the eliminated ones physically, so ``M + Jm`` stays positive
        definite where zeros in their place would not guarantee it.
        """
        lay = model.layout()
        mat = lay.matrix
        names = {n: k for k, n in enumerate(model.joint_names)}
        ind = list(model.independent)
        n = model.n_coords
        fr = {k: np.zeros(n) for k in ("fv_pos", "fv_neg", "fc_pos", "fc_neg")}
        jm = np.zeros(model.dof)
        cols, phi = [], []
        for lab, v in zip(labels, values):
            v = float(v)
            head, _, joint = lab.partition("_")
            if lab in lay.labels:
                cols.append(mat[:, lay.index(lab)])
                phi.append(v)
            elif joint in names and head in ("Fv", "Fc", "Fv+", "Fv-", "Fc+", "Fc-"):
                c = names[joint]
                kind = "fv" if head.startswith("Fv") else "fc"
                if head[-1] in "+-":
                    fr[f"{kind}_{'pos' if head[-1] == '+' else 'neg'}"][c] = v
                else:
                    fr[f"{kind}_pos"][c] = fr[f"{kind}_neg"][c] = v
            elif head == "Jr" and joint in names and names[joint] in ind:
                jm[ind.index(names[joint])] = v
            else:
                raise InvalidInput(f"unknown parameter label {lab!r}")
        if raw is not None:
            raw = np.asarray(raw, dtype=float)
            if raw.shape != (len(lay.raw_labels),):
                raise InvalidInput("raw link parameters have the wrong length")
            return cls(np.eye(raw.size), raw, jm=jm, labels=list(labels), **fr)
        basis = np.column_stack(cols) if cols else np.zeros((len(lay.raw_labels), 0))
        return cls(basis, np.array(phi), jm=jm, labels=list(labels), **fr)


@dataclass
class DynamicsDecomposition:
    M: np.ndarray
    C: np.ndarray
    G: np.ndarray
    Jm: np.ndarray
    X: np.ndarray
    qdd_bias: np.ndarray

    @property
    def M_total(self) -> np.ndarray:
        return self.M + self.Jm


def _full_velocities(model, q, qd_i, X):
    ind, dep = list(model.independent), list(model.dependent)
    qd = np.zeros_like(q)
    qd[:, ind] = qd_i
    if dep:
        qd[:, dep] = -np.einsum("nij,nj->ni", X, qd_i)
    return qd


def decompose(model: ParallelRobotModel, params: DynamicParameters, q_full, qd_full=None,
              gravity=None, cond_limit: float = 1e8) -> DynamicsDecomposition:
    """``M``, ``C`` and ``G`` at closure-consistent states (batched).

    ``qd_full`` only needs its actuated entries; passive ones are recomputed.
    """
    q = np.atleast_2d(np.asarray(q_full, dtype=float))
    single = np.ndim(q_full) == 1
    N, n = q.shape
    ind, dep = list(model.independent), list(model.dependent)
    dof = len(ind)
    g = model.gravity if gravity is None else np.asarray(gravity, dtype=float)
    part = partition_jacobian(model, q, cond_limit=cond_limit)
    X = part.X if part.X.ndim == 3 else part.X[None]
    A_d = part.A_d if part.A_d.ndim == 3 else part.A_d[None]
    qd_i = np.zeros((N, dof)) if qd_full is None else np.atleast_2d(qd_full)[:, ind]
    qd = _full_velocities(model, q, qd_i, X)
    if dep:
        b = -_velocity_product(model, q, qd)
        bias = np.linalg.solve(A_d, b[..., None])[..., 0]
    else:
        bias = np.zeros((N, 0))
    # probes: one unit acceleration per coordinate, the velocity term, gravity
    P = n + 2
    qq = np.repeat(q, P, axis=0)
    vv = np.zeros((N, P, n))
    aa = np.zeros((N, P, n))
    gg = np.zeros((N, P, 3))
    aa[:, :n, :] = np.eye(n)
    vv[:, n, :] = qd
    gg[:, n + 1, :] = g
    XX = np.repeat(X, P, axis=0)
    K = probe_regressor(model, qq, vv.reshape(-1, n), aa.reshape(-1, n), XX,
                        gg.reshape(-1, 3), params.basis)
    tau = (K @ params.phi).reshape(N, P, dof)
    G = tau[:, n + 1, :]
    cols = tau[:, :n, :]                       # (N, n, dof): response to unit qdd_k
    M_i = np.transpose(cols[:, ind, :], (0, 2, 1))
    M_d = np.transpose(cols[:, dep, :], (0, 2, 1))
    M = M_i - M_d @ X if dep else M_i
    C = tau[:, n, :]
    if dep:
        C = C + np.einsum("nij,nj->ni", M_d, bias)
    Jm = np.diag(params.jm)
    if single:
        return DynamicsDecomposition(M[0], C[0], G[0], Jm, X[0], bias[0])
    return DynamicsDecomposition(M, C, G, Jm, X, bias)


COMPLETIONS = ("auto", "none", "witness")


def identified_parameters(model: ParallelRobotModel, labels, values, witness=None,
                          completion: str = "auto", q_full=None):
    """Forward-model parameters of an identified model and the completion used.

    ``"none"`` keeps only the identified columns, ``"witness"`` fills the
    eliminated rigid columns from the feasibility witness.  ``"auto"`` keeps
    the identified columns unless their ``M + Jm`` is not positive definite
    at ``q_full`` (default: home pose) and a witness exists.
    """
    if completion not in COMPLETIONS:
        raise InvalidInput(f"completion must be one of {COMPLETIONS}")
    plain = DynamicParameters.from_labels(model, labels, values)
    if completion == "none" or witness is None:
        if completion == "witness":
            raise InvalidInput("witness completion needs a feasibility witness")
        return plain, "none"
    done = DynamicParameters.from_labels(model, labels, values, raw=witness["raw"])
    if completion == "witness":
        return done, "witness"
    q = model.home_pose() if q_full is None else np.asarray(q_full, dtype=float)
    A = decompose(model, plain, q).M_total.reshape(-1, model.dof, model.dof)[0]
    if np.all(np.linalg.eigvalsh(0.5 * (A + A.T)) > 0):
        return plain, "none"
    return done, "witness"


def extract_mass_matrix(model, params, q_full):
    return decompose(model, params, q_full).M


def extract_velocity_vector(model, params, q_full, qd_full):
    return decompose(model, params, q_full, qd_full).C


def extract_gravity_vector(model, params, q_full, gravity=None):
    return decompose(model, params, q_full, gravity=gravity).G


# ---------------------------------------------------------------------------
# friction regimes

@dataclass
class JointRegime:
    """Per coordinate: Coulomb direction ``sign`` in {-1, 0, 1} and ``stick``.

    Only actuated joints may stick; passive joints slip and flip their sign
    at velocity zero crossings.
    """

    sign: np.ndarray
    stick: np.ndarray

    def copy(self) -> "JointRegime":
        return JointRegime(self.sign.copy(), self.stick.copy())

    def tags(self, coords) -> list[str]:
        return ["stick" if self.stick[c] else {1: "slip+", -1: "slip-", 0: "free"}[int(self.sign[c])]
                for c in coords]


def friction_forces(params: DynamicParameters, qd, regime: JointRegime) -> np.ndarray:
    """Per-coordinate friction force of slipping joints (stuck ones are zero)."""
    s = regime.sign
    fv = np.where(s > 0, params.fv_pos, np.where(s < 0, params.fv_neg,
                                                 0.5 * (params.fv_pos + params.fv_neg)))
    fc = np.where(s > 0, params.fc_pos, np.where(s < 0, -params.fc_neg, 0.0))
    f = fv * qd + fc
    return np.where(regime.stick, 0.0, f)


def _breakaway(params, c, direction):
    return params.fc_pos[c] if direction >= 0 else params.fc_neg[c]


@dataclass
class RhsResult:
    qdd_i: np.ndarray
    stick_force: dict
    q: np.ndarray
    qd: np.ndarray


def forward_rhs(model: ParallelRobotModel, params: DynamicParameters, q_full, qd_i, tau,
                regime: JointRegime, dec: DynamicsDecomposition | None = None) -> RhsResult:
    """Actuated accelerations for one state under ``regime``.

    Stuck actuators get zero acceleration; the friction they need (the
    net force on their row) is returned in ``stick_force`` so the caller can
    test it against the breakaway level.
    """
    ind = list(model.independent)
    q = np.asarray(q_full, dtype=float)
    if dec is None:
        qd_tmp = np.zeros(model.n_coords)
        qd_tmp[ind] = qd_i
        dec = decompose(model, params, q, qd_tmp)
    qd = _full_velocities(model, q[None], np.asarray(qd_i, dtype=float)[None], dec.X[None])[0]
    F = project_rows(model, friction_forces(params, qd, regime)[:, None], dec.X)[:, 0]
    A = dec.M_total
    r = np.asarray(tau, dtype=float) - dec.C - dec.G - F
    stuck = [k for k, c in enumerate(ind) if regime.stick[c]]
    free = [k for k in range(len(ind)) if k not in stuck]
    qdd = np.zeros(len(ind))
    try:
        if free:
            # a physical model has M + Jm positive definite; anything else is rejected
            qdd[free] = cho_solve(cho_factor(A[np.ix_(free, free)]), r[free])
    except np.linalg.LinAlgError as exc:
        raise SingularMass(f"mass matrix is not positive definite: {exc}") from exc
    if free and not np.all(np.isfinite(qdd)):
        raise SingularMass("mass matrix is singular")
    need = {ind[k]: float(r[k] - A[k, free] @ qdd[free]) for k in stuck}
    return RhsResult(qdd, need, q, qd)


# ---------------------------------------------------------------------------
# integration

@dataclass
class Simulation:
    t: np.ndarray
    q_i: np.ndarray
    qd_i: np.ndarray
    q: np.ndarray
    tau: np.ndarray
    regimes: list[list[str]]
    events: list[dict]
    max_residual: float
    wall_time: float
    n_rhs: int

    def to_csv(self, path, names) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"q_{n}" for n in names] + [f"qd_{n}" for n in names]
                       + [f"regime_{n}" for n in names] + [f"tau_{n}" for n in names])
            for k in range(self.t.size):
                w.writerow([f"{self.t[k]:.17g}"] + [f"{v:.17g}" for v in self.q_i[k]]
                           + [f"{v:.17g}" for v in self.qd_i[k]] + self.regimes[k]
                           + [f"{v:.17g}" for v in self.tau[k]])


def torque_function(profile, times=None):
    """Callable ``t -> tau`` from a callable, a constant vector or samples at ``times``."""
    if callable(profile):
        return profile
    arr = np.asarray(profile, dtype=float)
    if times is None:
        if arr.ndim != 1:
            raise InvalidInput("sampled torques need their time stamps")
        return lambda t: arr
    times = np.asarray(times, dtype=float)
    if arr.shape[0] != times.size:
        raise InvalidInput("torque samples and time stamps differ in length")
    return lambda t: np.array([np.interp(t, times, arr[:, j]) for j in range(arr.shape[1])])


class _System:
    """RHS over ``y = [q_i, qd_i]`` with cached passive seed and regime."""

    def __init__(self, model, params, tau_fn, regime, seed, gravity, cond_limit):
        self.model, self.params, self.tau_fn = model, params, tau_fn
        self.regime = regime
        self.seed = np.asarray(seed, dtype=float)
        self.gravity = gravity
        self.cond_limit = cond_limit
        self.dof = model.dof
        self.n_rhs = 0
        self.anchor = None

    def set_anchor(self, q_full):
        """Linearize the closure at an accepted state for first-order seeds."""
        m = self.model
        self.seed = q_full[list(m.dependent)]
        if m.dependent:
            X = partition_jacobian(m, q_full[None], cond_limit=np.inf).X[0]
            self.anchor = (q_full[list(m.independent)], X)

    def predict(self, q_i):
        if self.anchor is None:
            return self.seed
        q0, X = self.anchor
        return self.seed - X @ (q_i - q0)

    def state(self, y):
        n = self.dof
        q, ok = newton_closure(self.model, y[:n], self.predict(y[:n]))
        if not ok[0]:
            # the linear prediction can overshoot near singular poses
            q, ok = newton_closure(self.model, y[:n], self.seed)
        if not ok[0]:
            raise NoConvergence("closure solve failed during integration")
        return q[0]

    def evaluate(self, t, y):
        n = self.dof
        q = self.state(y)
        qd = np.zeros(self.model.n_coords)
        qd[list(self.model.independent)] = y[n:]
        dec = decompose(self.model, self.params, q, qd, self.gravity, self.cond_limit)
        self.n_rhs += 1
        return forward_rhs(self.model, self.params, q, y[n:], self.tau_fn(t), self.regime, dec)

    def __call__(self, t, y):
        res = self.evaluate(t, y)
        return np.concatenate([np.where(self.stuck_mask(), 0.0, y[self.dof:]), res.qdd_i])

    def stuck_mask(self):
        return np.array([self.regime.stick[c] for c in self.model.independent])


def initial_regime(model, params, sysm: _System, t0, y0) -> JointRegime:
    """Regime at the start: slip in the direction of motion; actuators at rest
    stick unless the net force exceeds breakaway."""
    n = model.n_coords
    ind = list(model.independent)
    q = sysm.state(y0)
    X = partition_jacobian(model, q[None], cond_limit=np.inf).X[0]
    qd = _full_velocities(model, q[None], y0[model.dof:][None], X[None])[0]
    sign = np.sign(qd)
    sign[np.abs(qd) < STICK_VELOCITY] = 0.0
    has = (params.fc_pos > 0) | (params.fc_neg > 0)
    stick = np.zeros(n, dtype=bool)
    for k, c in enumerate(ind):
        if has[c] and abs(qd[c]) < STICK_VELOCITY:
            stick[c] = True
    reg = JointRegime(sign, stick)
    sysm.regime = reg
    return _settle(model, params, sysm, t0, y0)


def _settle(model, params, sysm: _System, t, y) -> JointRegime:
    """Release stuck actuators whose holding force exceeds breakaway (joint order)."""
    reg = sysm.regime
    for _ in range(model.dof + 1):
        res = sysm.evaluate(t, y)
        released = False
        for c, f in sorted(res.stick_force.items()):
            if abs(f) > _breakaway(params, c, f):
                reg.stick[c] = False
                reg.sign[c] = np.sign(f)
                released = True
                break
        if not released:
            return reg
    return reg


def _bisect(fun, a, b, fa):
    while b - a > EVENT_TOL:
        m = 0.5 * (a + b)
        fm = fun(m)
        if np.sign(fm) == np.sign(fa) and fm != 0:
            a, fa = m, fm
        else:
            b = m
    return b


def integrate(model: ParallelRobotModel, params: DynamicParameters, tau_profile, x0,
              t_span, rtol: float = 1e-9, atol: float = 1e-9, gravity=None,
              max_step: float = np.inf, min_step: float = 1e-12, cond_limit: float = 1e8,
              times=None, branch=None, seed_q_d=None) -> Simulation:
    """Integrate from ``x0 = (q_i, qd_i)`` (or a full ``q`` with actuated rates).

    Passive coordinates start from ``seed_q_d`` (default: home pose) and are
    re-solved by Newton at every evaluation.
    """
    t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise InvalidInput("t_span must be increasing")
    tau_fn = torque_function(tau_profile, times)
    dof = model.dof
    ind, dep = list(model.independent), list(model.dependent)
    q0, qd0 = (np.asarray(v, dtype=float) for v in x0)
    if q0.size == model.n_coords:
        seed = q0[dep]
        q0 = q0[ind]
    else:
        seed = model.home_pose(branch)[dep] if seed_q_d is None else np.asarray(seed_q_d)
        if seed_q_d is None and dep:
            qf, ok = solve_from_home(model, q0[None], branch)
            if not ok[0]:
                raise NoConvergence("initial closure solve failed")
            seed = qf[0, dep]
    if qd0.size == model.n_coords:
        qd0 = qd0[ind]
    y = np.concatenate([q0, qd0])
    sysm = _System(model, params, tau_fn, None, seed, gravity, cond_limit)
    wall = _time.perf_counter()
    try:
        initial_regime(model, params, sysm, t0, y)
    except (SingularConfiguration, SingularMass) as exc:
        exc.time = t0
        raise
    out_t, out_y, out_q, out_tau, out_reg, events = [], [], [], [], [], []
    max_res = 0.0

    def record(t, y):
        nonlocal max_res
        q = sysm.state(y)
        sysm.set_anchor(q)
        max_res = max(max_res, float(np.max(np.abs(constraint_residual(model, q)))) if dep else 0.0)
        out_t.append(t)
        out_y.append(y.copy())
        out_q.append(q)
        out_tau.append(np.asarray(tau_fn(t), dtype=float))
        out_reg.append(sysm.regime.tags(ind))

    record(t0, y)
    t = t0
    while t < t1 - 1e-15:
        solver = RK45(sysm, t, y, t1, rtol=rtol, atol=atol, max_step=max_step)
        restart = False
        while solver.status == "running" and not restart:
            t_old, y_old = solver.t, solver.y.copy()
            try:
                msg = solver.step()
            except (SingularConfiguration, SingularMass) as exc:
                exc.time = solver.t
                raise
            except NoConvergence as exc:
                raise StepFailure(f"closure failed near t = {solver.t:.6g}: {exc}", solver.t)
            if solver.status == "failed" or (solver.t - t_old) < min_step and solver.t < t1:
                raise StepFailure(f"step size collapsed at t = {solver.t:.6g}: {msg}", solver.t)
            dense = solver.dense_output()
            hit = _first_event(model, params, sysm, dense, t_old, solver.t, y_old, solver.y)
            if hit is None:
                t, y = solver.t, solver.y.copy()
                record(t, y)
                continue
            te, kind, c = hit
            y = dense(te)
            t = te
            _apply_event(model, params, sysm, t, y, kind, c, events)
            record(t, y)
            restart = True
        if not restart:
            break
    return Simulation(np.array(out_t), np.array(out_y)[:, :dof], np.array(out_y)[:, dof:],
                      np.array(out_q), np.array(out_tau), out_reg, events, max_res,
                      _time.perf_counter() - wall, sysm.n_rhs)


def _first_event(model, params, sysm, dense, ta, tb, ya, yb):
    """Earliest velocity zero crossing or breakaway in ``(ta, tb]``."""
    dof = model.dof
    ind = list(model.independent)
    reg = sysm.regime
    cands = []
    has_c = (params.fc_pos > 0) | (params.fc_neg > 0)
    for k, c in enumerate(ind):
        if reg.stick[c] or not has_c[c]:
            continue
        s = reg.sign[c]
        va, vb = ya[dof + k], yb[dof + k]
        if s != 0 and s * va > 0 and s * vb <= 0:
            cands.append((_bisect(lambda t: dense(t)[dof + k], ta, tb, va), "zero", c))
        elif s == 0 and abs(vb) >= STICK_VELOCITY:
            cands.append((tb, "start", c))
    dep = list(model.dependent)
    if dep and np.any(has_c[dep]):
        def passive_v(t):
            y = dense(t)
            q = sysm.state(y)
            X = partition_jacobian(model, q[None], cond_limit=np.inf).X[0]
            return -X @ y[dof:]
        va, vb = passive_v(ta), passive_v(tb)
        for j, c in enumerate(dep):
            if not has_c[c]:
                continue
            s = reg.sign[c]
            if s != 0 and s * va[j] > 0 and s * vb[j] <= 0:
                cands.append((_bisect(lambda t, j=j: passive_v(t)[j], ta, tb, va[j]), "passive", c))
            elif s == 0 and abs(vb[j]) >= STICK_VELOCITY:
                cands.append((tb, "passive-start", c))
    stuck = [c for c in ind if reg.stick[c]]
    if stuck:
        def margin(t, c):
            f = sysm.evaluate(t, dense(t)).stick_force[c]
            return _breakaway(params, c, f) - abs(f)
        for c in stuck:
            ma, mb = margin(ta, c), margin(tb, c)
            if ma >= 0 > mb:
                cands.append((_bisect(lambda t, c=c: margin(t, c), ta, tb, ma), "breakaway", c))
    if not cands:
        return None
    # simultaneous crossings are handled in coordinate order
    return min(cands, key=lambda e: (e[0], e[2]))


def _apply_event(model, params, sysm, t, y, kind, c, events):
    reg = sysm.regime
    dof = model.dof
    ind = list(model.independent)
    if kind == "zero":
        k = ind.index(c)
        y[dof + k] = 0.0
        reg.stick[c] = True
        # the breakaway test samples the applied force just after the crossing
        res = sysm.evaluate(t + BREAKAWAY_PROBE, y)
        f = res.stick_force[c]
        if abs(f) > _breakaway(params, c, f):
            reg.stick[c] = False
            reg.sign[c] = np.sign(f)
        else:
            reg.sign[c] = 0.0
    elif kind == "start":
        reg.sign[c] = np.sign(y[dof + ind.index(c)])
    elif kind == "passive":
        reg.sign[c] = -reg.sign[c]
    elif kind == "passive-start":
        q = sysm.state(y)
        X = partition_jacobian(model, q[None], cond_limit=np.inf).X[0]
        v = -X @ y[dof:]
        reg.sign[c] = np.sign(v[list(model.dependent).index(c)])
    elif kind == "breakaway":
        f = sysm.evaluate(t, y).stick_force[c]
        reg.stick[c] = False
        reg.sign[c] = np.sign(f)
    events.append({"time": t, "kind": kind, "joint": model.joint_names[c],
                   "regime": reg.tags([c])[0]})
    _settle(model, params, sysm, t, y)


def inverse_dynamics(model: ParallelRobotModel, params: DynamicParameters, state,
                     gravity=None) -> np.ndarray:
    """Actuator forces of a completed state: rigid + friction (sign of velocity) + rotor."""
    tau = closed_chain_rigid_regressor(model, state, gravity, params.basis) @ params.phi
    qd = np.atleast_2d(state.qd)
    s = np.sign(qd)
    fr = friction_forces(params, qd, JointRegime(s, np.zeros_like(s, dtype=bool)))
    X = np.asarray(state.X)
    F = project_rows(model, fr[..., None], X if X.ndim == 3 else X[None])[..., 0]
    qdd_i = np.atleast_2d(state.qdd)[:, list(model.independent)]
    out = np.atleast_2d(tau) + F + qdd_i * params.jm
    return out[0] if np.ndim(state.q) == 1 else out


class TrajectoryTorques:
    """``t -> tau`` along a reference trajectory by inverse dynamics.

    The passive seed follows the most recent query, so sequential calls from
    the integrator cost one or two Newton steps.
    """

    def __init__(self, model, params, traj, gravity=None, branch=None):
        from .excitation import eval_trajectory
        self.model, self.params, self.traj, self.gravity = model, params, traj, gravity
        self._eval = eval_trajectory
        q0, _, _ = eval_trajectory(traj, 0.0)
        q, ok = solve_from_home(model, q0, branch)
        if not ok[0]:
            raise NoConvergence("reference trajectory start is not assemblable")
        self.seed = q[0, list(model.dependent)]
        self.anchor = None

    def state(self, t):
        q_i, qd_i, qdd_i = self._eval(self.traj, t)
        seed = self.seed
        if self.anchor is not None:
            seed = seed - self.anchor[1] @ (q_i[0] - self.anchor[0])
        q, ok = newton_closure(self.model, q_i, seed)
        if not ok[0]:
            q, ok = newton_closure(self.model, q_i, self.seed)
        if not ok[0]:
            raise NoConvergence(f"reference closure fails at t = {t:.6g}")
        st = complete_state(self.model, q[0], qd_i[0], qdd_i[0])
        self.seed = q[0, list(self.model.dependent)]
        self.anchor = (q_i[0], st.X) if self.model.dependent else None
        return st

    def __call__(self, t):
        return inverse_dynamics(self.model, self.params, self.state(t), self.gravity)
