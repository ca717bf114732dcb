"""Parallel-robot assembly: cut-joint closure, coordinate partitioning and the
closed-chain regressor (rigid body, friction and rotor columns).

The robot is opened at the spherical joints of all legs but the first, giving
a tree of serial chains.  Generalized coordinates are the concatenated joint
variables of all legs; actuated joints are the independent ones.  With ``A``
the constraint Jacobian split into dependent/independent blocks,

    A_d qd_d + A_i qd_i = 0,      X = A_d^-1 A_i,      qd_d = -X qd_i,

and the actuator forces follow from the open-chain regressor as

    tau_i = (K_i - X^T K_d) phi.

The minus sign is the one that agrees with a Lagrange-multiplier solution of
the constrained open-chain dynamics (see ``tests/test_closure.py``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InvalidInput, NoConvergence, SingularConfiguration
from .kinmodel import (
    N_BODY_PARAMS,
    ChainState,
    JointKind,
    LinkFrame,
    RigidBodyParams,
    SerialChain,
    chain_kinematics,
    cross,
    link_transforms,
    param_labels,
    regressor_rows_open_chain,
)

COND_LIMIT = 1e8
BUNDLED = {"3prs": "3prs.json", "3rps": "3rps.json"}


@dataclass(frozen=True)
class FrictionParams:
    fc_pos: float
    fc_neg: float
    fv_pos: float
    fv_neg: float
    symmetric: bool = True

    def __post_init__(self):
        if self.symmetric and (self.fc_pos != self.fc_neg or self.fv_pos != self.fv_neg):
            raise InvalidInput("symmetric friction needs equal positive/negative coefficients")

    @classmethod
    def linear(cls, fc: float, fv: float) -> "FrictionParams":
        return cls(fc, fc, fv, fv, True)

    @property
    def fc(self) -> float:
        return 0.5 * (self.fc_pos + self.fc_neg)

    @property
    def fv(self) -> float:
        return 0.5 * (self.fv_pos + self.fv_neg)


@dataclass(frozen=True)
class RotorParams:
    j_rotor: float
    j_drive: float
    gear_ratio: float

    def __post_init__(self):
        if not self.gear_ratio > 1:
            raise InvalidInput("gear ratio must exceed 1")

    @property
    def j_effective(self) -> float:
        return self.j_rotor + self.gear_ratio ** 2 * self.j_drive


@dataclass(frozen=True, eq=False)
class CutConstraint:
    """Spherical joint opened at the end of ``leg``.

    ``point`` (in the last frame of ``leg``) must coincide with
    ``target_point`` given in frame ``target_link`` of ``target_leg``.
    """

    leg: int
    point: np.ndarray
    target_leg: int
    target_link: int
    target_point: np.ndarray


@dataclass(frozen=True, eq=False)
class ParameterLayout:
    """Columns after symmetry merging and removal of parameters assumed zero.

    Merged column ``j`` is the sum of the raw columns in ``members[j]``: all
    members are declared to share one value.
    """

    raw_labels: tuple[str, ...]
    labels: tuple[str, ...]
    members: tuple[tuple[int, ...], ...]

    @property
    def matrix(self) -> np.ndarray:
        m = np.zeros((len(self.raw_labels), len(self.labels)))
        for j, idx in enumerate(self.members):
            m[list(idx), j] = 1.0
        return m

    def merge_values(self, raw_phi) -> np.ndarray:
        raw_phi = np.asarray(raw_phi, dtype=float)
        return np.array([raw_phi[idx[0]] for idx in self.members])

    def expand(self, merged_phi) -> np.ndarray:
        return self.matrix @ np.asarray(merged_phi, dtype=float)

    def index(self, label: str) -> int:
        return self.labels.index(label)


@dataclass(frozen=True, eq=False)
class ParallelRobotModel:
    name: str
    legs: tuple[SerialChain, ...]
    bodies: tuple[RigidBodyParams, ...]
    body_names: tuple[str, ...]
    cuts: tuple[CutConstraint, ...]
    joint_names: tuple[str, ...]
    independent: tuple[int, ...]
    gravity: np.ndarray
    geometry: dict = field(default_factory=dict)
    q_min: np.ndarray | None = None
    q_max: np.ndarray | None = None
    qd_max: np.ndarray | None = None
    qdd_max: np.ndarray | None = None
    friction: tuple[tuple[int, FrictionParams], ...] = ()
    actuators: tuple[tuple[int, RotorParams], ...] = ()
    symmetry_groups: tuple[tuple[str, ...], ...] = ()
    zero_params: tuple[str, ...] = ()
    base_columns: tuple[str, ...] | None = None
    grid_params: tuple[str, ...] = ()
    home: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)
    source_hash: str = ""

    def __post_init__(self):
        m = self.n_coords
        seen = sorted(self.independent)
        if len(set(seen)) != len(seen) or (seen and (seen[0] < 0 or seen[-1] >= m)):
            raise InvalidInput("independent coordinate indices out of range or repeated")
        if self.legs and 3 * len(self.cuts) != m - self.dof:
            raise InvalidInput(
                f"{3 * len(self.cuts)} closure equations for {m - self.dof} dependent coordinates")

    @property
    def n_coords(self) -> int:
        return sum(leg.n_joints for leg in self.legs)

    @property
    def dof(self) -> int:
        return len(self.independent)

    @property
    def dependent(self) -> tuple[int, ...]:
        ind = set(self.independent)
        return tuple(k for k in range(self.n_coords) if k not in ind)

    @property
    def n_bodies(self) -> int:
        return len(self.bodies)

    @property
    def leg_offsets(self) -> list[int]:
        off = [0]
        for leg in self.legs:
            off.append(off[-1] + leg.n_joints)
        return off

    @property
    def raw_labels(self) -> list[str]:
        return param_labels(self.body_names)

    def nominal_raw(self) -> np.ndarray:
        return np.concatenate([b.as_vector() for b in self.bodies]) if self.bodies else np.zeros(0)

    def layout(self, merged: bool = True) -> ParameterLayout:
        raw = tuple(self.raw_labels)
        if not merged:
            return ParameterLayout(raw, raw, tuple((k,) for k in range(len(raw))))
        pos = {lab: k for k, lab in enumerate(raw)}
        zero = set(self.zero_params)
        grouped = {}
        for grp in self.symmetry_groups:
            for lab in grp:
                if lab not in pos:
                    raise InvalidInput(f"unknown parameter {lab!r} in symmetry group")
                grouped[lab] = grp
        labels, members, done = [], [], set()
        for lab in raw:
            if lab in zero or lab in done:
                continue
            grp = grouped.get(lab, (lab,))
            done.update(grp)
            labels.append(grp[0])
            members.append(tuple(pos[g] for g in grp))
        return ParameterLayout(raw, tuple(labels), tuple(members))

    def rigid_basis(self) -> tuple[np.ndarray, list[str]]:
        """Raw-to-identification column map for the rigid-body part.

        Uses ``base_columns`` from the robot file when present, else every
        merged column.
        """
        lay = self.layout()
        mat = lay.matrix
        if self.base_columns is None:
            return mat, list(lay.labels)
        idx = [lay.index(lab) for lab in self.base_columns]
        return mat[:, idx], list(self.base_columns)

    def friction_labels(self, asymmetric: bool = False) -> list[str]:
        out = []
        for coord, _ in self.friction:
            j = self.joint_names[coord]
            if asymmetric:
                out += [f"Fv+_{j}", f"Fv-_{j}", f"Fc+_{j}", f"Fc-_{j}"]
            else:
                out += [f"Fv_{j}", f"Fc_{j}"]
        return out

    def rotor_labels(self) -> list[str]:
        return [f"Jr_{self.joint_names[c]}" for c, _ in self.actuators]

    def nominal_friction(self, asymmetric: bool = False) -> np.ndarray:
        out = []
        for _, fp in self.friction:
            out += [fp.fv_pos, fp.fv_neg, fp.fc_pos, fp.fc_neg] if asymmetric else [fp.fv, fp.fc]
        return np.array(out, dtype=float)

    def nominal_rotor(self) -> np.ndarray:
        return np.array([rp.j_effective for _, rp in self.actuators], dtype=float)

    def home_pose(self, branch: str | None = None) -> np.ndarray:
        if not self.home:
            return np.zeros(self.n_coords)
        key = branch or next(iter(self.home))
        return np.array(self.home[key], dtype=float)


@dataclass
class Partition:
    A_d: np.ndarray
    A_i: np.ndarray
    X: np.ndarray
    b: np.ndarray | None
    cond: np.ndarray


@dataclass
class FullState:
    """Closure-consistent state: full coordinate vectors plus the partition."""

    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    independent: tuple[int, ...]
    dependent: tuple[int, ...]
    X: np.ndarray | None = None
    b: np.ndarray | None = None

    @property
    def q_i(self):
        return self.q[..., list(self.independent)]

    @property
    def q_d(self):
        return self.q[..., list(self.dependent)]

    @property
    def qd_i(self):
        return self.qd[..., list(self.independent)]

    @property
    def qd_d(self):
        return self.qd[..., list(self.dependent)]

    @property
    def qdd_i(self):
        return self.qdd[..., list(self.independent)]

    @property
    def qdd_d(self):
        return self.qdd[..., list(self.dependent)]

    def __len__(self):
        return 1 if self.q.ndim == 1 else self.q.shape[0]


# ---------------------------------------------------------------------------
# robot description files

def _chain_from_json(leg: dict) -> SerialChain:
    links = []
    for lk in leg["links"]:
        links.append(LinkFrame(float(lk["a"]), float(lk["alpha"]), float(lk["d"]),
                               float(lk["theta"]), JointKind(lk["kind"]), lk.get("body"),
                               lk.get("joint", "")))
    base = np.array(leg.get("base", np.eye(4)), dtype=float)
    return SerialChain(tuple(links), base, leg.get("name", ""))


def robot_from_dict(spec: dict, source_hash: str = "") -> ParallelRobotModel:
    try:
        legs = tuple(_chain_from_json(leg) for leg in spec["legs"])
        body_names = tuple(str(b["name"]) for b in spec["bodies"])
        bodies = []
        for b in spec["bodies"]:
            p = b.get("params", {})
            bodies.append(RigidBodyParams(*(float(p.get(k, 0.0)) for k in
                                             ("Ixx", "Ixy", "Ixz", "Iyy", "Iyz", "Izz",
                                              "m", "mx", "my", "mz"))))
        joint_names = tuple(lk.name for leg in legs for lk in leg.links)
        jidx = {j: k for k, j in enumerate(joint_names)}
        if len(jidx) != len(joint_names):
            raise InvalidInput("joint names must be unique")
        cuts = tuple(CutConstraint(int(c["leg"]), np.array(c["point"], dtype=float),
                                   int(c["target_leg"]), int(c["target_link"]),
                                   np.array(c["target_point"], dtype=float))
                     for c in spec.get("cuts", []))
        independent = tuple(jidx[j] for j in spec["independent"])
        m = len(joint_names)
        lim = {k: np.full(m, np.inf) for k in ("q_min", "q_max", "qd_max", "qdd_max")}
        lim["q_min"][:] = -np.inf
        for j, vals in spec.get("joint_limits", {}).items():
            k = jidx[j]
            if "q" in vals:
                lim["q_min"][k], lim["q_max"][k] = vals["q"]
            if "qd" in vals:
                lim["qd_max"][k] = vals["qd"]
            if "qdd" in vals:
                lim["qdd_max"][k] = vals["qdd"]
        friction = []
        for f in spec.get("friction", []):
            if "fc_pos" in f:
                fp = FrictionParams(f["fc_pos"], f["fc_neg"], f["fv_pos"], f["fv_neg"],
                                    f["fc_pos"] == f["fc_neg"] and f["fv_pos"] == f["fv_neg"])
            else:
                fp = FrictionParams.linear(float(f["fc"]), float(f["fv"]))
            friction.append((jidx[f["joint"]], fp))
        actuators = tuple((jidx[a["joint"]], RotorParams(float(a["j_rotor"]), float(a["j_drive"]),
                                                          float(a["gear_ratio"])))
                          for a in spec.get("actuators", []))
        if any(c not in independent for c, _ in actuators):
            raise InvalidInput("actuators must sit on independent joints")
        model_sec = spec.get("model", {})
        base_cols = model_sec.get("base_columns")
        return ParallelRobotModel(
            name=spec.get("name", ""),
            legs=legs,
            bodies=tuple(bodies),
            body_names=body_names,
            cuts=cuts,
            joint_names=joint_names,
            independent=independent,
            gravity=np.array(spec.get("gravity", [0.0, 0.0, -9.81]), dtype=float),
            geometry={k: float(v) for k, v in spec.get("geometry", {}).items()},
            q_min=lim["q_min"], q_max=lim["q_max"], qd_max=lim["qd_max"], qdd_max=lim["qdd_max"],
            friction=tuple(friction),
            actuators=actuators,
            symmetry_groups=tuple(tuple(g) for g in model_sec.get("symmetry_groups", [])),
            zero_params=tuple(model_sec.get("zero_params", [])),
            base_columns=tuple(base_cols) if base_cols is not None else None,
            grid_params=tuple(model_sec.get("grid_params", [])),
            home={k: np.array(v, dtype=float) for k, v in spec.get("home", {}).items()},
            reference=spec.get("reference", {}),
            source_hash=source_hash,
        )
    except KeyError as exc:
        raise InvalidInput(f"robot description is missing field {exc}") from exc


def load_robot(path_or_name) -> ParallelRobotModel:
    """Load a robot description file, or a bundled one by name (``3prs``, ``3rps``)."""
    key = str(path_or_name).lower().replace("-", "")
    if key in BUNDLED:
        text = resources.files("parid.data").joinpath(BUNDLED[key]).read_text()
    else:
        p = Path(path_or_name)
        if not p.exists():
            raise InvalidInput(f"robot file {p} not found")
        text = p.read_text()
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"robot file is not valid JSON: {exc}") from exc
    return robot_from_dict(spec, hashlib.sha256(text.encode()).hexdigest())


# ---------------------------------------------------------------------------
# closure

def _leg_q(model, q, leg):
    off = model.leg_offsets
    return q[:, off[leg]:off[leg + 1]]


def _poses(model, q):
    out = []
    for k, leg in enumerate(model.legs):
        rots, pos = link_transforms(leg, _leg_q(model, q, k))
        N, n = rots.shape[:2]
        rw = np.empty_like(rots)
        pw = np.empty_like(pos)
        r_cur = np.tile(leg.base[:3, :3], (N, 1, 1))
        p_cur = np.tile(leg.base[:3, 3], (N, 1))
        for j in range(n):
            p_cur = p_cur + np.einsum("nij,nj->ni", r_cur, pos[:, j])
            r_cur = r_cur @ rots[:, j]
            rw[:, j], pw[:, j] = r_cur, p_cur
        out.append((rw, pw))
    return out


def _as_batch(x, width):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != width:
        raise InvalidInput(f"expected {width} coordinates, got {x.shape[1]}")
    return x, single


def _residual_from_poses(model, poses, N):
    res = np.empty((N, 3 * len(model.cuts)))
    for c, cut in enumerate(model.cuts):
        rw, pw = poses[cut.leg]
        p = pw[:, -1] + rw[:, -1] @ cut.point
        rt, pt = poses[cut.target_leg]
        t = pt[:, cut.target_link] + rt[:, cut.target_link] @ cut.target_point
        res[:, 3 * c:3 * c + 3] = p - t
    return res


def constraint_residual(model: ParallelRobotModel, q_full) -> np.ndarray:
    """Coincidence error of every opened spherical joint (3 equations per cut)."""
    q, single = _as_batch(q_full, model.n_coords)
    N = q.shape[0]
    if not model.cuts:
        out = np.zeros((N, 0))
        return out[0] if single else out
    res = _residual_from_poses(model, _poses(model, q), N)
    return res[0] if single else res


def _point_jacobian(model, poses, leg, link, point_world, out, sign):
    """Add sign * d(point)/dq for a point fixed to ``link`` of ``leg``."""
    rw, pw = poses[leg]
    off = model.leg_offsets[leg]
    for j in range(link + 1):
        z = rw[:, j, :, 2]
        if model.legs[leg].links[j].kind is JointKind.REVOLUTE:
            col = cross(z, point_world - pw[:, j])
        else:
            col = z
        out[:, :, off + j] += sign * col


def _jacobian_from_poses(model, poses, N):
    A = np.zeros((N, 3 * len(model.cuts), model.n_coords))
    for c, cut in enumerate(model.cuts):
        rw, pw = poses[cut.leg]
        n_leg = model.legs[cut.leg].n_joints
        p = pw[:, -1] + rw[:, -1] @ cut.point
        blk = A[:, 3 * c:3 * c + 3, :]
        _point_jacobian(model, poses, cut.leg, n_leg - 1, p, blk, 1.0)
        _point_jacobian(model, poses, cut.target_leg, cut.target_link, p, blk, -1.0)
    return A


def constraint_jacobian(model: ParallelRobotModel, q_full) -> np.ndarray:
    q, single = _as_batch(q_full, model.n_coords)
    A = _jacobian_from_poses(model, _poses(model, q), q.shape[0])
    return A[0] if single else A


def _velocity_product(model, q, qd):
    """``A_dot @ qd`` evaluated analytically from point accelerations at qdd = 0."""
    N = q.shape[0]
    out = np.zeros((N, 3 * len(model.cuts)))
    kins = []
    for k, leg in enumerate(model.legs):
        ql = _leg_q(model, q, k)
        qdl = _leg_q(model, qd, k)
        kins.append(chain_kinematics(leg, ChainState(ql, qdl, np.zeros_like(ql)), np.zeros(3)))

    def point_acc(leg, link, pt):
        kin = kins[leg]
        w, dw, a = kin.omega[:, link], kin.omega_dot[:, link], kin.acc[:, link]
        loc = a + cross(dw, pt) + cross(w, cross(w, pt))
        return np.einsum("nij,nj->ni", kin.rot_world[:, link], loc)

    for c, cut in enumerate(model.cuts):
        n_leg = model.legs[cut.leg].n_joints
        out[:, 3 * c:3 * c + 3] = (point_acc(cut.leg, n_leg - 1, np.tile(cut.point, (N, 1)))
                                   - point_acc(cut.target_leg, cut.target_link,
                                               np.tile(cut.target_point, (N, 1))))
    return out


def partition_jacobian(model: ParallelRobotModel, q_full, qd_full=None,
                       cond_limit: float = COND_LIMIT) -> Partition:
    """Split the constraint Jacobian and form ``X = A_d^-1 A_i``.

    ``b = -A_dot qd`` (the acceleration-level right-hand side) is returned when
    velocities are given.  Raises :class:`SingularConfiguration` when
    ``cond(A_d)`` exceeds ``cond_limit`` for any sample.
    """
    q, single = _as_batch(q_full, model.n_coords)
    ind, dep = list(model.independent), list(model.dependent)
    N = q.shape[0]
    A = constraint_jacobian(model, q)
    A_d, A_i = A[:, :, dep], A[:, :, ind]
    if len(dep) == 0:
        X = np.zeros((N, 0, len(ind)))
        cond = np.ones(N)
        b = np.zeros((N, 0)) if qd_full is not None else None
    else:
        cond = np.linalg.cond(A_d)
        bad = ~(cond <= cond_limit)
        if np.any(bad):
            k = int(np.argmax(bad))
            raise SingularConfiguration(
                f"cond(A_d) = {cond[k]:.3g} exceeds {cond_limit:.0e} at sample {k}", cond=cond[k])
        X = np.linalg.solve(A_d, A_i)
        b = None
        if qd_full is not None:
            qd, _ = _as_batch(qd_full, model.n_coords)
            b = -_velocity_product(model, q, qd)
    part = Partition(A_d, A_i, X, b, cond)
    if single:
        part = Partition(A_d[0], A_i[0], X[0], None if b is None else b[0], cond[0])
    return part


def newton_closure(model: ParallelRobotModel, q_i, seed_q_d, tol: float = 1e-12,
                   max_iter: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Batched Newton-Raphson on the closure equations for the passive coordinates.

    Returns full coordinate rows and a per-row convergence mask; never raises
    on individual failures (rows whose ``A_d`` turns singular are frozen and
    reported as not converged).
    """
    ind, dep = list(model.independent), list(model.dependent)
    q_i, _ = _as_batch(q_i, len(ind))
    N = q_i.shape[0]
    q = np.zeros((N, model.n_coords))
    q[:, ind] = q_i
    q[:, dep] = np.broadcast_to(np.asarray(seed_q_d, dtype=float), (N, len(dep)))
    ok = np.ones(N, dtype=bool)
    if not dep:
        return q, ok
    active = np.arange(N)
    dead = np.zeros(N, dtype=bool)
    err = np.full(N, np.inf)
    for _ in range(max_iter + 1):
        poses = _poses(model, q[active])
        res = _residual_from_poses(model, poses, active.size)
        err[active] = np.max(np.abs(res), axis=1)
        keep = err[active] > tol
        keep &= np.all(np.isfinite(res), axis=1)
        if not np.any(keep):
            break
        if not np.all(keep):
            poses = [(rw[keep], pw[keep]) for rw, pw in poses]
        active, res = active[keep], res[keep]
        A_d = _jacobian_from_poses(model, poses, active.size)[:, :, dep]
        try:
            step = np.linalg.solve(A_d, res[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.zeros_like(res)
            for k in range(active.size):
                try:
                    step[k] = np.linalg.solve(A_d[k], res[k])
                except np.linalg.LinAlgError:
                    dead[active[k]] = True
        q[np.ix_(active, dep)] -= step
        active = active[~dead[active]]
    # revolute passive joints: report the angle nearest the seed
    seed = np.broadcast_to(np.asarray(seed_q_d, dtype=float), (N, len(dep)))
    kinds = [lk.kind for leg in model.legs for lk in leg.links]
    rev = [k for k, c in enumerate(dep) if kinds[c] is JointKind.REVOLUTE]
    cols = [dep[k] for k in rev]
    q[:, cols] = seed[:, rev] + np.mod(q[:, cols] - seed[:, rev] + np.pi, 2 * np.pi) - np.pi
    # rows still iterating when the budget ran out were moved after their last check
    if active.size and np.any(err[active] > tol):
        err[active] = np.max(np.abs(constraint_residual(model, q[active])), axis=1)
    ok = (err <= 10 * tol) & ~dead
    return q, ok


def complete_state(model: ParallelRobotModel, q_full, qd_i, qdd_i,
                   cond_limit: float = COND_LIMIT) -> FullState:
    """Passive velocities and accelerations for closure-consistent positions.

    ``qd_d = -X qd_i`` and ``qdd_d = A_d^-1 b - X qdd_i``.
    """
    ind, dep = list(model.independent), list(model.dependent)
    q, single = _as_batch(q_full, model.n_coords)
    qd_i, _ = _as_batch(qd_i, len(ind))
    qdd_i, _ = _as_batch(qdd_i, len(ind))
    N = q.shape[0]
    part = partition_jacobian(model, q, cond_limit=cond_limit)
    X = part.X
    qd = np.zeros_like(q)
    qd[:, ind] = qd_i
    qd[:, dep] = -np.einsum("nij,nj->ni", X, qd_i)
    b = -_velocity_product(model, q, qd) if dep else np.zeros((N, 0))
    qdd = np.zeros_like(q)
    qdd[:, ind] = qdd_i
    if dep:
        qdd[:, dep] = np.linalg.solve(part.A_d, b[..., None])[..., 0] - np.einsum(
            "nij,nj->ni", X, qdd_i)
    if single:
        return FullState(q[0], qd[0], qdd[0], model.independent, model.dependent, X[0], b[0])
    return FullState(q, qd, qdd, model.independent, model.dependent, X, b)


def solve_dependent(model: ParallelRobotModel, q_i, qd_i, qdd_i, seed_q_d,
                    tol: float = 1e-12, max_iter: int = 50) -> FullState:
    """Closure-consistent state from the actuated coordinates and a passive seed.

    Batched: each row of ``q_i`` is solved from the matching row of
    ``seed_q_d`` (a single seed is broadcast).  Raises
    :class:`NoConvergence` if any row fails and
    :class:`SingularConfiguration` if any converged pose is singular.
    """
    single = np.ndim(q_i) == 1
    q, ok = newton_closure(model, q_i, seed_q_d, tol, max_iter)
    if not np.all(ok):
        k = int(np.argmin(ok))
        worst = np.max(np.abs(constraint_residual(model, q[k])))
        raise NoConvergence(f"closure not met for {int((~ok).sum())} sample(s) "
                            f"(first at row {k}, residual {worst:.3g})")
    return complete_state(model, q[0] if single else q, qd_i, qdd_i)


def within_limits(model: ParallelRobotModel, q_full, margin: float = 0.0) -> np.ndarray:
    """Row mask: every coordinate inside its limits shrunk by ``margin``."""
    q = np.atleast_2d(q_full)
    return np.all((q >= model.q_min + margin) & (q <= model.q_max - margin), axis=1)


def solve_from_home(model: ParallelRobotModel, q_i, branch: str | None = None,
                    steps: int = 4, seed_q_d=None, tol: float = 1e-12):
    """Batched closure solve by homotopy from the home pose.

    The actuated coordinates move from home to ``q_i`` in ``steps`` equal
    increments, each Newton solve seeded by the previous one, which keeps
    every row on the home assembly branch.  With ``seed_q_d`` the homotopy is
    skipped and a single solve is run from that seed.  Returns
    ``(q_full, ok_mask)``.
    """
    ind, dep = list(model.independent), list(model.dependent)
    q_i = np.atleast_2d(np.asarray(q_i, dtype=float))
    if seed_q_d is not None:
        return newton_closure(model, q_i, seed_q_d, tol)
    home = model.home_pose(branch)
    seed = np.tile(home[dep], (q_i.shape[0], 1))
    ok = np.ones(q_i.shape[0], dtype=bool)
    for s in np.linspace(1.0 / steps, 1.0, steps):
        q, ok_s = newton_closure(model, home[ind] + s * (q_i - home[ind]), seed, tol)
        ok &= ok_s
        seed = q[:, dep]
    return q, ok


# ---------------------------------------------------------------------------
# regressors

def open_chain_rows(model: ParallelRobotModel, q, qd, qdd, gravity=None,
                    bodies: set | None = None) -> np.ndarray:
    """Open-tree joint regressor for every coordinate: ``(N, n_coords, 10 n_bodies)``."""
    q, single = _as_batch(q, model.n_coords)
    qd, _ = _as_batch(qd, model.n_coords)
    qdd, _ = _as_batch(qdd, model.n_coords)
    g = model.gravity if gravity is None else np.asarray(gravity, dtype=float)
    N = q.shape[0]
    K = np.zeros((N, model.n_coords, N_BODY_PARAMS * model.n_bodies))
    off = model.leg_offsets
    for k, leg in enumerate(model.legs):
        sl = slice(off[k], off[k + 1])
        K[:, sl] = regressor_rows_open_chain(leg, ChainState(q[:, sl], qd[:, sl], qdd[:, sl]), g,
                                             n_bodies=model.n_bodies, bodies=bodies)
    return K[0] if single else K


def project_rows(model: ParallelRobotModel, rows, X) -> np.ndarray:
    """``rows_i - X^T rows_d``: eliminate the multipliers of the cut joints."""
    ind, dep = list(model.independent), list(model.dependent)
    rows = np.asarray(rows)
    single = rows.ndim == 2
    if single:
        rows, X = rows[None], np.asarray(X)[None]
    out = rows[:, ind] - np.einsum("nji,njp->nip", X, rows[:, dep])
    return out[0] if single else out


def _state_X(model, state: FullState):
    if state.X is None:
        return partition_jacobian(model, np.atleast_2d(state.q)).X
    X = np.asarray(state.X)
    return X if X.ndim == 3 else X[None]


def _basis_bodies(basis):
    """Bodies whose raw columns carry a nonzero weight in ``basis``."""
    used = np.flatnonzero(np.any(basis != 0, axis=1))
    return {int(i) // N_BODY_PARAMS for i in used}


def closed_chain_rigid_regressor(model: ParallelRobotModel, state: FullState, gravity=None,
                                 basis: np.ndarray | None = None) -> np.ndarray:
    """``K_rb`` with raw columns (10 per body), or ``K_rb @ basis`` when given."""
    single = np.ndim(state.q) == 1
    q, qd, qdd = (np.atleast_2d(a) for a in (state.q, state.qd, state.qdd))
    X = _state_X(model, state)
    bodies = None if basis is None else _basis_bodies(basis)
    K = project_rows(model, open_chain_rows(model, q, qd, qdd, gravity, bodies), X)
    if basis is not None:
        K = K @ basis
    return K[0] if single else K


def friction_columns(model: ParallelRobotModel, state: FullState,
                     asymmetric: bool = False) -> np.ndarray:
    """Coulomb/viscous columns per friction joint, projected to the actuators.

    Column order per joint is ``(Fv, Fc)``, or ``(Fv+, Fv-, Fc+, Fc-)`` in
    asymmetric mode.  ``sign(0) = 0``.
    """
    single = np.ndim(state.q) == 1
    qd = np.atleast_2d(state.qd)
    X = _state_X(model, state)
    N = qd.shape[0]
    per = 4 if asymmetric else 2
    rows = np.zeros((N, model.n_coords, per * len(model.friction)))
    for k, (c, _) in enumerate(model.friction):
        v = qd[:, c]
        if asymmetric:
            pos, neg = v > 0, v < 0
            rows[:, c, 4 * k] = np.where(pos, v, 0.0)
            rows[:, c, 4 * k + 1] = np.where(neg, v, 0.0)
            rows[:, c, 4 * k + 2] = pos.astype(float)
            rows[:, c, 4 * k + 3] = -neg.astype(float)
        else:
            rows[:, c, 2 * k] = v
            rows[:, c, 2 * k + 1] = np.sign(v)
    out = project_rows(model, rows, X)
    return out[0] if single else out


def rotor_columns(model: ParallelRobotModel, state: FullState) -> np.ndarray:
    """One column per actuator: its own joint acceleration on its own row."""
    single = np.ndim(state.q) == 1
    qdd = np.atleast_2d(state.qdd)
    N = qdd.shape[0]
    ind = list(model.independent)
    out = np.zeros((N, model.dof, len(model.actuators)))
    for k, (c, _) in enumerate(model.actuators):
        r = ind.index(c)
        out[:, r, k] = qdd[:, c]
    return out[0] if single else out


def full_regressor_row_block(model: ParallelRobotModel, state: FullState,
                             basis: np.ndarray | None = None, asymmetric: bool = False,
                             gravity=None) -> np.ndarray:
    """``[K_rb @ basis | K_f | K_r]`` for the identification model.

    ``basis`` maps raw rigid-body columns to identification columns; by
    default :meth:`ParallelRobotModel.rigid_basis` (symmetry merging plus the
    robot file's base column selection).
    """
    if basis is None:
        basis, _ = model.rigid_basis()
    parts = [closed_chain_rigid_regressor(model, state, gravity, basis)]
    if model.friction:
        parts.append(friction_columns(model, state, asymmetric))
    if model.actuators:
        parts.append(rotor_columns(model, state))
    return np.concatenate(parts, axis=-1)


def full_labels(model: ParallelRobotModel, rigid_labels=None, asymmetric: bool = False) -> list[str]:
    if rigid_labels is None:
        rigid_labels = model.rigid_basis()[1]
    return list(rigid_labels) + model.friction_labels(asymmetric) + model.rotor_labels()


def probe_regressor(model: ParallelRobotModel, q, qd, qdd, X, gravity, basis) -> np.ndarray:
    """Projected rigid regressor at arbitrary (not necessarily consistent) inputs.

    Used by the forward-dynamics probing, which zeroes selected inputs.
    """
    bodies = _basis_bodies(basis)
    rows = open_chain_rows(model, q, qd, qdd, gravity, bodies)
    return project_rows(model, rows, X) @ basis
