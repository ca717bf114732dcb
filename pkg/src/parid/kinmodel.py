"""Serial-chain kinematics and the linear-in-parameters joint regressor.

Frames follow the modified Denavit-Hartenberg convention: the transform from
frame ``i-1`` to frame ``i`` is ``Rx(alpha) Tx(a) Rz(theta) Tz(d)``.  The joint
variable is ``theta`` for revolute joints and ``d`` for prismatic joints; the
fixed part lives in ``theta_offset`` / ``d``.

Every routine accepts either a single state (1-D arrays) or a batch of states
(2-D arrays, one row per sample) and is vectorised over the batch.

Per-body parameter layout (10 columns per body, bodies in index order)::

    [Ixx Ixy Ixz Iyy Iyz Izz m mx my mz]

Inertia components are taken about the body frame origin (not the centre of
gravity) and expressed in the body frame; ``mx, my, mz`` are first moments of
mass.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PARAM_NAMES = ("Ixx", "Ixy", "Ixz", "Iyy", "Iyz", "Izz", "m", "mx", "my", "mz")
N_BODY_PARAMS = len(PARAM_NAMES)

_EZ = np.array([0.0, 0.0, 1.0])


class JointKind(enum.Enum):
    REVOLUTE = "R"
    PRISMATIC = "P"


@dataclass(frozen=True)
class LinkFrame:
    """One joint plus the frame it carries.

    ``body`` is the index of the rigid body rigidly attached to this frame, or
    ``None`` for massless intermediate frames (e.g. the first two axes of a
    spherical joint modelled as three revolutes).
    """

    a: float
    alpha: float
    d: float
    theta_offset: float
    kind: JointKind
    body: int | None = None
    name: str = ""

    def __post_init__(self):
        vals = (self.a, self.alpha, self.d, self.theta_offset)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite D-H values in link {self.name!r}")


@dataclass
class RigidBodyParams:
    ixx: float = 0.0
    ixy: float = 0.0
    ixz: float = 0.0
    iyy: float = 0.0
    iyz: float = 0.0
    izz: float = 0.0
    m: float = 0.0
    mx: float = 0.0
    my: float = 0.0
    mz: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([self.ixx, self.ixy, self.ixz, self.iyy, self.iyz,
                         self.izz, self.m, self.mx, self.my, self.mz])

    @classmethod
    def from_vector(cls, v) -> "RigidBodyParams":
        v = np.asarray(v, dtype=float)
        if v.shape != (N_BODY_PARAMS,):
            raise ValueError(f"expected 10 parameters, got shape {v.shape}")
        return cls(*map(float, v))

    @classmethod
    def from_centroidal(cls, m, com, inertia_g) -> "RigidBodyParams":
        """Build frame-origin parameters from mass, CoG and centroidal inertia."""
        c = np.asarray(com, dtype=float)
        i_o = np.asarray(inertia_g, dtype=float) + m * (c @ c * np.eye(3) - np.outer(c, c))
        return cls(i_o[0, 0], i_o[0, 1], i_o[0, 2], i_o[1, 1], i_o[1, 2], i_o[2, 2],
                   m, *(m * c))

    def inertia(self) -> np.ndarray:
        return inertia_matrix(self.as_vector())

    def first_moment(self) -> np.ndarray:
        return np.array([self.mx, self.my, self.mz])


def inertia_matrix(phi) -> np.ndarray:
    """Symmetric 3x3 tensor(s) from the six inertia components of ``phi``."""
    phi = np.asarray(phi, dtype=float)
    ixx, ixy, ixz, iyy, iyz, izz = (phi[..., k] for k in range(6))
    return np.stack([
        np.stack([ixx, ixy, ixz], axis=-1),
        np.stack([ixy, iyy, iyz], axis=-1),
        np.stack([ixz, iyz, izz], axis=-1),
    ], axis=-2)


def centroidal_inertia(phi) -> np.ndarray:
    """Steiner transfer of the origin inertia to the centre of gravity.

    ``I_G = I_O - m (c.c 1 - c c^T)`` with ``c = (mx, my, mz) / m``; written as
    ``I_O - (s.s 1 - s s^T) / m`` with ``s`` the first moment so that it stays
    vectorised.  Requires ``m != 0``.
    """
    phi = np.asarray(phi, dtype=float)
    m = phi[..., 6]
    s = phi[..., 7:10]
    ss = np.einsum("...i,...i->...", s, s)
    shift = ss[..., None, None] * np.eye(3) - np.einsum("...i,...j->...ij", s, s)
    return inertia_matrix(phi) - shift / m[..., None, None]


@dataclass(frozen=True, eq=False)
class SerialChain:
    links: tuple[LinkFrame, ...]
    base: np.ndarray = field(default_factory=lambda: np.eye(4))
    name: str = ""

    def __post_init__(self):
        if len(self.links) == 0:
            raise ValueError("a serial chain needs at least one link")
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float))
        # per-joint constants for the vectorized transforms
        rev = np.array([lk.kind is JointKind.REVOLUTE for lk in self.links])
        alpha = np.array([lk.alpha for lk in self.links], dtype=float)
        dh = {"rev": rev.astype(float), "pri": (~rev).astype(float),
              "a": np.array([lk.a for lk in self.links], dtype=float),
              "d": np.array([lk.d for lk in self.links], dtype=float),
              "theta": np.array([lk.theta_offset for lk in self.links], dtype=float),
              "ca": np.cos(alpha), "sa": np.sin(alpha)}
        object.__setattr__(self, "_dh", dh)

    @property
    def n_joints(self) -> int:
        return len(self.links)

    @property
    def n_bodies(self) -> int:
        """One past the largest body index referenced by the chain."""
        idx = [lk.body for lk in self.links if lk.body is not None]
        return max(idx) + 1 if idx else 0

    @classmethod
    def from_dh(cls, rows: Sequence[tuple], base=None, name="") -> "SerialChain":
        """Chain from ``(a, alpha, d, theta_offset, kind)`` rows, one body per link."""
        links = []
        for k, (a, alpha, d, theta, kind) in enumerate(rows):
            links.append(LinkFrame(a, alpha, d, theta, JointKind(kind), body=k, name=f"q{k + 1}"))
        return cls(tuple(links), np.eye(4) if base is None else base, name)


@dataclass
class ChainState:
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        self.qdd = np.asarray(self.qdd, dtype=float)
        if not (self.q.shape == self.qd.shape == self.qdd.shape):
            raise ValueError("q, qd and qdd must have equal shapes")


@dataclass
class ChainKinematics:
    """Batched per-link kinematic quantities.

    All arrays carry a leading sample axis ``N`` and a link axis ``n``.
    ``rot``/``pos`` give frame ``i`` relative to its parent; ``rot_world`` /
    ``pos_world`` relative to the world.  Velocities and accelerations of the
    frame origin are expressed in the link frame, with gravity folded into
    ``acc`` (the base accelerates at ``-g``).
    """

    rot: np.ndarray
    pos: np.ndarray
    rot_world: np.ndarray
    pos_world: np.ndarray
    omega: np.ndarray
    omega_dot: np.ndarray
    vel: np.ndarray
    acc: np.ndarray


def skew(a) -> np.ndarray:
    """Cross-product matrix: ``skew(a) @ b == a x b``; broadcasts over leading axes."""
    a = np.asarray(a, dtype=float)
    out = np.zeros(a.shape + (3,))
    out[..., 0, 1], out[..., 0, 2] = -a[..., 2], a[..., 1]
    out[..., 1, 0], out[..., 1, 2] = a[..., 2], -a[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -a[..., 1], a[..., 0]
    return out


def cross(a, b) -> np.ndarray:
    """``a x b`` along the last axis (lighter than ``np.cross`` on small batches)."""
    if a.shape == b.shape:
        out = np.empty(a.shape)
    else:
        out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def hat_operator(a) -> np.ndarray:
    """3x6 operator with ``hat(a) @ [Ixx Ixy Ixz Iyy Iyz Izz] == I @ a``."""
    a = np.asarray(a, dtype=float)
    out = np.zeros(a.shape[:-1] + (3, 6))
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    out[..., 0, 0], out[..., 0, 1], out[..., 0, 2] = ax, ay, az
    out[..., 1, 1], out[..., 1, 3], out[..., 1, 4] = ax, ay, az
    out[..., 2, 2], out[..., 2, 4], out[..., 2, 5] = ax, ay, az
    return out


def _batch(x, n):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != n:
        raise ValueError(f"state has {x.shape[1]} coordinates, chain has {n} joints")
    return x, single


def link_transforms(chain: SerialChain, q):
    """Parent-to-child rotation and origin offset for every link (batched)."""
    q, _ = _batch(q, chain.n_joints)
    dh = chain._dh
    theta = dh["theta"] + dh["rev"] * q
    d = dh["d"] + dh["pri"] * q
    ca, sa = dh["ca"], dh["sa"]
    ct, st = np.cos(theta), np.sin(theta)
    rots = np.empty(q.shape + (3, 3))
    rots[..., 0, 0], rots[..., 0, 1], rots[..., 0, 2] = ct, -st, 0.0
    rots[..., 1, 0], rots[..., 1, 1], rots[..., 1, 2] = ca * st, ca * ct, -sa
    rots[..., 2, 0], rots[..., 2, 1], rots[..., 2, 2] = sa * st, sa * ct, ca
    pos = np.empty(q.shape + (3,))
    pos[..., 0] = dh["a"]
    pos[..., 1] = -sa * d
    pos[..., 2] = ca * d
    return rots, pos


def chain_kinematics(chain: SerialChain, state: ChainState, gravity) -> ChainKinematics:
    """Outward recursion for link velocities and accelerations."""
    n = chain.n_joints
    q, _ = _batch(state.q, n)
    qd, _ = _batch(state.qd, n)
    qdd, _ = _batch(state.qdd, n)
    N = q.shape[0]
    rots, pos = link_transforms(chain, q)

    rb = chain.base[:3, :3]
    w = np.zeros((N, 3))
    dw = np.zeros((N, 3))
    v = np.zeros((N, 3))
    g = np.asarray(gravity, dtype=float)
    # gravity may also be given per state, shape (N, 3)
    acc = np.broadcast_to(-g @ rb, (N, 3)).copy()
    rw = np.tile(rb, (N, 1, 1))
    pw = np.tile(chain.base[:3, 3], (N, 1))

    out = {k: np.empty((N, n, 3)) for k in ("omega", "omega_dot", "vel", "acc", "pos_world")}
    rot_world = np.empty((N, n, 3, 3))
    for j, lk in enumerate(chain.links):
        r, p = rots[:, j], pos[:, j]
        rt = np.swapaxes(r, 1, 2)
        pw = pw + np.einsum("nij,nj->ni", rw, p)
        rw = rw @ r
        wxp = cross(w, p)
        acc = np.einsum("nij,nj->ni", rt, acc + cross(dw, p) + cross(w, wxp))
        v = np.einsum("nij,nj->ni", rt, v + wxp)
        w_in = np.einsum("nij,nj->ni", rt, w)
        dw_in = np.einsum("nij,nj->ni", rt, dw)
        zqd = qd[:, j, None] * _EZ
        zqdd = qdd[:, j, None] * _EZ
        if lk.kind is JointKind.REVOLUTE:
            w = w_in + zqd
            dw = dw_in + cross(w_in, zqd) + zqdd
        else:
            w, dw = w_in, dw_in
            acc = acc + 2.0 * cross(w, zqd) + zqdd
            v = v + zqd
        out["omega"][:, j] = w
        out["omega_dot"][:, j] = dw
        out["vel"][:, j] = v
        out["acc"][:, j] = acc
        out["pos_world"][:, j] = pw
        rot_world[:, j] = rw
    return ChainKinematics(rots, pos, rot_world, out["pos_world"], out["omega"],
                           out["omega_dot"], out["vel"], out["acc"])


def _local_blocks(w, dw, acc):
    """Force and moment regressors (N x 3 x 10) of one body in its own frame."""
    N = w.shape[0]
    sw = skew(w)
    force = np.zeros((N, 3, N_BODY_PARAMS))
    force[:, :, 6] = acc
    force[:, :, 7:] = skew(dw) + sw @ sw
    moment = np.zeros((N, 3, N_BODY_PARAMS))
    moment[:, :, :6] = hat_operator(dw) + sw @ hat_operator(w)
    moment[:, :, 7:] = -skew(acc)
    return force, moment


def regressor_rows_open_chain(chain: SerialChain, state: ChainState, gravity,
                              n_bodies: int | None = None, kin: ChainKinematics | None = None,
                              bodies: set | None = None) -> np.ndarray:
    """Joint regressor ``K`` of an open chain, ``tau = K @ phi``.

    Row ``k`` collects the contributions of every link ``i >= k``: the moment
    (revolute) or force (prismatic) of the link's inertial wrench, carried to
    frame ``k`` and projected on the joint axis.  The sum is accumulated by an
    inward recursion so each link is visited once.

    Returns an ``(N, n_joints, 10 * n_bodies)`` array, or 2-D for a single
    state.  ``bodies`` restricts the columns that are actually filled (others
    stay zero), which saves work when only some bodies matter.
    """
    n = chain.n_joints
    single = np.asarray(state.q).ndim == 1
    if kin is None:
        kin = chain_kinematics(chain, state, gravity)
    nb = chain.n_bodies if n_bodies is None else n_bodies
    N = kin.omega.shape[0]
    P = N_BODY_PARAMS * nb
    f = np.zeros((N, 3, P))
    mo = np.zeros((N, 3, P))
    rows = np.zeros((N, n, P))
    for j in range(n - 1, -1, -1):
        if j < n - 1:
            r, p = kin.rot[:, j + 1], kin.pos[:, j + 1]
            f = r @ f
            mo = r @ mo + skew(p) @ f
        b = chain.links[j].body
        if b is not None and (bodies is None or b in bodies):
            cols = slice(N_BODY_PARAMS * b, N_BODY_PARAMS * (b + 1))
            lf, lm = _local_blocks(kin.omega[:, j], kin.omega_dot[:, j], kin.acc[:, j])
            f[:, :, cols] += lf
            mo[:, :, cols] += lm
        if chain.links[j].kind is JointKind.REVOLUTE:
            rows[:, j] = mo[:, 2]
        else:
            rows[:, j] = f[:, 2]
    return rows[0] if single else rows


def _param_array(params, nb):
    if isinstance(params, np.ndarray):
        arr = np.asarray(params, dtype=float).reshape(-1, N_BODY_PARAMS)
    else:
        arr = np.array([p.as_vector() if p is not None else np.zeros(N_BODY_PARAMS)
                        for p in params])
    if arr.shape[0] < nb:
        raise ValueError(f"need parameters for {nb} bodies, got {arr.shape[0]}")
    return arr


def newton_euler_torques(chain: SerialChain, state: ChainState, params, gravity) -> np.ndarray:
    """Joint forces by the classical Newton-Euler recursion.

    Independent of the regressor construction: inertial wrenches are formed from
    the 3x3 tensor and first-moment vector directly and propagated inward.
    ``params`` is a list of :class:`RigidBodyParams` (indexed by body) or a flat
    array of 10 values per body.  Used as a test oracle.
    """
    n = chain.n_joints
    single = np.asarray(state.q).ndim == 1
    kin = chain_kinematics(chain, state, gravity)
    arr = _param_array(params, chain.n_bodies)
    N = kin.omega.shape[0]
    f = np.zeros((N, 3))
    mo = np.zeros((N, 3))
    tau = np.zeros((N, n))
    for j in range(n - 1, -1, -1):
        if j < n - 1:
            r, p = kin.rot[:, j + 1], kin.pos[:, j + 1]
            f = np.einsum("nij,nj->ni", r, f)
            mo = np.einsum("nij,nj->ni", r, mo) + cross(p, f)
        b = chain.links[j].body
        if b is not None:
            phi = arr[b]
            inertia = inertia_matrix(phi)
            m, ms = phi[6], phi[7:10]
            w, dw, a = kin.omega[:, j], kin.omega_dot[:, j], kin.acc[:, j]
            f = f + m * a + cross(dw, ms) + cross(w, cross(w, ms))
            iw = w @ inertia.T
            mo = mo + dw @ inertia.T + cross(w, iw) + cross(ms, a)
        tau[:, j] = mo[:, 2] if chain.links[j].kind is JointKind.REVOLUTE else f[:, 2]
    return tau[0] if single else tau


def chain_energy(chain: SerialChain, q, qd, params, gravity) -> tuple[np.ndarray, np.ndarray]:
    """Kinetic and potential energy of the chain's bodies (batched)."""
    n = chain.n_joints
    zeros = np.zeros_like(np.asarray(q, dtype=float))
    kin = chain_kinematics(chain, ChainState(q, qd, zeros), np.zeros(3))
    arr = _param_array(params, chain.n_bodies)
    g = np.asarray(gravity, dtype=float)
    N = kin.omega.shape[0]
    ke = np.zeros(N)
    pe = np.zeros(N)
    for j in range(n):
        b = chain.links[j].body
        if b is None:
            continue
        phi = arr[b]
        inertia = inertia_matrix(phi)
        m, ms = phi[6], phi[7:10]
        w, v = kin.omega[:, j], kin.vel[:, j]
        ke += 0.5 * m * np.einsum("ni,ni->n", v, v)
        ke += np.einsum("ni,ni->n", v, cross(w, ms))
        ke += 0.5 * np.einsum("ni,ij,nj->n", w, inertia, w)
        ms_world = np.einsum("nij,j->ni", kin.rot_world[:, j], ms)
        pe -= (m * kin.pos_world[:, j] + ms_world) @ g
    if np.asarray(q).ndim == 1:
        return ke[0], pe[0]
    return ke, pe


def param_labels(body_names: Sequence[str]) -> list[str]:
    """Column labels such as ``Izz2`` or ``mx7`` for the given body names."""
    return [f"{p}{b}" for b in body_names for p in PARAM_NAMES]
