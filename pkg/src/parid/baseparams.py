"""Identifiable (base) parameters from the rank structure of the observation matrix.

The observation matrix ``W`` stacks regressor rows over many random states.
Its numeric rank is the number of base parameters; a base set is a choice of
linearly independent columns ``W_1`` with the remaining ones expressed as
``W_2 = W_1 B``, so that ``W phi = W_1 (phi_1 + B phi_2)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .closure import (
    ParallelRobotModel,
    closed_chain_rigid_regressor,
    complete_state,
    solve_from_home,
    within_limits,
)
from .errors import InvalidInput, RankUnstable

RANK_SAFETY = 10.0
SNAP_TOL = 1e-8
MAX_CANDIDATES = 8


@dataclass
class ObservationSystem:
    """Stacked regressor and forces.

    ``layout`` is ``"joint-major"`` (all samples of joint 1, then joint 2 ...)
    or ``"sample-major"``; ``dof`` is the number of rows per sample.
    """

    W: np.ndarray
    Y: np.ndarray | None = None
    dof: int = 1
    layout: str = "joint-major"
    labels: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if self.W.ndim != 2 or self.W.size == 0:
            raise InvalidInput("observation matrix must be a non-empty 2-D array")
        if self.W.shape[0] % self.dof:
            raise InvalidInput("row count is not a multiple of the DOF")
        if self.Y is not None:
            self.Y = np.asarray(self.Y, dtype=float).ravel()
            if self.Y.shape[0] != self.W.shape[0]:
                raise InvalidInput("force vector length does not match W")

    @property
    def n_samples(self) -> int:
        return self.W.shape[0] // self.dof

    @classmethod
    def from_blocks(cls, K, tau=None, labels=None, meta=None) -> "ObservationSystem":
        """Stack per-sample blocks ``K (N, dof, p)`` and ``tau (N, dof)`` joint-major."""
        K = np.asarray(K, dtype=float)
        N, dof, p = K.shape
        W = np.transpose(K, (1, 0, 2)).reshape(dof * N, p)
        Y = None if tau is None else np.asarray(tau, dtype=float).T.reshape(-1)
        return cls(W, Y, dof, "joint-major", list(labels or []), dict(meta or {}))

    def joint_rows(self, j: int) -> slice:
        n = self.n_samples
        return slice(j * n, (j + 1) * n)

    def select(self, cols) -> "ObservationSystem":
        cols = list(cols)
        labels = [self.labels[c] for c in cols] if self.labels else []
        return ObservationSystem(self.W[:, cols], self.Y, self.dof, self.layout, labels,
                                 dict(self.meta))


@dataclass
class BaseParameterSet:
    """One admissible choice of base parameters.

    ``B`` has one row per kept column and one column per dropped column:
    ``W[:, dropped] == W[:, kept] @ B`` and ``phi_base = phi[kept] + B phi[dropped]``.
    """

    kept: list[int]
    dropped: list[int]
    B: np.ndarray
    column_labels: list[str]
    labels: list[str]
    symbolic: list[bool]
    rank: int
    singular_values: np.ndarray | None = None

    @property
    def n_base(self) -> int:
        return len(self.kept)

    @property
    def kept_labels(self) -> list[str]:
        return [self.column_labels[k] for k in self.kept]

    def base_values(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        return phi[self.kept] + self.B @ phi[self.dropped]

    def selection(self) -> np.ndarray:
        """``(n_cols, n_base)`` 0/1 matrix picking the kept columns."""
        S = np.zeros((len(self.column_labels), len(self.kept)))
        S[self.kept, np.arange(len(self.kept))] = 1.0
        return S

    def grouped(self) -> list[list[tuple[int, float]]]:
        out = []
        for r, k in enumerate(self.kept):
            grp = [(k, 1.0)]
            grp += [(d, float(self.B[r, c])) for c, d in enumerate(self.dropped)
                    if self.B[r, c] != 0.0]
            out.append(grp)
        return out

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "kept": [self.column_labels[k] for k in self.kept],
            "labels": self.labels,
            "symbolic": self.symbolic,
            "groupings": [[[self.column_labels[i], c] for i, c in grp] for grp in self.grouped()],
        }


def numeric_rank(W, safety: float = RANK_SAFETY):
    """Rank with tolerance ``max(rows, cols) * s_max * eps * safety``.

    Returns ``(rank, singular_values, tol)``.
    """
    W = np.asarray(W, dtype=float)
    if W.size == 0:
        raise InvalidInput("empty matrix")
    s = np.linalg.svd(W, compute_uv=False)
    tol = max(W.shape) * (s[0] if s.size else 0.0) * np.finfo(float).eps * safety
    return int(np.sum(s > tol)), s, tol


def random_states(model: ParallelRobotModel, n: int, rng, branch: str | None = None,
                  max_rounds: int = 20):
    """``n`` random closure-consistent states on one assembly branch.

    Actuated positions are uniform within their limits; passive coordinates
    are solved from home and the sample is rejected if any coordinate leaves
    its limits.  Rates are uniform in ``[-limit, limit]``.
    """
    ind = list(model.independent)
    lo, hi = model.q_min[ind], model.q_max[ind]
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise InvalidInput("random sampling needs finite limits on the actuated joints")
    accepted = []
    count = 0
    for _ in range(max_rounds):
        q_i = rng.uniform(lo, hi, (max(2 * (n - count), 16), len(ind)))
        q, ok = solve_from_home(model, q_i, branch)
        ok &= within_limits(model, q)
        accepted.append(q[ok])
        count += int(ok.sum())
        if count >= n:
            break
    q = np.concatenate(accepted)[:n]
    if q.shape[0] < n:
        raise InvalidInput(f"only {q.shape[0]} of {n} random poses are reachable")
    qd_i = rng.uniform(-1, 1, (n, len(ind))) * _finite(model.qd_max[ind])
    qdd_i = rng.uniform(-1, 1, (n, len(ind))) * _finite(model.qdd_max[ind])
    return complete_state(model, q, qd_i, qdd_i)


def _finite(x, default=1.0):
    return np.where(np.isfinite(x), x, default)


def random_observation(model: ParallelRobotModel, n: int, rng, basis=None, branch=None):
    """Rigid-body observation matrix over ``n`` random states (sample-major)."""
    st = random_states(model, n, rng, branch)
    K = closed_chain_rigid_regressor(model, st, basis=basis)
    return K.reshape(-1, K.shape[-1])


def stable_rank(model: ParallelRobotModel, rng, n: int = 2000, basis=None) -> int:
    """Rank of the random observation matrix, checked against twice the samples."""
    r1 = numeric_rank(random_observation(model, n, rng, basis))[0]
    r2 = numeric_rank(random_observation(model, 2 * n, rng, basis))[0]
    if r1 != r2:
        raise RankUnstable(f"rank {r1} with {n} poses but {r2} with {2 * n}")
    return r1


# ---------------------------------------------------------------------------
# symbolic coefficients

_MULTIPLIERS = (2.0, 3.0, 0.5, 4.0, 1.0 / 3.0)


def _geometry_terms(geometry: dict, ratios: bool = True) -> list[tuple[float, str]]:
    names = [(k, float(v)) for k, v in sorted(geometry.items()) if v != 0.0]
    out = [(v, k) for k, v in names]
    out += [(v * v, f"{k}^2") for k, v in names]
    out += [(v1 * v2, f"{k1} {k2}") for (k1, v1), (k2, v2) in itertools.combinations(names, 2)]
    if ratios:
        out += [(v1 / v2, f"{k1}/{k2}") for (k1, v1), (k2, v2) in itertools.permutations(names, 2)]
        out += [(1.0 / v, f"1/{k}") for k, v in names]
    return out


def _close(a, c, tol):
    return abs(a - c) <= tol * max(1.0, abs(c))


def _mult_text(m):
    f = Fraction(m).limit_denominator(3)
    return "" if f == 1 else f"{f} "


def snap_coefficient(c: float, geometry: dict | None = None, tol: float = SNAP_TOL):
    """Exact form of a regression coefficient.

    Tried in order: small integers, a single geometry constant or product of
    two, small rationals, multiples / ratios / inverses of those, and finally
    sums of two signed products.  Returns ``(value, text, symbolic)``;
    unmatched values keep their numeric form.
    """
    geometry = geometry or {}
    r = round(c)
    if abs(r) <= 12 and _close(r, c, tol):
        return float(r), str(int(r)), True
    plain = _geometry_terms(geometry, ratios=False)
    for val, name in plain:
        for sgn in (1.0, -1.0):
            if _close(sgn * val, c, tol):
                return sgn * val, ("-" if sgn < 0 else "") + name, True
    frac = Fraction(c).limit_denominator(12)
    if _close(float(frac), c, tol):
        return float(frac), str(frac), True
    terms = _geometry_terms(geometry)
    for mult in _MULTIPLIERS + (1.0,):
        for val, name in terms:
            for sgn in (1.0, -1.0):
                v = sgn * mult * val
                if _close(v, c, tol):
                    return v, f"{'-' if sgn < 0 else ''}{_mult_text(mult)}{name}", True
    if plain:
        vals = np.array([v for v, _ in plain])
        signed = np.concatenate([vals, -vals])
        total = signed[:, None] + signed[None, :]
        hit = np.argwhere(np.abs(total - c) <= tol * max(1.0, abs(c)))
        if hit.size:
            i, j = hit[0]
            n = len(plain)
            parts = []
            for k in (i, j):
                sign = "-" if k >= n else "+"
                parts.append(f"{sign} {plain[k % n][1]}")
            text = " ".join(parts).lstrip("+ ")
            return float(signed[i] + signed[j]), f"({text})", True
    return c, f"{c:.10g}", False


def _label(kept_name, terms, geometry):
    """Symbolic label such as ``Izz2 - lr^2 (m1 + m2)``; returns (text, symbolic)."""
    groups: dict[str, list[str]] = {}
    order = []
    ok = True
    for name, c in terms:
        _, text, sym = snap_coefficient(c, geometry)
        ok &= sym
        neg = text.startswith("-")
        key = text[1:] if neg else text
        key = ("-" if neg else "+") + key
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(name)
    out = kept_name
    for key in order:
        sign, coef = key[0], key[1:]
        names = groups[key]
        body = names[0] if len(names) == 1 else "(" + " + ".join(names) + ")"
        coef = "" if coef == "1" else coef + " "
        out += f" {sign} {coef}{body}"
    return out, ok


# ---------------------------------------------------------------------------
# base-set construction

def _compress(W):
    """Upper-triangular factor with the same column dependencies as ``W``."""
    W = np.asarray(W, dtype=float)
    if W.shape[0] > W.shape[1]:
        return np.linalg.qr(W, mode="r")
    return W


def _greedy(R, order, rank, rel_tol=1e-7):
    """Columns of ``R`` taken in ``order`` whenever they add a new direction."""
    norms = np.linalg.norm(R, axis=0)
    Q = np.zeros((R.shape[0], 0))
    kept = []
    for j in order:
        if norms[j] == 0.0:
            continue
        v = R[:, j] / norms[j]
        r = v - Q @ (Q.T @ v)
        r = r - Q @ (Q.T @ r)
        nr = np.linalg.norm(r)
        if nr > rel_tol:
            Q = np.column_stack([Q, r / nr])
            kept.append(j)
            if len(kept) == rank:
                break
    return kept


def compute_base_grouping(W, labels=None, preferred=(), deferred=(), geometry=None,
                          rank: int | None = None, order=None) -> BaseParameterSet:
    """One base set, chosen greedily in priority order.

    Columns in ``preferred`` are tried first; those in ``deferred`` last,
    walking that list backwards so its final entry is the one kept when a
    whole group is dependent (with masses deferred, the highest-numbered mass
    carries the total mass).  An explicit ``order`` overrides both.
    Coefficients of ``B`` within 1e-8 of a rational or geometric value are
    snapped to it.
    """
    W = np.asarray(W, dtype=float)
    n = W.shape[1]
    labels = list(labels) if labels is not None else [f"c{j}" for j in range(n)]
    r, s, _ = numeric_rank(W) if rank is None else (rank, None, None)
    R = _compress(W)
    if order is None:
        pref = [j for j in preferred]
        late = [j for j in deferred if j not in pref][::-1]
        mid = [j for j in range(n) if j not in pref and j not in late]
        order = pref + mid + late
    kept = sorted(_greedy(R, order, r))
    if len(kept) != r:
        raise RankUnstable(f"greedy selection found {len(kept)} columns for rank {r}")
    dropped = [j for j in range(n) if j not in kept]
    if dropped:
        B = np.linalg.lstsq(R[:, kept], R[:, dropped], rcond=None)[0]
        B[np.abs(B) < 1e-10 * max(1.0, np.abs(B).max())] = 0.0
    else:
        B = np.zeros((len(kept), 0))
    names, sym = [], []
    for row, k in enumerate(kept):
        for col in range(B.shape[1]):
            if B[row, col] != 0.0:
                B[row, col] = snap_coefficient(B[row, col], geometry)[0]
        terms = [(labels[d], B[row, c]) for c, d in enumerate(dropped) if B[row, c] != 0.0]
        text, ok = _label(labels[k], terms, geometry)
        names.append(text)
        sym.append(ok)
    return BaseParameterSet(kept, dropped, B, labels, names, sym, r, s)


def regrouping_error(W, bset: BaseParameterSet, phis) -> float:
    """Max relative mismatch between ``W phi`` and ``W_kept phi_base`` over ``phis``."""
    W = np.asarray(W, dtype=float)
    worst = 0.0
    for phi in np.atleast_2d(phis):
        full = W @ phi
        red = W[:, bset.kept] @ bset.base_values(phi)
        worst = max(worst, np.linalg.norm(full - red) / max(np.linalg.norm(full), 1e-300))
    return worst


def enumerate_candidate_sets(W, k: int = MAX_CANDIDATES, labels=None, preferred=(),
                             deferred=(), geometry=None, check_tol: float = 1e-10,
                             rng=None) -> list[BaseParameterSet]:
    """Up to ``k`` base sets with distinct kept columns.

    Starting from the preferred ordering, each kept column of every set found
    so far is in turn pushed to the back of the priority order; new kept sets
    are added breadth-first.  Every returned set passes a regrouping check on
    random parameter vectors.
    """
    k = min(k, MAX_CANDIDATES)
    W = np.asarray(W, dtype=float)
    n = W.shape[1]
    r = numeric_rank(W)[0]
    pref = list(preferred)
    late = [j for j in deferred if j not in pref][::-1]
    base_order = pref + [j for j in range(n) if j not in pref and j not in late] + late
    found, seen, queue = [], set(), [base_order]
    rng = np.random.default_rng(0) if rng is None else rng
    phis = rng.standard_normal((20, n))
    while queue and len(found) < k:
        order = queue.pop(0)
        bset = compute_base_grouping(W, labels, geometry=geometry, rank=r, order=order)
        key = tuple(bset.kept)
        if key in seen:
            continue
        seen.add(key)
        if regrouping_error(W, bset, phis) > check_tol:
            continue
        found.append(bset)
        for j in bset.kept:
            if len(bset.dropped) == 0:
                break
            queue.append([c for c in order if c != j] + [j])
    return found


def select_base_set(candidates, trajectory_optimizer):
    """Candidate with the lowest achieved condition number.

    ``trajectory_optimizer(candidate) -> kappa`` runs the excitation design
    for one candidate.  Returns ``(best, kappas)``.
    """
    candidates = list(candidates)
    if not candidates:
        raise InvalidInput("no candidate base sets")
    if len(candidates) == 1:
        return candidates[0], [None]
    kappas = [float(trajectory_optimizer(c)) for c in candidates]
    return candidates[int(np.argmin(kappas))], kappas


def mass_labels(labels) -> list[int]:
    """Indices of mass columns (``m1``, ``m2`` ...), in order."""
    return [j for j, lab in enumerate(labels) if lab.startswith("m") and lab[1:].isdigit()]


def model_base_set(model: ParallelRobotModel, rng=None, n: int = 2000, merged: bool = True,
                   prefer_masses_last: bool = True) -> tuple[BaseParameterSet, np.ndarray]:
    """Base set of the robot's rigid-body model (symmetry-merged by default).

    Mass columns are deferred so they are grouped into the surviving mass
    parameter (total-mass style groupings).  When the robot file lists
    ``base_columns`` and ``merged`` is set, that exact column choice is used.
    Returns the set and the random observation matrix it was computed from.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    lay = model.layout(merged)
    W = random_observation(model, n, rng, basis=lay.matrix)
    labels = list(lay.labels)
    deferred = mass_labels(labels) if prefer_masses_last else []
    if merged and model.base_columns is not None:
        wanted = [labels.index(c) for c in model.base_columns]
        order = wanted + [j for j in range(len(labels)) if j not in wanted]
        bset = compute_base_grouping(W, labels, geometry=model.geometry, order=order)
        if sorted(bset.kept) != sorted(wanted):
            raise RankUnstable("robot file base_columns are not a base set of the merged model")
        return bset, W
    return compute_base_grouping(W, labels, deferred=deferred, geometry=model.geometry), W


def base_parameter_report(model: ParallelRobotModel, bset: BaseParameterSet, W,
                          candidates=(), kappas=()) -> dict:
    r, s, tol = numeric_rank(W)
    gap = float(s[r - 1] / s[r]) if r < s.size and s[r] > 0 else float("inf")
    return {
        "robot": model.name,
        "rank": r,
        "n_columns": int(W.shape[1]),
        "tolerance": float(tol),
        "singular_values": [float(v) for v in s],
        "singular_value_gap": gap,
        "base_set": bset.to_dict(),
        "candidates": [
            {"kept": c.kept_labels, "labels": c.labels,
             "kappa": None if kap is None else float(kap)}
            for c, kap in itertools.zip_longest(candidates, kappas)
            if c is not None
        ],
    }
