"""Shipped 3-PRS measurement fixture.

Run ``python -m parid.fixtures`` to regenerate ``data/3prs_fixture.*``.  The
generating parameters keep four rigid base parameters (platform inertia
terms, first moment and total mass at their nominal base values), viscous
and Coulomb friction on the prismatic actuators and the three rotor
inertias; every other identification column is zero.  The additive force
noise is small enough for the rotor terms to be identifiable.

The four rigid columns alone do not describe a physical set of bodies (the
platform rotational inertia they imply is indefinite), so forward dynamics
of the reduced model relies on the feasibility witness to fill the
eliminated columns.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .baseparams import model_base_set
from .closure import load_robot
from .excitation import (ExcitationProblem, FourierTrajectory, TrajectoryConstraints,
                         eval_trajectory, optimize_trajectory, random_initial)
from .identify import MeasurementSet, identification_blocks, trajectory_states

DATA_DIR = Path(__file__).with_name("data")
NAME = "3prs_fixture"
RELEVANT_RIGID = ("Ixx3", "Ixy3", "my3", "m3")
NOISE = 2e-6          # additive, times each joint's RMS force
SEED = 1
REPETITIONS = 5
RATE = 100.0


def fixture_truth(model=None) -> dict:
    """Identification labels and generating values of the fixture."""
    model = load_robot("3prs") if model is None else model
    bset, _ = model_base_set(model)
    lay = model.layout()
    base = dict(zip(bset.kept_labels, bset.base_values(lay.merge_values(model.nominal_raw()))))
    ref = model.reference["identified"]
    _, rigid = model.rigid_basis()
    out = {lab: float(base[lab]) if lab in RELEVANT_RIGID else 0.0 for lab in rigid}
    out.update({lab: float(ref.get(lab, 0.0)) for lab in model.friction_labels()})
    out.update({lab: float(ref[lab]) for lab in model.rotor_labels()})
    return out


def build_fixture(directory: Path = DATA_DIR) -> None:
    model = load_robot("3prs")
    basis, rigid = model.rigid_basis()
    cons = TrajectoryConstraints.from_model(model)
    prob = ExcitationProblem(model, basis, cons)
    init = prob.trajectory(random_initial(prob, np.random.default_rng(0)))
    traj = optimize_trajectory(model, basis, cons, init, budget=10,
                               rng=np.random.default_rng(0)).trajectory
    truth = fixture_truth(model)
    labels = list(rigid) + model.friction_labels() + model.rotor_labels()
    phi = np.array([truth[lab] for lab in labels])
    t = np.arange(int(round(traj.duration * RATE))) / RATE
    q_i, qd_i, qdd_i = eval_trajectory(traj, t)
    st = trajectory_states(model, q_i, qd_i, qdd_i)
    tau = identification_blocks(model, st, basis) @ phi
    rms = np.sqrt(np.mean(tau ** 2, axis=0))
    rng = np.random.default_rng(SEED)
    reps = np.stack([tau + NOISE * rms * rng.standard_normal(tau.shape)
                     for _ in range(REPETITIONS)])
    names = [model.joint_names[c] for c in model.independent]
    ms = MeasurementSet(t, np.repeat(q_i[None], REPETITIONS, axis=0), reps, RATE, names)
    ms.to_csv(directory / f"{NAME}.csv")
    traj.save(directory / f"{NAME}.trajectory.json")
    (directory / f"{NAME}.truth.json").write_text(json.dumps(truth, indent=1) + "\n")


def fixture_paths() -> dict:
    """Installed locations of the fixture files."""
    root = resources.files("parid.data")
    return {k: Path(str(root.joinpath(f"{NAME}{suffix}")))
            for k, suffix in (("measurements", ".csv"), ("trajectory", ".trajectory.json"),
                              ("truth", ".truth.json"))}


def load_fixture() -> tuple[MeasurementSet, dict]:
    p = fixture_paths()
    ms = MeasurementSet.from_csv(p["measurements"])
    ms.trajectory = FourierTrajectory.load(p["trajectory"]).to_dict()
    return ms, json.loads(p["truth"].read_text())


if __name__ == "__main__":
    build_fixture()
