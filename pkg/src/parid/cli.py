"""Batch command-line front end.

Every subcommand reads an optional JSON config (``--config``); keys are the
long option names with dashes or underscores.  Flags given on the command
line win over the config, which wins over the built-in defaults.  Each
command writes its outputs into ``--out`` and prints the path of its main
report.  Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baseparams import base_parameter_report, enumerate_candidate_sets, mass_labels, model_base_set
from .closure import load_robot, solve_from_home
from .errors import InvalidInput, NeverFeasible, NoConvergence, ParidError
from .excitation import (ExcitationProblem, FourierTrajectory, TrajectoryConstraints,
                         eval_trajectory, optimize_trajectory, random_initial, verify_trajectory)
from .fdyn import TrajectoryTorques, identified_parameters, integrate
from .identify import (MeasurementSet, estimate_variances, identify_measurements,
                       observation_from_measurements, predict_forces, relative_error_metric,
                       relative_std, simulate_measurements, wls_solve)

log = logging.getLogger("parid")

COMMON = {"robot": "3prs", "out": ".", "seed": 0, "branch": None, "verbose": False}

DEFAULTS = {
    "base-params": {"samples": 2000, "candidates": 4, "unmerged": False, "name": "base_params"},
    "traj-opt": {"budget": 30, "starts": 1, "amplitude": 0.5, "init": None,
                 "all_columns": False, "name": "trajectory"},
    "simulate": {"trajectory": None, "repetitions": 5, "rate": 100.0, "noise": 0.01,
                 "noise_kind": "relative", "position_noise": 0.0, "truth": None,
                 "name": "measurements"},
    "identify": {"measurements": None, "trajectory": None, "grid_points": 50,
                 "asymmetric": False, "no_feasibility": False, "name": "identified"},
    "validate": {"identified": None, "measurements": [], "trajectories": [],
                 "name": "validation"},
    "fdyn": {"identified": None, "measurements": None, "trajectory": None,
             "torque_source": "measured", "duration": None, "rtol": 1e-9, "atol": 1e-9,
             "models": ["complete", "reduced"], "completion": "auto", "name": "fdyn"},
    "report": {"inputs": [], "name": "summary"},
}

HELP = {
    "robot": "bundled robot name (3prs, 3rps) or robot JSON file",
    "out": "output directory",
    "seed": "seed of every random draw",
    "branch": "assembly branch of the robot file's home poses",
    "samples": "random states for the rank analysis",
    "candidates": "maximum number of candidate base sets",
    "unmerged": "analyse the raw columns without symmetry merging",
    "budget": "SLSQP iterations per start",
    "starts": "optimizer starts (the first from --init or a random trajectory)",
    "amplitude": "harmonic amplitude of the random initial trajectory (fraction of range)",
    "init": "initial trajectory JSON",
    "all_columns": "objective includes friction and rotor columns",
    "trajectory": "trajectory JSON",
    "repetitions": "repetitions M of the trajectory",
    "rate": "sample rate [Hz]",
    "noise": "force noise std (scalar or per joint, relative or additive)",
    "noise_kind": "relative | additive",
    "position_noise": "position noise std (scalar or per joint)",
    "truth": "JSON with raw_phi / friction / rotor overriding the robot nominals",
    "measurements": "measurement CSV (validate: one or more)",
    "grid_points": "feasibility grid points per axis",
    "asymmetric": "separate friction coefficients per motion direction",
    "no_feasibility": "skip the feasibility gate (first WLS estimate is returned)",
    "identified": "identified report JSON",
    "trajectories": "trajectory JSON per validation measurement file",
    "torque_source": "measured (recorded torques) | model (inverse dynamics of the trajectory)",
    "duration": "simulated span [s] (default: whole record)",
    "rtol": "integrator relative tolerance",
    "atol": "integrator absolute tolerance",
    "models": "models to simulate: complete and/or reduced",
    "completion": "eliminated rigid columns: auto | none | witness (filled from the feasibility witness)",
    "inputs": "report JSON files (default: every report in --out)",
    "name": "basename of the main output",
}

# options taking several values, per command
LISTS = {("validate", "measurements"), ("validate", "trajectories"), ("fdyn", "models"),
         ("report", "inputs")}


# ---------------------------------------------------------------------------
# configuration

def _norm(key: str) -> str:
    return key.replace("-", "_")


def resolve_config(cmd: str, config: dict, flags: dict) -> dict:
    """Defaults < config file < command-line flags."""
    known = {**COMMON, **DEFAULTS[cmd]}
    cfg = dict(known)
    for k, v in config.items():
        k = _norm(k)
        if k not in known:
            raise InvalidInput(f"unknown config key {k!r} for {cmd}")
        cfg[k] = v
    for k, v in flags.items():
        if v is not None and k in known:
            cfg[k] = v
    return cfg


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def _provenance(cmd, cfg, model) -> dict:
    return {"command": cmd, "version": __version__, "config_hash": config_hash(cfg),
            "robot": model.name, "robot_hash": model.source_hash}


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InvalidInput(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path} is not valid JSON: {exc}") from exc


def _per_joint(value, n, what) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n, float(arr))
    if arr.shape != (n,) or np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{what} must be a non-negative scalar or one value per joint")
    return arr


def _require(cfg, key):
    if not cfg.get(key):
        raise InvalidInput(f"--{key.replace('_', '-')} is required")
    return cfg[key]


def _model_constraints(model):
    return TrajectoryConstraints.from_model(model)


def _load_measurements(path, traj_path=None) -> MeasurementSet:
    ms = MeasurementSet.from_csv(path)
    side = Path(path).with_suffix(".trajectory.json")
    if traj_path:
        ms.trajectory = _load_json(traj_path)
    elif side.exists():
        ms.trajectory = _load_json(side)
    return ms


# ---------------------------------------------------------------------------
# commands

def cmd_base_params(cfg, model, out: Path) -> Path:
    rng = np.random.default_rng(cfg["seed"])
    merged = not cfg["unmerged"]
    bset, W = model_base_set(model, rng, int(cfg["samples"]), merged=merged)
    labels = list(model.layout(merged).labels)
    cands = enumerate_candidate_sets(W, int(cfg["candidates"]), labels,
                                     deferred=mass_labels(labels), geometry=model.geometry,
                                     rng=np.random.default_rng(cfg["seed"]))
    rep = base_parameter_report(model, bset, W, cands)
    rep["provenance"] = _provenance("base-params", cfg, model)
    path = out / f"{cfg['name']}.json"
    _dump(path, rep)
    return path


def cmd_traj_opt(cfg, model, out: Path) -> Path:
    rng = np.random.default_rng(cfg["seed"])
    basis, _ = model.rigid_basis()
    cons = _model_constraints(model)
    rigid_only = not cfg["all_columns"]
    if cfg["init"]:
        init = FourierTrajectory.load(cfg["init"])
    else:
        prob = ExcitationProblem(model, basis, cons, branch=cfg["branch"], rigid_only=rigid_only)
        init = prob.trajectory(random_initial(prob, rng, amplitude=float(cfg["amplitude"])))
    res = optimize_trajectory(model, basis, cons, init, int(cfg["budget"]), int(cfg["starts"]),
                              rng, branch=cfg["branch"], rigid_only=rigid_only)
    check = verify_trajectory(model, res.trajectory, cons, branch=cfg["branch"])
    traj_path = out / f"{cfg['name']}.json"
    res.trajectory.save(traj_path)
    rep = {"kappa": res.kappa, "kappa_init": res.kappa_init, "history": res.history,
           "n_evals": res.n_evals, "verified": check, "trajectory": traj_path.name,
           "provenance": _provenance("traj-opt", cfg, model)}
    path = out / f"{cfg['name']}.report.json"
    _dump(path, rep)
    _write_columns(out / f"{cfg['name']}.kappa.dat", np.arange(len(res.history)),
                   [res.history])
    return path


def _truth(cfg, model):
    if not cfg["truth"]:
        return None, None, None
    t = _load_json(cfg["truth"]) if isinstance(cfg["truth"], str) else cfg["truth"]
    get = lambda k: None if t.get(k) is None else np.asarray(t[k], dtype=float)
    return get("raw_phi"), get("friction"), get("rotor")


def cmd_simulate(cfg, model, out: Path) -> Path:
    traj = FourierTrajectory.load(_require(cfg, "trajectory"))
    reps = int(cfg["repetitions"])
    rate = float(cfg["rate"])
    if reps < 2:
        raise InvalidInput("at least two repetitions are needed")
    if not rate > 2 * traj.f * traj.n_harmonics:
        raise InvalidInput(f"sample rate {rate} Hz is below the Nyquist rate of the trajectory")
    dof = model.dof
    noise = _per_joint(cfg["noise"], dof, "noise")
    pos_noise = _per_joint(cfg["position_noise"], dof, "position_noise")
    raw, fr, rot = _truth(cfg, model)
    rng = np.random.default_rng(cfg["seed"])
    ms, _ = simulate_measurements(model, traj, reps, noise, rng, rate, raw, fr, rot,
                                  cfg["noise_kind"], cfg["branch"])
    if np.any(pos_noise > 0):
        ms.q = ms.q + pos_noise * rng.standard_normal(ms.q.shape)
    path = out / f"{cfg['name']}.csv"
    ms.to_csv(path)
    traj.save(path.with_suffix(".trajectory.json"))
    rep = {"file": path.name, "repetitions": reps, "samples": ms.n_samples, "rate": rate,
           "noise": noise, "noise_kind": cfg["noise_kind"], "position_noise": pos_noise,
           "variances": estimate_variances(ms), "provenance": _provenance("simulate", cfg, model)}
    _dump(out / f"{cfg['name']}.report.json", rep)
    return path


def _complete_fit(obs, var):
    res = wls_solve(obs, var)
    return {"parameters": [{"label": lab, "value": float(v), "rel_std": _finite(s)}
                           for lab, v, s in zip(obs.labels, res.phi,
                                                relative_std(res.phi, res.cov))],
            "s2": res.s2}


def _finite(x):
    return float(x) if np.isfinite(x) else "inf"


def cmd_identify(cfg, model, out: Path) -> Path:
    ms = _load_measurements(_require(cfg, "measurements"), cfg["trajectory"])
    bset, _ = model_base_set(model, np.random.default_rng(cfg["seed"]))
    try:
        ident, obs = identify_measurements(model, ms, bset, asymmetric=bool(cfg["asymmetric"]),
                                           fit=bool(ms.trajectory),
                                           feasibility=not cfg["no_feasibility"],
                                           grid_points=int(cfg["grid_points"]))
    except NeverFeasible as exc:
        _dump(out / f"{cfg['name']}.failed.json",
              {"error": "NeverFeasible", "message": str(exc), "trace": exc.trace,
               "provenance": _provenance("identify", cfg, model)})
        raise
    var = estimate_variances(ms) / ms.repetitions
    rep = {"reduced": ident.as_dict(), "complete": _complete_fit(obs, var),
           "n_reduced": len(ident.labels), "n_complete": len(obs.labels),
           "asymmetric": bool(cfg["asymmetric"]), "measurements": Path(cfg["measurements"]).name,
           "provenance": _provenance("identify", cfg, model)}
    path = out / f"{cfg['name']}.json"
    _dump(path, rep)
    _write_columns(out / f"{cfg['name']}.relstd.dat", np.arange(len(ident.labels)),
                   [np.minimum(ident.rel_std, 1e6)])
    return path


def _model_params(rep, which):
    block = rep[which]
    labels = [p["label"] for p in block["parameters"]]
    values = [p["value"] for p in block["parameters"]]
    return labels, values


def validation_errors(model, rep, ms: MeasurementSet) -> dict:
    """Relative force error of the complete and reduced models on one record."""
    obs = observation_from_measurements(model, ms, asymmetric=bool(rep.get("asymmetric", False)))
    meas = ms.mean_tau()
    out = {}
    for which in ("complete", "reduced"):
        per, mean = relative_error_metric(meas, predict_forces(obs, *_model_params(rep, which)))
        out[which] = {"per_joint": per, "mean": mean}
    return out


def cmd_validate(cfg, model, out: Path) -> Path:
    rep = _load_json(_require(cfg, "identified"))
    files = _require(cfg, "measurements")
    files = [files] if isinstance(files, str) else list(files)
    trajs = list(cfg["trajectories"] or [])
    if trajs and len(trajs) != len(files):
        raise InvalidInput("give one trajectory per validation measurement file")
    runs = []
    for k, f in enumerate(files):
        ms = _load_measurements(f, trajs[k] if trajs else None)
        runs.append({"file": Path(f).name, **validation_errors(model, rep, ms)})
    summary = {}
    for which in ("complete", "reduced"):
        vals = np.array([r[which]["mean"] for r in runs])
        summary[which] = {"mean": float(vals.mean()), "deviation": float(vals.std())}
    summary["reduced_not_worse"] = summary["reduced"]["mean"] <= summary["complete"]["mean"]
    res = {"runs": runs, "summary": summary, "provenance": _provenance("validate", cfg, model)}
    path = out / f"{cfg['name']}.json"
    _dump(path, res)
    _write_columns(out / f"{cfg['name']}.dat", np.arange(len(runs)),
                   [[r["complete"]["mean"] for r in runs], [r["reduced"]["mean"] for r in runs]])
    return path


def cmd_fdyn(cfg, model, out: Path) -> Path:
    rep = _load_json(_require(cfg, "identified"))
    source = cfg["torque_source"]
    if source not in ("measured", "model"):
        raise InvalidInput("torque_source must be 'measured' or 'model'")
    traj = FourierTrajectory.load(cfg["trajectory"]) if cfg["trajectory"] else None
    ms = None
    if source == "measured":
        ms = _load_measurements(_require(cfg, "measurements"), cfg["trajectory"])
        if traj is None and ms.trajectory:
            traj = FourierTrajectory.from_dict(ms.trajectory)
    if traj is None:
        raise InvalidInput("fdyn needs the generating trajectory (initial state and reference)")
    t_end = float(cfg["duration"]) if cfg["duration"] else traj.duration
    q0, qd0, _ = eval_trajectory(traj, 0.0)
    names = [model.joint_names[c] for c in model.independent]
    q_start, ok = solve_from_home(model, q0, cfg["branch"])
    if not ok[0]:
        raise NoConvergence("the trajectory start is not assemblable")
    q_start = q_start[0]
    results, timing, curves = {}, {}, {}
    models = cfg["models"]
    models = [models] if isinstance(models, str) else list(models)
    for which in models:
        if which not in ("complete", "reduced"):
            raise InvalidInput(f"unknown model {which!r}")
        params, used = identified_parameters(model, *_model_params(rep, which),
                                             rep[which].get("feasibility_witness"),
                                             cfg["completion"], q_start)
        if source == "measured":
            tau, times = ms.mean_tau(), ms.time
        else:
            tau, times = TrajectoryTorques(model, params, traj, branch=cfg["branch"]), None
        try:
            sim = integrate(model, params, tau, (q0[0], qd0[0]), (0.0, t_end),
                            rtol=float(cfg["rtol"]), atol=float(cfg["atol"]), times=times,
                            branch=cfg["branch"])
        except ParidError as exc:
            results[which] = {"status": "failed", "error": type(exc).__name__,
                              "message": str(exc), "time": getattr(exc, "time", None),
                              "completion": used}
            continue
        ref, _, _ = eval_trajectory(traj, sim.t)
        err = sim.q_i - ref
        results[which] = {"status": "ok", "max_abs_error": np.max(np.abs(err), axis=0),
                          "rms_error": np.sqrt(np.mean(err ** 2, axis=0)),
                          "max_closure_residual": sim.max_residual,
                          "events": len(sim.events), "steps": int(sim.t.size),
                          "completion": used}
        timing[which] = {"wall_time": sim.wall_time, "rhs_evaluations": sim.n_rhs}
        sim.to_csv(out / f"{cfg['name']}.{which}.csv", names)
        curves[which] = (sim.t, sim.q_i)
    grid = np.linspace(0.0, t_end, 401)
    ref, _, _ = eval_trajectory(traj, grid)
    files = []
    for j, n in enumerate(names):
        _write_columns(out / f"{cfg['name']}.{n}.reference.dat", grid, [ref[:, j]])
        files.append((f"{cfg['name']}.{n}.reference.dat", f"{n} reference"))
        for which, (t, q) in curves.items():
            _write_columns(out / f"{cfg['name']}.{n}.{which}.dat", t, [q[:, j]])
            files.append((f"{cfg['name']}.{n}.{which}.dat", f"{n} {which}"))
    _gnuplot(out / f"{cfg['name']}.gp", files, "time [s]", "q")
    res = {"torque_source": source, "duration": t_end, "models": results,
           "provenance": _provenance("fdyn", cfg, model)}
    path = out / f"{cfg['name']}.json"
    _dump(path, res)
    # wall times differ between runs, so they live outside the main report
    _dump(out / f"{cfg['name']}.timing.json", timing)
    return path


def cmd_report(cfg, model, out: Path) -> Path:
    inputs = cfg["inputs"] or sorted(str(p) for p in out.glob("*.json")
                                     if not p.name.startswith(cfg["name"])
                                     and not p.name.endswith(".timing.json")
                                     and not p.name.endswith(".trajectory.json"))
    summary = {"reports": {}}
    for p in inputs:
        rep = _load_json(p)
        prov = rep.get("provenance") if isinstance(rep, dict) else None
        if not prov:
            continue
        key = Path(p).name
        item = {"command": prov.get("command"), "config_hash": prov.get("config_hash")}
        cmd = prov.get("command")
        if cmd == "base-params":
            item.update(rank=rep["rank"], n_base=len(rep["base_set"]["kept"]))
        elif cmd == "traj-opt":
            item.update(kappa=rep["kappa"], kappa_init=rep["kappa_init"])
        elif cmd == "identify":
            item.update(n_complete=rep["n_complete"], n_reduced=rep["n_reduced"],
                        relevant=[q["label"] for q in rep["reduced"]["parameters"]])
        elif cmd == "validate":
            item.update(rep["summary"])
        elif cmd == "fdyn":
            item.update(models={k: v.get("status") for k, v in rep["models"].items()})
        summary["reports"][key] = item
    plots = sorted(p.name for p in out.glob("*.dat"))
    summary["plot_data"] = plots
    summary["provenance"] = _provenance("report", cfg, model)
    _gnuplot(out / f"{cfg['name']}.gp", [(p, p[:-4]) for p in plots], "x", "y", multiplot=True)
    path = out / f"{cfg['name']}.json"
    _dump(path, summary)
    return path


COMMANDS = {"base-params": cmd_base_params, "traj-opt": cmd_traj_opt, "simulate": cmd_simulate,
            "identify": cmd_identify, "validate": cmd_validate, "fdyn": cmd_fdyn,
            "report": cmd_report}


# ---------------------------------------------------------------------------
# plot data

def _write_columns(path: Path, x, cols) -> None:
    data = np.column_stack([np.asarray(x, dtype=float)] + [np.asarray(c, dtype=float) for c in cols])
    np.savetxt(path, data, fmt="%.10g")


def _gnuplot(path: Path, files, xlabel, ylabel, multiplot=False) -> None:
    lines = ["set terminal pngcairo size 1000,700", f"set output '{path.stem}.png'",
             f"set xlabel '{xlabel}'", f"set ylabel '{ylabel}'", "set grid"]
    if multiplot:
        for f, title in files:
            lines.append(f"plot '{f}' using 1:2 with linespoints title '{title}'")
    elif files:
        plots = [f"'{f}' using 1:2 with lines title '{title}'" for f, title in files]
        lines.append("plot " + ", \\\n     ".join(plots))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"parid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, defaults in DEFAULTS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--error-json", action="store_true",
                       help="print a machine-readable error object on failure")
        for key in list(COMMON) + list(defaults):
            flag = "--" + key.replace("_", "-")
            default = defaults.get(key, COMMON.get(key))
            if isinstance(default, bool):
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None,
                               help=HELP.get(key, ""))
            elif (cmd, key) in LISTS:
                p.add_argument(flag, dest=key, nargs="+", default=None, help=HELP.get(key, ""))
            else:
                kind = type(default) if isinstance(default, (int, float)) else None
                p.add_argument(flag, dest=key, default=None, help=HELP.get(key, ""),
                               **({"type": kind} if kind else {}))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = vars(args)
    cmd = flags.pop("command")
    want_json = flags.pop("error_json")
    cfg_path = flags.pop("config")
    try:
        config = _load_json(cfg_path) if cfg_path else {}
        if not isinstance(config, dict):
            raise InvalidInput("config file must hold a JSON object")
        cfg = resolve_config(cmd, config, flags)
        logging.basicConfig(level=logging.INFO if cfg["verbose"] else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        model = load_robot(cfg["robot"])
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        path = COMMANDS[cmd](cfg, model, out)
    except ParidError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        if getattr(exc, "time", None) is not None:
            err["time"] = exc.time
        if want_json:
            print(json.dumps(err, sort_keys=True))
        print(f"parid {cmd}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
