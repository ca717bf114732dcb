"""Builders for the two bundled robot description files.

Run ``python -m parid.robots`` to regenerate ``data/3prs.json`` and
``data/3rps.json``.  The home pose of every file is all-zero joint variables:
joint offsets are solved here so that, at q = 0, the platform is level and
centred, and the three spherical-joint axes of the first leg are mutually
orthogonal (far from the gimbal lock of the three-revolute model).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

DATA_DIR = Path(__file__).with_name("data")
LEG_ANGLES = (0.0, 2 * np.pi / 3, 4 * np.pi / 3)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _homog(rot, pos):
    t = np.eye(4)
    t[:3, :3] = rot
    t[:3, 3] = pos
    return t


def _link(a, alpha, d, theta, kind, body, joint):
    return {"a": float(a), "alpha": float(alpha), "d": float(d), "theta": float(theta),
            "kind": kind, "body": body, "joint": joint}


def _spherical_links(r_parent, r_target, a_first, joints, body):
    """Three revolutes whose last frame has orientation ``r_target`` at q = 0.

    The middle offset is fixed at pi/2 with alpha = pi/2 on the last two
    axes, so the three axes are mutually orthogonal at home; the first alpha
    and the outer offsets are solved.
    """
    def frame(x):
        a3, t3, t5 = x
        return (r_parent @ _rx(a3) @ _rz(t3) @ _rx(np.pi / 2) @ _rz(np.pi / 2)
                @ _rx(np.pi / 2) @ _rz(t5))

    best = None
    for a0 in np.linspace(-np.pi, np.pi, 7):
        for t0 in np.linspace(-np.pi, np.pi, 7):
            sol = least_squares(lambda x: (frame(x) - r_target).ravel(), [a0, t0, 0.3],
                                xtol=1e-15, ftol=1e-15, gtol=1e-15)
            if best is None or sol.cost < best.cost:
                best = sol
    a3, t3, t5 = best.x
    if not np.allclose(frame(best.x), r_target, atol=1e-12):
        raise RuntimeError("spherical offsets not found")
    return [
        _link(a_first, a3, 0.0, t3, "R", None, joints[0]),
        _link(0.0, np.pi / 2, 0.0, np.pi / 2, "R", None, joints[1]),
        _link(0.0, np.pi / 2, 0.0, t5, "R", body, joints[2]),
    ]


def _params(m, com, inertia_g):
    c = np.asarray(com, dtype=float)
    i_o = np.asarray(inertia_g, dtype=float) + m * (c @ c * np.eye(3) - np.outer(c, c))
    vals = [i_o[0, 0], i_o[0, 1], i_o[0, 2], i_o[1, 1], i_o[1, 2], i_o[2, 2], m, *(m * c)]
    names = ("Ixx", "Ixy", "Ixz", "Iyy", "Iyz", "Izz", "m", "mx", "my", "mz")
    return {k: float(np.round(v, 12)) + 0.0 for k, v in zip(names, vals)}


def _platform_triangle(rp):
    side = rp * np.sqrt(3.0)
    return side, side / 2, side * np.sqrt(3.0) / 2


def _platform_inertia(m, side):
    """Uniform thin triangular plate, frame at one vertex, x along one edge."""
    lx2, lx3, ly3 = side, side / 2, side * np.sqrt(3.0) / 2
    com = np.array([(lx2 + lx3) / 3, ly3 / 3, 0.0])
    # plate about its centroid: in-plane moments m*side^2/24, polar m*side^2/12
    i_g = np.diag([m * side ** 2 / 24, m * side ** 2 / 24, m * side ** 2 / 12])
    return com, i_g


def build_3prs() -> dict:
    rb, rp, lr = 0.30, 0.15, 0.30
    side, lx_p3, ly_p3 = _platform_triangle(rp)
    lx_p2 = side
    beta = np.arccos((rb - rp) / lr)           # coupler elevation at home
    height = lr * np.sin(beta)

    r_platform = _rz(LEG_ANGLES[0] + 5 * np.pi / 6)   # x from S1 toward S2, z up
    legs, bodies = [], []
    m_slider, m_coupler, m_platform = 9.0, 2.5, 28.28
    for k, psi in enumerate(LEG_ANGLES):
        n = k + 1
        base = _homog(_rz(psi), [rb * np.cos(psi), rb * np.sin(psi), 0.0])
        links = [
            _link(0.0, 0.0, 0.0, 0.0, "P", 2 * k, f"p{n}"),
            _link(0.0, -np.pi / 2, 0.0, beta - np.pi, "R", 2 * k + 1, f"r{n}"),
        ]
        if k == 0:
            r_coupler = _rz(psi) @ _rx(-np.pi / 2) @ _rz(beta - np.pi)
            links += _spherical_links(r_coupler, r_platform, lr, ("s1a", "s1b", "s1c"), 2)
        legs.append({"name": f"leg{n}", "base": base.tolist(), "links": links})

    slider = _params(m_slider, [0.0, 0.0, 0.02], np.diag([0.06, 0.05, 0.04]))
    coupler = _params(m_coupler, [lr / 2, 0.0, 0.0],
                      np.diag([0.002, m_coupler * lr ** 2 / 12, m_coupler * lr ** 2 / 12]))
    com, i_g = _platform_inertia(m_platform, side)
    platform = _params(m_platform, com, i_g)
    body_list = [("1", slider), ("2", coupler), ("3", platform), ("4", slider),
                 ("5", coupler), ("6", slider), ("7", coupler)]
    # legs reference bodies by index: leg1 -> 0, 1, (platform 2); leg2 -> 3, 4; leg3 -> 5, 6
    legs[0]["links"][0]["body"], legs[0]["links"][1]["body"] = 0, 1
    legs[1]["links"][0]["body"], legs[1]["links"][1]["body"] = 3, 4
    legs[2]["links"][0]["body"], legs[2]["links"][1]["body"] = 5, 6
    bodies = [{"name": n, "params": p} for n, p in body_list]

    cuts = [
        {"leg": 1, "point": [lr, 0.0, 0.0], "target_leg": 0, "target_link": 4,
         "target_point": [lx_p2, 0.0, 0.0]},
        {"leg": 2, "point": [lr, 0.0, 0.0], "target_leg": 0, "target_link": 4,
         "target_point": [lx_p3, ly_p3, 0.0]},
    ]
    limits = {}
    for n in (1, 2, 3):
        limits[f"p{n}"] = {"q": [-0.08, 0.08], "qd": 0.25, "qdd": 2.5}
        limits[f"r{n}"] = {"q": [-0.8, 0.8], "qd": 3.0, "qdd": 30.0}
    for j in ("s1a", "s1b", "s1c"):
        limits[j] = {"q": [-1.0, 1.0], "qd": 3.0, "qdd": 30.0}
    friction = []
    for n, (fv, fc) in zip((1, 2, 3), ((3500.0, 100.0), (3400.0, 120.0), (3850.0, 100.0))):
        friction.append({"joint": f"p{n}", "fc": fc, "fv": fv})
        friction.append({"joint": f"r{n}", "fc": 0.8, "fv": 1.5})
    actuators = [{"joint": f"p{n}", "j_rotor": jr0, "j_drive": jd, "gear_ratio": 4.0}
                 for n, jr0, jd in ((1, 1.1e-4, 1.0e-4), (2, 1.0e-4, 0.9e-4),
                                    (3, 1.0e-4, 0.95e-4))]
    return {
        "name": "3-PRS",
        "gravity": [0.0, 0.0, -9.81],
        "geometry": {"lr": lr, "lx_p2": lx_p2, "lx_p3": lx_p3, "ly_p3": ly_p3},
        "layout": {"rb": rb, "rp": rp, "height": height},
        "bodies": bodies,
        "legs": legs,
        "cuts": cuts,
        "independent": ["p1", "p2", "p3"],
        "joint_limits": limits,
        "friction": friction,
        "actuators": actuators,
        "model": {
            "symmetry_groups": [["m1", "m4", "m6"], ["m2", "m5", "m7"],
                                ["Izz2", "Izz5"], ["mx2", "mx5"]],
            "zero_params": ["my2", "my5", "my7", "Iyz3"],
            "base_columns": ["Ixx3", "Ixy3", "Ixz3", "Iyy3", "Izz3", "mx3", "my3", "mz3",
                             "Izz2", "mx2", "Izz7", "mx7", "m3"],
            "grid_params": ["m1", "m2"],
        },
        "home": {"nominal": [0.0] * 9},
        "reference": {
            "identified": {"Ixx3 - ly_p3^2 (2m1 + 2m2 + m3)": -11.57,
                           "Ixy3 + lx_p3 ly_p3 (2m1 + 2m2 + m3)": 7.82,
                           "my3 - ly_p3 (2m1 + 2m2 + m3)": -18.76,
                           "3m1 + 3m2 + m3": 62.78,
                           "Fv_p1": 3509.89, "Fc_p1": 100.16, "Fv_p2": 3418.03,
                           "Fc_p2": 122.46, "Fv_p3": 3870.60, "Fc_p3": 100.64,
                           "Jr_p1": 1.7078e-3, "Jr_p2": 1.5334e-3, "Jr_p3": 1.6201e-3},
            "eps_ra": {"complete": [16.7, 2.997], "reduced": [14.9, 1.22]},
            "counts": {"raw_rank": 19, "merged_rank": 13, "complete": 28, "reduced": 13},
        },
    }


def build_3rps() -> dict:
    rb, rp = 0.25, 0.15
    side, lx_p3, ly_p3 = _platform_triangle(rp)
    lx_p2 = side
    height = 0.40
    gamma = np.arctan2(height, rb - rp)          # leg elevation at home
    length = np.hypot(height, rb - rp)

    r_platform = _rz(LEG_ANGLES[0] + 5 * np.pi / 6)
    legs = []
    for k, psi in enumerate(LEG_ANGLES):
        n = k + 1
        r_base = _rz(psi) @ _rx(np.pi / 2)      # z tangent, x radial, y up
        base = _homog(r_base, [rb * np.cos(psi), rb * np.sin(psi), 0.0])
        links = [
            _link(0.0, 0.0, 0.0, np.pi / 2 - gamma, "R", None, f"r{n}"),
            _link(0.0, -np.pi / 2, length, 0.0, "P", None, f"p{n}"),
        ]
        legs.append({"name": f"leg{n}", "base": base.tolist(), "links": links})
    body_idx = [(0, 1), (3, 4), (5, 6)]
    for leg, (b1, b2) in zip(legs, body_idx):
        leg["links"][0]["body"], leg["links"][1]["body"] = b1, b2
    r_piston = _rz(LEG_ANGLES[0]) @ _rx(np.pi / 2) @ _rz(np.pi / 2 - gamma) @ _rx(-np.pi / 2)
    legs[0]["links"] += _spherical_links(r_piston, r_platform, 0.0, ("s1a", "s1b", "s1c"), 2)

    m_cyl, m_piston, m_platform = 3.2, 1.6, 6.4
    cylinder = _params(m_cyl, [0.0, 0.12, 0.0], np.diag([0.02, 0.003, 0.02]))
    piston = _params(m_piston, [0.0, 0.0, -0.10], np.diag([0.006, 0.006, 0.0008]))
    # off-centre payload puts the platform CoG on the S1-S2 edge line
    platform = _params(m_platform, [0.13, 0.0, 0.0], np.diag([0.03, 0.02, 0.045]))
    body_list = [("1", cylinder), ("2", piston), ("3", platform), ("4", cylinder),
                 ("5", piston), ("6", cylinder), ("7", piston)]
    bodies = [{"name": n, "params": p} for n, p in body_list]
    cuts = [
        {"leg": 1, "point": [0.0, 0.0, 0.0], "target_leg": 0, "target_link": 4,
         "target_point": [lx_p2, 0.0, 0.0]},
        {"leg": 2, "point": [0.0, 0.0, 0.0], "target_leg": 0, "target_link": 4,
         "target_point": [lx_p3, ly_p3, 0.0]},
    ]
    limits = {}
    for n in (1, 2, 3):
        limits[f"p{n}"] = {"q": [-0.08, 0.08], "qd": 0.25, "qdd": 2.5}
        limits[f"r{n}"] = {"q": [-0.8, 0.8], "qd": 3.0, "qdd": 30.0}
    for j in ("s1a", "s1b", "s1c"):
        limits[j] = {"q": [-1.0, 1.0], "qd": 3.0, "qdd": 30.0}
    friction = []
    for n, (fv, fc) in zip((1, 2, 3), ((3490.0, 150.0), (2100.0, 120.0), (3060.0, 200.0))):
        friction.append({"joint": f"p{n}", "fc": fc, "fv": fv})
        friction.append({"joint": f"r{n}", "fc": 0.5, "fv": 1.0})
    actuators = [{"joint": f"p{n}", "j_rotor": jr0, "j_drive": jd, "gear_ratio": 4.0}
                 for n, jr0, jd in ((1, 3.1e-5, 1.76e-5), (2, 2.9e-5, 1.6e-5),
                                    (3, 3.4e-5, 1.93e-5))]
    groups = []
    for p in ("Ixx", "Ixy", "Ixz", "Iyy", "Iyz", "Izz", "m", "mx", "my", "mz"):
        groups.append([f"{p}1", f"{p}4", f"{p}6"])
        groups.append([f"{p}2", f"{p}5", f"{p}7"])
    zeros = []
    for b in ("1", "4", "6"):
        zeros += [f"mx{b}"]
    for b in ("2", "5", "7"):
        zeros += [f"mx{b}", f"my{b}"]
    zeros += ["Ixy3", "Ixz3", "Iyz3", "my3", "mz3"]
    return {
        "name": "3-RPS",
        "gravity": [0.0, 0.0, -9.81],
        "geometry": {"lx_p2": lx_p2, "lx_p3": lx_p3, "ly_p3": ly_p3},
        "layout": {"rb": rb, "rp": rp, "height": height, "leg_length": length},
        "bodies": bodies,
        "legs": legs,
        "cuts": cuts,
        "independent": ["p1", "p2", "p3"],
        "joint_limits": limits,
        "friction": friction,
        "actuators": actuators,
        "model": {
            "symmetry_groups": groups,
            "zero_params": zeros,
            "base_columns": ["my1", "Izz1", "mz2", "Ixx3", "Iyy3", "Izz3", "mx3", "m2", "m3"],
            "grid_params": ["m1", "Iyy2"],
        },
        "home": {"nominal": [0.0] * 9},
        "reference": {
            "identified": {"mx3 + lx_p3/ly_p3 my3 - lx_p2 (m3 + m2)": -2.31,
                           "2m2 - my3/ly_p3 + m3": 11.18,
                           "m2 + my3/ly_p3": 6.10,
                           "Fv_p1": 3489.28, "Fc_p1": 152.33, "Fv_p2": 2099.86,
                           "Fc_p2": 119.94, "Fv_p3": 3057.99, "Fc_p3": 202.21,
                           "Jr_p1": 3.1257e-4},
            "counts": {"merged_rank": 9, "complete": 24, "reduced": 12},
        },
    }


def write_bundled(directory: Path = DATA_DIR) -> None:
    for fname, spec in (("3prs.json", build_3prs()), ("3rps.json", build_3rps())):
        (directory / fname).write_text(json.dumps(spec, indent=1) + "\n")


if __name__ == "__main__":
    write_bundled()
