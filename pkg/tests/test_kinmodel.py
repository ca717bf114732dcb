import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parid.kinmodel import (
    ChainState,
    JointKind,
    LinkFrame,
    RigidBodyParams,
    SerialChain,
    centroidal_inertia,
    chain_energy,
    chain_kinematics,
    hat_operator,
    inertia_matrix,
    link_transforms,
    newton_euler_torques,
    param_labels,
    regressor_rows_open_chain,
    skew,
)

from conftest import random_chain_rows

finite = st.floats(-1e3, 1e3, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


def test_skew_zero_and_unit():
    assert np.array_equal(skew([0, 0, 0]), np.zeros((3, 3)))
    np.testing.assert_array_equal(skew([1, 0, 0]), [[0, 0, 0], [0, 0, -1], [0, 1, 0]])


@given(vec3, vec3)
def test_skew_is_cross_product(a, b):
    np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), rtol=1e-15, atol=1e-15 * (1 + np.abs(a).max() * np.abs(b).max()))
    np.testing.assert_array_equal(skew(a).T, -skew(a))


def test_hat_layout():
    h = hat_operator([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(h, [[1, 2, 3, 0, 0, 0], [0, 1, 0, 2, 3, 0], [0, 0, 1, 0, 2, 3]])
    assert np.array_equal(hat_operator(np.zeros(3)), np.zeros((3, 6)))


def test_hat_times_inertia_vector():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = rng.standard_normal(3)
        six = rng.standard_normal(6)
        tensor = np.array([[six[0], six[1], six[2]], [six[1], six[3], six[4]], [six[2], six[4], six[5]]])
        np.testing.assert_allclose(hat_operator(a) @ six, tensor @ a, rtol=1e-14, atol=1e-14)


def test_link_frame_rejects_nan():
    with pytest.raises(ValueError):
        LinkFrame(np.nan, 0, 0, 0, JointKind.REVOLUTE)


def test_static_zero_gravity_kinematics_vanish():
    chain = SerialChain.from_dh(random_chain_rows(np.random.default_rng(1), 4))
    z = np.zeros(4)
    kin = chain_kinematics(chain, ChainState(z, z, z), np.zeros(3))
    for arr in (kin.omega, kin.omega_dot, kin.acc, kin.vel):
        assert np.all(arr == 0)


def test_single_revolute_angular_velocity():
    chain = SerialChain.from_dh([(0.2, 0.3, 0.1, 0.4, "R")])
    kin = chain_kinematics(chain, ChainState([0.7], [1.0], [0.0]), np.zeros(3))
    np.testing.assert_allclose(kin.omega[0, 0], [0, 0, 1])


def _origins(chain, q):
    rots, pos = link_transforms(chain, q)
    p, r, out = np.zeros(3), np.eye(3), []
    for j in range(chain.n_joints):
        p = p + r @ pos[0, j]
        r = r @ rots[0, j]
        out.append((r.copy(), p.copy()))
    return out


def test_velocities_match_finite_differences():
    rng = np.random.default_rng(2)
    chain = SerialChain.from_dh(random_chain_rows(rng, 3))
    q, qd = rng.standard_normal(3), rng.standard_normal(3)
    kin = chain_kinematics(chain, ChainState(q, qd, np.zeros(3)), np.zeros(3))
    dt = 1e-6
    fp, fm = _origins(chain, q + dt * qd), _origins(chain, q - dt * qd)
    for j in range(3):
        r = kin.rot_world[0, j]
        v_fd = (fp[j][1] - fm[j][1]) / (2 * dt)
        np.testing.assert_allclose(r @ kin.vel[0, j], v_fd, atol=1e-6)
        w_skew = (fp[j][0] - fm[j][0]) / (2 * dt) @ r.T
        w_fd = np.array([w_skew[2, 1], w_skew[0, 2], w_skew[1, 0]])
        np.testing.assert_allclose(r @ kin.omega[0, j], w_fd, atol=1e-6)


def test_rotations_orthonormal():
    rng = np.random.default_rng(3)
    chain = SerialChain.from_dh(random_chain_rows(rng, 5))
    q = rng.standard_normal((200, 5)) * 3
    kin = chain_kinematics(chain, ChainState(q, q, q), [0, 0, -9.81])
    err = np.einsum("nkji,nkjl->nkil", kin.rot_world, kin.rot_world) - np.eye(3)
    assert np.abs(err).max() <= 1e-12


def test_zero_state_regressor_is_zero():
    chain = SerialChain.from_dh(random_chain_rows(np.random.default_rng(4), 3))
    z = np.zeros(3)
    assert np.all(regressor_rows_open_chain(chain, ChainState(z, z, z), np.zeros(3)) == 0)


def test_pendulum_matches_lagrangian():
    # one revolute about z, gravity along -y: tau = Izz qdd + g (mx cos q - my sin q)
    chain = SerialChain.from_dh([(0.0, 0.0, 0.0, 0.0, "R")])
    rng = np.random.default_rng(5)
    g = 9.81
    for _ in range(50):
        q, qd, qdd = rng.standard_normal(3)
        phi = rng.standard_normal(10)
        row = regressor_rows_open_chain(chain, ChainState([q], [qd], [qdd]), [0, -g, 0])
        izz, mx, my = phi[5], phi[7], phi[8]
        expected = izz * qdd + g * (mx * np.cos(q) - my * np.sin(q))
        np.testing.assert_allclose(row @ phi, [expected], rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_regressor_matches_newton_euler(n):
    rng = np.random.default_rng(10 + n)
    worst = 0.0
    for _ in range(10):
        chain = SerialChain.from_dh(random_chain_rows(rng, n))
        phi = rng.standard_normal(10 * n)
        q, qd, qdd = (rng.standard_normal((100, n)) * 2 for _ in range(3))
        g = rng.standard_normal(3) * 10
        st_ = ChainState(q, qd, qdd)
        tau = newton_euler_torques(chain, st_, phi, g)
        K = regressor_rows_open_chain(chain, st_, g)
        worst = max(worst, np.max(np.abs(K @ phi - tau) / (1 + np.abs(tau))))
    assert worst <= 1e-10


def test_linearity_in_parameters():
    rng = np.random.default_rng(6)
    chain = SerialChain.from_dh(random_chain_rows(rng, 4))
    st_ = ChainState(*(rng.standard_normal((20, 4)) for _ in range(3)))
    K = regressor_rows_open_chain(chain, st_, [0, 0, -9.81])
    for _ in range(2):
        phi = rng.standard_normal(40)
        np.testing.assert_allclose(K @ phi, newton_euler_torques(chain, st_, phi, [0, 0, -9.81]),
                                   rtol=1e-10, atol=1e-10)


def test_static_torques_ignore_inertia():
    rng = np.random.default_rng(7)
    chain = SerialChain.from_dh(random_chain_rows(rng, 3))
    q = rng.standard_normal(3)
    z = np.zeros(3)
    phi = rng.standard_normal(30)
    phi2 = phi.copy()
    for b in range(3):
        phi2[10 * b:10 * b + 6] = rng.standard_normal(6)
    g = [0, 0, -9.81]
    t1 = newton_euler_torques(chain, ChainState(q, z, z), phi, g)
    t2 = newton_euler_torques(chain, ChainState(q, z, z), phi2, g)
    np.testing.assert_allclose(t1, t2, atol=1e-12)
    assert np.all(newton_euler_torques(chain, ChainState(z, z, z), phi, np.zeros(3)) == 0)


def test_gravity_part_depends_on_position_only():
    rng = np.random.default_rng(8)
    chain = SerialChain.from_dh(random_chain_rows(rng, 4))
    q = rng.standard_normal(4)
    g = np.array([0.0, 0.0, -9.81])
    diffs = []
    for _ in range(3):
        st_ = ChainState(q, rng.standard_normal(4), rng.standard_normal(4))
        diffs.append(regressor_rows_open_chain(chain, st_, g) - regressor_rows_open_chain(chain, st_, 0 * g))
    np.testing.assert_allclose(diffs[0], diffs[1], atol=1e-12)
    np.testing.assert_allclose(diffs[0], diffs[2], atol=1e-12)


def test_power_balance_with_energy():
    # d/dt (KE + PE) == qd . tau along a motion
    rng = np.random.default_rng(9)
    chain = SerialChain.from_dh(random_chain_rows(rng, 3))
    body = [RigidBodyParams.from_centroidal(1 + rng.random(), rng.standard_normal(3) * 0.1,
                                            np.diag(rng.uniform(0.1, 0.3, 3))) for _ in range(3)]
    g = np.array([0, 0, -9.81])
    q, qd, qdd = rng.standard_normal((3, 3))
    dt = 1e-6
    e = [sum(chain_energy(chain, q + s * dt * qd + 0.5 * (s * dt) ** 2 * qdd, qd + s * dt * qdd, body, g))
         for s in (-1, 1)]
    tau = newton_euler_torques(chain, ChainState(q, qd, qdd), body, g)
    np.testing.assert_allclose((e[1] - e[0]) / (2 * dt), qd @ tau, rtol=1e-6, atol=1e-6)


def test_centroidal_inertia_round_trip():
    rng = np.random.default_rng(10)
    i_g = np.diag([0.3, 0.2, 0.1])
    body = RigidBodyParams.from_centroidal(2.0, rng.standard_normal(3), i_g)
    np.testing.assert_allclose(centroidal_inertia(body.as_vector()), i_g, atol=1e-12)
    np.testing.assert_allclose(inertia_matrix(body.as_vector()), body.inertia())
    assert RigidBodyParams.from_vector(body.as_vector()) == body


def test_param_labels():
    assert param_labels(["2"])[5] == "Izz2"
    assert param_labels(["1", "7"])[-3:] == ["mx7", "my7", "mz7"]
