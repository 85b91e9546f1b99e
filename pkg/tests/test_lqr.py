import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csc.dynamics import SceneModel
from csc.errors import ConfigurationError
from csc.geometry import Disc, Point
from csc.lqr import (GainSchedule, KeypointSet, expand_system, fold_keypoint_weights,
                     fold_weights, gains_along_plan, keypoint_jacobian, keypoint_observe,
                     kp_lqr, kp_weights, linearize_plan, one_step_lqr, tvlqr)
from csc.trajopt import CostWeights, Plan, rollout_open_loop
from oracles import dense_lqr_first_step, random_lqr_instance


def seq_weights(Q, R, QT):
    return (np.asarray(Q), np.asarray(R), np.asarray(QT))


# -- Riccati recursion -----------------------------------------------------------------

def test_scalar_one_step():
    g = tvlqr(np.ones((1, 1, 1)), np.ones((1, 1, 1)),
              CostWeights(np.zeros((1, 1)), np.eye(1), np.eye(1)))
    assert g.K_seq[0, 0, 0] == pytest.approx(0.5)
    # closed loop dx_1 = (A - B K) dx_0
    assert 1.0 - g.K_seq[0, 0, 0] == pytest.approx(0.5)
    assert g.P_seq[1, 0, 0] == 1.0


def test_zero_input_matrix_accumulates_state_cost():
    T = 4
    A = np.tile(np.eye(2), (T, 1, 1))
    B = np.zeros((T, 2, 1))
    W = CostWeights(np.eye(2), np.eye(1), 3.0 * np.eye(2))
    g = tvlqr(A, B, W)
    assert np.all(g.K_seq == 0)
    for t in range(T + 1):
        np.testing.assert_allclose(g.P_seq[t], (3.0 + T - t) * np.eye(2))


@pytest.mark.parametrize("seed", range(5))
def test_matches_dense_qp(seed):
    rng = np.random.default_rng(seed)
    A, B, Q, R, QT = random_lqr_instance(rng, 3, 2, 5)
    g = tvlqr(A, B, seq_weights(Q, R, QT))
    M = dense_lqr_first_step(A, B, Q, R, QT)
    np.testing.assert_allclose(-g.K_seq[0], M, atol=1e-8)


def test_riccati_bellman_consistency(rng):
    A, B, Q, R, QT = random_lqr_instance(rng, 4, 2, 6)
    g = tvlqr(A, B, seq_weights(Q, R, QT))
    np.testing.assert_array_equal(g.P_seq[-1], QT)
    for t in range(6):
        P1 = g.P_seq[t + 1]
        S = R[t] + B[t].T @ P1 @ B[t]
        P = Q[t] + A[t].T @ (P1 - P1 @ B[t] @ np.linalg.solve(S, B[t].T @ P1)) @ A[t]
        np.testing.assert_allclose(g.P_seq[t], P, atol=1e-10 * max(1, np.abs(P).max()))
        assert np.linalg.eigvalsh(g.P_seq[t]).min() > -1e-10


def rollout_cost(A, B, Q, R, QT, K, dx0):
    dx, J = dx0, 0.0
    for t in range(A.shape[0]):
        dv = -K[t] @ dx
        J += dx @ Q[t] @ dx + dv @ R[t] @ dv
        dx = A[t] @ dx + B[t] @ dv
    return J + dx @ QT @ dx


def test_feedback_beats_zero_feedback(rng):
    A, B, Q, R, QT = random_lqr_instance(rng, 3, 2, 6)
    g = tvlqr(A, B, seq_weights(Q, R, QT))
    for _ in range(20):
        dx0 = rng.normal(size=3)
        assert (rollout_cost(A, B, Q, R, QT, g.K_seq, dx0)
                <= rollout_cost(A, B, Q, R, QT, np.zeros_like(g.K_seq), dx0) + 1e-12)
        # the value matrix predicts the optimal cost
        assert rollout_cost(A, B, Q, R, QT, g.K_seq, dx0) == pytest.approx(
            dx0 @ g.P_seq[0] @ dx0, rel=1e-9)


def test_shape_errors():
    with pytest.raises(ConfigurationError):
        tvlqr(np.zeros((2, 2, 2)), np.zeros((3, 2, 1)),
              CostWeights(np.eye(2), np.eye(1), np.eye(2)))
    with pytest.raises(ConfigurationError):
        tvlqr(np.zeros((2, 2, 2)), np.zeros((2, 2, 1)),
              CostWeights(np.eye(3), np.eye(1), np.eye(3)))
    with pytest.raises(ConfigurationError):
        GainSchedule(np.zeros((1, 1, 1)), np.zeros((2, 1, 1)), "weird")


# -- along a plan ----------------------------------------------------------------------

def free_scene():
    return SceneModel(h=0.1, epsilon=1.0, M_u=[[1.0]], K_a=[100.0], tau_u=[0.0],
                      tau_a=[0.0], bodies=(Disc("ball", 0.1, "u", (0,)),
                                           Point("pusher", "a", (0,))), pairs=())


def plan_from(scene, x0, v):
    xs = rollout_open_loop(scene, x0, v)
    return Plan(xs, np.asarray(v), xs[-1], True, 0.0)


def test_no_contact_plan_has_no_object_gain():
    scene = free_scene()
    plan = plan_from(scene, [0.3, 0.0], np.full((5, 1), 0.1))
    g = gains_along_plan(scene, plan)
    assert np.max(np.abs(g.K_seq[:, :, 0])) <= 1e-12
    assert g.T == 5


def test_single_knot_plan():
    scene = free_scene()
    plan = plan_from(scene, [0.3, 0.0], [[0.1]])
    g = gains_along_plan(scene, plan)
    assert g.K_seq.shape == (1, 1, 2)


def test_gain_kappa_matters_near_contact(planar):
    scene, spec = planar
    x0 = np.array(spec.x0)
    v = np.tile(x0[3:] + np.array([0.05, 0.0, 0.05, 0.0]), (3, 1))
    plan = plan_from(scene, x0, v)
    W = CostWeights.tracking(3, 4)
    g1 = gains_along_plan(scene, plan, W, 160.0)
    g2 = gains_along_plan(scene, plan, W, 800.0)
    assert np.max(np.abs(g1.K_seq - g2.K_seq)) > 0


def test_linearize_plan_shapes(planar):
    scene, spec = planar
    x0 = np.array(spec.x0)
    plan = plan_from(scene, x0, np.tile(x0[3:], (2, 1)))
    A, B = linearize_plan(scene, plan)
    assert A.shape == (2, 7, 7) and B.shape == (2, 7, 4)


# -- keypoints -------------------------------------------------------------------------

def test_keypoints_at_identity_are_offsets():
    kps = KeypointSet(((0.1, 0.0), (0.0, -0.2)))
    np.testing.assert_allclose(keypoint_observe([0, 0, 0], kps), [0.1, 0.0, 0.0, -0.2])


def test_keypoint_rotation():
    kps = KeypointSet(((1.0, 0.0),))
    np.testing.assert_allclose(keypoint_observe([0, 0, np.pi / 2], kps), [0.0, 1.0],
                               atol=1e-15)


@given(dx=st.floats(-1, 1), dy=st.floats(-1, 1), th=st.floats(-4, 4))
def test_keypoint_translation_equivariance(dx, dy, th):
    kps = KeypointSet.rim(0.14)
    a = keypoint_observe([0.1, 0.2, th], kps)
    b = keypoint_observe([0.1 + dx, 0.2 + dy, th], kps)
    np.testing.assert_allclose(b - a, np.tile([dx, dy], 4), atol=1e-12)


def test_keypoint_jacobian_matches_differences(rng):
    kps = KeypointSet.rim(0.14)
    pose = rng.normal(size=3)
    G = keypoint_jacobian(pose, kps)
    e = 1e-7
    for k in range(3):
        d = np.zeros(3)
        d[k] = e
        col = (keypoint_observe(pose + d, kps) - keypoint_observe(pose - d, kps)) / (2 * e)
        np.testing.assert_allclose(G[:, k], col, atol=1e-8)


def test_rim_keypoints():
    kps = KeypointSet.rim(0.14)
    assert kps.n_p == 4 and kps.n_z == 8
    np.testing.assert_allclose(np.asarray(kps.offsets)[0], [0.14, 0.0])
    np.testing.assert_allclose(np.linalg.norm(kps.offsets, axis=1), 0.14)
    with pytest.raises(ConfigurationError):
        KeypointSet(())


def planar_lin(planar, T=4):
    scene, spec = planar
    x0 = np.array(spec.x0)
    v = np.array([x0[3:] + (t + 1) * np.array([0.03, 0.0, 0.03, 0.0]) for t in range(T)])
    plan = plan_from(scene, x0, v)
    A, B = linearize_plan(scene, plan, 800.0)
    return plan, A, B


def test_expanded_system_structure(planar):
    plan, A, B = planar_lin(planar)
    kps = KeypointSet.rim(0.14)
    Ax, Bx = expand_system(A, B, plan.x_opt[:, :3], kps)
    assert Ax.shape == (4, 15, 15) and Bx.shape == (4, 15, 4)
    assert np.all(Ax[:, :, 7:] == 0)
    G = keypoint_jacobian(plan.x_opt[1, :3], kps)
    np.testing.assert_allclose(Ax[0, 7:, :7], G @ A[0, :3])
    np.testing.assert_allclose(Bx[0, 7:], G @ B[0, :3])


def test_kp_lqr_gives_keypoints_no_gain(planar):
    plan, A, B = planar_lin(planar)
    kps = KeypointSet.rim(0.14)
    g = kp_lqr(A, B, plan.x_opt[:, :3], kps, kp_weights(3, 4, 4))
    assert g.state_layout == "expanded" and g.n_x == 7
    assert np.max(np.abs(g.K_seq[:, :, 7:])) <= 1e-12
    assert g.state_gains().shape == (4, 4, 7)


def test_kp_lqr_without_keypoint_weight_is_vanilla(planar):
    plan, A, B = planar_lin(planar)
    W = CostWeights.tracking(3, 4)
    Wx = CostWeights(np.pad(W.Q, (0, 8)), W.R, np.pad(W.QT, (0, 8)))
    for kps in (KeypointSet.rim(0.14), KeypointSet(((0.3, 0.1), (-0.05, 0.2),
                                                     (0.0, -0.5), (0.07, 0.07)))):
        g = kp_lqr(A, B, plan.x_opt[:, :3], kps, Wx)
        np.testing.assert_allclose(g.state_gains(), tvlqr(A, B, W).K_seq, atol=1e-12)


def test_kp_lqr_weight_shape_checked(planar):
    plan, A, B = planar_lin(planar)
    with pytest.raises(ConfigurationError):
        kp_lqr(A, B, plan.x_opt[:, :3], KeypointSet.rim(0.14), CostWeights.tracking(3, 4))


def test_kp_weight_layouts():
    W = kp_weights(3, 4, 4)
    np.testing.assert_allclose(np.diag(W.Q), [0, 0, 0, 0, 0, 0, 0] + [5.0] * 8)
    np.testing.assert_allclose(np.diag(W.QT), [0, 0, 0] + [0.1] * 4 + [20.0] * 8)
    np.testing.assert_allclose(np.diag(W.R), [100.0] * 4)
    full = np.arange(15.0)
    np.testing.assert_allclose(np.diag(kp_weights(3, 4, 4, full, [1.0], full).Q), full)
    with pytest.raises(ConfigurationError):
        kp_weights(3, 4, 4, [1.0] * 8 + [0.1, 0.2, 0.3, 0.4, 0.5, 0.6])


def test_fold_examples():
    Q = np.diag([1.0, 1.0, 3.0])
    np.testing.assert_array_equal(fold_keypoint_weights(Q, 0.0, 4), Q)
    np.testing.assert_allclose(fold_keypoint_weights(Q, [2.0, 2.0], 4),
                               np.diag([9.0, 9.0, 3.0]))
    W = fold_weights(kp_weights(3, 4, 4), 7, 4)
    np.testing.assert_allclose(np.diag(W.Q)[:3], [20.0, 20.0, 0.0])
    np.testing.assert_allclose(np.diag(W.QT)[:3], [80.0, 80.0, 0.0])
    with pytest.raises(ConfigurationError):
        fold_keypoint_weights(Q, np.eye(3), 4)


# -- one-step LQR ----------------------------------------------------------------------

def test_one_step_examples():
    assert one_step_lqr(1.0, 1.0, 1.0, [0.0])[0] == 0.0
    assert one_step_lqr(1.0, 1.0, 1.0, [-0.1])[0] == pytest.approx(0.1)


def test_one_step_minimises(rng):
    A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    P = np.diag([1.0, 2.0, 3.0])
    dx = rng.normal(size=3)
    dv = one_step_lqr(A, B, P, dx)

    def f(v):
        r = A @ dx + B @ v
        return r @ P @ r

    for _ in range(20):
        assert f(dv) <= f(dv + 1e-3 * rng.normal(size=2)) + 1e-15
