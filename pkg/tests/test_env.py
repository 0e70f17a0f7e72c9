"""
Tests for the two-link arm and the linear-Gaussian chain
"""

import numpy as np
import pytest

from src.env import (
    ArmEnv,
    ArmParams,
    ArmState,
    ChainSpec,
    arm_energy,
    arm_fk,
    arm_ik,
    arm_reward,
    arm_step,
    chain_sample,
    figure8_reference,
    mass_matrix,
    pd_action,
    reference_joint_traj,
    sample_goal,
    sample_initial_state,
    stationary_covariance,
)
from src.errors import ConfigError, DimensionError, NonFiniteError, UnreachableTargetError


class TestArmDynamics:
    """RK4 integration of the arm"""

    def setup_method(self):
        self.params = ArmParams()

    def test_equilibrium(self):
        s = ArmState([0.3, -0.7], [0.0, 0.0])
        nxt = arm_step(s, [0.0, 0.0], self.params)
        np.testing.assert_array_equal(nxt.to_vector(), s.to_vector())

    def test_mass_matrix_is_spd(self):
        for q2 in np.linspace(-np.pi, np.pi, 13):
            M = mass_matrix(np.array([0.0, q2]), self.params)
            np.testing.assert_allclose(M, M.T)
            assert np.linalg.eigvalsh(M).min() > 0

    def test_energy_conserved_without_damping(self):
        params = ArmParams(damping=0.0)
        s = ArmState([0.2, 0.4], [0.5, -0.3])
        e0 = arm_energy(s, params)
        for _ in range(1000):
            s = arm_step(s, [0.0, 0.0], params)
        assert abs(arm_energy(s, params) - e0) <= 1e-6 * e0

    def test_damping_dissipates(self):
        s = ArmState([0.2, 0.4], [0.5, -0.3])
        energy = arm_energy(s, self.params)
        for _ in range(200):
            s = arm_step(s, [0.0, 0.0], self.params)
            now = arm_energy(s, self.params)
            assert now <= energy + 1e-15
            energy = now

    def test_deterministic(self):
        s = ArmState([0.1, 0.2], [0.3, 0.4])
        a = arm_step(s, [0.1, -0.2], self.params)
        b = arm_step(s, [0.1, -0.2], self.params)
        np.testing.assert_array_equal(a.to_vector(), b.to_vector())

    def test_diverging_state(self):
        with pytest.raises(NonFiniteError):
            arm_step(ArmState([0.0, 0.5], [1e160, 0.0]), [0.0, 0.0], self.params)

    def test_state_vector_length(self):
        with pytest.raises(DimensionError):
            ArmState.from_vector([0.0, 0.0, 0.0])

    def test_rejects_negative_damping(self):
        with pytest.raises(ConfigError):
            ArmParams(damping=-0.1).validate()


class TestKinematics:
    """Forward and inverse kinematics"""

    def setup_method(self):
        self.params = ArmParams()

    def test_fully_extended(self):
        np.testing.assert_allclose(arm_ik([0.2, 0.0], self.params), [0.0, 0.0], atol=1e-6)

    def test_pointing_up(self):
        np.testing.assert_allclose(arm_ik([0.0, 0.2], self.params), [np.pi / 2, 0.0], atol=1e-6)

    def test_right_angle_elbow(self):
        np.testing.assert_allclose(arm_ik([0.1, 0.1], self.params), [0.0, np.pi / 2], atol=1e-12)

    def test_elbow_up_mirrors(self):
        q = arm_ik([0.1, 0.1], self.params, elbow="up")
        assert q[1] == pytest.approx(-np.pi / 2)
        np.testing.assert_allclose(arm_fk(q, self.params), [0.1, 0.1], atol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(30)
        for q in rng.uniform([-np.pi, 0.0], [np.pi, np.pi], size=(10_000, 2)):
            tip = arm_fk(q, self.params)
            np.testing.assert_allclose(arm_fk(arm_ik(tip, self.params), self.params), tip, rtol=0, atol=1e-12)

    def test_unreachable(self):
        with pytest.raises(UnreachableTargetError):
            arm_ik([0.3, 0.0], self.params)

    def test_inner_hole(self):
        params = ArmParams(l1=0.2, l2=0.1)
        with pytest.raises(UnreachableTargetError):
            arm_ik([0.05, 0.0], params)

    def test_unknown_elbow(self):
        with pytest.raises(ConfigError):
            arm_ik([0.1, 0.1], self.params, elbow="left")


class TestReward:
    """Tracking reward"""

    def test_on_reference(self):
        s = ArmState([0.1, 0.2], [0.3, 0.4])
        assert arm_reward(s, [0.0, 0.0], [0.1, 0.2], [0.3, 0.4]) == 0.0

    def test_position_error(self):
        assert arm_reward(ArmState.zeros(), [0.0, 0.0], [0.1, 0.0], [0.0, 0.0]) == pytest.approx(-10.0)

    def test_control_cost(self):
        assert arm_reward(ArmState.zeros(), [0.5, 0.5], [0.0, 0.0], [0.0, 0.0]) == pytest.approx(-0.5)

    def test_never_positive(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            s = ArmState(rng.normal(size=2), rng.normal(size=2))
            assert arm_reward(s, rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)) <= 0.0


class TestReference:
    """Figure-8 tip path and its joint-space reference"""

    def setup_method(self):
        self.params = ArmParams()

    def test_figure8_samples(self):
        np.testing.assert_allclose(figure8_reference(0.0), [0.1, 0.1])
        np.testing.assert_allclose(figure8_reference(2.5), [0.1, -0.1], atol=1e-15)
        np.testing.assert_allclose(figure8_reference(5.0 / 8.0), [0.15, 0.1 * np.cos(np.pi / 4)])

    def test_joint_reference(self):
        ref = reference_joint_traj(5.0, 0.01, self.params)
        assert len(ref) == 500
        assert ref.q.shape == (500, 2)
        np.testing.assert_allclose(arm_fk(ref.q[0], self.params), [0.1, 0.1], atol=1e-12)
        assert np.all(ref.q[:, 1] >= 0.0)
        for q, tip in zip(ref.q, ref.tip):
            np.testing.assert_allclose(arm_fk(q, self.params), tip, atol=1e-12)

    def test_velocity_matches_tip_speed(self):
        """J(q) q̇_d agrees with the analytic tip velocity away from the ends"""
        ref = reference_joint_traj(5.0, 0.01, self.params)
        p = self.params
        for k in range(1, len(ref) - 1, 25):
            q1, q2 = ref.q[k]
            J = np.array([
                [-p.l1 * np.sin(q1) - p.l2 * np.sin(q1 + q2), -p.l2 * np.sin(q1 + q2)],
                [p.l1 * np.cos(q1) + p.l2 * np.cos(q1 + q2), p.l2 * np.cos(q1 + q2)],
            ])
            t = ref.t[k]
            tip_dot = [0.05 * 4 * np.pi / 5 * np.cos(4 * np.pi * t / 5), -0.1 * 2 * np.pi / 5 * np.sin(2 * np.pi * t / 5)]
            np.testing.assert_allclose(J @ ref.qdot[k], tip_dot, atol=1e-3)

    def test_reference_iteration_and_hold(self):
        ref = reference_joint_traj(0.1, 0.01, self.params)
        pairs = list(ref)
        assert len(pairs) == 10
        np.testing.assert_array_equal(ref.state(1000), ref.state(9))
        np.testing.assert_array_equal(ref.state(3)[:2], pairs[3][0])

    def test_rejects_bad_horizon(self):
        with pytest.raises(ConfigError):
            reference_joint_traj(0.0, 0.01, self.params)


class TestSampling:
    """Initial states, goals and the PD demonstrator"""

    def test_initial_state_bounds(self):
        rng = np.random.default_rng(32)
        for _ in range(100):
            s = sample_initial_state(rng)
            assert np.all(np.abs(s.q) <= 0.1)
            assert np.all(np.abs(s.qdot) <= 0.005)

    def test_goal_bounds(self):
        rng = np.random.default_rng(33)
        for _ in range(100):
            g = sample_goal(rng)
            assert abs(g[0]) <= np.pi / 2
            assert abs(g[1]) <= np.pi - 0.15

    def test_pd_action_is_clamped(self):
        u = pd_action(ArmState.zeros(), [1.0, -1.0], [0.0, 0.0], kp=10.0, kd=1.0, u_max=0.5)
        np.testing.assert_array_equal(u, [0.5, -0.5])

    def test_pd_tracks_reference_better_than_random(self):
        params = ArmParams()
        ref = reference_joint_traj(2.0, params.dt, params)
        rng = np.random.default_rng(34)
        errors = {}
        for mode in ("pd", "random"):
            env = ArmEnv(params, ArmState(ref.q[0], ref.qdot[0]))
            err = []
            for q_d, qdot_d in ref:
                if mode == "pd":
                    u = pd_action(env.state, q_d, qdot_d, 5.0, 0.5, params.u_max)
                else:
                    u = rng.uniform(-params.u_max, params.u_max, 2)
                env.step(u)
                err.append(np.linalg.norm(env.tip - arm_fk(q_d, params)))
            errors[mode] = np.mean(err)
        assert errors["pd"] < errors["random"]


class TestArmEnv:
    """Stateful environment wrapper"""

    def test_step_clamps_and_counts(self):
        env = ArmEnv(ArmParams())
        _, reward, saturated = env.step([2.0, 0.0])
        assert saturated
        assert reward == 0.0
        env.step([0.1, 0.1])
        assert env.saturation_rate == 0.5

    def test_reward_with_reference(self):
        env = ArmEnv(ArmParams())
        _, reward, _ = env.step([0.0, 0.0], q_d=[0.0, 0.0], qdot_d=[0.0, 0.0])
        assert reward == 0.0

    def test_reset(self):
        env = ArmEnv(ArmParams())
        env.step([0.5, 0.5])
        env.reset(ArmState([0.1, 0.2], [0.0, 0.0]))
        assert env.steps == 0
        np.testing.assert_array_equal(env.observation, [0.1, 0.2, 0.0, 0.0])
        np.testing.assert_allclose(env.tip, arm_fk([0.1, 0.2], env.params))


class TestChain:
    """Linear-Gaussian Markov chain"""

    def setup_method(self):
        self.A = np.array([[0.6, 0.2], [-0.1, 0.5]])

    def test_stationary_covariance_solves_lyapunov(self):
        sigma = stationary_covariance(self.A, np.eye(2))
        np.testing.assert_allclose(sigma, self.A @ sigma @ self.A.T + np.eye(2), atol=1e-12)

    def test_white_noise_chain(self):
        spec = ChainSpec(A=np.zeros((2, 2)), noise_cov=np.eye(2), seed=3)
        np.testing.assert_allclose(stationary_covariance(spec.A, spec.noise_cov), np.eye(2))
        ds = chain_sample(spec, 20_000)
        assert np.abs(ds.x_next.mean(axis=0)).max() < 0.05
        np.testing.assert_allclose(np.cov(ds.x_next.T), np.eye(2), atol=0.05)

    def test_same_seed_is_bit_identical(self):
        spec = ChainSpec(A=self.A, noise_cov=np.eye(2), seed=11)
        a = chain_sample(spec, 500)
        b = chain_sample(spec, 500)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.x_next, b.x_next)
        assert not np.array_equal(chain_sample(spec, 500, seed=12).x, a.x)

    def test_dataset_shape(self):
        ds = chain_sample(ChainSpec(A=self.A, noise_cov=np.eye(2)), 10)
        assert len(ds) == 10
        assert ds.n_u == 0
        assert ds.dt == 1.0
        np.testing.assert_array_equal(ds.x[1:], ds.x_next[:-1])

    def test_deterministic_chain(self):
        spec = ChainSpec(A=self.A, noise_cov=np.zeros((2, 2)), x0=[1.0, -1.0])
        ds = chain_sample(spec, 3)
        np.testing.assert_allclose(ds.x_next[2], np.linalg.matrix_power(self.A, 3) @ [1.0, -1.0])

    def test_rejects_unstable(self):
        with pytest.raises(ConfigError):
            ChainSpec(A=np.eye(2), noise_cov=np.eye(2))

    def test_rejects_asymmetric_noise(self):
        with pytest.raises(ConfigError):
            ChainSpec(A=self.A, noise_cov=np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_indefinite_noise(self):
        with pytest.raises(ConfigError):
            ChainSpec(A=self.A, noise_cov=np.diag([1.0, -1.0]))

    def test_rejects_mismatched_shapes(self):
        with pytest.raises(DimensionError):
            ChainSpec(A=self.A, noise_cov=np.eye(3))
