"""Observation encoding, policy network, reward, PPO and the parameter scheduler."""
import math

import numpy as np
import pandas as pd
import pytest
import torch
from numpy.testing import assert_allclose

from app.core.exceptions import CheckpointError
from app.engines.rl.observation import (
    OBS_DIM,
    IntervalPerformance,
    ObservationScales,
    PolicyAction,
    build_observation,
    reference_points_ego,
)
from app.engines.rl.policy import PolicyNet, policy_forward
from app.engines.rl.ppo import (
    CHECKPOINT_VERSION,
    PpoTrainer,
    RolloutBuffer,
    clipped_surrogate,
    gae_advantages,
    load_checkpoint,
    ppo_loss,
    restore_trainer,
    save_checkpoint,
)
from app.engines.rl.reward import aggregate_interval_error, compute_reward
from app.engines.rl.scheduler import (
    ParameterAgent,
    PolicyAgent,
    ReplayAgent,
    UphHalvingAgent,
    build_agent,
    load_replay_sequence,
    parameter_schedule,
)
from app.engines.track.raceline import TrackSpec, generate_track
from app.engines.track.track_loader import TrackLoader
from app.engines.vehicle.dynamics import VehicleState
from app.models.enums import AgentMode, SolverStatus
from app.models.experiment import DisturbanceRanges, PolicyNetSpec, PpoConfig, SnmpcParams

SMALL_SPEC = PolicyNetSpec(obs_dim=4, hidden_sizes=(16,), n_kappa=2, n_uph=1)


def _small_config(**overrides):
    base = dict(learning_rate=1e-2, n_steps=64, epochs=4, minibatch=16, entropy_coef=0.0)
    base.update(overrides)
    return PpoConfig(**base)


def _fill_buffer(trainer, reward_fn, capacity):
    buffer = RolloutBuffer(capacity, trainer.net.spec.obs_dim)
    obs = np.ones(trainer.net.spec.obs_dim)
    while not buffer.full:
        action, log_prob, value = trainer.act(obs)
        buffer.add(obs, action, log_prob, value, reward_fn(action), True)
    return buffer


class TestReward:
    @pytest.mark.parametrize(
        "e_lat, violation, infeasible, expected",
        [
            (0.0, False, False, 1.0),
            (1.0, False, False, math.exp(-1.0)),
            (0.3, True, False, 0.0),
            (0.3, False, True, -1.0),
            (0.3, True, True, -1.0),
        ],
    )
    def test_reward_table(self, e_lat, violation, infeasible, expected):
        assert compute_reward(e_lat, violation, infeasible) == pytest.approx(expected)

    def test_peak_and_scale(self):
        assert compute_reward(0.5, False, False, peak=2.0, sigma_lat=0.5) == pytest.approx(2.0 * math.exp(-1.0))
        assert compute_reward(0.5, False, True, peak=2.0) == -2.0

    def test_reward_decreases_with_error(self):
        rewards = [compute_reward(e, False, False) for e in np.linspace(0, 3, 10)]
        assert np.all(np.diff(rewards) < 0)

    def test_negative_error_rejected(self):
        with pytest.raises(ValueError):
            compute_reward(-0.1, False, False)

    def test_aggregate_interval_error(self):
        assert aggregate_interval_error([0.1, -0.7, 0.3]) == pytest.approx(0.7)
        with pytest.raises(ValueError):
            aggregate_interval_error([])


class TestActions:
    def test_decode(self):
        spec = PolicyNetSpec()
        assert PolicyAction(4, 24).decode(spec) == SnmpcParams(kappa=0.4, N_u=25)
        assert PolicyAction(20, 37).decode(spec) == SnmpcParams(kappa=2.0, N_u=38)
        assert PolicyAction(0, 0).decode(spec) == SnmpcParams(kappa=0.0, N_u=1)

    def test_decode_out_of_range(self):
        spec = PolicyNetSpec()
        with pytest.raises(ValueError):
            PolicyAction(21, 0).decode(spec)
        with pytest.raises(ValueError):
            PolicyAction(0, 38).decode(spec)

    def test_encode_nearest_grid_point(self):
        spec = PolicyNetSpec()
        assert PolicyAction.encode(SnmpcParams(kappa=0.42, N_u=25), spec) == PolicyAction(4, 24)
        assert PolicyAction.encode(SnmpcParams(kappa=1.96, N_u=40), spec) == PolicyAction(20, 37)
        for i in (0, 7, 20):
            for j in (0, 12, 37):
                action = PolicyAction(i, j)
                assert PolicyAction.encode(action.decode(spec), spec) == action


class TestObservation:
    def _inputs(self):
        state = VehicleState(x_pos=3.0, y_pos=-2.0, psi=0.4, v_lon=20.0, v_lat=0.5, psi_dot=0.1, delta_f=0.05, a=1.0)
        return state.as_array(), SnmpcParams(kappa=0.42, N_u=25), IntervalPerformance(0.6, False, True)

    def test_layout(self, snmpc_config):
        state, prev, perf = self._inputs()
        sigma = DisturbanceRanges().midpoints()
        obs = build_observation(state, prev, perf, np.zeros((10, 3)), sigma, snmpc_config.n_nodes)
        assert obs.shape == (OBS_DIM,) == (47,)
        assert_allclose(obs[:5], [20.0 / 40.0, 0.5 / 5.0, 0.1, 0.05 / 0.61, 0.2])
        assert_allclose(obs[5:7], [0.21, 25 / 38])
        assert_allclose(obs[7:10], [0.3, 0.0, 1.0])

    def test_sigma_at_range_max_is_one(self, snmpc_config):
        state, prev, perf = self._inputs()
        ranges = DisturbanceRanges.widened()
        scales = ObservationScales.from_ranges(ranges.sigma_max)
        obs = build_observation(state, prev, perf, np.zeros((10, 3)), ranges.sigma_max, snmpc_config.n_nodes, scales)
        assert_allclose(obs[10:17], 1.0)

    def test_zero_ranges_keep_unit_scale(self):
        assert ObservationScales.from_ranges([0.0] * 7).sigma_max == (1.0,) * 7

    def test_lateral_error_saturates(self, snmpc_config):
        state, prev, _ = self._inputs()
        obs = build_observation(state, prev, IntervalPerformance(10.0), np.zeros((10, 3)), [0.0] * 7, snmpc_config.n_nodes)
        assert obs[7] == 1.0

    def test_non_finite_components_are_sanitized(self, snmpc_config):
        state, prev, perf = self._inputs()
        state[4] = np.nan
        obs = build_observation(state, prev, perf, np.zeros((10, 3)), [0.0] * 7, snmpc_config.n_nodes)
        assert np.all(np.isfinite(obs))

    def test_reference_shape_checked(self, snmpc_config):
        state, prev, perf = self._inputs()
        with pytest.raises(ValueError):
            build_observation(state, prev, perf, np.zeros((9, 3)), [0.0] * 7, snmpc_config.n_nodes)

    def test_invariant_to_world_frame(self, snmpc_config):
        spec = TrackLoader().load_spec("training")
        moved = spec.model_copy(update={"start_pose": (250.0, -80.0, 1.1)})
        lines = [generate_track(s, 4.5, 3.0) for s in (spec, moved)]
        observations = []
        for line in lines:
            p = line.point_at(700.0)
            # vehicle 0.4 m left of the raceline, heading 0.05 rad off
            x = p.x - 0.4 * math.sin(p.psi)
            y = p.y + 0.4 * math.cos(p.psi)
            pose = (x, y, p.psi + 0.05)
            state = VehicleState(x, y, pose[2], 18.0, 0.2, 0.05, 0.01, 0.3).as_array()
            refs = reference_points_ego(line, 700.0, pose, 18.0, snmpc_config)
            observations.append(
                build_observation(state, SnmpcParams(kappa=0.5, N_u=10), IntervalPerformance(), refs, [0.1] * 7, snmpc_config.n_nodes)
            )
        assert_allclose(observations[0], observations[1], atol=1e-9)

    def test_scales_round_trip(self):
        scales = ObservationScales.from_ranges(DisturbanceRanges.widened().sigma_max)
        assert ObservationScales.from_dict(scales.to_dict()) == scales


class TestPolicyNet:
    def test_output_shapes(self):
        net = PolicyNet(PolicyNetSpec())
        logits_kappa, logits_uph, value = policy_forward(net, np.zeros(47))
        assert logits_kappa.shape == (21,) and logits_uph.shape == (38,)
        assert isinstance(value, float)

    def test_wrong_observation_shape(self):
        with pytest.raises(ValueError):
            policy_forward(PolicyNet(PolicyNetSpec()), np.zeros(46))

    def test_zero_weights_give_uniform_heads(self):
        net = PolicyNet(PolicyNetSpec())
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        dist_kappa, dist_uph, value = net.distributions(torch.randn(3, 47))
        assert torch.allclose(dist_kappa.probs, torch.full((3, 21), 1 / 21))
        assert torch.allclose(dist_uph.probs, torch.full((3, 38), 1 / 38))
        _, entropy, _ = net.evaluate_actions(torch.zeros(1, 47), torch.tensor([[3, 5]]))
        assert float(entropy[0]) == pytest.approx(math.log(21) + math.log(38), rel=1e-6)

    def test_joint_log_prob_factorizes(self):
        torch.manual_seed(0)
        net = PolicyNet(PolicyNetSpec())
        obs = torch.randn(5, 47)
        actions = torch.tensor([[0, 1], [3, 4], [20, 37], [10, 0], [7, 7]])
        log_prob, _, _ = net.evaluate_actions(obs, actions)
        dist_kappa, dist_uph, _ = net.distributions(obs)
        expected = dist_kappa.log_prob(actions[:, 0]) + dist_uph.log_prob(actions[:, 1])
        assert torch.allclose(log_prob, expected)

    def test_deterministic_act_is_argmax(self):
        torch.manual_seed(1)
        net = PolicyNet(PolicyNetSpec())
        obs = np.random.default_rng(0).normal(size=47)
        logits_kappa, logits_uph, _ = policy_forward(net, obs)
        action, _, _ = net.act(obs, deterministic=True)
        assert action == PolicyAction(int(np.argmax(logits_kappa)), int(np.argmax(logits_uph)))

    def test_sampling_follows_generator(self):
        torch.manual_seed(2)
        net = PolicyNet(PolicyNetSpec())
        obs = np.zeros(47)
        first = [net.act(obs, torch.Generator().manual_seed(5))[0] for _ in range(3)]
        assert first[0] == first[1] == first[2]


class TestPpoMath:
    def test_gae_lambda_zero_is_td_error(self):
        rewards = np.array([1.0, 0.5, -1.0, 2.0])
        values = np.array([0.3, 0.2, 0.1, 0.4])
        dones = np.array([False, True, False, False])
        adv, returns = gae_advantages(rewards, values, dones, last_value=0.7, gamma=0.9, lam=0.0)
        expected = [
            1.0 + 0.9 * 0.2 - 0.3,
            0.5 - 0.2,
            -1.0 + 0.9 * 0.4 - 0.1,
            2.0 + 0.9 * 0.7 - 0.4,
        ]
        assert_allclose(adv, expected)
        assert_allclose(returns, adv + values)

    def test_gae_lambda_one_gives_discounted_returns(self):
        rewards = np.array([1.0, 2.0, 3.0])
        values = np.array([0.5, -0.5, 0.25])
        _, returns = gae_advantages(rewards, values, np.array([False, False, True]), gamma=0.5, lam=1.0)
        assert_allclose(returns, [1.0 + 0.5 * 2.0 + 0.25 * 3.0, 2.0 + 0.5 * 3.0, 3.0])

    def test_gae_length_mismatch(self):
        with pytest.raises(ValueError):
            gae_advantages(np.zeros(3), np.zeros(2), np.zeros(3, dtype=bool))

    def test_clipping(self):
        adv = torch.tensor([2.0, -1.0, 1.0])
        ratio = torch.tensor([1.5, 0.5, 1.1])
        out = clipped_surrogate(ratio, adv, 0.2)
        assert_allclose(out.numpy(), [1.2 * 2.0, 0.8 * -1.0, 1.1 * 1.0], rtol=1e-6)

    def test_loss_gradient_matches_finite_differences(self):
        torch.manual_seed(3)
        net = PolicyNet(SMALL_SPEC).double()
        config = _small_config(entropy_coef=0.01)
        obs = torch.randn(8, 4, dtype=torch.float64)
        actions = torch.tensor([[i % 2, 0] for i in range(8)])
        with torch.no_grad():
            old_log_probs, _, _ = net.evaluate_actions(obs, actions)
            old_log_probs = old_log_probs + 0.05 * torch.randn(8, dtype=torch.float64)
        advantages = torch.randn(8, dtype=torch.float64)
        returns = torch.randn(8, dtype=torch.float64)

        loss, _ = ppo_loss(net, obs, actions, old_log_probs, advantages, returns, config)
        net.zero_grad()
        loss.backward()

        weight = net.trunk[0].weight
        analytic = weight.grad.clone()
        eps = 1e-6
        for (i, j) in [(0, 0), (3, 2), (15, 1)]:
            with torch.no_grad():
                weight[i, j] += eps
                plus, _ = ppo_loss(net, obs, actions, old_log_probs, advantages, returns, config)
                weight[i, j] -= 2 * eps
                minus, _ = ppo_loss(net, obs, actions, old_log_probs, advantages, returns, config)
                weight[i, j] += eps
            numeric = (plus.item() - minus.item()) / (2 * eps)
            assert analytic[i, j].item() == pytest.approx(numeric, rel=1e-5, abs=1e-9)


class TestRolloutBuffer:
    def test_capacity_and_done(self):
        buffer = RolloutBuffer(2, 4)
        buffer.add(np.zeros(4), PolicyAction(0, 0), -0.1, 0.0, 1.0, False)
        buffer.mark_done(reward=-1.0)
        assert buffer.dones == [True] and buffer.rewards == [-1.0]
        buffer.add(np.zeros(4), PolicyAction(1, 0), -0.1, 0.0, 1.0, False)
        assert buffer.full
        with pytest.raises(RuntimeError):
            buffer.add(np.zeros(4), PolicyAction(1, 0), -0.1, 0.0, 1.0, False)

    def test_observation_shape(self):
        with pytest.raises(ValueError):
            RolloutBuffer(2, 4).add(np.zeros(3), PolicyAction(0, 0), 0.0, 0.0, 0.0, False)

    def test_update_needs_full_buffer(self):
        trainer = PpoTrainer(PolicyNet(SMALL_SPEC), _small_config(), seed=0)
        with pytest.raises(ValueError):
            trainer.update(RolloutBuffer(64, 4))


class TestPpoTraining:
    def test_two_armed_bandit(self):
        torch.manual_seed(0)
        trainer = PpoTrainer(PolicyNet(SMALL_SPEC), _small_config(), seed=0)
        for _ in range(25):
            buffer = _fill_buffer(trainer, lambda a: float(a.kappa_index == 1), 64)
            stats = trainer.update(buffer)
            assert not stats.aborted
        dist_kappa, _, _ = trainer.net.distributions(torch.ones(1, 4))
        assert float(dist_kappa.probs[0, 1]) > 0.9

    def test_non_finite_loss_leaves_weights(self):
        torch.manual_seed(0)
        trainer = PpoTrainer(PolicyNet(SMALL_SPEC), _small_config(), seed=0)
        buffer = _fill_buffer(trainer, lambda a: 1.0, 64)
        buffer.rewards[0] = float("nan")
        before = {k: v.clone() for k, v in trainer.net.state_dict().items()}
        stats = trainer.update(buffer)
        assert stats.aborted
        for k, v in trainer.net.state_dict().items():
            assert torch.equal(v, before[k])
        assert trainer.update_idx == 0


class TestCheckpoint:
    def test_save_and_load(self, tmp_path):
        torch.manual_seed(0)
        trainer = PpoTrainer(PolicyNet(SMALL_SPEC), _small_config(), seed=4)
        trainer.total_steps = 128
        scales = ObservationScales.from_ranges(DisturbanceRanges().sigma_max)
        path = tmp_path / "ckpt" / "policy.pt"
        save_checkpoint(str(path), trainer, scales, episode_count=3, extra={"track": "training"})
        assert path.exists() and not path.with_suffix(".pt.tmp").exists()

        state = load_checkpoint(str(path))
        assert state.spec == SMALL_SPEC
        assert state.scales == scales
        assert state.total_steps == 128 and state.episode_count == 3
        assert state.extra == {"track": "training"}
        obs = np.array([0.1, -0.2, 0.3, 0.4])
        for a, b in zip(policy_forward(trainer.net, obs), policy_forward(state.build_policy(), obs)):
            assert_allclose(a, b)

    def test_untrained_checkpoint_keeps_initial_weights(self, tmp_path):
        torch.manual_seed(0)
        net = PolicyNet(SMALL_SPEC)
        initial = {k: v.clone() for k, v in net.state_dict().items()}
        trainer = PpoTrainer(net, _small_config(), seed=0)
        save_checkpoint(str(tmp_path / "p.pt"), trainer, ObservationScales())
        restored = load_checkpoint(str(tmp_path / "p.pt")).build_policy()
        for k, v in restored.state_dict().items():
            assert torch.equal(v, initial[k])

    def test_resume_reproduces_uninterrupted_training(self, tmp_path):
        def reward(action):
            return float(action.kappa_index)

        torch.manual_seed(0)
        straight = PpoTrainer(PolicyNet(SMALL_SPEC), _small_config(), seed=7)
        straight.update(_fill_buffer(straight, reward, 64))
        save_checkpoint(str(tmp_path / "mid.pt"), straight, ObservationScales())
        straight.update(_fill_buffer(straight, reward, 64))

        resumed = restore_trainer(load_checkpoint(str(tmp_path / "mid.pt")), _small_config(), seed=7)
        resumed.update(_fill_buffer(resumed, reward, 64))

        for k, v in resumed.net.state_dict().items():
            assert torch.allclose(v, straight.net.state_dict()[k])
        assert resumed.update_idx == straight.update_idx == 2

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / "absent.pt"))

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "old.pt"
        torch.save({"version": CHECKPOINT_VERSION + 1}, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "garbage.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))


class TestScheduler:
    @pytest.mark.parametrize("step, expected", [(0, True), (121, False), (122, True), (244, True), (300, False)])
    def test_switching_steps(self, step, expected):
        assert parameter_schedule(step, 122) is expected

    def test_invalid_period(self):
        with pytest.raises(ValueError):
            parameter_schedule(5, 0)

    def test_static_agent(self, snmpc_config):
        agent = ParameterAgent(snmpc_config)
        assert agent.decide(0).params == SnmpcParams(kappa=0.42, N_u=25)
        assert agent.observe_step(3, SolverStatus.INFEASIBLE, True) is None

    def test_replay_holds_last_entry(self, snmpc_config):
        sequence = [SnmpcParams(kappa=0.1, N_u=3), SnmpcParams(kappa=0.9, N_u=12)]
        agent = ReplayAgent(snmpc_config, sequence)
        assert [agent.decide(i).params for i in range(4)] == [sequence[0], sequence[1], sequence[1], sequence[1]]
        agent.reset()
        assert agent.decide(0).params == sequence[0]

    def test_empty_replay_rejected(self, snmpc_config):
        with pytest.raises(ValueError):
            ReplayAgent(snmpc_config, [])

    def test_load_replay_sequence(self, tmp_path):
        path = tmp_path / "decisions.csv"
        pd.DataFrame({"step": [122, 0], "kappa": [0.8, 0.4], "N_u": [10, 25]}).to_csv(path, index=False)
        assert load_replay_sequence(str(path)) == [SnmpcParams(kappa=0.4, N_u=25), SnmpcParams(kappa=0.8, N_u=10)]
        pd.DataFrame({"step": [0], "kappa": [0.4]}).to_csv(path, index=False)
        with pytest.raises(ValueError):
            load_replay_sequence(str(path))

    def test_uph_halving(self, snmpc_config):
        agent = UphHalvingAgent(snmpc_config, switching_steps=3)
        assert agent.observe_step(0, SolverStatus.INFEASIBLE, False) == SnmpcParams(kappa=0.42, N_u=12)
        assert agent.observe_step(1, SolverStatus.SOLVED, True) == SnmpcParams(kappa=0.42, N_u=6)
        assert agent.decide(2).params.N_u == 6
        assert agent.observe_step(2, SolverStatus.SOLVED, False) is None
        assert agent.observe_step(3, SolverStatus.MAX_ITERATIONS, False) is None
        assert agent.observe_step(4, SolverStatus.SOLVED, False) == SnmpcParams(kappa=0.42, N_u=25)

    def test_uph_halving_floor(self, snmpc_config):
        agent = UphHalvingAgent(snmpc_config, switching_steps=3)
        for step in range(10):
            agent.observe_step(step, SolverStatus.INFEASIBLE, False)
        assert agent.current.N_u == 1
        assert agent.observe_step(10, SolverStatus.INFEASIBLE, False) is None

    def test_policy_agent_frozen_heads(self, snmpc_config):
        torch.manual_seed(0)
        net = PolicyNet(PolicyNetSpec())
        obs = np.random.default_rng(1).normal(size=47)
        full = PolicyAgent(snmpc_config, net).decide(0, obs).params
        kappa_only = PolicyAgent(snmpc_config, net, frozen="uph").decide(0, obs).params
        uph_only = PolicyAgent(snmpc_config, net, frozen="kappa").decide(0, obs).params
        assert kappa_only == SnmpcParams(kappa=full.kappa, N_u=25)
        assert uph_only == SnmpcParams(kappa=0.42, N_u=full.N_u)

    def test_policy_agent_needs_observation(self, snmpc_config):
        with pytest.raises(ValueError):
            PolicyAgent(snmpc_config, PolicyNet(PolicyNetSpec())).decide(0, None)

    def test_build_agent(self, snmpc_config):
        net = PolicyNet(PolicyNetSpec())
        assert build_agent(AgentMode.STATIC, snmpc_config, 122).mode == AgentMode.STATIC
        assert build_agent(AgentMode.UPH_HALVING, snmpc_config, 122).mode == AgentMode.UPH_HALVING
        nominal = build_agent(AgentMode.NOMINAL, snmpc_config, 122)
        assert nominal.mode == AgentMode.NOMINAL and not nominal.propagates_uncertainty
        assert nominal.decide(0).params == SnmpcParams(kappa=0.0, N_u=25)
        assert build_agent(AgentMode.ADAPT_KAPPA_ONLY, snmpc_config, 122, net=net).mode == AgentMode.ADAPT_KAPPA_ONLY
        assert build_agent(AgentMode.ADAPT_UPH_ONLY, snmpc_config, 122, net=net).mode == AgentMode.ADAPT_UPH_ONLY
        with pytest.raises(ValueError):
            build_agent(AgentMode.ADAPTIVE, snmpc_config, 122)
        with pytest.raises(ValueError):
            build_agent(AgentMode.REPLAY, snmpc_config, 122)
