"""Rollout collection, GAE against the brute-force definition, PPO update
mechanics (clipping, standardization, exact gradient step), and the training
loop's determinism and resume behavior."""
from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from graphnav.envs import BanditEnv, SearchEnv, prepare_scene
from graphnav.floorplan import FloorPlan, RoomSpec
from graphnav.neural import (
    init_parameters,
    log_softmax,
    policy_forward,
    sample_action,
    softmax,
)
from graphnav.rl import (
    METRICS_HEADER,
    PpoConfig,
    RlError,
    RolloutBuffer,
    Transition,
    collect_rollout,
    compute_gae,
    ppo_update,
    train,
)
from graphnav.seeding import derive_rng
from graphnav.world import EpisodeConfig

from test_neural import kink_margin, make_obs

RING_OBS = BanditEnv()._obs


def make_transition(reward, value, done, truncated=False, bootstrap=0.0) -> Transition:
    return Transition(
        observation=RING_OBS,
        action=0,
        log_prob=-1.0,
        value=value,
        reward=reward,
        done=done,
        truncated=truncated,
        logits=np.zeros(3),
        bootstrap_value=bootstrap,
    )


def buffer_from(rows, final_value=0.0) -> RolloutBuffer:
    lane = [make_transition(*row) for row in rows]
    return RolloutBuffer(lanes=[lane], final_values=[final_value])


def gae_oracle(rewards, values, dones, bootstraps, final_value, gamma, lam):
    """Direct sum-of-discounted-deltas definition, O(T^2)."""
    n = len(rewards)
    deltas = []
    for t in range(n):
        nxt = values[t + 1] if t + 1 < n else final_value
        nonterm = 0.0 if dones[t] else 1.0
        r_eff = rewards[t] + gamma * bootstraps[t]
        deltas.append(r_eff + gamma * nxt * nonterm - values[t])
    out = []
    for t in range(n):
        acc, w = 0.0, 1.0
        for u in range(t, n):
            acc += w * deltas[u]
            if dones[u]:
                break
            w *= gamma * lam
        out.append(acc)
    return out


class TestComputeGae:
    def test_single_terminal_step(self):
        buf = buffer_from([(1.0, 0.0, True)])
        adv, ret = compute_gae(buf, 0.99, 0.9)
        assert adv.tolist() == [1.0]
        assert ret.tolist() == [1.0]

    def test_two_step_worked_example(self):
        buf = buffer_from([(1.0, 0.5, False), (0.0, 0.2, True)])
        adv, ret = compute_gae(buf, 0.99, 0.9)
        assert adv[1] == pytest.approx(-0.2, abs=1e-15)
        assert adv[0] == pytest.approx(0.5198, abs=1e-12)
        assert ret[0] == pytest.approx(1.0198, abs=1e-12)

    def test_truncation_bootstraps_instead_of_terminating(self):
        buf = buffer_from([(0.5, 0.3, True, True, 2.0)])
        adv, _ = compute_gae(buf, 0.99, 0.9)
        assert adv[0] == pytest.approx(0.5 + 0.99 * 2.0 - 0.3, abs=1e-15)

    def test_matches_brute_force_on_random_sequences(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(1, 65))
            rewards = rng.normal(size=n).tolist()
            values = rng.normal(size=n).tolist()
            dones = (rng.random(n) < 0.15).tolist()
            truncated = [d and rng.random() < 0.5 for d in dones]
            boots = [float(rng.normal()) if tr else 0.0 for tr in truncated]
            final = float(rng.normal()) if not dones[-1] else 0.0
            buf = buffer_from(
                [
                    (rewards[t], values[t], dones[t], truncated[t], boots[t])
                    for t in range(n)
                ],
                final_value=final,
            )
            adv, ret = compute_gae(buf, 0.99, 0.9)
            want = gae_oracle(rewards, values, dones, boots, final, 0.99, 0.9)
            assert np.allclose(adv, want, atol=1e-10)
            assert np.allclose(ret, adv + np.array(values), atol=0)

    def test_lambda_one_is_discounted_return_minus_value(self):
        rng = np.random.default_rng(9)
        n = 20
        rewards = rng.normal(size=n)
        values = rng.normal(size=n)
        dones = [False] * (n - 1) + [True]
        buf = buffer_from([(rewards[t], values[t], dones[t]) for t in range(n)])
        adv, _ = compute_gae(buf, 0.95, 1.0)
        for t in range(n):
            ret = sum(0.95 ** (u - t) * rewards[u] for u in range(t, n))
            assert adv[t] == pytest.approx(ret - values[t], abs=1e-10)

    def test_multi_lane_concatenation_order(self):
        buf = RolloutBuffer(
            lanes=[
                [make_transition(1.0, 0.0, True)],
                [make_transition(2.0, 0.0, True), make_transition(3.0, 0.0, True)],
            ],
            final_values=[0.0, 0.0],
        )
        adv, _ = compute_gae(buf, 0.99, 0.9)
        assert adv.tolist() == [1.0, 2.0, 3.0]


class TestCollectRollout:
    def test_bandit_shapes_order_and_replay(self):
        params = init_parameters(1)
        envs = [BanditEnv(0), BanditEnv(0)]
        for env in envs:
            env.reset()
        buf = collect_rollout(envs, params, n_steps=5, seed=11)
        assert buf.n_transitions == 10
        assert [len(lane) for lane in buf.lanes] == [5, 5]
        assert len(buf.episode_returns) == 10  # one-step episodes
        for tr in buf.flat():
            assert tr.done and not tr.truncated
            assert tr.log_prob <= 0.0
            assert math.isfinite(tr.value)
            # replay oracle: the stored log_prob is the log-softmax of the
            # stored logits at the stored action
            assert tr.log_prob == pytest.approx(
                float(log_softmax(tr.logits)[tr.action]), abs=1e-12
            )

        envs2 = [BanditEnv(0), BanditEnv(0)]
        for env in envs2:
            env.reset()
        buf2 = collect_rollout(envs2, params, n_steps=5, seed=11)
        assert [t.action for t in buf2.flat()] == [t.action for t in buf.flat()]
        assert [t.reward for t in buf2.flat()] == [t.reward for t in buf.flat()]

    def test_search_auto_reset_and_bootstrap(self):
        plan = FloorPlan(bounds=(8.0, 6.0), rooms=[RoomSpec("r0", 0, 0, 8, 6, "office")], objects=[])
        env = SearchEnv(
            prepare_scene(plan),
            episode_config=EpisodeConfig(max_steps=6, n_targets=8),
        )
        env.reseed(2)
        env.reset()
        params = init_parameters(2)
        buf = collect_rollout([env], params, n_steps=15, seed=3)
        lane = buf.lanes[0]
        assert len(lane) == 15
        for tr in lane:
            if tr.truncated:
                assert tr.done
                assert tr.bootstrap_value != 0.0
            else:
                assert tr.bootstrap_value == 0.0
        done_idx = [i for i, tr in enumerate(lane) if tr.done]
        assert done_idx and done_idx[0] <= 5
        assert buf.episode_lengths == [done_idx[0] + 1] + [
            b - a for a, b in zip(done_idx, done_idx[1:])
        ]
        if not lane[-1].done:
            _, want, _ = policy_forward(params, env.last_observation)
            assert buf.final_values[0] == want

    def test_error_carries_lane_id(self):
        class BrokenEnv:
            n_actions = 3
            last_observation = RING_OBS

            def step(self, action):
                raise RuntimeError("boom")

        ok = BanditEnv()
        ok.reset()
        with pytest.raises(RlError, match="lane 1"):
            collect_rollout([ok, BrokenEnv()], init_parameters(0), 2, seed=0)

    def test_requires_reset(self):
        with pytest.raises(RlError, match="not reset"):
            collect_rollout([BanditEnv()], init_parameters(0), 2, seed=0)


def bandit_buffer(params, n=32, seed=4):
    envs = [BanditEnv(1)]
    envs[0].reset()
    buf = collect_rollout(envs, params, n_steps=n, seed=seed)
    compute_gae(buf, 0.99, 0.9)
    return buf


class TestPpoUpdate:
    def test_requires_gae(self):
        buf = buffer_from([(1.0, 0.0, True)])
        with pytest.raises(RlError, match="compute_gae"):
            ppo_update(init_parameters(0), buf, PpoConfig(), np.random.default_rng(0))

    def test_zero_learning_rate_fixes_ratio_at_one(self):
        params = init_parameters(8)
        before = {name: a.copy() for name, a in params.named_arrays()}
        buf = bandit_buffer(params)
        cfg = PpoConfig(
            learning_rate=0.0, batch_size=32, minibatch_size=16, sgd_iters=3, n_workers=1
        )
        stats = ppo_update(params, buf, cfg, derive_rng(0, "update"))
        assert stats.clip_frac == 0.0
        assert abs(stats.kl) < 1e-12
        assert abs(stats.policy_loss) < 1e-10  # -mean of standardized advantages
        assert not stats.aborted
        for name, a in params.named_arrays():
            assert np.array_equal(a, before[name]), name

    def test_nonfinite_loss_aborts_before_any_step(self):
        params = init_parameters(9)
        before = {name: a.copy() for name, a in params.named_arrays()}
        buf = bandit_buffer(params)
        buf.advantages[3] = np.inf
        cfg = PpoConfig(batch_size=32, minibatch_size=32, sgd_iters=2, n_workers=1)
        stats = ppo_update(params, buf, cfg, derive_rng(1, "update"))
        assert stats.aborted
        for name, a in params.named_arrays():
            assert np.array_equal(a, before[name]), name

    def test_single_step_matches_loss_finite_differences(self):
        # one epoch, one minibatch, plain SGD: the parameter delta must be
        # exactly -lr times the analytic gradient of the minibatch loss, so
        # differencing the loss directly cross-checks the whole PPO gradient
        # chain (surrogate + value + entropy terms)
        rng = np.random.default_rng(77)
        params = init_parameters(77)
        nudge = np.random.default_rng(78)
        for name, arr in params.named_arrays():
            if "_b" in name:
                arr += nudge.choice([-1.0, 1.0], size=arr.shape) * nudge.uniform(
                    0.1, 0.4, size=arr.shape
                )

        observations = []
        while len(observations) < 4:
            obs = make_obs(rng, int(rng.integers(3, 7)))
            if kink_margin(params, obs) > 5e-4:
                observations.append(obs)

        lane = []
        act_rng = derive_rng(5, "actions")
        for obs in observations:
            logits, value, _ = policy_forward(params, obs)
            action, logp, _ = sample_action(logits, act_rng)
            lane.append(
                Transition(
                    observation=obs,
                    action=action,
                    log_prob=logp,
                    value=value,
                    reward=float(rng.normal()),
                    done=True,
                    truncated=False,
                    logits=logits,
                )
            )
        buf = RolloutBuffer(lanes=[lane], final_values=[0.0])
        compute_gae(buf, 0.99, 0.9)
        adv = buf.advantages
        adv_std = (adv - adv.mean()) / (adv.std() + 1e-8)
        returns = buf.returns.copy()
        old_logp = np.array([t.log_prob for t in lane])
        actions = [t.action for t in lane]
        cfg = PpoConfig(
            learning_rate=1e-3,
            batch_size=4,
            minibatch_size=4,
            sgd_iters=1,
            value_coef=0.7,
            entropy_coef=0.3,
            n_workers=1,
        )

        def loss_at(p) -> float:
            total_surr, total_val, total_ent = 0.0, 0.0, 0.0
            for i, obs in enumerate(observations):
                logits, value, _ = policy_forward(p, obs)
                logp_all = log_softmax(logits)
                ratio = math.exp(float(logp_all[actions[i]]) - old_logp[i])
                clipped = min(max(ratio, 1.0 - cfg.clip), 1.0 + cfg.clip)
                total_surr += min(ratio * adv_std[i], clipped * adv_std[i])
                total_val += (value - returns[i]) ** 2
                p_i = softmax(logits)
                total_ent += float(-(p_i * logp_all).sum())
            m = len(observations)
            return (
                -total_surr / m
                + cfg.value_coef * total_val / m
                - cfg.entropy_coef * total_ent / m
            )

        before = {name: a.copy() for name, a in params.named_arrays()}
        ppo_update(params, buf, cfg, derive_rng(6, "update"))

        # probe the loss around the pre-update parameters on a clean copy
        old_params = init_parameters(77)
        for name, dst in old_params.named_arrays():
            dst[:] = before[name]
        after = dict(params.named_arrays())
        eps = 1e-6
        check_rng = np.random.default_rng(80)
        for name, arr in old_params.named_arrays():
            g_est = (before[name] - after[name]) / cfg.learning_rate
            for flat in check_rng.choice(arr.size, size=min(3, arr.size), replace=False):
                orig = arr.flat[flat]
                arr.flat[flat] = orig + eps
                hi = loss_at(old_params)
                arr.flat[flat] = orig - eps
                lo = loss_at(old_params)
                arr.flat[flat] = orig
                fd = (hi - lo) / (2 * eps)
                g = g_est.flat[flat]
                assert abs(fd - g) <= 2e-3 * max(abs(fd), abs(g)) + 1e-7, (
                    f"{name}[{flat}]: step implies {g}, finite difference {fd}"
                )


class TestConfigValidation:
    def test_rejects_bad_fields(self):
        with pytest.raises(RlError):
            PpoConfig(gamma=0.0)
        with pytest.raises(RlError):
            PpoConfig(gamma=1.5)
        with pytest.raises(RlError):
            PpoConfig(gae_lambda=-0.1)
        with pytest.raises(RlError):
            PpoConfig(minibatch_size=8192)
        with pytest.raises(RlError):
            PpoConfig(batch_size=100, minibatch_size=10, n_workers=8)
        with pytest.raises(RlError):
            PpoConfig(optimizer="rmsprop")


def bandit_envs(n, arm=1):
    return [BanditEnv(arm) for _ in range(n)]


class TestTrain:
    def test_smoke_metrics_checkpoints_determinism(self, tmp_path):
        cfg = PpoConfig(
            learning_rate=1e-3,
            batch_size=64,
            minibatch_size=32,
            sgd_iters=4,
            total_steps=640,
            n_workers=2,
            optimizer="adam",
            seed=123,
        )
        res = train(bandit_envs(2), cfg, tmp_path / "a", meta={"config_hash": "x"})
        assert res.rounds == 10 and res.steps == 640
        lines = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
        assert lines[0] == METRICS_HEADER
        assert len(lines) == 11
        rewards = [float(line.split(",")[1]) for line in lines[1:]]
        assert np.mean(rewards[-3:]) > np.mean(rewards[:3])  # learning signal
        names = {p.name for p in res.checkpoint_paths}
        assert {"policy_round00000.npz", "policy_round00010.npz", "policy_final.npz"} <= names

        train(bandit_envs(2), cfg, tmp_path / "b", meta={"config_hash": "x"})
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (
            tmp_path / "b" / "metrics.csv"
        ).read_bytes()

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        cfg_full = PpoConfig(
            learning_rate=1e-3,
            batch_size=32,
            minibatch_size=16,
            sgd_iters=2,
            total_steps=192,
            n_workers=2,
            optimizer="adam",
            seed=7,
        )
        train(bandit_envs(2), cfg_full, tmp_path / "full")
        full_rows = (tmp_path / "full" / "metrics.csv").read_text().splitlines()

        cfg_half = replace(cfg_full, total_steps=96)
        half = train(bandit_envs(2), cfg_half, tmp_path / "half")
        ckpt = tmp_path / "half" / "policy_round00003.npz"
        assert ckpt in half.checkpoint_paths

        train(bandit_envs(2), cfg_full, tmp_path / "resumed", resume=ckpt)
        resumed_rows = (tmp_path / "resumed" / "metrics.csv").read_text().splitlines()
        assert resumed_rows[0] == METRICS_HEADER
        assert resumed_rows[1:] == full_rows[4:]

    def test_zero_steps_writes_initial_checkpoint_only(self, tmp_path):
        cfg = PpoConfig(total_steps=0, n_workers=1)
        res = train(bandit_envs(1), cfg, tmp_path / "z")
        assert res.rounds == 0
        lines = (tmp_path / "z" / "metrics.csv").read_text().splitlines()
        assert lines == [METRICS_HEADER]
        assert {p.name for p in res.checkpoint_paths} == {
            "policy_round00000.npz",
            "policy_final.npz",
        }

    def test_lane_count_mismatch(self, tmp_path):
        with pytest.raises(RlError, match="envs"):
            train(bandit_envs(1), PpoConfig(n_workers=2), tmp_path / "m")
