"""Rollout collection, generalized advantage estimation, the clipped PPO
update, and the round-based training loop.

Determinism contract: every random draw derives from (config seed, round,
lane) stream names, and lanes reset at round boundaries. Resuming from a
round-boundary checkpoint therefore replays the remaining rounds exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import Env
from .neural import (
    AdamState,
    PolicyParameters,
    adam_step,
    backward,
    batch_forward,
    build_batch,
    entropy_of,
    init_adam,
    init_parameters,
    load_checkpoint,
    log_softmax,
    policy_forward,
    sample_action,
    save_checkpoint,
    sgd_step,
    softmax,
)
from .observation import GraphObservation
from .seeding import derive_rng, derive_seed


class RlError(RuntimeError):
    pass


METRICS_HEADER = "step,reward_mean,ep_len_mean,policy_loss,value_loss,clip_frac,kl"


@dataclass(frozen=True)
class PpoConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4096
    minibatch_size: int = 128
    sgd_iters: int = 30
    gamma: float = 0.99
    gae_lambda: float = 0.9
    clip: float = 0.2
    value_coef: float = 1.0
    entropy_coef: float = 0.0
    total_steps: int = 200_000
    n_workers: int = 8
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise RlError(f"gamma out of range: {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise RlError(f"gae_lambda out of range: {self.gae_lambda}")
        if self.minibatch_size > self.batch_size:
            raise RlError("minibatch_size must not exceed batch_size")
        if self.batch_size % self.n_workers != 0:
            raise RlError("batch_size must divide evenly across workers")
        if self.optimizer not in ("sgd", "adam"):
            raise RlError(f"unknown optimizer: {self.optimizer}")


@dataclass
class Transition:
    observation: GraphObservation
    action: int
    log_prob: float
    value: float
    reward: float
    done: bool
    truncated: bool
    logits: np.ndarray
    # critic value of the observation after a truncating step; folded into
    # the reward during GAE so a time limit is not treated as task failure
    bootstrap_value: float = 0.0


@dataclass
class RolloutBuffer:
    lanes: list[list[Transition]]
    # critic value of each lane's current observation when the round was cut
    # mid-episode (0.0 if the lane's last transition finished an episode)
    final_values: list[float]
    episode_returns: list[float] = field(default_factory=list)
    episode_lengths: list[int] = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def flat(self) -> list[Transition]:
        return [t for lane in self.lanes for t in lane]

    @property
    def n_transitions(self) -> int:
        return sum(len(lane) for lane in self.lanes)


def collect_rollout(
    envs: list[Env], params: PolicyParameters, n_steps: int, seed: int
) -> RolloutBuffer:
    """Run every lane n_steps forward under a fixed parameter snapshot.

    Lanes must already hold a live observation via env.reset(); episodes
    auto-reset on done. Action sampling derives from (seed, lane).
    """
    buffer = RolloutBuffer(lanes=[[] for _ in envs], final_values=[0.0] * len(envs))
    for lane, env in enumerate(envs):
        rng = derive_rng(seed, "actions", lane)
        obs = env.last_observation
        if obs is None:
            raise RlError(f"lane {lane}: env not reset before rollout")
        ep_return, ep_length = 0.0, 0
        for _ in range(n_steps):
            try:
                logits, value, _ = policy_forward(params, obs)
                action, log_prob, _ = sample_action(logits, rng)
                next_obs, reward, done, info = env.step(action)
            except Exception as exc:  # pragma: no cover - env failures are rare
                raise RlError(f"lane {lane}: {exc}") from exc
            tr = Transition(
                observation=obs,
                action=action,
                log_prob=log_prob,
                value=value,
                reward=reward,
                done=done,
                truncated=bool(info.get("truncated", False)),
                logits=logits,
            )
            ep_return += reward
            ep_length += 1
            if done:
                if tr.truncated:
                    _, tr.bootstrap_value, _ = policy_forward(params, next_obs)
                buffer.episode_returns.append(ep_return)
                buffer.episode_lengths.append(ep_length)
                ep_return, ep_length = 0.0, 0
                next_obs = env.reset()
            buffer.lanes[lane].append(tr)
            obs = next_obs
        if not buffer.lanes[lane][-1].done:
            _, buffer.final_values[lane], _ = policy_forward(params, obs)
    return buffer


def compute_gae(
    buffer: RolloutBuffer, gamma: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and returns, lane-major order, written back to the buffer.

    delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
    A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}

    A truncating step sees r_t + gamma * bootstrap_value instead of raw r_t.
    """
    adv_chunks, ret_chunks = [], []
    for lane, transitions in enumerate(buffer.lanes):
        n = len(transitions)
        adv = np.zeros(n)
        running = 0.0
        next_value = buffer.final_values[lane]
        for t in range(n - 1, -1, -1):
            tr = transitions[t]
            nonterminal = 0.0 if tr.done else 1.0
            reward = tr.reward + gamma * tr.bootstrap_value
            delta = reward + gamma * next_value * nonterminal - tr.value
            running = delta + gamma * lam * nonterminal * running
            adv[t] = running
            next_value = tr.value
        values = np.array([tr.value for tr in transitions])
        adv_chunks.append(adv)
        ret_chunks.append(adv + values)
    buffer.advantages = np.concatenate(adv_chunks) if adv_chunks else np.zeros(0)
    buffer.returns = np.concatenate(ret_chunks) if ret_chunks else np.zeros(0)
    return buffer.advantages, buffer.returns


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_frac: float
    kl: float
    aborted: bool = False


def ppo_update(
    params: PolicyParameters,
    buffer: RolloutBuffer,
    cfg: PpoConfig,
    rng: np.random.Generator,
    adam_state: AdamState | None = None,
) -> UpdateStats:
    """Clipped-surrogate PPO over the buffer, updating params in place.

    Advantages are standardized once over the whole batch. Minibatches are
    reshuffled every epoch. A non-finite loss aborts immediately with
    aborted=True and no further parameter changes.
    """
    if buffer.advantages is None or buffer.returns is None:
        raise RlError("compute_gae must run before ppo_update")
    transitions = buffer.flat()
    n = len(transitions)
    adv = buffer.advantages
    if not (np.all(np.isfinite(adv)) and np.all(np.isfinite(buffer.returns))):
        # a non-finite advantage guarantees a non-finite loss; stop before
        # touching the parameters
        return UpdateStats(
            policy_loss=float("nan"),
            value_loss=float("nan"),
            entropy=float("nan"),
            clip_frac=0.0,
            kl=0.0,
            aborted=True,
        )
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    returns = buffer.returns
    actions = np.array([t.action for t in transitions])
    old_logp = np.array([t.log_prob for t in transitions])

    sums = {"policy": 0.0, "value": 0.0, "entropy": 0.0, "clip": 0.0, "kl": 0.0}
    n_minibatches = 0
    for _ in range(cfg.sgd_iters):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start : start + cfg.minibatch_size]
            m = len(idx)
            batch = build_batch([transitions[i].observation for i in idx])
            logits, values, cache = batch_forward(params, batch)
            logp_all = log_softmax(logits)
            logp = logp_all[np.arange(m), actions[idx]]
            ratio = np.exp(logp - old_logp[idx])
            clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
            adv_mb = adv[idx]
            surrogate = np.minimum(ratio * adv_mb, clipped * adv_mb)
            policy_loss = -surrogate.mean()
            value_err = values - returns[idx]
            value_loss = np.mean(value_err**2)
            entropy = entropy_of(logits).mean()
            total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
            clip_frac = float(np.mean(np.abs(ratio - 1.0) > cfg.clip))
            kl = float(np.mean(old_logp[idx] - logp))
            sums["policy"] += float(policy_loss)
            sums["value"] += float(value_loss)
            sums["entropy"] += float(entropy)
            sums["clip"] += clip_frac
            sums["kl"] += kl
            n_minibatches += 1
            if not np.isfinite(total):
                k = n_minibatches
                return UpdateStats(
                    policy_loss=sums["policy"] / k,
                    value_loss=sums["value"] / k,
                    entropy=sums["entropy"] / k,
                    clip_frac=sums["clip"] / k,
                    kl=sums["kl"] / k,
                    aborted=True,
                )

            # d(policy_loss)/dlogits: gradient flows only through samples
            # where the unclipped branch attains the min
            p = softmax(logits)
            unclipped_active = (ratio * adv_mb) <= (clipped * adv_mb)
            dlogp = -(adv_mb * ratio * unclipped_active) / m
            onehot = np.zeros((m, logits.shape[1]))
            onehot[np.arange(m), actions[idx]] = 1.0
            dlogits = dlogp[:, None] * (onehot - p)
            if cfg.entropy_coef != 0.0:
                ent = entropy_of(logits)
                dlogits += (cfg.entropy_coef / m) * p * (logp_all + ent[:, None])
            dvalues = (2.0 * cfg.value_coef / m) * value_err
            grads = backward(params, cache, dlogits, dvalues)
            if cfg.optimizer == "adam":
                adam_step(params, grads, adam_state, cfg.learning_rate)
            else:
                sgd_step(params, grads, cfg.learning_rate)

    k = max(n_minibatches, 1)
    return UpdateStats(
        policy_loss=sums["policy"] / k,
        value_loss=sums["value"] / k,
        entropy=sums["entropy"] / k,
        clip_frac=sums["clip"] / k,
        kl=sums["kl"] / k,
    )


@dataclass
class TrainResult:
    params: PolicyParameters
    metrics_path: Path
    checkpoint_paths: list[Path]
    rounds: int
    steps: int


def train(
    envs: list[Env],
    cfg: PpoConfig,
    out_dir: str | Path,
    meta: dict | None = None,
    resume: str | Path | None = None,
    checkpoint_every: int = 10,
) -> TrainResult:
    """Alternate rollout collection and PPO updates until total_steps.

    Writes metrics.csv (one row per round) and round-boundary checkpoints.
    Resuming from a checkpoint replays the remaining rounds exactly, because
    all randomness derives from (seed, round, lane).
    """
    if len(envs) != cfg.n_workers:
        raise RlError(f"expected {cfg.n_workers} envs, got {len(envs)}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RlError(f"cannot create output directory {out_dir}: {exc}") from exc
    meta = dict(meta or {})

    params = init_parameters(cfg.seed)
    adam_state = init_adam(params) if cfg.optimizer == "adam" else None
    first_round = 0
    if resume is not None:
        params, ckpt_meta = load_checkpoint(resume)
        first_round = int(ckpt_meta["round"])
        if cfg.optimizer == "adam":
            adam_state = _load_adam(Path(resume).with_suffix(".opt.npz"), params)

    steps_per_lane = cfg.batch_size // cfg.n_workers
    total_rounds = math.ceil(cfg.total_steps / cfg.batch_size)
    checkpoints: list[Path] = []
    metrics_path = out_dir / "metrics.csv"
    mode = "a" if resume is not None and metrics_path.exists() else "w"

    def write_checkpoint(round_index: int, step: int) -> Path:
        path = out_dir / f"policy_round{round_index:05d}.npz"
        save_checkpoint(path, params, {**meta, "round": round_index, "step": step})
        if adam_state is not None:
            _save_adam(path.with_suffix(".opt.npz"), adam_state)
        checkpoints.append(path)
        return path

    with open(metrics_path, mode) as metrics:
        if mode == "w":
            metrics.write(METRICS_HEADER + "\n")
        if first_round == 0:
            write_checkpoint(0, 0)
        for round_index in range(first_round, total_rounds):
            round_seed = derive_seed(cfg.seed, "round", round_index)
            for lane, env in enumerate(envs):
                env.reseed(derive_seed(round_seed, "lane", lane))
                env.reset()
            buffer = collect_rollout(envs, params, steps_per_lane, seed=round_seed)
            compute_gae(buffer, cfg.gamma, cfg.gae_lambda)
            stats = ppo_update(
                params, buffer, cfg, derive_rng(round_seed, "update"), adam_state
            )
            step = (round_index + 1) * cfg.batch_size
            reward_mean = float(np.mean(buffer.episode_returns)) if buffer.episode_returns else float("nan")
            len_mean = float(np.mean(buffer.episode_lengths)) if buffer.episode_lengths else float("nan")
            metrics.write(
                f"{step},{reward_mean!r},{len_mean!r},{stats.policy_loss!r},"
                f"{stats.value_loss!r},{stats.clip_frac!r},{stats.kl!r}\n"
            )
            metrics.flush()
            if stats.aborted:
                raise RlError(
                    f"non-finite loss at round {round_index}; "
                    f"last stats: policy={stats.policy_loss} value={stats.value_loss}"
                )
            if (round_index + 1) % checkpoint_every == 0 and round_index + 1 < total_rounds:
                write_checkpoint(round_index + 1, step)
        final = write_checkpoint(total_rounds, total_rounds * cfg.batch_size)
    final_path = out_dir / "policy_final.npz"
    final_path.write_bytes(final.read_bytes())
    checkpoints.append(final_path)
    return TrainResult(
        params=params,
        metrics_path=metrics_path,
        checkpoint_paths=checkpoints,
        rounds=total_rounds,
        steps=total_rounds * cfg.batch_size,
    )


def _save_adam(path: Path, state: AdamState) -> None:
    arrays = {f"m{i}": a for i, a in enumerate(state.m)}
    arrays.update({f"v{i}": a for i, a in enumerate(state.v)})
    arrays["t"] = np.array(state.t)
    np.savez(path, **arrays)


def _load_adam(path: Path, params: PolicyParameters) -> AdamState:
    n = len(params.named_arrays())
    with np.load(path) as data:
        return AdamState(
            m=[data[f"m{i}"] for i in range(n)],
            v=[data[f"v{i}"] for i in range(n)],
            t=int(data["t"]),
        )
