"""
PPO with clipped surrogate objective and GAE for the two-head scheduler policy.

Checkpoints are torch-serialized dictionaries holding the policy weights, the
optimizer state, step counters, RNG states and the observation scales.
"""
import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.optim as optim
from loguru import logger

from app.core.exceptions import CheckpointError
from app.engines.rl.observation import ObservationScales, PolicyAction
from app.engines.rl.policy import PolicyNet
from app.models.experiment import PolicyNetSpec, PpoConfig

CHECKPOINT_VERSION = 1


def gae_advantages(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    last_value: float = 0.0,
    gamma: float = 0.99,
    lam: float = 0.95,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generalized advantage estimation.

    ``dones[t]`` marks the end of an episode after transition t; no value is
    bootstrapped across it. ``last_value`` bootstraps the buffer end when the last
    transition is not terminal.

    Returns:
        (advantages, returns) with returns = advantages + values
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError("rewards, values and dones must have equal lengths")

    advantages = np.zeros_like(rewards)
    gae = 0.0
    for t in reversed(range(len(rewards))):
        next_value = last_value if t == len(rewards) - 1 else values[t + 1]
        non_terminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * non_terminal - values[t]
        gae = delta + gamma * lam * non_terminal * gae
        advantages[t] = gae
    return advantages, advantages + values


class RolloutBuffer:
    """Fixed-capacity on-policy storage."""

    def __init__(self, capacity: int, obs_dim: int):
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.reset()

    def reset(self):
        self.observations: List[np.ndarray] = []
        self.actions: List[Tuple[int, int]] = []
        self.log_probs: List[float] = []
        self.values: List[float] = []
        self.rewards: List[float] = []
        self.dones: List[bool] = []

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def full(self) -> bool:
        return len(self) >= self.capacity

    def add(self, obs: np.ndarray, action: PolicyAction, log_prob: float, value: float, reward: float, done: bool):
        if self.full:
            raise RuntimeError(f"Rollout buffer already holds {self.capacity} transitions")
        obs = np.asarray(obs, dtype=float)
        if obs.shape != (self.obs_dim,):
            raise ValueError(f"Observation must have shape ({self.obs_dim},), got {obs.shape}")
        self.observations.append(obs)
        self.actions.append((action.kappa_index, action.uph_index))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))

    def mark_done(self, reward: Optional[float] = None):
        """Close the episode on the last transition, optionally overriding its reward."""
        if not self.rewards:
            return
        self.dones[-1] = True
        if reward is not None:
            self.rewards[-1] = float(reward)


@dataclass
class PpoStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    approx_kl: float = 0.0
    clip_fraction: float = 0.0
    mean_reward: float = 0.0
    aborted: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def clipped_surrogate(ratio: torch.Tensor, advantages: torch.Tensor, clip: float) -> torch.Tensor:
    """Per-sample PPO objective min(r A, clip(r, 1-eps, 1+eps) A)."""
    return torch.min(ratio * advantages, torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * advantages)


def ppo_loss(
    net: PolicyNet,
    obs: torch.Tensor,
    actions: torch.Tensor,
    old_log_probs: torch.Tensor,
    advantages: torch.Tensor,
    returns: torch.Tensor,
    config: PpoConfig,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Total loss = -surrogate + c_v * value MSE - c_e * entropy, plus diagnostics."""
    log_prob, entropy, value = net.evaluate_actions(obs, actions)
    log_ratio = log_prob - old_log_probs
    ratio = torch.exp(log_ratio)

    policy_loss = -clipped_surrogate(ratio, advantages, config.clip).mean()
    value_loss = ((value - returns) ** 2).mean()
    entropy_mean = entropy.mean()
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy_mean

    with torch.no_grad():
        approx_kl = ((ratio - 1.0) - log_ratio).mean()
        clip_fraction = ((ratio - 1.0).abs() > config.clip).to(ratio.dtype).mean()
    return loss, {
        "policy_loss": policy_loss.detach(),
        "value_loss": value_loss.detach(),
        "entropy": entropy_mean.detach(),
        "approx_kl": approx_kl,
        "clip_fraction": clip_fraction,
    }


class PpoTrainer:
    """
    Owns the policy, its optimizer and the PPO update.

    Args:
        net: Policy to train
        config: PPO hyperparameters
        seed: Seed for minibatch shuffling and action sampling
    """

    def __init__(self, net: PolicyNet, config: PpoConfig, seed: int = 0):
        self.net = net
        self.config = config
        self.optimizer = optim.Adam(net.parameters(), lr=config.learning_rate)
        self.generator = torch.Generator().manual_seed(seed)
        self.rng = np.random.default_rng(seed)
        self.update_idx = 0
        self.total_steps = 0

    def act(self, obs: np.ndarray, deterministic: bool = False):
        return self.net.act(obs, self.generator, deterministic)

    def update(self, buffer: RolloutBuffer, last_value: float = 0.0) -> PpoStats:
        """
        Run the configured epochs of minibatch updates over a full buffer.

        On a non-finite loss the weights and optimizer state are restored and the
        update is reported as aborted.
        """
        if not buffer.full:
            raise ValueError(f"PPO update needs {buffer.capacity} transitions, buffer holds {len(buffer)}")
        cfg = self.config
        dtype = next(self.net.parameters()).dtype

        advantages, returns = gae_advantages(
            np.array(buffer.rewards), np.array(buffer.values), np.array(buffer.dones), last_value, cfg.gamma, cfg.gae_lambda
        )
        adv_std = advantages.std()
        norm_adv = (advantages - advantages.mean()) / (adv_std + 1e-8)

        obs = torch.as_tensor(np.stack(buffer.observations), dtype=dtype)
        actions = torch.as_tensor(np.array(buffer.actions), dtype=torch.long)
        old_log_probs = torch.as_tensor(np.array(buffer.log_probs), dtype=dtype)
        adv_t = torch.as_tensor(norm_adv, dtype=dtype)
        returns_t = torch.as_tensor(returns, dtype=dtype)

        net_backup = copy.deepcopy(self.net.state_dict())
        optim_backup = copy.deepcopy(self.optimizer.state_dict())
        totals = {k: 0.0 for k in ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction")}
        n_batches = 0

        n = len(buffer)
        for _ in range(cfg.epochs):
            order = self.rng.permutation(n)
            for start in range(0, n, cfg.minibatch):
                idx = torch.as_tensor(order[start:start + cfg.minibatch])
                loss, info = ppo_loss(self.net, obs[idx], actions[idx], old_log_probs[idx], adv_t[idx], returns_t[idx], cfg)
                if not torch.isfinite(loss):
                    self.net.load_state_dict(net_backup)
                    self.optimizer.load_state_dict(optim_backup)
                    logger.error(f"Non-finite PPO loss in update {self.update_idx}; weights left unchanged")
                    return PpoStats(mean_reward=float(np.mean(buffer.rewards)), aborted=True)
                self.optimizer.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(self.net.parameters(), cfg.max_grad_norm)
                self.optimizer.step()
                for k, v in info.items():
                    totals[k] += float(v)
                n_batches += 1

        self.update_idx += 1
        stats = PpoStats(mean_reward=float(np.mean(buffer.rewards)), **{k: v / n_batches for k, v in totals.items()})
        logger.info(
            f"PPO update {self.update_idx}: reward={stats.mean_reward:.4f} pi_loss={stats.policy_loss:.4f} "
            f"v_loss={stats.value_loss:.4f} kl={stats.approx_kl:.5f} clip={stats.clip_fraction:.3f}"
        )
        return stats


@dataclass
class CheckpointState:
    """Everything restored from a checkpoint file."""

    spec: PolicyNetSpec
    scales: ObservationScales
    net_state: Dict[str, Any]
    optimizer_state: Optional[Dict[str, Any]] = None
    total_steps: int = 0
    update_idx: int = 0
    episode_count: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    torch_rng_state: Optional[torch.Tensor] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def build_policy(self) -> PolicyNet:
        net = PolicyNet(self.spec)
        net.load_state_dict(self.net_state)
        net.eval()
        return net


def save_checkpoint(path: str, trainer: PpoTrainer, scales: ObservationScales, episode_count: int = 0, extra: Optional[Dict[str, Any]] = None):
    """Atomically write a checkpoint (temporary file, then rename)."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "spec": trainer.net.spec.model_dump(),
        "scales": scales.to_dict(),
        "net_state": trainer.net.state_dict(),
        "optimizer_state": trainer.optimizer.state_dict(),
        "total_steps": trainer.total_steps,
        "update_idx": trainer.update_idx,
        "episode_count": episode_count,
        "rng_state": trainer.rng.bit_generator.state,
        "torch_rng_state": trainer.generator.get_state(),
        "extra": extra or {},
    }
    tmp = target.with_suffix(target.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(target)
    logger.info(f"Checkpoint saved to {target} (step {trainer.total_steps}, update {trainer.update_idx})")


def load_checkpoint(path: str) -> CheckpointState:
    target = Path(path)
    if not target.exists():
        raise CheckpointError(f"Checkpoint not found: {target}")
    try:
        payload = torch.load(target, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Unreadable checkpoint {target}: {e}") from e
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {payload.get('version')} in {target}")

    state = CheckpointState(
        spec=PolicyNetSpec.model_validate(payload["spec"]),
        scales=ObservationScales.from_dict(payload["scales"]),
        net_state=payload["net_state"],
        optimizer_state=payload.get("optimizer_state"),
        total_steps=int(payload.get("total_steps", 0)),
        update_idx=int(payload.get("update_idx", 0)),
        episode_count=int(payload.get("episode_count", 0)),
        rng_state=payload.get("rng_state"),
        torch_rng_state=payload.get("torch_rng_state"),
        extra=payload.get("extra", {}),
    )
    logger.info(f"Checkpoint loaded from {target} (step {state.total_steps}, update {state.update_idx})")
    return state


def restore_trainer(state: CheckpointState, config: PpoConfig, seed: int = 0) -> PpoTrainer:
    """Trainer continuing exactly where the checkpoint left off."""
    trainer = PpoTrainer(state.build_policy(), config, seed)
    trainer.net.train()
    if state.optimizer_state is not None:
        trainer.optimizer.load_state_dict(state.optimizer_state)
    if state.rng_state is not None:
        trainer.rng.bit_generator.state = state.rng_state
    if state.torch_rng_state is not None:
        trainer.generator.set_state(state.torch_rng_state)
    trainer.total_steps = state.total_steps
    trainer.update_idx = state.update_idx
    return trainer
