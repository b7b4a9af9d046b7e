"""
Shared-trunk actor-critic with two independent categorical heads, one over the
robustification-factor grid and one over the UPH node count.
"""
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch.distributions import Categorical

from app.engines.rl.observation import PolicyAction
from app.models.experiment import PolicyNetSpec


class CategoricalPolicyHead(nn.Module):
    def __init__(self, input_dim: int, num_actions: int):
        super().__init__()
        self.linear = nn.Linear(input_dim, num_actions)
        nn.init.xavier_uniform_(self.linear.weight)
        nn.init.constant_(self.linear.bias, 0)

    def forward(self, x):
        return self.linear(x)  # logits


class PolicyNet(nn.Module):
    """
    Factored categorical policy pi(kappa, N_u | o) = pi_kappa(kappa | o) * pi_uph(N_u | o).

    Args:
        spec: Layer sizes and head widths
    """

    def __init__(self, spec: PolicyNetSpec):
        super().__init__()
        self.spec = spec
        layers = []
        in_dim = spec.obs_dim
        for width in spec.hidden_sizes:
            layers += [nn.Linear(in_dim, width), nn.Tanh()]
            in_dim = width
        self.trunk = nn.Sequential(*layers)
        self.kappa_head = CategoricalPolicyHead(in_dim, spec.n_kappa)
        self.uph_head = CategoricalPolicyHead(in_dim, spec.n_uph)
        self.value_head = nn.Linear(in_dim, 1)

    def forward(self, obs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        param = next(self.parameters())
        obs = torch.as_tensor(obs, dtype=param.dtype, device=param.device)
        features = self.trunk(obs)
        return self.kappa_head(features), self.uph_head(features), self.value_head(features).squeeze(-1)

    def distributions(self, obs: torch.Tensor) -> Tuple[Categorical, Categorical, torch.Tensor]:
        logits_kappa, logits_uph, value = self(obs)
        return Categorical(logits=logits_kappa), Categorical(logits=logits_uph), value

    def evaluate_actions(self, obs: torch.Tensor, actions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Joint log-probability, joint entropy and value for a batch.

        Args:
            obs: Observations (B, obs_dim)
            actions: Index pairs (B, 2) as (kappa_index, uph_index)

        Returns:
            (log_prob (B,), entropy (B,), value (B,))
        """
        dist_kappa, dist_uph, value = self.distributions(obs)
        actions = torch.as_tensor(actions, dtype=torch.long)
        log_prob = dist_kappa.log_prob(actions[..., 0]) + dist_uph.log_prob(actions[..., 1])
        entropy = dist_kappa.entropy() + dist_uph.entropy()
        return log_prob, entropy, value

    @torch.no_grad()
    def act(
        self,
        obs: np.ndarray,
        generator: Optional[torch.Generator] = None,
        deterministic: bool = False,
    ) -> Tuple[PolicyAction, float, float]:
        """Sample (or take the mode of) both heads for a single observation."""
        logits_kappa, logits_uph, value = self(np.asarray(obs)[None, :])
        if deterministic:
            kappa_index = int(torch.argmax(logits_kappa, dim=-1)[0])
            uph_index = int(torch.argmax(logits_uph, dim=-1)[0])
        else:
            kappa_index = int(torch.multinomial(torch.softmax(logits_kappa, dim=-1), 1, generator=generator)[0, 0])
            uph_index = int(torch.multinomial(torch.softmax(logits_uph, dim=-1), 1, generator=generator)[0, 0])
        log_prob = (
            torch.log_softmax(logits_kappa, dim=-1)[0, kappa_index] + torch.log_softmax(logits_uph, dim=-1)[0, uph_index]
        )
        return PolicyAction(kappa_index, uph_index), float(log_prob), float(value[0])


def policy_forward(net: PolicyNet, obs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Logits of both heads and the value for one observation."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (net.spec.obs_dim,):
        raise ValueError(f"Observation must have shape ({net.spec.obs_dim},), got {obs.shape}")
    with torch.no_grad():
        logits_kappa, logits_uph, value = net(obs[None, :])
    return logits_kappa[0].cpu().numpy(), logits_uph[0].cpu().numpy(), float(value[0])
