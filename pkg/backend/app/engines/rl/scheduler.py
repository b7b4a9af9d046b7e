"""
Parameter scheduler: decides (kappa, N_u) for the SNMPC at switching instants.

Every agent mode shares one interface so the closed loop does not branch on it:
the loop asks for a decision on switching steps and reports each solve back through
``observe_step``, which the reactive agents use to change parameters in between.
"""
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import pandas as pd
import torch
from loguru import logger

from app.engines.rl.observation import PolicyAction
from app.engines.rl.policy import PolicyNet
from app.models.enums import AgentMode, SolverStatus
from app.models.experiment import PolicyNetSpec, SnmpcConfig, SnmpcParams


def parameter_schedule(step: int, T_sw_steps: int) -> bool:
    """True on switching steps (step divisible by the switching period)."""
    if T_sw_steps < 1:
        raise ValueError(f"Switching period must be at least one step, got {T_sw_steps}")
    return step % T_sw_steps == 0


@dataclass(frozen=True)
class Decision:
    """Parameters chosen at a switching step, with the policy outputs that produced them."""

    params: SnmpcParams
    action: Optional[PolicyAction] = None
    log_prob: float = 0.0
    value: float = 0.0


class ParameterAgent:
    """Static baseline: always the configured default parameters."""

    mode = AgentMode.STATIC
    needs_observation = False
    propagates_uncertainty = True
    retries_on_incident = False

    def __init__(self, config: SnmpcConfig):
        self.config = config
        self.default = SnmpcParams.static_default(config)

    def reset(self):
        pass

    def decide(self, step: int, obs: Optional[np.ndarray] = None) -> Decision:
        return Decision(self.default)

    def observe_step(self, step: int, status: SolverStatus, diverged: bool) -> Optional[SnmpcParams]:
        """Hook called after every solve; returns new parameters to apply immediately, if any."""
        return None


class PolicyAgent(ParameterAgent):
    """
    Policy-driven agent. With ``frozen`` set to "kappa" or "uph" the corresponding
    head is ignored and its static default is used instead.
    """

    mode = AgentMode.ADAPTIVE
    needs_observation = True

    def __init__(
        self,
        config: SnmpcConfig,
        net: PolicyNet,
        generator: Optional[torch.Generator] = None,
        deterministic: bool = True,
        frozen: Optional[str] = None,
    ):
        super().__init__(config)
        if frozen not in (None, "kappa", "uph"):
            raise ValueError(f"Unknown frozen head '{frozen}'")
        self.net = net
        self.spec: PolicyNetSpec = net.spec
        self.generator = generator
        self.deterministic = deterministic
        self.frozen = frozen
        if frozen == "kappa":
            self.mode = AgentMode.ADAPT_UPH_ONLY
        elif frozen == "uph":
            self.mode = AgentMode.ADAPT_KAPPA_ONLY

    def decide(self, step: int, obs: Optional[np.ndarray] = None) -> Decision:
        if obs is None:
            raise ValueError("Policy agent needs an observation")
        action, log_prob, value = self.net.act(obs, self.generator, self.deterministic)
        params = action.decode(self.spec)
        if self.frozen == "kappa":
            params = SnmpcParams(kappa=self.default.kappa, N_u=params.N_u)
        elif self.frozen == "uph":
            params = SnmpcParams(kappa=params.kappa, N_u=self.default.N_u)
        return Decision(params, action, log_prob, value)


class ReplayAgent(ParameterAgent):
    """Replays a recorded parameter sequence, one entry per switching step; holds the last entry."""

    mode = AgentMode.REPLAY

    def __init__(self, config: SnmpcConfig, sequence: List[SnmpcParams]):
        super().__init__(config)
        if not sequence:
            raise ValueError("Replay sequence is empty")
        self.sequence = sequence
        self.cursor = 0

    def reset(self):
        self.cursor = 0

    def decide(self, step: int, obs: Optional[np.ndarray] = None) -> Decision:
        params = self.sequence[min(self.cursor, len(self.sequence) - 1)]
        self.cursor += 1
        return Decision(params)


class UphHalvingAgent(ParameterAgent):
    """
    Deterministic divergence rule: kappa stays at its default, N_u is halved after
    every infeasible or diverged solve (the closed loop re-solves the same step with
    it) and restored once a full switching interval passes without incident.
    """

    mode = AgentMode.UPH_HALVING
    retries_on_incident = True

    def __init__(self, config: SnmpcConfig, switching_steps: int):
        super().__init__(config)
        self.switching_steps = switching_steps
        self.reset()

    def reset(self):
        self.current = self.default
        self.quiet_steps = 0

    def decide(self, step: int, obs: Optional[np.ndarray] = None) -> Decision:
        return Decision(self.current)

    def observe_step(self, step: int, status: SolverStatus, diverged: bool) -> Optional[SnmpcParams]:
        if status == SolverStatus.INFEASIBLE or diverged:
            self.quiet_steps = 0
            halved = max(self.current.N_u // 2, 1)
            if halved != self.current.N_u:
                self.current = SnmpcParams(kappa=self.default.kappa, N_u=halved)
                logger.debug(f"Step {step}: incident, N_u halved to {halved}")
                return self.current
            return None
        self.quiet_steps += 1
        if self.current != self.default and self.quiet_steps >= self.switching_steps:
            self.current = self.default
            logger.debug(f"Step {step}: quiet interval, N_u restored to {self.default.N_u}")
            return self.current
        return None


class NominalAgent(ParameterAgent):
    """Nominal NMPC baseline: no germ draws, no propagation, zero backoffs."""

    mode = AgentMode.NOMINAL
    propagates_uncertainty = False

    def __init__(self, config: SnmpcConfig):
        super().__init__(config)
        self.default = SnmpcParams(kappa=0.0, N_u=self.default.N_u)


def load_replay_sequence(path: str) -> List[SnmpcParams]:
    """Read a decision trace CSV (columns kappa, N_u) in step order."""
    frame = pd.read_csv(path)
    missing = {"kappa", "N_u"} - set(frame.columns)
    if missing:
        raise ValueError(f"Replay file {path} lacks columns {sorted(missing)}")
    if "step" in frame.columns:
        frame = frame.sort_values("step", kind="stable")
    return [SnmpcParams(kappa=float(k), N_u=int(n)) for k, n in zip(frame["kappa"], frame["N_u"])]


def build_agent(
    mode: AgentMode,
    config: SnmpcConfig,
    switching_steps: int,
    net: Optional[PolicyNet] = None,
    replay: Optional[List[SnmpcParams]] = None,
    generator: Optional[torch.Generator] = None,
    deterministic: bool = True,
) -> ParameterAgent:
    """Agent for an agent mode; policy modes need a network, replay needs a sequence."""
    if mode == AgentMode.STATIC:
        return ParameterAgent(config)
    if mode == AgentMode.UPH_HALVING:
        return UphHalvingAgent(config, switching_steps)
    if mode == AgentMode.NOMINAL:
        return NominalAgent(config)
    if mode == AgentMode.REPLAY:
        if replay is None:
            raise ValueError("Replay mode needs a recorded action sequence")
        return ReplayAgent(config, replay)
    if net is None:
        raise ValueError(f"Agent mode '{mode.value}' needs a policy checkpoint")
    frozen = {AgentMode.ADAPT_KAPPA_ONLY: "uph", AgentMode.ADAPT_UPH_ONLY: "kappa"}.get(mode)
    return PolicyAgent(config, net, generator, deterministic, frozen)
