"""Conflict-targeted scenario generation for closed-loop driving rollouts.

Mine the most promising ego/adversary conflict in a recorded scene, steer a
diffusion trajectory sampler toward it with progressive guidance, and score
the outcome with standard trajectory and safety metrics.
"""

__version__ = "0.1.0"

from .core import DrivableArea, InvalidInput, Scene, AgentTrack  # noqa: E402
from .mining import ConflictTarget, MiningRules, mine_scene  # noqa: E402
from .guidance import GuidanceConfig  # noqa: E402
from .sampler import SamplerConfig, best_of_candidates, closed_loop_rollout, rollout_batch  # noqa: E402

__all__ = [
    "AgentTrack",
    "ConflictTarget",
    "DrivableArea",
    "GuidanceConfig",
    "InvalidInput",
    "MiningRules",
    "SamplerConfig",
    "Scene",
    "best_of_candidates",
    "closed_loop_rollout",
    "mine_scene",
    "rollout_batch",
]
