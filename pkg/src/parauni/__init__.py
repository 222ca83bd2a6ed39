"""Layer-wise transformer feature conditioning for flow-matching generation."""

from .diffusion import (
    Denoiser,
    DenoiserConfig,
    DenoiseTrajectory,
    Schedule,
    fm_loss,
    forward_corrupt,
    linear_schedule,
    sample_ode,
    sample_sde,
    transition_logprob,
)
from .grpo import GrpoConfig, RolloutGroup, advantages, policy_update, rollout_group
from .ldam import LdamConfig, LdamController, LdamState, Perturb, gamma_schedule, select_layers
from .lim import LayerMaskSet, Lim, LimConfig, encode_layer, integrate, integrate_single, integrate_subset
from .rewards import (
    RewardKind,
    alignment_reward,
    grad_norm,
    preference_reward,
    quality_reward,
    register_reward,
)
from .tensor import Tensor, backward, no_grad
from .vlm import LayerFeatures, Vlm, VlmConfig, init_vlm

__version__ = "0.1.0"
