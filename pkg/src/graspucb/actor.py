"""Pixel-wise Gaussian actor and UCB pixel selection.

The actor maps every pixel to a Gaussian over the two tilt angles. The
ensemble's action map is the mean of the member means. Exploration adds a
variance bonus to the reward map, ``Q_ucb = Q + delta * V``, and grasps at the
masked argmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .critic_mv import critic_input
from .net import GradientBundle, MlpParams, backward, forward
from .sim import MAX_TILT, GraspAction, Observation

SIGMA_MIN = 1e-3
SIGMA_MAX = MAX_TILT
SIGMA_SCALE = 0.1
ACTOR_HEADS = 4  # mu_alpha, mu_beta, raw_sigma_alpha, raw_sigma_beta
DEFAULT_ENTROPY_COEFF = 0.01


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True, eq=False)
class ActionMaps:
    mu: np.ndarray  # (H, W, 2)
    sigma: np.ndarray  # (H, W, 2)


def actor_heads(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``mu = (pi/4) tanh(raw)``; ``sigma = 1e-3 + 0.1 softplus(raw)`` capped at pi/4."""
    mu = MAX_TILT * np.tanh(raw[..., :2])
    sigma = np.minimum(SIGMA_MIN + SIGMA_SCALE * softplus(raw[..., 2:]), SIGMA_MAX)
    return mu, sigma


def _head_jacobians(raw: np.ndarray):
    t = np.tanh(raw[..., :2])
    dmu = MAX_TILT * (1.0 - t * t)
    uncapped = SIGMA_MIN + SIGMA_SCALE * softplus(raw[..., 2:]) < SIGMA_MAX
    dsigma = np.where(uncapped, SIGMA_SCALE * (0.5 * (1.0 + np.tanh(0.5 * raw[..., 2:]))), 0.0)
    return dmu, dsigma


def actor_predict(params: MlpParams, patches: np.ndarray, shape: tuple[int, int]) -> ActionMaps:
    if params.head_count != ACTOR_HEADS:
        raise ValueError(f"actor needs {ACTOR_HEADS} heads")
    h, w = shape
    if len(patches) != h * w:
        raise ValueError("patch count does not match the grid")
    mu, sigma = actor_heads(forward(params, patches))
    return ActionMaps(mu.reshape(h, w, 2), sigma.reshape(h, w, 2))


def ensemble_action_mean(maps: Sequence[ActionMaps]) -> np.ndarray:
    if len(maps) == 0:
        raise ValueError("empty ensemble")
    return np.mean([m.mu for m in maps], axis=0)


def gaussian_log_prob(a, mu, sigma) -> np.ndarray:
    """Diagonal Gaussian log density, summed over the last axis."""
    z = (np.asarray(a) - mu) / sigma
    return np.sum(-0.5 * z * z - np.log(sigma) - 0.5 * math.log(2.0 * math.pi), axis=-1)


def actor_loss(critic_q, log_prob, entropy_coeff: float = DEFAULT_ENTROPY_COEFF):
    """``entropy_coeff * log_prob - q``; returns ``(loss, dL_dq, dL_dlogprob)``."""
    loss = entropy_coeff * np.asarray(log_prob) - np.asarray(critic_q)
    return loss, -np.ones_like(loss), entropy_coeff * np.ones_like(loss)


def actor_gradient(actor: MlpParams, critic, critic_params: MlpParams, patches: np.ndarray,
                   eps: np.ndarray, entropy_coeff: float = DEFAULT_ENTROPY_COEFF,
                   anchor: np.ndarray | None = None, anchor_weight: float = 0.0) -> GradientBundle:
    """Batch-mean SAC actor loss at reparameterised samples ``a = mu + sigma * eps``.

    The critic is held fixed; gradients reach the actor through the critic's
    action input and through the log-density. Samples are clipped to the
    executable tilt range, so the critic is never queried outside it.

    ``anchor`` optionally adds ``0.5 * anchor_weight * |mu - anchor|^2``, the
    offline regression objective, which keeps the mean near a label while the
    critic's action gradient is untrustworthy.
    """
    raw = forward(actor, patches)
    mu, sigma = actor_heads(raw)
    unclipped = mu + sigma * eps
    a = np.clip(unclipped, -MAX_TILT, MAX_TILT)
    inside = np.abs(unclipped) <= MAX_TILT
    x = critic_input(patches, a)
    craw = forward(critic_params, x)
    q, dq_draw = critic.expected_q(craw)
    logp = gaussian_log_prob(unclipped, mu, sigma)
    loss, dl_dq, dl_dlogp = actor_loss(q, logp, entropy_coeff)
    # dq/da through the critic network input
    dq_dx = backward(critic_params, x, dq_draw).input
    dq_da = dq_dx[:, -2:]
    dl_da = np.where(inside, dl_dq[:, None] * dq_da, 0.0)
    # with a = mu + sigma * eps the log-density depends on sigma only: d/dsigma = -1/sigma
    dl_dmu = dl_da
    dl_dsigma = dl_da * eps + dl_dlogp[:, None] * (-1.0 / sigma)
    if anchor is not None and anchor_weight > 0.0:
        diff = mu - anchor
        dl_dmu = dl_dmu + anchor_weight * diff
        loss = loss + 0.5 * anchor_weight * np.sum(diff * diff, axis=1)
    dmu, dsigma = _head_jacobians(raw)
    grad_raw = np.concatenate([dl_dmu * dmu, dl_dsigma * dsigma], axis=1) / len(patches)
    g = backward(actor, patches, grad_raw)
    return GradientBundle(g.weights, g.biases, g.input, float(np.mean(loss)))


def actor_regression_gradient(actor: MlpParams, patches: np.ndarray, target_actions: np.ndarray) -> GradientBundle:
    """Batch-mean ``0.5 |mu - target|^2`` used for offline pretraining."""
    raw = forward(actor, patches)
    mu, _ = actor_heads(raw)
    diff = mu - target_actions
    dmu, _ = _head_jacobians(raw)
    grad_raw = np.zeros_like(raw)
    grad_raw[:, :2] = diff * dmu / len(patches)
    g = backward(actor, patches, grad_raw)
    return GradientBundle(g.weights, g.biases, g.input, float(0.5 * np.mean(np.sum(diff * diff, axis=1))))


# --------------------------------------------------------------------------
# exploration


class UncertaintyKind(str, Enum):
    EPISTEMIC = "epistemic"
    ALEATORIC = "aleatoric"
    TOTAL = "total"
    NONE = "none"

    @classmethod
    def parse(cls, text: str) -> "UncertaintyKind":
        if isinstance(text, cls):
            return text
        aliases = {"epi": "epistemic", "ale": "aleatoric", "all": "total"}
        return cls(aliases.get(text, text))


class Schedule(str, Enum):
    FIXED = "fixed"
    COSINE_ADAPTIVE = "cosine_adaptive"

    @classmethod
    def parse(cls, text: str) -> "Schedule":
        if isinstance(text, cls):
            return text
        return cls({"cosine": "cosine_adaptive", "adaptive": "cosine_adaptive"}.get(text, text))


@dataclass(frozen=True)
class UcbConfig:
    delta: float = 1.0
    uncertainty_kind: UncertaintyKind = UncertaintyKind.EPISTEMIC
    schedule: Schedule = Schedule.FIXED
    horizon: int = 3000
    ucb_on_std: bool = False  # bonus on sqrt(V) instead of V

    def __post_init__(self):
        # accept the plain strings used in config files
        object.__setattr__(self, "uncertainty_kind", UncertaintyKind.parse(self.uncertainty_kind))
        object.__setattr__(self, "schedule", Schedule.parse(self.schedule))
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.schedule is Schedule.COSINE_ADAPTIVE and self.horizon < 1:
            raise ValueError("cosine schedule needs a horizon >= 1")


GREEDY = UcbConfig(delta=0.0, uncertainty_kind=UncertaintyKind.NONE)


def delta_schedule(config: UcbConfig, t: int) -> float:
    """Fixed ratio, or ``0.5 delta0 (1 + cos(pi min(t, T) / T))`` decaying to 0 at T."""
    if t < 0:
        raise ValueError("step must be non-negative")
    if config.schedule is Schedule.FIXED:
        return float(config.delta)
    frac = min(t, config.horizon) / config.horizon
    if frac >= 1.0:
        return 0.0
    return 0.5 * config.delta * (1.0 + math.cos(math.pi * frac))


def ucb_map(q_mean: np.ndarray, stats, config: UcbConfig, t: int = 0) -> np.ndarray:
    """``q_mean + delta(t) * V`` with V the variance map picked by the config."""
    kind = config.uncertainty_kind
    delta = delta_schedule(config, t)
    if kind is UncertaintyKind.NONE or delta == 0.0:
        return np.array(q_mean, dtype=np.float64, copy=True)
    v = {UncertaintyKind.EPISTEMIC: stats.v_epi, UncertaintyKind.ALEATORIC: stats.v_ale,
         UncertaintyKind.TOTAL: stats.v_all}[kind]
    if config.ucb_on_std:
        v = np.sqrt(v)
    return q_mean + delta * v


@dataclass(frozen=True)
class PixelSelection:
    row: int
    col: int
    action: GraspAction
    ucb_value: float


def select_pixel(ucb: np.ndarray, mask: np.ndarray, action_mean: np.ndarray, obs: Observation,
                 exclude: Iterable[tuple[int, int]] = ()) -> PixelSelection:
    """Masked argmax of the UCB map; ties go to the lowest row-major index.

    ``exclude`` removes individual pixels (the no-repeat guard).
    """
    allowed = np.array(mask, dtype=bool, copy=True)
    for r, c in exclude:
        allowed[r, c] = False
    if not allowed.any():
        raise ValueError("no selectable pixel: everything is masked")
    scores = np.where(allowed, ucb, -np.inf)
    flat = int(np.argmax(scores))  # first occurrence == lowest row-major index
    row, col = divmod(flat, ucb.shape[1])
    alpha, beta = np.clip(action_mean[row, col], -MAX_TILT, MAX_TILT)
    action = GraspAction(row, col, float(alpha), float(beta), float(obs.height[row, col]))
    return PixelSelection(row, col, action, float(ucb[row, col]))
