"""Mean-variance critics: a reward head and a log-variance head per pixel.

Members are trained with the heteroscedastic Gaussian NLL and combined into
ensemble statistics: aleatoric variance is the mean predicted variance,
epistemic variance is the spread of the member means.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .net import GradientBundle, MlpParams, backward, forward

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 4.0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True, eq=False)
class MvPrediction:
    q: np.ndarray  # (H, W) in (0, 1)
    log_var: np.ndarray  # (H, W), clamped

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)


@dataclass(frozen=True, eq=False)
class MvEnsembleStats:
    q_mean: np.ndarray
    v_ale: np.ndarray
    v_epi: np.ndarray
    v_all: np.ndarray


def critic_input(patches: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Concatenate patch features with the (alpha, beta) action per row."""
    return np.concatenate([patches, np.asarray(actions, dtype=np.float64).reshape(len(patches), 2)], axis=1)


def mv_heads(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Link functions: sigmoid on the reward head, clamp on the log-variance head."""
    return sigmoid(raw[..., 0]), np.clip(raw[..., 1], LOG_VAR_MIN, LOG_VAR_MAX)


def mv_predict(params: MlpParams, patches: np.ndarray, action_map: np.ndarray) -> MvPrediction:
    """Evaluate both heads at every pixel.

    ``patches`` comes from :func:`graspucb.net.extract_patches`; ``action_map``
    is ``(H, W, 2)`` and fixes the grid shape.
    """
    action_map = np.asarray(action_map)
    if action_map.ndim != 3 or action_map.shape[-1] != 2:
        raise ValueError("action_map must be (H, W, 2)")
    h, w, _ = action_map.shape
    if len(patches) != h * w:
        raise ValueError("patch count does not match the action map")
    q, log_var = mv_heads(forward(params, critic_input(patches, action_map.reshape(-1, 2))))
    return MvPrediction(q.reshape(h, w), log_var.reshape(h, w))


def mv_nll_loss(pred_q, pred_log_var, target):
    """``0.5 exp(-s) (y - q)^2 + 0.5 s`` with its partials in q and s.

    Works elementwise on scalars or arrays; returns ``(loss, dL_dq, dL_dlogvar)``.
    """
    q = np.asarray(pred_q, dtype=np.float64)
    s = np.asarray(pred_log_var, dtype=np.float64)
    r = np.asarray(target, dtype=np.float64) - q
    inv = np.exp(-s)
    loss = 0.5 * inv * r * r + 0.5 * s
    return loss, -inv * r, 0.5 - 0.5 * inv * r * r


def mv_ensemble_stats(preds: Sequence[MvPrediction]) -> MvEnsembleStats:
    """Population statistics over members (divisor N)."""
    if len(preds) == 0:
        raise ValueError("empty ensemble")
    q = np.stack([p.q for p in preds])
    var = np.stack([np.exp(p.log_var) for p in preds])
    # shifted mean: identical members give exactly q[0] and hence v_epi == 0
    q_mean = q[0] + (q - q[0]).mean(axis=0)
    v_ale = var.mean(axis=0)
    v_epi = ((q - q_mean) ** 2).mean(axis=0)
    return MvEnsembleStats(q_mean, v_ale, v_epi, v_ale + v_epi)


class MvCritic:
    """Adapter used by the training pipeline."""

    kind = "mv"
    head_count = 2

    def member_maps(self, params: MlpParams, patches: np.ndarray, action_map: np.ndarray) -> MvPrediction:
        return mv_predict(params, patches, action_map)

    def ensemble_stats(self, maps: Sequence[MvPrediction]) -> MvEnsembleStats:
        return mv_ensemble_stats(maps)

    def loss_and_grad(self, params: MlpParams, x: np.ndarray, targets: np.ndarray) -> GradientBundle:
        """Batch-mean NLL and its gradient w.r.t. all parameters."""
        raw = forward(params, x)
        q, s = mv_heads(raw)
        loss, dq, ds = mv_nll_loss(q, s, targets)
        grad = np.empty_like(raw)
        grad[:, 0] = dq * q * (1.0 - q)
        inside = (raw[:, 1] >= LOG_VAR_MIN) & (raw[:, 1] <= LOG_VAR_MAX)
        grad[:, 1] = np.where(inside, ds, 0.0)
        grad /= len(x)
        g = backward(params, x, grad)
        return GradientBundle(g.weights, g.biases, g.input, float(loss.mean()))

    def expected_q(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Reward estimate and its gradient w.r.t. the raw outputs."""
        q = sigmoid(raw[:, 0])
        dq = np.zeros_like(raw)
        dq[:, 0] = q * (1.0 - q)
        return q, dq
