"""Quantile-regression critics with K heads per member.

Each head estimates one quantile level of the grasp reward. The ensemble's
reward map is the flat mean over all K x N head values; the uncertainty
split is

* epistemic: spread across members of each quantile, averaged over quantiles;
* aleatoric: spread of the member-averaged quantile curve around its mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .critic_mv import critic_input, sigmoid
from .net import GradientBundle, MlpParams, backward, forward

DEFAULT_KAPPA = 0.05


def quantile_levels(k: int) -> np.ndarray:
    """Midpoint levels ``(2i - 1) / (2K)`` for i = 1..K."""
    if k < 1:
        raise ValueError("need at least one quantile")
    return (2.0 * np.arange(1, k + 1) - 1.0) / (2.0 * k)


@dataclass(frozen=True, eq=False)
class QuantileTensor:
    values: np.ndarray  # (H, W, K)
    taus: np.ndarray  # (K,)

    def __post_init__(self):
        if self.values.shape[-1] != len(self.taus):
            raise ValueError("one level per head")
        if np.any(np.diff(self.taus) <= 0) or self.taus[0] <= 0 or self.taus[-1] >= 1:
            raise ValueError("levels must be strictly increasing inside (0, 1)")


@dataclass(frozen=True, eq=False)
class QrEnsembleStats:
    q_mean: np.ndarray
    v_epi: np.ndarray
    v_ale: np.ndarray

    @property
    def v_all(self) -> np.ndarray:
        return self.v_ale + self.v_epi


def qr_predict(params: MlpParams, patches: np.ndarray, action_map: np.ndarray) -> QuantileTensor:
    """All K heads through a sigmoid at every pixel. Heads are not sorted."""
    action_map = np.asarray(action_map)
    if action_map.ndim != 3 or action_map.shape[-1] != 2:
        raise ValueError("action_map must be (H, W, 2)")
    h, w, _ = action_map.shape
    if len(patches) != h * w:
        raise ValueError("patch count does not match the action map")
    values = sigmoid(forward(params, critic_input(patches, action_map.reshape(-1, 2))))
    k = params.head_count
    return QuantileTensor(values.reshape(h, w, k), quantile_levels(k))


def quantile_huber_loss(pred, target, tau, kappa: float = DEFAULT_KAPPA):
    """``|tau - 1[u < 0]| * H_kappa(u) / kappa`` with ``u = target - pred``.

    Returns ``(loss, dL_dpred)``; broadcasts over arrays.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    u = np.asarray(target, dtype=np.float64) - np.asarray(pred, dtype=np.float64)
    au = np.abs(u)
    small = au <= kappa
    huber = np.where(small, 0.5 * u * u, kappa * (au - 0.5 * kappa))
    dhuber_du = np.where(small, u, kappa * np.sign(u))
    weight = np.abs(np.asarray(tau) - (u < 0))
    return weight * huber / kappa, -weight * dhuber_du / kappa


def _stack(ensemble: Sequence[QuantileTensor]) -> np.ndarray:
    if len(ensemble) == 0:
        raise ValueError("empty ensemble")
    k = {t.values.shape[-1] for t in ensemble}
    if len(k) != 1:
        raise ValueError("members disagree on the number of quantiles")
    return np.stack([t.values for t in ensemble])  # (N, H, W, K)


def qr_q_map(ensemble: Sequence[QuantileTensor]) -> np.ndarray:
    return _stack(ensemble).mean(axis=(0, 3))


def qr_ensemble_stats(ensemble: Sequence[QuantileTensor]) -> QrEnsembleStats:
    z = _stack(ensemble)
    per_quantile = z[0] + (z - z[0]).mean(axis=0)  # (H, W, K) member-averaged curve; exact for identical members
    q = per_quantile.mean(axis=-1)
    v_epi = ((z - per_quantile) ** 2).mean(axis=(0, 3))
    v_ale = ((per_quantile - q[..., None]) ** 2).mean(axis=-1)
    return QrEnsembleStats(q, v_epi, v_ale)


class QrCritic:
    """Adapter used by the training pipeline."""

    kind = "qr"

    def __init__(self, heads: int = 20, kappa: float = DEFAULT_KAPPA):
        self.head_count = heads
        self.kappa = kappa
        self.taus = quantile_levels(heads)

    def member_maps(self, params: MlpParams, patches: np.ndarray, action_map: np.ndarray) -> QuantileTensor:
        return qr_predict(params, patches, action_map)

    def ensemble_stats(self, maps: Sequence[QuantileTensor]) -> QrEnsembleStats:
        return qr_ensemble_stats(maps)

    def loss_and_grad(self, params: MlpParams, x: np.ndarray, targets: np.ndarray) -> GradientBundle:
        """Every head regresses the same target; loss is summed over heads, averaged over the batch."""
        raw = forward(params, x)
        z = sigmoid(raw)
        loss, dz = quantile_huber_loss(z, np.asarray(targets, dtype=np.float64)[:, None], self.taus, self.kappa)
        grad = dz * z * (1.0 - z) / len(x)
        g = backward(params, x, grad)
        return GradientBundle(g.weights, g.biases, g.input, float(loss.sum(axis=1).mean()))

    def expected_q(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = sigmoid(raw)
        return z.mean(axis=1), z * (1.0 - z) / raw.shape[1]
