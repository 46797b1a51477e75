"""Training objectives: matching-aware least-squares adversarial terms, the
pixel-wise L1 term, the dual-stream classification term and their weighted sum.

Expectations are arithmetic means over batch and spatial positions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch

log = logging.getLogger(__name__)

LOG_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_pix: float = 10.0
    lambda_clf: float = 0.01

    def __post_init__(self):
        if self.lambda_pix < 0 or self.lambda_clf < 0:
            raise ValueError("loss weights must be non-negative")


def adv_loss_g(scores_fake):
    """Generator side: ``mean((D(x', y') - 1)^2)``."""
    return ((scores_fake - 1.0) ** 2).mean()


def dis_loss(scores_real, scores_fake, scores_mismatched):
    """``mean((D(x,y)-1)^2) + 0.5 * [mean(D(x',y')^2) + mean(D(x,y')^2)]``."""
    return ((scores_real - 1.0) ** 2).mean() + 0.5 * ((scores_fake**2).mean() + (scores_mismatched**2).mean())


def pix_loss(x, x_prime):
    if x.shape != x_prime.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_prime.shape)}")
    return (x - x_prime).abs().mean()


def clf_loss(p_high, p_low, target):
    """``-0.5 * mean(log p_high[y'] + log p_low[y'])`` for probability rows.

    ``target`` holds class indices, one per row.
    """
    target = torch.as_tensor(target, dtype=torch.long, device=p_high.device).reshape(-1, 1)
    ph = p_high.gather(1, target).squeeze(1)
    pl = p_low.gather(1, target).squeeze(1)
    tiny = (ph < LOG_EPS) | (pl < LOG_EPS)
    if bool(tiny.any()):
        log.warning("clamping zero target probability at %g", LOG_EPS)
    return -0.5 * (ph.clamp_min(LOG_EPS).log() + pl.clamp_min(LOG_EPS).log()).mean()


def clf_loss_from_logits(logits_high, logits_low, target):
    """Same value as :func:`clf_loss` on softmax outputs, computed stably."""
    target = torch.as_tensor(target, dtype=torch.long, device=logits_high.device).reshape(-1, 1)
    lh = torch.log_softmax(logits_high, dim=1).gather(1, target)
    ll = torch.log_softmax(logits_low, dim=1).gather(1, target)
    return -0.5 * (lh + ll).mean()


def gen_objective(adv, pix, clf, weights: LossWeights = LossWeights()):
    for name, v in (("adv", adv), ("pix", pix), ("clf", clf)):
        if math.isnan(float(v.detach() if isinstance(v, torch.Tensor) else v)):
            raise ValueError(f"{name} loss is NaN")
    return adv + weights.lambda_pix * pix + weights.lambda_clf * clf
