"""Training losses for the two-step alternating scheme.

All functions are pure in their tensor inputs and differentiable where the
training loop needs gradients. Patch selection conventions: losses over the
confidence-gated set W divide by |W|, the discriminator loss runs over the
full patch set A and divides by |A|.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch
import torch.nn.functional as F

from .config import IGNORE_LABEL, Hyperparams
from .model import FeaturePack, ModelBundle

LOG_CLAMP = 1e-7


class EmptyPatchSetWarning(UserWarning):
    """Raised (as a warning) when the confidence-gated patch set W is empty."""


def confident_indices(confidence: torch.Tensor, threshold: float) -> torch.Tensor:
    """Indices i with conf(i) >= threshold."""
    return torch.nonzero(confidence >= threshold, as_tuple=False).flatten()


def select_positive(
    anchor: torch.Tensor,
    queue_embeddings: torch.Tensor,
    strategy: str = "HIGHEST",
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Pick the representative positive(s) for one anchor from the queue.

    HIGHEST/LOWEST use dot-product similarity with first-occurrence
    tie-breaking; RANDOM draws uniformly with the run RNG; ALL returns the
    whole queue.
    """
    if queue_embeddings.numel() == 0:
        raise ValueError("positive queue is empty")
    if strategy == "ALL":
        return queue_embeddings
    sims = queue_embeddings @ anchor
    if strategy == "HIGHEST":
        return queue_embeddings[int(torch.argmax(sims))]
    if strategy == "LOWEST":
        return queue_embeddings[int(torch.argmin(sims))]
    if strategy == "RANDOM":
        if rng is None:
            raise ValueError("RANDOM selection requires an RNG")
        return queue_embeddings[int(rng.integers(len(queue_embeddings)))]
    raise ValueError(f"unknown selection strategy {strategy!r}")


def _pairwise_contrastive(ap: torch.Tensor, an: torch.Tensor, tau: float) -> torch.Tensor:
    # -log( e^{ap/t} / (e^{ap/t} + e^{an/t}) ), numerically stable
    logits = torch.stack([ap, an], dim=-1) / tau
    return torch.logsumexp(logits, dim=-1) - logits[..., 0]


def condition_specific_loss(
    anchors: torch.Tensor,
    negatives: torch.Tensor,
    queue_embeddings: torch.Tensor,
    tau: float,
    strategy: str = "HIGHEST",
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Contrastive loss over the gated patch set W.

    ``anchors`` are adverse-condition embeddings, ``negatives`` the aligned
    normal-condition ones; the positive for each anchor comes from the queue.
    """
    if anchors.numel() == 0:
        warnings.warn("condition_specific_loss: empty patch set W", EmptyPatchSetWarning)
        return torch.zeros((), dtype=negatives.dtype, device=negatives.device)
    if queue_embeddings.numel() == 0:
        raise ValueError("positive queue is empty")
    queue_embeddings = queue_embeddings.detach()
    an = (anchors * negatives).sum(dim=-1)
    if strategy == "ALL":
        sims = anchors @ queue_embeddings.T  # (|W|, K)
        losses = _pairwise_contrastive(sims, an.unsqueeze(-1).expand_as(sims), tau)
        return losses.mean()
    positives = torch.stack(
        [select_positive(a.detach(), queue_embeddings, strategy, rng) for a in anchors]
    )
    ap = (anchors * positives).sum(dim=-1)
    return _pairwise_contrastive(ap, an, tau).mean()


def restoration_loss(proj_f_adv: torch.Tensor, z_norm: torch.Tensor) -> torch.Tensor:
    """L1 regression pulling projected restored features onto the normal
    embeddings; the target side is detached (one-sided restoration)."""
    if proj_f_adv.numel() == 0:
        warnings.warn("restoration_loss: empty patch set W", EmptyPatchSetWarning)
        return torch.zeros((), dtype=z_norm.dtype, device=z_norm.device)
    return (proj_f_adv - z_norm.detach()).abs().sum(dim=-1).mean()


def discriminating_loss(
    f_adv: FeaturePack, c_adv: FeaturePack, model: ModelBundle
) -> torch.Tensor:
    """Two-class cross-entropy over every (layer, patch): plain encoder
    features should score 1, strainer-infused features 0."""
    total = 0.0
    n_patches = f_adv.final.shape[0]
    for layer in range(1, len(f_adv) + 1):
        pf = model.discriminate(f_adv.per_layer[layer - 1], layer).clamp(LOG_CLAMP, 1 - LOG_CLAMP)
        pc = model.discriminate(c_adv.per_layer[layer - 1], layer).clamp(LOG_CLAMP, 1 - LOG_CLAMP)
        total = total + (torch.log(pf) + torch.log(1 - pc)).sum()
    return -total / n_patches


def discriminating_variant(f_adv: FeaturePack, c_adv: FeaturePack, kind: str) -> torch.Tensor:
    """Discriminator-free alternatives: minimizing these maximizes the
    feature (or feature-statistics) distance between f and c."""
    if kind == "FEATURE_DISTANCE":
        diffs = [
            (f - c).abs().mean() for f, c in zip(f_adv.per_layer, c_adv.per_layer)
        ]
        return -torch.stack(diffs).mean()
    if kind == "FEATURE_STATS_DISTANCE":
        total = 0.0
        for f, c in zip(f_adv.per_layer, c_adv.per_layer):
            mu_gap = (f.mean(dim=0) - c.mean(dim=0)).abs().sum()
            sd_gap = (f.std(dim=0, unbiased=False) - c.std(dim=0, unbiased=False)).abs().sum()
            total = total + mu_gap + sd_gap
        return -total
    raise ValueError(f"unknown discriminating variant {kind!r}")


def self_training_loss(logits: torch.Tensor, pseudo_labels: torch.Tensor) -> torch.Tensor:
    """Pixel cross-entropy against pseudo labels, skipping IGNORE pixels."""
    num_classes = logits.shape[-1]
    labels = pseudo_labels.reshape(-1)
    bad = (labels != IGNORE_LABEL) & (labels >= num_classes)
    if bad.any():
        raise ValueError(f"pseudo label {int(labels[bad][0])} >= num_classes {num_classes}")
    mask = labels != IGNORE_LABEL
    if not mask.any():
        warnings.warn("self_training_loss: all pixels ignored", EmptyPatchSetWarning)
        return torch.zeros((), dtype=logits.dtype, device=logits.device)
    flat = logits.reshape(-1, num_classes)
    return F.cross_entropy(flat[mask], labels[mask].long())


def entropy_loss(logits: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel Shannon entropy of the softmax distribution."""
    logp = F.log_softmax(logits, dim=-1)
    return -(logp.exp() * logp).sum(dim=-1).mean()


def _require_finite(value: torch.Tensor | float, name: str) -> None:
    v = value.detach() if isinstance(value, torch.Tensor) else torch.as_tensor(value)
    if not torch.isfinite(v).all():
        raise ValueError(f"non-finite loss component: {name}")


def step1_total(l_spec, l_self, hp: Hyperparams):
    _require_finite(l_spec, "spec")
    _require_finite(l_self, "self")
    return hp.lambda_spec * l_spec + l_self


def step2_total(l_resto, l_dis, l_self, l_ent, hp: Hyperparams):
    for v, name in ((l_resto, "resto"), (l_dis, "dis"), (l_self, "self"), (l_ent, "ent")):
        _require_finite(v, name)
    dis_sign = -1.0 if hp.negate_dis else 1.0
    return l_resto + dis_sign * hp.lambda_dis * l_dis + l_self + hp.lambda_ent * l_ent
