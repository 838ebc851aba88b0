"""Loss terms for cycle-consistent adversarial domain adaptation.

Every function here is a pure map from tensors (plus frozen model handles)
to a scalar, safe to call from multiple threads. Image tensors are expected
in the canonical [-1, 1] range; classifier outputs are raw pre-softmax
scores. Discriminator outputs are probabilities in (0, 1) for the minimax
variant and raw scores for the least-squares variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

MINIMAX = "minimax"
LEAST_SQUARES = "least-squares"
GAN_VARIANTS = (MINIMAX, LEAST_SQUARES)

# Keeps sigmoid outputs inside the open interval (0, 1) under float saturation.
_PROB_EPS = 1e-7

TERM_NAMES = ("task", "gan_image", "gan_feat", "cycle", "semantic")


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights for the combined objective; 0 disables a term."""

    task: float = 1.0
    gan_image: float = 1.0
    gan_feat: float = 1.0
    cycle: float = 1.0
    semantic: float = 1.0

    def __post_init__(self):
        for name in TERM_NAMES:
            value = getattr(self, name)
            if not (value >= 0.0):
                raise ValueError(f"loss weight '{name}' must be >= 0, got {value}")

    def enabled(self) -> tuple[str, ...]:
        return tuple(name for name in TERM_NAMES if getattr(self, name) > 0.0)

    @classmethod
    def equal(cls) -> "LossWeights":
        return cls()


def _check_finite(values: torch.Tensor, what: str) -> None:
    if not torch.isfinite(values).all():
        raise ValueError(f"{what} contains non-finite entries")


def _check_variant(variant: str) -> None:
    if variant not in GAN_VARIANTS:
        raise ValueError(f"unknown GAN variant {variant!r}, expected one of {GAN_VARIANTS}")


def _check_probabilities(scores: torch.Tensor, what: str) -> None:
    if scores.numel() == 0:
        raise ValueError(f"{what} is empty")
    if not ((scores > 0.0) & (scores < 1.0)).all():
        raise ValueError(f"{what} must lie strictly inside (0, 1) for the minimax variant")


def check_image_batch(values: torch.Tensor, what: str = "image batch") -> None:
    """Validate the canonical image contract: rank 4, finite, entries in [-1, 1]."""
    if values.dim() != 4:
        raise ValueError(f"{what} must have shape (B, C, H, W), got {tuple(values.shape)}")
    if values.shape[1] not in (1, 3):
        raise ValueError(f"{what} must have 1 or 3 channels, got {values.shape[1]}")
    _check_finite(values, what)
    if values.min() < -1.0 or values.max() > 1.0:
        raise ValueError(f"{what} entries must lie in [-1, 1]")


def task_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy of ``logits`` (B, K) against integer ``labels`` (B,)."""
    if logits.dim() != 2 or logits.shape[0] < 1 or logits.shape[1] < 2:
        raise ValueError(f"logits must have shape (B>=1, K>=2), got {tuple(logits.shape)}")
    if labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(
            f"labels shape {tuple(labels.shape)} does not match batch of {logits.shape[0]}"
        )
    _check_finite(logits, "logits")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label entries must lie in [0, K)")
    return F.cross_entropy(logits, labels.long())


def gan_loss_discriminator(
    real: torch.Tensor, fake: torch.Tensor, variant: str = LEAST_SQUARES
) -> torch.Tensor:
    """Discriminator objective, sign-flipped so training code always minimizes.

    Minimax: -(E[log D(real)] + E[log(1 - D(fake))]) on probabilities.
    Least-squares: E[(D(real) - 1)^2] + E[D(fake)^2] on raw scores.
    """
    _check_variant(variant)
    _check_finite(real, "real scores")
    _check_finite(fake, "fake scores")
    if variant == MINIMAX:
        _check_probabilities(real, "D(real)")
        _check_probabilities(fake, "D(fake)")
        return -(torch.log(real).mean() + torch.log(1.0 - fake).mean())
    return ((real - 1.0) ** 2).mean() + (fake**2).mean()


def gan_loss_generator(fake: torch.Tensor, variant: str = LEAST_SQUARES) -> torch.Tensor:
    """Generator objective: non-saturating -E[log D(fake)] or E[(D(fake) - 1)^2]."""
    _check_variant(variant)
    _check_finite(fake, "fake scores")
    if variant == MINIMAX:
        _check_probabilities(fake, "D(fake)")
        return -torch.log(fake).mean()
    return ((fake - 1.0) ** 2).mean()


def squash_scores(scores: torch.Tensor, variant: str) -> torch.Tensor:
    """Map raw discriminator scores to the range each GAN variant consumes.

    Minimax losses take probabilities, so raw scores go through a sigmoid
    clamped away from exact 0/1 (float32 saturates beyond |s| ~ 17).
    Least-squares losses act on raw scores directly.
    """
    _check_variant(variant)
    if variant == MINIMAX:
        return torch.sigmoid(scores).clamp(_PROB_EPS, 1.0 - _PROB_EPS)
    return scores


def cycle_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    """Mean absolute reconstruction error; symmetric in its arguments."""
    if original.shape != reconstructed.shape:
        raise ValueError(
            f"shape mismatch: {tuple(original.shape)} vs {tuple(reconstructed.shape)}"
        )
    _check_finite(original, "original")
    _check_finite(reconstructed, "reconstructed")
    return (original - reconstructed).abs().mean()


def pseudo_labels(logits: torch.Tensor) -> torch.Tensor:
    """Per-row argmax as a constant (no gradient); ties resolve to the lowest index."""
    if logits.dim() != 2:
        raise ValueError(f"logits must be rank 2, got {tuple(logits.shape)}")
    _check_finite(logits, "logits")
    with torch.no_grad():
        return logits.argmax(dim=1)


def semantic_consistency_loss(
    f_ref,
    g_st,
    g_ts,
    batch_s: torch.Tensor,
    batch_t: torch.Tensor,
) -> torch.Tensor:
    """Penalty for changing the frozen reference net's predicted class under translation.

    Each batch is pseudo-labelled by ``f_ref`` before translation, then the
    translated batch must be classified the same way. Gradients reach the
    generators only; ``f_ref`` must be frozen and receives none.
    """
    if not getattr(f_ref, "frozen", False):
        raise ValueError("semantic consistency requires a frozen reference task net")
    check_image_batch(batch_s, "source batch")
    check_image_batch(batch_t, "target batch")
    with torch.no_grad():
        labels_s = pseudo_labels(f_ref(batch_s))
        labels_t = pseudo_labels(f_ref(batch_t))
    loss_t = task_loss(f_ref(g_ts(batch_t)), labels_t)
    loss_s = task_loss(f_ref(g_st(batch_s)), labels_s)
    return loss_t + loss_s


def feature_gan_terms(
    f_t,
    f_ref,
    d_feat,
    translated_source: torch.Tensor,
    target: torch.Tensor,
    variant: str = MINIMAX,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Adversarial alignment of task-net features across domains.

    The discriminator is trained to tell reference features of translated
    source images ("real") from the adapting net's features of target images
    ("fake"); the generator term drives only ``f_t``. Returns
    ``(disc_loss, gen_loss)``.
    """
    _check_variant(variant)
    if not getattr(f_ref, "frozen", False):
        raise ValueError("feature adaptation requires a frozen reference task net")
    check_image_batch(translated_source, "translated source batch")
    check_image_batch(target, "target batch")
    feat_ref = f_ref.features(translated_source)
    feat_t = f_t.features(target)
    if feat_ref.shape[1:] != feat_t.shape[1:]:
        raise ValueError(
            f"feature dimension mismatch: reference {tuple(feat_ref.shape[1:])} "
            f"vs adapting {tuple(feat_t.shape[1:])}"
        )
    disc_real = squash_scores(d_feat(feat_ref.detach()), variant)
    disc_fake = squash_scores(d_feat(feat_t.detach()), variant)
    disc_loss = gan_loss_discriminator(disc_real, disc_fake, variant)
    gen_scores = squash_scores(d_feat(feat_t), variant)
    gen_loss = gan_loss_generator(gen_scores, variant)
    return disc_loss, gen_loss


def cycada_objective(weights: LossWeights, terms: dict) -> torch.Tensor:
    """Weighted sum of named loss terms.

    Terms whose weight is zero contribute exactly 0 and may be omitted from
    ``terms``; a missing term with a positive weight is an error.
    """
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    total = torch.zeros(())
    for name in weights.enabled():
        if name not in terms:
            raise ValueError(f"enabled loss term '{name}' is missing")
        total = total + getattr(weights, name) * terms[name]
    return total
