"""Fused classification objective for differential morph detection.

A training example is an ordered image pair: a suspect image consumed by the
First network and a trusted live image consumed by the Second network. Every
image carries two identity labels (y1, y2) -- equal for bona fide and
selfmorph samples, one per source identity for morphs. Three loss components:

  l1  softmax cross-entropy of the First head on the allocated first class
  l2  softmax cross-entropy of the Second head on the allocated second class
  l3  binary cross-entropy on the pair logit D = f_first . f_second against
      the cross-label t, where t = 1 iff the two y2 labels differ

total = w1*l1 + w2*l2 + w3*l3. The binary-classification baseline ("bc")
zeroes w1 and w2 on the identical graph. Variant "fc-v2" allocates separate
classes for morphs by shifting their labels up by the base class count, which
doubles both head sizes; cross-labels always use the unshifted y2 values.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, RangeError, ShapeError
from .nncore import (
    ClassifierHead,
    binary_cross_entropy_with_logit,
    sigmoid,
    softmax_cross_entropy,
    softmax_cross_entropy_batch,
)

VARIANT_BC = "bc"
VARIANT_V1 = "fc-v1"
VARIANT_V2 = "fc-v2"
VARIANTS = (VARIANT_BC, VARIANT_V1, VARIANT_V2)

KIND_BONAFIDE = "bonafide"
KIND_SELFMORPH_LM = "selfmorph-lm"
KIND_SELFMORPH_LATENT = "selfmorph-latent"
KIND_MORPH_LM = "morph-lm"
KIND_MORPH_LATENT = "morph-latent"
MORPH_KINDS = (KIND_MORPH_LM, KIND_MORPH_LATENT)
BONAFIDE_KINDS = (KIND_BONAFIDE, KIND_SELFMORPH_LM, KIND_SELFMORPH_LATENT)
ALL_KINDS = BONAFIDE_KINDS + MORPH_KINDS

LANDMARK_FAMILY = "landmark"
LATENT_FAMILY = "latent"
FAMILY_OF_KIND = {
    KIND_MORPH_LM: LANDMARK_FAMILY,
    KIND_SELFMORPH_LM: LANDMARK_FAMILY,
    KIND_MORPH_LATENT: LATENT_FAMILY,
    KIND_SELFMORPH_LATENT: LATENT_FAMILY,
}


def is_morph_kind(kind: str) -> bool:
    """True for cross-identity morphs; selfmorphs count as bona fide."""
    if kind not in ALL_KINDS:
        raise RangeError(f"unknown sample kind {kind!r}")
    return kind in MORPH_KINDS


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise RangeError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    return variant


@dataclass(frozen=True)
class DualLabels:
    """Identity labels (y1, y2); equal unless the sample is a morph."""

    y1: int
    y2: int


def cross_label(y2_first: int, y2_second: int) -> int:
    """Binary pair target: 0 iff the two second-labels agree.

    Labels must be pre-shift (base-class) values; bona fide pairs give 0,
    morph-vs-bona-fide pairs give 1.
    """
    return int(int(y2_first) != int(y2_second))


def head_class_count(variant: str, num_classes: int) -> int:
    """Classifier head rows for a variant: 2C for fc-v2, otherwise C."""
    check_variant(variant)
    return 2 * num_classes if variant == VARIANT_V2 else num_classes


def allocate_labels(labels: DualLabels, kind: str, variant: str, num_classes: int):
    """Map sample labels to (first_net_class, second_net_class).

    fc-v2 shifts morph labels up by the base class count so morphs occupy
    their own classes; bona fide and selfmorph labels are never shifted, and
    neither is anything under bc / fc-v1. Cross-label computation must always
    use the unshifted y2 values.
    """
    check_variant(variant)
    if not (0 <= labels.y1 < num_classes and 0 <= labels.y2 < num_classes):
        raise RangeError(
            f"labels ({labels.y1}, {labels.y2}) outside [0, {num_classes})"
        )
    morph = is_morph_kind(kind)
    if variant == VARIANT_V2 and morph:
        return labels.y1 + num_classes, labels.y2 + num_classes
    return labels.y1, labels.y2


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise RangeError("loss weights must be nonnegative")

    @classmethod
    def for_variant(cls, variant: str, pair_weight: float = 1.0) -> "LossWeights":
        """bc disables the identity components on the same graph (w1 = w2 = 0)."""
        check_variant(variant)
        if variant == VARIANT_BC:
            return cls(0.0, 0.0, pair_weight)
        return cls(1.0, 1.0, pair_weight)


@dataclass
class PairLossBreakdown:
    l1: float
    l2: float
    l3: float
    total: float
    t: int
    dot: float


@dataclass
class PairLossGrads:
    """d(total)/d(...) for one pair; head grads match (W, b) shapes."""

    d_first_feat: np.ndarray
    d_second_feat: np.ndarray
    d_first_weights: np.ndarray
    d_first_biases: np.ndarray
    d_second_weights: np.ndarray
    d_second_biases: np.ndarray


def _check_features(first_feat, second_feat):
    f1 = np.asarray(first_feat, dtype=np.float64)
    f2 = np.asarray(second_feat, dtype=np.float64)
    if f1.shape != f2.shape:
        raise ShapeError(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    if not (np.all(np.isfinite(f1)) and np.all(np.isfinite(f2))):
        raise NumericError("non-finite feature")
    return f1, f2


def pair_loss(
    first_feat,
    second_feat,
    first_head: ClassifierHead,
    second_head: ClassifierHead,
    first_class: int,
    second_class: int,
    t: int,
    weights: LossWeights,
):
    """Fused loss and analytic gradients for a single pair.

    first_class/second_class are the allocated (possibly shifted) targets; t
    must come from the unshifted labels. Identity components with zero weight
    are skipped entirely: their loss reports as 0 and no gradient flows.
    """
    f1, f2 = _check_features(first_feat, second_feat)
    if t not in (0, 1):
        raise RangeError(f"cross-label must be 0 or 1, got {t}")

    d = float(f1 @ f2)
    dd_df1, dd_df2 = f2, f1
    l3, dl3_dd = binary_cross_entropy_with_logit(d, t)

    grads = PairLossGrads(
        d_first_feat=weights.w3 * dl3_dd * dd_df1,
        d_second_feat=weights.w3 * dl3_dd * dd_df2,
        d_first_weights=np.zeros_like(first_head.weights),
        d_first_biases=np.zeros_like(first_head.biases),
        d_second_weights=np.zeros_like(second_head.weights),
        d_second_biases=np.zeros_like(second_head.biases),
    )

    l1 = 0.0
    if weights.w1 > 0.0:
        loss1, dlogits1 = softmax_cross_entropy(first_head.logits(f1), first_class)
        l1 = loss1
        grads.d_first_weights += weights.w1 * np.outer(dlogits1, f1)
        grads.d_first_biases += weights.w1 * dlogits1
        grads.d_first_feat += weights.w1 * (dlogits1 @ first_head.weights)

    l2 = 0.0
    if weights.w2 > 0.0:
        loss2, dlogits2 = softmax_cross_entropy(second_head.logits(f2), second_class)
        l2 = loss2
        grads.d_second_weights += weights.w2 * np.outer(dlogits2, f2)
        grads.d_second_biases += weights.w2 * dlogits2
        grads.d_second_feat += weights.w2 * (dlogits2 @ second_head.weights)

    total = weights.w1 * l1 + weights.w2 * l2 + weights.w3 * l3
    return PairLossBreakdown(l1, l2, l3, total, int(t), d), grads


@dataclass
class BatchLossBreakdown:
    """Batch means of the loss components (the 1/N batch forms)."""

    l1: float
    l2: float
    l3: float
    total: float
    t_ratio: float


@dataclass
class BatchLossGrads:
    d_first_feats: np.ndarray  # (N, feat)
    d_second_feats: np.ndarray
    d_first_weights: np.ndarray
    d_first_biases: np.ndarray
    d_second_weights: np.ndarray
    d_second_biases: np.ndarray


def batch_pair_loss(
    first_feats,
    second_feats,
    first_head: ClassifierHead,
    second_head: ClassifierHead,
    first_classes,
    second_classes,
    t,
    weights: LossWeights,
):
    """Vectorized batch-mean fused loss; gradients carry the 1/N factor.

    Pair-by-pair evaluation averaged over the batch agrees with this to
    roundoff (covered by tests).
    """
    f1 = np.asarray(first_feats, dtype=np.float64)
    f2 = np.asarray(second_feats, dtype=np.float64)
    if f1.shape != f2.shape or f1.ndim != 2:
        raise ShapeError(f"expected matching (N, feat) features, got {f1.shape}, {f2.shape}")
    if not (np.all(np.isfinite(f1)) and np.all(np.isfinite(f2))):
        raise NumericError("non-finite feature")
    n = f1.shape[0]
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (n,):
        raise ShapeError("cross-labels must align with the batch")

    d = np.sum(f1 * f2, axis=1)
    dd_df1 = f2
    dd_df2 = f1

    # stable BCE: max(d,0) - d*t + log1p(exp(-|d|))
    l3_terms = np.maximum(d, 0.0) - d * t + np.log1p(np.exp(-np.abs(d)))
    dl3_dd = sigmoid(d) - t
    l3 = float(np.mean(l3_terms))
    scale = weights.w3 / n
    grads = BatchLossGrads(
        d_first_feats=scale * dl3_dd[:, None] * dd_df1,
        d_second_feats=scale * dl3_dd[:, None] * dd_df2,
        d_first_weights=np.zeros_like(first_head.weights),
        d_first_biases=np.zeros_like(first_head.biases),
        d_second_weights=np.zeros_like(second_head.weights),
        d_second_biases=np.zeros_like(second_head.biases),
    )

    l1 = 0.0
    if weights.w1 > 0.0:
        losses1, dlogits1 = softmax_cross_entropy_batch(
            first_head.logits(f1), np.asarray(first_classes)
        )
        l1 = float(np.mean(losses1))
        s1 = weights.w1 / n
        grads.d_first_weights += s1 * (dlogits1.T @ f1)
        grads.d_first_biases += s1 * dlogits1.sum(axis=0)
        grads.d_first_feats += s1 * (dlogits1 @ first_head.weights)

    l2 = 0.0
    if weights.w2 > 0.0:
        losses2, dlogits2 = softmax_cross_entropy_batch(
            second_head.logits(f2), np.asarray(second_classes)
        )
        l2 = float(np.mean(losses2))
        s2 = weights.w2 / n
        grads.d_second_weights += s2 * (dlogits2.T @ f2)
        grads.d_second_biases += s2 * dlogits2.sum(axis=0)
        grads.d_second_feats += s2 * (dlogits2 @ second_head.weights)

    total = weights.w1 * l1 + weights.w2 * l2 + weights.w3 * l3
    breakdown = BatchLossBreakdown(l1, l2, l3, total, float(np.mean(t)))
    return breakdown, grads


def detection_score(first_feat, second_feat) -> float:
    """Morph likelihood sigmoid(f_first . f_second); higher = more likely attack."""
    f1, f2 = _check_features(first_feat, second_feat)
    return float(sigmoid(float(f1 @ f2)))
