"""Training losses: symmetric InfoNCE matching plus L1 + 1-D generalized-IoU
moment regression, combined with unit weights.

The contrastive temperature is learnable and stored as a log-scale (scale =
1/tau, initialized to 1/0.07, clamped to at most 100). Batches may contain
several videos sharing one music track; with the default duplicate policy
those off-diagonal same-track entries are removed from the InfoNCE
denominators so they are not treated as negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError
from .nn import parameter

MASK_SAME_TRACK = "mask_same_track"
NO_DUPLICATE_MASK = "none"

# Moment-DETR lineage weights; the combination itself is fixed, only the
# relative weighting of the two detection terms is configurable.
L1_WEIGHT = 10.0
GIOU_WEIGHT = 1.0


@dataclass
class MatchingLossConfig:
    init_scale: float = 1.0 / 0.07
    max_scale: float = 100.0
    duplicate_policy: str = MASK_SAME_TRACK

    def validate(self) -> None:
        if self.init_scale <= 0 or self.max_scale <= 0:
            raise ConfigError("temperature scales must be positive")
        if self.duplicate_policy not in (MASK_SAME_TRACK, NO_DUPLICATE_MASK):
            raise ConfigError(f"unknown duplicate policy '{self.duplicate_policy}'")


def _duplicate_keep_mask(track_ids, policy: str) -> np.ndarray | None:
    """keep[i, j] is False for off-diagonal entries that share the row's track."""
    if policy == NO_DUPLICATE_MASK or track_ids is None:
        return None
    ids = np.asarray(track_ids)
    keep = ids[:, None] != ids[None, :]
    np.fill_diagonal(keep, True)
    if keep.all():
        return None
    return keep


def _masked_logsumexp(logits: Tensor, axis: int, keep: np.ndarray | None) -> Tensor:
    """Stable logsumexp; excluded entries contribute exactly zero weight."""
    x = logits
    if keep is not None:
        offset = np.where(keep, 0.0, -1e30).astype(logits.dtype)
        x = ad.add(x, Tensor(offset))
    shift = np.max(x.data, axis=axis, keepdims=True)
    z = ad.reduce_sum(ad.exp(ad.sub(x, Tensor(shift))), axis=axis)
    return ad.add(ad.log(z), Tensor(np.squeeze(shift, axis=axis)))


def info_nce(sim: Tensor, tau, track_ids=None,
             duplicate_policy: str = MASK_SAME_TRACK) -> Tensor:
    """Symmetric InfoNCE over a square similarity matrix with diagonal positives.

    Averages the row-wise (video-to-music) and column-wise (music-to-video)
    cross-entropy terms. `tau` may be a float or a scalar Tensor (learnable).
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {sim.shape}")
    b = sim.shape[0]
    if b == 0:
        raise ShapeError("empty similarity matrix")
    logits = ad.div(sim, tau)
    keep = _duplicate_keep_mask(track_ids, duplicate_policy)
    eye = np.eye(b, dtype=logits.dtype)
    diag = ad.reduce_sum(ad.mul(logits, Tensor(eye)), axis=1)
    row_loss = ad.reduce_mean(ad.sub(_masked_logsumexp(logits, 1, keep), diag))
    col_loss = ad.reduce_mean(ad.sub(_masked_logsumexp(logits, 0, keep), diag))
    return ad.mul(ad.add(row_loss, col_loss), 0.5)


def matching_loss(sims: list[Tensor], tau, track_ids=None,
                  loss_mode: str = "joint",
                  duplicate_policy: str = MASK_SAME_TRACK) -> Tensor:
    """Combine per-similarity InfoNCE terms.

    joint: sum of one InfoNCE per similarity matrix (default).
    single: one InfoNCE on the summed similarities.
    """
    if not sims:
        raise ShapeError("no similarity matrices given")
    for s in sims[1:]:
        if s.shape != sims[0].shape:
            raise ShapeError("similarity matrices differ in shape")
    if loss_mode == "single":
        combined = sims[0]
        for s in sims[1:]:
            combined = ad.add(combined, s)
        return info_nce(combined, tau, track_ids, duplicate_policy)
    if loss_mode != "joint":
        raise ConfigError(f"unknown loss mode '{loss_mode}'")
    total = info_nce(sims[0], tau, track_ids, duplicate_policy)
    for s in sims[1:]:
        total = ad.add(total, info_nce(s, tau, track_ids, duplicate_policy))
    return total


class MatchingLoss:
    """Matching loss with its learnable temperature parameter."""

    def __init__(self, config: MatchingLossConfig | None = None, dtype=None):
        self.config = config or MatchingLossConfig()
        self.config.validate()
        self.log_scale = parameter(
            np.asarray(math.log(self.config.init_scale)), dtype or ad.DEFAULT_DTYPE
        )

    def tau(self) -> Tensor:
        scale = ad.minimum(ad.exp(self.log_scale), self.config.max_scale)
        return ad.div(1.0, scale)

    def __call__(self, sims: list[Tensor], track_ids=None,
                 loss_mode: str = "joint") -> Tensor:
        return matching_loss(sims, self.tau(), track_ids, loss_mode,
                             self.config.duplicate_policy)

    def named_parameters(self):
        return [("log_scale", self.log_scale)]


def _as_interval(value) -> tuple[Tensor, Tensor]:
    """Accept (center, width) pairs of Tensors/arrays/floats."""
    c, w = value
    c = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=np.float64))
    w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=np.float64))
    return c, w


def giou_1d(a, b) -> Tensor:
    """Generalized IoU of two (center, width) intervals: IoU - gap/hull.

    Lies in (-1, 1]; equals plain IoU whenever the intervals intersect or
    touch. Differentiable in both intervals.
    """
    ca, wa = _as_interval(a)
    cb, wb = _as_interval(b)
    if (wa.data <= 0).any() or (wb.data <= 0).any():
        raise DataError("interval widths must be positive")
    half = 0.5
    sa, ea = ad.sub(ca, ad.mul(wa, half)), ad.add(ca, ad.mul(wa, half))
    sb, eb = ad.sub(cb, ad.mul(wb, half)), ad.add(cb, ad.mul(wb, half))
    inter = ad.maximum(ad.sub(ad.minimum(ea, eb), ad.maximum(sa, sb)), 0.0)
    union = ad.sub(ad.add(wa, wb), inter)
    hull = ad.sub(ad.maximum(ea, eb), ad.minimum(sa, sb))
    iou = ad.div(inter, union)
    gap = ad.div(ad.sub(hull, union), hull)
    return ad.sub(iou, gap)


def detection_loss(pred, target) -> Tensor:
    """lambda_L1 * (|dc| + |dw|) + lambda_gIoU * (1 - gIoU), batch-averaged.

    Both moments are (center, width) in normalized [0, 1] coordinates.
    """
    pc, pw = _as_interval(pred)
    tc, tw = _as_interval(target)
    for t in (tc, tw):
        if (t.data < 0).any() or (t.data > 1).any():
            raise DataError("detection targets must lie in [0, 1]")
    l1 = ad.add(ad.absolute(ad.sub(pc, tc)), ad.absolute(ad.sub(pw, tw)))
    giou = giou_1d((pc, pw), (tc, tw))
    per_pair = ad.add(ad.mul(l1, L1_WEIGHT), ad.mul(ad.sub(1.0, giou), GIOU_WEIGHT))
    if per_pair.ndim == 0:
        return per_pair
    return ad.reduce_mean(per_pair)


def total_loss(matching: Tensor, detection: Tensor) -> Tensor:
    """Equal-weight sum of the matching and detection losses."""
    return ad.add(matching, detection)
