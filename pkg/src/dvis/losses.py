"""Set-prediction matching costs and training losses.

Mask terms follow the usual query-based segmentation recipe: per-pixel
binary cross-entropy (mean over the grid) plus a dice loss with additive
smoothing of 1. Class terms use a softmax over ``C + 1`` classes where index
``C`` is "no object", down-weighted by ``no_object_weight``.

Targets for one clip are a :class:`ClipTargets`. Matching is done on plain
numpy arrays and returns an :class:`~dvis.assignment.Assignment` whose
``mapping[i]`` is the slot of target ``i`` (``-1`` when the target is not
visible anywhere in the clip and is therefore excluded).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .assignment import Assignment, hungarian_min
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .layers import log_softmax


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    no_object_weight: float = 0.1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"loss weight {name}={value} must be finite and >= 0")
        if not 0 < self.no_object_weight <= 1:
            raise ConfigError(f"no_object_weight must lie in (0, 1], got {self.no_object_weight}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.cls * factor, self.bce * factor, self.dice * factor, self.no_object_weight)


@dataclass(frozen=True)
class MatchSourceRule:
    """Which predictions drive label assignment at a given iteration.

    Before ``max_iter // 2`` the early source is used (segmenter output for the
    tracker, tracker output for the refiner); from then on the model's own.
    """

    max_iter: int
    current_iter: int = 0

    @property
    def switch_iter(self) -> int:
        return self.max_iter // 2

    @property
    def use_model(self) -> bool:
        return self.current_iter >= self.switch_iter


@dataclass
class ClipTargets:
    labels: np.ndarray  # [G] int
    masks: np.ndarray  # [G, T, P] bool

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3 or self.masks.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"targets: labels {self.labels.shape} vs masks {self.masks.shape}"
            )

    @property
    def visible(self) -> np.ndarray:
        return self.masks.any(axis=2)  # [G, T]

    @property
    def first_appearance(self) -> np.ndarray:
        """``f(i)`` per target, ``-1`` if never visible in the clip."""
        vis = self.visible
        return np.where(vis.any(axis=1), vis.argmax(axis=1), -1)


# --- mask losses ------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def mask_losses(pred_logits, gt) -> tuple[Tensor, Tensor]:
    """``(bce, dice)`` for one mask; differentiable in ``pred_logits``."""
    x = ad.as_tensor(pred_logits)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"mask_losses: logits {x.shape} vs gt {y.shape}")
    bce, dice = _row_mask_losses(ad.reshape(x, (1, -1)), y.reshape(1, -1))
    return ad.reshape(bce, ()), ad.reshape(dice, ())


def _row_mask_losses(x: Tensor, y: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-row bce and dice for logits ``[K, P]`` against targets ``[K, P]``."""
    bce = ad.mean(ad.sub(ad.softplus(x), ad.mul(x, y)), axis=1)
    s = ad.sigmoid(x)
    inter = ad.sum(ad.mul(s, y), axis=1)
    denom = ad.add(ad.sum(s, axis=1), y.sum(axis=1) + 1.0)
    dice = ad.sub(1.0, ad.div(ad.add(ad.mul(inter, 2.0), 1.0), denom))
    return bce, dice


def pairwise_mask_costs(mask_logits: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All-pairs ``(bce, dice)`` between ``gt`` ``[G, P]`` and logits ``[N, P]`` -> ``[G, N]``."""
    x = np.asarray(mask_logits, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    P = x.shape[-1]
    bce = (_softplus(x).sum(axis=1)[None, :] - y @ x.T) / P
    s = _sigmoid(x)
    dice = 1.0 - (2.0 * (y @ s.T) + 1.0) / (s.sum(axis=1)[None, :] + y.sum(axis=1)[:, None] + 1.0)
    return bce, dice


def class_probs(class_logits: np.ndarray) -> np.ndarray:
    z = np.asarray(class_logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def frame_cost_matrix(class_logits, mask_logits, labels, gt_masks, w: LossWeights) -> np.ndarray:
    """``[G, N]`` matching cost between targets and slots on one frame."""
    prob = class_probs(class_logits)  # [N, C+1]
    bce, dice = pairwise_mask_costs(mask_logits, gt_masks)
    return -w.cls * prob[:, labels].T + w.bce * bce + w.dice * dice


def pairwise_match_cost(class_logits, mask_logits, label: int, gt_mask, w: LossWeights = LossWeights()) -> float:
    """Cost of assigning one target (``label``, ``gt_mask``) to one slot's prediction."""
    c = frame_cost_matrix(
        np.asarray(class_logits)[None],
        np.asarray(mask_logits, dtype=np.float64).reshape(1, -1),
        np.array([label]),
        np.asarray(gt_mask).reshape(1, -1),
        w,
    )
    return float(c[0, 0])


def _solve(cost: np.ndarray, rows: np.ndarray, G: int) -> Assignment:
    mapping = np.full(G, -1, dtype=np.intp)
    if rows.size == 0:
        return Assignment(mapping, 0.0)
    sub = hungarian_min(cost[rows])
    mapping[rows] = sub.mapping
    return Assignment(mapping, sub.total_cost)


def _check_preds(class_logits, mask_logits, targets: ClipTargets) -> None:
    T = targets.masks.shape[1]
    if class_logits.shape[0] != T or mask_logits.shape[0] != T:
        raise DimensionError(
            f"predictions cover {class_logits.shape[0]} frames, targets {T}"
        )
    if mask_logits.shape[-1] != targets.masks.shape[-1]:
        raise DimensionError(f"mask grids differ: {mask_logits.shape} vs {targets.masks.shape}")


def match_tracker(
    early,
    model,
    targets: ClipTargets,
    rule: MatchSourceRule,
    w: LossWeights = LossWeights(),
) -> Assignment:
    """First-appearance matching: target ``i`` is costed on frame ``f(i)`` only.

    ``early`` and ``model`` are ``(class_logits [T, N, C+1], mask_logits [T, N, P])``
    pairs in tracker slot order; ``rule`` picks which one is used (the other
    may be ``None``).
    """
    source = model if rule.use_model else early
    if source is None:
        raise ValueError("the prediction source selected by the rule is missing")
    class_logits, mask_logits = (np.asarray(getattr(a, "data", a)) for a in source)
    _check_preds(class_logits, mask_logits, targets)
    G = len(targets.labels)
    first = targets.first_appearance
    cost = np.zeros((G, class_logits.shape[1]))
    for i in range(G):
        t = first[i]
        if t >= 0:
            cost[i] = frame_cost_matrix(
                class_logits[t], mask_logits[t], targets.labels[i : i + 1], targets.masks[i, t][None], w
            )[0]
    return _solve(cost, np.flatnonzero(first >= 0), G)


def video_cost_matrix(class_logits, mask_logits, targets: ClipTargets, w: LossWeights) -> np.ndarray:
    """``[G, N]`` video-level cost; ``class_logits`` is ``[N, C+1]`` and masks ``[T, N, P]``."""
    T = mask_logits.shape[0]
    prob = class_probs(class_logits)
    cost = -w.cls * prob[:, targets.labels].T
    vis = targets.visible
    for t in range(T):
        bce, dice = pairwise_mask_costs(mask_logits[t], targets.masks[:, t])
        cost += vis[:, t][:, None] * (w.bce * bce + w.dice * dice) / T
    return cost


def match_refiner(
    early,
    model,
    targets: ClipTargets,
    rule: MatchSourceRule,
    w: LossWeights = LossWeights(),
) -> Assignment:
    """Video-level matching. Each source is ``(class_logits [N, C+1], mask_logits [T, N, P])``."""
    source = model if rule.use_model else early
    if source is None:
        raise ValueError("the prediction source selected by the rule is missing")
    class_logits, mask_logits = (np.asarray(getattr(a, "data", a)) for a in source)
    if mask_logits.shape[0] != targets.masks.shape[1]:
        raise DimensionError(f"predictions cover {mask_logits.shape[0]} frames, targets {targets.masks.shape[1]}")
    cost = video_cost_matrix(class_logits, mask_logits, targets, w)
    rows = np.flatnonzero(targets.first_appearance >= 0)
    return _solve(cost, rows, len(targets.labels))


def video_class_logits_from_frames(class_logits) -> np.ndarray:
    """Log of the mean per-frame class probability: a video-level score for per-frame heads."""
    return np.log(class_probs(np.asarray(getattr(class_logits, "data", class_logits))).mean(axis=0))


# --- losses -----------------------------------------------------------------


def _weighted_ce(class_logits: Tensor, target: np.ndarray, coef: np.ndarray) -> Tensor:
    """``-sum(coef * log p[target])`` over all leading positions."""
    logp = log_softmax(class_logits, axis=-1)
    onehot = np.zeros(class_logits.shape)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    return ad.neg(ad.sum(ad.mul(logp, onehot * coef[..., None])))


def _slot_weights(target: np.ndarray, C: int, w: LossWeights) -> np.ndarray:
    weights = np.where(target == C, w.no_object_weight, 1.0)
    return weights / weights.sum(axis=-1, keepdims=True)


def tracker_loss(class_logits, mask_logits, targets: ClipTargets, assignment: Assignment, w: LossWeights = LossWeights()) -> Tensor:
    return tracker_loss_terms(class_logits, mask_logits, targets, assignment, w)["total"]


def tracker_loss_terms(class_logits, mask_logits, targets: ClipTargets, assignment: Assignment, w: LossWeights = LossWeights()) -> dict:
    """Sum over frames of per-frame set losses under a fixed clip-level assignment.

    Per frame: weighted-mean cross-entropy over slots (absent or unmatched
    slots target no-object) plus bce/dice for every matched target visible
    in that frame. Mask terms are normalized by the number of matched targets.
    """
    class_logits, mask_logits = ad.as_tensor(class_logits), ad.as_tensor(mask_logits)
    _check_preds(class_logits, mask_logits, targets)
    T, N, C1 = class_logits.shape
    C = C1 - 1
    target = np.full((T, N), C, dtype=np.int64)
    rows, slots, frames = [], [], []
    for i, j in enumerate(assignment.mapping):
        if j < 0:
            continue
        for t in np.flatnonzero(targets.visible[i]):
            target[t, j] = targets.labels[i]
            rows.append(i)
            slots.append(j)
            frames.append(t)
    cls = ad.mul(_weighted_ce(class_logits, target, _slot_weights(target, C, w)), w.cls)
    matched = int((assignment.mapping >= 0).sum())
    mask = Tensor(0.0)
    if rows:
        flat = ad.reshape(mask_logits, (T * N, -1))
        x = ad.take(flat, np.asarray(frames) * N + np.asarray(slots), axis=0)
        y = targets.masks[np.asarray(rows), np.asarray(frames)].astype(np.float64)
        bce, dice = _row_mask_losses(x, y)
        mask = ad.mul(ad.add(ad.mul(ad.sum(bce), w.bce), ad.mul(ad.sum(dice), w.dice)), 1.0 / matched)
    return {"cls": cls, "mask": mask, "total": ad.add(cls, mask)}


def refiner_loss(class_logits, mask_logits, targets: ClipTargets, assignment: Assignment, w: LossWeights = LossWeights()) -> Tensor:
    return refiner_loss_terms(class_logits, mask_logits, targets, assignment, w)["total"]


def refiner_loss_terms(class_logits, mask_logits, targets: ClipTargets, assignment: Assignment, w: LossWeights = LossWeights()) -> dict:
    """Video-level cross-entropy plus per-frame mask losses of matched pairs.

    Each matched pair contributes ``(1/T) * sum_t (bce_t + dice_t)``; frames
    where the target is absent keep the bce term against an empty mask and
    drop the dice term.
    """
    class_logits, mask_logits = ad.as_tensor(class_logits), ad.as_tensor(mask_logits)
    N, C1 = class_logits.shape
    T = mask_logits.shape[0]
    if mask_logits.shape[0] != targets.masks.shape[1] or mask_logits.shape[1] != N:
        raise DimensionError(f"refiner_loss: masks {mask_logits.shape}, targets {targets.masks.shape}")
    C = C1 - 1
    target = np.full(N, C, dtype=np.int64)
    pairs = [(i, j) for i, j in enumerate(assignment.mapping) if j >= 0]
    for i, j in pairs:
        target[j] = targets.labels[i]
    cls = ad.mul(_weighted_ce(class_logits, target, _slot_weights(target, C, w)), w.cls)
    mask = Tensor(0.0)
    if pairs:
        gi = np.array([i for i, _ in pairs])
        sj = np.array([j for _, j in pairs])
        frames = np.repeat(np.arange(T), len(pairs))
        slot_idx = np.tile(sj, T)
        flat = ad.reshape(mask_logits, (T * N, -1))
        x = ad.take(flat, frames * N + slot_idx, axis=0)
        y = targets.masks[np.tile(gi, T), frames].astype(np.float64)
        present = y.any(axis=1).astype(np.float64)
        bce, dice = _row_mask_losses(x, y)
        per_row = ad.add(ad.mul(bce, w.bce), ad.mul(dice, w.dice * present))
        mask = ad.mul(ad.sum(per_row), 1.0 / (T * len(pairs)))
    return {"cls": cls, "mask": mask, "total": ad.add(cls, mask)}
