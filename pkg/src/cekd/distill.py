"""Distillation losses: temperature KD, cross distillation, min-ensemble KD, mixed CE.

Naming follows the two-branch layout. ``h1`` is the teacher's mixing method
and ``h2`` the student's; both mix the same image pairs.

* ``t1`` teacher on the h1 batch, ``t2`` teacher on the h2 batch
* ``s1`` student on the h2 batch, ``s2`` student on the h1 batch

Every distillation target is a constant: no gradient flows into it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .numerics import log_softmax, softmax


@dataclass
class LogitsQuad:
    t1: np.ndarray
    t2: np.ndarray
    s1: np.ndarray
    s2: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(a) for a in (self.t1, self.t2, self.s1, self.s2)}
        if len(shapes) != 1:
            raise ValueError(f"all four logits must share one shape, got {shapes}")
        if len(next(iter(shapes))) != 2:
            raise ValueError("logits must be [N, c]")


@dataclass
class EnsemblePair:
    e1: np.ndarray
    e2: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    lambdas: tuple[float, float, float, float, float, float] = (0.7, 0.3, 0.5, 0.5, 0.5, 0.5)
    temperature: float = 4.0
    ce_weight: float = 1.0

    def __post_init__(self):
        lams = tuple(float(v) for v in self.lambdas)
        object.__setattr__(self, "lambdas", lams)
        if len(lams) != 6 or any(v < 0 for v in lams):
            raise ValueError("need six nonnegative lambdas")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.ce_weight < 0:
            raise ValueError("ce_weight must be nonnegative")


@dataclass
class LossBreakdown:
    L_KD_h1: float
    L_KD_h2: float
    L_KD_t1: float
    L_KD_t2: float
    L_KD_s1: float
    L_KD_s2: float
    L_CE_teacher_h1: float
    L_CE_teacher_h2: float
    L_CE_student_h1: float
    L_CE_student_h2: float
    total_teacher: float
    total_student: float

    KD_FIELDS = ("L_KD_h1", "L_KD_h2", "L_KD_t1", "L_KD_t2", "L_KD_s1", "L_KD_s2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class MixedLabels:
    """The ``(y_a, y_b, w_a, w_b)`` columns of one mixed batch."""

    label_a: np.ndarray
    label_b: np.ndarray
    w_a: np.ndarray
    w_b: np.ndarray

    @classmethod
    def of(cls, batch) -> "MixedLabels":
        return cls(batch.label_a, batch.label_b, batch.w_a, batch.w_b)


def _pair(target, pred) -> tuple[np.ndarray, np.ndarray]:
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape or target.ndim != 2:
        raise ValueError(f"expected matching [N, c] logits, got {target.shape} and {pred.shape}")
    return target, pred


def kd_loss(target_logits, pred_logits, T: float) -> float:
    """Batch mean of ``T^2 * KL(softmax(target/T) || softmax(pred/T))``."""
    target, pred = _pair(target_logits, pred_logits)
    p = softmax(target, T)
    log_p = log_softmax(target, T)
    log_q = log_softmax(pred, T)
    # p * log p is 0 where p underflows to 0
    terms = np.where(p > 0, p * (log_p - log_q), 0.0)
    return float(T * T * terms.sum() / target.shape[0])


def kd_loss_grad(target_logits, pred_logits, T: float) -> np.ndarray:
    """d kd_loss / d pred_logits with the target held fixed: ``T (q - p) / N``."""
    target, pred = _pair(target_logits, pred_logits)
    return T * (softmax(pred, T) - softmax(target, T)) / target.shape[0]


def cross_kd(quad: LogitsQuad, T: float) -> tuple[float, float]:
    """Teacher-on-h1 supervises student-on-h1; student-on-h2 supervises teacher-on-h2."""
    return kd_loss(quad.t1, quad.s2, T), kd_loss(quad.s1, quad.t2, T)


def ensemble_logits(quad: LogitsQuad) -> EnsemblePair:
    """Per-sample, per-class minimum of the raw logits sharing one mixing method."""
    return EnsemblePair(np.minimum(quad.t1, quad.s2), np.minimum(quad.s1, quad.t2))


def ensemble_kd(quad: LogitsQuad, pair: EnsemblePair, T: float) -> tuple[float, float, float, float]:
    return (
        kd_loss(pair.e1, quad.t1, T),
        kd_loss(pair.e2, quad.t2, T),
        kd_loss(pair.e2, quad.s1, T),
        kd_loss(pair.e1, quad.s2, T),
    )


def _check_labels(logits: np.ndarray, *labels) -> None:
    c = logits.shape[1]
    for lab in labels:
        lab = np.asarray(lab)
        if lab.shape != (logits.shape[0],):
            raise ValueError("one label per sample required")
        if np.any(lab < 0) or np.any(lab >= c):
            raise ValueError(f"label out of range for {c} classes")


def mixed_ce(logits, label_a, label_b, w_a, w_b) -> float:
    """Batch mean of ``w_a * CE(y_a) + w_b * CE(y_b)``."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_labels(logits, label_a, label_b)
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    per = -(np.asarray(w_a) * logp[rows, label_a] + np.asarray(w_b) * logp[rows, label_b])
    return float(per.mean())


def mixed_ce_grad(logits, label_a, label_b, w_a, w_b) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    _check_labels(logits, label_a, label_b)
    n = logits.shape[0]
    w_a = np.asarray(w_a, dtype=np.float64)
    w_b = np.asarray(w_b, dtype=np.float64)
    g = softmax(logits) * (w_a + w_b)[:, None]
    rows = np.arange(n)
    np.subtract.at(g, (rows, np.asarray(label_a)), w_a)
    np.subtract.at(g, (rows, np.asarray(label_b)), w_b)
    return g / n


def total_loss(quad: LogitsQuad, mixed_h1: MixedLabels, mixed_h2: MixedLabels, weights: LossWeights) -> LossBreakdown:
    """All loss terms and the two per-network objectives.

    The teacher is optimized on its CE terms plus the KD terms whose
    prediction side is a teacher output (h2, t1, t2); the student likewise
    on (h1, s1, s2).
    """
    T = weights.temperature
    l1, l2, l3, l4, l5, l6 = weights.lambdas
    # a term with zero weight is not evaluated and is logged as exactly 0
    kd_h1 = kd_loss(quad.t1, quad.s2, T) if l1 else 0.0
    kd_h2 = kd_loss(quad.s1, quad.t2, T) if l2 else 0.0
    pair = ensemble_logits(quad)
    kd_t1 = kd_loss(pair.e1, quad.t1, T) if l3 else 0.0
    kd_t2 = kd_loss(pair.e2, quad.t2, T) if l4 else 0.0
    kd_s1 = kd_loss(pair.e2, quad.s1, T) if l5 else 0.0
    kd_s2 = kd_loss(pair.e1, quad.s2, T) if l6 else 0.0
    ce_t1 = mixed_ce(quad.t1, mixed_h1.label_a, mixed_h1.label_b, mixed_h1.w_a, mixed_h1.w_b)
    ce_t2 = mixed_ce(quad.t2, mixed_h2.label_a, mixed_h2.label_b, mixed_h2.w_a, mixed_h2.w_b)
    ce_s1 = mixed_ce(quad.s1, mixed_h2.label_a, mixed_h2.label_b, mixed_h2.w_a, mixed_h2.w_b)
    ce_s2 = mixed_ce(quad.s2, mixed_h1.label_a, mixed_h1.label_b, mixed_h1.w_a, mixed_h1.w_b)
    total_teacher = weights.ce_weight * (ce_t1 + ce_t2) + l2 * kd_h2 + l3 * kd_t1 + l4 * kd_t2
    total_student = weights.ce_weight * (ce_s1 + ce_s2) + l1 * kd_h1 + l5 * kd_s1 + l6 * kd_s2
    return LossBreakdown(
        L_KD_h1=kd_h1,
        L_KD_h2=kd_h2,
        L_KD_t1=kd_t1,
        L_KD_t2=kd_t2,
        L_KD_s1=kd_s1,
        L_KD_s2=kd_s2,
        L_CE_teacher_h1=ce_t1,
        L_CE_teacher_h2=ce_t2,
        L_CE_student_h1=ce_s2,
        L_CE_student_h2=ce_s1,
        total_teacher=total_teacher,
        total_student=total_student,
    )


def recompute_totals(b: LossBreakdown, weights: LossWeights) -> tuple[float, float]:
    """Re-derive the two totals from the recorded components."""
    l1, l2, l3, l4, l5, l6 = weights.lambdas
    teacher = weights.ce_weight * (b.L_CE_teacher_h1 + b.L_CE_teacher_h2) + l2 * b.L_KD_h2 + l3 * b.L_KD_t1 + l4 * b.L_KD_t2
    student = weights.ce_weight * (b.L_CE_student_h1 + b.L_CE_student_h2) + l1 * b.L_KD_h1 + l5 * b.L_KD_s1 + l6 * b.L_KD_s2
    return teacher, student


def total_loss_grads(
    quad: LogitsQuad, mixed_h1: MixedLabels, mixed_h2: MixedLabels, weights: LossWeights
) -> LogitsQuad:
    """Gradients of each network's total with respect to that network's own logits.

    ``t1``/``t2`` of the result hold d total_teacher / d(t1, t2); ``s1``/``s2``
    hold d total_student / d(s1, s2). Targets, including the ensemble, are
    constants.
    """
    T = weights.temperature
    l1, l2, l3, l4, l5, l6 = weights.lambdas
    cw = weights.ce_weight
    pair = ensemble_logits(quad)
    h1 = (mixed_h1.label_a, mixed_h1.label_b, mixed_h1.w_a, mixed_h1.w_b)
    h2 = (mixed_h2.label_a, mixed_h2.label_b, mixed_h2.w_a, mixed_h2.w_b)
    g_t1 = cw * mixed_ce_grad(quad.t1, *h1) + l3 * kd_loss_grad(pair.e1, quad.t1, T)
    g_t2 = cw * mixed_ce_grad(quad.t2, *h2) + l2 * kd_loss_grad(quad.s1, quad.t2, T) + l4 * kd_loss_grad(pair.e2, quad.t2, T)
    g_s1 = cw * mixed_ce_grad(quad.s1, *h2) + l5 * kd_loss_grad(pair.e2, quad.s1, T)
    g_s2 = cw * mixed_ce_grad(quad.s2, *h1) + l1 * kd_loss_grad(quad.t1, quad.s2, T) + l6 * kd_loss_grad(pair.e1, quad.s2, T)
    return LogitsQuad(g_t1, g_t2, g_s1, g_s2)
