"""Knowledge-distillation loss and distilled MAML training.

Standard soft-label formulation: (1 - alpha) * CE(student, labels) +
alpha * tau^2 * KL(softmax(teacher/tau) || softmax(student/tau)), with the
teacher treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import ShapeError, softmax, softmax_cross_entropy


@dataclass
class KdConfig:
    kd_temperature: float = 2.0
    alpha: float = 0.5
    apply_in: str = "both"  # inner | outer | both

    def validate(self) -> None:
        if self.kd_temperature <= 0.0:
            raise ValueError("kd_temperature must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.apply_in not in ("inner", "outer", "both"):
            raise ValueError(f"unknown apply_in {self.apply_in!r}")


def kd_parts(student_logits, teacher_logits, tau: float):
    """Mean KL(teacher_soft || student_soft) and the tau^2-scaled gradient
    of that term w.r.t. the student logits."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(
            f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}"
        )
    n = student_logits.shape[0]
    qs = softmax(student_logits / tau)
    qt = softmax(teacher_logits / tau)
    # KL with the softmax floor; qs > 0 always after stabilization
    kl = float(np.mean(np.sum(qt * (np.log(np.maximum(qt, 1e-300)) - np.log(qs)), axis=1)))
    grad = tau * (qs - qt) / n  # includes the tau^2 scale: tau^2 * (1/tau)
    return kl, grad


def kd_loss(student_logits, teacher_logits, labels, cfg: KdConfig):
    """Combined hard-label CE and soft-label KL loss.

    Returns (loss, grad_student_logits). alpha = 0 short-circuits to plain
    cross-entropy bit-exactly.
    """
    cfg.validate()
    ce, ce_grad = softmax_cross_entropy(student_logits, labels)
    if cfg.alpha == 0.0:
        return ce, ce_grad
    kl, kd_grad = kd_parts(student_logits, teacher_logits, cfg.kd_temperature)
    tau2 = cfg.kd_temperature**2
    loss = (1.0 - cfg.alpha) * ce + cfg.alpha * tau2 * kl
    grad = (1.0 - cfg.alpha) * ce_grad + cfg.alpha * kd_grad
    return loss, grad


def distilled_training(student, teacher, meta_cfg, kd_cfg: KdConfig, pool):
    """MAML training of the student with the teacher's soft labels mixed
    into the inner/outer losses per kd_cfg.apply_in.

    Returns (trained student, per-iteration query metrics).
    """
    from .meta import maml_train  # runtime import: meta depends on this module

    if kd_cfg is not None:
        kd_cfg.validate()
        if teacher is not None and teacher.n_classes != student.n_classes:
            raise ShapeError(
                f"class count mismatch: teacher {teacher.n_classes}, "
                f"student {student.n_classes}"
            )
    return maml_train(student, pool, meta_cfg, teacher=teacher, kd_cfg=kd_cfg)
