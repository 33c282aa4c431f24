"""Loss functions used by the local objectives.

Each ``*_grad`` variant returns ``(value, d value / d input)``; the plain
variants return only the scalar. Natural log throughout.
"""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range 0..{num_classes - 1}")
    return labels.astype(np.int64)


def cross_entropy_loss_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [B, C], got {logits.shape}")
    n, c = logits.shape
    labels = _check_labels(labels, c)
    if labels.shape != (n,):
        raise DimensionError("one label per logits row required")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def cross_entropy_loss(logits: np.ndarray, labels) -> float:
    return cross_entropy_loss_grad(logits, labels)[0]


def supcon_loss_grad(
    projections: np.ndarray, labels, temperature: float
) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss over all rows of the (expanded) batch.

    Every row is an anchor; its positives are the other rows sharing its label
    and its contrast set is every other row. Anchors without positives are
    left out, and the loss is the mean over the remaining anchors.
    ``projections`` are expected to be row-normalized already.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = projections
    n = z.shape[0]
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError("one label per projection row required")
    sim = (z @ z.T) / temperature
    eye = np.eye(n, dtype=bool)
    positive = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = positive.sum(axis=1)
    valid = n_pos > 0
    if not valid.any():
        return 0.0, np.zeros_like(z)

    masked = np.where(eye, -np.inf, sim)
    row_max = masked.max(axis=1, keepdims=True)
    log_denom = row_max[:, 0] + np.log(np.exp(masked - row_max).sum(axis=1))
    pos_mean = np.where(positive, sim, 0.0).sum(axis=1) / np.maximum(n_pos, 1)
    per_anchor = log_denom - pos_mean
    n_valid = valid.sum()
    loss = per_anchor[valid].sum() / n_valid

    # dL/dsim, rows of invalid anchors are zero
    prob = np.exp(masked - log_denom[:, None])
    dsim = prob - positive / np.maximum(n_pos, 1)[:, None]
    dsim[~valid] = 0.0
    dsim /= n_valid
    grad = (dsim + dsim.T) @ z / temperature
    return float(loss), grad


def supcon_loss(projections: np.ndarray, labels, temperature: float) -> float:
    return supcon_loss_grad(projections, labels, temperature)[0]


def kd_loss_grad(
    teacher_logits: np.ndarray,
    student_logits: np.ndarray,
    temperature: float,
    form: str = "softened",
) -> tuple[float, np.ndarray]:
    """Distillation loss ``tau^2/B * sum KL(teacher || student)``.

    ``form="softened"`` compares ``softmax(logits / tau)``. ``form="literal"``
    compares ``softmax(logits) / tau`` term by term, which reduces to
    ``tau/B * sum KL`` of the unsoftened distributions. The gradient is taken
    w.r.t. the student only.
    """
    if teacher_logits.shape != student_logits.shape or student_logits.ndim != 2:
        raise DimensionError(
            f"teacher {teacher_logits.shape} and student {student_logits.shape} differ"
        )
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n = student_logits.shape[0]
    tau = temperature
    if form == "softened":
        log_t = log_softmax(teacher_logits / tau)
        log_s = log_softmax(student_logits / tau)
        scale = tau * tau / n
        dscale = tau / n
    elif form == "literal":
        log_t = log_softmax(teacher_logits)
        log_s = log_softmax(student_logits)
        scale = tau / n
        dscale = tau / n
    else:
        raise ValueError(f"unknown kd form {form!r}")
    p_t = np.exp(log_t)
    kl = (p_t * (log_t - log_s)).sum()
    grad = dscale * (np.exp(log_s) - p_t)
    return float(scale * kl), grad


def kd_loss(
    teacher_logits: np.ndarray,
    student_logits: np.ndarray,
    temperature: float,
    form: str = "softened",
) -> float:
    return kd_loss_grad(teacher_logits, student_logits, temperature, form)[0]


def _cosine_grad(a: np.ndarray, b: np.ndarray, eps: float = 1e-12):
    """Row-wise cosine similarity and its gradient w.r.t. ``a``."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.maximum(na * nb, eps)
    cos = (a * b).sum(axis=1) / denom
    safe_na = np.maximum(na, eps)
    dcos = b / denom[:, None] - cos[:, None] * a / (safe_na**2)[:, None]
    return cos, dcos


def moon_contrastive_loss_grad(
    local: np.ndarray, global_: np.ndarray, previous: np.ndarray, temperature: float
) -> tuple[float, np.ndarray]:
    """Model-contrastive loss: pull ``local`` towards ``global_``, away from ``previous``.

    Batch mean of ``-log(e^{a} / (e^{a} + e^{b}))`` with ``a = cos(z, z_glob)/tau``
    and ``b = cos(z, z_prev)/tau``. Gradient is w.r.t. ``local`` only.
    """
    if not (local.shape == global_.shape == previous.shape):
        raise DimensionError("embedding shapes differ")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n = local.shape[0]
    cos_g, dcos_g = _cosine_grad(local, global_)
    cos_p, dcos_p = _cosine_grad(local, previous)
    diff = (cos_p - cos_g) / temperature
    # softplus(diff) = -log sigmoid(-diff)
    loss = np.logaddexp(0.0, diff).mean()
    sig = 0.5 * (1.0 + np.tanh(0.5 * diff))
    coef = sig / (n * temperature)
    grad = coef[:, None] * (dcos_p - dcos_g)
    return float(loss), grad


def moon_contrastive_loss(local, global_, previous, temperature: float) -> float:
    return moon_contrastive_loss_grad(local, global_, previous, temperature)[0]


def mean_entropy(logits: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the softmax rows of ``logits``."""
    logp = log_softmax(logits)
    return float(-(np.exp(logp) * logp).sum(axis=1).mean())
