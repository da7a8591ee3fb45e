"""Loss terms and the combined loss/gradient evaluation.

Four term kinds are supported: plain cross-entropy, temperature-scaled
distillation against frozen teacher logits, quadratic anchor penalties
weighted by Fisher diagonals, and the prototype contrastive term used by
prototype-based rehearsal. A step's loss is the sum of its terms; data terms
average over the batch, the anchor penalty is batch-independent.

Each term has a standalone ``*_loss_and_grad`` function operating on raw
logit/feature arrays; :func:`loss_and_backward` composes them with one
forward and one backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from ..errors import NonFiniteLossError, UnknownTermError
from .model import BatchOutput, ModelSpec, ParamVector, backward, forward, head_logits


def softmax_T(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis, stabilized by max subtraction."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class CrossEntropy:
    """Softmax cross-entropy against integer labels on the selected head."""

    labels: np.ndarray


@dataclass(frozen=True)
class Distillation:
    """weight * T^2 * KL(teacher_T || student_T), averaged over the batch.

    ``output_indices`` restricts the match to a subset of the head's outputs
    (the outputs the teacher was actually trained on); ``head_id`` defaults
    to the step's selected head.
    """

    teacher_logits: np.ndarray
    temperature: float
    weight: float
    output_indices: np.ndarray | None = None
    head_id: int | None = None


@dataclass(frozen=True)
class EwcPenalty:
    """sum over anchors of (lam / 2) * sum_j F_j (theta_j - anchor_j)^2."""

    anchors: tuple[tuple[np.ndarray, np.ndarray], ...]  # (theta_star, fisher)
    lam: float


@dataclass(frozen=True)
class PrototypePpp:
    """Prototype softmax term on L2-normalized features.

    For a sample of class c the logit for class k is ``zhat . p_k / tau``;
    the loss is cross-entropy of that softmax at c. Prototypes are constants
    for the gradient (they evolve outside the optimizer).
    """

    labels: np.ndarray
    prototypes: np.ndarray  # (C, d), unit rows
    tau: float


LossTerm = Union[CrossEntropy, Distillation, EwcPenalty, PrototypePpp]


def cross_entropy_loss_and_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    b = logits.shape[0]
    p = softmax_T(logits, 1.0)
    eps = np.finfo(np.float64).tiny
    loss = float(-np.log(np.maximum(p[np.arange(b), labels], eps)).mean(dtype=np.float64))
    dlogits = p.copy()
    dlogits[np.arange(b), labels] -= 1.0
    return loss, dlogits / b


def distillation_loss_and_grad(
    student_logits: np.ndarray, term: Distillation
) -> tuple[float, np.ndarray]:
    idx = term.output_indices
    s = student_logits if idx is None else student_logits[:, idx]
    t = term.teacher_logits if idx is None else np.asarray(term.teacher_logits)[:, idx]
    temp = term.temperature
    ps = softmax_T(s, temp)
    pt = softmax_T(t, temp)
    eps = np.finfo(np.float64).tiny
    kl = (pt * (np.log(np.maximum(pt, eps)) - np.log(np.maximum(ps, eps)))).sum(axis=1)
    loss = float(term.weight * temp**2 * kl.mean(dtype=np.float64))
    b = s.shape[0]
    dsub = term.weight * temp * (ps - pt) / b
    dlogits = np.zeros_like(np.asarray(student_logits, dtype=np.float64))
    if idx is None:
        dlogits += dsub
    else:
        dlogits[:, idx] = dsub
    return loss, dlogits


def ewc_penalty_loss_and_grad(values: np.ndarray, term: EwcPenalty) -> tuple[float, np.ndarray]:
    theta = np.asarray(values, dtype=np.float64)
    loss = 0.0
    grad = np.zeros_like(theta)
    for anchor, fisher in term.anchors:
        delta = theta - np.asarray(anchor, dtype=np.float64)
        f = np.asarray(fisher, dtype=np.float64)
        loss += 0.5 * term.lam * float((f * delta * delta).sum(dtype=np.float64))
        grad += term.lam * f * delta
    return loss, grad


def prototype_ppp_loss_and_grad(
    features: np.ndarray, term: PrototypePpp
) -> tuple[float, np.ndarray]:
    z = np.asarray(features, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    zhat = z / norms
    protos = np.asarray(term.prototypes, dtype=np.float64)
    sims = zhat @ protos.T / term.tau
    loss, dsims = cross_entropy_loss_and_grad(sims, term.labels)
    dzhat = dsims @ protos / term.tau
    # back through the normalization: d z = (d zhat - zhat (zhat . d zhat)) / ||z||
    inner = (zhat * dzhat).sum(axis=1, keepdims=True)
    dz = (dzhat - zhat * inner) / norms
    return loss, dz


def loss_and_backward(
    params: ParamVector,
    spec: ModelSpec,
    batch: np.ndarray,
    head_id: int,
    loss_terms: Sequence[LossTerm],
    dtype: type = np.float32,
    return_output: bool = False,
):
    """Evaluate the summed loss terms and backpropagate to a flat gradient.

    Returns ``(loss, grads)``, or ``(loss, grads, BatchOutput)`` when
    ``return_output`` is set. Raises ``UnknownTermError`` for unsupported
    term objects and ``NonFiniteLossError`` when the loss is NaN/inf.
    """
    if not loss_terms:
        raise ValueError("loss_terms must be non-empty")
    for t in loss_terms:
        if not isinstance(t, (CrossEntropy, Distillation, EwcPenalty, PrototypePpp)):
            raise UnknownTermError(f"unsupported loss term {type(t).__name__}")

    out = forward(params, spec, batch, head_id, dtype=dtype)
    logits64 = out.logits.astype(np.float64)
    extra_logits: dict[int, np.ndarray] = {}
    for t in loss_terms:
        if isinstance(t, Distillation) and t.head_id is not None and t.head_id != head_id:
            if t.head_id not in extra_logits:
                extra_logits[t.head_id] = head_logits(
                    params, out.features, t.head_id, dtype
                ).astype(np.float64)

    total = 0.0
    dlogits: dict[int, np.ndarray] = {head_id: np.zeros_like(logits64)}
    for h, lg in extra_logits.items():
        dlogits[h] = np.zeros_like(lg)
    dfeatures = np.zeros_like(out.features, dtype=np.float64)
    dvalues = np.zeros(params.values.size, dtype=np.float64)

    for t in loss_terms:
        if isinstance(t, CrossEntropy):
            l, d = cross_entropy_loss_and_grad(logits64, t.labels)
            total += l
            dlogits[head_id] += d
        elif isinstance(t, Distillation):
            h = head_id if t.head_id is None else t.head_id
            student = logits64 if h == head_id else extra_logits[h]
            l, d = distillation_loss_and_grad(student, t)
            total += l
            dlogits[h] += d
        elif isinstance(t, EwcPenalty):
            l, d = ewc_penalty_loss_and_grad(params.values, t)
            total += l
            dvalues += d
        elif isinstance(t, PrototypePpp):
            l, d = prototype_ppp_loss_and_grad(out.features, t)
            total += l
            dfeatures += d

    if not np.isfinite(total):
        raise NonFiniteLossError(f"loss is {total}")

    grads = backward(
        out.cache,
        {h: d.astype(dtype) for h, d in dlogits.items()},
        dfeatures.astype(dtype),
    )
    grads = grads.astype(dtype, copy=False) + dvalues.astype(dtype)
    out.loss = total
    if return_output:
        return total, grads, out
    return total, grads
