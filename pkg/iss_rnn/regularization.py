"""Group Lasso and ℓ1 regularized SGD steps and magnitude thresholding.

Weights and gradients are dicts of tensor name → array. Every step returns a
new dict and leaves its inputs untouched.
"""

import logging
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from iss_rnn.errors import NumericError, ParameterError, ShapeError
from iss_rnn.topology import IssGroupMap

logger = logging.getLogger(__name__)

Weights = Dict[str, np.ndarray]


def _check_grads(weights: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for name, w in weights.items():
        if name not in grads:
            raise ShapeError(f"no gradient for tensor '{name}'")
        if np.shape(grads[name]) != w.shape:
            raise ShapeError(f"gradient of '{name}' has shape {np.shape(grads[name])}, weight has {w.shape}")
        if not np.all(np.isfinite(grads[name])):
            layer = name.split('/')[0]
            raise NumericError(f"non-finite gradient in tensor '{name}' (layer '{layer}')")


def group_lasso_penalty(weights: Mapping[str, np.ndarray], group_map: IssGroupMap, epsilon: float = 0.0) -> float:
    """R(w) = Σ over all ISS groups of sqrt(ε + Σ w²)."""
    group_map.check_weights(weights)
    return float(group_map.group_norms(weights, epsilon).sum())


def sgd_step(weights: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], eta: float) -> Weights:
    """Plain SGD: w ← w − η·∂E/∂w."""
    if eta <= 0:
        raise ParameterError(f"learning rate must be positive, got {eta}")
    _check_grads(weights, grads)
    return {name: (w - eta * grads[name]).astype(w.dtype) for name, w in weights.items()}


def sgd_step_group_lasso(
    weights: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    group_map: IssGroupMap,
    eta: float,
    lam: float,
    epsilon: float = 1e-8,
) -> Weights:
    """One SGD step on data loss plus λ·R(w).

    Each group member moves by −η(∂E/∂w + λ·w/sqrt(ε + Σ_group w²)); a
    coordinate shared by several groups collects the term of each. Tensors
    outside every group (embeddings, biases) get plain SGD.

    Raises:
        ParameterError: If ``eta <= 0`` or ``lam < 0``.
        NumericError: If a gradient is non-finite.
    """
    if eta <= 0:
        raise ParameterError(f"learning rate must be positive, got {eta}")
    if lam < 0:
        raise ParameterError(f"lambda must be non-negative, got {lam}")
    _check_grads(weights, grads)
    if lam == 0:
        return sgd_step(weights, grads, eta)

    group_map.check_weights(weights)
    norms = group_map.group_norms(weights, epsilon)
    coef = np.divide(lam, norms, out=np.zeros_like(norms), where=norms > 0)
    members = set(group_map.member_tensors)
    updated = {}
    for name, w in weights.items():
        step = np.asarray(grads[name], dtype=np.float64)
        if name in members:
            step = step + w * group_map.scatter(name, coef)
        updated[name] = (w - eta * step).astype(w.dtype)
    return updated


def sgd_step_l1(
    weights: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    eta: float,
    l1_decay: float,
    penalized: Optional[Iterable[str]] = None,
) -> Weights:
    """w ← w − η(∂E/∂w + decay·sign(w)), with sign(0) = 0.

    Only tensors named in ``penalized`` (all tensors when None) carry the ℓ1
    term.
    """
    if eta <= 0:
        raise ParameterError(f"learning rate must be positive, got {eta}")
    if l1_decay < 0:
        raise ParameterError(f"l1 decay must be non-negative, got {l1_decay}")
    _check_grads(weights, grads)
    names = set(weights) if penalized is None else set(penalized)
    updated = {}
    for name, w in weights.items():
        step = np.asarray(grads[name], dtype=np.float64)
        if name in names and l1_decay:
            step = step + l1_decay * np.sign(w)
        updated[name] = (w - eta * step).astype(w.dtype)
    return updated


def threshold_weights(
    weights: Mapping[str, np.ndarray], group_map: IssGroupMap, tau: float
) -> Tuple[Weights, int]:
    """Set every group-member weight with |w| < τ to exactly zero.

    Returns:
        Tuple[Weights, int]: The thresholded weights and how many nonzero
        entries were zeroed. Non-member tensors and entries are untouched.
    """
    if tau < 0:
        raise ParameterError(f"threshold must be non-negative, got {tau}")
    updated = dict(weights)
    if tau == 0:
        return updated, 0
    zeroed = 0
    for name in group_map.member_tensors:
        w = weights[name]
        small = group_map.member_mask(name) & (np.abs(w) < tau) & (w != 0)
        count = int(small.sum())
        if count:
            w = w.copy()
            w[small] = 0
            zeroed += count
        updated[name] = w
    logger.debug("Thresholding at tau=%g zeroed %d weights", tau, zeroed)
    return updated, zeroed


def clip_by_global_norm(grads: Mapping[str, np.ndarray], clip_norm: float) -> Tuple[Weights, float]:
    """Scale all gradients together so their joint ℓ2 norm is at most ``clip_norm``."""
    total = float(np.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2)) for g in grads.values())))
    if clip_norm <= 0 or total <= clip_norm:
        return dict(grads), total
    scale = clip_norm / total
    return {name: (g * scale).astype(g.dtype) for name, g in grads.items()}, total
