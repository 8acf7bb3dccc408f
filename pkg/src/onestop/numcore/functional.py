"""Differentiable building blocks used by the transformer and the span head."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor

MASK_VALUE = -1e9


class EmptyMaskError(ValueError):
    """A softmax row had no unmasked position."""


def _masked_input(x: Tensor, mask) -> np.ndarray:
    if mask is None:
        return x.data
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, x.shape)
    except ValueError as exc:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {x.shape}") from exc
    if not full.any(axis=-1).all():
        raise EmptyMaskError("softmax row is fully masked (empty document or attention window)")
    return x.data + np.where(mask, 0.0, MASK_VALUE).astype(x.dtype)


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` is True where a position may receive weight."""
    z = _masked_input(x, mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def log_softmax(x: Tensor, mask=None) -> Tensor:
    z = _masked_input(x, mask)
    z = z - z.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    return x.relu()


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply ``gain`` and ``bias``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return Tensor._make(out, (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,))


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")
    return weight[ids]


def cross_entropy(logits: Tensor, target, mask=None, reduction: str = "sum") -> Tensor:
    """Negative log-likelihood of ``target`` under ``softmax(logits)``.

    ``logits`` is ``[..., V]`` and ``target`` an integer array of the leading shape.
    ``mask`` (same shape as ``target``) drops positions from the loss.
    ``reduction``: ``"none"`` keeps the leading shape, ``"sum"`` adds every
    position, ``"mean"`` divides that sum by the number of unmasked positions.
    For a batch ``[B, T, V]`` the caller sums over ``T`` with ``"none"`` and
    then averages over ``B``.
    """
    target = np.asarray(target)
    V = logits.shape[-1]
    if V < 2:
        raise ShapeError("cross_entropy needs at least two classes")
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= V):
        raise IndexError(f"target index out of range [0, {V})")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, target[..., None], axis=-1)[..., 0]
    losses = lse - picked
    weight = np.ones(target.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    losses = losses * weight

    if reduction == "none":
        out = losses
        scale = None
    elif reduction == "sum":
        out = losses.sum()
        scale = 1.0
    elif reduction == "mean":
        denom = max(float(weight.sum()), 1.0)
        out = losses.sum() / denom
        scale = 1.0 / denom
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        probs = np.exp(z - lse[..., None])
        np.put_along_axis(probs, target[..., None], np.take_along_axis(probs, target[..., None], axis=-1) - 1.0, axis=-1)
        upstream = g if scale is None else g * scale
        return (probs * (upstream * weight)[..., None],)

    return Tensor._make(np.asarray(out, dtype=logits.dtype), (logits,), backward)
