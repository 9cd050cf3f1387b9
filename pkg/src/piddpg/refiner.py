"""Critic-guided online action refinement.

The actor's action ``a0`` passes through a per-cell clipped affine layer
``a' = clip(w * a0 + b, 0, 1)`` initialized to the identity. The layer takes
``K`` plain gradient-ascent steps of size ``eta`` on the frozen critic's
``Q(s, h, a')``; a cell whose pre-clip value leaves the open interval (0, 1)
receives no update for that step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .agent import CriticNet, _batched
from .errors import DomainError


@dataclass
class RefinerParams:
    w: np.ndarray
    b: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "RefinerParams":
        return cls(np.ones(n), np.zeros(n))


def affine_clip(a, params: RefinerParams) -> np.ndarray:
    return np.clip(params.w * np.asarray(a, dtype=np.float64) + params.b, 0.0, 1.0)


def refinement_schedule(episode: int, k_max: int) -> int:
    if episode < 0:
        raise DomainError("episode must be >= 0")
    return min(int(episode), int(k_max))


def refine_step(params: RefinerParams, a0, grad_q, eta: float) -> tuple[RefinerParams, np.ndarray]:
    """One ascent step given ``dQ/da'`` at the current refined action.

    Returns the new parameters and the live mask; saturated cells keep their ``(w, b)``.
    """
    a0 = np.asarray(a0, dtype=np.float64)
    g = np.asarray(grad_q, dtype=np.float64)
    pre = params.w * a0 + params.b
    live = (pre > 0.0) & (pre < 1.0)
    w = params.w + eta * g * np.where(live, a0, 0.0)
    b = params.b + eta * g * np.where(live, 1.0, 0.0)
    return RefinerParams(w, b), live


@dataclass
class RefineResult:
    action: np.ndarray
    q_before: float | None
    q_after: float | None
    steps: int
    fell_back: bool = False

    @property
    def q_gain(self) -> float | None:
        """Relative Q improvement ``(Q(a') - Q(a0)) / |Q(a0)|``."""
        if self.q_before is None:
            return None
        return (self.q_after - self.q_before) / max(abs(self.q_before), 1e-12)


def refine(
    a0,
    s,
    h,
    critic: CriticNet,
    k_refine: int,
    eta: float = 0.1,
    fallback: bool = False,
    trace: list | None = None,
) -> RefineResult:
    """Run ``k_refine`` steps of the clipped affine refinement on a frozen critic.

    With ``k_refine == 0`` the actor action is returned untouched and no critic
    evaluation happens. ``trace``, if given, collects ``(w, b, a')`` per step.
    """
    if k_refine < 0:
        raise DomainError("k_refine must be >= 0")
    if not eta > 0:
        raise DomainError("eta must be > 0")
    a0 = np.asarray(a0, dtype=np.float64)
    params = RefinerParams.identity(a0.shape[0])
    if k_refine == 0:
        return RefineResult(affine_clip(a0, params), None, None, 0)
    s_t, h_t = _batched(s, h)
    with torch.no_grad():
        feats = critic.features(s_t, h_t)

    def q_and_grad(a):
        at = torch.tensor(a[None], dtype=feats.dtype, requires_grad=True)
        q = critic.head(feats, at)[0]
        (g,) = torch.autograd.grad(q, at)
        return float(q.detach()), g[0].numpy().astype(np.float64)

    q_before = None
    for _ in range(k_refine):
        a_ref = affine_clip(a0, params)
        q, g = q_and_grad(a_ref)
        if q_before is None:
            q_before = q
        params, _ = refine_step(params, a0, g, eta)
        if trace is not None:
            trace.append((params.w.copy(), params.b.copy(), a_ref))
    final = affine_clip(a0, params)
    with torch.no_grad():
        q_after = float(critic.head(feats, torch.as_tensor(final)[None])[0])
    if fallback and q_after < q_before:
        return RefineResult(a0.copy(), q_before, q_before, k_refine, fell_back=True)
    return RefineResult(final, q_before, q_after, k_refine)
