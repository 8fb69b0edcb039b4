"""Centered, temperature-sharpened self-distillation loss and EMA updates."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn as nn


@dataclass
class DistillState:
    center: torch.Tensor  # (K,)
    center_momentum: float = 0.9
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    ema_momentum: float = 0.996

    def __post_init__(self) -> None:
        if self.center.dim() != 1:
            raise ValueError(f"center must be a vector, got shape {tuple(self.center.shape)}")
        if not torch.isfinite(self.center).all():
            raise ValueError("center contains non-finite values")
        if self.teacher_temp <= 0 or self.student_temp <= 0:
            raise ValueError("temperatures must be strictly positive")
        for name in ("center_momentum", "ema_momentum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def K(self) -> int:
        return self.center.shape[0]

    @classmethod
    def zeros(cls, K: int, dtype=torch.float32, **kw) -> "DistillState":
        return cls(torch.zeros(K, dtype=dtype), **kw)


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"non-finite values in {what}")


def teacher_probs(logits: torch.Tensor, state: DistillState) -> torch.Tensor:
    """softmax((logits - center) / teacher_temp), detached from the graph."""
    _check_finite(logits, "teacher logits")
    if logits.shape[-1] != state.K:
        raise ValueError(f"logits have {logits.shape[-1]} classes, center has {state.K}")
    centered = logits.detach() - state.center.to(logits.dtype)
    return torch.softmax(centered / state.teacher_temp, dim=-1)


def student_logprobs(logits: torch.Tensor, state: DistillState) -> torch.Tensor:
    _check_finite(logits, "student logits")
    return torch.log_softmax(logits / state.student_temp, dim=-1)


def pair_mask(G: int, V: int, pairing: Sequence[int]) -> torch.Tensor:
    """(G, V) mask, False where student view ``v`` is the same crop as teacher view ``g``."""
    if len(pairing) != G:
        raise ValueError(f"pairing has {len(pairing)} entries for {G} teacher views")
    if len(set(pairing)) != len(pairing) or any(not 0 <= v < V for v in pairing):
        raise ValueError(f"pairing {list(pairing)} must be distinct indices below {V}")
    mask = torch.ones(G, V, dtype=torch.bool)
    mask[torch.arange(G), torch.as_tensor(list(pairing), dtype=torch.long)] = False
    return mask


def multiview_loss(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    pairing: Sequence[int],
    state: DistillState,
) -> torch.Tensor:
    """Mean cross-entropy H(P_t(g), P_s(v)) over all pairs where ``v`` is not crop ``g``.

    Shapes are ``(G, K)`` / ``(V, K)`` for one scene, or with a leading scene
    axis ``(B, G, K)`` / ``(B, V, K)``; in the batched case the per-scene
    means are averaged. Teacher probabilities carry no gradient.
    """
    single = teacher_logits.dim() == 2
    t = teacher_probs(teacher_logits, state)
    s = student_logprobs(student_logits, state)
    if single:
        t, s = t[None], s[None]
    G, V = t.shape[1], s.shape[1]
    if V < G:
        raise ValueError(f"student sees {V} views, fewer than the teacher's {G}")
    mask = pair_mask(G, V, pairing).to(s.device)
    n_pairs = int(mask.sum())
    if n_pairs == 0:
        raise ValueError("no valid teacher/student pairs")
    ce = -torch.einsum("bgk,bvk->bgv", t, s)
    per_scene = ce.masked_fill(~mask, 0.0).sum(dim=(1, 2)) / n_pairs
    return per_scene.mean()


def update_center(state: DistillState, teacher_logits: torch.Tensor) -> torch.Tensor:
    """center * m + (1 - m) * batch mean of the teacher logits (rows over all leading axes)."""
    rows = teacher_logits.detach().reshape(-1, teacher_logits.shape[-1])
    if rows.shape[0] == 0:
        raise ValueError("cannot update the center from an empty batch")
    m = state.center_momentum
    return state.center * m + (1.0 - m) * rows.mean(dim=0).to(state.center.dtype)


def _named_tensors(x) -> dict[str, torch.Tensor]:
    if isinstance(x, nn.Module):
        return dict(x.state_dict(keep_vars=True))
    return dict(x)


@torch.no_grad()
def ema_update(teacher_params, student_params, momentum: float) -> None:
    """In place: teacher <- momentum * teacher + (1 - momentum) * student.

    Accepts modules (parameters and running statistics are both updated) or
    name -> tensor mappings. Integer buffers such as BatchNorm batch counters
    are left as they are.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {momentum}")
    t_named = _named_tensors(teacher_params)
    s_named = _named_tensors(student_params)
    if t_named.keys() != s_named.keys():
        missing = sorted(set(t_named) ^ set(s_named))
        raise ValueError(f"teacher and student disagree on parameters: {missing[:5]}")
    for name, t in t_named.items():
        s = s_named[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
        if not t.is_floating_point() or momentum == 1.0:
            continue
        if momentum == 0.0:
            t.copy_(s.detach())
        else:
            t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)


def cosine_momentum(base: float, step: int, total_steps: int) -> float:
    """EMA momentum rising from ``base`` to 1 along a half cosine."""
    if total_steps <= 1:
        return base
    return 1.0 - (1.0 - base) * (math.cos(math.pi * step / (total_steps - 1)) + 1.0) / 2.0


def mean_prob_entropy(probs: torch.Tensor) -> float:
    """Entropy of the average probability row; ln K means no collapse onto few outputs."""
    p = probs.reshape(-1, probs.shape[-1]).mean(dim=0).double()
    return float(-(p * torch.log(p.clamp_min(1e-30))).sum())
