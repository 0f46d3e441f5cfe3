"""Slot-level and page-level rewards."""

from __future__ import annotations

import math
from collections.abc import Sequence

from .types import SlotFeedback


def intrinsic_reward(fb: SlotFeedback, lam: float = 0.3, delta: float = 3.0) -> float:
    """lam * click + (1 - lam) * min(ln(1 + pay), delta), with click in {+1, -1}."""
    if fb.pay < 0:
        raise ValueError(f"negative pay {fb.pay}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if delta <= 0:
        raise ValueError("delta must be positive")
    return lam * fb.click + (1.0 - lam) * min(math.log1p(fb.pay), delta)


def page_intrinsics(
    feedback: Sequence[SlotFeedback], lam: float = 0.3, delta: float = 3.0, no_click_penalty: float = -0.1
) -> list[float]:
    """Per-slot rewards for one page; a page without any click or purchase
    gets ``no_click_penalty`` added to its last slot."""
    rs = [intrinsic_reward(fb, lam, delta) for fb in feedback]
    if rs and not any(fb.click == 1 or fb.pay > 0 for fb in feedback):
        rs[-1] += no_click_penalty
    return rs


def extrinsic_reward(intrinsics: Sequence[float], gamma: float) -> float:
    """(1/l) * sum_k gamma^k r_k over the page's l slot rewards."""
    l = len(intrinsics)
    if l == 0:
        raise ValueError("extrinsic reward of an empty page is undefined")
    total = 0.0
    g = 1.0
    for r in intrinsics:
        total += g * r
        g *= gamma
    return total / l
