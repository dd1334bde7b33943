"""Decide, step by step, whether the adaptor needs a backward pass."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

ALWAYS = -math.inf  # threshold sentinel: the criterion fires on every observation
NEVER = math.inf    # threshold sentinel: the criterion is disabled

LOSS_EMA_DECAY = 0.99


@dataclass(frozen=True)
class SkipState:
    d_kl_in: float
    tau1: float = 1.1
    tau2: float = 1.05
    l_ema: float = math.nan
    initialized: bool = False


@dataclass(frozen=True)
class SkipDecision:
    update: bool
    ratio1: float
    ratio2: float
    fired1: bool
    fired2: bool


def _check_tau(name: str, tau: float):
    if math.isnan(tau) or not (tau >= 1.0 or tau == ALWAYS):
        raise ValueError(f"{name} must be >= 1 (or the ALWAYS/NEVER sentinels), got {tau}")


def make_skip_state(d_kl_in: float, tau1: float = 1.1, tau2: float = 1.05) -> SkipState:
    if not d_kl_in > 0 or not math.isfinite(d_kl_in):
        raise ValueError(f"in-domain gap must be positive and finite, got {d_kl_in}")
    _check_tau("tau1", tau1)
    _check_tau("tau2", tau2)
    return SkipState(d_kl_in=float(d_kl_in), tau1=float(tau1), tau2=float(tau2))


def observe(state: SkipState, l_img: float) -> tuple[SkipDecision, SkipState]:
    """Apply both criteria to this step's image loss, then fold it into the loss EMA.

    The sudden-increase criterion compares against the loss EMA from the
    previous step; on the very first observation it is inactive and the EMA
    is seeded with ``l_img``.
    """
    if not math.isfinite(l_img):
        raise FloatingPointError(f"non-finite image loss: {l_img}")
    ratio1 = l_img / state.d_kl_in
    fired1 = ratio1 > state.tau1
    if state.initialized:
        ratio2 = l_img / state.l_ema if state.l_ema > 0 else math.inf
        fired2 = ratio2 > state.tau2
        l_ema = LOSS_EMA_DECAY * state.l_ema + (1.0 - LOSS_EMA_DECAY) * l_img
    else:
        ratio2 = 1.0
        fired2 = False
        l_ema = l_img
    decision = SkipDecision(update=fired1 or fired2, ratio1=ratio1, ratio2=ratio2,
                            fired1=fired1, fired2=fired2)
    return decision, replace(state, l_ema=l_ema, initialized=True)
