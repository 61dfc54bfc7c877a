from __future__ import annotations

import math

import torch

from .ops import NonFiniteError


class AdamW(torch.optim.AdamW):
    """Decoupled-weight-decay Adam that rejects non-finite gradients.

    The update rule is torch's; the check runs before any parameter or
    moment is touched, so a bad batch leaves the state exactly as it was.
    """

    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                    raise NonFiniteError("non-finite gradient entries; optimizer step refused")
        return super().step(closure)

    def step_count(self) -> int:
        steps = [int(s["step"]) for s in self.state.values() if "step" in s]
        return max(steps, default=0)


def warmup_steps(max_steps: int, warmup_ratio: float) -> int:
    return max(1, math.ceil(max_steps * warmup_ratio)) if warmup_ratio > 0 else 0


def linear_warmup(optimizer: torch.optim.Optimizer, max_steps: int, warmup_ratio: float):
    """Linear ramp to the base lr over ``warmup_ratio * max_steps`` steps, then flat."""
    n = warmup_steps(max_steps, warmup_ratio)

    def factor(step: int) -> float:
        return 1.0 if n == 0 else min(1.0, (step + 1) / n)

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)
