"""Train-to-convergence loop shared by inverse-dynamics retraining and behavior cloning."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch


@dataclass
class FitResult:
    inner_epochs: int
    final_loss: float
    converged: bool


def fit_until_converged(step: Callable[[], torch.Tensor], evaluate: Callable[[], float],
                        optimizer: torch.optim.Optimizer, steps_per_epoch: int = 10,
                        tol: float = 1e-5, patience: int = 5, max_epochs: int = 200) -> FitResult:
    """Run inner epochs of ``steps_per_epoch`` optimizer steps.

    Stops once the evaluation loss improved by less than ``tol`` for
    ``patience`` consecutive inner epochs, or after ``max_epochs``.
    """
    best = evaluate()
    stale = 0
    current = best
    for epoch in range(1, max_epochs + 1):
        for _ in range(steps_per_epoch):
            loss = step()
            if not torch.isfinite(loss):
                raise FloatingPointError("non-finite loss while fitting")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        current = evaluate()
        if best - current < tol:
            stale += 1
            if stale >= patience:
                return FitResult(epoch, current, True)
        else:
            stale = 0
        best = min(best, current)
    return FitResult(max_epochs, current, False)
