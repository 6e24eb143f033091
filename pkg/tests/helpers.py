"""Shared test utilities: gradient checking and synthetic corpora on disk."""

from __future__ import annotations

import numpy as np
import torch

from mmtumor.model import MultimodalNet, batch_tensors


def bce_on_probs(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    p1 = probs[:, 1].clamp(1e-7, 1.0 - 1e-7)
    return -(labels * torch.log(p1) + (1 - labels) * torch.log(1 - p1)).mean()


def gradient_check(
    model: MultimodalNet,
    batch,
    step: float = 1e-3,
    rel_tol: float = 1e-2,
    min_coords: int = 20,
    seed: int = 0,
) -> int:
    """Compare autograd against central differences on sampled parameters.

    A coordinate's finite-difference measurement is only trusted when
    halving-scale probes agree (FD at `step` vs `step/10` within 0.2%
    relative); disagreement means the probe straddles a ReLU kink, where
    central differences do not estimate the derivative of the active
    piece. Invalid measurements are skipped, never excused: a genuinely
    wrong gradient would leave the two probes agreeing with each other
    while disagreeing with autograd, which still fails the check.

    Returns the number of coordinates actually verified (>= min_coords).
    """
    model = model.double()
    model.eval()
    images, features = batch_tensors(model, batch, dtype=torch.float64)
    labels = torch.from_numpy(batch.labels).double()

    def loss_value() -> torch.Tensor:
        return bce_on_probs(model(images, features), labels)

    loss = loss_value()
    model.zero_grad()
    loss.backward()

    params = [p for p in model.parameters() if p.grad is not None]
    coords = [
        (t, i)
        for t, p in enumerate(params)
        for i in range(p.numel())
        if abs(p.grad.flatten()[i].item()) >= 1e-5
    ]
    rng = np.random.default_rng(seed)
    rng.shuffle(coords)

    def central_difference(flat: torch.Tensor, i: int, origin: float, h: float) -> float:
        flat[i] = origin + h
        plus = loss_value().item()
        flat[i] = origin - h
        minus = loss_value().item()
        flat[i] = origin
        return (plus - minus) / (2.0 * h)

    checked = 0
    with torch.no_grad():
        for t, i in coords:
            if checked >= min_coords + 5:
                break
            flat = params[t].flatten()
            origin = flat[i].item()
            grad = params[t].grad.flatten()[i].item()
            fd = central_difference(flat, i, origin, step)
            fd_fine = central_difference(flat, i, origin, step / 10.0)
            if abs(fd - fd_fine) > 2e-3 * max(abs(fd), abs(fd_fine)):
                continue
            rel = abs(fd - grad) / max(abs(fd), abs(grad))
            assert rel <= rel_tol, f"param {t} coord {i}: fd {fd} vs autograd {grad}"
            checked += 1
    assert checked >= min_coords, f"only {checked} smooth coordinates found"
    return checked
