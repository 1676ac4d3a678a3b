"""Central-finite-difference gradient checking shared by the test modules."""
from __future__ import annotations

import numpy as np
import torch


def fd_gradient_check(fn, x0: torch.Tensor, rng: np.random.Generator,
                      n_points: int = 20, h: float = 1e-6,
                      rel: float = 1e-4, abs_floor: float = 1e-7) -> None:
    """Compare autograd gradients of scalar fn(x) against central differences.

    Checks ``n_points`` randomly chosen coordinates of ``x0`` (double
    precision) and asserts |analytic - fd| <= rel * max(|analytic|, |fd|)
    with a small absolute floor for near-zero entries.
    """
    x = x0.detach().double().clone().requires_grad_(True)
    out = fn(x)
    (grad,) = torch.autograd.grad(out, x)

    flat = x.detach().reshape(-1)
    n = min(n_points, flat.numel())
    idxs = rng.choice(flat.numel(), size=n, replace=False)
    for i in idxs:
        xp = flat.clone()
        xm = flat.clone()
        xp[i] += h
        xm[i] -= h
        fp = float(fn(xp.reshape(x.shape)))
        fm = float(fn(xm.reshape(x.shape)))
        fd = (fp - fm) / (2 * h)
        an = float(grad.reshape(-1)[i])
        tol = max(rel * max(abs(an), abs(fd)), abs_floor)
        assert abs(an - fd) <= tol, (
            f"gradient mismatch at flat index {i}: analytic {an:.8g} vs fd {fd:.8g}"
        )
