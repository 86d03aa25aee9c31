"""Central finite-difference gradient checking against the tape."""
from __future__ import annotations

import numpy as np

from cycleformer.autodiff import Tape, Tensor, backward


def numeric_grad(f, param: Tensor, entries, h: float = 1e-5) -> dict[tuple, float]:
    """Central differences of scalar-valued f() w.r.t. selected param entries."""
    out: dict[tuple, float] = {}
    flat = param.data.reshape(-1)
    for idx in entries:
        orig = flat[idx]
        flat[idx] = orig + h
        up = float(f().data)
        flat[idx] = orig - h
        down = float(f().data)
        flat[idx] = orig
        out[idx] = (up - down) / (2.0 * h)
    return out


def check_grads(
    f,
    params: dict[str, Tensor],
    rng: np.random.Generator,
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    max_entries_per_param: int = 12,
) -> list[str]:
    """Compare tape gradients of scalar f() with finite differences.

    Parameters must be float64. Returns a list of human-readable failure
    strings, empty on success, so callers can assert on the whole batch.
    """
    for name, p in params.items():
        assert p.data.dtype == np.float64, f"{name}: gradcheck requires float64"
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    for p in params.values():
        p.grad = None

    failures: list[str] = []
    for name, p in params.items():
        n = p.data.size
        if n <= max_entries_per_param:
            entries = list(range(n))
        else:
            entries = sorted(rng.choice(n, size=max_entries_per_param, replace=False).tolist())
        numeric = numeric_grad(f, p, entries, h=h)
        a_flat = analytic[name].reshape(-1)
        for idx, num in numeric.items():
            ana = float(a_flat[idx])
            err = abs(ana - num)
            if err > atol and err > rtol * max(abs(ana), abs(num)):
                failures.append(
                    f"{name}[{idx}]: analytic {ana:.8e} vs numeric {num:.8e} (abs err {err:.2e})"
                )
    return failures
