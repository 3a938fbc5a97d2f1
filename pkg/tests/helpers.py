"""Shared test utilities: float64 model twins and finite-difference oracles."""

from __future__ import annotations

import numpy as np

from batchcl.model import ResidualClassifier


def float64_twin(model: ResidualClassifier) -> ResidualClassifier:
    """Copy of a model with all state promoted to float64 (for derivative checks)."""
    m = model.copy()
    m.params = {k: v.astype(np.float64) for k, v in m.params.items()}
    m.stats = {k: v.astype(np.float64) for k, v in m.stats.items()}
    return m


def jitter_params(model: ResidualClassifier, seed: int, scale: float = 0.1) -> None:
    """Randomize all parameters slightly.

    Freshly built models have zero biases/betas, which parks whole dead rows
    exactly on the ReLU kink where central differences straddle the
    non-differentiability; jitter moves every pre-activation off the kink.
    """
    rng = np.random.default_rng(seed)
    for v in model.params.values():
        v += (rng.standard_normal(v.shape) * scale).astype(v.dtype)


def finite_diff_params(
    build_loss, params: dict[str, np.ndarray], h: float = 1e-4
) -> dict[str, np.ndarray]:
    """Central differences of ``build_loss()`` w.r.t. every entry of ``params``.

    ``build_loss`` must read the arrays in ``params`` afresh on each call
    (re-running the forward pass); the arrays are perturbed in place.
    """
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = build_loss()
            flat[i] = orig - h
            lo = build_loss()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
        grads[name] = g
    return grads


def assert_matches_fd(analytic, numeric, rel_tol: float = 1e-4):
    """Relative-error comparison with a unit floor (matches the oracle contract)."""
    for name in numeric:
        a, n = analytic[name], numeric[name]
        scale = max(np.abs(n).max(), 1.0)
        np.testing.assert_allclose(
            a, n, atol=rel_tol * scale, rtol=rel_tol,
            err_msg=f"gradient mismatch for {name}",
        )
