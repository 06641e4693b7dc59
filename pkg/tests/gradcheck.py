"""Central finite-difference gradient checking.

Graphs are rebuilt in float64 for the check so the difference quotient is
trustworthy at step 1e-3; the analytic gradient comes from the same graph.
"""

from __future__ import annotations

import numpy as np

from contalign.nn import Tensor


def finite_difference(fn, arrays, index, step=1e-3):
    """Numerical gradient of scalar fn(*tensors) w.r.t. arrays[index]."""
    base = [a.astype(np.float64).copy() for a in arrays]
    grad = np.zeros_like(base[index])
    flat = base[index].reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(*[Tensor(a, dtype=np.float64) for a in base]).item()
        flat[i] = orig - step
        lo = fn(*[Tensor(a, dtype=np.float64) for a in base]).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def check_gradients(fn, arrays, wrt=None, step=1e-3, rel_tol=1e-4):
    """Assert analytic gradients match central differences.

    fn maps Tensors to a scalar Tensor; `wrt` selects which inputs to check
    (default: all). Relative error is measured norm-wise per input.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = fn(*tensors)
    loss.backward()
    indices = range(len(arrays)) if wrt is None else wrt
    for idx in indices:
        analytic = tensors[idx].grad
        assert analytic is not None, f"input {idx} received no gradient"
        numeric = finite_difference(fn, arrays, idx, step=step)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-10)
        rel = np.linalg.norm(analytic - numeric) / denom
        assert rel < rel_tol, (
            f"gradient mismatch for input {idx}: relative error {rel:.3e}"
        )
