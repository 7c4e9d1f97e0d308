"""Central finite-difference gradient checking.

The analytic gradient is produced by the tape at the dtype under test
(32-bit by default). The difference quotient is evaluated at 64-bit so
the oracle itself contributes no roundoff at the tolerance being
asserted; a pure 64-bit mode tightens the tolerance to 1e-5.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward, precision


def _inf_norm(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


def finite_difference(build_loss, arrays: list[np.ndarray], index: int, entry, h: float) -> float:
    """Central difference of the loss w.r.t. one entry of arrays[index]."""
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[index][entry] += h
    minus[index][entry] -= h
    with precision(np.float64):
        lp = build_loss([Tensor(a) for a in plus]).item()
        lm = build_loss([Tensor(a) for a in minus]).item()
    return (lp - lm) / (2.0 * h)


def check_param_gradients(
    loss_fn,
    named: dict,
    rel_tol: float = 1e-3,
    max_entries: int = 16,
    h: float = 1e-4,
    rng: np.random.Generator | None = None,
    require_all: bool = True,
) -> float:
    """Gradient-check a loss against parameters held inside model objects.

    `loss_fn()` must rebuild the forward pass from the tensors in
    `named` each call (any sampling inside must be frozen by the
    caller). Analytic gradients run at the current default dtype; the
    difference quotient runs with the parameters upcast to 64-bit.
    """
    rng = rng or np.random.default_rng(0)
    originals = {k: t.data.copy() for k, t in named.items()}
    for t in named.values():
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = {}
    for k, t in named.items():
        if require_all:
            assert t.grad is not None, f"no gradient reached parameter '{k}'"
        analytic[k] = None if t.grad is None else np.asarray(t.grad, dtype=np.float64)
    # Tensors whose true gradient is exactly zero (e.g. a key-projection
    # bias, cancelled by softmax) carry only roundoff; comparing them
    # against their own noise floor is meaningless, so the tolerance is
    # anchored to the gradient scale of the whole parameter set.
    global_scale = max((_inf_norm(a) for a in analytic.values() if a is not None), default=0.0)
    worst = 0.0
    try:
        for t in named.values():
            t.data = t.data.astype(np.float64)
        with precision(np.float64):
            for k, t in named.items():
                if analytic[k] is None:
                    continue
                size = t.data.size
                if size <= max_entries:
                    flat = np.arange(size)
                else:
                    flat = rng.choice(size, size=max_entries, replace=False)
                numeric = {}
                for j in flat:
                    entry = np.unravel_index(j, t.data.shape)
                    x0 = t.data[entry]
                    step = h * max(1.0, abs(x0))
                    t.data[entry] = x0 + step
                    lp = loss_fn().item()
                    t.data[entry] = x0 - step
                    lm = loss_fn().item()
                    t.data[entry] = x0
                    numeric[entry] = (lp - lm) / (2.0 * step)
                scale = max(
                    _inf_norm(analytic[k]),
                    max(abs(v) for v in numeric.values()),
                    1e-2 * global_scale,
                    1e-8,
                )
                for entry, fd in numeric.items():
                    err = abs(analytic[k][entry] - fd) / scale
                    worst = max(worst, err)
                    assert err <= rel_tol, (
                        f"gradient mismatch for '{k}' at {entry}: "
                        f"analytic {analytic[k][entry]:.6g} vs numeric {fd:.6g} (rel {err:.2e})"
                    )
    finally:
        for k, t in named.items():
            t.data = originals[k]
            t.grad = None
    return worst


def check_gradients(
    build_loss,
    arrays: list[np.ndarray],
    rel_tol: float = 1e-3,
    dtype=np.float32,
    max_entries: int = 32,
    h: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> float:
    """Assert tape gradients match central differences; returns max rel error.

    `build_loss` maps a list of Tensors (same order as `arrays`) to a
    scalar Tensor and must be re-entrant: it is called once per
    perturbed evaluation. Entries are subsampled for large arrays.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with precision(dtype):
        params = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            loss = build_loss(params)
        backward(loss, tape)
    worst = 0.0
    for i, (arr, p) in enumerate(zip(arrays, params)):
        assert p.grad is not None, f"parameter {i} received no gradient"
        analytic = np.asarray(p.grad, dtype=np.float64)
        flat = np.arange(arr.size)
        if arr.size > max_entries:
            flat = rng.choice(arr.size, size=max_entries, replace=False)
        numeric = {}
        for j in flat:
            entry = np.unravel_index(j, arr.shape)
            step = h * max(1.0, abs(arr[entry]))
            numeric[entry] = finite_difference(build_loss, arrays, i, entry, step)
        scale = max(
            _inf_norm(analytic), max(abs(v) for v in numeric.values()), 1e-8
        )
        for entry, fd in numeric.items():
            err = abs(analytic[entry] - fd) / scale
            worst = max(worst, err)
            assert err <= rel_tol, (
                f"gradient mismatch for parameter {i} at {entry}: "
                f"analytic {analytic[entry]:.6g} vs numeric {fd:.6g} (rel {err:.2e})"
            )
    return worst
