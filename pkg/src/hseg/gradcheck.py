"""Central finite-difference gradient checking.

The oracle perturbs float64 copies of the inputs and evaluates the scalar
function directly, so it shares no code with the tape's backward rules.
"""

import numpy as np

from hseg.tensor import Tape, Tensor


def numeric_grad(fn, arrays, index, h=1e-3, entries=None):
    """Central differences of ``fn(*tensors)`` w.r.t. ``arrays[index]``.

    ``entries`` optionally restricts the check to a list of flat indices;
    other positions are returned as NaN.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    flat = target.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    todo = range(flat.size) if entries is None else entries
    for k in todo:
        orig = flat[k]
        flat[k] = orig + h
        plus = _eval(fn, base)
        flat[k] = orig - h
        minus = _eval(fn, base)
        flat[k] = orig
        grad[k] = (plus - minus) / (2 * h)
    return grad.reshape(target.shape)


def _eval(fn, arrays):
    return float(fn(*[Tensor(a, dtype=np.float64) for a in arrays]).data.sum(dtype=np.float64))


def analytic_grads(fn, arrays, dtype=np.float64):
    leaves = [Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
    with Tape() as tape:
        tape.watch(*leaves)
        loss = fn(*leaves)
    grads = tape.backward(loss)
    return [grads[t] for t in leaves]


def max_relative_error(analytic, numeric, floor=1e-4):
    """Largest ``|a - n| / max(|a|, |n|)`` over entries where ``|g| > floor``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = ~np.isnan(n) & (np.maximum(np.abs(a), np.abs(n)) > floor)
    if not keep.any():
        return 0.0
    a, n = a[keep], n[keep]
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), np.abs(n))))


def check_gradients(fn, arrays, h=1e-3, floor=1e-4):
    """Max relative error per input between tape gradients and central differences."""
    grads = analytic_grads(fn, arrays)
    return [max_relative_error(g, numeric_grad(fn, arrays, i, h=h), floor)
            for i, g in enumerate(grads)]
