"""Central finite-difference check of taped gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .optim import ParamStore
from .tensor import NumericalError, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], Tensor], t: Tensor, eps: float) -> np.ndarray:
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    it = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite objective while perturbing coordinate {i}")
        it[i] = (fp - fm) / (2.0 * eps)
    return out


def finite_diff_check(f: Callable[[ParamStore], Tensor], store: ParamStore, eps: float = 1e-6,
                      names: Iterable[str] | None = None, floor: float = 1e-6,
                      per_param: dict | None = None) -> float:
    """Worst relative error between backward() and central differences.

    ``f`` rebuilds the objective from ``store`` on every call. ``per_param``,
    if given, is filled with the worst error per parameter name.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    names = list(store.params) if names is None else list(names)
    store.zero_grad()
    loss = f(store)
    if not np.isfinite(loss.item()):
        raise NumericalError("objective is not finite")
    loss.backward()
    analytic = {n: (store[n].grad.copy() if store[n].grad is not None
                    else np.zeros_like(store[n].data)) for n in names}
    worst = 0.0
    for n in names:
        num = numeric_grad(lambda: f(store), store[n], eps)
        err = float(relative_error(analytic[n], num, floor).max(initial=0.0))
        if per_param is not None:
            per_param[n] = err
        worst = max(worst, err)
    store.zero_grad()
    return worst
