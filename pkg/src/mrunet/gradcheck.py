"""Central finite-difference checks against the reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, make_node


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)`` with ``weights`` held constant."""
    val = np.asarray((out.data * weights).sum(), dtype=out.dtype)
    return make_node(val, (out,), lambda g: (g * weights,))


def numeric_grad(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], i: int, h: float) -> np.ndarray:
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(arrays)
        x[idx] = orig - h
        fm = f(arrays)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error relative to the larger magnitude, floored at 1e-3 of the gradient scale."""
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    floor = 1e-3 * scale
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0, h: float = 1e-6,
                    wrt: Sequence[int] | None = None) -> list[float]:
    """Compare analytic and central-difference gradients of ``fn`` for each input.

    Non-scalar outputs are reduced with a fixed random projection. Returns the
    relative error per checked input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    # separate stream so the projection never coincides with inputs drawn from the same seed
    rng = np.random.default_rng([seed, 0x9E37])
    probe = fn(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(probe.shape) if probe.data.size > 1 else None

    def scalar(out: Tensor) -> Tensor:
        return _project(out, weights) if weights is not None else out

    tensors = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    scalar(fn(*tensors)).backward()

    def f(arrs):
        return float(scalar(fn(*[Tensor(a) for a in arrs])).data)

    errors = []
    for i in wrt:
        num = numeric_grad(f, arrays, i, h)
        ana = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        errors.append(relative_error(ana, num))
    return errors
