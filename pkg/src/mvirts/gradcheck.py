"""Central-difference gradient oracle.

``finite_diff_grad`` perturbs one coordinate at a time. The stacked variant
evaluates many perturbations in one forward call by giving the perturbed
parameter an extra leading axis; the objective must then return one loss per
stacked copy. Both compute the same quantity, (f(θ+h) − f(θ−h)) / 2h.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


def finite_diff_grad(
    f: Callable[[Mapping[str, Tensor]], float],
    params: Mapping[str, Tensor],
    name: str,
    h: float = 1e-5,
) -> np.ndarray:
    if h <= 0:
        raise ValueError("h must be positive")
    p = params[name]
    grad = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(params))
        flat[i] = orig - h
        fm = float(f(params))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_grad_stacked(
    f: Callable[[Mapping[str, Tensor]], np.ndarray],
    params: Mapping[str, Tensor],
    name: str,
    h: float = 1e-5,
    chunk: int = 128,
    coords: np.ndarray | None = None,
    dtype=np.float64,
) -> np.ndarray:
    """Same as :func:`finite_diff_grad`, ``2 * chunk`` perturbations per call.

    ``coords`` restricts the evaluation to some flat indices (others are 0).
    With ``dtype=np.longdouble`` every parameter is promoted first, so the
    whole forward runs in extended precision.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if dtype != np.float64:
        params = {k: Tensor(v.data.astype(dtype)) for k, v in params.items()}
    base = params[name].data
    n = base.size
    grad = np.zeros(n, dtype=dtype)
    todo = np.arange(n) if coords is None else np.asarray(coords, dtype=np.int64)
    step = dtype(h)
    for lo in range(0, len(todo), chunk):
        idx = todo[lo:lo + chunk]
        k = len(idx)
        stack = np.broadcast_to(base.reshape(-1), (2 * k, n)).copy()
        stack[np.arange(k), idx] += step
        stack[k + np.arange(k), idx] -= step
        trial = dict(params)
        trial[name] = Tensor(stack.reshape((2 * k,) + base.shape))
        vals = np.asarray(f(trial)).reshape(-1)
        if vals.shape != (2 * k,):
            raise ValueError(f"stacked objective returned shape {vals.shape}, want {(2 * k,)}")
        grad[idx] = (vals[:k] - vals[k:]) / (2 * step)
    return grad.reshape(base.shape).astype(np.float64)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Worst elementwise |a − n| / max(|a|, |n|) over coordinates with |a| > floor."""
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    sel = np.abs(a) > floor
    if not sel.any():
        return 0.0
    return float(np.max(np.abs(a[sel] - n[sel]) / np.maximum(np.abs(a[sel]), np.abs(n[sel]))))


def check_model_gradients(
    cfg,
    seed: int = 0,
    n_samples: int = 4,
    h: float = 1e-5,
    floor: float = 1e-8,
    refine_below: float = 1e-6,
    params=None,
) -> dict[str, float]:
    """Worst relative error per parameter tensor, autodiff vs central differences.

    The loss is unweighted cross-entropy on random masked inputs. float64
    central differences carry ~1e-12 absolute noise at h=1e-5, so coordinates
    with ``floor < |grad| < refine_below`` are re-differenced with the forward
    pass in extended precision.
    """
    from . import tensor as T
    from .model import forward_batch, init_params

    rng = np.random.Generator(np.random.Philox(seed + 7919))
    mask = (rng.random((n_samples, cfg.length, cfg.n_sensors)) < 0.6).astype(np.float64)
    values = rng.standard_normal(mask.shape) * mask
    labels = np.arange(n_samples) % cfg.num_classes
    params = init_params(cfg, seed) if params is None else params
    for p in params.values():
        p.grad = None
    with T.Tape() as tape:
        loss = T.cross_entropy(forward_batch(values, mask, params, cfg), labels)
    tape.backward(loss, list(params.values()))

    def objective(dtype):
        v, m = values[None].astype(dtype), mask[None].astype(dtype)
        return lambda trial: T.cross_entropy(forward_batch(v, m, trial, cfg), labels).data

    report = {}
    for name, p in params.items():
        numeric = finite_diff_grad_stacked(objective(np.float64), params, name, h=h)
        g = np.abs(p.grad.reshape(-1))
        small = np.flatnonzero((g > floor) & (g < refine_below))
        if small.size:
            fine = finite_diff_grad_stacked(
                objective(np.longdouble), params, name, h=h, coords=small, dtype=np.longdouble
            )
            numeric.reshape(-1)[small] = fine.reshape(-1)[small]
        report[name] = relative_error(p.grad, numeric, floor)
    return report


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    from . import tensor as T

    def r(*shape):
        return rng.standard_normal(shape)

    labels = np.array([0, 2, 1])
    return {
        "add": (lambda a, b: T.add(a, b), [r(3, 4), r(4)]),
        "mul": (lambda a, b: T.mul(a, b), [r(3, 4), r(3, 1)]),
        "matmul": (lambda a, b: T.matmul(a, b), [r(2, 3, 4), r(4, 5)]),
        "tanh": (T.tanh, [r(3, 4)]),
        "sigmoid": (T.sigmoid, [r(3, 4)]),
        "exp": (T.exp, [r(3, 4)]),
        "gelu": (T.gelu, [r(3, 4)]),
        "gated_activation": (lambda x: T.gated_activation(x, 0.3), [r(3, 4)]),
        "softmax": (T.softmax, [r(3, 5)]),
        "log_softmax": (T.log_softmax, [r(3, 5)]),
        "layer_norm": (T.layer_norm, [r(3, 6), 1.0 + r(6), r(6)]),
        "dilated_conv1d": (lambda x, w, b: T.dilated_conv1d(x, w, 2, b), [r(2, 3, 7), r(4, 3, 3), r(4)]),
        "concat_rows": (lambda a, b: T.concat_rows([a, b]), [r(2, 3), r(4, 3)]),
        "split_rows": (lambda x: T.mul(T.split_rows(x, [2, 3])[1], 2.0), [r(5, 3)]),
        "swapaxes": (T.swapaxes, [r(2, 3, 4)]),
        "mean": (lambda x: T.mean(x, axis=0), [r(3, 4)]),
        "cross_entropy": (lambda z: T.cross_entropy(z, labels), [r(3, 4)]),
    }


def check_ops(seed: int = 0, h: float = 1e-6) -> dict[str, float]:
    """Worst relative error of every differentiable op's backward rule.

    Each op is wrapped as ``sum(op(inputs) * W)`` for a fixed random ``W`` and
    differenced one coordinate at a time.
    """
    from . import tensor as T

    rng = np.random.Generator(np.random.Philox(seed))
    report = {}
    for op, (fn, arrays) in _op_cases(rng).items():
        inputs = {f"x{i}": Tensor(a.copy(), requires_grad=True) for i, a in enumerate(arrays)}
        out_shape = fn(*inputs.values()).shape
        weight = rng.standard_normal(out_shape)

        def loss(ins):
            return T.sum(T.mul(fn(*ins.values()), weight))

        with T.Tape() as tape:
            value = loss(inputs)
        tape.backward(value, list(inputs.values()))
        worst = 0.0
        for name, t in inputs.items():
            numeric = finite_diff_grad(lambda ins: loss(ins).item(), inputs, name, h=h)
            worst = max(worst, relative_error(t.grad, numeric))
        report[op] = worst
    return report


def gradcheck_configurations(base=None) -> list[tuple[str, object]]:
    """Every variant and ablation row, merged where the forward pass is identical.

    ``ir_mask`` only matters through ``uses_gate``, so configs are keyed on that
    instead; e.g. the full row equals v4 and the mask row equals v2.
    """
    from .model import ABLATION_ROWS, VARIANTS, ModelConfig, ablation_config, toy_config

    base = toy_config() if base is None else base
    named = {v: ModelConfig.from_dict({**base.to_dict(), "variant": v}) for v in VARIANTS}
    named.update({row: ablation_config(base, row) for row in ABLATION_ROWS})
    groups: dict[str, list] = {}
    for name, cfg in named.items():
        key = {**cfg.to_dict(), "ir_mask": cfg.uses_gate}
        groups.setdefault(str(sorted(key.items())), []).append((name, cfg))
    return [("=".join(n for n, _ in group), group[0][1]) for group in groups.values()]
