"""Named parameter sets, gradient-descent rules, and their checkpoints."""

from __future__ import annotations

import hashlib

import numpy as np

from . import checkpoint
from .errors import InvalidArgument


class ParamSet(dict):
    """Ordered ``name -> float64 array`` map; the unit every trainer updates."""

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self[name]).tobytes())
        return h.hexdigest()

    def max_abs_diff(self, other) -> float:
        return max(float(np.max(np.abs(self[k] - other[k]), initial=0.0)) for k in self)

    def n_values(self) -> int:
        return sum(v.size for v in self.values())


def _check_aligned(params, grads):
    missing = [name for name in params if name not in grads]
    if missing:
        raise InvalidArgument(f"no gradient for parameter(s): {', '.join(missing)}")
    for name, value in params.items():
        if np.shape(grads[name]) != value.shape:
            raise InvalidArgument(
                f"gradient for {name!r} has shape {np.shape(grads[name])}, expected {value.shape}")


def sgd_step(params: ParamSet, grads, lr: float) -> ParamSet:
    """``theta - lr * grad``, returned as a new ParamSet."""
    _check_aligned(params, grads)
    if lr == 0:
        return params.copy()
    return ParamSet({k: v - lr * grads[k] for k, v in params.items()})


def add_grads(total, grads):
    if total is None:
        return {k: np.array(g, copy=True) for k, g in grads.items()}
    for k, g in grads.items():
        total[k] += g
    return total


class SGD:
    def __init__(self, lr):
        self.lr = lr
        self.step_count = 0

    def step(self, params, grads):
        self.step_count += 1
        return sgd_step(params, grads, self.lr)

    def state(self):
        return {}, {"rule": "sgd", "lr": self.lr, "step": self.step_count}

    def load_state(self, arrays, meta):
        self.step_count = meta["step"]


class Adam:
    """Adam with bias correction; moment buffers are keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params, grads):
        return adam_step(params, grads, self)

    def state(self):
        arrays = {f"adam.m.{k}": v for k, v in self.m.items()}
        arrays.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return arrays, {"rule": "adam", "lr": self.lr, "beta1": self.beta1,
                        "beta2": self.beta2, "eps": self.eps, "step": self.step_count}

    def load_state(self, arrays, meta):
        self.step_count = meta["step"]
        self.m = {k[len("adam.m."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}


def adam_step(params: ParamSet, grads, state: Adam, lr=None) -> ParamSet:
    _check_aligned(params, grads)
    lr = state.lr if lr is None else lr
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    out = ParamSet()
    for k, value in params.items():
        g = grads[k]
        m = state.m.get(k, np.zeros_like(value))
        v = state.v.get(k, np.zeros_like(value))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        out[k] = value.copy() if lr == 0 else value - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def make_optimizer(rule, lr):
    if rule == "sgd":
        return SGD(lr)
    if rule == "adam":
        return Adam(lr)
    raise InvalidArgument(f"unknown optimizer {rule!r} (expected 'sgd' or 'adam')")


def save_params(path, params: ParamSet, *, kind, seed=None, step=None, extra=None, optimizer=None):
    arrays = {f"param.{k}": v for k, v in params.items()}
    extra = dict(extra or {})
    extra["param_order"] = list(params)
    if optimizer is not None:
        opt_arrays, opt_meta = optimizer.state()
        arrays.update(opt_arrays)
        extra["optimizer"] = opt_meta
    return checkpoint.save(path, arrays, kind=kind, seed=seed, step=step, extra=extra)


def load_params(path, kind=None):
    """Return ``(params, meta, optimizer_arrays)``."""
    arrays, meta = checkpoint.load(path, kind=kind)
    params = ParamSet((k, arrays[f"param.{k}"].copy()) for k in meta["extra"]["param_order"])
    opt = {k: v for k, v in arrays.items() if not k.startswith("param.")}
    return params, meta, opt
