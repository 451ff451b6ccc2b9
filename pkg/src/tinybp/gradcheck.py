"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class GradCheckReport:
    max_rel: float
    eps: float
    per_tensor: dict = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel < tol


def _loss_of(out_data: np.ndarray) -> float:
    # fixed scalarization: 0.5 * sum(y^2); smooth and biases nothing to zero
    return 0.5 * float((out_data * out_data).sum())


def fd_check(forward, tensors: dict[str, Tensor], eps: float = 1e-4,
             include=None) -> GradCheckReport:
    """Compare analytic grads of 0.5*||forward()||^2 against central differences.

    forward: callable returning the output Tensor (rebuilds the tape each call).
    tensors: name -> leaf Tensor to check (each must have requires_grad).
    """
    for t in tensors.values():
        t.grad = None
    out = forward()
    out.backward(out.data.copy())  # d(0.5*sum(y^2))/dy = y
    analytic = {}
    for name, t in tensors.items():
        if include is not None and name not in include:
            continue
        if t.grad is None:
            raise RuntimeError(f"tensor {name!r} received no gradient")
        if not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite gradient on {name!r}")
        analytic[name] = t.grad.copy()

    per_tensor = {}
    max_rel = 0.0
    for name, t in tensors.items():
        if name not in analytic:
            continue
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = _loss_of(forward().data)
            flat[i] = orig - eps
            lo = _loss_of(forward().data)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)
        a = analytic[name]
        # floor the denominator so exactly-zero gradients (e.g. a conv bias
        # that a following norm layer cancels) are compared absolutely
        denom = max(np.abs(a).max(), np.abs(num).max(), 1e-6)
        rel = float(np.abs(a - num).max() / denom)
        per_tensor[name] = rel
        max_rel = max(max_rel, rel)
    return GradCheckReport(max_rel=max_rel, eps=eps, per_tensor=per_tensor)


def grad_check(graph, x: np.ndarray, tol: float = 1e-4, eps: float = 1e-4,
               training: bool = False) -> GradCheckReport:
    """Finite-difference check of every parameter (and the input) of a graph."""
    xt = Tensor(x, requires_grad=True)
    tensors = dict(graph.params())
    tensors["__input__"] = xt
    report = fd_check(lambda: graph.forward(xt, training=training), tensors, eps=eps)
    if not report.ok(tol):
        worst = max(report.per_tensor, key=report.per_tensor.get)
        raise AssertionError(
            f"gradient check failed: max rel {report.max_rel:.3e} >= {tol:g} (worst: {worst})")
    return report
