"""Finite-difference verification of tape gradients.

Checks run in float64 with central differences so the comparison tolerance
can sit well below float32 noise.  The function under test maps a list of
Tensors to one output Tensor; a fixed random cotangent turns any output
shape into a scalar objective so one sweep checks the full Jacobian action.
"""

from __future__ import annotations

import numpy as np

from .engine import NumericsError, Tape, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def grad_check(fn, input_shapes, seed: int = 0, params=(), step: float = DEFAULT_STEP,
               tol: float = DEFAULT_TOL) -> float:
    """Compare analytic and numeric gradients of ``fn``.

    fn: callable taking len(input_shapes) Tensors, returning one Tensor.
    input_shapes: list of shapes for float64 inputs drawn N(0, 1).
    params: extra Parameters fn closes over; checked alongside the inputs.
    Returns the worst relative error; raises NumericsError above ``tol``
    or on any non-finite gradient, naming the offending tensor.
    """
    rng = np.random.default_rng(seed)
    inputs = [Tensor(rng.standard_normal(s).astype(np.float64), requires_grad=True)
              for s in input_shapes]
    leaves = list(inputs) + list(params)
    saved = [p.data.copy() for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = np.zeros_like(p.data)

        tape = Tape()
        with tape:
            out = fn(*inputs)
        cot = rng.standard_normal(out.data.shape)

        # scalarize: backward of sum(cot * out) seeds out.grad with cot
        tape2 = Tape()
        with tape2:
            out2 = fn(*inputs)
            from . import ops

            loss = ops.sum_(ops.mul(out2, Tensor(cot)))
        for leaf in leaves:
            leaf.grad = np.zeros_like(leaf.data)
            leaf.grad_owned = True
        tape2.backward(loss)

        worst = 0.0
        worst_name = ""
        for j, leaf in enumerate(leaves):
            name = getattr(leaf, "name", f"input{j}")
            if leaf.grad is None or not np.all(np.isfinite(leaf.grad)):
                raise NumericsError(f"non-finite or missing analytic gradient for {name}")
            flat = leaf.data.reshape(-1)
            gflat = leaf.grad.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                f_plus = float((fn(*inputs).data * cot).sum())
                flat[k] = orig - step
                f_minus = float((fn(*inputs).data * cot).sum())
                flat[k] = orig
                num = (f_plus - f_minus) / (2.0 * step)
                if not np.isfinite(num):
                    raise NumericsError(f"non-finite numeric gradient for {name}[{k}]")
                rel = abs(gflat[k] - num) / max(abs(num), 1e-8)
                if rel > worst:
                    worst, worst_name = rel, f"{name}[{k}]"
        if worst > tol:
            raise NumericsError(f"gradient mismatch at {worst_name}: rel err {worst:.3e} > {tol:.1e}")
        return worst
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.grad = np.zeros_like(d)
