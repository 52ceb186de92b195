"""Walk through the autograd core: build a graph, run the tape backward,
and confirm the analytic gradients against central finite differences.
"""

import numpy as np

from picovlm import tensor as T
from picovlm.gradcheck import finite_difference_grads, gradcheck
from picovlm.tensor import Tape, Tensor

rng = np.random.default_rng(0)

# A tensor is a NumPy array plus an optional gradient buffer.  Ops executed
# inside a Tape record how to push gradients back.
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
w = Tensor(rng.normal(size=(4, 2)), requires_grad=True, dtype=np.float64)

with Tape() as tape:
    h = T.gelu(T.matmul(x, w))
    loss = T.mean_all(T.mul(h, h))
    tape.backward(loss)

print(f"loss = {float(loss.data):.6f}")
print(f"dloss/dw row 0: {w.grad[0]}")

# Using a tensor twice accumulates, never overwrites:
with Tape() as tape:
    y = Tensor(np.array([2.0, -1.0]), requires_grad=True, dtype=np.float64)
    tape.backward(T.add(T.sum_all(y), T.sum_all(T.mul(y, y))))
print(f"grad of sum(y) + sum(y*y) at y=[2,-1]: {y.grad}  (expect [5, -1])")

# The same machinery, checked numerically.  gradcheck rebuilds the loss,
# perturbs every input coordinate by +-h, and compares.
err = gradcheck(lambda: T.mean_all(T.mul(T.gelu(T.matmul(x, w)),
                                         T.gelu(T.matmul(x, w)))), [x, w])
print(f"finite-difference max relative error: {err:.2e}  (threshold 1e-5)")

# finite_difference_grads is usable on its own for ad-hoc checks:
g = finite_difference_grads(lambda: float(np.sum(x.data ** 3)), [x])[0]
print(f"numeric d(sum x^3)/dx close to 3x^2: {np.allclose(g, 3 * x.data ** 2)}")
