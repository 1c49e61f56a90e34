"""The reverse-mode autodiff engine underneath every loss.

Builds a small computation graph, pulls gradients back through it,
verifies them against finite differences, and runs a few optimizer steps.
"""
import numpy as np

from ptta import autodiff as ad
from ptta.autodiff import Tensor, backward, grad_check
from ptta.params import ParamStore, adam_step

rng = np.random.default_rng(1)

# Tensors record the graph; backward() returns grads keyed by id(tensor).
A = np.array([[2.0, 0.0], [1.0, 3.0]])
x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
y = ad.matmul(Tensor(A), ad.reshape(x, (2, 1)))
loss = ad.reduce_sum(ad.mul(y, y))  # ||A x||^2
grads = backward(loss, wrt=[x])
print("analytic gradient of ||Ax||^2:", grads[id(x)])
print("closed form 2 A^T A x:        ", 2 * A.T @ A @ x.data)

# grad_check compares reverse mode against central differences.
def f(leaves):
    z = ad.sigmoid(ad.matmul(leaves[0], leaves[1]))
    return ad.reduce_mean(ad.mul(z, z))

ok = grad_check(f, [rng.normal(size=(4, 3)), rng.normal(size=(3, 2))])
print("finite-difference check on a sigmoid MLP layer:", "passed" if ok else "FAILED")

# ParamStore holds named weights; adam_step consumes backward()'s grads.
store = ParamStore()
store.add("w", rng.normal(size=(5,)))
target = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
for step in range(200):
    w = store["w"]
    d = ad.add(w, Tensor(-target))
    mse = ad.reduce_mean(ad.mul(d, d))
    adam_step(store, backward(mse, wrt=[w]), lr=0.1)
print(f"after 200 Adam steps, max |w - target| ="
      f" {np.abs(store['w'].data - target).max():.2e}")
