"""
Reverse-mode differentiation on a tape
======================================

Every operation on a ``Graph`` records its inputs and a vector-Jacobian
product. ``backward`` walks the tape once in reverse.
"""
import numpy as np

from datseg.autodiff import Graph

rng = np.random.default_rng(0)
x = rng.normal(size=(4, 3))
w = rng.normal(size=(3, 2))

g = Graph()
xn, wn = g.leaf(x), g.leaf(w)
logits = g.matmul(g.relu(xn), wn)
loss = g.cross_entropy_sparse(logits, [0, 2], [1, 0])
grads = g.backward(loss)
print("loss", loss.item())
print("dL/dw\n", grads[wn.id])

# the same derivative by central differences
h = 1e-5
num = np.zeros_like(w)
for i in np.ndindex(w.shape):
    for sign in (1, -1):
        wp = w.copy()
        wp[i] += sign * h
        gg = Graph()
        out = gg.matmul(gg.relu(gg.constant(x)), gg.constant(wp))
        num[i] += sign * gg.cross_entropy_sparse(out, [0, 2], [1, 0]).item() / (2 * h)
print("max abs difference to finite differences:", np.abs(num - grads[wn.id]).max())

# detach stops the gradient but keeps the value
g = Graph()
a = g.leaf(np.array([[3.0]]))
prod = g.mul(g.detach(a), a)
print("d(detach(a) * a)/da =", g.backward(g.sum(prod))[a.id].item(), "(the value of a, not 2a)")
