"""A quick tour of the tape: record a computation, pull gradients back
through it, and check one of them against a finite difference.
"""

import numpy as np

from anchoradapt.tensor import (backward, matmul, no_grad, reduce_sum, relu,
                                softmax, take_per_row, tensor)

rng = np.random.default_rng(7)

# a two-layer scoring function, loss = sum of the picked log-probabilities
x = tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = tensor(rng.normal(size=(3, 5)) * 0.5, requires_grad=True)
labels = [0, 2, 1, 4]

logits = matmul(relu(x), w)
probs = softmax(logits)
loss = -reduce_sum(take_per_row(probs, labels))
backward(loss)

print("loss            :", loss.item())
print("dL/dw row 0     :", w.grad[0])

# finite-difference probe of one weight entry
h = 1e-6
with no_grad():
    def value(delta):
        wd = w.data.copy()
        wd[0, 0] += delta
        p = softmax(matmul(relu(tensor(x.data)), tensor(wd)))
        return -reduce_sum(take_per_row(p, labels)).item()
    fd = (value(h) - value(-h)) / (2 * h)
print("tape vs FD      :", w.grad[0, 0], "vs", fd)

# reductions use compensated summation, so cancellation cannot eat the result
spread = tensor(np.array([1e16, 1.0, -1e16]))
print("exact reduce_sum:", reduce_sum(spread).item(), "(np.sum gives",
      float(np.sum(spread.data)), ")")

# the tape is one-shot by design: rebuild the expression to differentiate again
try:
    backward(loss)
except RuntimeError as e:
    print("second backward :", e)
