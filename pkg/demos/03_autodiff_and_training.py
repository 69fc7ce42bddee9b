"""The tensor engine: reverse-mode gradients and Adam on a toy problem."""

import numpy as np

from roadflow.tensor import Parameter, Tensor, adam_step, squared_error, zero_grads

rng = np.random.default_rng(0)

# fit y = X w on random data
x = rng.standard_normal((64, 3))
w_true = np.array([[2.0], [-1.0], [0.5]])
y = x @ w_true

w = Parameter("w", np.zeros((3, 1)))
for step in range(300):
    loss = squared_error(Tensor(x) @ w.tensor, Tensor(y))
    zero_grads([w])
    loss.backward()
    adam_step([w], lr=0.05)
    if step % 100 == 0:
        print(f"step {step:3d}  loss {float(loss.data):.6f}")

print("recovered weights:", w.data.ravel())

# gradients match a hand derivative on a tiny expression
t = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
(t * t).sum().backward()
print("d/dx sum(x^2) =", t.grad, "(expected 2x)")
