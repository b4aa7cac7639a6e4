"""Walk through the differentiation core: tensors, tapes, gradient
checking, and Adam fitting a tiny nonlinear regression.

Run:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from batchrx.autodiff import Adam, Tape, Tensor, grad_check
from batchrx import nn

# ----------------------------------------------------------------------
# 1. A tape records every primitive you apply; backward() fills .grad.
# ----------------------------------------------------------------------
tape = Tape()
x = Tensor(np.array([[1.0, 2.0, 3.0]]), name="x")
loss = tape.sum(tape.square(x))
tape.backward(loss)
print("d/dx sum(x^2) at [1,2,3]  ->", x.grad, "(expect [2,4,6])")

# ----------------------------------------------------------------------
# 2. Central-difference gradient checking is the house oracle: any scalar
#    function of tensors can be verified to ~1e-10 relative error.
# ----------------------------------------------------------------------
rng = np.random.default_rng(0)
err = grad_check(
    lambda t, xs: t.sum(t.tanh(t.matmul(xs[0], xs[1]))),
    [rng.normal(size=(2, 3)), rng.normal(size=(3, 2))],
)
print(f"tanh(matmul) chain grad-check error: {err:.2e}")

# ----------------------------------------------------------------------
# 3. Fit y = tanh(w x + b) with Adam: loss should fall steadily.
# ----------------------------------------------------------------------
true_w = np.array([[1.5], [-0.7]])
xs = rng.normal(size=(64, 2))
ys = np.tanh(xs @ true_w + 0.3)

layer = nn.make_dense(rng, 2, 1, "tanh")
opt = Adam([layer.w, layer.b], lr=0.05)
for step in range(200):
    tape = Tape()
    pred = layer.forward(tape, Tensor(xs))
    loss = tape.mean(tape.square(tape.sub(pred, Tensor(ys))))
    tape.backward(loss)
    opt.step()
    if step % 50 == 0 or step == 199:
        print(f"  step {step:3d}  mse {loss.item():.6f}")
print("recovered w:", layer.w.values.ravel(), " b:", layer.b.values.ravel())
print("true      w:", true_w.ravel(), " b: 0.3")
