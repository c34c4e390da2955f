# The autodiff engine by hand: a tiny conv -> batch norm -> leaky ReLU -> BCE
# graph, its analytic gradient against central differences, and a short
# Adam fit.
import numpy as np

from jsynth import tensor as T

rng = np.random.default_rng(0)
x = T.Tensor(rng.normal(size=(2, 1, 6, 6)))
w = T.Tensor(rng.normal(size=(3, 1, 3, 3)) * 0.5, requires_grad=True)
b = T.Tensor(np.zeros(3), requires_grad=True)
head = T.Tensor(rng.normal(size=(1, 3, 1, 1)), requires_grad=True)
target = (rng.random((2, 1, 6, 6)) < 0.3).astype(float)
bn = T.BatchNormState(3)


def loss_fn():
    h = T.conv2d(x, w, b, padding=1)
    h = T.batch_norm2d(h, T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), bn, training=True, update_stats=False)
    h = T.leaky_relu(h)
    return T.bce_loss(T.sigmoid(T.conv2d(h, head)), target)


loss = loss_fn()
for p in (w, b, head):
    p.zero_grad()
T.backward(loss)
print("loss", loss.item())

# central differences on every weight of the 3x3 kernel
num = T.numerical_grad(lambda: loss_fn().item(), w.data)
print("max relative error, conv weight: %.2e" % T.max_relative_error(w.grad, num))
num = T.numerical_grad(lambda: loss_fn().item(), head.data)
print("max relative error, 1x1 head:    %.2e" % T.max_relative_error(head.grad, num))

# a few Adam steps drive the loss down
opt = T.Adam([w, b, head], lr=0.05)
for step in range(60):
    for p in (w, b, head):
        p.zero_grad()
    loss = loss_fn()
    T.backward(loss)
    T.adam_step([w, b, head], opt)
    if step % 15 == 0:
        print("step %2d  bce %.4f" % (step, loss.item()))
print("final bce %.4f" % loss_fn().item())
