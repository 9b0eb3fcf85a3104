"""A tour of the numpy autodiff core: tape, gradients, GRU, Adam, checkpoints."""

import tempfile
from pathlib import Path

import numpy as np

import lexa.ndgrad as nd
from lexa.ndgrad import GRUCell, Tape, Tensor, backward, grad_check, gru_cell

rng = np.random.default_rng(0)

# record a small graph and pull gradients back through it
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
with Tape() as tape:
    loss = nd.mean(nd.square(nd.tanh(nd.matmul(x, w))))
    backward(loss, tape)
print("loss", float(loss.data))
print("dL/dw\n", w.grad)

# the same gradient by central differences
print("grad_check rel err", grad_check(lambda ts: nd.mean(nd.square(nd.tanh(nd.matmul(*ts)))), [x, w]))

# a GRU cell unrolled for a few steps
cell = GRUCell(rng, 3, 5)
h = Tensor(np.zeros((4, 5)))
for t in range(3):
    h = gru_cell(h, Tensor(rng.normal(size=(4, 3))), cell)
print("h after 3 steps", h.data.round(3)[0])

# Gaussian math: KL(N(0,1) || N(1,1)) = 0.5
kl = nd.kl_diag_gauss(Tensor([[0.0]]), Tensor([[1.0]]), Tensor([[1.0]]), Tensor([[1.0]]))
print("KL", float(kl.data[0]))

# fit y = 2x - 1 with Adam
lin = nd.Dense(rng, 1, 1)
lin.assign_names("lin")
opt = nd.Adam(lin.parameters(), lr=0.05)
xs = rng.uniform(-1, 1, (64, 1))
for step in range(300):
    opt.zero_grad()
    with Tape() as tape:
        err = nd.mean(nd.square(nd.sub(lin(Tensor(xs)), Tensor(2 * xs - 1))))
        backward(err, tape)
    opt.step()
print("fitted w, b:", float(lin.w.data[0, 0]), float(lin.b.data[0]))

# parameters and Adam moments survive a save/load round trip bit-exactly
with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "lin.ckpt"
    nd.save_parameters(path, lin.parameters(), {"note": "demo"})
    fresh = nd.Dense(np.random.default_rng(1), 1, 1)
    fresh.assign_names("lin")  # records are matched by name
    meta = nd.load_parameters(path, fresh.parameters())
    print("restored", meta["note"], fresh.w.data.tobytes() == lin.w.data.tobytes())
