"""A few minutes with the tape: gradients, a finite-difference check, Adam.

    python demos/autodiff_tour.py
"""

import numpy as np

from phyloproto import tape as T
from phyloproto.losses import tanh_loss


def main():
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.random((4, 3)), requires_grad=True)
    with T.Tape() as tape:
        loss = tanh_loss(x)
        grads = tape.backward(loss)
    print(f"tanh presence loss {loss.item():.5f}")
    print("gradient:\n", grads[x].round(4))

    # the same gradient by central differences
    step, numeric = 1e-6, np.zeros_like(x.data)
    with T.no_record():
        for idx in np.ndindex(x.shape):
            hi, lo = x.data.copy(), x.data.copy()
            hi[idx] += step
            lo[idx] -= step
            numeric[idx] = (tanh_loss(T.Tensor(hi)).item() - tanh_loss(T.Tensor(lo)).item()) / (2 * step)
    print(f"max |analytic - numeric| = {np.abs(grads[x] - numeric).max():.2e}")

    # drive the loss down with Adam
    state = T.AdamState()
    for _ in range(200):
        with T.Tape() as tape:
            g = tape.backward(tanh_loss(x))
        T.adam_step({"x": x}, {"x": g[x]}, state, lr=0.05)
    print(f"after 200 Adam steps: {tanh_loss(x).item():.2e}")


if __name__ == "__main__":
    main()
