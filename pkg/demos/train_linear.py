"""Fit y = 2x with a single Dense(1 -> 1): forward, L1 loss, backward, SGD.

    python3 demos/train_linear.py
"""

import numpy as np

from minisol import Injected, optimize, zoo


def main(steps=100, lr=0.1):
    m = optimize(zoo.linear1_document(), cost=Injected({}, strict=False))
    x = np.linspace(-1, 1, 8).reshape(8, 1)
    best = None
    for step in range(1, steps + 1):
        trace = []
        r = m.train_step((x, 2 * x), lr, trace=trace)
        if step == 1:
            print("one step runs:", " -> ".join(trace))
        if best is None or r.loss < best[1]:
            best = (step, r.loss)
        if step % 10 == 0:
            print(f"step {step:3d}  loss {r.loss:.4f}")
    print(f"lowest loss {best[1]:.4f} at step {best[0]}")
    print("kernel", m.model["fc/kernel"].ravel(), "bias", m.model["fc/bias"])


if __name__ == "__main__":
    main()
