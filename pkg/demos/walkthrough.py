"""Tour of the one-call surface: summary, vdims, tuning, memory, offload.

    python3 demos/walkthrough.py
"""

import pathlib

import numpy as np

from minisol import Injected, OffloadDevice, ingest, optimize, passes, schedule
from minisol.runtime import sync_stats

MODELS = pathlib.Path(__file__).resolve().parents[1] / "models"


def main():
    alex = ingest.load_model(MODELS / "alexnet.dlb.json", materialize=False)
    print(ingest.format_summary(alex))
    print(optimize(alex, cost=Injected({}, strict=False)).memory_block())

    branchy = ingest.load_model(MODELS / "branchy.json")
    print(passes.infer_vdims(branchy).render())

    # keep the batch dynamic, pin height and width to their seeds
    m = optimize(MODELS / "small_cnn.dlb.json", vdims={0: True}, cost=Injected({}, strict=False))
    tl = schedule.timeline(m.inference, align=64, extents={0: 4})
    print(schedule.memory_report(tl))

    x = np.random.default_rng(0).standard_normal((4, 8, 8, 3)).astype(np.float32)
    dev = OffloadDevice()
    for i in range(3):
        m(x, device=dev)
        print(f"run {i + 1}: {sync_stats(dev, reset=True).weight_bytes} weight bytes copied")
    host = m(x)["fc"]
    print("offload equals host bitwise:", host.tobytes() == m(x, device=dev)["fc"].tobytes())


if __name__ == "__main__":
    main()
