"""Smoke test for the mcan_py extension module.

Build first, e.g. `maturin develop -m crates/python/Cargo.toml`, or copy
`target/release/libmcan_py.so` to `mcan_py.so` somewhere on PYTHONPATH.
"""

import math
import os
import sys
import tempfile

import mcan_py


def main() -> int:
    assert mcan_py.g(0.5) == 0.5
    assert abs(mcan_py.g(0.25, n=2.0, beta=0.0) - 0.125) < 1e-12
    pts = mcan_py.curve(n=3.0, beta=0.5, count=11)
    assert len(pts) == 11 and pts[0] == (0.0, -0.5) and pts[-1] == (1.0, 1.0)
    assert all(b[1] >= a[1] for a, b in zip(pts, pts[1:]))

    data = mcan_py.synthetic(num_samples=40, image_size=16, seed=3)
    assert len(data) == 40 and data.has_supports()
    train, held = data.split(0.75, seed=1)
    assert len(train) == 30 and len(held) == 10

    net = mcan_py.Net({"image_size": 16, "feature_channels": 8, "num_attributes": 6, "head_hidden": 4, "seed": 5})
    probs = net.predict([data.image(0), data.image(1)])
    assert len(probs) == 2 and len(probs[0]) == 6
    assert all(0.0 < p < 1.0 for row in probs for p in row)
    masks = net.masks(data.image(0))
    assert len(masks) == 6 and len(masks[0]) == 8 * 8 * 8

    trace = net.fit(train, held, {"epochs": 2, "batch_size": 10})
    assert len(trace) == 2
    assert all(math.isfinite(e["total"]) for e in trace)
    acc = net.evaluate(held)
    assert len(acc) == 6 and all(0.0 <= a <= 1.0 for a in acc)

    imp = net.channel_importance(held, 0)
    assert len(imp) == 8
    corr = net.attribute_correlation(held)
    assert all(abs(corr[i][i] - 1.0) < 1e-9 for i in range(6))
    assert 0.0 <= net.localization(held, 0) <= 1e6

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        net.save(path)
        back = mcan_py.Net.load(path)
        assert back.predict([data.image(0)]) == net.predict([data.image(0)])
        assert back.config == net.config

    try:
        mcan_py.g(0.5, n=-1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative exponent accepted")

    print("smoke test passed:", net, "mean held-out accuracy %.3f" % (sum(acc) / len(acc)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
