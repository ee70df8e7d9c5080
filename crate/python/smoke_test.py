"""Smoke test for the `dst` extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/dst-*.whl
"""
import json
import math
import os
import sys
import tempfile

import dst


def main():
    wrn = dst.Arch.by_name("wrn-22-2")
    report = dst.flop_report(wrn, 0.9, "erk", "rigl", 100)
    assert abs(report["f_d"] / 3.15e8 - 1) < 0.05, report
    assert report["test_ratio"] == 0.17, report

    sparsities = dst.layer_sparsities(wrn, 0.8, "erk")
    assert len(sparsities) == len(wrn.maskable_layers())
    assert max(sparsities) < 1.0

    assert dst.prune_fraction(0, 0.3, 1000) == 0.3
    assert abs(dst.prune_fraction(1000, 0.3, 1000)) < 1e-15
    assert dst.should_update(100, 100, 1000) and not dst.should_update(150, 100, 1000)

    mlp = dst.Arch.by_name("mlp")
    masks = dst.MaskSet.random(mlp, [0.9, 0.9, 0.9], 0)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "mask.json")
        masks.save(path)
        assert dst.MaskSet.load(path) == masks
    assert math.isclose(masks.global_sparsity(), 0.9, abs_tol=1e-3)

    try:
        dst.Arch.by_name("no-such-net")
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    data_dir = os.path.join(os.path.dirname(__file__), "..", "data", "mnist-10k")
    cfg = json.loads(dst.default_config())
    cfg["epochs"] = 1
    cfg["data"]["data_dir"] = data_dir
    out = dst.train(json.dumps(cfg))
    acc = out["metrics"][-1]["test_accuracy"]
    assert acc > 0.8, acc
    assert math.isclose(out["masks"].global_sparsity(), 0.9, abs_tol=1e-3)

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
