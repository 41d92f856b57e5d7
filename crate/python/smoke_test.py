"""Smoke test for the ic_lab_py extension module.

Build and run from the repository root:

    cargo build --release -p ic-lab-py --features extension-module
    cp target/release/libic_lab_py.so python/ic_lab_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import ic_lab_py as ic


def main():
    assert abs(ic.entropy([0.5, 0.5]) - 1.0) < 1e-12
    assert abs(ic.bernoulli_entropy(0.5) - 1.0) < 1e-12

    # perfectly dependent fair pair: 1 bit
    mi = ic.mutual_information([1.0, 2.0], [1.0, 2.0], [0.5, 0.0, 0.0, 0.5])
    assert abs(mi - 1.0) < 1e-12

    report = ic.verify_theorem1([1.0, 2.0, 3.0], [-1.0, 4.0], [0.1, 0.2, 0.3, 0.1, 0.05, 0.25], 0.95)
    assert report["pass"], report
    assert abs(report["mi_gated"] - 0.95**2 * report["mi_orig"]) < 1e-10

    sweep = ic.theorem1_sweep(10, [0.05, 0.5, 0.95], seed=1)
    assert len(sweep) == 30 and all(r["pass"] for r in sweep)

    corr = ic.correlation_check(0.5, 0.8, 100_000, seed=2)
    assert abs(corr["residual"]) <= 3 * corr["std_error"], corr

    race = ic.whiten_race(kappa=100.0, dim=8)
    assert race["correlated"]["iterations_to_tol"] >= 10 * race["whitened"]["iterations_to_tol"]

    cond = ic.hessian_condition([[1.0, 0.0], [0.0, 10.0], [0.0, 0.0]])
    assert abs(cond["kappa"] - 100.0) < 1e-9

    assert ic.sign_coherence([[1.0, 2.0], [-1.0, 3.0]])["coherent_fraction"] == 0.5

    arch = ic.arch_summary(2, "v1")
    assert arch["weighted_layers"] == 14
    base = ic.arch_summary(2, "baseline")
    assert arch["parameter_count"] == base["parameter_count"]

    assert abs(ic.learning_rate(1e-3, [(80, 10.0), (120, 10.0), (160, 10.0)], 130) - 1e-5) < 1e-18
    assert abs(ic.stability_metric([0.6, 0.4] * 5, 2) - 0.1) < 1e-12

    x = ic.Tensor.normal([256, 4], 3)
    y = ic.ic_layer_forward(x, 1.0, training=True)
    cols = list(zip(*[y.tolist()[i * 4:(i + 1) * 4] for i in range(256)]))
    for col in cols:
        mean = sum(col) / len(col)
        var = sum((v - mean) ** 2 for v in col) / len(col)
        assert abs(mean) < 1e-9 and abs(var - 1.0) < 1e-2

    back = ic.Tensor.from_bytes(x.to_bytes())
    assert back.shape == [256, 4] and back.tolist() == x.tolist()

    img = ic.Tensor([1, 1, 3, 3], [1.0] * 9)
    k = ic.Tensor([1, 1, 1, 1], [2.0])
    assert ic.conv2d(img, k).tolist() == [2.0] * 9

    with tempfile.TemporaryDirectory() as tmp:
        cfg = os.path.join(tmp, "run.cfg")
        with open(cfg, "w") as f:
            f.write(
                "num_classes = 3\nepochs = 2\nbatch_size = 8\nsynthetic_train_size = 24\n"
                "synthetic_test_size = 9\nimage_size = 8\nbase_width = 4\n"
                f"output_dir = {os.path.join(tmp, 'out')}\n"
            )
        records = ic.train(cfg)
        assert len(records) == 2 and all(math.isfinite(r["train_loss"]) for r in records)
        assert os.path.exists(os.path.join(tmp, "out", "metrics.csv"))

    print("python smoke test passed")


if __name__ == "__main__":
    main()
