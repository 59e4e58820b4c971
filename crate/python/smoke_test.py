"""Smoke test for the `genlayer` Python module.

Build and install first:

    pip install maturin
    pip install -e crates/python --no-build-isolation

then run `python python/smoke_test.py`.
"""

import json
import math
import tempfile
from pathlib import Path

import genlayer


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def main():
    print("genlayer", genlayer.__version__)

    # Hand-computed 1-2-1 ReLU fixture.
    net = genlayer.Network.from_dense_weights([[[2.0], [-3.0]], [[1.0, 1.0]]], ["relu", "relu"])
    sq = genlayer.Loss("squared")
    m = genlayer.pulled_back_metric(net, sq, [1.0])
    assert (m["sigma_max"], m["trace_bound"], m["spectral_bound"]) == (4.0, 52.0, 104.0), m
    assert net.sigma_product == 26.0

    # Path products agree with the Jacobian.
    mlp = genlayer.Network.mlp(3, [5, 4], 2, activation="tanh", init="xavier", seed=7)
    x = [0.3, -1.2, 0.8]
    jac = mlp.input_jacobian(x)
    p = genlayer.path_product_matrix(mlp, x)["p_matrix"]
    for i in range(3):
        for k in range(2):
            assert close(p[i][k], jac[k][i]), (i, k)

    # Bound chain over a handful of points for each loss.
    for kind, out in [("squared", 2), ("softmax_ce", 2), ("bernoulli", 2)]:
        loss = genlayer.Loss(kind, out)
        report = genlayer.verify_bound_chain(mlp, loss, [[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]])
        assert report["violations"] == 0

    ce = genlayer.Loss("softmax_ce", 3)
    assert ce.conjugacy_check([0.2, 0.3, 0.5]) < 1e-12
    h = ce.hessian_psi([0.0, 0.0, 0.0])
    assert close(h[0][0], 2.0 / 9.0) and close(h[0][1], -1.0 / 9.0)

    xs, ys = genlayer.gen_data("quadratic", seed=3)
    assert len(xs) == 100 and xs[0] == -8.0 and xs[-1] == 8.0
    assert genlayer.gen_data("quadratic", seed=3) == (xs, ys)

    # Full-scale overfit models have the reference parameter counts.
    overfit = json.loads(genlayer.preset("overfit", "full"))
    counts = [
        genlayer.Network.from_model_json(json.dumps(m["model"])).num_params
        for m in overfit["experiment"]["overfit"]["models"]
    ]
    assert counts == [35998, 35989, 36160], counts

    # A small end-to-end run, written to disk.
    config = genlayer.preset("linear_regression")
    with tempfile.TemporaryDirectory() as tmp:
        report = genlayer.run_experiment(config, tmp)
        assert (Path(tmp) / "history.csv").exists()
    final = report["run"]["final_train_loss"]
    assert math.isfinite(final) and final < 0.1, final

    try:
        genlayer.run_experiment(config.replace('"epochs"', '"epoch"'))
    except ValueError as e:
        assert "epoch" in str(e)
    else:
        raise AssertionError("malformed config accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
