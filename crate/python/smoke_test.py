"""Smoke test for the nexvitad_py extension.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import json
import math
import tempfile

import nexvitad_py as nx


def check_metrics():
    assert nx.auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert nx.auc([0.8, 0.3, 0.6, 0.1], [1, 1, 0, 0]) == 0.75
    ap = nx.average_precision([0.9, 0.8, 0.7], [1, 0, 1])
    assert math.isclose(ap, 0.5 + 0.5 * 2 / 3)
    gt = [[1.0, 1.0, 0.0, 0.0]]
    assert nx.pro_mean_iou([gt], [gt], 0.5) == (1.0, 0.5)
    pro, _ = nx.pro_mean_iou([[[0.0, 1.0, 1.0, 0.0]]], [gt], 0.5)
    assert math.isclose(pro, 1 / 3)
    try:
        nx.auc([0.1, 0.2], [1, 1])
    except ValueError:
        pass
    else:
        raise AssertionError("single-class AUC should raise")


def check_transport():
    plan, violation, converged = nx.sinkhorn_assign([[0.0], [1.0]], [[0.0], [1.0]], eps=0.01)
    assert converged and violation < 1e-6
    assert plan[0][0] > 0.49 and plan[1][1] > 0.49
    z = [[0.0, 0.0]] * 5 + [[10.0, 10.0]] * 5
    protos = sorted(nx.sinkhorn_kmeans(z, 2, seed=1))
    assert max(abs(a - b) for a, b in zip(protos[0] + protos[1], [0, 0, 10, 10])) < 1e-6


def check_pipeline():
    with tempfile.TemporaryDirectory() as out:
        cfg = json.loads(nx.default_config(out, seed=1, n_target=1))
        cfg["data"].update(size=32, n_train=12, n_test=6)
        cfg["split"]["bank_size"] = 4
        cfg["inference"].update(k=4, m=4, k_sweep=[2, 4])
        cfg["backbone"].update(hiera_dims=[4, 4, 8, 8], dense_dim=4)
        cfg["decoder"].update(stage_channels=[4, 4, 4], pseudo_hidden=[4, 4])
        cfg["train"].update(epochs=2, warmup_epochs=1, phase1_epochs=1)
        text = json.dumps(cfg)
        report = json.loads(nx.run(text))
        assert 0.0 <= report["auc"] <= 1.0 and 0.0 <= report["pro"] <= 1.0
        tag = nx.infer(text, decoder=True)
        decoder = json.loads(nx.evaluate(text, tag))
        print(f"bank auc {report['auc']:.3f} pro {report['pro']:.3f}; decoder auc {decoder['auc']:.3f}")


if __name__ == "__main__":
    print("nexvitad_py", nx.__version__)
    check_metrics()
    check_transport()
    check_pipeline()
    print("smoke test passed")
