import json
import math

import numpy as np
import pytest

from condlr import experiment, lowrank
from condlr.config import TrainConfig
from condlr.errors import ConfigError, InfeasibleRankError, NumericalError
from condlr.nn import DenseLayer, Network
from condlr.verify import random_orthonormal


def blob_cfg(tmp_path, **kw):
    base = dict(dataset="blobs", blobs_per_class=30, blobs_dim=20, widths=(20, 16, 12, 10), epochs=2,
                batch_size=32, lr=0.1, momentum=0.5, milestones=(1,), timing=False,
                epsilons=(0.0, 0.05), out_dir=str(tmp_path / "run"))
    base.update(kw)
    return TrainConfig(**base)


def test_metrics_header():
    assert experiment.metrics_header(2, (0.0, 0.01)) == [
        "epoch", "loss", "acc", "racc_eps_0", "racc_eps_0.01", "cond_layer_1", "cond_layer_2",
        "cond_prod", "secs"]


def test_zero_epochs_gives_single_row(tmp_path):
    res = experiment.run_train(blob_cfg(tmp_path, variant="full", epochs=0))
    assert [r["epoch"] for r in res.rows] == [0]
    assert (tmp_path / "run" / "metrics.csv").read_text().count("\n") == 2


def test_condlr_run_outputs(tmp_path):
    steps = []

    def on_step(epoch, k, net):
        for layer in net.layers:
            sig = np.linalg.svd(layer.S, compute_uv=False)
            assert sig[0] / sig[-1] <= 1.1 + 1e-8
        steps.append((epoch, k))

    res = experiment.run_train(blob_cfg(tmp_path), on_step=on_step)
    assert steps and steps[-1][0] == 2
    assert all(r[f"cond_layer_{i}"] <= 1.1 + 1e-8 for r in res.rows for i in (1, 2, 3))
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["variant"] == "condlr(tau=0.1)" and summary["ranks"] == [4, 3, 2]
    assert 0 < summary["compression_total"] < 1
    for layer in summary["layers"]:
        n, m = layer["shape"]
        assert layer["params"] == layer["rank"] * (n + m + layer["rank"]) + n
        assert layer["compression"] >= 0.5
    assert {p.name for p in (tmp_path / "run").iterdir()} == {
        "metrics.csv", "summary.json", "config.ini", "checkpoint.npz"}
    assert res.rows[-1]["racc_eps_0"] == res.rows[-1]["acc"]


def test_runs_are_bit_identical(tmp_path):
    a = experiment.run_train(blob_cfg(tmp_path, out_dir=str(tmp_path / "a")))
    b = experiment.run_train(blob_cfg(tmp_path, out_dir=str(tmp_path / "b")))
    for name in ("metrics.csv", "summary.json", "checkpoint.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.rows == b.rows


def test_infeasible_rank_reported(tmp_path):
    with pytest.raises(InfeasibleRankError):
        experiment.run_train(blob_cfg(tmp_path, alpha=0.95))


def test_width_mismatch(tmp_path):
    with pytest.raises(ConfigError):
        experiment.run_train(blob_cfg(tmp_path, widths=(19, 10)))


def test_divergence_backoff(tmp_path):
    res = experiment.run_train(blob_cfg(tmp_path, variant="full", lr=1e6, momentum=0.0,
                                        divergence_retries=40, backoff=0.1))
    assert res.summary["lr_used"] < 1e6 and res.summary["diverged_attempts"]
    with pytest.raises(NumericalError):
        experiment.run_train(blob_cfg(tmp_path, variant="full", lr=1e12, divergence_retries=0))


def test_compare_outputs(tmp_path):
    cfgs = [blob_cfg(tmp_path), blob_cfg(tmp_path, variant="vanilla_uv")]
    results = experiment.run_compare(cfgs, tmp_path / "cmp")
    assert list(results) == ["condlr-tau0.1", "vanilla_uv"]
    text = (tmp_path / "cmp" / "compare.csv").read_text()
    assert text.startswith("run,epoch,loss") and text.count("\n") == 1 + 2 * 3
    for name in ("cond_vs_epoch", "loss_vs_epoch", "acc_vs_epoch", "racc_vs_eps"):
        svg = (tmp_path / "cmp" / f"{name}.svg").read_text()
        assert svg.startswith("<svg") and "polyline" in svg
    experiment.run_compare(cfgs, tmp_path / "cmp2")
    assert (tmp_path / "cmp2" / "compare.csv").read_text() == text


def test_compare_rejects_mixed_architectures(tmp_path):
    with pytest.raises(ConfigError):
        experiment.run_compare([blob_cfg(tmp_path), blob_cfg(tmp_path, widths=(20, 10))], tmp_path)


def test_attack_and_audit_from_checkpoint(tmp_path):
    cfg = blob_cfg(tmp_path)
    res = experiment.run_train(cfg)
    _, test = experiment.load_datasets(cfg)
    report = experiment.run_attack(tmp_path / "run" / "checkpoint.npz", test, (0.0, 0.05))
    assert report.accuracy[0] == res.summary["final_clean_acc"]
    audit = experiment.run_audit(tmp_path / "run" / "checkpoint.npz", test.features[:5])
    assert len(audit.rows) == 3 and all(r["cond2"] <= 1.1 + 1e-8 for r in audit.rows)
    assert audit.bound == pytest.approx(math.prod(r["cond2"] for r in audit.rows) * 1.0)
    assert "network bound" in audit.text() and audit.csv().startswith("layer,kind")


def test_audit_fresh_unit_checkpoint_is_one(tmp_path):
    cfg = blob_cfg(tmp_path, variant="condlr", tau=0.0, epochs=0)
    experiment.run_train(cfg)
    audit = experiment.run_audit(tmp_path / "run" / "checkpoint.npz")
    assert all(r["cond2"] == pytest.approx(1.0, abs=1e-12) for r in audit.rows)


def test_audit_band_projected_checkpoint(tmp_path):
    cfg = blob_cfg(tmp_path, tau=0.5, epochs=1)
    experiment.run_train(cfg)
    audit = experiment.run_audit(tmp_path / "run" / "checkpoint.npz")
    assert all(r["cond2"] <= 1.5 + 1e-10 for r in audit.rows)


def test_audit_unbounded_activation():
    from condlr.nn import Activation
    net = Network([DenseLayer(np.eye(2), None, Activation("sigmoid", domain="all_reals"))], 2)
    audit = experiment.run_audit(net)
    assert audit.bound is None and audit.rows[0]["act_const"] == "unbounded"
    assert "unbounded" in audit.text()


def test_audit_bound_dominates_sampled_cond():
    rng = np.random.default_rng(0)
    layers = [lowrank.FactorizedLayer(random_orthonormal(6, 6, rng), np.diag(rng.uniform(0.9, 1.1, 6)),
                                      random_orthonormal(6, 6, rng)) for _ in range(3)]
    net = Network(layers, 6)
    audit = experiment.run_audit(net, rng.random((50, 6)))
    assert audit.bound_applies and audit.num_points == 50
    assert audit.empirical_max <= audit.bound * (1 + 1e-6)


def test_verify_fast_suites():
    results = experiment.run_verify(("constants", "composition", "tangent", "gradients"))
    assert not any(r.failed for r in results)
    loose = {r.name for r in results if r.status == "report"}
    assert any("sigmoid" in n for n in loose) and any("leaky_relu(2" in n for n in loose)
    assert experiment.verify_csv(results).startswith("suite,check,value,threshold,status")


def test_verify_theorem2_not_certified_above_bound():
    results = experiment.verify_theorem2(seeds=range(1), lam=20.0)
    assert results[0].status == "not_certified" and not any(r.failed for r in results)


def test_verify_unknown_suite():
    with pytest.raises(ConfigError):
        experiment.run_verify(("nope",))
