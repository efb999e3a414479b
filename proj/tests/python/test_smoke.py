# SPDX-License-Identifier: Apache-2.0
import json
import math

import numpy as np
import pytest

import stgmfm

TINY = {
    "synth.n_channels": 8,
    "synth.n_samples": 250,
    "synth.n_subjects": 2,
    "synth.n_sessions": 2,
    "synth.trials_per_class": 2,
    "synth.snr_db": 1e9,
    "synth.drift_amp": 0.0,
    "synth.transient_rate": 0.0,
    "synth.erd_depth": 0.8,
    "model.window_len": 125,
    "model.stride": 125,
    "model.d": 6,
    "model.k_s": 1,
    "model.k_t": 1,
    "model.kernel": 9,
    "model.mfm_width": 4,
    "model.mfm_kernel": 3,
    "model.mfm_top_periods": 2,
    "model.dropout": 0.0,
    "model.top_k": 3,
    "model.rms_window": 25,
    "train.epochs": 2,
    "train.batch_size": 8,
    "train.val_fraction": 0.25,
    "train.finetune_epochs": 1,
}


def test_window_count():
    assert stgmfm.window_count(1125, 125, 125) == 9
    assert stgmfm.window_count(250, 125, 125) == 2


def test_cosine_schedule_endpoints():
    assert stgmfm.cosine_lr(0, 100, 2e-3, 1e-6) == 2e-3
    assert stgmfm.cosine_lr(100, 100, 2e-3, 1e-6) == 1e-6
    mid = stgmfm.cosine_lr(50, 100, 2e-3, 1e-6)
    assert mid == pytest.approx(1e-6 + 0.5 * (2e-3 - 1e-6), rel=1e-12)


def test_rfft_matches_numpy():
    rng = np.random.default_rng(3)
    x = rng.normal(size=64)
    ours = stgmfm.rfft(list(x))
    ref = np.fft.rfft(x)
    assert np.max(np.abs(ours - ref)) < 1e-9


def test_plv_identical_phases_is_all_ones():
    t = np.linspace(0.0, 4.0 * math.pi, 200)
    phases = np.stack([t, t, t])
    plv = stgmfm.plv_from_phases(phases)
    assert plv.shape == (3, 3)
    assert np.allclose(plv, 1.0, atol=1e-12)


def test_metrics_match_hand_confusion():
    m = stgmfm.metrics_from_confusion(np.array([[5, 1], [2, 4]], dtype=np.int64))
    assert m["acc"] == pytest.approx(75.0)
    assert m["kappa"] == 0.5
    assert 0.0 <= m["f1"] <= 100.0


def test_effective_adjacency_invariants():
    rng = np.random.default_rng(7)
    base = np.abs(rng.normal(size=(6, 6)))
    base = 0.5 * (base + base.T)
    np.fill_diagonal(base, 0.0)
    delta = 0.1 * rng.normal(size=(6, 6))
    eff = stgmfm.effective_adjacency(base, delta)
    assert eff.shape == (6, 6)
    assert np.allclose(eff, eff.T, atol=1e-12)
    assert np.all(np.diag(eff) == 0.0)
    assert np.all(eff >= 0.0)


def test_gcn_layer_hand_value():
    eff = np.array([[0.0, 1.0], [1.0, 0.0]])
    h = np.array([[1.0], [2.0]])
    w = np.array([[3.0]])
    out = stgmfm.gcn_layer(eff, h, w, identity_activation=True)
    assert np.allclose(out, [[6.0], [3.0]])


def test_featurize_shapes():
    rng = np.random.default_rng(11)
    n = np.arange(256)
    carrier = np.sin(2.0 * math.pi * 20.0 * n / 250.0)
    data = np.stack([carrier * (1.0 + 0.5 * np.cos(2.0 * math.pi * n / 32.0))
                     + 0.01 * rng.normal(size=256) for _ in range(3)])
    f = stgmfm.featurize(data, 250.0, {"model.window_len": 64, "model.stride": 64,
                                       "model.rms_window": 5, "model.mfm_top_periods": 1})
    assert f["windows"].shape == (4, 3, 64)
    assert len(f["periods"]) == 1
    assert f["images"][0].shape[0] == 3
    assert f["plv"].shape == (3, 3)
    f2 = stgmfm.featurize(data, 250.0, {"model.window_len": 64, "model.stride": 64},
                          no_plv=True)
    assert f2["plv"] is None


def test_error_carries_code():
    with pytest.raises(ValueError, match="invalid-config"):
        stgmfm.cosine_lr(-1, 100, 2e-3, 1e-6)
    with pytest.raises(ValueError, match="unknown config key"):
        stgmfm.synth("/tmp/never", {"nope.key": 1})


def test_pipeline_roundtrip(tmp_path):
    data_dir = tmp_path / "data"
    run_dir = tmp_path / "run"
    n = stgmfm.synth(str(data_dir), TINY, seed=7)
    assert n == 24
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["num_channels"] == 8

    r = stgmfm.train(str(data_dir), str(run_dir), TINY, seed=42)
    assert r["steps"] > 0
    assert r["best_val_acc"] is not None
    assert (run_dir / "final" / "params.json").exists()
    assert (run_dir / "history.jsonl").exists()

    ev = stgmfm.evaluate(str(data_dir), str(run_dir / "final"))
    assert ev["confusion"].shape == (3, 3)
    assert ev["confusion"].sum() == 24
    assert 0.0 <= ev["acc"] <= 100.0
    ev2 = stgmfm.evaluate(str(data_dir), str(run_dir / "final"))
    assert np.array_equal(ev["confusion"], ev2["confusion"])

    steps = stgmfm.finetune(str(data_dir), str(run_dir / "final"),
                            str(tmp_path / "ft"), TINY)
    assert steps > 0


def test_protocol_rows_and_csv(tmp_path):
    data_dir = tmp_path / "data"
    stgmfm.synth(str(data_dir), TINY, seed=7)
    res = stgmfm.run_protocol(str(data_dir), "cross-session", str(tmp_path / "proto"),
                              TINY, seed=42)
    assert len(res["rows"]) == 4
    assert {row["subject"] for row in res["rows"]} == {0, 1}
    assert res["csv"].startswith("fold,subject,acc,kappa,f1")
    assert "AVG±STD" in res["csv"]
    on_disk = (tmp_path / "proto" / "results.csv").read_text()
    assert on_disk == res["csv"]


def test_gradient_fidelity_small():
    assert stgmfm.gradient_fidelity(seed=7) < 1e-4
