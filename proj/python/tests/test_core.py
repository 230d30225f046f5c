import math

import numpy as np
import pytest

import haloroute as hr


def test_audit_identity():
    r = hr.audit(1.0, 0.0714, 0.0047)
    assert abs(r["total"] - (r["A"] + (1 - r["A"]) * r["J_loc"])) < 1e-12
    assert r["A"] == pytest.approx(0.9286)
    with pytest.raises(hr.NumericError):
        hr.audit(0.0, 1.0, 1.0)


def test_stats():
    assert hr.sign_test_floor(8) == 0.0078125
    assert hr.gini([0.0] * 9 + [1.0]) == pytest.approx(0.9)
    assert hr.gini([1.0] * 10) == 0.0
    assert hr.median([3.0, 1.0, 2.0, 4.0]) == 2.5
    lo, hi = hr.bootstrap_median_ci([0.2, 0.4, 0.5, 0.9, 1.1], 500, 0.05, 3)
    assert lo <= 0.5 <= hi
    assert (lo, hi) == hr.bootstrap_median_ci([0.2, 0.4, 0.5, 0.9, 1.1], 500, 0.05, 3)


def test_routing():
    s = [0.1, 0.9, 0.5, 0.9, 0.0]
    assert hr.select_topk(s, 2) == [1, 3]
    assert hr.select_topk(s, 0) == []
    assert hr.budget_blocks(0.25, 64) == 16
    assert hr.jaccard([], []) == 1.0
    assert "innovation_keg" in hr.policy_names()
    prof = hr.hann_profile(8)
    assert len(prof) == 8 and min(prof) > 0


def test_diagnostics_taylor_green():
    n = 32
    x = 2 * np.pi * np.arange(n) / n
    X, Y = np.meshgrid(x, x)
    f = np.zeros((4, n, n))
    f[0] = np.cos(X) * np.sin(Y)
    f[1] = -np.sin(X) * np.cos(Y)
    assert hr.mean_abs_divergence(f) < 1e-12
    spec = hr.ke_spectrum(f)
    assert sum(spec) == pytest.approx(hr.kinetic_energy(f), rel=1e-10)
    assert spec[1] == pytest.approx(sum(spec), rel=1e-12)


def test_dataset_and_host():
    solver = {"height": 32, "width": 32, "steps_per_frame": 2, "seed": 3}
    a = hr.generate_dataset(solver, 1, 3)
    b = hr.generate_dataset(solver, 1, 3)
    assert len(a) == 1 and len(a[0]) == 3
    assert a[0][0].shape == (1, 4, 32, 32)
    assert all(np.array_equal(p, q) for p, q in zip(a[0], b[0]))
    y = hr.surrogate_forecast(a[0][0], {}, solver)
    assert y.shape == (1, 4, 32, 32)
    assert np.all(np.isfinite(y))
    r = hr.risk_scores(a[0][0], y)
    assert len(r) == 16 and min(r) >= 0


def test_config_requires_seed(smoke_config):
    del smoke_config["seed"]
    with pytest.raises(hr.ConfigError):
        hr.resolve_config(smoke_config)


def test_pipeline_end_to_end(smoke_config):
    with pytest.raises(hr.DependencyError):
        hr.train(smoke_config, "global")
    hr.gen_data(smoke_config)
    with pytest.raises(hr.DependencyError):
        hr.train(smoke_config, "local-patch")
    for stage in ("global", "local-patch", "local-ar"):
        assert hr.train(smoke_config, stage)["completed"]
    first = hr.evaluate(smoke_config)
    again = hr.evaluate(smoke_config)
    assert first == again
    summary = first["results"]["summary"]
    assert summary["median_ratio"]["raw"] == 1.0
    assert summary["runs"] == 2 * len(smoke_config["eval"]["t0_pool"])
    audit = hr.audit_results(smoke_config)["results"]
    assert audit["max_identity_residual"] < 1e-12
    assert math.isclose(audit["protocol"]["A"], summary["protocol_audit"]["A"])
