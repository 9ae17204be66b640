import numpy as np
import pytest

from nowcast_cde import synthetic
from nowcast_cde.panel import is_quarter_end


def test_noiseless_identity_loadings_reproduce_factors():
    spec = synthetic.SyntheticSpec(k=3, d=3, t_months=60, seed=1, noise_obs=0.0, n_quarterly=0,
                                   A=(0.5 * np.eye(3)).tolist(), loadings=np.eye(3).tolist())
    panel, truth = synthetic.generate_synthetic(spec)
    np.testing.assert_array_equal(panel.values[:, :3], np.array(truth["factors"]))


def test_shapes_and_quarterly_target():
    panel, truth = synthetic.generate_synthetic({"k": 1, "d": 8, "t_months": 240, "seed": 7})
    assert panel.values.shape == (240, 9)
    assert panel.target_id == "GDP"
    tgt = panel.mask[:, panel.target_index]
    assert tgt.sum() == 80
    assert all(is_quarter_end(t) for t in panel.times[tgt])
    assert len(truth["target"]) == 80
    assert np.array(truth["loadings"]).shape == (8, 1)


def test_seeds():
    a, _ = synthetic.generate_synthetic({"k": 2, "d": 6, "t_months": 90, "seed": 1})
    b, _ = synthetic.generate_synthetic({"k": 2, "d": 6, "t_months": 90, "seed": 1})
    c, _ = synthetic.generate_synthetic({"k": 2, "d": 6, "t_months": 90, "seed": 2})
    np.testing.assert_array_equal(a.values, b.values)
    assert a.values.shape == c.values.shape
    assert not np.array_equal(np.nan_to_num(a.values), np.nan_to_num(c.values))


def test_unstable_transition_rejected():
    with pytest.raises(synthetic.SyntheticError, match="unstable"):
        synthetic.generate_synthetic({"k": 1, "d": 2, "t_months": 30, "A": [[1.0]]})


@pytest.mark.parametrize("doc", [
    {"k": 0, "d": 4, "t_months": 30},
    {"k": 1, "d": 4},
    {"k": 1, "d": 4, "t_months": 30, "colour": "red"},
    {"k": 1, "d": 4, "t_months": 30, "target_rule": {"kind": "cubic"}},
])
def test_invalid_specs(doc):
    with pytest.raises(synthetic.SyntheticError):
        synthetic.generate_synthetic(doc)


def test_linear_rule_is_exact_without_noise():
    doc = {"k": 2, "d": 4, "t_months": 60, "seed": 3,
           "target_rule": {"kind": "linear", "intercept": 1.0, "coefs": [2.0, -1.0]}}
    panel, truth = synthetic.generate_synthetic(doc)
    z = np.array(truth["factors"])[panel.mask[:, panel.target_index]]
    np.testing.assert_allclose(truth["target"], 1.0 + 2 * z[:, 0] - z[:, 1], atol=1e-12)


def test_benchmark_regime_and_drop():
    panel, truth = synthetic.generate_synthetic(synthetic.benchmark_spec(0, 600))
    alpha = np.array(truth["alpha"])
    beta = np.array(truth["beta"])
    assert alpha.std() > 0.05  # intercept moves with the regime
    assert beta[:, 0].std() > 0.05 and np.ptp(beta[:, 1]) == 0.0
    f = np.array(truth["factors"])[:, 0]
    at = int(0.93 * 600)
    assert f[at : at + 3].mean() < f[: at].mean() - 1.0
