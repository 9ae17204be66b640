import numpy as np
import pytest

from nowcast_cde import dfm, numerics, synthetic
from nowcast_cde.dfm import StateSpaceModel
from nowcast_cde.panel import IndicatorMeta, Panel, parse_month, standardize

from oracles import joint_gaussian_posterior, random_model


def scalar_kalman(y, a, q, c, r, x0, p0):
    means = []
    x, p = x0, p0
    for obs in y:
        k = p * c / (c * c * p + r)
        x = x + k * (obs - c * x)
        p = (1 - k * c) * p
        means.append(x)
        x, p = a * x, a * a * p + q
    return np.array(means)


def scalar_model(a=0.9, q=1.0, c=1.0, r=1.0, p0=1.0):
    return StateSpaceModel(np.array([[a]]), np.array([[c]]), np.array([[q]]), np.array([r]),
                           np.zeros(1), np.array([[p0]]), 1)


def test_scalar_filter_matches_closed_form():
    y = np.array([0.5, -1.2, 2.0, 0.3])
    out = dfm.kalman_filter(scalar_model(), y[:, None])
    np.testing.assert_allclose(out.x_filt[:, 0], scalar_kalman(y, 0.9, 1.0, 1.0, 1.0, 0.0, 1.0), atol=1e-12)


def test_noiseless_identity_filter_returns_observations(rng):
    m = 3
    model = StateSpaceModel(0.5 * np.eye(m), np.eye(m), np.eye(m), np.full(m, 1e-14), np.zeros(m), np.eye(m), m)
    y = rng.normal(size=(6, m))
    out = dfm.kalman_filter(model, y)
    np.testing.assert_allclose(out.x_filt, y, atol=1e-10)


def test_fully_missing_step_is_pure_prediction(rng):
    model = random_model(rng, 2, 3)
    y = rng.normal(size=(5, 3))
    mask = np.ones_like(y, dtype=bool)
    mask[2] = False
    out = dfm.kalman_filter(model, y, mask)
    np.testing.assert_array_equal(out.x_filt[2], out.x_pred[2])
    np.testing.assert_array_equal(out.P_filt[2], out.P_pred[2])
    assert np.trace(out.P_pred[2]) > np.trace(out.P_filt[1])


def test_mask_all_true_is_bitwise_identical(rng):
    model = random_model(rng, 3, 4)
    y = rng.normal(size=(10, 4))
    a = dfm.e_step(model, y)
    b = dfm.e_step(model, y, np.ones_like(y, dtype=bool))
    for name in ("x_filt", "P_filt", "x_smooth", "P_smooth", "P_lag"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.log_likelihood == b.log_likelihood


def test_innovation_failure_reports_timestep():
    model = scalar_model(q=0.0, r=0.0, p0=0.0)
    with pytest.raises(dfm.KalmanError) as exc:
        dfm.kalman_filter(model, np.ones((3, 1)))
    assert exc.value.step == 0


def test_single_step_smooth_equals_filter(rng):
    model = random_model(rng, 2, 2)
    out = dfm.e_step(model, rng.normal(size=(1, 2)))
    np.testing.assert_array_equal(out.x_smooth, out.x_filt)
    np.testing.assert_array_equal(out.P_smooth, out.P_filt)


@pytest.mark.parametrize("seed", range(8))
def test_smoother_matches_joint_gaussian(seed):
    rng = np.random.default_rng(seed)
    m = 1 + seed % 2
    n_t = 5
    p = 2
    model = random_model(rng, m, p)
    y = rng.normal(size=(n_t, p))
    mask = rng.random(size=y.shape) > 0.3
    out = dfm.e_step(model, np.where(mask, y, np.nan), mask)
    means, covs, lags, ll = joint_gaussian_posterior(model, y, mask)
    np.testing.assert_allclose(out.x_smooth, means, atol=1e-8)
    np.testing.assert_allclose(out.P_smooth, covs, atol=1e-8)
    np.testing.assert_allclose(out.P_lag, lags, atol=1e-8)
    assert out.log_likelihood == pytest.approx(ll, abs=1e-8)


def test_diagonal_transition_path_matches_joint_gaussian(rng):
    from dataclasses import replace

    model = random_model(rng, 3, 3)
    model = replace(model, A=np.diag([0.9, -0.4, 0.6]))
    y = rng.normal(size=(4, 3))
    mask = rng.random(size=y.shape) > 0.3
    out = dfm.e_step(model, np.where(mask, y, np.nan), mask)
    means, covs, lags, ll = joint_gaussian_posterior(model, y, mask)
    np.testing.assert_allclose(out.x_smooth, means, atol=1e-8)
    np.testing.assert_allclose(out.P_smooth, covs, atol=1e-8)
    np.testing.assert_allclose(out.P_lag, lags, atol=1e-8)
    assert out.log_likelihood == pytest.approx(ll, abs=1e-8)


def test_smoothing_reduces_uncertainty(rng):
    model = random_model(rng, 3, 4)
    y = rng.normal(size=(30, 4))
    mask = rng.random(size=y.shape) > 0.4
    out = dfm.e_step(model, y, mask)
    for t in range(30):
        assert np.linalg.eigvalsh(out.P_filt[t] - out.P_smooth[t]).min() >= -1e-10
        assert np.linalg.eigvalsh(out.P_smooth[t]).min() >= -1e-10


def test_pca_init_rank_one(rng):
    f = rng.normal(size=200)
    y = np.outer(f, [1.0, 1.0, 1.0])
    model = dfm.pca_init(y)
    lam = model.loadings[:, 0]
    np.testing.assert_allclose(lam / lam[0], [1, 1, 1], atol=1e-10)
    assert (lam > 0).all()


def test_pca_init_single_column(rng):
    x = rng.normal(size=100)
    x = (x - x.mean()) / x.std()
    model = dfm.pca_init(x[:, None])
    assert model.loadings[0, 0] == pytest.approx(1.0, abs=1e-10)
    assert model.state_dim == 2
    np.testing.assert_allclose(model.idio_phi, [0.5])


def test_pca_init_white_noise_has_small_dynamics():
    for seed in range(20):
        r = numerics.make_rng(seed)
        y = r.normal(size=(300, 6))
        y = (y - y.mean(0)) / y.std(0)
        model = dfm.pca_init(y)
        eig = np.linalg.eigvalsh(y.T @ y / 300)
        assert abs(eig.max() - 1.0) < 0.5  # average column variance is 1
        assert abs(model.A[0, 0]) < 0.15


def test_pca_init_needs_two_rows():
    with pytest.raises(dfm.DFMError):
        dfm.pca_init(np.ones((1, 3)))


def simulate(seed, n_t=400, d=6, missing=0.1):
    spec = synthetic.SyntheticSpec(k=1, d=d, t_months=n_t, seed=seed, n_quarterly=0)
    panel, truth = synthetic.generate_synthetic(spec)
    std = standardize(panel)
    vals = std.values[:, :d].copy()
    mask = std.mask[:, :d].copy()
    r = numerics.make_rng(seed + 100)
    drop = r.random(size=mask.shape) < missing
    mask &= ~drop
    vals[~mask] = np.nan
    return vals, mask, np.array(truth["factors"])[:, 0]


def test_em_monotone_and_recovers_factor():
    vals, mask, f = simulate(3)
    res = dfm.em_fit(vals, mask)
    assert np.all(np.diff(res.log_likelihoods) >= -1e-8)
    assert abs(np.corrcoef(res.output.x_smooth[:, 0], f)[0, 1]) >= 0.95
    assert numerics.spectral_radius(res.model.A) < 1
    assert np.all(np.abs(res.model.idio_phi) < 1)


def test_em_infinite_tolerance_runs_one_iteration():
    vals, mask, _ = simulate(4, n_t=120)
    res = dfm.em_fit(vals, mask, tol=np.inf)
    assert res.n_iter == 1
    assert len(res.log_likelihoods) == 2


def test_sign_flip_leaves_likelihood_unchanged():
    vals, mask, _ = simulate(5, n_t=150)
    model = dfm.em_fit(vals, mask, max_iter=5).model
    a = dfm.kalman_filter(model, vals, mask).log_likelihood
    b = dfm.kalman_filter(dfm.flip_factor(model, 0), vals, mask).log_likelihood
    assert a == pytest.approx(b, abs=1e-9)


def group_panel(columns, groups, target_col=None):
    n_t = len(columns[0])
    values = np.column_stack(columns + ([target_col] if target_col is not None else []))
    metas = [IndicatorMeta(f"S{j}", "monthly", tuple(groups[j])) for j in range(len(columns))]
    if target_col is not None:
        metas.append(IndicatorMeta("GDP", "quarterly", ("Target",)))
    times = np.arange(parse_month("2001-01"), parse_month("2001-01") + n_t)
    return Panel(times, values, np.isfinite(values), tuple(metas), "GDP" if target_col is not None else "S0")


def test_extract_factors_single_noiseless_indicator(rng):
    x = np.zeros(120)
    for t in range(1, 120):
        x[t] = 0.7 * x[t - 1] + rng.normal()
    x = (x - x.mean()) / x.std()
    gdp = np.full(120, np.nan)
    gdp[2::3] = 1.0 + rng.normal(size=40)
    fs = dfm.extract_factors(group_panel([x], [["Real"]], gdp), max_iter=50)
    assert fs.groups == ["Real"]
    assert abs(np.corrcoef(fs.z[:, 0], x)[0, 1]) > 0.999


def test_extract_factors_orders_four_groups(rng):
    f = rng.normal(size=(150, 1)).cumsum(axis=0) * 0.1
    cols, groups = [], []
    names = ["Global", "Real", "Labor", "Soft"]
    for j in range(8):
        cols.append((f[:, 0] + rng.normal(size=150)))
        groups.append(["Global", names[1 + j % 3]])
    cols = [(c - c.mean()) / c.std() for c in cols]
    gdp = np.full(150, np.nan)
    gdp[2::3] = rng.normal(size=50)
    fs = dfm.extract_factors(group_panel(cols, groups, gdp), names, max_iter=30)
    assert fs.groups == names
    assert fs.z.shape == (150, 4)
    assert fs.n_factors == 4
    for g in names:
        assert fs.results[g].model.loadings.mean() > 0


def test_z_next_of_zero_state_is_zero():
    fs = dfm.FactorSet(["a", "b"], np.arange(3), np.zeros((3, 2)), np.array([0.5, 0.9]))
    np.testing.assert_array_equal(fs.z_next, [0.0, 0.0])
    fs.z[1] = [1.0, 2.0]
    np.testing.assert_allclose(fs.at_target(2), [0.5, 1.8])
    np.testing.assert_allclose(fs.at_target(1, "smoothed_last"), [1.0, 2.0])


def test_target_column_never_enters_factor_model(rng):
    x = rng.normal(size=(60, 3))
    gdp = np.full(60, np.nan)
    gdp[2::3] = rng.normal(size=20)
    p = group_panel(list(x.T), [["Global"]] * 3, gdp)
    p2 = group_panel(list(x.T), [["Global"]] * 3, gdp * 5 + 1)
    a = dfm.extract_factors(p, max_iter=10)
    b = dfm.extract_factors(p2, max_iter=10)
    np.testing.assert_array_equal(a.z, b.z)


def test_factor_csv_export(tmp_path, rng):
    fs = dfm.FactorSet(["Global", "Real"], np.arange(parse_month("2020-01"), parse_month("2020-01") + 2),
                       rng.normal(size=(2, 2)), np.ones(2))
    path = tmp_path / "factors.csv"
    fs.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "date,group,factor_value"
    assert lines[1].startswith("2020-01,Global,")
    assert len(lines) == 5
