"""Tests for the REML estimator: collapses, invariants, recovery, criteria."""

import numpy as np
import pandas as pd
import pytest

from spwarp.basis import EigenBasis
from spwarp.errors import DataError
from spwarp.estimator import (ModelSpec, fit_resf, fit_resf_vc, fit_statistics,
                              info_criteria, restricted_loglik)
from spwarp.transforms import TransformSpec

from conftest import make_basis, spatial_field

LOG2PI = np.log(2.0 * np.pi)


def empty_basis(n, coords=None):
    return EigenBasis(vectors=np.zeros((n, 0)), eigenvalues=np.array([]),
                      kind="exponential_kernel", range_=1.0, coords=coords,
                      col_means=np.zeros(n))


def reml_lm_oracle(y, x):
    """Closed-form restricted log-likelihood of a linear model."""
    n, k = x.shape
    beta = np.linalg.lstsq(x, y, rcond=None)[0]
    rss = float(np.sum((y - x @ beta) ** 2))
    s2 = rss / (n - k)
    _, logdet = np.linalg.slogdet(x.T @ x)
    return -0.5 * ((n - k) * (LOG2PI + 1.0 + np.log(s2)) + logdet), beta, s2


class TestOlsCollapse:
    def test_matches_closed_form(self):
        """Empty basis + identity chain reproduces ordinary least squares."""
        rng = np.random.default_rng(1)
        n = 90
        x1, x2 = rng.normal(0, 1, n), rng.normal(0, 2, n)
        y = 1.0 + 0.5 * x1 - 1.2 * x2 + rng.normal(0, 0.3, n)
        data = pd.DataFrame({"y": y, "x1": x1, "x2": x2})
        m = fit_resf(data, "y", ModelSpec(const_columns=("x1", "x2")), empty_basis(n))

        x_mat = np.column_stack([np.ones(n), x1, x2])
        rll, beta, s2 = reml_lm_oracle(y, x_mat)
        se = np.sqrt(s2 * np.diag(np.linalg.inv(x_mat.T @ x_mat)))
        assert np.abs(m.beta["Estimate"].to_numpy() - beta).max() < 1e-8
        assert np.abs(m.beta["SE"].to_numpy() - se).max() < 1e-8
        assert abs(m.sigma2 - s2) < 1e-8
        assert m.fit_stats["rlogLik"] == pytest.approx(rll, abs=1e-8)
        assert m.fit_stats["p_count"] == 4   # 3 coefficients + sigma^2

    def test_restricted_loglik_op_matches(self):
        rng = np.random.default_rng(2)
        n = 60
        x1 = rng.normal(0, 1, n)
        y = 0.4 + 2.0 * x1 + rng.normal(0, 1.0, n)
        data = pd.DataFrame({"y": y, "x1": x1})
        m = fit_resf(data, "y", ModelSpec(const_columns=("x1",)), empty_basis(n))
        rll, _, _ = reml_lm_oracle(y, np.column_stack([np.ones(n), x1]))
        assert restricted_loglik(m) == pytest.approx(rll, abs=1e-8)


class TestRemlOptimum:
    def test_local_maximum_probe(self, gaussian_spatial_data):
        """Perturbing any parameter off the optimum lowers the likelihood."""
        d = gaussian_spatial_data
        m = fit_resf(d["data"], "y", ModelSpec(const_columns=("x1",)), d["basis"])
        base = restricted_loglik(m)
        theta = m._state.theta_opt
        for i in range(len(theta)):
            for eps in (0.05, -0.05):
                bumped = theta.copy()
                bumped[i] += eps
                assert restricted_loglik(m, bumped) <= base + 1e-6

    def test_nesting_random_process(self, gaussian_spatial_data):
        """Adding the spatial process never lowers the maximized likelihood."""
        d = gaussian_spatial_data
        n = len(d["data"])
        flat = fit_resf(d["data"], "y", ModelSpec(const_columns=("x1",)),
                        empty_basis(n))
        spatial = fit_resf(d["data"], "y", ModelSpec(const_columns=("x1",)),
                           d["basis"])
        assert spatial.rlogLik >= flat.rlogLik - 1e-6

    def test_nesting_transform_layer(self):
        rng = np.random.default_rng(9)
        _, _, basis = make_basis(n=100, seed=31)
        x1 = rng.normal(0, 1, 100)
        y = np.exp(0.5 + 0.3 * x1 + spatial_field(basis, seed=32, scale=0.4)
                   + rng.normal(0, 0.3, 100))
        data = pd.DataFrame({"y": y, "x1": x1})
        rlls = []
        for d_layers in (0, 1):
            spec = ModelSpec(const_columns=("x1",),
                             transform=TransformSpec(y_nonneg=True, tr_num=d_layers))
            rlls.append(fit_resf(data, "y", spec, basis).rlogLik)
        assert rlls[1] >= rlls[0] - 1e-6


class TestSimulationRecovery:
    def test_coefficient_within_two_se(self):
        """Known-truth simulation: slope inside 2 SE in >= 90% of replicates."""
        coords, _, basis = make_basis(n=200, seed=100)
        lam = basis.eigenvalues
        weights = (lam / lam[0]) * (lam.sum() / lam.sum())
        hits = 0
        n_rep = 100
        for rep in range(n_rep):
            rng = np.random.default_rng(1000 + rep)
            x1 = rng.normal(0, 1, 200)
            gamma = rng.normal(0, 1, basis.n_components) * np.sqrt(weights)
            w = 0.8 * (basis.vectors @ gamma)
            y = 1.0 + 0.7 * x1 + w + rng.normal(0, 0.5, 200)
            m = fit_resf(pd.DataFrame({"y": y, "x1": x1}), "y",
                         ModelSpec(const_columns=("x1",)), basis)
            est = m.beta.loc["x1", "Estimate"]
            se = m.beta.loc["x1", "SE"]
            hits += abs(est - 0.7) <= 2.0 * se
        assert hits >= 0.9 * n_rep


@pytest.fixture(scope="module")
def grouped():
    _, _, basis = make_basis(n=50, seed=21)
    rng = np.random.default_rng(22)
    rows = []
    effects = {"a": 0.5, "b": -0.2, "c": -0.3}
    for g, eff in effects.items():
        for i in range(50):
            x1 = rng.normal(0, 1)
            rows.append((g, x1, 1.0 + 0.5 * x1 + eff + rng.normal(0, 0.4)))
    data = pd.DataFrame(rows, columns=["g", "x1", "y"])
    # every zone repeats once per group level
    data["zone"] = [i for _ in effects for i in range(50)]
    basis2 = EigenBasis(vectors=basis.vectors, eigenvalues=basis.eigenvalues,
                        kind=basis.kind, range_=basis.range_,
                        coords=basis.coords, col_means=basis.col_means,
                        site_ids=tuple(range(50)), threshold=basis.threshold)
    return data, basis2


class TestGroupEffects:
    def test_sum_to_zero_and_na_se(self, grouped):
        data, basis = grouped
        spec = ModelSpec(const_columns=("x1",), group_column="g")
        m = fit_resf(data, "y", spec, basis, site_id_column="zone")
        eff = m.group_effects["Estimate"]
        assert abs(eff.sum()) < 1e-8
        assert np.isnan(m.group_effects["SE"].iloc[-1])
        assert np.isfinite(m.group_effects["SE"].iloc[:-1]).all()

    def test_level_order_invariance(self, grouped):
        """Relabeling which level comes last leaves all effects unchanged."""
        data, basis = grouped
        spec = ModelSpec(const_columns=("x1",), group_column="g")
        m1 = fit_resf(data, "y", spec, basis, site_id_column="zone")
        flipped = data.iloc[::-1].reset_index(drop=True)   # level order c, b, a
        m2 = fit_resf(flipped, "y", spec, basis, site_id_column="zone")
        e1 = m1.group_effects["Estimate"]
        e2 = m2.group_effects["Estimate"]
        for level in ("a", "b", "c"):
            assert e1.loc[level] == pytest.approx(e2.loc[level], abs=1e-6)


class TestOffsetContract:
    def test_offset_rescaling_shifts_intercept(self):
        """Scaling all offsets by c moves the intercept by -log c only."""
        _, _, basis = make_basis(n=150, seed=41)
        rng = np.random.default_rng(42)
        x1 = rng.normal(0, 1, 150)
        expected = rng.uniform(30, 90, 150)
        w = spatial_field(basis, seed=43, scale=0.3)
        y = rng.poisson(expected * np.exp(-0.4 + 0.3 * x1 + w))
        data = pd.DataFrame({"y": y, "x1": x1, "off": expected})
        spec = ModelSpec(const_columns=("x1",), offset_column="off",
                         transform=TransformSpec(y_type="count"))
        m1 = fit_resf(data, "y", spec, basis)
        c = 4.0
        data2 = data.assign(off=data["off"] * c)
        m2 = fit_resf(data2, "y", spec, basis)
        d_int = (m2.beta.loc["(Intercept)", "Estimate"]
                 - m1.beta.loc["(Intercept)", "Estimate"])
        assert d_int == pytest.approx(-np.log(c), abs=1e-6)
        assert m2.beta.loc["x1", "Estimate"] == pytest.approx(
            m1.beta.loc["x1", "Estimate"], abs=1e-6)


class TestScaleEquivariance:
    def test_power_of_two_rescale_is_exact(self, gaussian_spatial_data):
        d = gaussian_spatial_data
        spec = ModelSpec(const_columns=("x1",))
        m1 = fit_resf(d["data"], "y", spec, d["basis"])
        data2 = d["data"].assign(x1=d["data"]["x1"] * 2.0)
        m2 = fit_resf(data2, "y", spec, d["basis"])
        assert m2.beta.loc["x1", "Estimate"] * 2.0 == m1.beta.loc["x1", "Estimate"]
        np.testing.assert_array_equal(m2.pred["pred_transG"].to_numpy(),
                                      m1.pred["pred_transG"].to_numpy())

    def test_general_rescale_is_close(self, gaussian_spatial_data):
        d = gaussian_spatial_data
        spec = ModelSpec(const_columns=("x1",))
        m1 = fit_resf(d["data"], "y", spec, d["basis"])
        data2 = d["data"].assign(x1=d["data"]["x1"] * 3.0)
        m2 = fit_resf(data2, "y", spec, d["basis"])
        assert m2.beta.loc["x1", "Estimate"] * 3.0 == pytest.approx(
            m1.beta.loc["x1", "Estimate"], rel=1e-6)
        np.testing.assert_allclose(m2.pred["pred_transG"].to_numpy(),
                                   m1.pred["pred_transG"].to_numpy(), atol=1e-5)


class TestDeterminism:
    def test_identical_runs_bitwise(self, gaussian_spatial_data):
        d = gaussian_spatial_data
        spec = ModelSpec(const_columns=("x1",),
                         transform=TransformSpec(y_nonneg=False, tr_num=1))
        m1 = fit_resf(d["data"], "y", spec, d["basis"])
        m2 = fit_resf(d["data"], "y", spec, d["basis"])
        np.testing.assert_array_equal(m1.beta.to_numpy(), m2.beta.to_numpy())
        np.testing.assert_array_equal(m1.pred.to_numpy(), m2.pred.to_numpy())
        np.testing.assert_array_equal(m1._state.theta_opt, m2._state.theta_opt)


@pytest.fixture(scope="module")
def meuse_shaped():
    """Four fixed coefficients (intercept + 3 covariates), like mod0/mod1."""
    _, _, basis = make_basis(n=155, seed=51)
    rng = np.random.default_rng(52)
    dist = rng.uniform(0, 0.88, 155)
    f2 = (rng.uniform(0, 1, 155) < 0.3).astype(float)
    f3 = (rng.uniform(0, 1, 155) < 0.25).astype(float)
    w = spatial_field(basis, seed=53, scale=0.25)
    latent = 6.4 - 1.8 * dist - 0.4 * f2 - 0.5 * f3 + w + rng.normal(0, 0.4, 155)
    y = np.exp(latent)
    return pd.DataFrame({"zinc": y, "dist": dist, "ffreq2": f2, "ffreq3": f3}), basis


class TestInfoCriteria:
    def test_gaussian_parameter_count_is_seven(self, meuse_shaped):
        data, basis = meuse_shaped
        m = fit_resf(data, "zinc", ModelSpec(const_columns=("dist", "ffreq2", "ffreq3")),
                     basis)
        # p = 4 coefficients + sigma2 + (process SD, scale exponent)
        assert m.fit_stats["p_count"] == 7
        crit = info_criteria(m)
        assert crit["AIC"] == pytest.approx(-2 * crit["rlogLik"] + 14, abs=1e-10)

    def test_boxcox_adds_one_parameter(self, meuse_shaped):
        data, basis = meuse_shaped
        spec = ModelSpec(const_columns=("dist", "ffreq2", "ffreq3"),
                         transform=TransformSpec(y_nonneg=True))
        m = fit_resf(data, "zinc", spec, basis)
        assert m.fit_stats["p_count"] == 8

    def test_bic_aic_identity_exact(self, meuse_shaped):
        data, basis = meuse_shaped
        for tr_num, nonneg in ((0, False), (0, True), (1, True)):
            spec = ModelSpec(const_columns=("dist", "ffreq2", "ffreq3"),
                             transform=TransformSpec(y_nonneg=nonneg, tr_num=tr_num))
            m = fit_resf(data, "zinc", spec, basis)
            fs = m.fit_stats
            expected = fs["p_count"] * (np.log(fs["n_eff"]) - 2.0)
            assert fs["BIC"] - fs["AIC"] == pytest.approx(expected, abs=1e-9)

    def test_sal_layer_counting(self, meuse_shaped):
        """First SAL layer adds 2 parameters, each further layer adds 4."""
        data, basis = meuse_shaped
        p = {}
        for tr_num in (1, 2):
            spec = ModelSpec(const_columns=("dist", "ffreq2", "ffreq3"),
                             transform=TransformSpec(y_nonneg=True, tr_num=tr_num))
            p[tr_num] = fit_resf(data, "zinc", spec, basis).fit_stats["p_count"]
        assert p[1] == 10
        assert p[2] == 14


class TestSvcStructure:
    def test_collapses_to_constant_fit_without_basis(self):
        """With no eigenvectors, the varying-coefficient fit equals the
        constant-coefficient fit."""
        rng = np.random.default_rng(61)
        n = 80
        x1 = rng.normal(0, 1, n)
        y = 0.5 + 1.1 * x1 + rng.normal(0, 0.5, n)
        data = pd.DataFrame({"y": y, "x1": x1})
        basis = empty_basis(n)
        m_vc = fit_resf_vc(data, "y", ModelSpec(svc_columns=("x1",)), basis)
        m_flat = fit_resf(data, "y", ModelSpec(const_columns=("x1",)), basis)
        assert m_vc.b_vc["x1"].nunique() == 1
        assert m_vc.b_vc["x1"].iloc[0] == pytest.approx(
            m_flat.beta.loc["x1", "Estimate"], abs=1e-8)

    def test_zero_variance_process_gives_constant_column(self):
        """A covariate with no spatial signal collapses to one value."""
        _, _, basis = make_basis(n=150, seed=71)
        rng = np.random.default_rng(72)
        x1 = rng.normal(0, 1, 150)
        w = spatial_field(basis, seed=73, scale=1.0)
        y = 1.0 + w + 0.8 * x1 + rng.normal(0, 0.6, 150)   # constant slope
        data = pd.DataFrame({"y": y, "x1": x1})
        m = fit_resf_vc(data, "y", ModelSpec(svc_columns=("x1",)), basis)
        if any(b.name == "x1" for b in m._state.collapsed):
            assert m.b_vc["x1"].nunique() == 1
            assert m.variance["spatial"].loc["random_SE", "x1"] == 0.0
            assert np.isnan(m.variance["spatial"].loc["Moran.I/max(Moran.I)", "x1"])

    def test_binary_covariate_skips_nvc(self):
        """A two-valued covariate cannot support a spline expansion."""
        _, _, basis = make_basis(n=80, seed=85)
        rng = np.random.default_rng(86)
        x1 = (rng.uniform(0, 1, 80) < 0.5).astype(float)
        y = 0.2 + 0.7 * x1 + spatial_field(basis, seed=87, scale=0.5) \
            + rng.normal(0, 0.3, 80)
        data = pd.DataFrame({"y": y, "x1": x1})
        with pytest.warns(UserWarning, match="too few distinct values"):
            m = fit_resf_vc(data, "y", ModelSpec(svc_columns=("x1",), nvc=True),
                            basis)
        assert m.variance["nvc"] is None

    def test_fit_statistics_op(self, gaussian_spatial_data):
        d = gaussian_spatial_data
        m = fit_resf(d["data"], "y", ModelSpec(const_columns=("x1",)), d["basis"])
        stats = fit_statistics(m)
        assert stats["resid_SE"] == pytest.approx(np.sqrt(m.sigma2))
        assert 0.0 < stats["adjR2_cond"] < 1.0
        assert "dispersion" not in stats   # continuous regime

    def test_group_constant_intercept_varies(self):
        _, _, basis = make_basis(n=100, seed=81)
        rng = np.random.default_rng(82)
        x1 = rng.normal(0, 1, 100)
        w = spatial_field(basis, seed=83, scale=1.2)
        y = 1.0 + w + (0.5 + 0.0 * w) * x1 + rng.normal(0, 0.3, 100)
        data = pd.DataFrame({"y": y, "x1": x1})
        m = fit_resf_vc(data, "y", ModelSpec(svc_columns=("x1",)), basis)
        assert m.b_vc["(Intercept)"].nunique() > 1   # spatial intercept active


class TestValidation:
    def test_rank_deficiency_names_columns(self):
        rng = np.random.default_rng(91)
        n = 50
        x1 = rng.normal(0, 1, n)
        data = pd.DataFrame({"y": rng.normal(0, 1, n), "x1": x1, "x2": 2.0 * x1})
        with pytest.raises(DataError, match="collinear"):
            fit_resf(data, "y", ModelSpec(const_columns=("x1", "x2")), empty_basis(n))

    def test_svc_columns_rejected_by_resf(self):
        data = pd.DataFrame({"y": [1.0, 2.0], "x1": [0.0, 1.0]})
        with pytest.raises(DataError):
            fit_resf(data, "y", ModelSpec(svc_columns=("x1",)), empty_basis(2))

    def test_overlapping_roles_rejected(self):
        with pytest.raises(DataError, match="both"):
            ModelSpec(svc_columns=("x1",), const_columns=("x1",))

    def test_negative_count_rejected(self):
        _, _, basis = make_basis(n=40, seed=95)
        data = pd.DataFrame({"y": [-1.0] + [3.0] * 39,
                             "x1": np.random.default_rng(0).normal(0, 1, 40)})
        with pytest.raises(DataError):
            fit_resf(data, "y", ModelSpec(const_columns=("x1",),
                     transform=TransformSpec(y_type="count")), basis)

    def test_basis_size_mismatch(self):
        _, _, basis = make_basis(n=40, seed=96)
        data = pd.DataFrame({"y": np.ones(20), "x1": np.arange(20.0)})
        with pytest.raises(DataError, match="40"):
            fit_resf(data, "y", ModelSpec(const_columns=("x1",)), basis)
