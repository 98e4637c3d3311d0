import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import gammaln

from smcvi import autodiff as ad
from smcvi import variational as vf


class FixedEta:
    """rng stub returning a prescribed sequence of standard normals."""

    def __init__(self, values):
        self.values = list(values)

    def standard_normal(self):
        return self.values.pop(0)


def test_normal_factor_at_eta_zero():
    fam = vf.MeanFieldFamily({"x": vf.Factor("normal", mu=1.3, v=-0.4)})
    theta, log_q = vf.sample_reparam(fam, FixedEta([0.0]))
    assert theta["x"] == pytest.approx(1.3)
    assert ad.value_of(log_q) == pytest.approx(0.4 - 0.5 * math.log(2 * math.pi))


def test_lognormal_factor_at_eta_zero():
    fam = vf.MeanFieldFamily({"x": vf.Factor("log-normal", mu=0.0, v=0.0)})
    theta, log_q = vf.sample_reparam(fam, FixedEta([0.0]))
    assert theta["x"] == pytest.approx(1.0)
    assert ad.value_of(log_q) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_sigmoid_normal_factor_at_eta_zero():
    fam = vf.MeanFieldFamily({"x": vf.Factor("sigmoid-normal", mu=0.0, v=-0.7)})
    theta, log_q = vf.sample_reparam(fam, FixedEta([0.0]))
    assert theta["x"] == pytest.approx(0.5)
    want = -0.5 * math.log(2 * math.pi) + 0.7 - math.log(0.25)
    assert ad.value_of(log_q) == pytest.approx(want)


def test_sigmoid_normal_jacobian_matches_numeric():
    # the log-density Jacobian against a numeric derivative of the transform
    f = vf.Factor("sigmoid-normal", mu=0.3, v=-0.2)
    z = 0.8
    h = 1e-6
    dth = (1 / (1 + math.exp(-(z + h))) - 1 / (1 + math.exp(-(z - h)))) / (2 * h)
    theta = 1 / (1 + math.exp(-z))
    normal_ld = -0.5 * math.log(2 * math.pi) - f.v - 0.5 * ((z - f.mu) * math.exp(-f.v)) ** 2
    assert f.log_density(theta) == pytest.approx(normal_ld - math.log(dth), rel=1e-6)


@pytest.mark.parametrize("kind,lo,hi", [
    ("normal", -12.0, 12.0),
    ("log-normal", 1e-9, 60.0),
    ("sigmoid-normal", 1e-12, 1.0 - 1e-12),
])
def test_factor_density_integrates_to_one(kind, lo, hi):
    f = vf.Factor(kind, mu=0.2, v=0.0)  # unit-scale factor
    total, _ = quad(lambda x: math.exp(f.log_density(x)), lo, hi, limit=200)
    assert total == pytest.approx(1.0, abs=1e-4)


def test_samples_stay_in_support():
    rng = np.random.default_rng(0)
    fams = {
        "normal": (-np.inf, np.inf),
        "log-normal": (0.0, np.inf),
        "sigmoid-normal": (0.0, 1.0),
    }
    for kind, (lo, hi) in fams.items():
        fam = vf.MeanFieldFamily({"x": vf.Factor(kind, mu=0.5, v=0.5)})
        for _ in range(200):
            theta, _ = vf.sample_reparam(fam, rng)
            assert lo < theta["x"] < hi


def test_gradient_flows_to_mu_and_v():
    fam = vf.MeanFieldFamily({"x": vf.Factor("normal", mu=0.4, v=-1.0)})
    tape = ad.Tape()
    theta, log_q = vf.sample_reparam(fam, FixedEta([0.7]), tape=tape)
    out = theta["x"] * theta["x"] - log_q
    g_mu, g_v = ad.backward(tape, out)
    assert g_mu != 0.0 and g_v != 0.0


def test_reparam_gradient_of_square_matches_analytic():
    # E[theta^2] for a normal factor: d/dmu = 2 mu, d/dv = 2 exp(2v)
    mu0, v0 = 0.7, -0.3
    rng = np.random.default_rng(1)
    n = 1_000_000
    fam = vf.MeanFieldFamily({"x": vf.Factor("normal", mu=mu0, v=v0)})
    etas = rng.standard_normal(n)
    # vectorized: theta = mu + e^v eta, d(theta^2)/dmu = 2 theta, /dv = 2 theta e^v eta
    theta = mu0 + math.exp(v0) * etas
    g_mu = 2 * theta
    g_v = 2 * theta * math.exp(v0) * etas
    assert g_mu.mean() == pytest.approx(2 * mu0, rel=0.01)
    assert g_v.mean() == pytest.approx(2 * math.exp(2 * v0), rel=0.01)
    # spot-check the tape agrees with the closed form on a few draws
    for eta in etas[:5]:
        tape = ad.Tape()
        theta_d, _ = vf.sample_reparam(fam, FixedEta([eta]), tape=tape)
        gm, gv = ad.backward(tape, theta_d["x"] * theta_d["x"])
        assert gm == pytest.approx(2 * (mu0 + math.exp(v0) * eta), rel=1e-10)
        assert gv == pytest.approx(2 * (mu0 + math.exp(v0) * eta) * math.exp(v0) * eta, rel=1e-10)


def test_kl_of_family_with_itself_is_zero_per_sample():
    fam = vf.MeanFieldFamily({"a": vf.Factor("log-normal", 0.3, -0.5),
                              "b": vf.Factor("sigmoid-normal", -0.2, 0.1)})
    rng = np.random.default_rng(2)
    for _ in range(50):
        theta, log_q = vf.sample_reparam(fam, rng)
        theta_vals = {k: ad.value_of(v) for k, v in theta.items()}
        assert fam.log_density(theta_vals) == pytest.approx(ad.value_of(log_q), rel=1e-12)


def test_log_prior_values():
    assert vf.log_prior(vf.Prior("normal", 0.0, 10.0), 0.0) == pytest.approx(
        -0.5 * math.log(20 * math.pi))
    assert vf.log_prior(vf.Prior("uniform", 0.0, 1.0), 0.3) == 0.0
    assert vf.log_prior(vf.Prior("uniform", 0.0, 1.0), 1.7) == -np.inf
    want = 0.01 * math.log(0.01) - gammaln(0.01) - 0.01
    assert vf.log_prior(vf.Prior("gamma", 0.01, 0.01), 1.0) == pytest.approx(want, rel=1e-12)


def test_log_prior_quadrature_normalization():
    for prior, lo, hi in [
        (vf.Prior("gamma", 2.0, 3.0), 1e-9, 40.0),
        (vf.Prior("inv-gamma", 3.0, 2.0), 1e-6, 400.0),
        (vf.Prior("log-normal", 0.1, 0.49), 1e-9, 200.0),
    ]:
        total, _ = quad(lambda x: math.exp(ad.value_of(vf.log_prior(prior, x))), lo, hi,
                        limit=300)
        assert total == pytest.approx(1.0, abs=1e-4)


def test_fisher_block_values():
    f = vf.Factor("normal", 0.0, 0.0)
    np.testing.assert_allclose(vf.fisher_block(f), np.diag([1.0, 2.0]))
    f = vf.Factor("log-normal", 0.0, math.log(2.0))
    np.testing.assert_allclose(vf.fisher_block(f), np.diag([0.25, 2.0]))
    with pytest.raises(vf.UnsupportedFactorError):
        vf.fisher_block(vf.Factor("sigmoid-normal"))


@pytest.mark.parametrize("kind", ["normal", "log-normal"])
def test_fisher_matches_monte_carlo_outer_product(kind):
    mu0, v0 = 0.4, -0.25
    rng = np.random.default_rng(3)
    n = 1_000_000
    eta = rng.standard_normal(n)
    # score of the underlying normal in (mu, v); transforms do not change it
    d_mu = math.exp(-v0) * eta
    d_v = eta * eta - 1.0
    emp = np.array([[np.mean(d_mu * d_mu), np.mean(d_mu * d_v)],
                    [np.mean(d_mu * d_v), np.mean(d_v * d_v)]])
    want = vf.fisher_block(vf.Factor(kind, mu0, v0))
    np.testing.assert_allclose(np.diag(emp), np.diag(want), rtol=0.01)
    assert abs(emp[0, 1]) < 0.01 * max(want[0, 0], want[1, 1])


def test_natural_direction_rescales():
    fam = vf.MeanFieldFamily({"a": vf.Factor("normal", 0.0, 0.5)})
    g = np.array([1.0, 1.0])
    nat = vf.natural_direction(fam, g)
    assert nat[0] == pytest.approx(math.exp(1.0))
    assert nat[1] == pytest.approx(0.5)
    # zero gradient stays a no-op
    np.testing.assert_array_equal(vf.natural_direction(fam, np.zeros(2)), np.zeros(2))


def test_natural_direction_warns_and_passes_through_for_sigmoid():
    fam = vf.MeanFieldFamily({"a": vf.Factor("sigmoid-normal", 0.0, 0.0)})
    with pytest.warns(RuntimeWarning):
        nat = vf.natural_direction(fam, np.array([2.0, 4.0]))
    np.testing.assert_array_equal(nat, [2.0, 4.0])


def test_family_json_roundtrip():
    fam = vf.MeanFieldFamily({"a": vf.Factor("normal", 0.1, -0.2),
                              "b": vf.Factor("log-normal", 0.3, 0.4)})
    back = vf.family_from_json(fam.to_json())
    assert back.names() == fam.names()
    np.testing.assert_allclose(back.param_vector(), fam.param_vector())

    pe = vf.PointEstimate({"lam": ("normal", 0.8), "s": ("log-normal", -0.5)})
    back = vf.family_from_json(pe.to_json())
    np.testing.assert_allclose(back.param_vector(), pe.param_vector())
    assert back.mean_theta()["s"] == pytest.approx(math.exp(-0.5))
