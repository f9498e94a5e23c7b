import math

import pytest
import torch
import torch.nn as nn

from angiosynth import ConfigError, DivergenceError
from angiosynth.extractors import FeatureExtractor, random_extractor
from angiosynth.losses import (
    LossReport, LossTerms, LossWeights, cgan_loss, fm_loss, perceptual_loss, total_objective,
)
from angiosynth.metrics import as_double

from conftest import analytic_grad, numeric_grad, rel_err

GRAD_TOL = 1e-4


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def _double(*shape):
    return torch.randn(*shape, dtype=torch.float64)


# ---------------------------------------------------------------------- cgan

def test_cgan_discriminator_at_half_is_ln2():
    z = torch.zeros(1, 1, 5, 6, dtype=torch.float64)
    assert float(cgan_loss(z, z)) == pytest.approx(math.log(2), rel=1e-7)


def test_cgan_perfect_discriminator_goes_to_zero():
    assert float(cgan_loss(torch.full((4,), 40.0), torch.full((4,), -40.0))) < 1e-15


def test_cgan_generator_forms():
    z = torch.zeros(3)
    assert float(cgan_loss(z, z, side="generator")) == pytest.approx(math.log(2))
    assert float(cgan_loss(z, z, side="generator", literal=True)) == pytest.approx(-math.log(2))
    with pytest.raises(ValueError):
        cgan_loss(z, z, side="both")


@pytest.mark.parametrize("literal", [False, True])
def test_cgan_generator_gradient(literal):
    real = _double(8, 1, 5, 6)
    fn = lambda x: cgan_loss(real, x, side="generator", literal=literal)  # noqa: E731
    x = _double(8, 1, 5, 6)
    assert rel_err(analytic_grad(fn, x), numeric_grad(fn, x)) < GRAD_TOL


def test_cgan_discriminator_gradient():
    fake = _double(8, 1, 5, 6)
    fn = lambda x: cgan_loss(x, fake)  # noqa: E731
    x = _double(8, 1, 5, 6)
    assert rel_err(analytic_grad(fn, x), numeric_grad(fn, x)) < GRAD_TOL


# ------------------------------------------------------------------------ fm

def _stack():
    return [_double(2, 4, 6, 5), _double(2, 8, 3, 3)]


def test_fm_identical_is_zero():
    s = _stack()
    assert float(fm_loss(s, [t.clone() for t in s])) == 0.0


def test_fm_unit_offset_equals_layer_count():
    s = _stack()
    assert float(fm_loss(s, [t + 1 for t in s])) == pytest.approx(2.0, rel=1e-12)


def test_fm_symmetric_value_one_sided_gradient():
    a = [t.requires_grad_(True) for t in _stack()]
    b = [t.requires_grad_(True) for t in _stack()]
    with torch.no_grad():
        assert float(fm_loss(a, b)) == pytest.approx(float(fm_loss(b, a)), rel=1e-14)
    fm_loss(a, b).backward()
    assert all(t.grad is None for t in a)
    assert all(t.grad is not None for t in b)


def test_fm_gradient():
    real = _stack()
    shapes = [t.shape for t in real]
    sizes = [t.numel() for t in real]

    def fn(flat):
        parts = torch.split(flat, sizes)
        return fm_loss(real, [p.reshape(s) for p, s in zip(parts, shapes)])

    x = torch.cat([t.reshape(-1) for t in _stack()])
    assert rel_err(analytic_grad(fn, x), numeric_grad(fn, x)) < GRAD_TOL


def test_fm_layer_mismatch():
    with pytest.raises(ValueError):
        fm_loss(_stack(), _stack()[:1])
    with pytest.raises(ValueError):
        fm_loss([_double(1, 2, 3)], [_double(1, 2, 4)])


# ----------------------------------------------------------------- perceptual

def _identity_extractor():
    return FeatureExtractor([nn.Identity()], mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)).double()


def test_perceptual_identity_extractor_is_mean_abs_difference():
    a, b = torch.rand(2, 1, 8, 10, dtype=torch.float64), torch.rand(2, 1, 8, 10, dtype=torch.float64)
    out = perceptual_loss(a, b, _identity_extractor())
    assert float(out) == pytest.approx(float((a - b).abs().mean()), rel=1e-12)


def test_perceptual_equal_is_zero_and_nonnegative():
    ext = random_extractor(0)
    a = torch.rand(1, 1, 32, 40)
    assert float(perceptual_loss(a, a.clone(), ext)) == 0.0
    assert float(perceptual_loss(a, torch.rand(1, 1, 32, 40), ext)) > 0.0


def test_perceptual_gradient_random_extractor():
    ext = as_double(random_extractor(0))
    real = torch.rand(1, 1, 16, 20, dtype=torch.float64)
    fn = lambda x: perceptual_loss(real, x, ext)  # noqa: E731
    x = torch.rand(1, 1, 16, 20, dtype=torch.float64)
    assert rel_err(analytic_grad(fn, x), numeric_grad(fn, x)) < GRAD_TOL


def test_perceptual_without_extractor_is_explicit_error():
    a = torch.rand(1, 1, 8, 8)
    with pytest.raises(ConfigError):
        perceptual_loss(a, a, None)


def test_extractor_stays_frozen():
    ext = random_extractor(0)
    ext.train()
    assert not ext.training
    assert all(not p.requires_grad for p in ext.parameters())


# ------------------------------------------------------------------- objective

def _terms(cgan=1.0, fm=0.1, vgg=0.2):
    return LossTerms(cgan_d_c1=0.5, cgan_d_c2=0.5, cgan_d_f=0.5, cgan_g_c=cgan, cgan_g_f=cgan,
                     fm_c=[fm, fm], vgg_c=[vgg, vgg], fm_f=fm, vgg_f=vgg)


def test_objective_toy_values():
    g, d = total_objective(_terms(), LossWeights())
    assert g == pytest.approx(11.0)
    assert d == pytest.approx(1.5)


def test_objective_zero_weights_is_adversarial_only():
    g, _ = total_objective(_terms(), LossWeights(0.0, 0.0, 0.0, 0.0))
    assert g == pytest.approx(2.0)


def test_objective_identical_images_contribute_nothing():
    g, _ = total_objective(_terms(fm=0.0, vgg=0.0), LossWeights())
    assert g == pytest.approx(2.0)


@pytest.mark.parametrize("name,coef", [
    ("lambda_fm_c", 0.2), ("lambda_vgg_c", 0.4), ("lambda_fm_f", 0.1), ("lambda_vgg_f", 0.2),
])
def test_objective_affine_in_each_weight(name, coef):
    import dataclasses
    vals = [total_objective(_terms(), dataclasses.replace(LossWeights(), **{name: lam}))[0]
            for lam in (0.0, 1.0, 2.0)]
    assert vals[1] - vals[0] == pytest.approx(coef)
    assert vals[2] - vals[1] == pytest.approx(coef)


def test_nan_term_raises_divergence_with_name():
    t = _terms()
    t.fm_f = torch.tensor(float("nan"))
    with pytest.raises(DivergenceError, match="fm_f") as info:
        total_objective(t, LossWeights(), step=17)
    assert info.value.term == "fm_f" and info.value.step == 17


def test_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(lambda_fm_c=-1.0).validate()
    with pytest.raises(ConfigError):
        LossWeights(lambda_vgg_f=float("inf")).validate()


def test_report_json_round_trip():
    import json
    g, d = total_objective(_terms(), LossWeights())
    rep = LossReport.from_terms(3, _terms(), g, d)
    data = json.loads(rep.to_json())
    assert data["step"] == 3 and data["fm_c"] == pytest.approx(0.2) and data["total_g"] == pytest.approx(11)
