# -*- coding: utf-8 -*-
import numpy as np
import pytest

import fim_alchemy
from fim_alchemy import meanfield
from fim_alchemy.exceptions import (
    ConfigError,
    DomainError,
    CenteredNetworkError,
    PreconditionError,
    DegenerateRegimeError,
)


class TestArccosKernel(object):
    def test_values(self):
        assert meanfield.arccos_kernel(1.0) == pytest.approx(1.0)
        assert meanfield.arccos_kernel(0.0) == pytest.approx(1 / np.pi)
        assert meanfield.arccos_kernel(-1.0) == pytest.approx(0.0, abs=1e-15)

    def test_domain(self):
        with pytest.raises(DomainError):
            meanfield.arccos_kernel(1.5)


class TestActivation(object):
    def test_from_string(self):
        activation = meanfield.Activation.from_string('leaky_relu:0.2')
        assert activation.tag == 'leaky_relu'
        assert activation.slope == 0.2
        assert str(activation) == 'leaky_relu:0.2'
        assert meanfield.Activation.from_string('leaky_relu').slope == meanfield.DEFAULT_LEAKY_SLOPE

    @pytest.mark.parametrize('name', ['softmax', 'relu:0.1', 'leaky_relu:1.5', 'leaky_relu:x'])
    def test_invalid(self, name):
        with pytest.raises(ConfigError):
            meanfield.Activation.from_string(name)

    def test_centered(self):
        assert meanfield.get_activation('tanh').centered
        assert meanfield.get_activation('erf').centered
        assert meanfield.get_activation('linear').centered
        assert not meanfield.get_activation('relu').centered
        assert not meanfield.get_activation('sigmoid').centered

    def test_properties(self):
        assert meanfield.get_activation('relu').homogeneous
        assert not meanfield.get_activation('tanh').homogeneous
        assert meanfield.get_activation('sigmoid').nonnegative
        assert not meanfield.get_activation('leaky_relu').nonnegative

    @pytest.mark.parametrize('name', ['relu', 'leaky_relu:0.2', 'linear', 'erf'])
    def test_closed_forms_match_quadrature(self, name):
        activation = meanfield.get_activation(name)
        for method, args in [
            ('square', (1.3,)),
            ('overlap', (1.3, 0.4)),
            ('overlap', (1.3, -0.9)),
            ('deriv_square', (1.3,)),
            ('deriv_overlap', (1.3, 0.4)),
        ]:
            fast = getattr(activation, method)(*args, fast=True)
            slow = getattr(activation, method)(*args, fast=False)
            assert fast == pytest.approx(slow, abs=1e-6), (name, method, args)


class TestNetSpec(object):
    def test_defaults(self, relu_spec):
        assert relu_spec.alpha_full == [1.0, 1.0, 1.0]
        assert relu_spec.alpha_total == 2.0
        assert relu_spec.is_non_centered
        assert relu_spec.widths(16) == [16, 16, 16, 1]

    def test_centered(self, centered_spec):
        assert not centered_spec.is_non_centered

    def test_rounded_widths(self):
        spec = meanfield.NetSpec(L=3, alpha=[1.5, 1.0], C=2)
        assert spec.widths(3) == [3, 4, 3, 2]
        assert spec.widths_rounded(3)
        assert not spec.widths_rounded(4)

    @pytest.mark.parametrize('kwargs', [
        {'L': 1},
        {'L': 3, 'alpha': [1.0]},
        {'L': 3, 'C': 0},
        {'L': 3, 'sigma_w2': 0.0},
        {'L': 3, 'sigma_b2': -1.0},
        {'L': 3, 'norm_mode': 'groupnorm'},
        {'L': 3, 'activations': ['relu']},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            meanfield.NetSpec(**kwargs)

    def test_layernorm_narrow_widths(self):
        spec = meanfield.NetSpec(L=3, alpha=[0.5, 1.0], C=4, norm_mode='layernorm')
        assert spec.widths(4) == [4, 2, 4, 4]
        with pytest.raises(ConfigError):
            spec.widths(2)
        assert spec.replace(norm_mode='none').widths(2) == [2, 1, 2, 4]

    def test_replace(self, relu_spec):
        spec = relu_spec.replace(norm_mode='bn_last_meansub')
        assert spec.norm_mode == 'bn_last_meansub'
        assert relu_spec.norm_mode == 'none'
        assert spec.activations == relu_spec.activations


class TestOrderParams(object):
    def test_relu_forward(self, relu_spec):
        params = meanfield.forward_order_params(relu_spec)
        assert np.isnan(params.q_t[0])
        assert np.allclose(params.qhat_t, [1.0, 1.0, 1.0, 2.0])
        assert params.qhat_st[1] == pytest.approx(1 / np.pi, abs=1e-12)
        assert params.qhat_st[2] == pytest.approx(0.49371, abs=1e-4)
        assert params.qhat_t[3] == params.q_t[3]

    def test_relu_backward(self, relu_spec):
        params = meanfield.order_params(relu_spec)
        assert params.has_backward
        assert np.allclose(params.qtilde_t[1:], 1.0)
        assert params.qtilde_st[3] == 1.0
        assert params.qtilde_st[2] == pytest.approx(0.60312, abs=1e-4)
        assert params.qtilde_st[1] == pytest.approx(0.30156, abs=1e-4)

    def test_relu_kappas(self, relu_kappa):
        assert relu_kappa.kappa1 == pytest.approx(1.5, abs=1e-12)
        assert relu_kappa.kappa2 == pytest.approx(0.34285, abs=1e-4)
        assert relu_kappa.gap == pytest.approx(relu_kappa.kappa1 - relu_kappa.kappa2)
        assert not relu_kappa.centered

    def test_tanh_kappas_positive(self, tanh_spec):
        kappa = meanfield.kappas(tanh_spec, meanfield.order_params(tanh_spec))
        assert kappa.kappa1 > kappa.kappa2 > 0

    def test_centered_kappa2_vanishes(self):
        spec = meanfield.NetSpec(L=3, sigma_w2=1.5, sigma_b2=0.0, activations='tanh')
        kappa = meanfield.kappas(spec, meanfield.order_params(spec))
        assert abs(kappa.kappa2) < meanfield.KAPPA2_TOLERANCE
        assert kappa.centered

    def test_kappas_need_backward(self, relu_spec):
        with pytest.raises(ConfigError):
            meanfield.kappas(relu_spec, meanfield.forward_order_params(relu_spec))

    def test_layernorm_order_params(self, relu_spec):
        spec = relu_spec.replace(norm_mode='layernorm', C=4)
        params = meanfield.order_params(spec)
        assert params.mode == 'layernorm'
        assert np.allclose(params.q_t[1:], 1.0)
        assert params.qhat_st[1] == pytest.approx(1 / (2 * np.pi), abs=1e-12)
        assert np.all(np.abs(params.q_st[1:]) <= 1.0)

    def test_dispatcher_refuses_bn_middle(self, relu_spec):
        with pytest.raises(ConfigError):
            meanfield.order_params(relu_spec.replace(norm_mode='bn_middle'))

    def test_frozen(self, relu_spec):
        params = meanfield.order_params(relu_spec)
        with pytest.raises(ValueError):
            params.qhat_t[1] = 0.0


class TestKernelMatrix(object):
    def test_plain(self, relu_kappa):
        matrix = meanfield.kernel_matrix(relu_kappa, 4)
        assert np.allclose(np.diag(matrix), relu_kappa.kappa1)
        assert matrix[0, 1] == pytest.approx(relu_kappa.kappa2)

    def test_mean_subtracted(self, relu_kappa):
        T = 5
        matrix = meanfield.kernel_matrix(relu_kappa, T, mean_subtracted=True)
        gap = relu_kappa.gap
        assert matrix[0, 0] == pytest.approx(gap * (1 - 1 / T))
        assert matrix[0, 1] == pytest.approx(-gap / T)
        assert np.allclose(matrix.sum(axis=1), 0.0)


class TestPredictions(object):
    def test_unnormalized(self, relu_spec, relu_kappa):
        M = T = 512
        prediction = meanfield.predict_unnormalized(relu_spec, M, T)
        k1, k2 = relu_kappa.kappa1, relu_kappa.kappa2
        assert prediction.regime == 'unnormalized'
        assert prediction.m_lambda == pytest.approx(k1 / M)
        assert prediction.lambda_max_point == pytest.approx(2.0 * ((T - 1) / T * k2 + k1 / T) * M)
        assert prediction.rho == 1.0

    def test_unnormalized_needs_none_mode(self, relu_spec):
        with pytest.raises(ConfigError):
            meanfield.predict_unnormalized(relu_spec.replace(norm_mode='bn_last_meansub'), 64, 64)

    def test_centered_refused(self, centered_spec):
        with pytest.raises(CenteredNetworkError):
            meanfield.predict_unnormalized(centered_spec, 64, 64)

    def test_meansub_big_t(self, relu_spec, relu_kappa):
        spec = relu_spec.replace(norm_mode='bn_last_meansub')
        prediction = meanfield.predict_bn_last_meansub(spec, 512, 512)
        assert prediction.lambda_max_lower == pytest.approx(2.0 * relu_kappa.gap)
        assert prediction.lambda_max_lower >= 2.31
        assert prediction.lambda_max_upper == pytest.approx(np.sqrt(4.0 * relu_kappa.gap ** 2 * 512))
        assert prediction.metadata['modulo_constants']
        assert prediction.consistent

    def test_meansub_small_t(self, relu_spec, relu_kappa):
        spec = relu_spec.replace(norm_mode='bn_last_meansub')
        prediction = meanfield.predict_bn_last_meansub(spec, 1000, 10, regime='small_t')
        assert prediction.regime == 'bn_last_meansub_smallT'
        assert prediction.lambda_max_point == pytest.approx(2.0 * relu_kappa.gap * 100)

    @pytest.mark.parametrize('rate,lower,upper', [(0.3, 0.4, 0.7), (0.8, 0.0, 0.5)])
    def test_convergence_rate(self, relu_spec, rate, lower, upper):
        spec = relu_spec.replace(norm_mode='bn_last_meansub')
        metadata = meanfield.predict_bn_last_meansub(spec, 64, 64, convergence_rate=rate).metadata
        assert metadata['lower_exponent'] == pytest.approx(lower)
        assert metadata['upper_exponent'] == pytest.approx(upper)

    def test_meansub_single_sample(self, relu_spec):
        with pytest.raises(DegenerateRegimeError):
            meanfield.predict_bn_last_meansub(relu_spec.replace(norm_mode='bn_last_meansub'), 64, 1)

    def test_bn_last_full(self, relu_spec, relu_kappa):
        spec = relu_spec.replace(norm_mode='bn_last_full')
        prediction = meanfield.predict_bn_last_full(spec, 256, 256, [0.5])
        assert prediction.metadata['Q1'] == pytest.approx(4.0)
        assert prediction.metadata['Q2'] == pytest.approx(16.0)
        assert prediction.m_lambda == pytest.approx(4.0 * relu_kappa.gap / 256)
        with pytest.raises(DomainError):
            meanfield.predict_bn_last_full(spec, 256, 256, [0.0])
        with pytest.raises(ConfigError):
            meanfield.predict_bn_last_full(spec, 256, 256, [1.0, 1.0])

    def test_bn_last_full_unit_deviations(self, multi_output_spec):
        full = meanfield.predict_bn_last_full(multi_output_spec.replace(norm_mode='bn_last_full'), 128, 64, [1.0] * 4)
        meansub = meanfield.predict_bn_last_meansub(multi_output_spec.replace(norm_mode='bn_last_meansub'), 128, 64)
        assert full.metadata['Q1'] == full.metadata['Q2'] == 4.0
        assert full.lambda_max_lower == pytest.approx(meansub.lambda_max_lower)
        assert full.lambda_max_upper == pytest.approx(meansub.lambda_max_upper)
        assert full.m_lambda * (1 - 1 / 64) == pytest.approx(meansub.m_lambda)

    def test_mean_subtraction_ratio_vanishes(self, relu_spec, relu_kappa):
        meansub = relu_spec.replace(norm_mode='bn_last_meansub')
        ratios = []
        for M in [2 ** n for n in range(6, 15)]:
            upper = meanfield.predict_bn_last_meansub(meansub, M, M, kappa=relu_kappa).lambda_max_upper
            plain = meanfield.predict_unnormalized(relu_spec, M, M, kappa=relu_kappa).lambda_max_point
            ratios.append(upper / plain)
        assert all(b < a for a, b in zip(ratios, ratios[1:]))
        assert ratios[-1] < ratios[0] / 10
        assert ratios[-1] < 0.05

    def test_bn_middle_relu_closed_form(self, relu_spec):
        spec = relu_spec.replace(norm_mode='bn_middle')
        T = 100
        params = meanfield.bn_middle_order_params(spec, T)
        assert params.method == ['closed_form', 'closed_form']
        expected_st = 0.5 * meanfield.arccos_kernel(-1 / (T - 1))
        assert params.qhat_t[2] == pytest.approx(0.5)
        assert params.qhat_st[2] == pytest.approx(expected_st)
        prediction = meanfield.predict_bn_middle_lower_bound(spec, 128, T, params)
        assert prediction.lambda_max_lower == pytest.approx(((T - 1) / T * expected_st + 0.5 / T) * 128)
        assert prediction.lambda_max_upper is None

    def test_bn_middle_monte_carlo(self):
        spec = meanfield.NetSpec(L=3, sigma_w2=2.0, sigma_b2=0.1, activations='sigmoid', norm_mode='bn_middle')
        first = meanfield.bn_middle_order_params(spec, 10, mc_samples=10000, seed=3)
        second = meanfield.bn_middle_order_params(spec, 10, mc_samples=10000, seed=3)
        assert first.method == ['monte_carlo', 'monte_carlo']
        assert np.array_equal(first.qhat_t, second.qhat_t)
        assert 0.0 < first.qhat_st[1] < first.qhat_t[1] < 1.0

    def test_bn_middle_degenerate(self, relu_spec):
        with pytest.raises(DegenerateRegimeError):
            meanfield.bn_middle_order_params(relu_spec.replace(norm_mode='bn_middle'), 2)

    def test_bn_middle_precondition(self, tanh_spec):
        with pytest.raises(PreconditionError):
            meanfield.predict_bn_middle_lower_bound(tanh_spec.replace(norm_mode='bn_middle'), 128, 100)

    def test_layernorm(self, relu_spec):
        spec = relu_spec.replace(norm_mode='layernorm', C=4)
        kappa = meanfield.kappas(spec, meanfield.order_params(spec))
        prediction = meanfield.predict_layernorm(spec, 128, 100, eta={'eta1': 1.0, 'eta2': 1.0, 'eta3': 0.0})
        assert prediction.m_lambda == pytest.approx(2 * kappa.kappa1 / 128)
        assert prediction.metadata['C'] == 4
        assert prediction.s_lambda == pytest.approx(spec.alpha_total * prediction.metadata['s'])

    def test_layernorm_two_outputs(self, relu_spec):
        spec = relu_spec.replace(norm_mode='layernorm', C=2)
        with pytest.raises(DegenerateRegimeError):
            meanfield.predict_layernorm(spec, 128, 100, eta=(1.0, 1.0, 1.0))

    def test_layernorm_needs_statistics(self, relu_spec):
        with pytest.raises(ConfigError):
            meanfield.predict_layernorm(relu_spec.replace(norm_mode='layernorm', C=4), 128, 100)

    def test_negative_prediction_refused(self):
        with pytest.raises(DomainError):
            fim_alchemy.TheoryPrediction('unnormalized', 10, 10, m_lambda=-1.0)
