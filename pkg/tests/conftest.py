# -*- coding: utf-8 -*-
import json

import pytest

import fim_alchemy


@pytest.fixture
def relu_spec():
    return fim_alchemy.NetSpec(L=3, C=1, sigma_w2=2.0, sigma_b2=0.0, activations='relu')


@pytest.fixture
def tanh_spec():
    return fim_alchemy.NetSpec(L=3, C=1, sigma_w2=3.0, sigma_b2=0.64, activations='tanh')


@pytest.fixture
def phase_spec():
    return fim_alchemy.NetSpec(L=3, C=1, sigma_w2=4.0, sigma_b2=1.0, activations='relu')


@pytest.fixture
def centered_spec():
    return fim_alchemy.NetSpec(L=3, C=1, sigma_w2=1.0, sigma_b2=0.0, activations='linear')


@pytest.fixture
def multi_output_spec():
    return fim_alchemy.NetSpec(L=3, C=4, sigma_w2=3.0, sigma_b2=0.64, activations='tanh')


@pytest.fixture
def relu_kappa(relu_spec):
    return fim_alchemy.kappas(relu_spec, fim_alchemy.order_params(relu_spec))


@pytest.fixture
def small_network(tanh_spec):
    params = fim_alchemy.init_params(tanh_spec, 4, seed=11)
    batch = fim_alchemy.make_batch(tanh_spec, 4, 5, seed=11)
    return params, batch


@pytest.fixture
def multi_output_network(multi_output_spec):
    params = fim_alchemy.init_params(multi_output_spec, 4, seed=7)
    batch = fim_alchemy.make_batch(multi_output_spec, 4, 5, seed=7)
    return params, batch


@pytest.fixture
def spec_data():
    return {
        'L': 3,
        'C': 1,
        'sigma_w2': 2.0,
        'sigma_b2': 0.0,
        'activations': 'relu',
    }


@pytest.fixture
def config_file(tmp_path, spec_data):
    def write(**fields):
        data = {'spec': dict(spec_data)}
        data.update(fields)
        file = tmp_path / 'config.json'
        with open(file, 'w') as fp:
            json.dump(data, fp)
        return str(file)
    return write
