# -*- coding: utf-8 -*-
import os
import json

import pytest
from click.testing import CliRunner

from fim_alchemy.cmd import fim_alchemy


@pytest.fixture
def invoke(tmp_path):
    runner = CliRunner()
    log = str(tmp_path / 'fim-alchemy.log')

    def run(*args):
        return runner.invoke(fim_alchemy, ['-l', log] + list(args))
    return run


@pytest.fixture
def out_dir(tmp_path):
    return str(tmp_path / 'out')


class TestPredict(object):
    def test_predictions_written(self, invoke, config_file, out_dir):
        result = invoke('predict', '-c', config_file(M_grid=[16]), '-o', out_dir)
        assert result.exit_code == 0, result.output
        assert 'Predictions were saved to' in result.output
        with open(os.path.join(out_dir, 'predictions.json')) as fp:
            data = json.load(fp)
        assert data['kind'] == 'predict_only'
        assert len(data['records']) == 4

    def test_unknown_key(self, invoke, config_file, out_dir):
        result = invoke('predict', '-c', config_file(epochs=3), '-o', out_dir)
        assert result.exit_code == 2

    def test_kind_mismatch(self, invoke, config_file, out_dir):
        result = invoke('predict', '-c', config_file(kind='convrate'), '-o', out_dir)
        assert result.exit_code == 2

    def test_missing_config(self, invoke, tmp_path, out_dir):
        result = invoke('predict', '-c', str(tmp_path / 'none.json'), '-o', out_dir)
        assert result.exit_code == 2

    def test_centered_network(self, invoke, config_file, out_dir):
        spec = {'L': 3, 'sigma_w2': 1.0, 'sigma_b2': 0.0, 'activations': 'linear'}
        result = invoke('predict', '-c', config_file(spec=spec, M_grid=[16]), '-o', out_dir)
        assert result.exit_code == 3
        assert os.path.exists(os.path.join(out_dir, 'predictions.json'))

    def test_layernorm_two_outputs(self, invoke, config_file, out_dir):
        spec = {'L': 3, 'C': 2, 'sigma_w2': 3.0, 'sigma_b2': 0.64, 'activations': 'tanh', 'norm_mode': 'layernorm'}
        result = invoke('predict', '-c', config_file(spec=spec, M_grid=[16]), '-o', out_dir)
        assert result.exit_code == 3

    def test_layernorm_without_statistics(self, invoke, config_file, out_dir):
        spec = {'L': 3, 'C': 4, 'sigma_w2': 3.0, 'sigma_b2': 0.64, 'activations': 'tanh', 'norm_mode': 'layernorm'}
        result = invoke('predict', '-c', config_file(spec=spec, M_grid=[16]), '-o', out_dir)
        assert result.exit_code == 2


class TestSpectrum(object):
    def test_spectrum_written(self, invoke, config_file, out_dir):
        result = invoke('spectrum', '-c', config_file(M_grid=[8], T_rule=6), '-o', out_dir, '-s', '4')
        assert result.exit_code == 0, result.output
        assert 'lambda_max' in result.output
        with open(os.path.join(out_dir, 'spectrum.json')) as fp:
            data = json.load(fp)
        assert data['seed'] == 4
        assert len(data['spectrum']['eigenvalues']) == 6


class TestExperiments(object):
    def test_fig1(self, invoke, config_file, out_dir):
        config = config_file(M_grid=[4, 8], ensembles=2)
        result = invoke('fig1', '-c', config, '-o', out_dir, '-t', '2', '-s', '5')
        assert result.exit_code == 0, result.output
        assert 'log-log slope' in result.output
        for name in ['fig1.csv', 'fig1_members.csv', 'metadata.json', 'plot.gp']:
            assert os.path.exists(os.path.join(out_dir, name))
        with open(os.path.join(out_dir, 'metadata.json')) as fp:
            metadata = json.load(fp)
        assert metadata['config']['master_seed'] == 5
        assert 'threads' not in metadata['config']

    def test_convrate(self, invoke, config_file, out_dir):
        config = config_file(M_grid=[8, 16], T_rule=5, ensembles=3)
        result = invoke('convrate', '-c', config, '-o', out_dir)
        assert result.exit_code == 0, result.output
        assert os.path.exists(os.path.join(out_dir, 'convrate.csv'))

    def test_convrate_single_member(self, invoke, config_file, out_dir):
        result = invoke('convrate', '-c', config_file(M_grid=[8], ensembles=1), '-o', out_dir)
        assert result.exit_code == 2

    def test_phase(self, invoke, config_file, out_dir):
        config = config_file(
            M_grid=[4], T_rule=6, steps=5, trials=3,
            eta_grid={'start': 1e-2, 'stop': 1.0, 'per_decade': 1},
        )
        result = invoke('phase', '-c', config, '-o', out_dir, '-n', '1')
        assert result.exit_code == 0, result.output
        assert 'smallest exploding eta' in result.output
        with open(os.path.join(out_dir, 'metadata.json')) as fp:
            assert json.load(fp)['config']['trials'] == 1

    def test_invalid_profile(self, invoke, config_file, out_dir):
        result = invoke('fig1', '-c', config_file(), '-o', out_dir, '-p', 'huge')
        assert result.exit_code == 2
