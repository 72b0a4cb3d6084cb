# -*- coding: utf-8 -*-
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
import pytest

from fim_alchemy import experiments, netlab, meanfield
from fim_alchemy.exceptions import ConfigError, NumericalError
from fim_alchemy.experiments import ExperimentConfig


def fig1_config(spec, **fields):
    kwargs = dict(M_grid=[4, 8], T_rule='M', ensembles=3, modes=['none', 'bn_last_meansub'])
    kwargs.update(fields)
    return ExperimentConfig('fig1_sharpness', spec, **kwargs)


def phase_config(spec, **fields):
    kwargs = dict(
        M_grid=[4, 8], T_rule=10, steps=20, trials=1,
        eta_grid={'start': 1e-2, 'stop': 1e1, 'per_decade': 2},
    )
    kwargs.update(fields)
    return ExperimentConfig('phase_diagram', spec, **kwargs)


def read_bytes(directory, name):
    with open(os.path.join(directory, name), 'rb') as fp:
        return fp.read()


def check_boundaries(diagram, config):
    """unnormalized boundary within one grid step of 2/lambda_max, mean-subtracted one flat within a decade"""
    step = 10 ** (1 / config.eta_grid['per_decade'])
    overlays = diagram.overlays[diagram.overlays['mode'] == 'none'].set_index('M')
    for M, eta in diagram.boundary('none').items():
        sharpness_eta = 2.0 / overlays.loc[M, 'lambda_max']
        assert sharpness_eta / step <= eta <= sharpness_eta * step, (M, eta, sharpness_eta)
    meansub = list(diagram.boundary('bn_last_meansub').values())
    assert np.all(np.isfinite(meansub))
    assert max(meansub) / min(meansub) < 10.0


class TestResolveT(object):
    @pytest.mark.parametrize('rule,M,T', [
        ('M', 64, 64),
        (100, 64, 100),
        ('100', 64, 100),
        ('M/4', 64, 16),
        ('M / 3', 10, 3),
        ('M/1000', 10, 1),
    ])
    def test_rules(self, rule, M, T):
        assert experiments.resolve_T(rule, M) == T

    @pytest.mark.parametrize('rule', ['N', 'M/0', 'M/x', 0, 2.5, True])
    def test_invalid_rules(self, rule):
        with pytest.raises(ConfigError):
            experiments.resolve_T(rule, 8)


class TestExperimentConfig(object):
    def test_profile_defaults(self, relu_spec):
        config = ExperimentConfig('phase_diagram', relu_spec)
        assert config.M_grid == [64, 128, 256]
        assert config.T_for(64) == 1000
        assert config.modes == ['none', 'bn_last_meansub']
        assert config.steps == 500
        etas = config.etas()
        assert etas.size == 201
        assert etas[0] == pytest.approx(1e-4)
        assert etas[1] / etas[0] == pytest.approx(10 ** (1 / 40))

    def test_full_profile(self, relu_spec):
        config = ExperimentConfig('phase_diagram', relu_spec, profile='full')
        assert config.etas().size == 201
        assert config.trials == 5

    def test_spec_mode_default(self, relu_spec):
        spec = relu_spec.replace(norm_mode='bn_middle')
        assert ExperimentConfig('spectrum_once', spec).modes == ['bn_middle']

    @pytest.mark.parametrize('fields', [
        {'kind': 'fig2'},
        {'profile': 'huge'},
        {'M_grid': []},
        {'M_grid': [0]},
        {'T_rule': 'N'},
        {'ensembles': 0},
        {'steps': -1},
        {'threshold': 0.0},
        {'threads': 0},
        {'master_seed': -1},
        {'modes': ['groupnorm']},
        {'eta_grid': {'start': 1e-2, 'stop': 1.0}},
        {'eta_grid': {'start': 1.0, 'stop': 1e-2, 'per_decade': 4}},
    ])
    def test_invalid(self, relu_spec, fields):
        kwargs = {'kind': 'fig1_sharpness', 'spec': relu_spec}
        kwargs.update(fields)
        with pytest.raises(ConfigError):
            ExperimentConfig(**kwargs)

    def test_replace(self, relu_spec):
        config = fig1_config(relu_spec)
        other = config.replace(threads=4)
        assert other.threads == 4
        assert other.M_grid == config.M_grid
        assert other != config
        assert other.replace(threads=1) == config

    def test_member_seeds(self, relu_spec):
        config = fig1_config(relu_spec, master_seed=5)
        assert config.member_seed(0, 1) == config.member_seed(0, 1)
        assert config.member_seed(0, 1) != config.member_seed(1, 0)
        assert config.member_seed(0, 1) != fig1_config(relu_spec, master_seed=6).member_seed(0, 1)


class TestDescend(object):
    @staticmethod
    def quadratic(theta):
        return 2.0 * float(theta @ theta), 4.0 * theta

    def test_converges_below_two_over_lambda(self):
        run, theta = experiments.descend(np.array([1.0]), self.quadratic, 0.4, 50)
        assert not run.diverged
        assert len(run) == 51
        assert run.final < 1e-15
        assert abs(theta[0]) < 1e-8

    def test_diverges_above_two_over_lambda(self):
        run, _ = experiments.descend(np.array([1.0]), self.quadratic, 0.6, 50)
        assert run.diverged
        assert not run.nonfinite
        assert run.final > 1e3
        assert len(run) < 51
        assert run.minimum == pytest.approx(2.0)

    def test_nonfinite_loss(self):
        run, _ = experiments.descend(np.array([1.0]), lambda theta: (float('nan'), None), 0.1, 10)
        assert run.diverged
        assert run.nonfinite
        assert len(run) == 1
        assert np.isnan(run.minimum)

    def test_zero_steps(self):
        run, theta = experiments.descend(np.array([1.0]), self.quadratic, 0.4, 0)
        assert run.losses == [2.0]
        assert theta[0] == 1.0

    def test_negative_rate(self):
        with pytest.raises(ConfigError):
            experiments.descend(np.array([1.0]), self.quadratic, -0.1, 5)


class TestTraining(object):
    def test_zero_rate_keeps_loss(self, small_network):
        params, batch = small_network
        labels = np.zeros((1, 5))
        run = experiments.gd_train(params, batch, labels, 0.0, 5)
        assert len(run) == 6
        assert len(set(run.losses)) == 1

    def test_small_rate_decreases_loss(self, small_network):
        params, batch = small_network
        labels = np.ones((1, 5))
        run = experiments.gd_train(params, batch, labels, 1e-3, 10)
        assert not run.diverged
        assert run.final < run.losses[0]

    def test_teacher_of_the_same_seed(self, tanh_spec):
        params = netlab.init_params(tanh_spec, 4, seed=3)
        batch = netlab.make_batch(tanh_spec, 4, 6, seed=3)
        labels = experiments.make_teacher_labels(tanh_spec, 4, 6, 3, batch=batch)
        assert labels.shape == (1, 6)
        run = experiments.gd_train(params, batch, labels, 0.1, 3)
        assert run.losses[0] == pytest.approx(0.0, abs=1e-20)

    def test_teacher_batch_size(self, tanh_spec):
        batch = netlab.make_batch(tanh_spec, 4, 6, seed=3)
        with pytest.raises(ConfigError):
            experiments.make_teacher_labels(tanh_spec, 4, 5, 3, batch=batch)


class TestTheoryCache(object):
    def test_shared_across_threads(self, relu_spec):
        cache = experiments._TheoryCache(fig1_config(relu_spec))
        with ThreadPoolExecutor(max_workers=8) as pool:
            values = list(pool.map(cache.kappa, ['none', 'bn_last_meansub'] * 8))
        assert all(kappa is values[0] for kappa in values)
        with ThreadPoolExecutor(max_workers=4) as pool:
            middle = list(pool.map(cache.bn_middle, [10] * 8))
        assert all(params is middle[0] for params in middle)


class TestFig1(object):
    def test_tables(self, relu_spec):
        result = experiments.run_fig1(fig1_config(relu_spec))
        assert len(result.members) == 2 * 2 * 3
        assert len(result.summary) == 4
        for column in experiments.FIG1_COLUMNS:
            assert column in result.summary.columns
        assert set(result.fit) == {'none', 'bn_last_meansub'}
        assert 'none' in result.theory['kappa']
        assert (result.members['lambda_max'] > 0).all()

    def test_theory_overlay(self, relu_spec, relu_kappa):
        result = experiments.run_fig1(fig1_config(relu_spec))
        row = result.summary[(result.summary['mode'] == 'none') & (result.summary['M'] == 8)].iloc[0]
        expected = meanfield.predict_unnormalized(relu_spec, 8, 8, kappa=relu_kappa).lambda_max_point
        assert row['theory_value'] == pytest.approx(expected)
        assert row['theory_kind'] == 'point'
        meansub = result.summary[result.summary['mode'] == 'bn_last_meansub']
        assert (meansub['theory_kind'] == 'lower_bound').all()

    def test_member_seeds_recorded(self, relu_spec):
        config = fig1_config(relu_spec)
        members = experiments.run_fig1(config).members
        first = members[(members['M'] == 8) & (members['member'] == 2)].iloc[0]
        assert first['seed'] == config.member_seed(1, 2)

    def test_thread_count_does_not_change_results(self, relu_spec):
        single = experiments.run_fig1(fig1_config(relu_spec, threads=1))
        pooled = experiments.run_fig1(fig1_config(relu_spec, threads=3))
        pd.testing.assert_frame_equal(single.members, pooled.members)
        pd.testing.assert_frame_equal(single.summary, pooled.summary)

    def test_wrong_kind(self, relu_spec):
        with pytest.raises(ConfigError):
            experiments.run_fig1(ExperimentConfig('convrate', relu_spec, M_grid=[4], ensembles=2))

    def test_layernorm_mode(self, multi_output_spec):
        config = fig1_config(multi_output_spec, M_grid=[8], ensembles=2, modes=['layernorm'])
        result = experiments.run_fig1(config)
        assert (result.members['theory_kind'] == 'lower_bound').all()
        assert result.fit == {}

    @pytest.mark.slow
    def test_meansub_suppresses_growth(self, relu_spec):
        config = ExperimentConfig(
            'fig1_sharpness', relu_spec, M_grid=[64, 128, 256], T_rule='M', ensembles=5,
        )
        result = experiments.run_fig1(config)
        assert result.fit['none']['slope'] > 0.8
        assert abs(result.fit['bn_last_meansub']['slope']) < 0.3


class TestResultFiles(object):
    def test_round_trip(self, relu_spec, tmp_path):
        config = fig1_config(relu_spec, modes=['none', 'bn_last_meansub', 'bn_middle'])
        files = experiments.write_results(experiments.run_fig1(config), str(tmp_path))
        names = sorted(os.path.basename(f) for f in files)
        assert names == ['fig1.csv', 'fig1_members.csv', 'metadata.json', 'plot.gp']
        loaded = experiments.load_results(str(tmp_path))
        assert loaded['config'] == config
        assert list(loaded['tables']['fig1'].columns[:7]) == experiments.FIG1_COLUMNS
        assert experiments.verify_theory_overlays(loaded) == 6

    def test_stale_overlay(self, relu_spec, tmp_path):
        experiments.write_results(experiments.run_fig1(fig1_config(relu_spec)), str(tmp_path))
        file = os.path.join(str(tmp_path), 'fig1.csv')
        table = pd.read_csv(file)
        table.loc[0, 'theory_value'] *= 1.01
        table.to_csv(file, index=False)
        with pytest.raises(NumericalError):
            experiments.verify_theory_overlays(experiments.load_results(str(tmp_path)))

    def test_byte_identical(self, relu_spec, tmp_path):
        first = str(tmp_path / 'first')
        second = str(tmp_path / 'second')
        experiments.write_results(experiments.run_fig1(fig1_config(relu_spec, threads=1)), first)
        experiments.write_results(experiments.run_fig1(fig1_config(relu_spec, threads=2)), second)
        for name in ['fig1.csv', 'fig1_members.csv', 'metadata.json', 'plot.gp']:
            assert read_bytes(first, name) == read_bytes(second, name)

    def test_missing_metadata(self, tmp_path):
        with pytest.raises(ConfigError):
            experiments.load_results(str(tmp_path))

    def test_dict_results_refused(self, relu_spec, tmp_path):
        config = ExperimentConfig('predict_only', relu_spec, M_grid=[16])
        with pytest.raises(ConfigError):
            experiments.write_results(experiments.predict_only(config), str(tmp_path))


class TestConvrate(object):
    def test_tables(self, relu_spec, tmp_path):
        config = ExperimentConfig('convrate', relu_spec, M_grid=[8, 16, 32], T_rule=5, ensembles=4)
        result = experiments.run_convrate(config)
        assert len(result.members) == 12
        assert list(result.summary['M']) == [8, 16, 32]
        assert (result.summary['ensemble_std'] > 0).all()
        assert result.summary['theory_value'].iloc[0] == pytest.approx(0.30156, rel=1e-3)
        assert 'qtilde_st_1' in result.fit
        experiments.write_results(result, str(tmp_path))
        loaded = experiments.load_results(str(tmp_path))
        assert experiments.verify_theory_overlays(loaded) == 3
        assert 'convrate_members' in loaded['tables']

    def test_single_member_refused(self, relu_spec):
        config = ExperimentConfig('convrate', relu_spec, M_grid=[8], ensembles=1)
        with pytest.raises(ConfigError):
            experiments.run_convrate(config)

    def test_normalized_spec_refused(self, relu_spec):
        spec = relu_spec.replace(norm_mode='bn_last_meansub')
        config = ExperimentConfig('convrate', spec, M_grid=[8], ensembles=2)
        with pytest.raises(ConfigError):
            experiments.run_convrate(config)

    @pytest.mark.slow
    @pytest.mark.parametrize('name', ['relu_spec', 'tanh_spec'])
    def test_rate(self, request, name):
        spec = request.getfixturevalue(name)
        config = ExperimentConfig(
            'convrate', spec, M_grid=[64, 256, 1024], T_rule=100, ensembles=100, threads=4,
        )
        slope = experiments.run_convrate(config).fit['qtilde_st_1']['slope']
        assert slope == pytest.approx(-0.5, abs=0.1)


class TestPhaseDiagram(object):
    def test_grid(self, phase_spec):
        diagram = experiments.run_phase_diagram(phase_config(phase_spec))
        assert len(diagram.cells) == 28
        assert len(diagram.overlays) == 4
        assert sorted(diagram.cells['eta'].unique()) == pytest.approx(np.logspace(-2, 1, 7))
        finished = diagram.cells[~diagram.cells['diverged']]
        assert (finished['steps_run'] == 20).all()
        assert (diagram.cells['steps_run'] <= 20).all()

    def test_same_start_for_every_rate(self, phase_spec):
        cells = experiments.run_phase_diagram(phase_config(phase_spec)).cells
        spread = cells.groupby(['mode', 'M', 'trial'])['initial_loss'].nunique()
        assert (spread == 1).all()

    def test_largest_rate_explodes(self, phase_spec):
        diagram = experiments.run_phase_diagram(phase_config(phase_spec))
        mask = diagram.explosion_mask('none')
        assert mask.columns[-1] == pytest.approx(10.0)
        assert mask.iloc[:, -1].all()
        boundary = diagram.boundary('none')
        assert sorted(boundary) == [4, 8]
        assert all(eta <= 10.0 for eta in boundary.values())
        assert diagram.loss_grid('none').shape == (2, 7)

    def test_measured_overlay(self, phase_spec):
        overlays = experiments.run_phase_diagram(phase_config(phase_spec)).overlays
        plain = overlays[overlays['mode'] == 'none']
        assert np.allclose(plain['theory_eta'], 2.0 / plain['lambda_max'])

    def test_boundary_follows_sharpness(self, phase_spec):
        config = phase_config(
            phase_spec, M_grid=[16, 32], T_rule=50, steps=200,
            eta_grid={'start': 1e-4, 'stop': 1e1, 'per_decade': 5},
        )
        check_boundaries(experiments.run_phase_diagram(config), config)

    @pytest.mark.slow
    def test_desk_boundary_follows_sharpness(self, phase_spec):
        config = ExperimentConfig('phase_diagram', phase_spec, threads=4)
        check_boundaries(experiments.run_phase_diagram(config), config)

    def test_thread_count_does_not_change_results(self, phase_spec):
        single = experiments.run_phase_diagram(phase_config(phase_spec, threads=1))
        pooled = experiments.run_phase_diagram(phase_config(phase_spec, threads=4))
        pd.testing.assert_frame_equal(single.cells, pooled.cells)
        pd.testing.assert_frame_equal(single.overlays, pooled.overlays)

    def test_files(self, phase_spec, tmp_path):
        files = experiments.write_results(experiments.run_phase_diagram(phase_config(phase_spec)), str(tmp_path))
        assert sorted(os.path.basename(f) for f in files) == [
            'metadata.json', 'phase.csv', 'phase_overlay.csv', 'plot.gp',
        ]
        loaded = experiments.load_results(str(tmp_path))
        assert set(loaded['metadata']['boundaries']) == {'none', 'bn_last_meansub'}
        assert experiments.verify_theory_overlays(loaded) == 2


class TestPredictOnly(object):
    def test_records(self, relu_spec):
        config = ExperimentConfig('predict_only', relu_spec, M_grid=[16, 32])
        records = experiments.predict_only(config)['records']
        assert len(records) == 8
        assert [r['regime'] for r in records[:4]] == [
            'unnormalized', 'bn_last_meansub_smallT', 'bn_last_meansub_bigT', 'bn_middle_bound',
        ]
        assert all(r['error'] is None for r in records)
        first = records[0]['prediction']
        assert first['M'] == 16 and first['T'] == 16

    def test_optional_regimes(self, multi_output_spec):
        spec = multi_output_spec.replace(norm_mode='layernorm')
        config = ExperimentConfig(
            'predict_only', spec, M_grid=[16], sigma_k=[1.0, 1.0, 1.0, 1.0],
            eta={'eta1': 1.0, 'eta2': 1.2, 'eta3': 0.3},
        )
        regimes = [r['regime'] for r in experiments.predict_only(config)['records']]
        assert 'bn_last_full_bigT' in regimes
        assert 'layernorm' in regimes

    def test_centered_network(self, centered_spec):
        config = ExperimentConfig('predict_only', centered_spec, M_grid=[16])
        predictions = experiments.predict_only(config)
        error = experiments.own_regime_error(predictions, centered_spec)
        assert error['type'] == 'CenteredNetworkError'
        assert error['exit_code'] == 3

    def test_layernorm_without_statistics(self, multi_output_spec):
        spec = multi_output_spec.replace(norm_mode='layernorm')
        predictions = experiments.predict_only(ExperimentConfig('predict_only', spec, M_grid=[16]))
        error = experiments.own_regime_error(predictions, spec)
        assert error['category'] == 'config'
        assert error['exit_code'] == 2

    def test_layernorm_two_outputs(self, tanh_spec):
        spec = tanh_spec.replace(C=2, norm_mode='layernorm')
        predictions = experiments.predict_only(ExperimentConfig('predict_only', spec, M_grid=[16]))
        assert experiments.own_regime_error(predictions, spec)['exit_code'] == 3

    def test_written(self, relu_spec, tmp_path):
        config = ExperimentConfig('predict_only', relu_spec, M_grid=[16])
        file = experiments.write_predictions(experiments.predict_only(config), config, 'predictions', str(tmp_path))
        assert os.path.basename(file) == 'predictions.json'
        assert 'threads' not in read_bytes(str(tmp_path), 'predictions.json').decode('utf-8')


class TestSpectrumOnce(object):
    def test_result(self, tanh_spec):
        config = ExperimentConfig('spectrum_once', tanh_spec, M_grid=[8], T_rule=6, master_seed=2)
        result = experiments.spectrum_once(config)
        assert result['P'] == netlab.init_params(tanh_spec, 8, 2).num_params
        assert len(result['spectrum']['eigenvalues']) == 6
        assert result['alignment']['cosines'][0] <= 1.0
        assert result['alignment_error'] is None
        assert result['prediction']['regime'] == 'unnormalized'

    def test_centered_network(self, centered_spec):
        config = ExperimentConfig('spectrum_once', centered_spec, M_grid=[8], T_rule=6)
        result = experiments.spectrum_once(config)
        assert result['alignment'] is None
        assert result['alignment_error']['category'] == 'degenerate'
        assert result['prediction'] is None

    def test_readout_statistics(self, multi_output_spec):
        spec = multi_output_spec.replace(norm_mode='bn_last_full')
        config = ExperimentConfig('spectrum_once', spec, M_grid=[8], T_rule=6)
        result = experiments.spectrum_once(config)
        assert len(result['readout_stats']['sigma_k']) == 4
        assert result['prediction']['regime'] == 'bn_last_full_bigT'

    def test_dispatch(self, tanh_spec):
        config = ExperimentConfig('spectrum_once', tanh_spec, M_grid=[8], T_rule=6)
        assert experiments.run(config)['M'] == 8


@pytest.mark.slow
class TestWideEnsembles(object):
    @pytest.mark.parametrize('name', ['relu_spec', 'tanh_spec'])
    def test_unnormalized_sharpness(self, request, name):
        config = ExperimentConfig(
            'fig1_sharpness', request.getfixturevalue(name), M_grid=[128, 256, 512], T_rule=100,
            ensembles=50, modes=['none'], threads=4,
        )
        summary = experiments.run_fig1(config).summary
        ratio = summary['ensemble_mean_lambda_max'] / summary['theory_value']
        assert ((ratio > 0.85) & (ratio < 1.15)).all()
        ratio = summary['mean_m_lambda'] / summary['theory_m_lambda']
        assert ((ratio > 0.85) & (ratio < 1.15)).all()

    def test_mean_subtraction_alleviates(self, relu_spec):
        config = ExperimentConfig('fig1_sharpness', relu_spec, M_grid=[128, 256, 512], T_rule='M', ensembles=3)
        result = experiments.run_fig1(config)
        members = result.members
        meansub = members[members['mode'] == 'bn_last_meansub']
        assert (meansub['lambda_max'] >= meansub['theory_value']).all()
        assert result.fit['bn_last_meansub']['slope'] <= 0.55
        assert result.fit['none']['slope'] >= 0.9
        widest = result.summary[result.summary['M'] == 512].set_index('mode')['ensemble_mean_lambda_max']
        assert widest['bn_last_meansub'] / widest['none'] < 0.1

    def test_middle_batch_norm_bound(self, relu_spec):
        config = ExperimentConfig(
            'fig1_sharpness', relu_spec, M_grid=[128, 256], T_rule=100, ensembles=3, modes=['bn_middle'],
        )
        result = experiments.run_fig1(config)
        assert (result.members['lambda_max'] >= result.members['theory_value']).all()
        assert result.fit['bn_middle']['slope'] == pytest.approx(1.0, abs=0.15)
