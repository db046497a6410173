"""
Tests for the command-line runner, config validation and report writing
"""

import json
import logging

import numpy as np
import pandas as pd
import pytest

import app
import input
import write_data
from concatenation import StateDependent
from config import EXPERIMENT_KINDS
from errors import ConfigSchemaError
from extended_state import StateSpaceTag
from killing import ExpRate, Terminal
from process_models import DiffusionModel, RateModel

logger = logging.getLogger(__name__)

CHAIN = [[-1.0, 0.6, 0.4], [0.5, -1.2, 0.7], [0.3, 0.9, -1.2]]


def write_config(directory, config, name='config.json'):
    path = directory / name
    path.write_text(json.dumps(config), encoding='utf-8')
    return path


def small_extend_config():
    return {'schema_version': '1', 'kind': 'extend-check', 'seed': 5, 'name': 'small-extend',
            'params': {'kernels': 10, 'max_size': 4}}


def small_kill_config():
    return {'schema_version': '1', 'kind': 'kill-semigroup', 'seed': 11, 'name': 'small-kill',
            'model': {'type': 'ctmc', 'rates': CHAIN},
            'kill': {'type': 'rate', 'rates': [0.0, 0.5, 2.0]},
            'params': {'n': 3000, 'times': [0.5, 1.0]}}


# ---------------------------------------------------------------------------
# Config validation and builders
# ---------------------------------------------------------------------------

def test_every_demo_validates():
    demos = input.list_demos()
    assert len(demos) >= 8
    for path in demos:
        config = input.validate_config(input.read_config(path))
        assert config['kind'] in EXPERIMENT_KINDS
        logger.info(f"✓ demo {path.stem} validates")


def test_defaults_are_filled():
    config = input.validate_config({'schema_version': '1', 'kind': 'generator-kill', 'seed': 1})
    assert config['params'] == {'models': 20, 'size': 4, 'steps': None}
    assert config['thresholds'] == {}
    assert config['name'] == 'generator-kill'
    logger.info("✓ defaults are filled")


@pytest.mark.parametrize('config, field', [
    ({'schema_version': '1', 'kind': 'extend-check'}, '$.seed'),
    ({'schema_version': '1', 'kind': 'extend-check', 'seed': 1, 'bogus': 2}, '$.bogus'),
    ({'schema_version': '2', 'kind': 'extend-check', 'seed': 1}, '$.schema_version'),
    ({'schema_version': '1', 'kind': 'nope', 'seed': 1}, '$.kind'),
    ({'schema_version': '1', 'kind': 'extend-check', 'seed': -1}, '$.seed'),
    ({'schema_version': '1', 'kind': 'extend-check', 'seed': 1, 'params': {'kernels': 'many'}}, '$.params.kernels'),
    ({'schema_version': '1', 'kind': 'lifetime-law', 'seed': 1, 'params': {'n': 1},
      'model': {'type': 'ctmc', 'rates': CHAIN}, 'kill': {'type': 'rate', 'constant': 1.0}}, '$.params.n'),
    ({'schema_version': '1', 'kind': 'lifetime-law', 'seed': 1, 'kill': {'type': 'rate', 'constant': 1.0}},
     '$.model'),
    ({'schema_version': '1', 'kind': 'exit-joint', 'seed': 1, 'model': {'type': 'ctmc', 'rates': [[0.0, 'x']]},
      'kill': {'type': 'rate', 'constant': 1.0}}, '$.model.rates[0][1]'),
    ({'schema_version': '1', 'kind': 'extend-check', 'seed': 1, 'thresholds': {'p_threshold': 'low'}},
     '$.thresholds.p_threshold'),
])
def test_schema_errors_name_the_field(config, field):
    with pytest.raises(ConfigSchemaError) as info:
        input.validate_config(config)
    assert info.value.field_path == field
    assert str(info.value).startswith(field)
    logger.info("✓ schema errors name the field")


def test_build_kill_variants():
    model = input.build_model({'type': 'ctmc', 'rates': CHAIN})
    assert isinstance(model, RateModel)
    rate = input.build_kill({'type': 'rate', 'constant': 0.7}, model)
    assert isinstance(rate.rule, ExpRate)
    assert np.allclose(rate.rates, 0.7)
    hit = input.build_kill({'type': 'hit', 'states': [2]}, model)
    assert isinstance(hit.rule, Terminal)
    ou = input.build_model({'type': 'ou', 'theta': 1.0, 'sigma': 0.5, 'dt': 0.01})
    assert isinstance(ou, DiffusionModel)
    quadratic = input.build_kill({'type': 'rate', 'quadratic': {'scale': 1.0, 'cap': 4.0}}, ou)
    assert quadratic.rule.c(1.0) == 1.0
    logger.info("✓ build kill variants")


def test_builder_errors_become_schema_errors():
    with pytest.raises(ConfigSchemaError) as info:
        input.build_model({'type': 'ctmc', 'rates': [[-1.0, 2.0], [0.0, 0.0]]}, path='$.blocks[0].model')
    assert info.value.field_path == '$.blocks[0].model'
    model = input.build_model({'type': 'ctmc', 'rates': CHAIN})
    with pytest.raises(ConfigSchemaError):
        input.build_kill({'type': 'rate', 'rates': [1.0, 2.0]}, model)
    logger.info("✓ builder errors become schema errors")


def test_random_builders():
    gen = np.random.default_rng(3)
    rates = input.random_rate_matrix(4, gen)
    assert np.allclose(rates.sum(axis=1), 0.0)
    assert RateModel(rates, StateSpaceTag(0, 4)).size == 4
    kernel = input.random_subkernel(5, gen)
    assert np.all(kernel.mass() <= 1.0 + 1e-12)
    transfer = input.build_transfer({'type': 'random-matrix'}, 3, 2, gen, '$.transfers[0]')
    assert isinstance(transfer, StateDependent)
    assert transfer.matrix.shape == (3, 2)
    logger.info("✓ random builders")


def test_build_concat_rejects_mismatched_transfer():
    config = input.validate_config({
        'schema_version': '1', 'kind': 'concat', 'seed': 1, 'horizon': 5.0,
        'blocks': [
            {'model': {'type': 'ctmc', 'rates': CHAIN}, 'kill': {'type': 'rate', 'constant': 1.0}},
            {'model': {'type': 'ctmc', 'rates': [[-1.0, 1.0], [1.0, -1.0]]}, 'kill': {'type': 'rate', 'constant': 1.0}},
        ],
        'transfers': [{'type': 'constant', 'probs': [0.5, 0.5, 0.0]}],
    })
    with pytest.raises(ConfigSchemaError) as info:
        input.build_concat(config, np.random.default_rng(0))
    assert info.value.field_path == '$.blocks'
    logger.info("✓ build concat rejects mismatched transfer")


def test_read_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        input.read_config(tmp_path / 'missing.json')
    bad = tmp_path / 'bad.json'
    bad.write_text('{"seed": ', encoding='utf-8')
    with pytest.raises(ConfigSchemaError) as info:
        input.read_config(bad)
    assert info.value.field_path == '$'
    logger.info("✓ read config errors")


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

def test_to_jsonable_handles_numpy_and_infinities():
    value = write_data.to_jsonable({'a': np.float64(np.inf), 'b': [np.int64(3), np.nan], 'c': np.array([1.5]),
                                    'd': np.bool_(True), 'e': -np.inf})
    assert value == {'a': 'inf', 'b': [3, 'nan'], 'c': [1.5], 'd': True, 'e': '-inf'}
    json.dumps(value, allow_nan=False)
    logger.info("✓ to jsonable handles numpy and infinities")


def test_writers(tmp_path):
    write_data.write_report({'passed': True, 'x': np.float32(0.5)}, tmp_path)
    assert json.loads((tmp_path / 'report.json').read_text())['x'] == 0.5
    write_data.write_table(pd.DataFrame({'t': [1.0]}), tmp_path, 'demo')
    assert (tmp_path / 'demo.csv').exists()
    write_data.write_manifest([{'name': 'a', 'passed': True}, {'name': 'b', 'passed': False}], tmp_path)
    manifest = pd.read_csv(tmp_path / 'manifest.csv')
    assert manifest['check'].tolist() == ['a', 'b']
    assert manifest['passed'].tolist() == [True, False]
    logger.info("✓ writers")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_list_demos(capsys):
    assert app.main(['list-demos']) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) >= 8
    assert any(line.startswith('kill-semigroup\t') for line in lines)
    logger.info("✓ list demos")


def test_missing_seed_exits_with_schema_code(tmp_path, capsys):
    config = small_extend_config()
    del config['seed']
    path = write_config(tmp_path, config)
    assert app.main(['run', '--config', str(path), '--out', str(tmp_path / 'out')]) == 2
    assert '$.seed' in capsys.readouterr().err
    logger.info("✓ missing seed exits with schema code")


def test_bad_json_and_missing_file(tmp_path):
    bad = tmp_path / 'bad.json'
    bad.write_text('not json', encoding='utf-8')
    assert app.main(['run', '--config', str(bad)]) == 2
    assert app.main(['run', '--config', str(tmp_path / 'absent.json')]) == 3
    logger.info("✓ bad json and missing file")


def test_extend_check_run_passes(tmp_path, capsys):
    path = write_config(tmp_path, small_extend_config())
    out = tmp_path / 'out'
    assert app.main(['run', '--config', str(path), '--out', str(out)]) == 0
    assert 'PASS' in capsys.readouterr().out
    report = json.loads((out / 'report.json').read_text())
    assert report['passed'] is True
    assert report['kind'] == 'extend-check'
    assert {c['name'] for c in report['checks']} == {'row-sums', 'cemetery-trap', 'extension-identity',
                                                     'semigroup-extension'}
    assert (out / 'extension.csv').exists()
    assert (out / 'manifest.csv').exists()
    logger.info("✓ extend check run passes")


def test_reports_are_byte_identical_across_runs(tmp_path):
    path = write_config(tmp_path, small_extend_config())
    app.main(['run', '--config', str(path), '--out', str(tmp_path / 'a')])
    app.main(['run', '--config', str(path), '--out', str(tmp_path / 'b')])
    assert (tmp_path / 'a' / 'report.json').read_bytes() == (tmp_path / 'b' / 'report.json').read_bytes()
    logger.info("✓ reports are byte identical across runs")


def test_reports_do_not_depend_on_jobs(tmp_path):
    path = write_config(tmp_path, small_kill_config())
    app.main(['run', '--config', str(path), '--out', str(tmp_path / 'one'), '--jobs', '1'])
    app.main(['run', '--config', str(path), '--out', str(tmp_path / 'two'), '--jobs', '2'])
    one = (tmp_path / 'one' / 'report.json').read_bytes()
    assert one == (tmp_path / 'two' / 'report.json').read_bytes()
    table = 'kill_semigroup.csv'
    assert (tmp_path / 'one' / table).read_bytes() == (tmp_path / 'two' / table).read_bytes()
    logger.info("✓ reports do not depend on jobs")


def test_seed_override(tmp_path):
    path = write_config(tmp_path, small_extend_config())
    app.main(['run', '--config', str(path), '--out', str(tmp_path / 'o'), '--seed-override', '99'])
    assert json.loads((tmp_path / 'o' / 'report.json').read_text())['seed'] == 99
    logger.info("✓ seed override")


def test_resolve_jobs(monkeypatch):
    monkeypatch.delenv('MSPLICE_JOBS', raising=False)
    assert app.resolve_jobs() == 1
    monkeypatch.setenv('MSPLICE_JOBS', '3')
    assert app.resolve_jobs() == 3
    assert app.resolve_jobs(2) == 2
    monkeypatch.setenv('MSPLICE_JOBS', 'many')
    with pytest.raises(ConfigSchemaError):
        app.resolve_jobs()
    with pytest.raises(ConfigSchemaError):
        app.resolve_jobs(0)
    logger.info("✓ resolve jobs")


def test_runner_rejects_wrong_kill_for_lifetime_law(tmp_path):
    config = input.validate_config({
        'schema_version': '1', 'kind': 'lifetime-law', 'seed': 1,
        'model': {'type': 'ctmc', 'rates': CHAIN}, 'kill': {'type': 'hit', 'states': [2]},
        'params': {'n': 100},
    })
    runner = app.ExperimentRunner(config, tmp_path)
    with pytest.raises(ConfigSchemaError) as info:
        runner.run()
    assert info.value.field_path == '$.kill'
    logger.info("✓ runner rejects wrong kill for lifetime law")


# ---------------------------------------------------------------------------
# Bundled demos, run end to end at reduced size
# ---------------------------------------------------------------------------

DEMO_CAPS = {'n': 8000, 'models': 3, 'kernels': 20}
DEMO_THRESHOLDS = {'stderr_multiple': 4.0, 'p_threshold': 1e-4, 'tv_tolerance': 0.03}


def reduced_demo(path, directory):
    config = input.read_config(path)
    params = config.setdefault('params', {})
    for key, cap in DEMO_CAPS.items():
        if key in params:
            params[key] = min(params[key], cap)
    config['thresholds'] = {**config.get('thresholds', {}), **DEMO_THRESHOLDS}
    return write_config(directory, config, path.name)


@pytest.mark.slow
@pytest.mark.parametrize('path', input.list_demos(), ids=lambda p: p.stem)
def test_every_demo_runs_and_passes(path, tmp_path):
    config_path = reduced_demo(path, tmp_path)
    out = tmp_path / 'out'
    assert app.main(['run', '--config', str(config_path), '--out', str(out)]) == 0
    manifest = pd.read_csv(out / 'manifest.csv')
    assert len(manifest) > 0
    assert manifest['passed'].all(), manifest[~manifest['passed']]['check'].tolist()
    logger.info(f"✓ demo {path.stem} passes {len(manifest)} checks")


def test_renewal_gamma_conditions_on_the_horizon(tmp_path):
    config = {'schema_version': '1', 'kind': 'renewal-gamma', 'seed': 3, 'name': 'short-horizon',
              'blocks': [{'model': {'type': 'ctmc', 'rates': CHAIN}, 'kill': {'type': 'rate', 'constant': 1.0}}],
              'transfers': [{'type': 'constant', 'probs': [0.2, 0.3, 0.5]}],
              'cyclic': True, 'horizon': 3.0, 'params': {'n': 3000, 'k': 3},
              'thresholds': {'p_threshold': 1e-4}}
    out = tmp_path / 'out'
    assert app.main(['run', '--config', str(write_config(tmp_path, config)), '--out', str(out)]) == 0
    gamma = next(c for c in json.loads((out / 'report.json').read_text())['checks'] if c['name'] == 'gamma-law')
    # roughly 42% of runs see fewer than three renewals by t = 3
    assert 900 < gamma['details']['missing'] < 1600
    assert gamma['passed'] is True
    logger.info("✓ renewal gamma conditions on the horizon")
