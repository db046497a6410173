"""
Experiment-config reading, schema validation and model construction.
"""

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from config import DIRECTORIES, EXPERIMENT_KINDS, FILE_PATTERNS, SCHEMA_VERSION
from concatenation import BlockSpec, ConcatSpec, Constant, DiracRevival, GaussianRevival, StateDependent
from errors import ConfigSchemaError, MspliceError
from extended_state import StateSpaceTag, SubKernel
from functionals import ConstantRate, Deterministic, HitClosedSet, QuadraticRate, RateFunction
from killing import ExpRate, KillSpec, Terminal
from process_models import DiffusionModel, RateModel, ou_model

logger = logging.getLogger(__name__)

REQUIRED = object()

TOP_LEVEL = {
    'schema_version': (str, REQUIRED),
    'kind': (str, REQUIRED),
    'seed': (int, REQUIRED),
    'name': (str, None),
    'description': (str, None),
    'model': (dict, None),
    'kill': (dict, None),
    'blocks': (list, None),
    'transfers': (list, None),
    'cyclic': (bool, False),
    'horizon': (float, None),
    'params': (dict, None),
    'thresholds': (dict, None),
}

THRESHOLDS = {
    'p_threshold': float,
    'stderr_multiple': float,
    'tv_tolerance': float,
    'slope_band': list,
    'invariant_tolerance': float,
    'identity_tolerance': float,
}

# kind -> {param: (type, default)}
PARAMS = {
    'extend-check': {'kernels': (int, 100), 'min_size': (int, 2), 'max_size': (int, 6),
                     'times': (list, [0.25, 0.5, 1.0])},
    'lifetime-law': {'n': (int, 100000), 'x0': (int, 0), 'horizon': (float, 50.0)},
    'kill-semigroup': {'n': (int, 200000), 'x0': (int, 0), 'times': (list, [0.25, 1.0, 4.0]),
                       'functions': ((str, list), 'basis')},
    'exit-joint': {'n': (int, 100000), 'x0': (int, 0), 'edges': (list, [0.0, 0.25, 0.5, 1.0, 2.0])},
    'generator-kill': {'models': (int, 20), 'size': (int, 4), 'steps': (list, None)},
    'concat': {'n': (int, 100000), 'x0': ((int, float), 0), 't': (float, 1.0), 'f': ((list, type(None)), None)},
    'revival': {'n': (int, 100000), 'x0': (int, 0), 'k': (int, 1)},
    'restore-invariant': {'models': (int, 10), 'min_size': (int, 3), 'max_size': (int, 5),
                          'horizon': (float, 10000.0)},
    'restarts-formula': {'n': (int, 100000), 'x0': ((int, float), 0), 't': (float, 2.0),
                         'f': ((list, type(None)), None)},
    'renewal-gamma': {'n': (int, 100000), 'x0': (int, 0), 'k': (int, 3)},
    'generator-concat': {'models': (int, 20), 'size': (int, 4), 'steps': (list, None),
                         'f': ((list, type(None)), None)},
    'markov-property': {'n': (int, 100000), 'x0': (int, 0), 'u': (float, 0.5), 's': (float, 1.0),
                        't': (float, 1.0), 'target': (str, 'killed')},
}

# kind -> top-level sections it needs
SECTIONS = {
    'extend-check': (),
    'lifetime-law': ('model', 'kill'),
    'kill-semigroup': ('model', 'kill'),
    'exit-joint': ('model', 'kill'),
    'generator-kill': (),
    'concat': ('blocks', 'transfers', 'horizon'),
    'revival': ('blocks', 'transfers', 'horizon'),
    'restore-invariant': (),
    'restarts-formula': ('blocks', 'transfers', 'horizon'),
    'renewal-gamma': ('blocks', 'transfers', 'horizon'),
    'generator-concat': (),
    'markov-property': (),
}

MODEL_KEYS = {
    'ctmc': {'type': str, 'rates': list, 'labels': list},
    'ou': {'type': str, 'theta': float, 'sigma': float, 'dt': float, 'mean': float},
}
MODEL_REQUIRED = {'ctmc': ('rates',), 'ou': ('theta', 'sigma', 'dt')}

KILL_KEYS = {
    'rate': {'type': str, 'rates': list, 'constant': float, 'quadratic': dict, 'c_max': float},
    'hit': {'type': str, 'states': list, 'intervals': list},
    'deterministic': {'type': str, 'time': float},
}

TRANSFER_KEYS = {
    'matrix': {'type': str, 'rows': list},
    'random-matrix': {'type': str},
    'constant': {'type': str, 'probs': list},
    'dirac': {'type': str, 'point': float},
    'gaussian': {'type': str, 'mean': float, 'sd': float},
}
TRANSFER_REQUIRED = {'matrix': ('rows',), 'constant': ('probs',), 'dirac': ('point',), 'gaussian': ('mean', 'sd')}


def read_config(path) -> dict:
    """
    Read an experiment config from a JSON file.

    Args:
        path: Path to the config file

    Returns:
        Parsed config dictionary (not yet validated)
    """
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(f"File not found: {file_path}")
    try:
        with open(file_path, encoding='utf-8') as handle:
            data = json.load(handle)
        logger.info(f"Successfully read config: {file_path}")
        return data
    except json.JSONDecodeError as e:
        logger.error(f"Error parsing config {file_path}: {e}")
        raise ConfigSchemaError('$', f"invalid JSON: {e.msg} at line {e.lineno}")


def _matches(value, expected) -> bool:
    types = expected if isinstance(expected, tuple) else (expected,)
    for kind in types:
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return True
        if kind is int and isinstance(value, int) and not isinstance(value, bool):
            return True
        if kind not in (int, float) and isinstance(value, kind):
            return True
    return False


def _type_name(expected) -> str:
    types = expected if isinstance(expected, tuple) else (expected,)
    names = {str: 'string', int: 'integer', float: 'number', bool: 'boolean', list: 'array', dict: 'object',
             type(None): 'null'}
    return ' or '.join(names[t] for t in types)


def _check_keys(obj: dict, allowed: dict, path: str, required=()):
    for key in obj:
        if key not in allowed:
            raise ConfigSchemaError(f"{path}.{key}", "unknown key")
    for key in required:
        if key not in obj:
            raise ConfigSchemaError(f"{path}.{key}", "missing required field")
    for key, value in obj.items():
        if not _matches(value, allowed[key]):
            raise ConfigSchemaError(f"{path}.{key}", f"expected {_type_name(allowed[key])}")


def _check_matrix(value, path: str):
    if not value or not all(isinstance(row, list) for row in value):
        raise ConfigSchemaError(path, "expected a non-empty array of arrays")
    width = len(value[0])
    for i, row in enumerate(value):
        if len(row) != width:
            raise ConfigSchemaError(f"{path}[{i}]", f"expected {width} entries, got {len(row)}")
        for j, entry in enumerate(row):
            if not _matches(entry, float):
                raise ConfigSchemaError(f"{path}[{i}][{j}]", "expected number")


def _check_vector(value, path: str):
    for i, entry in enumerate(value):
        if not _matches(entry, float):
            raise ConfigSchemaError(f"{path}[{i}]", "expected number")


def _check_typed(obj, schemas: dict, required: dict, path: str) -> str:
    if not isinstance(obj, dict):
        raise ConfigSchemaError(path, "expected object")
    kind = obj.get('type')
    if kind not in schemas:
        raise ConfigSchemaError(f"{path}.type", f"expected one of {sorted(schemas)}")
    _check_keys(obj, schemas[kind], path, required.get(kind, ()))
    return kind


def _check_model(obj, path: str):
    kind = _check_typed(obj, MODEL_KEYS, MODEL_REQUIRED, path)
    if kind == 'ctmc':
        _check_matrix(obj['rates'], f"{path}.rates")


def _check_kill(obj, path: str):
    kind = _check_typed(obj, KILL_KEYS, {'deterministic': ('time',)}, path)
    if kind == 'rate':
        given = [k for k in ('rates', 'constant', 'quadratic') if k in obj]
        if len(given) != 1:
            raise ConfigSchemaError(path, "give exactly one of rates / constant / quadratic")
        if 'rates' in obj:
            _check_vector(obj['rates'], f"{path}.rates")
        if 'quadratic' in obj:
            _check_keys(obj['quadratic'], {'scale': float, 'cap': float, 'center': float}, f"{path}.quadratic",
                        ('scale', 'cap'))
    if kind == 'hit':
        for i, item in enumerate(obj.get('intervals', [])):
            if not isinstance(item, list) or len(item) != 2:
                raise ConfigSchemaError(f"{path}.intervals[{i}]", "expected [lo, hi]")


def _check_transfer(obj, path: str):
    kind = _check_typed(obj, TRANSFER_KEYS, TRANSFER_REQUIRED, path)
    if kind == 'matrix':
        _check_matrix(obj['rows'], f"{path}.rows")
    if kind == 'constant':
        _check_vector(obj['probs'], f"{path}.probs")


def validate_config(config) -> dict:
    """
    Validate an experiment config and fill defaults.

    Args:
        config: Parsed JSON object

    Returns:
        A new dictionary with defaults filled in for ``params`` and ``thresholds``

    Raises:
        ConfigSchemaError: with the offending field path
    """
    if not isinstance(config, dict):
        raise ConfigSchemaError('$', "expected a JSON object")
    _check_keys(config, {k: v[0] for k, v in TOP_LEVEL.items()}, '$',
                [k for k, v in TOP_LEVEL.items() if v[1] is REQUIRED])
    if config['schema_version'] != SCHEMA_VERSION:
        raise ConfigSchemaError('$.schema_version', f"unsupported version {config['schema_version']!r}")
    kind = config['kind']
    if kind not in EXPERIMENT_KINDS:
        raise ConfigSchemaError('$.kind', f"expected one of {EXPERIMENT_KINDS}")
    if config['seed'] < 0:
        raise ConfigSchemaError('$.seed', "must be nonnegative")
    for section in SECTIONS[kind]:
        if section not in config:
            raise ConfigSchemaError(f"$.{section}", f"missing required field for kind {kind!r}")
    if 'model' in config:
        _check_model(config['model'], '$.model')
    if 'kill' in config:
        _check_kill(config['kill'], '$.kill')
    for i, block in enumerate(config.get('blocks', [])):
        path = f"$.blocks[{i}]"
        if not isinstance(block, dict):
            raise ConfigSchemaError(path, "expected object")
        _check_keys(block, {'model': dict, 'kill': dict, 'tag': int}, path, ('model', 'kill'))
        _check_model(block['model'], f"{path}.model")
        _check_kill(block['kill'], f"{path}.kill")
    for i, transfer in enumerate(config.get('transfers', [])):
        _check_transfer(transfer, f"$.transfers[{i}]")
    if 'horizon' in config and not config['horizon'] > 0:
        raise ConfigSchemaError('$.horizon', "must be positive")

    params = dict(config.get('params') or {})
    schema = PARAMS[kind]
    for key in params:
        if key not in schema:
            raise ConfigSchemaError(f"$.params.{key}", "unknown key")
    for key, (expected, default) in schema.items():
        if key in params:
            if not _matches(params[key], expected):
                raise ConfigSchemaError(f"$.params.{key}", f"expected {_type_name(expected)}")
        else:
            params[key] = default
    if 'n' in params and params['n'] < 2:
        raise ConfigSchemaError('$.params.n', "need at least two replications")

    thresholds = dict(config.get('thresholds') or {})
    for key, value in thresholds.items():
        if key not in THRESHOLDS:
            raise ConfigSchemaError(f"$.thresholds.{key}", "unknown key")
        if not _matches(value, THRESHOLDS[key]):
            raise ConfigSchemaError(f"$.thresholds.{key}", f"expected {_type_name(THRESHOLDS[key])}")

    validated = dict(config)
    validated['params'] = params
    validated['thresholds'] = thresholds
    validated.setdefault('name', kind)
    validated.setdefault('cyclic', False)
    return validated


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_model(desc: dict, tag_id: int = 0, path: str = '$.model'):
    """RateModel or DiffusionModel from a validated model description."""
    try:
        if desc['type'] == 'ctmc':
            rates = np.array(desc['rates'], dtype=float)
            labels = tuple(desc.get('labels', ()))
            return RateModel(rates, StateSpaceTag(tag_id, rates.shape[0], labels))
        return ou_model(desc['theta'], desc['sigma'], desc['dt'], desc.get('mean', 0.0), tag_id)
    except (MspliceError, ValueError) as e:
        logger.error(f"Invalid model at {path}: {e}")
        raise ConfigSchemaError(path, str(e))


def build_rate(desc: dict, model, path: str = '$.kill') -> RateFunction:
    try:
        if isinstance(model, RateModel):
            if 'rates' in desc:
                values = np.array(desc['rates'], dtype=float)
            elif 'constant' in desc:
                values = np.full(model.size, float(desc['constant']))
            else:
                raise ValueError("chains take a rate vector or a constant")
            return RateFunction.on_states(values, model.tag, desc.get('c_max'))
        if 'constant' in desc:
            value = float(desc['constant'])
            return RateFunction.on_line(ConstantRate(value), desc.get('c_max', value))
        if 'quadratic' in desc:
            q = desc['quadratic']
            rate = QuadraticRate(q['scale'], q['cap'], q.get('center', 0.0))
            return RateFunction.on_line(rate, desc.get('c_max', q['cap']))
        raise ValueError("diffusions take a constant or a quadratic rate")
    except (MspliceError, ValueError) as e:
        logger.error(f"Invalid killing rate at {path}: {e}")
        raise ConfigSchemaError(path, str(e))


def build_kill(desc: dict, model, path: str = '$.kill') -> KillSpec:
    """KillSpec from a validated kill description."""
    try:
        if desc['type'] == 'rate':
            return KillSpec(model, ExpRate(build_rate(desc, model, path)))
        if desc['type'] == 'hit':
            rule = HitClosedSet(frozenset(desc.get('states', [])), tuple(tuple(i) for i in desc.get('intervals', [])))
            return KillSpec(model, Terminal(rule))
        return KillSpec(model, Terminal(Deterministic(float(desc['time']))))
    except ConfigSchemaError:
        raise
    except (MspliceError, ValueError) as e:
        logger.error(f"Invalid kill rule at {path}: {e}")
        raise ConfigSchemaError(path, str(e))


def random_stochastic(rows: int, cols: int, gen: np.random.Generator) -> np.ndarray:
    """Rows drawn from a flat Dirichlet law."""
    return gen.dirichlet(np.ones(cols), size=rows)


def random_rate_matrix(size: int, gen: np.random.Generator, low: float = 0.2, high: float = 2.0) -> np.ndarray:
    """Irreducible generator with off-diagonal rates uniform on [low, high]."""
    rates = gen.uniform(low, high, size=(size, size))
    np.fill_diagonal(rates, 0.0)
    np.fill_diagonal(rates, -rates.sum(axis=1))
    return rates


def random_subkernel(size: int, gen: np.random.Generator) -> SubKernel:
    """Substochastic kernel: stochastic rows scaled by masses uniform on [0, 1]."""
    rows = random_stochastic(size, size, gen) * gen.uniform(0.0, 1.0, size=(size, 1))
    return SubKernel(rows, StateSpaceTag(0, size))


def build_transfer(desc: dict, exit_size: Optional[int], next_size: Optional[int],
                   gen: np.random.Generator, path: str):
    """Revival kernel from a validated transfer description."""
    try:
        kind = desc['type']
        if kind == 'matrix':
            return StateDependent(matrix=np.array(desc['rows'], dtype=float))
        if kind == 'random-matrix':
            if exit_size is None or next_size is None:
                raise ValueError("random revival matrices need finite blocks")
            return StateDependent(matrix=random_stochastic(exit_size, next_size, gen))
        if kind == 'constant':
            return Constant(probs=np.array(desc['probs'], dtype=float))
        if kind == 'dirac':
            return Constant(law=DiracRevival(desc['point']))
        return Constant(law=GaussianRevival(desc['mean'], desc['sd']))
    except (MspliceError, ValueError) as e:
        logger.error(f"Invalid transfer at {path}: {e}")
        raise ConfigSchemaError(path, str(e))


def build_concat(config: dict, gen: np.random.Generator, horizon: Optional[float] = None) -> ConcatSpec:
    """ConcatSpec from the blocks / transfers / horizon / cyclic fields; ``horizon`` overrides the config."""
    blocks = []
    for i, desc in enumerate(config['blocks']):
        path = f"$.blocks[{i}]"
        model = build_model(desc['model'], desc.get('tag', i), f"{path}.model")
        blocks.append(BlockSpec(build_kill(desc['kill'], model, f"{path}.kill")))
    cyclic = bool(config.get('cyclic', False))
    transfers = []
    for i, desc in enumerate(config['transfers']):
        source = blocks[i] if i < len(blocks) else blocks[-1]
        target = blocks[0] if cyclic else (blocks[i + 1] if i + 1 < len(blocks) else blocks[-1])
        transfers.append(build_transfer(desc, source.size, target.size, gen, f"$.transfers[{i}]"))
    horizon = float(config['horizon'] if horizon is None else horizon)
    try:
        return ConcatSpec(tuple(blocks), tuple(transfers), horizon, cyclic)
    except MspliceError as e:
        logger.error(f"Invalid concatenation: {e}")
        raise ConfigSchemaError('$.blocks', str(e))


def list_demos(directory: Optional[str] = None) -> list:
    """Bundled demo configs, sorted by file name."""
    if directory is None:
        directory = Path(__file__).resolve().parent / DIRECTORIES['demos']
    return sorted(Path(directory).glob(FILE_PATTERNS['demo_glob']))
