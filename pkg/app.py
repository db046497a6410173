"""
Killed / Concatenated Markov Process Checks
"""

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from config import (DIRECTORIES, GENERATOR_STEPS, LOGGING_CONFIG, SCHEMA_VERSION, SIMULATION_CONFIG, SLOPE_BAND,
                    STATISTICS, TOLERANCES)
from errors import ConfigSchemaError, MspliceError, SemigroupViolationError

# Local imports
import input
import write_data
from concatenation import (BlockSpec, ConcatSpec, Constant, concat_generator_check, concat_markov_test,
                           concat_semigroup_check, invariant_residual, occupation_measure,
                           restarts_closed_form, restore_invariant_solve, restore_semigroup_exact,
                           revival_conditional_test, sample_many, sample_renewal_times, simulate_concatenated,
                           two_block_semigroup, two_block_semigroup_exact)
from extended_state import (StateSpaceTag, extend_kernel, extend_semigroup_step, extension_identity_deviation,
                            restrict_kernel)
from functionals import ConstantRate, RateFunction
from killing import (HARD, WEIGHTED, ExpRate, KillSpec, exit_joint_histogram, killed_generator_check,
                     killed_markov_test, killed_semigroup_exact, killed_semigroup_mc_grid, mf_derivative_check,
                     sample_exits, survival_exact)
from process_models import RateModel, RngStream, ctmc_semigroup_exact
from verification import EstimatorReport, agree, chi_square, ks_statistic, total_variation, two_sample_ks, within_stderr

logger = logging.getLogger(__name__)

EXACT_FLOOR = TOLERANCES['chapman_kolmogorov']


def configure_logging(level: str = LOGGING_CONFIG['level']):
    """Root logger on stderr (or the configured file); stdout stays free for the verdict."""
    logging.basicConfig(
        level=getattr(logging, level),
        format=LOGGING_CONFIG['format'],
        filename=LOGGING_CONFIG['file'],
        force=True,
    )


class ExperimentRunner:
    def __init__(self, config: dict, out_dir=None, jobs: int = 1, seed_override=None):
        self.config = config
        self.kind = config['kind']
        self.name = config['name']
        self.seed = int(config['seed'] if seed_override is None else seed_override)
        self.params = config['params']
        self.jobs = max(int(jobs), 1)
        self.out_dir = out_dir
        self.checks = []
        self.tables = {}
        self.setup_directories()
        self.setup_thresholds()

    def setup_directories(self):
        """Output directory: --out, or result/<experiment name>/."""
        if self.out_dir is None:
            self.out_dir = Path(DIRECTORIES['output']) / self.name
        self.out_dir = Path(self.out_dir)

    def setup_thresholds(self):
        """Configured thresholds over the defaults; echoed into the report."""
        self.thresholds = {
            'p_threshold': STATISTICS['p_threshold'],
            'stderr_multiple': STATISTICS['stderr_multiple'],
            'tv_tolerance': STATISTICS['tv_tolerance'],
            'slope_band': list(SLOPE_BAND),
            'invariant_tolerance': TOLERANCES['invariant'],
            'identity_tolerance': TOLERANCES['identity'],
            **self.config['thresholds'],
        }

    # ------------------------------------------------------------------
    # Helpers
    # ------------------------------------------------------------------

    def stream(self, index: int = 0) -> RngStream:
        """Base stream of the index-th Monte Carlo run inside this experiment."""
        return RngStream(self.seed, (index + 1) * SIMULATION_CONFIG['stream_stride'])

    def model_generator(self) -> np.random.Generator:
        """Generator for random models and random revival kernels."""
        return RngStream(self.seed, 0, (0,)).generator()

    def record(self, name: str, passed: bool, details=None):
        self.checks.append({'name': name, 'passed': bool(passed), 'details': details or {}})
        logger.info(f"{self.name} / {name}: {'pass' if passed else 'FAIL'}")

    def slope_ok(self, report) -> bool:
        if math.isnan(report.slope):
            return report.passed
        lo, hi = self.thresholds['slope_band']
        return lo <= report.slope <= hi

    def p_ok(self, result) -> bool:
        return result.passed(self.thresholds['p_threshold'])

    def matches(self, report: EstimatorReport, target: float) -> bool:
        return within_stderr(report, target, self.thresholds['stderr_multiple'], EXACT_FLOOR)

    def kill_spec(self) -> KillSpec:
        for key in ('model', 'kill'):
            if key not in self.config:
                raise ConfigSchemaError(f"$.{key}", f"missing required field for kind {self.kind!r}")
        model = input.build_model(self.config['model'])
        return input.build_kill(self.config['kill'], model)

    def concat_spec(self, horizon=None) -> ConcatSpec:
        for key in ('blocks', 'transfers'):
            if key not in self.config:
                raise ConfigSchemaError(f"$.{key}", f"missing required field for kind {self.kind!r}")
        if horizon is None and 'horizon' not in self.config:
            raise ConfigSchemaError('$.horizon', f"missing required field for kind {self.kind!r}")
        return input.build_concat(self.config, self.model_generator(), horizon)

    def chain_start(self, size: int) -> int:
        x0 = self.params['x0']
        if not isinstance(x0, int) or not 0 <= x0 < size:
            raise ConfigSchemaError('$.params.x0', f"expected a state index in [0, {size})")
        return x0

    def finite_rate_spec(self, spec: KillSpec) -> KillSpec:
        if not spec.is_finite or not isinstance(spec.rule, ExpRate):
            raise ConfigSchemaError('$.kill', f"kind {self.kind!r} needs a chain killed at a rate")
        return spec

    def concat_function(self, spec: ConcatSpec):
        """Test function for a concatenated check: a vector, an (f1, f2) pair, or None for the identity."""
        f = self.params['f']
        two_block = not spec.cyclic and len(spec.blocks) == 2
        if not spec.is_finite:
            if f is not None:
                raise ConfigSchemaError('$.params.f', "diffusion blocks use the identity (leave f unset)")
            return None
        if f is None:
            if two_block:
                n1 = spec.blocks[0].size
                return np.arange(n1, dtype=float), np.arange(spec.blocks[1].size, dtype=float) + n1
            return np.arange(spec.blocks[0].size, dtype=float)
        if two_block:
            if len(f) != 2:
                raise ConfigSchemaError('$.params.f', "two-block splices take [f1, f2]")
            return tuple(np.asarray(v, dtype=float) for v in f)
        return np.asarray(f, dtype=float)

    def check_concat_shape(self, spec: ConcatSpec):
        if spec.cyclic:
            if not isinstance(spec.transfer(0), Constant) or not isinstance(spec.block(0).kill.rule, ExpRate):
                raise ConfigSchemaError('$.transfers[0]', "restore checks need a constant restart law and rate killing")
            if not spec.is_finite and spec.block(0).kill.model.params.get('kind') != 'ou':
                raise ConfigSchemaError('$.blocks[0].model', "diffusion restore checks need an OU block")
        elif not spec.is_finite or len(spec.blocks) > 2:
            raise ConfigSchemaError('$.blocks', "sequential checks take one or two finite blocks")
        elif len(spec.blocks) == 2 and not isinstance(spec.blocks[0].kill.rule, ExpRate):
            raise ConfigSchemaError('$.blocks[0].kill', "the first of two blocks must be killed at a rate")

    # ------------------------------------------------------------------
    # Experiment kinds
    # ------------------------------------------------------------------

    def run_extend_check(self):
        p = self.params
        gen = self.model_generator()
        rows = []
        for k in range(p['kernels']):
            size = int(gen.integers(p['min_size'], p['max_size'] + 1))
            kernel = input.random_subkernel(size, gen)
            ext = extend_kernel(kernel)
            fstar = gen.normal(size=size + 1)
            rows.append({
                'kernel': k,
                'size': size,
                'row_sum_deviation': float(np.max(np.abs(ext.matrix.sum(axis=1) - 1.0))),
                'cemetery_trap': bool(ext.matrix[-1, -1] == 1.0 and not ext.matrix[-1, :-1].any()),
                'identity_deviation': extension_identity_deviation(kernel, fstar),
                'restriction_exact': restrict_kernel(ext) == kernel,
            })
        frame = pd.DataFrame(rows)
        self.tables['extension'] = frame
        self.record('row-sums', frame['row_sum_deviation'].max() <= TOLERANCES['row_sum'],
                    {'worst': float(frame['row_sum_deviation'].max())})
        self.record('cemetery-trap', frame['cemetery_trap'].all() and frame['restriction_exact'].all())
        self.record('extension-identity', frame['identity_deviation'].max() <= self.thresholds['identity_tolerance'],
                    {'worst': float(frame['identity_deviation'].max())})

        times = sorted(float(t) for t in p['times'])
        size = p['max_size']
        tag = StateSpaceTag(0, size)
        model = RateModel(input.random_rate_matrix(size, gen), tag)
        rates = gen.uniform(0.0, 1.0, size)
        family = [ctmc_semigroup_exact(model, rates, t) for t in times]
        try:
            extend_semigroup_step(family, times, TOLERANCES['chapman_kolmogorov'])
            self.record('semigroup-extension', True, {'times': times})
        except SemigroupViolationError as e:
            self.record('semigroup-extension', False, {'s': e.s, 't': e.t, 'deviation': e.deviation})

    def run_lifetime_law(self):
        p = self.params
        spec = self.finite_rate_spec(self.kill_spec())
        x0 = self.chain_start(spec.model.size)
        horizon = p['horizon']
        taus, states = sample_exits(spec, x0, horizon, p['n'], self.stream(0), self.jobs)
        finite = np.isfinite(taus)
        censored = int(np.count_nonzero(~finite))
        if censored:
            logger.warning(f"{censored} lifetimes censored at {horizon}")
        rates = spec.rates
        edges = [e for e in (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0) if e < horizon] + [horizon]
        if np.ptp(rates) == 0.0 and rates[0] > 0.0:
            rate = float(rates[0])
            test = ks_statistic(taus[finite], stats.expon(scale=1.0 / rate).cdf)
            law = f"Exp({rate:g})"
        else:
            survival = np.array([survival_exact(spec, e)[x0] for e in edges])
            probs = np.append(-np.diff(survival), survival[-1])
            counts = np.append(np.histogram(taus[finite], bins=edges)[0], censored)
            test = chi_square(counts, probs / probs.sum())
            law = 'exact survival'
        self.tables['lifetime_survival'] = pd.DataFrame({
            't': edges,
            'empirical': [float(np.mean(taus > e)) for e in edges],
            'exact': [float(survival_exact(spec, e)[x0]) for e in edges],
        })
        self.record('lifetime-law', self.p_ok(test), {'law': law, 'censored': censored, **test.to_dict()})

    def run_kill_semigroup(self):
        p = self.params
        spec = self.kill_spec()
        if not spec.is_finite:
            raise ConfigSchemaError('$.model', "the exact killed semigroup needs a finite chain")
        size = spec.model.size
        x0 = self.chain_start(size)
        if p['functions'] == 'basis':
            fs = [row for row in np.eye(size)]
            labels = [f"e{j}" for j in range(size)]
        elif isinstance(p['functions'], list):
            fs = [np.asarray(f, dtype=float) for f in p['functions']]
            labels = [f"f{j}" for j in range(len(fs))]
        else:
            raise ConfigSchemaError('$.params.functions', "expected 'basis' or a list of vectors")
        fs.append(np.ones(size))
        labels.append('one')
        times = [float(t) for t in p['times']]
        reports = killed_semigroup_mc_grid(spec, fs, times, x0, p['n'], self.stream(0), self.name, self.jobs)
        multiple = self.thresholds['stderr_multiple']
        rows = []
        for i, t in enumerate(times):
            exact_row = killed_semigroup_exact(spec, t).matrix[x0]
            for j, f in enumerate(fs):
                exact = float(exact_row @ f)
                weighted, hard = reports[(i, j, WEIGHTED)], reports[(i, j, HARD)]
                rows.append({
                    't': t,
                    'f': labels[j],
                    'exact': exact,
                    'weighted_mean': weighted.mean,
                    'weighted_stderr': weighted.stderr,
                    'hard_mean': hard.mean,
                    'hard_stderr': hard.stderr,
                    'weighted_ok': self.matches(weighted, exact),
                    'hard_agrees': agree(weighted, hard, multiple, EXACT_FLOOR),
                })
        frame = pd.DataFrame(rows)
        self.tables['kill_semigroup'] = frame
        self.record('weighted-vs-exact', frame['weighted_ok'].all(), {'n': p['n']})
        self.record('hard-vs-weighted', frame['hard_agrees'].all(), {'n': p['n']})
        survival = frame[frame['f'] == 'one']
        self.record('survival-identity', survival['weighted_ok'].all(),
                    {'exact': survival['exact'].tolist(), 'hard': survival['hard_mean'].tolist()})

    def run_exit_joint(self):
        p = self.params
        spec = self.finite_rate_spec(self.kill_spec())
        x0 = self.chain_start(spec.model.size)
        report = exit_joint_histogram(spec, x0, p['n'], p['edges'], self.stream(0), self.jobs)
        self.tables['exit_joint'] = pd.DataFrame(report.to_rows())
        self.record('exit-joint-law', self.p_ok(report.test), {'n': report.n, **report.test.to_dict()})

    def random_rate_spec(self, size: int, gen: np.random.Generator, constant: bool = False) -> KillSpec:
        tag = StateSpaceTag(0, size)
        model = RateModel(input.random_rate_matrix(size, gen), tag)
        rates = np.full(size, gen.uniform(0.5, 2.0)) if constant else gen.uniform(0.0, 2.0, size)
        return KillSpec(model, ExpRate(RateFunction.on_states(rates, tag)))

    def run_generator_kill(self):
        p = self.params
        steps = p['steps'] or GENERATOR_STEPS
        gen = self.model_generator()
        rows, points = [], []
        for k in range(p['models']):
            spec = self.random_rate_spec(p['size'], gen)
            f = gen.normal(size=p['size'])
            slope = killed_generator_check(spec, f, steps=steps)
            mf = mf_derivative_check(spec, 0, steps)
            rows.append({'model': k, 'slope': slope.slope, 'passed': self.slope_ok(slope),
                         'mf_rate': mf.rate, 'mf_extrapolated': mf.extrapolated, 'mf_slope': mf.slope.slope,
                         'mf_passed': mf.passed})
            points.extend({'model': k, 'h': h, 'error': e} for h, e in slope.points)
        frame = pd.DataFrame(rows)
        self.tables['generator_kill'] = frame
        self.tables['generator_kill_points'] = pd.DataFrame(points)
        self.record('killed-generator-slope', frame['passed'].all(),
                    {'slopes': frame['slope'].tolist(), 'steps': list(steps)})
        self.record('mf-derivative', frame['mf_passed'].all())

    def run_concat(self):
        p = self.params
        spec = self.concat_spec()
        self.check_concat_shape(spec)
        f = self.concat_function(spec)
        t = p['t']
        if t > spec.horizon:
            raise ConfigSchemaError('$.params.t', f"must not exceed the horizon {spec.horizon}")
        x0 = self.chain_start(spec.blocks[0].size) if spec.is_finite else float(p['x0'])
        check = concat_semigroup_check(spec, f, t, x0, p['n'], self.stream(0), self.jobs, self.name)
        floor = max(check.floor, EXACT_FLOOR)
        passed = within_stderr(check.estimate, check.oracle, self.thresholds['stderr_multiple'], floor)
        self.tables['concat'] = pd.DataFrame([{'t': t, 'estimate': check.estimate.mean,
                                               'stderr': check.estimate.stderr, 'oracle': check.oracle,
                                               'floor': floor}])
        self.record('concat-semigroup', passed, check.to_dict())
        two_block = not spec.cyclic and len(spec.blocks) == 2
        if two_block and isinstance(spec.blocks[1].kill.rule, ExpRate):
            f1, f2 = f
            quadrature = two_block_semigroup(spec, f1, f2, t)
            exponential = two_block_semigroup_exact(spec, t) @ np.concatenate([f1, f2])
            gap = float(np.max(np.abs(quadrature - exponential)))
            self.record('two-block-oracles', gap <= TOLERANCES['exit_quadrature'], {'deviation': gap})

    def run_revival(self):
        p = self.params
        spec = self.concat_spec()
        if not spec.is_finite:
            raise ConfigSchemaError('$.blocks', "revival tests need finite blocks")
        k = p['k']
        if not spec.cyclic and not 1 <= k <= len(spec.transfers):
            raise ConfigSchemaError('$.params.k', f"expected a renewal index in [1, {len(spec.transfers)}]")
        x0 = self.chain_start(spec.blocks[0].size)
        samples = sample_many(spec, x0, p['n'], self.stream(0), self.jobs)
        report = revival_conditional_test(samples, k, spec.transfer(k - 1), spec.block(k - 1).size)
        renewed = sum(1 for s in samples if len(s.renewals) >= k)
        self.tables['revival'] = pd.DataFrame(list(report.rows))
        self.tables['events'] = samples[0].events_frame()
        passed = bool(report.rows) and report.passed(self.thresholds['p_threshold'])
        self.record('revival-law', passed, {'renewed': renewed, **report.to_dict()})

    def restore_case(self, label, spec: ConcatSpec, horizon: float, stream: RngStream):
        kill = spec.block(0).kill
        mu = spec.transfer(0)
        pi = restore_invariant_solve(kill.model, kill.rates, mu, self.thresholds['invariant_tolerance'])
        residual = invariant_residual(kill.model, kill.rates, mu, pi)
        run_spec = ConcatSpec(spec.blocks, spec.transfers, horizon, cyclic=True)
        sample = simulate_concatenated(run_spec, 0, stream)
        occupation = occupation_measure(sample, kill.model.size)
        tv = total_variation(occupation, pi)
        passed = residual <= self.thresholds['invariant_tolerance'] and tv <= self.thresholds['tv_tolerance']
        law = [{'model': label, 'state': x, 'pi': float(pi[x]), 'occupation': float(occupation[x])}
               for x in range(pi.size)]
        summary = {'model': label, 'size': int(pi.size), 'residual': residual, 'tv': tv,
                   'renewals': len(sample.renewals), 'passed': passed}
        return summary, law

    def run_restore_invariant(self):
        p = self.params
        gen = self.model_generator()
        horizon = p['horizon']
        cases = []
        if 'blocks' in self.config:
            spec = self.concat_spec()
            if not spec.cyclic or not spec.is_finite or not isinstance(spec.transfer(0), Constant):
                raise ConfigSchemaError('$.blocks', "restore-invariant takes one finite cyclic block with constant mu")
            cases.append(('config', spec))
        for k in range(p['models']):
            size = int(gen.integers(p['min_size'], p['max_size'] + 1))
            tag = StateSpaceTag(0, size)
            model = RateModel(input.random_rate_matrix(size, gen, low=1.0, high=3.0), tag)
            rates = RateFunction.on_states(gen.uniform(0.5, 2.0, size), tag)
            mu = Constant(probs=input.random_stochastic(1, size, gen)[0])
            cases.append((k, ConcatSpec((BlockSpec(KillSpec(model, ExpRate(rates))),), (mu,), horizon, cyclic=True)))
        summaries, laws = [], []
        for i, (label, spec) in enumerate(cases):
            summary, law = self.restore_case(label, spec, horizon, self.stream(i))
            summaries.append(summary)
            laws.extend(law)
        frame = pd.DataFrame(summaries)
        self.tables['restore_invariant'] = frame
        self.tables['invariant_law'] = pd.DataFrame(laws)
        self.record('invariant-residual', (frame['residual'] <= self.thresholds['invariant_tolerance']).all(),
                    {'worst': float(frame['residual'].max())})
        self.record('occupation-tv', (frame['tv'] <= self.thresholds['tv_tolerance']).all(),
                    {'worst': float(frame['tv'].max()), 'horizon': horizon})

    def constant_restore_spec(self) -> ConcatSpec:
        spec = self.concat_spec()
        if not spec.cyclic:
            raise ConfigSchemaError('$.cyclic', f"kind {self.kind!r} needs a cyclic (restore) spec")
        self.check_concat_shape(spec)
        kill = spec.block(0).kill
        constant = np.ptp(kill.rates) == 0.0 if kill.is_finite else isinstance(kill.rule.c.func, ConstantRate)
        if not constant:
            raise ConfigSchemaError('$.blocks[0].kill', "restarts need a constant killing rate")
        return spec

    def run_restarts_formula(self):
        p = self.params
        spec = self.constant_restore_spec()
        f = self.concat_function(spec)
        t = p['t']
        kill = spec.block(0).kill
        x0 = self.chain_start(kill.model.size) if spec.is_finite else float(p['x0'])
        check = concat_semigroup_check(spec, f, t, x0, p['n'], self.stream(0), self.jobs, self.name)
        floor = max(check.floor, EXACT_FLOOR)
        passed = within_stderr(check.estimate, check.oracle, self.thresholds['stderr_multiple'], floor)
        self.tables['restarts'] = pd.DataFrame([{'t': t, 'x0': x0, 'estimate': check.estimate.mean,
                                                 'stderr': check.estimate.stderr, 'closed_form': check.oracle,
                                                 'floor': floor}])
        self.record('restarts-formula', passed, check.to_dict())
        if spec.is_finite:
            closed = restarts_closed_form(kill.model, spec.transfer(0), kill.rule.c, f, t, x0)
            exponential = float(restore_semigroup_exact(kill.model, kill.rates, spec.transfer(0), t)[x0] @ f)
            gap = abs(closed - exponential)
            self.record('closed-form-vs-restore-exponential', gap <= TOLERANCES['exit_quadrature'],
                        {'closed_form': closed, 'exponential': exponential})

    def run_renewal_gamma(self):
        p = self.params
        spec = self.constant_restore_spec()
        kill = spec.block(0).kill
        rate = float(kill.rates[0]) if kill.is_finite else kill.rule.c.func.value
        k = p['k']
        x0 = self.chain_start(kill.model.size) if spec.is_finite else float(p['x0'])
        times = sample_renewal_times(spec, x0, k, p['n'], self.stream(0), self.jobs)
        complete = ~np.isnan(times).any(axis=1)
        missing = int(np.count_nonzero(~complete))
        if missing:
            logger.warning(f"{missing} samples renewed fewer than {k} times before {spec.horizon}")
        sigma = times[complete, k - 1]
        law = stats.gamma(a=k, scale=1.0 / rate)
        # retained samples are the draws with sigma_k below the horizon
        below = float(law.cdf(spec.horizon))
        test = ks_statistic(sigma, lambda x: law.cdf(x) / below)
        quantiles = np.array([0.1, 0.25, 0.5, 0.75, 0.9])
        self.tables['renewal_gamma'] = pd.DataFrame({'q': quantiles, 'empirical': np.quantile(sigma, quantiles),
                                                     'gamma': law.ppf(quantiles * below)})
        details = {'k': k, 'rate': rate, 'missing': missing, 'expected_missing': (1.0 - below) * p['n']}
        self.record('gamma-law', self.p_ok(test), {**details, **test.to_dict()})
        if k >= 2:
            first, second = times[complete, 0], times[complete, 1] - times[complete, 0]
            iid = two_sample_ks(first, second)
            self.record('iid-intervals', self.p_ok(iid), iid.to_dict())

    def run_generator_concat(self):
        p = self.params
        steps = p['steps'] or GENERATOR_STEPS
        gen = self.model_generator()
        rows = []
        for k in range(p['models']):
            kill = self.random_rate_spec(p['size'], gen, constant=k % 2 == 0)
            mu = Constant(probs=input.random_stochastic(1, p['size'], gen)[0])
            spec = ConcatSpec((BlockSpec(kill),), (mu,), 1.0, cyclic=True)
            f = gen.normal(size=p['size'])
            report = concat_generator_check(spec, f, steps=steps)
            rows.append({'model': k, 'mode': 'restore', 'constant_rate': k % 2 == 0, 'slope': report.slope,
                         'passed': self.slope_ok(report)})
        if 'blocks' in self.config:
            spec = self.concat_spec(horizon=self.config.get('horizon', 1.0))
            self.check_concat_shape(spec)
            if not spec.is_finite or (not spec.cyclic and len(spec.blocks) != 2):
                raise ConfigSchemaError('$.blocks', "generator checks take a finite restore or two-block spec")
            report = concat_generator_check(spec, self.concat_function(spec), steps=steps)
            rows.append({'model': 'config', 'mode': 'restore' if spec.cyclic else 'two-block',
                         'constant_rate': None, 'slope': report.slope, 'passed': self.slope_ok(report)})
        frame = pd.DataFrame(rows)
        self.tables['generator_concat'] = frame
        self.record('concat-generator-slope', frame['passed'].all(),
                    {'slopes': frame['slope'].tolist(), 'steps': list(steps)})

    def run_markov_property(self):
        p = self.params
        u, s, t = p['u'], p['s'], p['t']
        if p['target'] == 'killed':
            spec = self.kill_spec()
            if not spec.is_finite:
                raise ConfigSchemaError('$.model', "the stratification test needs a finite chain")
            x0 = self.chain_start(spec.model.size)
            report = killed_markov_test(spec, x0, u, s, t, p['n'], self.stream(0), jobs=self.jobs)
        elif p['target'] == 'concat':
            spec = self.concat_spec(horizon=s + t)
            if not spec.is_finite:
                raise ConfigSchemaError('$.blocks', "the stratification test needs finite blocks")
            x0 = self.chain_start(spec.blocks[0].size)
            report = concat_markov_test(spec, x0, u, s, t, p['n'], self.stream(0), jobs=self.jobs)
        else:
            raise ConfigSchemaError('$.params.target', "expected 'killed' or 'concat'")
        size = report.table.shape[1] - 1
        columns = [f"to_{j}" for j in range(size)] + ['to_dead']
        frame = pd.DataFrame(report.table, columns=columns)
        frame.insert(0, 'history', [str(j) for j in range(size)] + ['dead'])
        self.tables['markov_strata'] = frame
        self.record('markov-property', self.p_ok(report.test), report.to_dict())

    # ------------------------------------------------------------------

    def run(self) -> dict:
        """Run the configured experiment and write report, tables and manifest."""
        logger.info(f"Running {self.name} ({self.kind}) with seed {self.seed} on {self.jobs} process(es)")
        handler = getattr(self, 'run_' + self.kind.replace('-', '_'))
        handler()
        passed = bool(self.checks) and all(c['passed'] for c in self.checks)
        report = {
            'schema_version': SCHEMA_VERSION,
            'name': self.name,
            'kind': self.kind,
            'seed': self.seed,
            'params': self.params,
            'thresholds': self.thresholds,
            'checks': self.checks,
            'tables': sorted(self.tables),
            'passed': passed,
        }
        write_data.write_report(report, self.out_dir)
        for name, frame in self.tables.items():
            write_data.write_table(frame, self.out_dir, name)
        write_data.write_manifest(self.checks, self.out_dir)
        logger.info(f"{self.name}: {'all checks passed' if passed else 'some checks failed'}")
        return report


def resolve_jobs(cli_jobs=None) -> int:
    """--jobs, then $MSPLICE_JOBS, then 1."""
    if cli_jobs is not None:
        jobs = cli_jobs
    else:
        raw = os.environ.get(SIMULATION_CONFIG['jobs_env'])
        if raw is None or raw == '':
            return 1
        try:
            jobs = int(raw)
        except ValueError:
            raise ConfigSchemaError(SIMULATION_CONFIG['jobs_env'], f"expected an integer, got {raw!r}")
    if jobs < 1:
        raise ConfigSchemaError('--jobs', f"must be at least 1, got {jobs}")
    return jobs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='msplice', description='Exact and Monte Carlo checks for killed and '
                                                                 'concatenated Markov processes')
    parser.add_argument('--log-level', default=LOGGING_CONFIG['level'],
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    commands = parser.add_subparsers(dest='command', required=True)
    run = commands.add_parser('run', help='run one experiment config')
    run.add_argument('--config', required=True, help='experiment JSON')
    run.add_argument('--out', default=None, help='output directory')
    run.add_argument('--jobs', type=int, default=None,
                     help=f"worker processes (default ${SIMULATION_CONFIG['jobs_env']} or 1)")
    run.add_argument('--seed-override', type=int, default=None, help='replace the config seed')
    commands.add_parser('list-demos', help='list the bundled demo configs')
    return parser


def list_demos() -> int:
    for path in input.list_demos():
        try:
            description = input.read_config(path).get('description', '')
        except (OSError, MspliceError) as e:
            logger.warning(f"Could not read demo {path.name}: {e}")
            description = ''
        print(f"{path.stem}\t{description}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    if args.command == 'list-demos':
        return list_demos()
    try:
        jobs = resolve_jobs(args.jobs)
        config = input.validate_config(input.read_config(args.config))
        runner = ExperimentRunner(config, args.out, jobs, args.seed_override)
        report = runner.run()
    except MspliceError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 3
    verdict = 'PASS' if report['passed'] else 'FAIL'
    print(f"{report['name']}: {verdict} ({len(report['checks'])} checks) -> {runner.out_dir}")
    return 0 if report['passed'] else 1


if __name__ == '__main__':
    sys.exit(main())
