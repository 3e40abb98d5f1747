"""Command-line entry point: configured stages with a reproducible manifest.

Subcommands: feasibility, outer, inner, composite, stability, evolve1d,
sweep, all.  Stages run in dependency order (feasibility -> outer ->
inner -> composite; stability and evolve1d are independent); a stage run
on its own reads its predecessors' saved artifacts from the output
directory.  Exit codes: 0 ok, 2 infeasible current, 3 solver failure,
4 config error.
"""

import argparse
import concurrent.futures
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .config import (ConfigError, load_config, build_domain, build_current,
                     SWEEP_AXES)
from .manifest import RunManifest, write_csv, write_json
from .feasibility import sup_M
from .outer import (solve_zeta, solve_zeta1, outer_fields, rebuild_solution,
                    LossOfEllipticity, NewtonDivergence, InteriorMaximum)
from .inner import (InnerParams, PhysicalInnerProfiles, NoSubcriticalRoot,
                    ContractionFailure, LinearSolveFailure)
from .stability import (StabilityInput, eigenvalues, lambda_minus_zero,
                        stability_threshold, stability_verdict, evolve_1d,
                        BlowupError)
from .composite import (CutoffSpec, extract_stations, solve_inner_stations,
                        assemble_composite, residuals)

__all__ = ['main', 'Runner', 'STAGES_BY_COMMAND']

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_SOLVER = 3
EXIT_CONFIG = 4

SOLVER_ERRORS = (LossOfEllipticity, NewtonDivergence, InteriorMaximum,
                 NoSubcriticalRoot, ContractionFailure, LinearSolveFailure,
                 BlowupError)

STAGES_BY_COMMAND = {
    'feasibility': ('feasibility',),
    'outer': ('feasibility', 'outer'),
    'inner': ('inner',),
    'composite': ('composite',),
    'stability': ('stability',),
    'evolve1d': ('evolve1d',),
    'sweep': ('sweep',),
    'all': ('feasibility', 'outer', 'inner', 'composite', 'stability',
            'evolve1d'),
}

DEPENDS = {
    'feasibility': (),
    'outer': ('feasibility',),
    'inner': ('outer',),
    'composite': ('inner',),
    'stability': (),
    'evolve1d': (),
    'sweep': (),
}


class _Infeasible(Exception):
    pass


def _grid_columns(fld):
    '''(x, y, value) columns over the mask of a ScalarField2D.'''
    iy, ix = np.nonzero(fld.mask)
    x = fld.origin[0] + fld.h * ix
    y = fld.origin[1] + fld.h * iy
    return x, y, fld.values[fld.mask]


class Runner:
    """Executes the requested stages against one output directory."""

    def __init__(self, cfg, override_feasibility=False, jobs=1,
                 config_path=None):
        self.cfg = cfg
        self.override = bool(override_feasibility)
        self.jobs = max(1, int(jobs))
        self.config_path = config_path
        self.manifest = RunManifest.begin(cfg.echo(), __version__)
        self.timings = {}
        self._bnd = None
        self._prof = None
        self.sol = None
        self.stations = None
        self.profiles = None

    # ---- shared ingredients -------------------------------------------

    def boundary(self):
        if self._bnd is None:
            self._bnd = build_domain(self.cfg)
        return self._bnd

    def current(self):
        if self._prof is None:
            self._prof = build_current(self.cfg, self.boundary())
        return self._prof

    def _out(self, rel):
        return os.path.join(self.cfg.out, rel)

    def _save_csv(self, rel, header, columns):
        write_csv(self._out(rel), header, columns)
        self.manifest.add_artifact(self.cfg.out, rel)

    def _save_json(self, rel, obj):
        write_json(self._out(rel), obj)
        self.manifest.add_artifact(self.cfg.out, rel)

    # ---- stage: feasibility -------------------------------------------

    def stage_feasibility(self):
        bnd = self.boundary()
        prof = self.current()
        report, M = sup_M(bnd, prof, return_matrix=True)
        self._save_json('feasibility_report.json', asdict(report))
        i, k = np.triu_indices(len(M), k=1)
        self._save_csv('feasibility_M.csv',
                       ('i', 'k', 's_i', 's_k', 'M'),
                       (i, k, bnd.arclength[i], bnd.arclength[k], M[i, k]))
        self.manifest.scalars.update(
            sup_M=report.sup_M, feasibility_margin=report.margin,
            max_abs_j=report.max_abs_j)
        if not report.feasible and not self.override:
            raise _Infeasible

    # ---- stage: outer -------------------------------------------------

    def stage_outer(self):
        cfg = self.cfg
        sol = solve_zeta(self.boundary(), self.current(), n=cfg.outer.n,
                         margin=cfg.outer.margin,
                         newton_tol=cfg.outer.newton_tol,
                         min_step=cfg.outer.min_step,
                         schedule=list(cfg.outer.schedule) or None,
                         override_feasibility=self.override)
        sol = outer_fields(solve_zeta1(sol), cfg.model.epsilon)
        self.sol = sol
        ops = sol.ops
        self._save_csv('outer_nodes.csv',
                       ('x', 'y', 'zeta', 'zeta1'),
                       (ops.node_xy[:, 0], ops.node_xy[:, 1],
                        sol.zeta_nodes, sol.zeta1_nodes))
        for name, fld in (('outer_zeta.csv', sol.zeta),
                          ('outer_zeta1.csv', sol.zeta1),
                          ('outer_rho_o.csv', sol.rho_o)):
            x, y, v = _grid_columns(fld)
            self._save_csv(name, ('x', 'y', 'value'), (x, y, v))
        trace = {
            'mu_path': [asdict(step) for step in sol.mu_path],
            'max_grad': sol.max_grad,
            'residual_norm': sol.residual_norm,
            'flux_mismatch': sol.flux_mismatch,
            'n_nodes': ops.n_nodes,
            'h': ops.h,
        }
        self._save_json('outer_trace.json', trace)
        self.manifest.scalars.update(
            max_grad=sol.max_grad, outer_residual_norm=sol.residual_norm,
            continuation_steps=len(sol.mu_path))

    def _load_outer(self):
        '''Rebuild the outer solution from saved node artifacts.'''
        path = self._out('outer_nodes.csv')
        if not os.path.exists(path):
            raise ConfigError('outer artifacts not found in %s; run the '
                              'outer stage first' % self.cfg.out)
        data = np.loadtxt(path, delimiter=',', skiprows=1, ndmin=2)
        sol = rebuild_solution(self.boundary(), self.current(),
                               self.cfg.outer.n, data[:, 2],
                               zeta1_nodes=data[:, 3], node_xy=data[:, :2],
                               margin=self.cfg.outer.margin)
        return outer_fields(sol, self.cfg.model.epsilon)

    # ---- stage: inner -------------------------------------------------

    def stage_inner(self):
        cfg = self.cfg
        if self.sol is None:
            self.sol = self._load_outer()
        st = extract_stations(self.sol, n_stations=cfg.inner.n_stations)
        profs = solve_inner_stations(st, cfg.model.sigma0,
                                     n_points=cfg.inner.n_points,
                                     tol=cfg.inner.tol)
        self.stations = st
        self.profiles = profs
        self._save_csv('stations.csv',
                       ('index', 's', 'j', 'kappa', 'zeta0', 'zeta_s',
                        'zeta_t', 'zeta_tt', 'rho_r', 'rho_j', 'a1'),
                       (np.arange(st.n), st.s, st.j, st.kappa, st.zeta0,
                        st.zeta_s, st.zeta_t, st.zeta_tt, st.rho_r,
                        st.rho_j, st.a1))
        os.makedirs(self._out('inner_profiles'), exist_ok=True)
        summary_rows = []
        for idx, prof in enumerate(profs):
            rel = 'inner_profiles/station_%03d.csv' % idx
            self._save_csv(rel,
                           ('tau', 'rho_i0', 'phi_i0', 'dphi_i0',
                            'dupsilon_i0', 'upsilon_i0'),
                           (prof.tau_grid, prof.rho_i0, prof.phi_i0,
                            prof.dphi_i0, prof.dupsilon_i0,
                            prof.upsilon_i0))
            summary_rows.append({
                'index': idx,
                's': float(st.s[idx]),
                'j_r': prof.params.j_r,
                'rho_r': prof.params.rho_r,
                'dzeta_dt0': prof.params.dzeta_dt0,
                'mu_j': prof.mu_j,
                'rho_j': prof.rho_j,
                'decay_rate': prof.decay_rate,
                'newton_iters': prof.corrected.leading.newton_iters,
                'correction_iters': len(prof.corrected.iterations),
            })
        mu_js = [r['mu_j'] for r in summary_rows]
        summary = {
            'sigma0': cfg.model.sigma0,
            'n_stations': st.n,
            'n_points': cfg.inner.n_points,
            'mu_j_min': min(mu_js),
            'mu_j_max': max(mu_js),
            'stations': summary_rows,
        }
        self._save_json('inner_summary.json', summary)
        self.manifest.scalars.update(mu_j_min=min(mu_js),
                                     mu_j_max=max(mu_js))

    def _load_profiles(self, stations):
        '''Reconstruct station profiles from saved inner artifacts.'''
        import json
        path = self._out('inner_summary.json')
        if not os.path.exists(path):
            raise ConfigError('inner artifacts not found in %s; run the '
                              'inner stage first' % self.cfg.out)
        with open(path, encoding='utf-8') as fh:
            summary = json.load(fh)
        if summary['n_stations'] != stations.n:
            raise ConfigError('inner artifacts hold %d stations but the '
                              'config asks for %d'
                              % (summary['n_stations'], stations.n))
        if summary['sigma0'] != self.cfg.model.sigma0:
            raise ConfigError('inner artifacts were computed at sigma0 = %g, '
                              'config says %g'
                              % (summary['sigma0'], self.cfg.model.sigma0))
        profs = []
        for row in summary['stations']:
            rel = 'inner_profiles/station_%03d.csv' % row['index']
            data = np.loadtxt(self._out(rel), delimiter=',', skiprows=1,
                              ndmin=2)
            params = InnerParams(j_r=row['j_r'], rho_r=row['rho_r'],
                                 sigma0=summary['sigma0'],
                                 dzeta_dt0=row['dzeta_dt0'])
            profs.append(PhysicalInnerProfiles(
                tau_grid=data[:, 0], rho_i0=data[:, 1], phi_i0=data[:, 2],
                dphi_i0=data[:, 3], dupsilon_i0=data[:, 4],
                upsilon_i0=data[:, 5], rho_j=row['rho_j'],
                mu_j=row['mu_j'], decay_rate=row['decay_rate'],
                params=params))
        return profs

    # ---- stage: composite ---------------------------------------------

    def stage_composite(self):
        cfg = self.cfg
        if self.sol is None:
            self.sol = self._load_outer()
        if self.stations is None:
            self.stations = extract_stations(self.sol,
                                             n_stations=cfg.inner.n_stations)
        if self.profiles is None:
            self.profiles = self._load_profiles(self.stations)
        cutoff = CutoffSpec(iota=cfg.model.iota)
        comp = assemble_composite(self.sol, self.stations, self.profiles,
                                  cfg.model.epsilon, cutoff=cutoff)
        rep = residuals(comp, n_t=cfg.composite.n_t or None)
        for name, fld in (('composite_rho0.csv', comp.rho0),
                          ('composite_chi0.csv', comp.chi0),
                          ('composite_phi0.csv', comp.phi0)):
            x, y, v = _grid_columns(fld)
            self._save_csv(name, ('x', 'y', 'value'), (x, y, v))
        payload = {
            'eps': rep.eps, 'delta': rep.delta, 'iota': cfg.model.iota,
            'sigma0': cfg.model.sigma0,
            'h1': rep.h1, 'div_h2': rep.div_h2, 'h3': rep.h3,
            'h1_band': rep.h1_band, 'h1_interior': rep.h1_interior,
            'h1_cut': rep.h1_cut, 'h1_outer': rep.h1_outer,
            'div_h2_band': rep.div_h2_band,
            'div_h2_interior': rep.div_h2_interior,
            'div_h2_cut': rep.div_h2_cut, 'div_h2_outer': rep.div_h2_outer,
            'h3_band': rep.h3_band, 'h3_interior': rep.h3_interior,
            'h3_cut': rep.h3_cut, 'h3_outer': rep.h3_outer,
            'gauge_rel': rep.gauge_rel,
            'sup_h1_outer_check': rep.sup_h1_outer_check,
        }
        for key, ident in (('identity_conservation',
                            rep.identity_conservation),
                           ('identity_gradient', rep.identity_gradient)):
            if ident is not None:
                payload[key] = {'l2': ident.l2, 'sup': ident.sup,
                                'h_b': ident.h_b, 'h_grid': ident.h_grid}
        self._save_json('residual_report.json', payload)
        self.manifest.scalars.update(
            h1=rep.h1, div_h2=rep.div_h2, h3=rep.h3,
            gauge_rel=rep.gauge_rel)

    # ---- stage: stability ---------------------------------------------

    def _stability_required(self):
        cfg = self.cfg.stability
        missing = []
        if cfg.beta is None:
            missing.append('stability.beta: required for this stage')
        if cfg.sigma is None:
            missing.append('stability.sigma: required for this stage')
        if missing:
            raise ConfigError(missing)
        return cfg

    def stage_stability(self):
        cfg = self._stability_required()
        verdict, min_lam, modes = stability_verdict(
            cfg.beta, cfg.sigma, l=cfg.l, eps=cfg.eps, n_max=cfg.n_max)
        n = np.arange(1, cfg.n_max + 1)
        self._save_csv('stability_modes.csv',
                       ('n', 'gamma', 'lambda_plus', 'lambda_minus',
                        'A_plus', 'A_minus', 'discriminant'),
                       (n, np.array([m.gamma for m in modes]),
                        np.array([m.lambda_plus for m in modes]),
                        np.array([m.lambda_minus for m in modes]),
                        np.array([m.A_plus for m in modes]),
                        np.array([m.A_minus for m in modes]),
                        np.array([m.discriminant for m in modes])))
        summary = {
            'beta': cfg.beta, 'sigma': cfg.sigma, 'l': cfg.l,
            'eps': cfg.eps, 'n_max': cfg.n_max,
            'verdict': verdict,
            'min_lambda_minus': min_lam,
            'lambda_minus_zero_limit': lambda_minus_zero(cfg.beta,
                                                         cfg.sigma),
            'threshold_beta': stability_threshold(cfg.sigma),
        }
        self._save_json('stability_summary.json', summary)
        self.manifest.scalars.update(min_lambda_minus=min_lam,
                                     threshold_beta=summary['threshold_beta'])

    # ---- stage: evolve1d ----------------------------------------------

    def stage_evolve1d(self):
        stab = self._stability_required()
        ev = self.cfg.evolve1d
        inp = StabilityInput(beta=stab.beta, sigma=stab.sigma, l=stab.l,
                             eps=stab.eps,
                             mode_indices=tuple(range(1, stab.n_max + 1)))
        res = evolve_1d(inp, mode=ev.mode, amplitude=ev.amplitude, T=ev.T,
                        dt=ev.dt, n_cells=ev.n_cells)
        self._save_csv('evolve_history.csv', ('t', 'pert_norm'),
                       (res.times, res.pert_norm))
        gamma = inp.gamma(ev.mode)
        predicted = -eigenvalues(stab.beta, stab.sigma, gamma).lambda_minus
        fit = {
            'mode': ev.mode, 'gamma': gamma,
            'amplitude': ev.amplitude, 'T': ev.T, 'dt': ev.dt,
            'n_cells': ev.n_cells,
            'fitted_rate': res.fitted_rate,
            'predicted_rate': predicted,
            'rel_mismatch': abs(res.fitted_rate - predicted)
                            / max(abs(predicted), 1e-30),
            'fit_window': list(res.fit_window),
            'drift': res.drift,
            'gauge_avg_max': res.gauge_avg_max,
        }
        self._save_json('evolve_fit.json', fit)
        self.manifest.scalars.update(fitted_rate=res.fitted_rate,
                                     predicted_rate=predicted)

    # ---- stage: sweep -------------------------------------------------

    def stage_sweep(self):
        cfg = self.cfg
        errors = []
        if cfg.sweep.axis is None:
            errors.append('sweep.axis: required for the sweep stage')
        if not cfg.sweep.values:
            errors.append('sweep.values: must be a non-empty list')
        if errors:
            raise ConfigError(errors)
        if self.config_path is None:
            raise ConfigError('sweep: needs the config file path to spawn '
                              'per-value runs')
        axis = cfg.sweep.axis
        values = list(cfg.sweep.values)
        tasks = [(os.path.abspath(self.config_path),
                  os.path.join(cfg.out, 'sweep_%s_%g' % (axis, v)),
                  axis, v, self.override) for v in values]
        if self.jobs > 1:
            with concurrent.futures.ProcessPoolExecutor(
                    max_workers=self.jobs) as ex:
                results = list(ex.map(_sweep_worker, tasks))
        else:
            results = [_sweep_worker(t) for t in tasks]

        keys = SWEEP_HEADLINES[axis]
        cols = {key: [] for key in keys}
        ok_col = []
        for (code, scalars, _err) in results:
            ok_col.append(1 if code == EXIT_OK else 0)
            for key in keys:
                cols[key].append(float(scalars.get(key, np.nan)))
        header = [axis, 'ok'] + keys
        columns = [np.array(values), np.array(ok_col)] + \
                  [np.array(cols[k]) for k in keys]
        if axis == 'epsilon':
            # rate table: factor by which each norm drops per step
            for key in ('h1', 'div_h2', 'h3'):
                ratio = np.full(len(values), np.nan)
                arr = np.array(cols[key])
                ratio[1:] = arr[:-1] / arr[1:]
                header.append(key + '_factor')
                columns.append(ratio)
        self._save_csv('sweep_%s.csv' % axis, header, columns)
        summary = {
            'axis': axis,
            'values': values,
            'runs': [{'value': v, 'exit_code': code,
                      'status': _code_name(code), 'error': err,
                      'out': os.path.relpath(t[1], cfg.out)}
                     for v, t, (code, _s, err) in zip(values, tasks,
                                                      results)],
        }
        self._save_json('sweep_summary.json', summary)

    # ---- orchestration ------------------------------------------------

    def run(self, stages):
        os.makedirs(self.cfg.out, exist_ok=True)
        failed = set()
        codes = []
        try:
            for name in stages:
                deps = [d for d in DEPENDS[name] if d in stages]
                if any(d in failed for d in deps):
                    self.manifest.stages[name] = {'status': 'blocked'}
                    failed.add(name)
                    continue
                t0 = time.perf_counter()
                try:
                    getattr(self, 'stage_' + name)()
                    self.manifest.stages[name] = {'status': 'ok'}
                except _Infeasible:
                    self.manifest.stages[name] = {'status': 'infeasible'}
                    failed.add(name)
                    codes.append(EXIT_INFEASIBLE)
                except SOLVER_ERRORS as exc:
                    self.manifest.stages[name] = {
                        'status': 'failed',
                        'error': '%s: %s' % (type(exc).__name__, exc)}
                    failed.add(name)
                    codes.append(EXIT_SOLVER)
                except ConfigError as exc:
                    self.manifest.stages[name] = {
                        'status': 'failed', 'error': str(exc)}
                    failed.add(name)
                    codes.append(EXIT_CONFIG)
                except (ValueError, OSError) as exc:
                    self.manifest.stages[name] = {
                        'status': 'failed',
                        'error': '%s: %s' % (type(exc).__name__, exc)}
                    failed.add(name)
                    codes.append(EXIT_CONFIG)
                except RuntimeError as exc:
                    self.manifest.stages[name] = {
                        'status': 'failed',
                        'error': '%s: %s' % (type(exc).__name__, exc)}
                    failed.add(name)
                    codes.append(EXIT_SOLVER)
                finally:
                    self.timings[name] = time.perf_counter() - t0
        finally:
            write_json(os.path.join(self.cfg.out, 'timings.json'),
                       {k: round(v, 3) for k, v in self.timings.items()})
            self.manifest.write(self.cfg.out)
        for code in (EXIT_CONFIG, EXIT_SOLVER, EXIT_INFEASIBLE):
            if code in codes:
                return code
        return EXIT_OK


SWEEP_HEADLINES = {
    'epsilon': ['h1', 'div_h2', 'h3', 'gauge_rel'],
    'sigma0': ['mu_j_min', 'mu_j_max', 'h1', 'div_h2', 'h3'],
    'amplitude': ['sup_M', 'feasibility_margin', 'max_grad'],
    'beta': ['min_lambda_minus', 'threshold_beta'],
}

SWEEP_STAGES = {
    'epsilon': ('feasibility', 'outer', 'inner', 'composite'),
    'sigma0': ('feasibility', 'outer', 'inner', 'composite'),
    'amplitude': ('feasibility', 'outer'),
    'beta': ('stability',),
}


def _code_name(code):
    return {EXIT_OK: 'ok', EXIT_INFEASIBLE: 'infeasible',
            EXIT_SOLVER: 'solver_failure',
            EXIT_CONFIG: 'config_error'}.get(code, 'error')


def _sweep_worker(task):
    """One sweep value: an independent run in its own subdirectory.

    Returns (exit_code, scalars, error_text); failures are contained so
    the sweep continues over the remaining values.
    """
    config_path, out_dir, axis, value, override = task
    try:
        cfg = load_config(config_path, out_override=out_dir)
        if axis == 'epsilon':
            cfg.model.epsilon = value
        elif axis == 'sigma0':
            cfg.model.sigma0 = value
        elif axis == 'amplitude':
            cfg.current.amplitude = value
        elif axis == 'beta':
            cfg.stability.beta = value
        runner = Runner(cfg, override_feasibility=override, jobs=1,
                        config_path=config_path)
        code = runner.run(SWEEP_STAGES[axis])
        err = None
        if code != EXIT_OK:
            notes = ['%s: %s' % (name, rec.get('error', rec['status']))
                     for name, rec in runner.manifest.stages.items()
                     if rec['status'] not in ('ok',)]
            err = '; '.join(notes)
        return code, dict(runner.manifest.scalars), err
    except ConfigError as exc:
        return EXIT_CONFIG, {}, str(exc)
    except Exception as exc:               # keep the sweep alive
        return EXIT_SOLVER, {}, '%s: %s' % (type(exc).__name__, exc)


def build_parser():
    parser = argparse.ArgumentParser(
        prog='glcurrent',
        description='Vortex-free Ginzburg-Landau states under strong '
                    'applied currents: feasibility, outer/inner solves, '
                    'composite residuals, and 1D stability.')
    parser.add_argument('--version', action='version', version=__version__)
    sub = parser.add_subparsers(dest='command', required=True)
    for name in STAGES_BY_COMMAND:
        p = sub.add_parser(name, help='run the %s stage(s)' % name)
        p.add_argument('--config', required=True, help='TOML config file')
        p.add_argument('--out', default=None,
                       help='output directory (overrides config)')
        p.add_argument('--override-feasibility', action='store_true',
                       help='run PDE stages even when the current profile '
                            'fails the feasibility gate')
        p.add_argument('--jobs', type=int, default=1,
                       help='parallel workers for sweep values')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, out_override=args.out)
    except ConfigError as exc:
        for line in exc.errors:
            print('config error: %s' % line, file=sys.stderr)
        return EXIT_CONFIG
    runner = Runner(cfg, override_feasibility=args.override_feasibility,
                    jobs=args.jobs, config_path=args.config)
    code = runner.run(STAGES_BY_COMMAND[args.command])
    status = {name: rec['status']
              for name, rec in runner.manifest.stages.items()}
    print('run %s: %s -> %s' % (_code_name(code), status, cfg.out))
    return code


if __name__ == '__main__':
    sys.exit(main())
