"""Run configuration: TOML parsing with field-path validation.

The config file is a single TOML document with nested sections; field
names mirror the model symbols (epsilon, sigma0, iota, beta).  Every
validation failure is reported with its dotted field path so a broken
config can be fixed in one round.
"""

import sys
from dataclasses import dataclass, field, asdict

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:                                   # pragma: no cover
    import tomli as tomllib

from .geometry import boundary_preset, build_boundary, boundary_from_csv
from .feasibility import CurrentProfile

__all__ = ['ConfigError', 'RunConfig', 'DomainConfig', 'CurrentConfig',
           'ModelConfig', 'OuterConfig', 'InnerConfig', 'CompositeConfig',
           'StabilityConfig', 'Evolve1dConfig', 'SweepConfig', 'load_config',
           'build_domain', 'build_current']

SWEEP_AXES = ('epsilon', 'sigma0', 'beta', 'amplitude')
DOMAIN_PRESETS = ('circle', 'ellipse', 'stadium', 'dumbbell')
CURRENT_PRESETS = ('cosine', 'harmonics')


class ConfigError(ValueError):
    """Validation failure; one 'path: message' line per offending field."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__('\n'.join(self.errors))


@dataclass
class DomainConfig:
    preset: str = 'circle'
    n: int = 256
    csv: str = None
    params: dict = field(default_factory=dict)


@dataclass
class CurrentConfig:
    preset: str = 'cosine'
    amplitude: float = None
    mode: int = 1
    modes: tuple = ()
    weights: tuple = ()
    csv: str = None


@dataclass
class ModelConfig:
    epsilon: float = 0.04
    sigma0: float = 1.0
    iota: float = 0.9


@dataclass
class OuterConfig:
    n: int = 96
    margin: float = 0.018
    schedule: tuple = ()
    newton_tol: float = 1e-10
    min_step: float = 1e-4


@dataclass
class InnerConfig:
    n_stations: int = 64
    n_points: int = 2048
    tol: float = 1e-10


@dataclass
class CompositeConfig:
    n_t: int = 0                # 0 -> resolution chosen by the evaluator


@dataclass
class StabilityConfig:
    beta: float = None
    sigma: float = None
    l: float = 1.0
    eps: float = None           # defaults to model.epsilon
    n_max: int = 8


@dataclass
class Evolve1dConfig:
    mode: int = 1
    amplitude: float = 1e-4
    T: float = 30.0
    dt: float = 2e-3
    n_cells: int = 800


@dataclass
class SweepConfig:
    axis: str = None
    values: tuple = ()


@dataclass
class RunConfig:
    """Fully resolved run configuration (defaults applied)."""
    out: str = 'out'
    domain: DomainConfig = field(default_factory=DomainConfig)
    current: CurrentConfig = field(default_factory=CurrentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    outer: OuterConfig = field(default_factory=OuterConfig)
    inner: InnerConfig = field(default_factory=InnerConfig)
    composite: CompositeConfig = field(default_factory=CompositeConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    evolve1d: Evolve1dConfig = field(default_factory=Evolve1dConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def echo(self):
        '''Plain nested dict of the resolved config, for the manifest.'''
        d = asdict(self)
        for sec in d.values():
            if isinstance(sec, dict):
                for k, v in sec.items():
                    if isinstance(v, tuple):
                        sec[k] = list(v)
        return d


def _take(table, section, key, kind, errors, default, lo=None, hi=None,
          lo_open=False, hi_open=False, choices=None):
    """Pop table[key] with type and range checks; fall back to default."""
    path = '%s.%s' % (section, key) if section else key
    if key not in table:
        return default
    v = table.pop(key)
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            errors.append('%s: expected a number, got %r' % (path, v))
            return default
        v = float(v)
    elif kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            errors.append('%s: expected an integer, got %r' % (path, v))
            return default
    elif kind is str:
        if not isinstance(v, str):
            errors.append('%s: expected a string, got %r' % (path, v))
            return default
    if choices is not None and v not in choices:
        errors.append('%s: %r is not one of %s' % (path, v, list(choices)))
        return default
    if lo is not None and (v <= lo if lo_open else v < lo):
        errors.append('%s: %r is below the allowed range' % (path, v))
        return default
    if hi is not None and (v >= hi if hi_open else v > hi):
        errors.append('%s: %r is above the allowed range' % (path, v))
        return default
    return v


def _take_list(table, section, key, kind, errors, default=()):
    path = '%s.%s' % (section, key)
    if key not in table:
        return default
    v = table.pop(key)
    if not isinstance(v, list):
        errors.append('%s: expected a list' % path)
        return default
    out = []
    for i, x in enumerate(v):
        if kind is float and isinstance(x, (int, float)) \
                and not isinstance(x, bool):
            out.append(float(x))
        elif kind is int and isinstance(x, int) and not isinstance(x, bool):
            out.append(x)
        else:
            errors.append('%s[%d]: expected a number, got %r' % (path, i, x))
    return tuple(out)


def _reject_unknown(table, section, errors):
    for key in sorted(table):
        path = '%s.%s' % (section, key) if section else key
        errors.append('%s: unknown field' % path)


def load_config(path, out_override=None):
    """Parse and validate a TOML run config; raises ConfigError."""
    try:
        with open(path, 'rb') as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError('config file not found: %s' % path) from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError('config parse error: %s' % exc) from None
    return parse_config(raw, out_override=out_override)


def parse_config(raw, out_override=None):
    errors = []
    top = dict(raw)
    cfg = RunConfig()
    cfg.out = _take(top, '', 'out', str, errors, cfg.out)

    dom = dict(top.pop('domain', {}))
    d = DomainConfig()
    d.preset = _take(dom, 'domain', 'preset', str, errors, d.preset,
                     choices=DOMAIN_PRESETS)
    d.n = _take(dom, 'domain', 'n', int, errors, d.n, lo=8)
    d.csv = _take(dom, 'domain', 'csv', str, errors, None)
    d.params = {k: v for k, v in dom.items()
                if isinstance(v, (int, float)) and not isinstance(v, bool)}
    for k in list(d.params):
        dom.pop(k)
    _reject_unknown(dom, 'domain', errors)
    cfg.domain = d

    cur = dict(top.pop('current', {}))
    c = CurrentConfig()
    c.preset = _take(cur, 'current', 'preset', str, errors, c.preset,
                     choices=CURRENT_PRESETS)
    c.amplitude = _take(cur, 'current', 'amplitude', float, errors, None)
    c.mode = _take(cur, 'current', 'mode', int, errors, c.mode, lo=1)
    c.modes = _take_list(cur, 'current', 'modes', int, errors)
    c.weights = _take_list(cur, 'current', 'weights', float, errors)
    c.csv = _take(cur, 'current', 'csv', str, errors, None)
    _reject_unknown(cur, 'current', errors)
    if c.preset == 'harmonics' and c.csv is None:
        if not c.modes:
            errors.append('current.modes: required for the harmonics preset')
        if c.weights and len(c.weights) != len(c.modes):
            errors.append('current.weights: length must match current.modes')
    cfg.current = c

    mod = dict(top.pop('model', {}))
    m = ModelConfig()
    m.epsilon = _take(mod, 'model', 'epsilon', float, errors, m.epsilon,
                      lo=0.0, lo_open=True)
    m.sigma0 = _take(mod, 'model', 'sigma0', float, errors, m.sigma0,
                     lo=0.0, lo_open=True)
    m.iota = _take(mod, 'model', 'iota', float, errors, m.iota,
                   lo=0.0, hi=1.0, lo_open=True, hi_open=True)
    _reject_unknown(mod, 'model', errors)
    cfg.model = m

    out_t = dict(top.pop('outer', {}))
    o = OuterConfig()
    o.n = _take(out_t, 'outer', 'n', int, errors, o.n, lo=16)
    o.margin = _take(out_t, 'outer', 'margin', float, errors, o.margin,
                     lo=0.0, hi=0.5)
    o.schedule = _take_list(out_t, 'outer', 'schedule', float, errors)
    o.newton_tol = _take(out_t, 'outer', 'newton_tol', float, errors,
                         o.newton_tol, lo=0.0, lo_open=True)
    o.min_step = _take(out_t, 'outer', 'min_step', float, errors,
                       o.min_step, lo=0.0, lo_open=True)
    _reject_unknown(out_t, 'outer', errors)
    cfg.outer = o

    inn = dict(top.pop('inner', {}))
    i = InnerConfig()
    i.n_stations = _take(inn, 'inner', 'n_stations', int, errors,
                         i.n_stations, lo=4)
    i.n_points = _take(inn, 'inner', 'n_points', int, errors, i.n_points,
                       lo=64)
    i.tol = _take(inn, 'inner', 'tol', float, errors, i.tol,
                  lo=0.0, lo_open=True)
    _reject_unknown(inn, 'inner', errors)
    cfg.inner = i

    com = dict(top.pop('composite', {}))
    cc = CompositeConfig()
    cc.n_t = _take(com, 'composite', 'n_t', int, errors, cc.n_t, lo=0)
    _reject_unknown(com, 'composite', errors)
    cfg.composite = cc

    stab = dict(top.pop('stability', {}))
    st = StabilityConfig()
    st.beta = _take(stab, 'stability', 'beta', float, errors, None,
                    lo=0.0, hi=1.0, hi_open=True)
    st.sigma = _take(stab, 'stability', 'sigma', float, errors, None,
                     lo=0.0, lo_open=True)
    st.l = _take(stab, 'stability', 'l', float, errors, st.l,
                 lo=0.0, lo_open=True)
    st.eps = _take(stab, 'stability', 'eps', float, errors, None,
                   lo=0.0, lo_open=True)
    st.n_max = _take(stab, 'stability', 'n_max', int, errors, st.n_max, lo=1)
    _reject_unknown(stab, 'stability', errors)
    if st.eps is None:
        st.eps = m.epsilon
    cfg.stability = st

    ev = dict(top.pop('evolve1d', {}))
    e = Evolve1dConfig()
    e.mode = _take(ev, 'evolve1d', 'mode', int, errors, e.mode, lo=1)
    e.amplitude = _take(ev, 'evolve1d', 'amplitude', float, errors,
                        e.amplitude, lo=0.0, lo_open=True)
    e.T = _take(ev, 'evolve1d', 'T', float, errors, e.T, lo=0.0,
                lo_open=True)
    e.dt = _take(ev, 'evolve1d', 'dt', float, errors, e.dt, lo=0.0,
                 lo_open=True)
    e.n_cells = _take(ev, 'evolve1d', 'n_cells', int, errors, e.n_cells,
                      lo=16)
    _reject_unknown(ev, 'evolve1d', errors)
    cfg.evolve1d = e

    sw = dict(top.pop('sweep', {}))
    s = SweepConfig()
    s.axis = _take(sw, 'sweep', 'axis', str, errors, None,
                   choices=SWEEP_AXES)
    s.values = _take_list(sw, 'sweep', 'values', float, errors)
    _reject_unknown(sw, 'sweep', errors)
    cfg.sweep = s

    _reject_unknown(top, '', errors)
    if out_override is not None:
        cfg.out = out_override
    if errors:
        raise ConfigError(errors)
    return cfg


def require(cfg, pairs):
    """Check that the listed (path, value) pairs are present (not None)."""
    missing = ['%s: required for the requested stages' % path
               for path, value in pairs if value is None]
    if missing:
        raise ConfigError(missing)


def build_domain(cfg):
    '''BoundaryGeometry from the domain block (preset or CSV).'''
    if cfg.domain.csv is not None:
        return boundary_from_csv(cfg.domain.csv)
    pts = boundary_preset(cfg.domain.preset, cfg.domain.n,
                          **cfg.domain.params)
    return build_boundary(pts)


def build_current(cfg, bnd):
    '''CurrentProfile on bnd from the current block (preset or CSV).'''
    s = bnd.arclength
    L = bnd.total_length
    c = cfg.current
    if c.csv is not None:
        data = np.loadtxt(c.csv, delimiter=',', ndmin=2)
        if data.shape[1] < 2:
            raise ConfigError('current.csv: need columns s, j')
        j = np.interp(s, data[:, 0], data[:, 1], period=L)
        return CurrentProfile.from_samples(bnd, j)
    if c.amplitude is None:
        raise ConfigError('current.amplitude: required for preset currents')
    if c.preset == 'cosine':
        j = c.amplitude * np.cos(2.0 * np.pi * c.mode * s / L)
    else:
        w = c.weights if c.weights else (1.0,) * len(c.modes)
        j = np.zeros_like(s)
        for mk, wk in zip(c.modes, w):
            j += wk * np.cos(2.0 * np.pi * mk * s / L)
        j *= c.amplitude
    return CurrentProfile.from_samples(bnd, j)
