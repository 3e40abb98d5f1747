"""One-dimensional linear stability of the current-carrying steady state.

The rescaled 1D model on [0, L] (lengths in coherence-length units, time in
diffusion units, phi the rescaled potential, sigma the rescaled conductivity)

    u_t + i phi u = u_xx + u (1 - |u|^2)
    sigma phi_x  = Im(conj(u) u_x) - I_total

has the steady state u_s = rho_s e^{i beta x}, phi_s = 0 with
rho_s^2 = 1 - beta^2 and total current I_total = beta (1 - beta^2).

Working in the co-moving frame v = u e^{-i beta (x - L/2)}, perturbations
v = rho_s + a sin(gamma x) + i A a cos(gamma x) decay like e^{-lambda t} with
two branches

    lambda_pm = gamma^2 + (1-beta^2)(1 + 1/(2 sigma))
                +- sqrt((1-beta^2)^2 (1 - 1/(2 sigma))^2
                        + 4 beta^2 (gamma^2 + (1-beta^2)/sigma))

and mixing constants

    A_pm = [(1-beta^2)(1 - 1/(2 sigma)) +- sqrt(D)] / (2 beta gamma),

where lambda_minus belongs to A_plus and lambda_plus to A_minus.  As
gamma -> 0 the slow branch has the closed form

    lambda_minus^0 = (1-beta^2)(1 + 1/(2 sigma))
                     - sqrt((1-beta^2)^2 (1 + 1/(2 sigma))^2
                            - 2 (1-beta^2)(1 - 3 beta^2)/sigma),

negative exactly when beta > 1/sqrt(3), for every sigma > 0.
"""

import numpy as np
from dataclasses import dataclass, field

__all__ = ['StabilityInput', 'ModeResult', 'EvolutionResult', 'BlowupError',
           'eigenvalues', 'lambda_minus_zero', 'stability_threshold',
           'stability_verdict', 'eigenvector_residual', 'evolve_1d']


@dataclass(frozen=True)
class StabilityInput:
    """Parameters of the 1D stability problem.

    beta: phase-gradient amplitude of the steady state, in [0, 1)
    sigma: rescaled normal conductivity, > 0
    l: physical interval length
    eps: coherence-length parameter (sets gamma_n = eps n pi / l)
    mode_indices: mode numbers n to scan
    """
    beta: float
    sigma: float
    l: float = 1.0
    eps: float = 0.02
    mode_indices: tuple = (1, 2, 3, 4, 5, 6, 7, 8)

    def __post_init__(self):
        if not (0.0 <= self.beta < 1.0):
            raise ValueError('beta must lie in [0, 1)')
        if self.sigma <= 0.0:
            raise ValueError('sigma must be positive')
        if self.l <= 0.0 or self.eps <= 0.0:
            raise ValueError('l and eps must be positive')

    def gamma(self, n):
        '''Mode wavenumber gamma_n = eps n pi / l (= n pi / L on the scaled interval).'''
        return self.eps * n * np.pi / self.l


@dataclass(frozen=True)
class ModeResult:
    """Closed-form record for one wavenumber gamma."""
    gamma: float
    lambda_plus: float
    lambda_minus: float
    A_plus: float
    A_minus: float
    discriminant: float
    degenerate: bool = False   # True when beta = 0 (A from the flagged limit)


class BlowupError(RuntimeError):
    """Norm blowup in the time stepper; carries a suggested smaller dt."""

    def __init__(self, message, suggested_dt):
        super().__init__(message)
        self.suggested_dt = suggested_dt


def _discriminant(beta, sigma, gamma):
    r2 = 1.0 - beta * beta
    return (r2 * (1.0 - 0.5 / sigma)) ** 2 + 4.0 * beta * beta * (gamma * gamma + r2 / sigma)


def eigenvalues(beta, sigma, gamma):
    """Both decay rates and mixing constants at wavenumber gamma.

    Returns a ModeResult.  lambda_minus is the slow branch and pairs with
    A_plus.  For beta = 0 the branches decouple (pure amplitude and pure
    phase modes); the A values are then reported as the flagged limits
    A_plus -> inf (returned as np.inf) and A_minus -> 0.
    """
    if not (0.0 <= beta < 1.0):
        raise ValueError('beta must lie in [0, 1)')
    if sigma <= 0.0:
        raise ValueError('sigma must be positive')
    r2 = 1.0 - beta * beta
    D = _discriminant(beta, sigma, gamma)
    sq = np.sqrt(D)
    base = gamma * gamma + r2 * (1.0 + 0.5 / sigma)
    lam_p = base + sq
    lam_m = base - sq
    if beta == 0.0 or gamma == 0.0:
        A_p, A_m = np.inf, 0.0
        degenerate = True
    else:
        num = r2 * (1.0 - 0.5 / sigma)
        A_p = (num + sq) / (2.0 * beta * gamma)
        A_m = (num - sq) / (2.0 * beta * gamma)
        degenerate = False
    return ModeResult(gamma=float(gamma), lambda_plus=float(lam_p),
                      lambda_minus=float(lam_m), A_plus=float(A_p),
                      A_minus=float(A_m), discriminant=float(D),
                      degenerate=degenerate)


def lambda_minus_zero(beta, sigma):
    """Closed-form gamma -> 0 limit of the slow branch lambda_minus.

    Evaluated from its own formula (not by numerically sending gamma -> 0)
    to avoid cancellation near the threshold.
    """
    r2 = 1.0 - beta * beta
    a = 1.0 + 0.5 / sigma
    rad = (r2 * a) ** 2 - 2.0 * r2 * (1.0 - 3.0 * beta * beta) / sigma
    return r2 * a - np.sqrt(rad)


def stability_threshold(sigma, tol=1e-14):
    """Root of lambda_minus_zero(beta) = 0 in beta, by bisection.

    The analytic value is 1/sqrt(3) for every sigma; this computes it from
    the formula as an independent check.
    """
    lo, hi = 0.0, 1.0 - 1e-13
    flo = lambda_minus_zero(lo, sigma)
    fhi = lambda_minus_zero(hi, sigma)
    if not (flo > 0.0 > fhi):
        raise ValueError('lambda_minus_zero does not bracket a root on [0,1)')
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if lambda_minus_zero(mid, sigma) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def stability_verdict(beta, sigma, l=1.0, eps=0.02, n_max=8):
    """Scan modes gamma_n, n = 1..n_max, plus the gamma -> 0 limit.

    Returns (verdict, min_lambda, modes) where verdict is 'stable' when the
    minimum of lambda_minus over the scanned family (including the limit
    lambda_minus^0) is >= 0, 'unstable' otherwise; marginal zero counts as
    stable.  modes is the list of ModeResult for n = 1..n_max.
    """
    inp = StabilityInput(beta=beta, sigma=sigma, l=l, eps=eps,
                         mode_indices=tuple(range(1, n_max + 1)))
    modes = [eigenvalues(beta, sigma, inp.gamma(n)) for n in inp.mode_indices]
    lam0 = lambda_minus_zero(beta, sigma)
    min_lam = min([lam0] + [m.lambda_minus for m in modes])
    verdict = 'stable' if min_lam >= 0.0 else 'unstable'
    return verdict, float(min_lam), modes


def eigenvector_residual(beta, sigma, gamma, branch='minus', n_points=64):
    """Max-norm residual of the linearized system on the computed mode.

    Substitutes v_r = sin(gamma x), v_i = A cos(gamma x) and the induced
    potential phi = (rho_s / sigma)(A - 2 beta / gamma) cos(gamma x) into the
    co-moving linearization

        -lambda v_r = v_r'' - 2 beta v_i' - 2 rho_s^2 v_r
        -lambda v_i = v_i'' + 2 beta v_r' - rho_s phi

    with (lambda, A) = (lambda_minus, A_plus) or (lambda_plus, A_minus).
    For a correct closed form this is zero to roundoff at every x.
    """
    m = eigenvalues(beta, sigma, gamma)
    if m.degenerate:
        raise ValueError('residual check needs beta > 0 and gamma > 0')
    lam, A = ((m.lambda_minus, m.A_plus) if branch == 'minus'
              else (m.lambda_plus, m.A_minus))
    rho_s = np.sqrt(1.0 - beta * beta)
    x = np.linspace(0.0, 2.0 * np.pi / gamma, n_points)
    s, c = np.sin(gamma * x), np.cos(gamma * x)
    phi = (rho_s / sigma) * (A - 2.0 * beta / gamma) * c
    # v_r = sin, v_i = A cos
    res_r = (-lam * s) - (-gamma * gamma * s - 2.0 * beta * (-A * gamma * s)
                          - 2.0 * rho_s * rho_s * s)
    res_i = (-lam * A * c) - (-gamma * gamma * A * c + 2.0 * beta * gamma * c
                              - rho_s * phi)
    return float(max(np.abs(res_r).max(), np.abs(res_i).max()))


@dataclass
class EvolutionResult:
    """Trajectory record from evolve_1d."""
    times: np.ndarray
    pert_norm: np.ndarray
    fitted_rate: float
    fit_window: tuple
    drift: float
    gauge_avg_max: float
    x: np.ndarray = field(repr=False, default=None)
    v_final: np.ndarray = field(repr=False, default=None)


def _tridiag_lu(lower, diag, upper):
    '''Cached sparse LU of a tridiagonal matrix (reused every time step).'''
    import scipy.sparse as sp
    from scipy.sparse.linalg import splu
    return splu(sp.diags([lower, diag, upper], [-1, 0, 1]).tocsc())


def evolve_1d(inp, mode=1, amplitude=1e-4, T=30.0, dt=2e-3, n_cells=800,
              perturbation=None, rate_window=(0.25, 0.75), blowup_factor=10.0):
    """Semi-implicit time integration of the 1D model, cross-validating lambda_minus.

    Works on the scaled interval [0, L], L = l/eps, in the co-moving frame
    v = u e^{-i beta (x - L/2)}:

        v_t = v_xx + 2 i beta v_x - i phi v - beta^2 v + v (1 - |v|^2)
        sigma phi_x = Im(conj(v) v_x) + beta |v|^2 - beta (1 - beta^2)

    Diffusion is implicit (backward Euler via two real tridiagonal solves);
    advection, reaction and the phi coupling are explicit.  phi comes from one
    cumulative quadrature of the first-order current relation with its gauge
    constant fixed by the discrete average (|v|^2 phi) = 0.  Boundary rows:
    Re v has Dirichlet values rho_s (perturbations vanish there) and Im v has
    homogeneous Neumann, so the steady state is preserved exactly.

    perturbation: optional complex array on the node grid added to the steady
    state at t = 0; default seeds the closed-form eigenmode `mode` with the
    given amplitude.

    Returns an EvolutionResult whose fitted_rate is the log-linear slope of
    the perturbation norm over rate_window (fractions of [0, T]); the
    prediction is fitted_rate ~ -lambda_minus(gamma_mode).

    Raises BlowupError (with a suggested dt/4) when the perturbation norm
    grows by more than blowup_factor on three consecutive steps.
    """
    beta, sigma = inp.beta, inp.sigma
    L = inp.l / inp.eps
    rho_s = np.sqrt(1.0 - beta * beta)
    N = int(n_cells)
    x = np.linspace(0.0, L, N + 1)
    dx = L / N
    I_total = beta * (1.0 - beta * beta)

    v = np.full(N + 1, rho_s, dtype=complex)
    if perturbation is None:
        gam = mode * np.pi / L
        m = eigenvalues(beta, sigma, gam)
        A = m.A_plus if np.isfinite(m.A_plus) else 0.0
        pert = amplitude * (np.sin(gam * x) + 1j * A * np.cos(gam * x))
        if not np.isfinite(m.A_plus):
            # beta = 0: amplitude and phase decouple; seed the amplitude mode
            pert = amplitude * np.sin(gam * x) + 0j
    else:
        pert = np.asarray(perturbation, dtype=complex)
        if pert.shape != x.shape:
            raise ValueError('perturbation must be sampled on the node grid')
    # D_l(B)-compatible seed: Re part vanishes at the ends, Im part flat
    pert = pert.copy()
    pert.real[0] = 0.0
    pert.real[-1] = 0.0
    v += pert

    # backward-Euler diffusion matrices (I - dt Dxx)
    r = dt / (dx * dx)
    # Re rows: Dirichlet at both ends
    d_re = np.full(N + 1, 1.0 + 2.0 * r)
    lo_re = np.full(N, -r)
    up_re = np.full(N, -r)
    d_re[0] = d_re[-1] = 1.0
    up_re[0] = 0.0
    lo_re[-1] = 0.0
    lu_re = _tridiag_lu(lo_re, d_re, up_re)
    # Im rows: homogeneous Neumann via mirrored ghost
    d_im = np.full(N + 1, 1.0 + 2.0 * r)
    lo_im = np.full(N, -r)
    up_im = np.full(N, -r)
    up_im[0] = -2.0 * r
    lo_im[-1] = -2.0 * r
    lu_im = _tridiag_lu(lo_im, d_im, up_im)

    trap_w = np.full(N + 1, dx)
    trap_w[0] = trap_w[-1] = 0.5 * dx

    n_steps = int(round(T / dt))
    times = np.empty(n_steps + 1)
    norms = np.empty(n_steps + 1)

    def pert_norm(vv):
        return float(np.sqrt(np.sum(trap_w * np.abs(vv - rho_s) ** 2)))

    times[0] = 0.0
    norms[0] = pert_norm(v)
    gauge_max = 0.0
    grow_count = 0

    for step in range(1, n_steps + 1):
        # phi from the integrated first-order current relation
        dvr = np.gradient(v.real, dx)
        dvi = np.gradient(v.imag, dx)
        js = v.real * dvi - v.imag * dvr          # Im(conj(v) v_x)
        mod2 = np.abs(v) ** 2
        rhs_phi = (js + beta * mod2 - I_total) / sigma
        phi = np.concatenate(([0.0], np.cumsum(0.5 * (rhs_phi[1:] + rhs_phi[:-1]) * dx)))
        denom = np.sum(trap_w * mod2)
        phi -= np.sum(trap_w * mod2 * phi) / denom
        gauge = abs(np.sum(trap_w * mod2 * phi)) / max(denom, 1e-300)
        gauge_max = max(gauge_max, gauge)

        # explicit pieces: advection, potential coupling, reaction
        dv = np.gradient(v, dx)
        expl = (2j * beta * dv - 1j * phi * v - beta * beta * v
                + v * (1.0 - mod2))
        rhs = v + dt * expl
        # Dirichlet rows keep their steady values on the Re side
        re = rhs.real.copy()
        re[0] = rho_s
        re[-1] = rho_s
        vr = lu_re.solve(re)
        vi = lu_im.solve(rhs.imag)
        v = vr + 1j * vi

        times[step] = step * dt
        norms[step] = pert_norm(v)
        if norms[step] > blowup_factor * max(norms[step - 1], 1e-300) or not np.isfinite(norms[step]):
            grow_count += 1
            if grow_count >= 3 or not np.isfinite(norms[step]):
                raise BlowupError('norm blowup detected at t = %.4g; retry with dt = %.3g'
                                  % (times[step], dt / 4.0), dt / 4.0)
        else:
            grow_count = 0

    # steady-state drift when nothing was seeded
    drift = abs(norms[-1] - norms[0]) if np.max(np.abs(pert)) == 0.0 else float('nan')

    i0 = int(rate_window[0] * n_steps)
    i1 = max(int(rate_window[1] * n_steps), i0 + 2)
    logs = np.log(np.maximum(norms[i0:i1], 1e-300))
    slope = np.polyfit(times[i0:i1], logs, 1)[0]
    return EvolutionResult(times=times, pert_norm=norms, fitted_rate=float(slope),
                           fit_window=(float(times[i0]), float(times[i1 - 1])),
                           drift=drift, gauge_avg_max=gauge_max, x=x, v_final=v)
