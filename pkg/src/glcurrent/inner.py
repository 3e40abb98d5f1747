"""Boundary-layer profiles at one boundary station.

At a station with tangential factor rho_r = sqrt(1 - zeta_s^2), wall current
j and conductivity parameter sigma0, the layer is governed, after the
rescaling eta = rho_r tau / sqrt(sigma0), theta = sqrt(sigma0) phi / rho_r^2,
mu = rho / rho_r, j_r = j / rho_r^3, by the half-line system

    mu''/sigma0 = -mu + (theta' - j_r)^2 / mu^3 + mu^3
    theta''     = mu^2 theta
    mu'(0) = 0,  theta'(0) = j_r,  mu -> mu_j,  theta -> 0   (eta -> inf)

under the convention j_r <= 0 (stations with j_r > 0 are solved through the
reflection (j, phi) -> (-j, -phi) and mapped back).

Leading order (sigma0 -> inf) drops mu''/sigma0, so mu becomes the algebraic
branch mu0(t) solving mu^4 (1 - mu^2) = (t - j_r)^2 with mu^2 in (2/3, 1],
evaluated at t = theta0', and theta0 = w minimizes the strictly convex

    J(w) = k w(0) + int_0^inf ( L(w') + w^2/2 ) deta,
    L''(p) = 1/V(p),  k = L'(j_r),
    V(p) = 1 (p <= j_r),  mu0(p)^2 (j_r <= p <= 0),  mu_j^2 (p >= 0),

whose Euler-Lagrange equation is (L'(w'))' = w with natural boundary
condition w'(0) = j_r.  The sigma0-correction (mu1, theta1) is found by the
fixed-point iteration B (mu1, theta1) <- (mu0''/sigma0 + N1, N2) on the
linearization B of the system about (mu0, theta0).
"""

import numpy as np
from dataclasses import dataclass, field
from scipy.linalg import solve_banded
import scipy.sparse as sp
from scipy.sparse.linalg import splu

__all__ = ['InnerParams', 'LeadingProfiles', 'CorrectedProfiles',
           'PhysicalInnerProfiles', 'NoSubcriticalRoot', 'ContractionFailure',
           'LinearSolveFailure', 'mu_j', 'branch_mu0', 'solve_leading',
           'solve_corrected', 'unscale', 'solve_station']

MAX_JR2 = 4.0 / 27.0


class NoSubcriticalRoot(ValueError):
    """j_r^2 exceeds 4/27: no root with mu^2 in [2/3, 1] exists."""


class ContractionFailure(RuntimeError):
    """Fixed-point iterate norm grew three consecutive times (sigma0 too small)."""


class LinearSolveFailure(RuntimeError):
    """The linearized half-line operator could not be factorized/solved."""


@dataclass(frozen=True)
class InnerParams:
    """Station data for the layer solve.

    j_r: rescaled station current j / rho_r^3 (any sign; |j_r| < sqrt(4/27))
    rho_r: tangential amplitude sqrt(1 - zeta_s^2), in (sqrt(2/3), 1]
    sigma0: conductivity parameter sigma / eps^2, > 0
    dzeta_dt0: normal derivative of the outer phase at the wall (for upsilon')
    """
    j_r: float
    rho_r: float = 1.0
    sigma0: float = 100.0
    dzeta_dt0: float = 0.0

    def __post_init__(self):
        if self.j_r * self.j_r >= MAX_JR2:
            raise NoSubcriticalRoot('j_r^2 = %.6g >= 4/27' % (self.j_r * self.j_r))
        if not (np.sqrt(2.0 / 3.0) < self.rho_r <= 1.0):
            raise ValueError('rho_r must lie in (sqrt(2/3), 1]')
        if self.sigma0 <= 0.0:
            raise ValueError('sigma0 must be positive')

    @property
    def j(self):
        '''Physical wall current j = j_r rho_r^3.'''
        return self.j_r * self.rho_r ** 3


@dataclass
class LeadingProfiles:
    """Leading-order layer solution on the eta grid (canonical sign j_r <= 0).

    w = theta0 samples; dw = theta0' from the exact first integral
    L'(w'(eta)) = L'(j_r) + int_0^eta w; mu0 = branch values at dw;
    V = mu0^2 samples; sign = -1 when the station was reflected.
    """
    eta_grid: np.ndarray
    w: np.ndarray
    dw: np.ndarray
    mu0: np.ndarray
    mu_j: float
    V: np.ndarray
    j_r: float                 # canonical (<= 0)
    sign: int = 1
    newton_iters: int = 0
    grad_norm: float = 0.0


@dataclass
class CorrectedProfiles:
    """sigma0-corrected layer solution (canonical sign).

    mu = mu0 + mu1, theta = theta0 + theta1; dtheta = theta' from the first
    integral theta'(eta) = j_r + int_0^eta mu^2 theta (exact at eta = 0).
    """
    eta_grid: np.ndarray
    mu: np.ndarray
    theta: np.ndarray
    dtheta: np.ndarray
    mu_j: float
    sigma0: float
    j_r: float                 # canonical (<= 0)
    sign: int = 1
    dev_mu: float = 0.0        # ||mu - mu0||_2 (sqrt(deta)-weighted)
    dev_theta: float = 0.0
    iterations: list = field(default_factory=list)   # successive-iterate norms
    leading: LeadingProfiles = None


@dataclass
class PhysicalInnerProfiles:
    """Unscaled profiles in the wall-normal variable tau = t/eps (original sign).

    rho_i0 = rho_r mu, phi_i0 = rho_r^2 theta / sqrt(sigma0) at
    tau = eta sqrt(sigma0)/rho_r; dphi_i0 = d phi_i0/d tau;
    dupsilon_i0 = (sigma0 dphi_i0 - j)/rho_i0^2 - dzeta_dt0, and upsilon_i0
    its integral with upsilon_i0(inf) = 0.
    """
    tau_grid: np.ndarray
    rho_i0: np.ndarray
    phi_i0: np.ndarray
    dphi_i0: np.ndarray
    dupsilon_i0: np.ndarray
    upsilon_i0: np.ndarray
    rho_j: float
    mu_j: float
    decay_rate: float
    params: InnerParams = None
    corrected: CorrectedProfiles = None


def _bisect_mu2(rhs, tol_iters=80):
    """Vectorized solve for y = mu^2 in [2/3, 1] with y^2 (1 - y) = rhs.

    Substituting y = 2/3 + z turns the equation into z^2 (1 + z) = 4/27 - rhs,
    which factors the double root at the critical value exactly and keeps full
    relative accuracy in the gap z even where y^2 (1 - y) is flat.  Bisection
    on the increasing left side over z in [0, 1/3].
    """
    rhs = np.asarray(rhs, dtype=float)
    R = np.clip(MAX_JR2 - rhs, 0.0, None)
    lo = np.zeros(rhs.shape)
    hi = np.full(rhs.shape, 1.0 / 3.0)
    for _ in range(tol_iters):
        mid = 0.5 * (lo + hi)
        low = mid * mid * (1.0 + mid) < R
        lo = np.where(low, mid, lo)
        hi = np.where(low, hi, mid)
    y = 2.0 / 3.0 + 0.5 * (lo + hi)
    # exact endpoints: rhs = 0 -> y = 1, rhs = 4/27 -> y = 2/3
    y = np.where(rhs <= 0.0, 1.0, y)
    return np.where(R <= 0.0, 2.0 / 3.0, y)


def mu_j(j_r):
    """Far-field amplitude: root of mu^4 (1 - mu^2) = j_r^2 with mu^2 in [2/3, 1].

    Bisection to better than 1e-12.  Raises NoSubcriticalRoot when
    j_r^2 > 4/27; at equality returns sqrt(2/3).
    """
    r = float(j_r) ** 2
    if r > MAX_JR2 * (1.0 + 1e-15):
        raise NoSubcriticalRoot('j_r^2 = %.6g > 4/27' % r)
    r = min(r, MAX_JR2)
    return float(np.sqrt(_bisect_mu2(r)))


def branch_mu0(t, j_r):
    """Branch mu0(t): root of mu^4 (1 - mu^2) = (t - j_r)^2, mu^2 in (2/3, 1].

    Continuous in t with mu0(j_r) = 1 and mu0(0) = mu_j(j_r).  Accepts
    scalars or arrays; t is the local value of theta0' (convention j_r <= 0,
    t in [j_r, 0]).  Values of (t - j_r)^2 beyond 4/27 are out of the branch
    range and raise NoSubcriticalRoot.
    """
    t = np.asarray(t, dtype=float)
    r = (t - j_r) ** 2
    if np.any(r > MAX_JR2 * (1.0 + 1e-12)):
        raise NoSubcriticalRoot('(t - j_r)^2 exceeds 4/27: out of branch range')
    out = np.sqrt(_bisect_mu2(np.minimum(r, MAX_JR2)))
    return float(out) if out.ndim == 0 else out


class _LTable:
    """Piecewise L, L', L'' with L''(p) = 1/V(p).

    Region tables on [j_r, 0] (V = mu0(p)^2) with closed-form quadratic
    extensions for p <= j_r (V = 1) and p >= 0 (V = mu_j^2), anchored so
    L(0) = L'(0) = 0.
    """

    # 3-point Gauss-Legendre on [-1, 1]
    _GX = np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)])
    _GW = np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])

    def __init__(self, j_r, n_table=16385):
        self.j_r = float(j_r)
        self.mu_j = mu_j(j_r)
        self.mj2 = self.mu_j ** 2
        if self.j_r == 0.0:
            self.t = np.array([0.0])
            self.Lp = np.array([0.0])
            self.L = np.array([0.0])
            self.Lp_jr = 0.0
            self.L_jr = 0.0
            return
        # t ascending from j_r to 0; per-segment Gauss quadrature of 1/V
        t = np.linspace(self.j_r, 0.0, n_table)
        mid = 0.5 * (t[1:] + t[:-1])
        half = 0.5 * np.diff(t)
        nodes = mid[:, None] + half[:, None] * self._GX[None, :]
        invV = 1.0 / branch_mu0(nodes.ravel(), j_r) ** 2
        seg = half * (invV.reshape(nodes.shape) @ self._GW)
        Lp = np.concatenate(([0.0], np.cumsum(seg)))           # int from j_r
        Lp = Lp - Lp[-1]                                       # anchor Lp(0)=0
        segL = 0.5 * (Lp[1:] + Lp[:-1]) * np.diff(t)
        L = np.concatenate(([0.0], np.cumsum(segL)))
        L = L - L[-1]
        self.t, self.Lp, self.L = t, Lp, L
        self.Lp_jr = float(Lp[0])
        self.L_jr = float(L[0])

    def dL(self, p):
        p = np.asarray(p, dtype=float)
        out = np.where(p >= 0.0, p / self.mj2, 0.0)
        mid = (p < 0.0) & (p >= self.j_r)
        if np.any(mid):
            out = np.where(mid, np.interp(p, self.t, self.Lp), out)
        low = p < self.j_r
        if np.any(low):
            out = np.where(low, self.Lp_jr + (p - self.j_r), out)
        return out

    def val(self, p):
        p = np.asarray(p, dtype=float)
        out = np.where(p >= 0.0, 0.5 * p * p / self.mj2, 0.0)
        mid = (p < 0.0) & (p >= self.j_r)
        if np.any(mid):
            out = np.where(mid, np.interp(p, self.t, self.L), out)
        low = p < self.j_r
        if np.any(low):
            d = p - self.j_r
            out = np.where(low, self.L_jr + self.Lp_jr * d + 0.5 * d * d, out)
        return out

    def d2L(self, p):
        p = np.asarray(p, dtype=float)
        out = np.where(p >= 0.0, 1.0 / self.mj2, 1.0)
        mid = (p < 0.0) & (p >= self.j_r)
        if np.any(mid):
            out = np.where(mid, 1.0 / branch_mu0(np.clip(p, self.j_r, 0.0),
                                                 self.j_r) ** 2, out)
        return out

    def inv_dL(self, y):
        '''Inverse of the strictly increasing L'.'''
        y = np.asarray(y, dtype=float)
        out = np.where(y >= 0.0, y * self.mj2, 0.0)
        mid = (y < 0.0) & (y >= self.Lp_jr)
        if np.any(mid):
            out = np.where(mid, np.interp(y, self.Lp, self.t), out)
        low = y < self.Lp_jr
        if np.any(low):
            out = np.where(low, self.j_r + (y - self.Lp_jr), out)
        return out


def solve_leading(params, eta_max=None, n_points=16384, grad_tol=1e-9,
                  max_newton=60):
    """Minimize the discrete convex functional J; return LeadingProfiles.

    The grid is uniform on [0, eta_max] (default eta_max = 40/mu_j).  The far
    end is clamped to w = 0 (the layer is exponentially localized; an
    eta_max-doubling test belongs to the caller).  Newton iterations on the
    exact gradient with the tridiagonal Hessian and backtracking line search;
    convergence to max-norm gradient below grad_tol.
    """
    sign = -1 if params.j_r > 0 else 1
    jr = sign * params.j_r
    muj = mu_j(jr)
    if eta_max is None:
        eta_max = 40.0 / muj
    N = int(n_points)
    eta = np.linspace(0.0, eta_max, N + 1)
    deta = eta_max / N

    if jr == 0.0:
        z = np.zeros(N + 1)
        return LeadingProfiles(eta_grid=eta, w=z, dw=z.copy(),
                               mu0=np.ones(N + 1), mu_j=1.0,
                               V=np.ones(N + 1), j_r=0.0, sign=sign)

    tab = _LTable(jr)
    k = tab.Lp_jr            # L'(j_r) < 0: natural BC constant

    theta_w = np.ones(N)     # trapezoid weights for nodes 0..N-1 (w_N = 0)
    theta_w[0] = 0.5

    def Jval(w):
        p = (np.concatenate((w[1:], [0.0])) - w) / deta
        return (k * w[0] + deta * np.sum(tab.val(p))
                + 0.5 * deta * np.sum(theta_w * w * w))

    def grad(w):
        p = (np.concatenate((w[1:], [0.0])) - w) / deta
        dLp = tab.dL(p)
        g = np.empty(N)
        g[0] = k - dLp[0] + deta * theta_w[0] * w[0]
        g[1:] = dLp[:-1] - dLp[1:] + deta * theta_w[1:] * w[1:]
        return g, p

    w = -jr * np.exp(-eta[:-1])
    g, p = grad(w)
    iters = 0
    while np.max(np.abs(g)) > grad_tol and iters < max_newton:
        d2 = tab.d2L(p) / deta
        ab = np.zeros((3, N))
        ab[1, 0] = d2[0] + deta * theta_w[0]
        ab[1, 1:] = d2[:-1] + d2[1:] + deta * theta_w[1:]
        ab[0, 1:] = -d2[:-1]
        ab[2, :-1] = -d2[:-1]
        step = solve_banded((1, 1), ab, -g)
        t = 1.0
        J0 = Jval(w)
        gd = float(np.dot(g, step))
        while t > 1e-12:
            wn = w + t * step
            if Jval(wn) <= J0 + 1e-4 * t * gd:
                break
            t *= 0.5
        w = w + t * step
        g, p = grad(w)
        iters += 1
        if t * np.max(np.abs(step)) < 1e-14:
            break             # stagnated at the table-interpolation floor

    w_full = np.concatenate((w, [0.0]))
    # exact first integral: L'(w'(eta)) = k + int_0^eta w.  The continuum
    # solution has int_0^inf w = -k exactly; rescaling the quadrature by that
    # identity (relative correction at the trapezoid-error level) pins both
    # endpoint slopes, w'(0) = j_r and w'(inf) = 0, to machine precision.
    cum = np.concatenate(([0.0], np.cumsum(0.5 * (w_full[1:] + w_full[:-1]) * deta)))
    if cum[-1] != 0.0:
        cum = cum * (-k / cum[-1])
    dw = tab.inv_dL(np.clip(k + cum, tab.Lp_jr, 0.0))
    mu0 = branch_mu0(np.clip(dw, jr, 0.0), jr)
    return LeadingProfiles(eta_grid=eta, w=w_full, dw=dw, mu0=mu0, mu_j=muj,
                           V=mu0 ** 2, j_r=jr, sign=sign,
                           newton_iters=iters, grad_norm=float(np.max(np.abs(g))))


def _second_diff_matrix(n, h):
    '''Central second difference as a sparse matrix (interior rows only used).'''
    e = np.ones(n)
    return sp.diags([e[:-1], -2.0 * e, e[:-1]], [-1, 0, 1]) / (h * h)


def _first_diff_matrix(n, h):
    e = np.ones(n - 1)
    D = sp.diags([-e, e], [-1, 1]).tolil() / (2.0 * h)
    D[0, 0], D[0, 1], D[0, 2] = -3.0 / (2 * h), 4.0 / (2 * h), -1.0 / (2 * h)
    D[-1, -1], D[-1, -2], D[-1, -3] = 3.0 / (2 * h), -4.0 / (2 * h), 1.0 / (2 * h)
    return D.tocsr()


def remainder_N1(mu1, dtheta1, lead):
    """Nonlinear remainder of the amplitude row.

    Literal transcription of the expansion about (mu0, theta0'):

        N1 = -dtheta1^2 / mu0^3
             + (mu^-3 - mu0^-3) (mu^4 - (theta' - j_r)^2 - mu^6)
             + mu1 mu0^-3 (mu mu0^2 + mu^2 mu0 + mu^3 - 3 mu0^3 - mu^5
                           - mu^4 mu0 - mu^3 mu0^2 - mu^2 mu0^3 - mu mu0^4
                           + 5 mu0^5)

    with mu = mu0 + mu1 and theta' = theta0' + dtheta1.
    """
    mu0 = lead.mu0
    jr = lead.j_r
    q = lead.dw + dtheta1
    mu = mu0 + mu1
    im3 = mu ** -3
    im03 = mu0 ** -3
    poly = (mu * mu0 ** 2 + mu ** 2 * mu0 + mu ** 3 - 3.0 * mu0 ** 3
            - mu ** 5 - mu ** 4 * mu0 - mu ** 3 * mu0 ** 2
            - mu ** 2 * mu0 ** 3 - mu * mu0 ** 4 + 5.0 * mu0 ** 5)
    return (-dtheta1 ** 2 * im03
            + (im3 - im03) * (mu ** 4 - (q - jr) ** 2 - mu ** 6)
            + mu1 * im03 * poly)


def remainder_N1_direct(mu1, dtheta1, lead):
    """Same remainder via f(mu, theta') + (6 mu0^2 - 4) mu1 + c theta1'.

    f(mu, q) = mu - (q - j_r)^2/mu^3 - mu^3 vanishes on the leading branch
    and has partials -(6 mu0^2 - 4) and -c there, c = 2 sqrt(1 - mu0^2)/mu0.
    Used as an independent cross-check of remainder_N1.
    """
    mu0 = lead.mu0
    jr = lead.j_r
    mu = mu0 + mu1
    q = lead.dw + dtheta1
    f = mu - (q - jr) ** 2 / mu ** 3 - mu ** 3
    c = 2.0 * np.sqrt(np.clip(1.0 - mu0 ** 2, 0.0, None)) / mu0
    return f + (6.0 * mu0 ** 2 - 4.0) * mu1 + c * dtheta1


def remainder_N2(mu1, theta1, lead):
    '''Nonlinear remainder of the potential row: -mu1^2 theta0 - (2 mu0 + mu1) mu1 theta1.'''
    return -mu1 ** 2 * lead.w - (2.0 * lead.mu0 + mu1) * mu1 * theta1


def solve_corrected(lead, sigma0, tol=1e-10, max_iter=60):
    """Fixed-point correction of the leading profiles at finite sigma0.

    Iterates (mu1, theta1) <- B^{-1} (mu0''/sigma0 + N1, N2) where B is the
    linearization about the leading solution, discretized with central
    differences and second-order one-sided Neumann-zero rows at both ends.
    Stops when the successive-iterate max norm drops below tol; raises
    ContractionFailure when that norm grows three consecutive times.
    """
    eta = lead.eta_grid
    n = len(eta)
    h = eta[1] - eta[0]
    mu0, w = lead.mu0, lead.w
    jr = lead.j_r
    sig = float(sigma0)

    if jr == 0.0:
        z = np.zeros(n)
        return CorrectedProfiles(eta_grid=eta, mu=np.ones(n), theta=z,
                                 dtheta=z.copy(), mu_j=1.0, sigma0=sig,
                                 j_r=0.0, sign=lead.sign, leading=lead)

    c = 2.0 * np.sqrt(np.clip(1.0 - mu0 ** 2, 0.0, None)) / mu0
    D2 = _second_diff_matrix(n, h).tolil()
    D1 = _first_diff_matrix(n, h).tolil()

    # amplitude block: -D2/sigma0 + diag(6 mu0^2 - 4), coupling c * D1
    A11 = (-D2 / sig + sp.diags(6.0 * mu0 ** 2 - 4.0)).tolil()
    A12 = sp.diags(c).dot(D1).tolil()
    # potential block: -D2 + diag(mu0^2), coupling diag(2 mu0 theta0)
    A22 = (-D2 + sp.diags(mu0 ** 2)).tolil()
    A21 = sp.diags(2.0 * mu0 * w).tolil()

    # Neumann-zero rows (second-order one-sided) at both ends of both fields
    for A_diag, A_off in ((A11, A12), (A22, A21)):
        for row in (0, n - 1):
            A_off.rows[row] = []
            A_off.data[row] = []
            if row == 0:
                cols, vals = [0, 1, 2], [-3.0, 4.0, -1.0]
            else:
                cols, vals = [n - 1, n - 2, n - 3], [3.0, -4.0, 1.0]
            A_diag.rows[row] = cols
            A_diag.data[row] = [v / (2.0 * h) for v in vals]

    B = sp.bmat([[A11.tocsr(), A12.tocsr()], [A21.tocsr(), A22.tocsr()]]).tocsc()
    try:
        lu = splu(B)
    except Exception as exc:
        raise LinearSolveFailure('factorization of the linearized operator failed: %s' % exc)

    # mu0'' source (central differences; end rows are BC rows, value unused)
    mu0pp = np.zeros(n)
    mu0pp[1:-1] = (mu0[2:] - 2.0 * mu0[1:-1] + mu0[:-2]) / (h * h)

    mu1 = np.zeros(n)
    th1 = np.zeros(n)
    deltas = []
    grow = 0
    for _ in range(max_iter):
        dth1 = D1.tocsr().dot(th1)
        r1 = mu0pp / sig + remainder_N1(mu1, dth1, lead)
        r2 = remainder_N2(mu1, th1, lead)
        r1[0] = r1[-1] = 0.0
        r2[0] = r2[-1] = 0.0
        try:
            sol = lu.solve(np.concatenate((r1, r2)))
        except Exception as exc:
            raise LinearSolveFailure('linear solve failed: %s' % exc)
        new_mu1, new_th1 = sol[:n], sol[n:]
        delta = max(np.max(np.abs(new_mu1 - mu1)), np.max(np.abs(new_th1 - th1)))
        deltas.append(float(delta))
        mu1, th1 = new_mu1, new_th1
        if delta < tol:
            break
        if len(deltas) > 1 and delta > deltas[-2]:
            grow += 1
            if grow >= 3:
                raise ContractionFailure(
                    'iterate norm grew 3 consecutive times (sigma0 = %g too small); '
                    'trace: %s' % (sig, deltas[-4:]))
        else:
            grow = 0
    else:
        raise ContractionFailure('no convergence in %d iterations; last delta %.3g'
                                 % (max_iter, deltas[-1]))

    mu = mu0 + mu1
    theta = w + th1
    # first integral theta'(eta) = j_r + int_0^eta mu^2 theta, with the
    # quadrature rescaled by the continuum identity int_0^inf mu^2 theta =
    # -j_r so that theta'(0) = j_r and theta'(inf) = 0 hold exactly
    mu2theta = mu ** 2 * theta
    cum = np.concatenate(([0.0], np.cumsum(0.5 * (mu2theta[1:] + mu2theta[:-1]) * h)))
    if cum[-1] != 0.0:
        cum = cum * (-jr / cum[-1])
    dtheta = jr + cum
    dev_mu = float(np.sqrt(h * np.sum(mu1 ** 2)))
    dev_th = float(np.sqrt(h * np.sum(th1 ** 2)))
    return CorrectedProfiles(eta_grid=eta, mu=mu, theta=theta, dtheta=dtheta,
                             mu_j=lead.mu_j, sigma0=sig, j_r=jr, sign=lead.sign,
                             dev_mu=dev_mu, dev_theta=dev_th,
                             iterations=deltas, leading=lead)


def rho_j_root(j, rho_r):
    """Far-field amplitude rho_j: root of rho^4 (rho_r^2 - rho^2) = j^2 with
    rho^2 in [2 rho_r^2/3, rho_r^2], by bisection (independent of mu_j)."""
    target = float(j) ** 2
    lo = 2.0 * rho_r ** 2 / 3.0
    hi = rho_r ** 2
    if target > rho_r ** 6 * (4.0 / 27.0) * (1.0 + 1e-12):
        raise NoSubcriticalRoot('j^2 exceeds the critical value for this rho_r')
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = mid * mid * (rho_r ** 2 - mid)
        if val > target:
            lo = mid
        else:
            hi = mid
    return float(np.sqrt(0.5 * (lo + hi)))


def unscale(corr, params, fit_window=(0.5, 0.9)):
    """Map the corrected eta-profiles to physical tau-profiles.

    tau = eta sqrt(sigma0)/rho_r; rho_i0 = rho_r mu; phi_i0 = rho_r^2
    theta/sqrt(sigma0) (reflected back when the station had j_r > 0);
    dupsilon_i0 = (sigma0 dphi_i0 - j)/rho_i0^2 - dzeta_dt0, which equals
    -dzeta_dt0 exactly at tau = 0; upsilon_i0 integrates dupsilon_i0 with
    upsilon_i0(inf) = 0.  decay_rate is the log-linear slope magnitude of
    |phi_i0| over fit_window (fractions of tau_max).
    """
    s = corr.sign
    rho_r = params.rho_r
    sig = corr.sigma0
    j = params.j
    tau = corr.eta_grid * np.sqrt(sig) / rho_r
    theta = s * corr.theta
    dtheta_eta = s * corr.dtheta
    rho = rho_r * corr.mu
    phi = rho_r ** 2 * theta / np.sqrt(sig)
    dphi = rho_r ** 3 * dtheta_eta / sig            # d/dtau
    dups = (sig * dphi - j) / rho ** 2 - params.dzeta_dt0
    # upsilon with far-field constant 0
    seg = 0.5 * (dups[1:] + dups[:-1]) * np.diff(tau)
    I = np.concatenate(([0.0], np.cumsum(seg)))
    ups = I - I[-1]
    rj = rho_j_root(j, rho_r)

    n = len(tau)
    i0, i1 = int(fit_window[0] * n), int(fit_window[1] * n)
    mag = np.abs(phi[i0:i1])
    if np.all(mag > 1e-290) and i1 - i0 > 4:
        slope = np.polyfit(tau[i0:i1], np.log(mag), 1)[0]
        rate = float(-slope)
    else:
        rate = float('nan')
    return PhysicalInnerProfiles(tau_grid=tau, rho_i0=rho, phi_i0=phi,
                                 dphi_i0=dphi, dupsilon_i0=dups,
                                 upsilon_i0=ups, rho_j=rj, mu_j=corr.mu_j,
                                 decay_rate=rate, params=params, corrected=corr)


def solve_station(params, eta_max=None, n_points=16384, tol=1e-10):
    '''Full station pipeline: leading -> corrected -> physical profiles.'''
    lead = solve_leading(params, eta_max=eta_max, n_points=n_points)
    corr = solve_corrected(lead, params.sigma0, tol=tol)
    return unscale(corr, params)
