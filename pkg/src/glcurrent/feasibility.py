"""Feasibility screening of boundary current profiles.

Two necessary conditions gate the outer solve:

  * pointwise: |j(s)| <= max_{t in [0,1]} (t - t^3) = 2/(3 sqrt 3), the 1D
    critical current (the bound the superconducting current (1-|grad zeta|^2)
    grad zeta can carry);
  * geometric: sup over boundary pairs of M(x, y) = |int_Gamma j ds| / d(x, y)
    must not exceed the same constant, where Gamma is either boundary arc
    between x and y and d is the in-closure geodesic distance.

Both use the numerically located critical constant so the closed form
2/(3 sqrt 3) remains an independent cross-check.  Grid-graph distances
overestimate the continuum geodesic, making the reported sup_M a lower bound
of the true sup; the report carries that caveat.
"""

import numpy as np
from dataclasses import dataclass, field

from .geometry import GridGraph, boundary_integral, build_grid

__all__ = ['CurrentProfile', 'FeasibilityReport', 'critical_bound',
           'check_pointwise', 'sup_M']


def critical_bound(tol_iters=90):
    """max over t in [0, 1] of t - t^3, located numerically.

    Bisection on the stationarity condition 1 - 3 t^2 = 0; the flatness of
    the maximum makes the attained value insensitive to the iteration count.
    """
    lo, hi = 0.0, 1.0
    for _ in range(tol_iters):
        mid = 0.5 * (lo + hi)
        if 1.0 - 3.0 * mid * mid > 0.0:
            lo = mid
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    return t - t ** 3


@dataclass
class CurrentProfile:
    """Rescaled boundary current samples aligned with a BoundaryGeometry.

    mean_free records that the cyclic trapezoid integral of j over the whole
    boundary vanishes (total current conservation); from_samples enforces it
    by subtracting the weighted mean.
    """
    j: np.ndarray
    s: np.ndarray
    total_length: float
    mean_free: bool = False

    @classmethod
    def from_samples(cls, bnd, j, enforce_mean_free=True):
        j = np.asarray(j, dtype=float).copy()
        if j.shape != bnd.arclength.shape:
            raise ValueError('current must be sampled at the boundary points')
        if enforce_mean_free:
            total = boundary_integral(bnd, j)
            j -= total / bnd.total_length
        return cls(j=j, s=bnd.arclength.copy(), total_length=bnd.total_length,
                   mean_free=enforce_mean_free)

    def circulation(self):
        '''Cyclic trapezoid integral of j over the whole boundary.'''
        s = np.concatenate([self.s, [self.total_length]])
        jc = np.concatenate([self.j, [self.j[0]]])
        return float(np.sum(0.5 * (jc[1:] + jc[:-1]) * np.diff(s)))

    def cumulative(self):
        '''C(s_k) = int_0^{s_k} j ds (cyclic trapezoid partial sums).'''
        s = np.concatenate([self.s, [self.total_length]])
        jc = np.concatenate([self.j, [self.j[0]]])
        cum = np.concatenate(([0.0], np.cumsum(0.5 * (jc[1:] + jc[:-1]) * np.diff(s))))
        return cum[:-1]


@dataclass
class FeasibilityReport:
    """Verdict of the geometric necessary condition.

    margin = 2/(3 sqrt 3) - sup_M; negative margin means no vortexless outer
    solution can carry this current.  sup_M is a sample-pair maximum over
    grid-graph distances, hence a lower bound of the continuum sup (noted in
    `caveat`).
    """
    pointwise_ok: bool
    max_abs_j: float
    sup_M: float
    argmax_pair: tuple
    margin: float
    feasible: bool
    skipped_pairs: int = 0
    caveat: str = ('grid-graph distances overestimate geodesics; '
                   'sup_M is a boundary-sample lower bound of the true sup')


def check_pointwise(profile):
    '''(flag, max|j|): flag is True iff max_s |j(s)| <= 2/(3 sqrt 3).'''
    m = float(np.max(np.abs(profile.j))) if len(profile.j) else 0.0
    return m <= critical_bound(), m


def _is_convex(poly, rel_tol=1e-9):
    return poly.convex_hull.area <= poly.area * (1.0 + rel_tol)


def sup_M(bnd, profile, spec=None, mask=None, origin=None, refine_top_k=8,
          return_matrix=False):
    """Maximize M(x, y) = |int_Gamma j ds| / d(x, y) over boundary sample pairs.

    Arc integrals come from the cumulative current; with a mean-free profile
    the two arcs between a pair give the same magnitude, so only one is read.
    Convex domains use exact straight-line distances; otherwise chamfer
    Dijkstra between boundary samples, with the top refine_top_k candidate
    pairs re-measured along line-of-sight straightened paths.  Pairs closer
    than the grid spacing are skipped (M degenerates as x -> y).  With
    return_matrix the full pair matrix M[i, k] is returned alongside the
    report (skipped pairs hold zero).
    """
    pts = bnd.points
    n = len(pts)
    cum = profile.cumulative()
    arc = np.abs(cum[None, :] - cum[:, None])

    poly = bnd.polygon
    convex = _is_convex(poly)
    if convex:
        diff = pts[None, :, :] - pts[:, None, :]
        dist = np.sqrt(np.sum(diff ** 2, axis=2))
        h_skip = float(np.median(np.sqrt(np.sum(np.diff(pts, axis=0) ** 2, axis=1))))
        graph = None
        src_nodes = None
    else:
        if spec is None:
            spec, mask, origin = build_grid(bnd, bnd.total_length / (2.0 * n))
        graph = GridGraph(bnd, spec, mask, origin)
        src_nodes = np.array([graph.nearest_node(p) for p in pts])
        dmat = graph.distances_from(src_nodes)
        dist = dmat[:, src_nodes]
        dist = 0.5 * (dist + dist.T)        # symmetrize node-snap noise
        h_skip = spec.h

    with np.errstate(divide='ignore', invalid='ignore'):
        M = np.where(dist > h_skip, arc / dist, 0.0)
    skipped = int(np.sum((dist <= h_skip) & ~np.eye(n, dtype=bool)) // 2)

    if graph is not None and refine_top_k > 0:
        # straighten the best candidate paths for tighter distances
        flat = np.argsort(M, axis=None)[::-1]
        seen = set()
        for f in flat[:4 * refine_top_k]:
            i, k = np.unravel_index(f, M.shape)
            key = (min(i, k), max(i, k))
            if key in seen or M[i, k] == 0.0:
                continue
            seen.add(key)
            dists, preds = graph.distances_from([src_nodes[i]],
                                                return_predecessors=True)
            target = src_nodes[k]
            if not np.isfinite(dists[0, target]):
                continue
            nodes = [target]
            while nodes[-1] != src_nodes[i] and nodes[-1] >= 0:
                nodes.append(preds[0][nodes[-1]])
            d_ref = graph.straighten(nodes[::-1], p_start=pts[i], p_end=pts[k])
            if d_ref > h_skip:
                M[i, k] = M[k, i] = arc[i, k] / d_ref
            if len(seen) >= refine_top_k:
                break

    i, k = np.unravel_index(np.argmax(M), M.shape)
    bound = critical_bound()
    ok_pt, max_j = check_pointwise(profile)
    s_M = float(M[i, k])
    report = FeasibilityReport(pointwise_ok=ok_pt, max_abs_j=max_j, sup_M=s_M,
                               argmax_pair=(tuple(pts[i]), tuple(pts[k])),
                               margin=bound - s_M,
                               feasible=ok_pt and s_M <= bound,
                               skipped_pairs=skipped)
    if return_matrix:
        return report, M
    return report
