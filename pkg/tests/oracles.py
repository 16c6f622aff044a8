"""Independent oracles used by the test suite.

Everything here is deliberately naive (dense sampling, exhaustive
enumeration, direct re-summation) and stays independent of the code paths
it checks.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.spatial import cKDTree


def ellipsoid_surface_grid(radii, n_theta: int, n_phi: int) -> np.ndarray:
    """Parametric surface grid (theta x phi), flattened to (n, 3)."""
    r = np.asarray(radii, dtype=np.float64)
    theta = np.linspace(0.0, np.pi, n_theta)
    phi = np.linspace(0.0, 2.0 * np.pi, n_phi, endpoint=False)
    t, p = np.meshgrid(theta, phi, indexing="ij")
    u = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1)
    return (u * r).reshape(-1, 3)


def _refine_distance(query, radii, t0, p0, spread, rounds=4, grid=33):
    """Local parametric grid refinement around a coarse (theta, phi) seed."""
    r = np.asarray(radii, dtype=np.float64)
    best = np.inf
    for _ in range(rounds):
        ts = np.linspace(t0 - spread, t0 + spread, grid)
        ps = np.linspace(p0 - spread, p0 + spread, grid)
        t, p = np.meshgrid(ts, ps, indexing="ij")
        pts = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1) * r
        d2 = ((pts - query) ** 2).sum(axis=-1)
        k = np.unravel_index(np.argmin(d2), d2.shape)
        best = np.sqrt(d2[k])
        t0, p0 = ts[k[0]], ps[k[1]]
        spread /= grid / 4.0
    return best


def ellipsoid_distance_bruteforce(query, radii, n_samples: int = 10**6) -> float:
    """Unsigned distance by dense surface sampling plus local refinement."""
    n_theta = int(np.sqrt(n_samples / 2))
    n_phi = 2 * n_theta
    r = np.asarray(radii, dtype=np.float64)
    theta = np.linspace(0.0, np.pi, n_theta)
    phi = np.linspace(0.0, 2.0 * np.pi, n_phi, endpoint=False)
    t, p = np.meshgrid(theta, phi, indexing="ij")
    pts = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1) * r
    d2 = ((pts.reshape(-1, 3) - np.asarray(query)) ** 2).sum(axis=-1)
    k = int(np.argmin(d2))
    kt, kp = np.unravel_index(k, (n_theta, n_phi))
    spread = max(np.pi / n_theta, 2 * np.pi / n_phi)
    return _refine_distance(np.asarray(query, dtype=np.float64), r, theta[kt], phi[kp], spread)


class EllipsoidDistanceOracle:
    """Dense surface sampling (>= n_samples points) for one radii triple,
    shared across queries via a KD-tree, with local parametric refinement."""

    def __init__(self, radii, n_samples: int = 10**6):
        self.radii = np.asarray(radii, dtype=np.float64)
        self.n_theta = int(np.sqrt(n_samples / 2))
        self.n_phi = 2 * self.n_theta
        self.theta = np.linspace(0.0, np.pi, self.n_theta)
        self.phi = np.linspace(0.0, 2 * np.pi, self.n_phi, endpoint=False)
        t, p = np.meshgrid(self.theta, self.phi, indexing="ij")
        pts = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1) * self.radii
        self.tree = cKDTree(pts.reshape(-1, 3))

    def distance(self, query) -> float:
        _, k = self.tree.query(np.asarray(query, dtype=np.float64))
        kt, kp = np.unravel_index(int(k), (self.n_theta, self.n_phi))
        spread = max(np.pi / self.n_theta, 2 * np.pi / self.n_phi)
        return _refine_distance(np.asarray(query, dtype=np.float64), self.radii, self.theta[kt], self.phi[kp], spread)


def all_spanning_trees(n: int):
    """Every spanning tree of K_n as an edge list, via Pruefer sequences."""
    if n == 1:
        yield []
        return
    if n == 2:
        yield [(0, 1)]
        return
    for seq in itertools.product(range(n), repeat=n - 2):
        degree = [1] * n
        for s in seq:
            degree[s] += 1
        edges = []
        seq_list = list(seq)
        leaves = sorted(i for i in range(n) if degree[i] == 1)
        work = degree[:]
        for s in seq_list:
            leaf = min(i for i in range(n) if work[i] == 1)
            edges.append((min(leaf, s), max(leaf, s)))
            work[leaf] -= 1
            work[s] -= 1
        last = [i for i in range(n) if work[i] == 1]
        edges.append((min(last), max(last)))
        yield edges


def min_spanning_tree_cost_bruteforce(costs: np.ndarray) -> float:
    """Exhaustive minimum over all spanning trees of the complete graph."""
    n = costs.shape[0]
    best = np.inf
    for edges in all_spanning_trees(n):
        total = sum(costs[i, j] for i, j in edges)
        best = min(best, total)
    return float(best)


def chamfer_direct(a: np.ndarray, b: np.ndarray) -> float:
    """(1/|a|) sum_i min_j ||a_i-b_j||^2 + (1/|b|) sum_j min_i ||a_i-b_j||^2."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())
