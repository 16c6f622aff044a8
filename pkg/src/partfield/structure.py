"""Joint candidates, pairwise connection costs, acyclic structure discovery,
the structure and merge losses, and post-training part merging.

Costs are tracked per candidate pair in an EMA matrix; the per-pair
connection cost is the minimum over candidate pairs, and the tree is the
greedy loop-free connection of cheapest pairs (Kruskal's algorithm). The
structure loss backpropagates through the current iteration's raw costs of
the selected candidate pairs only; the discrete selection is a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value

N_CANDIDATES = 6


def candidate_offsets() -> np.ndarray:
    """Six unit-frame candidates at +-3/4 along each axis, fixed order."""
    e = 0.75 * np.eye(3)
    return np.concatenate([e, -e], axis=0)  # (+x, +y, +z, -x, -y, -z)


def candidates_local_np(radii: np.ndarray) -> np.ndarray:
    """(P, 3) radii -> (P, 6, 3) local candidate points r * xi."""
    return np.asarray(radii, dtype=np.float64)[:, None, :] * candidate_offsets()


def candidates_world_np(rot: np.ndarray, trans: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Poses (T, P, 3, 3)/(T, P, 3) -> world candidates (T, P, 6, 3)."""
    local = candidates_local_np(radii)
    return np.einsum("tpij,pnj->tpni", rot, local) + trans[:, :, None, :]


def candidates_world(rot: Value, trans: Value, radii: Value) -> Value:
    """Tape version of candidates_world_np."""
    tape = rot.tape
    local = ad.mul(ad.reshape(radii, (radii.shape[0], 1, 3)), tape.constant(candidate_offsets()))
    rotated = ad.einsum("tpij,pnj->tpni", rot, local)
    t_expand = ad.reshape(trans, (trans.shape[0], trans.shape[1], 1, 3))
    return ad.add(rotated, t_expand)


def pairwise_cost_np(cands: np.ndarray, centers: np.ndarray, lambda_l: float) -> np.ndarray:
    """Raw connection costs summed over frames: (P, 6, P, 6).

    cost[i, m, j, n] = sum_t ||xi_i^m - xi_j^n||^2 + lambda_l ||t_i - t_j||^2.
    """
    diff = cands[:, :, :, None, None, :] - cands[:, None, None, :, :, :]
    cand_term = (diff**2).sum(axis=(0, -1))
    cdiff = centers[:, :, None, :] - centers[:, None, :, :]
    center_term = (cdiff**2).sum(axis=(0, -1))  # (P, P)
    return cand_term + lambda_l * center_term[:, None, :, None]


def ema_update(ema: np.ndarray | None, raw: np.ndarray, momentum: float) -> np.ndarray:
    """l-bar <- (1 - eps) l-bar + eps l; initialized to the first raw costs."""
    if ema is None:
        return raw.copy()
    return (1.0 - momentum) * ema + momentum * raw


@dataclass(frozen=True)
class Edge:
    a: int  # group id, a < b
    b: int
    cand_a: tuple[int, int]  # (part id, candidate index) on the a side
    cand_b: tuple[int, int]

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "cand_a": list(self.cand_a), "cand_b": list(self.cand_b)}

    @classmethod
    def from_dict(cls, d: dict) -> "Edge":
        return cls(d["a"], d["b"], tuple(d["cand_a"]), tuple(d["cand_b"]))


@dataclass
class KinematicTree:
    """Acyclic connectivity over groups; edge ids are list positions."""

    n_groups: int
    edges: list[Edge] = field(default_factory=list)

    @property
    def root(self) -> int:
        return 0  # lowest group id by convention

    def parent_map(self) -> dict[int, tuple[int, int]]:
        """child group -> (parent group, edge id), oriented away from the root."""
        adj: dict[int, list[tuple[int, int]]] = {g: [] for g in range(self.n_groups)}
        for eid, e in enumerate(self.edges):
            adj[e.a].append((e.b, eid))
            adj[e.b].append((e.a, eid))
        parents: dict[int, tuple[int, int]] = {}
        stack = [self.root]
        seen = {self.root}
        while stack:
            g = stack.pop()
            for nxt, eid in adj[g]:
                if nxt not in seen:
                    seen.add(nxt)
                    parents[nxt] = (g, eid)
                    stack.append(nxt)
        return parents

    def child_group(self, edge_id: int) -> int:
        """The endpoint of the edge on the far side from the root."""
        parents = self.parent_map()
        e = self.edges[edge_id]
        if e.b in parents and parents[e.b][1] == edge_id:
            return e.b
        return e.a

    def subtree_groups(self, edge_id: int) -> list[int]:
        """Groups at or below the edge's child endpoint."""
        parents = self.parent_map()
        child = self.child_group(edge_id)
        children: dict[int, list[int]] = {g: [] for g in range(self.n_groups)}
        for c, (p, _) in parents.items():
            children[p].append(c)
        out = []
        stack = [child]
        while stack:
            g = stack.pop()
            out.append(g)
            stack.extend(children[g])
        return sorted(out)

    def to_dict(self) -> dict:
        return {"n_groups": self.n_groups, "edges": [e.to_dict() for e in self.edges]}

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicTree":
        return cls(d["n_groups"], [Edge.from_dict(e) for e in d["edges"]])


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def group_costs(ema: np.ndarray, groups: list[list[int]]):
    """Group-pair connection costs: min over member parts and candidate pairs.

    Returns (costs (G, G), picks) where picks[(a, b)] = ((part, cand), (part, cand)).
    """
    g = len(groups)
    costs = np.full((g, g), np.inf)
    picks: dict[tuple[int, int], tuple[tuple[int, int], tuple[int, int]]] = {}
    for a in range(g):
        for b in range(a + 1, g):
            best = np.inf
            best_pick = None
            for i in groups[a]:
                for j in groups[b]:
                    block = ema[i, :, j, :]
                    k = np.unravel_index(int(np.argmin(block)), block.shape)
                    if block[k] < best:
                        best = float(block[k])
                        best_pick = ((i, int(k[0])), (j, int(k[1])))
            costs[a, b] = costs[b, a] = best
            picks[(a, b)] = best_pick
    return costs, picks


def discover_structure(ema: np.ndarray, groups: list[list[int]] | None = None) -> KinematicTree:
    """Sort pair costs ascending and connect greedily, skipping loops.

    Equivalent to Kruskal's minimum spanning tree; ties break lexicographically
    on the group pair for determinism.
    """
    p = ema.shape[0]
    groups = groups if groups is not None else [[i] for i in range(p)]
    g = len(groups)
    tree = KinematicTree(g)
    if g <= 1:
        return tree
    costs, picks = group_costs(ema, groups)
    order = sorted(((costs[a, b], a, b) for a in range(g) for b in range(a + 1, g)))
    uf = _UnionFind(g)
    for cost, a, b in order:
        if uf.union(a, b):
            ca, cb = picks[(a, b)]
            tree.edges.append(Edge(a, b, ca, cb))
            if len(tree.edges) == g - 1:
                break
    tree.edges.sort(key=lambda e: (e.a, e.b))
    return tree


def tree_cost(tree: KinematicTree, ema: np.ndarray) -> float:
    total = 0.0
    for e in tree.edges:
        (i, m), (j, n) = e.cand_a, e.cand_b
        total += float(ema[i, m, j, n])
    return total


def loss_structure(
    tree: KinematicTree,
    ema_old: np.ndarray | None,
    momentum: float,
    rot: Value,
    trans: Value,
    radii: Value,
    lambda_l: float,
) -> Value:
    """Sum of smoothed costs over selected edges, on the tape.

    Each edge contributes (1 - eps) * const(previous EMA) + eps * raw(current),
    so the loss value equals the updated EMA entry while gradients flow only
    through the current iteration's raw cost of the selected candidate pair.
    """
    tape = rot.tape
    if not tree.edges:
        return tape.constant(0.0)
    cands = candidates_world(rot, trans, radii)  # (T, P, 6, 3)
    terms = []
    for e in tree.edges:
        (i, m), (j, n) = e.cand_a, e.cand_b
        cdiff = ad.add(cands[:, i, m, :], ad.neg(cands[:, j, n, :]))
        tdiff = ad.add(trans[:, i, :], ad.neg(trans[:, j, :]))
        raw = ad.add(
            ad.sum_(ad.square(cdiff)),
            ad.mul(tape.constant(lambda_l), ad.sum_(ad.square(tdiff))),
        )
        if ema_old is None:
            terms.append(raw)
        else:
            prev = tape.constant((1.0 - momentum) * ema_old[i, m, j, n])
            terms.append(ad.add(prev, ad.mul(tape.constant(momentum), raw)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


# ---------------------------------------------------------------------------
# relative motion and merging


def relative_motion_np(
    rot_i: np.ndarray, trans_i: np.ndarray, rot_j: np.ndarray, trans_j: np.ndarray, lambda_motion: float
) -> float:
    """D = sigma_t(R_i^j) + lambda_motion * sigma_t(t_i^j), stds summed over entries."""
    if rot_i.shape[0] < 2:
        raise ValueError("relative motion needs at least two frames")
    rel_r = np.einsum("tca,tcb->tab", rot_i, rot_j)  # R_i^T R_j
    rel_t = np.einsum("tca,tc->ta", rot_i, trans_j - trans_i)
    return float(rel_r.std(axis=0).sum() + lambda_motion * rel_t.std(axis=0).sum())


def pairwise_motion_np(rot: np.ndarray, trans: np.ndarray, lambda_motion: float) -> np.ndarray:
    """All-pairs D matrix from (T, P, 3, 3) / (T, P, 3) poses."""
    rel_r = np.einsum("tpca,tqcb->tpqab", rot, rot)
    tdiff = trans[:, None, :, :] - trans[:, :, None, :]
    rel_t = np.einsum("tpca,tpqc->tpqa", rot, tdiff)
    d = rel_r.std(axis=0).sum(axis=(-2, -1)) + lambda_motion * rel_t.std(axis=0).sum(axis=-1)
    np.fill_diagonal(d, 0.0)
    return d


def loss_merge(rot: Value, trans: Value, d_bar: float, lambda_motion: float) -> Value:
    """(1/P^2) sum_{i != j} D_ij * sigmoid((D-bar - D_ij) / D-bar), on the tape."""
    tape = rot.tape
    p = rot.shape[1]
    if p < 2:
        return tape.constant(0.0)
    rel_r = ad.einsum("tpca,tqcb->tpqab", rot, rot)
    tdiff = ad.add(ad.reshape(trans, (trans.shape[0], 1, p, 3)), ad.neg(ad.reshape(trans, (trans.shape[0], p, 1, 3))))
    rel_t = ad.einsum("tpca,tpqc->tpqa", rot, tdiff)
    d = ad.add(
        _std_over_time(rel_r, sum_axes=(-2, -1)),
        ad.mul(tape.constant(lambda_motion), _std_over_time(rel_t, sum_axes=(-1,))),
    )
    off = tape.constant(1.0 - np.eye(p))
    d = ad.mul(d, off)
    gate = ad.sigmoid(ad.div(ad.add(tape.constant(d_bar), ad.neg(d)), tape.constant(d_bar)))
    zero_diag = ad.mul(ad.mul(d, gate), off)
    return ad.div(ad.sum_(zero_diag), tape.constant(float(p * p)))


def _std_over_time(x: Value, sum_axes: tuple[int, ...]) -> Value:
    mu = ad.mean(x, axis=0, keepdims=True)
    var = ad.mean(ad.square(ad.add(x, ad.neg(mu))), axis=0)
    # tiny floor keeps sqrt differentiable when a pair is exactly rigid
    std = ad.sqrt(ad.add(var, x.tape.constant(1e-24)))
    out = std
    axes = sorted((a if a >= 0 else std.data.ndim + a) for a in sum_axes)
    for ax in reversed(axes):
        out = ad.sum_(out, axis=ax)
    return out


def loss_merge_from_d(d: np.ndarray, d_bar: float) -> float:
    """Plain-array merge loss from a precomputed D matrix (diagonal ignored)."""
    d = np.asarray(d, dtype=np.float64)
    p = d.shape[0]
    off = 1.0 - np.eye(p)
    gate = 1.0 / (1.0 + np.exp(-(d_bar - d) / d_bar))
    return float((d * gate * off).sum() / (p * p))


def merge_parts(
    rot: np.ndarray,
    trans: np.ndarray,
    ema: np.ndarray,
    threshold: float,
    lambda_motion: float,
    groups: list[list[int]] | None = None,
) -> tuple[list[list[int]], KinematicTree]:
    """Iteratively merge the lowest-D group pair until none is below threshold.

    Group pose = the lowest-index member's frame. Geometry is untouched; the
    kinematic tree is rebuilt over the merged groups from the EMA costs.
    """
    p = rot.shape[1]
    groups = [list(g) for g in (groups if groups is not None else [[i] for i in range(p)])]
    while len(groups) > 1:
        reps = [min(g) for g in groups]
        d = pairwise_motion_np(rot[:, reps], trans[:, reps], lambda_motion)
        iu = np.triu_indices(len(groups), 1)
        vals = d[iu]
        k = int(np.argmin(vals))
        if vals[k] >= threshold:
            break
        a, b = int(iu[0][k]), int(iu[1][k])
        groups[a] = sorted(groups[a] + groups[b])
        del groups[b]
        groups.sort(key=min)
    groups.sort(key=min)
    return groups, discover_structure(ema, groups)


def joint_positions(tree: KinematicTree, cand_world: np.ndarray) -> np.ndarray:
    """Edge joints as candidate-pair midpoints: (T, P, 6, 3) -> (T, E, 3)."""
    out = np.zeros((cand_world.shape[0], len(tree.edges), 3))
    for eid, e in enumerate(tree.edges):
        (i, m), (j, n) = e.cand_a, e.cand_b
        out[:, eid] = 0.5 * (cand_world[:, i, m] + cand_world[:, j, n])
    return out
