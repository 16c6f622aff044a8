"""Explicit re-posing about discovered joints, skeleton mapping in both
directions (ridge regression + orthogonal Procrustes), and evaluation
metrics (MPJPE, PSNR, SSIM, mask IoU)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .geometry import RigidTransform, axis_angle_matrix
from .structure import KinematicTree, candidates_world_np


class UnknownEdgeError(KeyError):
    """Pose edit referencing an edge that does not exist in the tree."""


@dataclass
class RotationEdit:
    edge: int
    axis: tuple[float, float, float]
    angle: float


@dataclass
class PoseEdit:
    """Ordered joint rotations plus an optional root rigid transform."""

    edits: list[RotationEdit] = field(default_factory=list)
    root: RigidTransform | None = None

    def to_dict(self) -> dict:
        doc = {"edits": [{"edge": e.edge, "axis": list(e.axis), "angle": e.angle} for e in self.edits]}
        if self.root is not None:
            doc["root"] = {
                "rotation": self.root.rotation.tolist(),
                "translation": self.root.translation.tolist(),
            }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PoseEdit":
        edits = [
            RotationEdit(int(e["edge"]), tuple(float(a) for a in e["axis"]), float(e["angle"]))
            for e in doc.get("edits", [])
        ]
        root = None
        if doc.get("root") is not None:
            root = RigidTransform(np.array(doc["root"]["rotation"]), np.array(doc["root"]["translation"]))
        return cls(edits, root)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PoseEdit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def repose(
    rot: np.ndarray,
    trans: np.ndarray,
    radii: np.ndarray,
    tree: KinematicTree,
    groups: list[list[int]],
    edit: PoseEdit,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply joint rotations root-outward; returns new per-part poses.

    Edge joints (candidate-pair midpoints) are located once at the input
    poses and from then on move rigidly with the subtree they belong to.
    Nested edits therefore compose predictably, and a rotation followed by
    its inverse about the same edge restores the input exactly. The root
    transform, if any, applies first.
    """
    rot = np.array(rot, dtype=np.float64, copy=True)
    trans = np.array(trans, dtype=np.float64, copy=True)
    for e in edit.edits:
        if not (0 <= e.edge < len(tree.edges)):
            raise UnknownEdgeError(f"edge id {e.edge} not in tree with {len(tree.edges)} edges")

    if edit.root is not None:
        rot = np.einsum("ab,pbc->pac", edit.root.rotation, rot)
        trans = trans @ edit.root.rotation.T + edit.root.translation

    cands = candidates_world_np(rot[None], trans[None], radii)[0]  # (P, 6, 3)
    joints = np.zeros((len(tree.edges), 3))
    for eid, te in enumerate(tree.edges):
        (i, m), (j, n) = te.cand_a, te.cand_b
        joints[eid] = 0.5 * (cands[i, m] + cands[j, n])

    parents = tree.parent_map()

    def depth(g: int) -> int:
        d = 0
        while g in parents:
            g = parents[g][0]
            d += 1
        return d

    ordered = sorted(range(len(edit.edits)), key=lambda k: depth(tree.child_group(edit.edits[k].edge)))
    for k in ordered:
        e = edit.edits[k]
        joint = joints[e.edge].copy()
        r_rot = axis_angle_matrix(e.axis, e.angle)
        sub = tree.subtree_groups(e.edge)
        parts = sorted(p for g in sub for p in groups[g])
        rot[parts] = np.einsum("ab,pbc->pac", r_rot, rot[parts])
        trans[parts] = (trans[parts] - joint) @ r_rot.T + joint
        # joints of edges fully inside the subtree ride along with it
        inside = set(sub)
        for fid, fe in enumerate(tree.edges):
            if fid != e.edge and fe.a in inside and fe.b in inside:
                joints[fid] = (joints[fid] - joint) @ r_rot.T + joint
    return rot, trans


# ---------------------------------------------------------------------------
# skeleton mapping


@dataclass
class SkeletonMapping:
    """Linear map between stacked marker coordinate vectors."""

    matrix: np.ndarray  # (3*M_target, 3*M_source)
    lambda_ridge: float

    def apply(self, source: np.ndarray) -> np.ndarray:
        """(T, M_source, 3) -> (T, M_target, 3)."""
        t = source.shape[0]
        flat = source.reshape(t, -1) @ self.matrix.T
        return flat.reshape(t, -1, 3)

    def residual(self, source: np.ndarray, target: np.ndarray) -> float:
        return float(np.linalg.norm(self.apply(source) - target))


def fit_mapping(source: np.ndarray, target: np.ndarray, lambda_ridge: float = 1e-4) -> SkeletonMapping:
    """Least-squares X minimizing sum_t ||X s_t - tau_t||^2 + (lambda/2) ||X||_F^2.

    source: (T, M_s, 3), target: (T, M_t, 3). Solved by the normal equations
    X (S S^T + (lambda/2) I) = T S^T on stacked coordinate vectors.
    """
    if source.shape[0] != target.shape[0] or source.shape[0] < 1:
        raise ValueError("need matching, nonempty frame sets")
    t = source.shape[0]
    s = source.reshape(t, -1).T  # (3*M_s, T)
    tt = target.reshape(t, -1).T  # (3*M_t, T)
    gram = s @ s.T + 0.5 * lambda_ridge * np.eye(s.shape[0])
    if lambda_ridge == 0.0:
        rank = np.linalg.matrix_rank(gram)
        if rank < gram.shape[0]:
            raise ValueError(
                f"normal matrix is singular (rank {rank} < {gram.shape[0]}); use a positive lambda_ridge"
            )
    x = np.linalg.solve(gram, s @ tt.T).T
    return SkeletonMapping(x, lambda_ridge)


def fit_rotation_procrustes(local: np.ndarray, world: np.ndarray, label: str = "part") -> np.ndarray:
    """argmin_R ||R local - world||_F over proper rotations (columns are points).

    SVD of the correlation matrix with determinant correction; raises if the
    correlation is rank-deficient (the point sets do not pin down a rotation).
    """
    local = np.asarray(local, dtype=np.float64)
    world = np.asarray(world, dtype=np.float64)
    if local.shape != world.shape or local.shape[0] != 3 or local.shape[1] < 3:
        raise ValueError("expected matching 3xN point matrices with N >= 3")
    corr = world @ local.T
    u, sing, vt = np.linalg.svd(corr)
    if sing[1] < 1e-12 * max(sing[0], 1.0):
        raise ValueError(f"rank-deficient correlation matrix for {label}; candidate points are degenerate")
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def mpjpe(predicted: np.ndarray, reference: np.ndarray, unit_scale: float = 1.0) -> float:
    """Mean Euclidean error over joints and frames, in scene units * unit_scale."""
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if predicted.shape != reference.shape:
        raise ValueError(f"joint sets differ: {predicted.shape} vs {reference.shape}")
    return float(np.linalg.norm(predicted - reference, axis=-1).mean() * unit_scale)


# ---------------------------------------------------------------------------
# image metrics

PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(peak * peak / mse)), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> float:
    """Standard structural similarity, 11x11 Gaussian window (sigma 1.5).

    RGB inputs are averaged over per-channel SSIM.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], k1, k2, dynamic_range) for c in range(a.shape[-1])]))
    win = _gaussian_window()
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    def filt(img):
        return convolve2d(img, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    sa = filt(a * a) - mu_a**2
    sb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (sa + sb + c2)
    return float((num / den).mean())


def mask_iou(a: np.ndarray, b: np.ndarray, threshold: float = 0.5) -> float:
    a = np.asarray(a) >= threshold
    b = np.asarray(b) >= threshold
    if a.shape != b.shape:
        raise ValueError("mask dimensions differ")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
