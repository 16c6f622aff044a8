"""SE(3) transforms, 6-coefficient rotations, cameras, and rays.

Conventions (fixed here so datasets and the renderer agree bit-exactly):

* right-handed world; the camera looks down +z in its own frame;
* pixel (0, 0) is the top-left corner, pixel centers at (u + 0.5, v + 0.5);
* rotations are stored as full 3x3 matrices everywhere; the 6-coefficient
  form exists only at the network output boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHOGONALITY_TOL = 1e-6


class DegenerateRotationError(ValueError):
    """6-coefficient rotation input that cannot be orthonormalized."""


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(3)
    return v


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation mapping local coordinates into global ones."""

    rotation: np.ndarray  # (3,3), orthogonal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", _as_vec3(self.translation))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def validate(self, tol: float = ORTHOGONALITY_TOL) -> None:
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > tol:
            raise ValueError(f"rotation is not orthogonal (deviation {err:.2e} > {tol:g})")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation has negative determinant")

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self applied after other: (self ∘ other)(x) = self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def invert(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map local points (..., 3) to global coordinates."""
        return np.asarray(points) @ self.rotation.T + self.translation


def world_to_local(x_global, pose: RigidTransform) -> np.ndarray:
    """R^{-1}(x - t): express a global point in the pose's local frame."""
    return (np.asarray(x_global, dtype=np.float64) - pose.translation) @ pose.rotation


def local_to_world(x_local, pose: RigidTransform) -> np.ndarray:
    return pose.apply(np.asarray(x_local, dtype=np.float64))


def rot6d_to_matrix(coeffs) -> np.ndarray:
    """Gram-Schmidt two unnormalized 3-vectors into a proper rotation.

    The two triples become the first two columns; the third column is their
    cross product. Scale-invariant in the first vector by construction.
    """
    c = np.asarray(coeffs, dtype=np.float64).reshape(6)
    a1, a2 = c[:3], c[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-9:
        raise DegenerateRotationError(f"first vector has near-zero norm {n1:.2e}")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 < 1e-9:
        raise DegenerateRotationError(f"second vector is parallel to the first (rejection norm {n2:.2e})")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(rotation: np.ndarray) -> np.ndarray:
    """First two columns, flattened; rot6d_to_matrix inverts this exactly."""
    r = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    return np.concatenate([r[:, 0], r[:, 1]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues formula; the axis is normalized here."""
    a = _as_vec3(axis)
    n = np.linalg.norm(a)
    if n < 1e-12:
        raise ValueError("rotation axis has zero norm")
    a = a / n
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit
    near: float
    far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_vec3(self.origin))
        object.__setattr__(self, "direction", _as_vec3(self.direction))

    def at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics plus a world-to-camera rigid transform."""

    intrinsics: np.ndarray  # (3,3) upper-triangular, positive focals
    world_to_camera: RigidTransform
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "intrinsics", k)
        if np.abs(k[np.tril_indices(3, -1)]).max() > 1e-12:
            raise ValueError("intrinsics must be upper-triangular")
        if k[0, 0] <= 0 or k[1, 1] <= 0 or k[2, 2] <= 0:
            raise ValueError("intrinsics must have positive diagonal")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.world_to_camera.invert().translation

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to continuous pixel positions (..., 2).

        Points at (or numerically on top of) the camera center are rejected;
        projection is undefined there.
        """
        pts = np.asarray(points, dtype=np.float64)
        cam = pts @ self.world_to_camera.rotation.T + self.world_to_camera.translation
        z = cam[..., 2]
        if np.any(np.abs(z) < 1e-12):
            raise ValueError("cannot project a point on the camera principal plane (z = 0)")
        uvw = cam @ self.intrinsics.T
        return uvw[..., :2] / uvw[..., 2:3]

    def pixel_direction(self, position: np.ndarray) -> np.ndarray:
        """World-space unit directions for continuous pixel positions (..., 2)."""
        pos = np.asarray(position, dtype=np.float64)
        ones = np.ones(pos.shape[:-1] + (1,))
        homog = np.concatenate([pos, ones], axis=-1)
        d_cam = homog @ np.linalg.inv(self.intrinsics).T
        d_world = d_cam @ self.world_to_camera.rotation  # R^T applied to rows
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def generate_ray(camera: Camera, u: int, v: int, jitter=(0.0, 0.0), near: float | None = None, far: float | None = None) -> Ray:
    """Ray through pixel (u, v): the pixel center offset by `jitter`.

    near/far default to the whole positive half-line; the renderer narrows
    them to the scene bounding sphere.
    """
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    pos = np.array([u + 0.5 + jitter[0], v + 0.5 + jitter[1]])
    direction = camera.pixel_direction(pos)
    return Ray(camera.center, direction, near if near is not None else 0.0, far if far is not None else np.inf)


def ray_sphere_interval(origin, direction, radius: float, center=(0.0, 0.0, 0.0)) -> tuple[float, float] | None:
    """[near, far] where the ray is inside the sphere, or None if it misses.

    Vectorized over leading dimensions; scalar inputs give scalar output.
    """
    o = np.asarray(origin, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    b = (o * d).sum(axis=-1)
    c = (o * o).sum(axis=-1) - radius * radius
    disc = b * b - c
    if np.ndim(disc) == 0:
        if disc <= 0:
            return None
        root = np.sqrt(disc)
        return max(-b - root, 0.0), max(-b + root, 0.0)
    root = np.sqrt(np.maximum(disc, 0.0))
    near = np.maximum(-b - root, 0.0)
    far = np.maximum(-b + root, 0.0)
    far = np.where(disc <= 0, 0.0, far)  # near == far marks a miss
    near = np.where(disc <= 0, 0.0, near)
    return near, far


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World-to-camera transform for a camera at `eye` looking at `target`."""
    eye = _as_vec3(eye)
    fwd = _as_vec3(target) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, _as_vec3(up))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r_cw = np.stack([right, down, fwd], axis=0)  # rows: camera axes in world
    return RigidTransform(r_cw, -r_cw @ eye)
