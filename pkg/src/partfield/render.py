"""Volumetric rendering of the composite SDF.

Per-sample opacities come from consecutive SDF values through a sharpness-
controlled sigmoid; transmittance is an exclusive cumulative product along
the ray. Rays that miss the scene bounding sphere are skipped outright and
contribute exact zeros (color, mask, and gradient).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value
from .geometry import Camera, Ray, ray_sphere_interval

_PHI_FLOOR = 1e-15  # denominator guard deep inside the surface
_ALPHA_CAP = 1.0 - 1e-12  # keeps alpha in [0, 1) in floating point
_CHUNK = 4096  # fixed so image renders are reproducible for any worker count


@dataclass
class RenderedRays:
    color: Value  # (N, 3)
    mask: Value  # (N,)
    depth: Value  # (N,)


def neus_alpha(d_j: Value, d_next: Value, sharpness: Value) -> Value:
    """Discrete opacity max((Phi(d_j) - Phi(d_j+1)) / Phi(d_j), 0) in [0, 1)."""
    tape = d_j.tape
    phi_j = ad.sigmoid(ad.mul(d_j, sharpness))
    phi_next = ad.sigmoid(ad.mul(d_next, sharpness))
    ratio = ad.div(ad.add(phi_j, ad.neg(phi_next)), ad.maximum(phi_j, tape.constant(_PHI_FLOOR)))
    return ad.minimum(ad.maximum(ratio, tape.constant(0.0)), tape.constant(_ALPHA_CAP))


def stratified_depths(near: np.ndarray, far: np.ndarray, n_samples: int, jitter: np.ndarray | None) -> np.ndarray:
    """(N,) bounds -> (N, n_samples) strictly increasing depths.

    `jitter` holds per-bin offsets in [0, 1); None places samples at bin centers.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples per ray")
    offsets = np.full(n_samples, 0.5) if jitter is None else jitter
    bins = (np.arange(n_samples) + offsets) / n_samples
    return near[:, None] + (far - near)[:, None] * bins


def render_rays(
    bound_field,
    origins: np.ndarray,
    directions: np.ndarray,
    near: np.ndarray,
    far: np.ndarray,
    rot_frames: Value,
    trans_frames: Value,
    frame_of_ray: np.ndarray | None,
    n_samples: int,
    depth_jitter: np.ndarray | None = None,
) -> RenderedRays:
    """Render N rays against a bound field.

    rot_frames (F, P, 3, 3) and trans_frames (F, P, 3) live on the field's
    tape and hold one pose set per frame; frame_of_ray assigns each ray a
    row (None means one shared pose set). Rays with far <= near never touch
    the field and return exact zeros.
    """
    tape = bound_field.tape
    n = origins.shape[0]
    hit = np.flatnonzero(far > near)
    if hit.size == 0:
        zero3 = tape.constant(np.zeros((n, 3)))
        zero1 = tape.constant(np.zeros(n))
        return RenderedRays(zero3, zero1, zero1)

    o, d = origins[hit], directions[hit]
    jit = depth_jitter[hit] if depth_jitter is not None else None
    depths = stratified_depths(near[hit], far[hit], n_samples, jit)  # (M, S)
    m, s = depths.shape
    points = (o[:, None, :] + depths[..., None] * d[:, None, :]).reshape(m * s, 3)

    if frame_of_ray is None:
        row_frames = np.zeros(m * s, dtype=int)
    else:
        row_frames = np.repeat(np.asarray(frame_of_ray)[hit], s)
    ev = bound_field.field(points, rot_frames, trans_frames, row_frames, residual_band=bound_field.render_band())

    dvals = ad.reshape(ev.sdf, (m, s))
    colors = ad.reshape(ev.color, (m, s, 3))
    alpha = neus_alpha(dvals[:, :-1], dvals[:, 1:], bound_field.sharpness())  # (M, S-1)

    one = tape.constant(np.ones((m, 1)))
    one_minus_alpha = ad.add(tape.constant(np.ones((m, s - 1))), ad.neg(alpha))
    # T_j = prod_{k<j} (1 - alpha_k), exclusive: T_1 is exactly 1
    trans_vis = ad.cumprod(ad.concatenate([one, one_minus_alpha], axis=1), axis=1)[:, :-1]
    weights = ad.mul(trans_vis, alpha)  # (M, S-1)

    mask = ad.sum_(weights, axis=1)
    color = ad.sum_(ad.mul(ad.reshape(weights, (m, s - 1, 1)), colors[:, :-1, :]), axis=1)
    depth = ad.sum_(ad.mul(weights, tape.constant(depths[:, :-1])), axis=1)

    if hit.size == n:
        return RenderedRays(color, mask, depth)
    return RenderedRays(
        ad.scatter_rows(color, hit, n), ad.scatter_rows(mask, hit, n), ad.scatter_rows(depth, hit, n)
    )


def render_ray(
    model_like,
    ray: Ray,
    frame: int | None = None,
    poses: tuple[np.ndarray, np.ndarray] | None = None,
    n_samples: int = 128,
    depth_jitter: np.ndarray | None = None,
) -> tuple[np.ndarray, float, float]:
    """One ray against a model snapshot; accepts a frame id or explicit poses."""
    rot_np, trans_np = _resolve_poses(model_like, frame, poses)
    tape = Tape()
    bound = model_like.bind(tape, trainable=False)
    out = render_rays(
        bound,
        ray.origin[None],
        ray.direction[None],
        np.array([ray.near]),
        np.array([ray.far]),
        tape.constant(rot_np[None]),
        tape.constant(trans_np[None]),
        None,
        n_samples,
        depth_jitter,
    )
    return out.color.data[0], float(out.mask.data[0]), float(out.depth.data[0])


def _resolve_poses(model_like, frame, poses) -> tuple[np.ndarray, np.ndarray]:
    if (frame is None) == (poses is None):
        raise ValueError("provide exactly one of frame or explicit poses")
    if poses is not None:
        rot, trans = poses
        return np.asarray(rot, dtype=np.float64), np.asarray(trans, dtype=np.float64)
    rot, trans = model_like.poses_at(frame)
    return rot[0], trans[0]


@dataclass
class RenderedImage:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) in [0, 1]
    depth: np.ndarray  # (H, W)


def render_image(
    model_like,
    camera: Camera,
    frame: int | None = None,
    poses: tuple[np.ndarray, np.ndarray] | None = None,
    n_samples: int = 128,
    seed: int = 0,
    scene_radius: float = 1.0,
    margin: float = 1.1,
    workers: int = 1,
) -> RenderedImage:
    """Per-pixel render over an immutable snapshot.

    Deterministic for a given seed regardless of worker count: depth jitter
    is drawn per fixed-size chunk from seeds derived from the chunk index.
    """
    rot_np, trans_np = _resolve_poses(model_like, frame, poses)
    h, w = camera.height, camera.width
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    pix = np.stack([us + 0.5, vs + 0.5], axis=-1).reshape(-1, 2)
    dirs = camera.pixel_direction(pix)
    origin = camera.center
    near, far = ray_sphere_interval(np.broadcast_to(origin, dirs.shape), dirs, scene_radius * margin)

    n = h * w
    rgb = np.zeros((n, 3))
    mask = np.zeros(n)
    depth = np.zeros(n)

    def run_chunk(c0: int):
        c1 = min(c0 + _CHUNK, n)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(c0 // _CHUNK,)))
        jitter = rng.random((c1 - c0, n_samples))
        tape = Tape()
        bound = model_like.bind(tape, trainable=False)
        cnt = c1 - c0
        rot_v = tape.constant(rot_np[None])
        trans_v = tape.constant(trans_np[None])
        origins = np.broadcast_to(origin, (cnt, 3))
        out = render_rays(
            bound, origins, dirs[c0:c1], near[c0:c1], far[c0:c1], rot_v, trans_v, None, n_samples, jitter
        )
        rgb[c0:c1] = out.color.data
        mask[c0:c1] = out.mask.data
        depth[c0:c1] = out.depth.data

    starts = range(0, n, _CHUNK)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_chunk, starts))
    else:
        for c0 in starts:
            run_chunk(c0)
    return RenderedImage(rgb.reshape(h, w, 3), mask.reshape(h, w), depth.reshape(h, w))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0
