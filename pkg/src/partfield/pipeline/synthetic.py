"""Native synthetic articulated-scene generator.

A rig is a tree of links, each an ellipsoid with a fixed color, connected
by hinge joints driven by sinusoidal motion programs. Frames are rendered
with the same volumetric renderer the model trains against, off the
analytic union-of-ellipsoids field, so generated datasets are exactly
reproducible from the embedded ground truth (same poses, same seeds).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import Camera, axis_angle_matrix, look_at
from ..model import GroundTruthField
from ..render import render_image
from ..sdf import ellipsoid_sdf_np, sample_ellipsoid_surface
from .dataset import GroundTruth, SceneDataset

GENERATOR_S_PE = 400.0
GENERATOR_S_D = 400.0
GENERATOR_SHARPNESS = 256.0
GENERATOR_SAMPLES = 128
CAMERA_ELEVATION_DEG = 30.0
CAMERA_DISTANCE = 2.6
FOCAL_PER_PIXEL = 1.1  # focal length as a multiple of image width


class RigError(ValueError):
    """Invalid rig specification (cycle, collision, out-of-bounds)."""


@dataclass
class LinkSpec:
    name: str
    radii: tuple[float, float, float]
    color: tuple[float, float, float]
    rest_center: tuple[float, float, float]
    parent: int | None = None
    joint_rest: tuple[float, float, float] | None = None  # world position at rest
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    amplitude: float = 0.0  # radians
    frequency: float = 1.0  # cycles over the whole sequence
    phase: float = 0.0


@dataclass
class RigSpec:
    name: str
    links: list[LinkSpec]
    clearance: float = 0.01

    def __post_init__(self):
        for i, link in enumerate(self.links):
            if link.parent is not None:
                if not (0 <= link.parent < i):
                    raise RigError(f"link '{link.name}': parent must precede it in the list")
                if link.joint_rest is None:
                    raise RigError(f"link '{link.name}': child links need a joint position")

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(l.parent, i) for i, l in enumerate(self.links) if l.parent is not None]


def rig_poses(rig: RigSpec, frames: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward kinematics over the sequence.

    Returns rotations (T, L, 3, 3), translations (T, L, 3), and joint world
    positions (T, E, 3) in the order of rig.edges.
    """
    l = len(rig.links)
    rot = np.zeros((frames, l, 3, 3))
    trans = np.zeros((frames, l, 3))
    joints = np.zeros((frames, len(rig.edges), 3))
    edge_index = {child: k for k, (_, child) in enumerate(rig.edges)}
    for t in range(frames):
        tn = t / frames
        for i, link in enumerate(rig.links):
            if link.parent is None:
                rot[t, i] = np.eye(3)
                trans[t, i] = link.rest_center
                continue
            theta = link.amplitude * np.sin(2.0 * np.pi * link.frequency * tn + link.phase)
            p = link.parent
            joint_local = np.asarray(link.joint_rest) - np.asarray(rig.links[p].rest_center)
            attach_local = np.asarray(link.joint_rest) - np.asarray(link.rest_center)
            joint_world = rot[t, p] @ joint_local + trans[t, p]
            rot[t, i] = rot[t, p] @ axis_angle_matrix(link.axis, theta)
            trans[t, i] = joint_world - rot[t, i] @ attach_local
            joints[t, edge_index[i]] = joint_world
    return rot, trans, joints


def check_clearance(rig: RigSpec, rot: np.ndarray, trans: np.ndarray, n_surface: int = 64) -> None:
    """Non-adjacent links must stay `clearance` apart at every frame."""
    rng = np.random.default_rng(0)
    adjacent = {tuple(sorted(e)) for e in rig.edges}
    samples = [sample_ellipsoid_surface(np.asarray(l.radii), n_surface, rng) for l in rig.links]
    radii = np.asarray([l.radii for l in rig.links])
    for t in range(rot.shape[0]):
        for i in range(len(rig.links)):
            pts_world = samples[i] @ rot[t, i].T + trans[t, i]
            for j in range(len(rig.links)):
                if i == j or tuple(sorted((i, j))) in adjacent:
                    continue
                local = (pts_world - trans[t, j]) @ rot[t, j]
                d = ellipsoid_sdf_np(local, radii[j])
                if d.min() < rig.clearance:
                    raise RigError(
                        f"rig '{rig.name}' self-intersects at frame {t}: links "
                        f"'{rig.links[i].name}' and '{rig.links[j].name}' come within {d.min():.4f}"
                    )


def ring_cameras(count: int, resolution: int, elevation_deg: float = CAMERA_ELEVATION_DEG) -> list[Camera]:
    """Evenly spaced ring at fixed elevation, all looking at the origin."""
    cams = []
    focal = FOCAL_PER_PIXEL * resolution
    k = np.array(
        [[focal, 0.0, resolution / 2.0], [0.0, focal, resolution / 2.0], [0.0, 0.0, 1.0]]
    )
    el = np.deg2rad(elevation_deg)
    for i in range(count):
        az = 2.0 * np.pi * i / count
        eye = CAMERA_DISTANCE * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cams.append(Camera(k, look_at(eye, np.zeros(3)), resolution, resolution))
    return cams


def image_render_seed(seed: int, cam: int, frame: int) -> int:
    """Stable per-image render seed; recorded so renders can be replayed."""
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(cam, frame)).generate_state(1)[0])


def generate_scene(
    rig: RigSpec,
    frames: int = 40,
    cameras: int = 5,
    resolution: int = 64,
    seed: int = 0,
    n_samples: int = GENERATOR_SAMPLES,
) -> SceneDataset:
    """Render a rig into a dataset with embedded ground truth."""
    rot, trans, joints = rig_poses(rig, frames)
    check_clearance(rig, rot, trans)
    extent = (np.linalg.norm(trans, axis=-1) + np.asarray([max(l.radii) for l in rig.links])).max()
    if extent > 1.0:
        raise RigError(f"rig '{rig.name}' leaves the unit sphere (extent {extent:.3f}); rescale it")

    gt_field = GroundTruthField(
        radii=[l.radii for l in rig.links],
        colors=[l.color for l in rig.links],
        s_pe=GENERATOR_S_PE,
        s_d=GENERATOR_S_D,
        sharpness=GENERATOR_SHARPNESS,
    )
    cams = ring_cameras(cameras, resolution)
    images = np.zeros((cameras, frames, resolution, resolution, 3))
    masks = np.zeros((cameras, frames, resolution, resolution))
    for c, cam in enumerate(cams):
        for t in range(frames):
            out = render_image(
                gt_field,
                cam,
                poses=(rot[t], trans[t]),
                n_samples=n_samples,
                seed=image_render_seed(seed, c, t),
            )
            images[c, t] = out.rgb
            masks[c, t] = out.mask
    gt = GroundTruth(
        field=gt_field,
        rot=rot,
        trans=trans,
        link_of_part=list(range(len(rig.links))),
        tree_edges=rig.edges,
        joints_world=joints,
        preset=rig.name,
    )
    meta = {
        "scene_radius": 1.0,
        "seed": seed,
        "preset": rig.name,
        "render_samples": n_samples,
    }
    ds = SceneDataset(cams, images, masks, meta, gt)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# presets


def _chain(name: str, n_links: int, half_len: float, thick: float, colors, motions) -> RigSpec:
    links = []
    x0 = -half_len * (n_links - 1)
    for i in range(n_links):
        axis, amp, freq, phase = motions[i - 1] if i > 0 else ((0, 0, 1), 0.0, 1.0, 0.0)
        links.append(
            LinkSpec(
                name=f"link{i}",
                radii=(half_len, thick, thick),
                color=colors[i],
                rest_center=(x0 + 2 * half_len * i, 0.0, 0.0),
                parent=i - 1 if i > 0 else None,
                joint_rest=(x0 + half_len * (2 * i - 1), 0.0, 0.0) if i > 0 else None,
                axis=axis,
                amplitude=amp,
                frequency=freq,
                phase=phase,
            )
        )
    return RigSpec(name, links)


_RED = (0.88, 0.18, 0.16)
_GREEN = (0.20, 0.82, 0.25)
_BLUE = (0.22, 0.38, 0.93)
_YELLOW = (0.93, 0.83, 0.20)
_MAGENTA = (0.85, 0.25, 0.80)
_CYAN = (0.25, 0.80, 0.85)
_ORANGE = (0.95, 0.55, 0.15)
_GRAY = (0.75, 0.75, 0.78)


def chain3() -> RigSpec:
    return _chain(
        "chain3", 3, 0.26, 0.105,
        [_RED, _GREEN, _BLUE],
        [((0, 0, 1), 0.65, 1.0, 0.0), ((0, 1, 0), 0.55, 2.0, 1.3)],
    )


def chain4() -> RigSpec:
    return _chain(
        "chain4", 4, 0.20, 0.085,
        [_RED, _GREEN, _BLUE, _YELLOW],
        [((0, 0, 1), 0.60, 1.0, 0.0), ((0, 1, 0), 0.55, 2.0, 1.3), ((0, 0, 1), 0.50, 1.0, 2.4)],
    )


def star5() -> RigSpec:
    hub_r = 0.17
    limb = (0.24, 0.075, 0.075)
    links = [LinkSpec("hub", (hub_r, hub_r, hub_r), _GRAY, (0.0, 0.0, 0.0))]
    dirs = [(1, 0, 0), (0, 1, 0), (-1, 0, 0), (0, -1, 0)]
    axes = [(0, 1, 0), (1, 0, 0), (0, 1, 0), (1, 0, 0)]
    colors = [_RED, _GREEN, _BLUE, _YELLOW]
    for k, (d, ax, col) in enumerate(zip(dirs, axes, colors)):
        d = np.asarray(d, dtype=float)
        joint = tuple(d * (hub_r * 0.9))
        center = tuple(d * (hub_r * 0.9 + limb[0]))
        links.append(
            LinkSpec(
                name=f"limb{k}",
                radii=limb,
                color=col,
                rest_center=center,
                parent=0,
                joint_rest=joint,
                axis=ax,
                amplitude=0.55,
                frequency=1.0 + (k % 2),
                phase=0.7 * k,
            )
        )
    return RigSpec("star5", links)


def biped8() -> RigSpec:
    torso_c = (0.0, 0.0, 0.18)
    links = [LinkSpec("torso", (0.11, 0.10, 0.26), _GRAY, torso_c)]
    links.append(
        LinkSpec(
            "head", (0.085, 0.085, 0.085), _ORANGE, (0.0, 0.0, 0.545),
            parent=0, joint_rest=(0.0, 0.0, 0.43), axis=(1, 0, 0),
            amplitude=0.3, frequency=1.0, phase=0.4,
        )
    )
    for side, sx, phase in (("l", 1.0, 0.0), ("r", -1.0, np.pi)):
        links.append(
            LinkSpec(
                f"{side}_arm", (0.045, 0.045, 0.17), _CYAN if side == "l" else _MAGENTA,
                (sx * 0.165, 0.0, 0.21),
                parent=0, joint_rest=(sx * 0.155, 0.0, 0.40), axis=(1, 0, 0),
                amplitude=0.55, frequency=1.0, phase=phase,
            )
        )
    thigh_idx = {}
    for side, sx, phase in (("l", 1.0, np.pi), ("r", -1.0, 0.0)):
        thigh_idx[side] = len(links)
        links.append(
            LinkSpec(
                f"{side}_thigh", (0.05, 0.05, 0.15), _GREEN if side == "l" else _BLUE,
                (sx * 0.065, 0.0, -0.23),
                parent=0, joint_rest=(sx * 0.065, 0.0, -0.07), axis=(1, 0, 0),
                amplitude=0.5, frequency=1.0, phase=phase,
            )
        )
    for side, sx, phase in (("l", 1.0, np.pi), ("r", -1.0, 0.0)):
        links.append(
            LinkSpec(
                f"{side}_shin", (0.042, 0.042, 0.14), _RED if side == "l" else _YELLOW,
                (sx * 0.065, 0.0, -0.525),
                parent=thigh_idx[side], joint_rest=(sx * 0.065, 0.0, -0.385), axis=(1, 0, 0),
                amplitude=0.45, frequency=1.0, phase=phase + 0.8,
            )
        )
    return RigSpec("biped8", links)


PRESETS = {
    "chain3": chain3,
    "chain4": chain4,
    "star5": star5,
    "biped8": biped8,
}


def preset_rig(name: str) -> RigSpec:
    if name not in PRESETS:
        raise RigError(f"unknown rig preset '{name}'; available: {sorted(PRESETS)}")
    return PRESETS[name]()
