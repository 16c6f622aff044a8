"""Scene dataset layout and IO.

On disk a dataset is a directory:

    meta.json                   T, C, resolution, scene radius, provenance
    cameras.json                intrinsics + world-to-camera pose per camera
    images/cam{c}/frame{t:05d}.png   8-bit RGB, composited on black
    masks/cam{c}/frame{t:05d}.png    8-bit grayscale, 255 = foreground
    gt.json                     optional ground truth (rig, poses, joints)

Loading validates every invariant and names the offending file in errors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import Camera, RigidTransform
from ..model import GroundTruthField
from ..render import from_uint8, to_uint8

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Dataset directory violates the layout or an invariant."""


@dataclass
class GroundTruth:
    """Everything needed to re-render and evaluate against the true rig."""

    field: GroundTruthField
    rot: np.ndarray  # (T, P, 3, 3) per-ellipsoid poses
    trans: np.ndarray  # (T, P, 3)
    link_of_part: list[int]
    tree_edges: list[tuple[int, int]]  # over links
    joints_world: np.ndarray  # (T, E, 3)
    preset: str = ""

    def to_dict(self) -> dict:
        return {
            "field": self.field.to_dict(),
            "rot": self.rot.tolist(),
            "trans": self.trans.tolist(),
            "link_of_part": list(self.link_of_part),
            "tree_edges": [list(e) for e in self.tree_edges],
            "joints_world": self.joints_world.tolist(),
            "preset": self.preset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            field=GroundTruthField.from_dict(d["field"]),
            rot=np.asarray(d["rot"], dtype=np.float64),
            trans=np.asarray(d["trans"], dtype=np.float64),
            link_of_part=[int(x) for x in d["link_of_part"]],
            tree_edges=[tuple(e) for e in d["tree_edges"]],
            joints_world=np.asarray(d["joints_world"], dtype=np.float64),
            preset=d.get("preset", ""),
        )


@dataclass
class SceneDataset:
    cameras: list[Camera]
    images: np.ndarray  # (C, T, H, W, 3) float in [0, 1]
    masks: np.ndarray  # (C, T, H, W) float in [0, 1]
    meta: dict
    gt: GroundTruth | None = None
    validity: np.ndarray | None = None  # (C, T, H, W) in [0, 1]; None means all valid

    @property
    def n_cameras(self) -> int:
        return self.images.shape[0]

    @property
    def n_frames(self) -> int:
        return self.images.shape[1]

    @property
    def scene_radius(self) -> float:
        return float(self.meta.get("scene_radius", 1.0))

    def validate(self) -> None:
        c, t = self.images.shape[:2]
        if t < 2:
            raise DatasetError(f"need at least 2 frames, found {t}")
        if c < 2:
            raise DatasetError(f"need at least 2 cameras, found {c}")
        if self.masks.shape != self.images.shape[:4]:
            raise DatasetError(f"mask block {self.masks.shape} does not match images {self.images.shape[:4]}")
        if len(self.cameras) != c:
            raise DatasetError(f"{len(self.cameras)} cameras for {c} image stacks")
        for cam in self.cameras:
            if (cam.height, cam.width) != self.images.shape[2:4]:
                raise DatasetError(
                    f"camera resolution {cam.width}x{cam.height} does not match images "
                    f"{self.images.shape[3]}x{self.images.shape[2]}"
                )


def camera_to_dict(cam: Camera) -> dict:
    return {
        "intrinsics": cam.intrinsics.tolist(),
        "rotation": cam.world_to_camera.rotation.tolist(),
        "translation": cam.world_to_camera.translation.tolist(),
        "width": cam.width,
        "height": cam.height,
    }


def camera_from_dict(d: dict) -> Camera:
    return Camera(
        np.asarray(d["intrinsics"], dtype=np.float64),
        RigidTransform(np.asarray(d["rotation"]), np.asarray(d["translation"])),
        int(d["width"]),
        int(d["height"]),
    )


def _frame_path(root: Path, kind: str, cam: int, frame: int) -> Path:
    return root / kind / f"cam{cam}" / f"frame{frame:05d}.png"


def save_dataset(ds: SceneDataset, root) -> None:
    ds.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = dict(ds.meta)
    meta.update(
        format_version=FORMAT_VERSION,
        frames=ds.n_frames,
        cameras=ds.n_cameras,
        width=ds.images.shape[3],
        height=ds.images.shape[2],
    )
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    (root / "cameras.json").write_text(json.dumps([camera_to_dict(c) for c in ds.cameras], indent=2) + "\n")
    for c in range(ds.n_cameras):
        for t in range(ds.n_frames):
            img_path = _frame_path(root, "images", c, t)
            img_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(to_uint8(ds.images[c, t]), mode="RGB").save(img_path)
            mask_path = _frame_path(root, "masks", c, t)
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(to_uint8(ds.masks[c, t]), mode="L").save(mask_path)
    if ds.gt is not None:
        (root / "gt.json").write_text(json.dumps(ds.gt.to_dict()) + "\n")


def _load_png(path: Path, mode: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing image file: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except DatasetError:
        raise
    except Exception as exc:  # noqa: BLE001 - surfaced with the path
        raise DatasetError(f"corrupt image file {path}: {exc}") from exc


def load_dataset(root) -> SceneDataset:
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"not a dataset directory (no meta.json): {root}")
    meta = json.loads(meta_path.read_text())
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetError(f"dataset format version mismatch: expected {FORMAT_VERSION}, found {version}")
    cameras = [camera_from_dict(d) for d in json.loads((root / "cameras.json").read_text())]
    c, t = int(meta["cameras"]), int(meta["frames"])
    h, w = int(meta["height"]), int(meta["width"])
    images = np.zeros((c, t, h, w, 3))
    masks = np.zeros((c, t, h, w))
    for ci in range(c):
        for ti in range(t):
            img = _load_png(_frame_path(root, "images", ci, ti), "RGB")
            if img.shape != (h, w, 3):
                raise DatasetError(
                    f"image {_frame_path(root, 'images', ci, ti)} has shape {img.shape}, expected {(h, w, 3)}"
                )
            images[ci, ti] = from_uint8(img)
            msk = _load_png(_frame_path(root, "masks", ci, ti), "L")
            if msk.shape != (h, w):
                raise DatasetError(
                    f"mask {_frame_path(root, 'masks', ci, ti)} has shape {msk.shape}, expected {(h, w)}"
                )
            masks[ci, ti] = from_uint8(msk)
    gt = None
    gt_path = root / "gt.json"
    if gt_path.exists():
        gt = GroundTruth.from_dict(json.loads(gt_path.read_text()))
    ds = SceneDataset(cameras, images, masks, meta, gt)
    ds.validate()
    return ds
