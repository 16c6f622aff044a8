"""Losses, the frame scheduler, the optimizer, and the training loop.

One iteration: sample a batch of (camera, frame) views and rays within
them, run the trajectory network for every frame currently in use, render
the sampled rays, assemble the weighted loss (photometric, Eikonal,
silhouette chamfer terms, separation, structure, merge), backpropagate,
take one decoupled-weight-decay adaptive step, clamp radii, and refresh
the EMA cost matrix. Everything random flows from one seeded generator in
a fixed order, so single-worker runs replay bit-identically.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import structure as st
from .autodiff import NonFiniteError, Tape, Value
from .config import RunConfig
from .geometry import Camera, ray_sphere_interval
from .model import ArticulatedModel, BoundModel
from .pipeline.dataset import SceneDataset
from .render import render_rays
from .sdf import sample_ellipsoid_surfaces, sdf_spatial_gradient

LOG_TERMS = ("photo", "sdf", "structure", "merge", "ellipsoid", "coverage", "separation")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, term: str, cause: Exception):
        super().__init__(f"non-finite value in loss term '{term}' at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.term = term


@dataclass
class FrameSchedule:
    """Progressive frame activation: first T0 frames, then a linear ramp."""

    total_frames: int
    t0_frames: int
    tau0: int
    tau1: int
    tau2: int
    tau_final: int

    def frames_in_use(self, iteration: int) -> int:
        t0 = min(self.t0_frames, self.total_frames)
        if iteration < self.tau0:
            return t0
        if iteration >= self.tau1:
            return self.total_frames
        frac = (iteration - self.tau0) / (self.tau1 - self.tau0)
        return min(self.total_frames, t0 + int(np.floor(frac * (self.total_frames - t0))))

    def merge_active(self, iteration: int) -> bool:
        return iteration >= self.tau2

    def lambda_structure(self, iteration: int, start: float, end: float) -> float:
        if iteration >= self.tau0:
            return end
        return start + (end - start) * iteration / self.tau0


class AdamW:
    """Adaptive moments with decoupled weight decay over a ParameterStore."""

    def __init__(self, store, lr: float, beta1: float = 0.9, beta2: float = 0.999, weight_decay: float = 0.0, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in store.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for name, p in self.store.items():
            g = grads[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            self.store[name] = p - self.lr * update - self.lr * self.weight_decay * p


# ---------------------------------------------------------------------------
# loss terms


def loss_photometric(
    color: Value, mask: Value, target_color: np.ndarray, target_mask: np.ndarray, validity: np.ndarray | None = None
) -> Value:
    """Mean over rays of ||C - C_gt||^2 + (M - M_gt)^2, zeroed where invalid."""
    tape = color.tape
    cdiff = ad.add(color, tape.constant(-np.asarray(target_color, dtype=np.float64)))
    mdiff = ad.add(mask, tape.constant(-np.asarray(target_mask, dtype=np.float64)))
    per_ray = ad.add(ad.sum_(ad.square(cdiff), axis=1), ad.square(mdiff))
    if validity is not None:
        per_ray = ad.mul(per_ray, tape.constant(np.asarray(validity, dtype=np.float64)))
    return ad.mean(per_ray)


def loss_eikonal(bound: BoundModel, points: np.ndarray, rot_all: Value, trans_all: Value, frames: np.ndarray, h: float) -> Value:
    """Mean squared deviation of the finite-difference SDF gradient norm from 1.

    rot_all/trans_all hold poses for every frame in use; `frames` assigns one
    to each point. The six shifted clouds are evaluated in a single pass.
    """
    tape = rot_all.tape
    if len(points) == 0:
        return tape.constant(0.0)

    def field_sdf(pts):
        reps = len(pts) // len(points)
        return bound.field(pts, rot_all, trans_all, np.tile(frames, reps)).sdf

    grad = sdf_spatial_gradient(field_sdf, points, h=h)
    norm = ad.sqrt(ad.add(ad.sum_(ad.square(grad), axis=-1), tape.constant(1e-24)))
    return ad.mean(ad.square(ad.add(norm, tape.constant(-1.0))))


def project_normalized(points: Value, camera: Camera) -> Value:
    """World points (N, 3) to [0,1]^2 pixel-position coordinates, on the tape.

    Depth is clamped at a small positive value so points behind the camera
    cannot produce non-finite projections (their gradient is cut there).
    """
    tape = points.tape
    cam = ad.add(ad.matmul(points, tape.constant(camera.world_to_camera.rotation.T)), tape.constant(camera.world_to_camera.translation))
    uvw = ad.matmul(cam, tape.constant(camera.intrinsics.T))
    z = ad.maximum(uvw[:, 2:3], tape.constant(1e-4))
    uv = ad.div(uvw[:, 0:2], z)
    return ad.div(uv, tape.constant(np.array([camera.width, camera.height], dtype=np.float64)))


def chamfer(points: Value, targets: np.ndarray, norm_a: float, norm_b: float) -> Value:
    """
    norm_a * sum_i min_j ||a_i - b_j||^2 + norm_b * sum_j min_i ||a_i - b_j||^2
    with a on the tape and b constant.
    """
    tape = points.tape
    n = points.shape[0]
    b = tape.constant(np.asarray(targets, dtype=np.float64)[None, :, :])
    diff = ad.add(ad.reshape(points, (n, 1, points.shape[1])), ad.neg(b))
    d2 = ad.sum_(ad.square(diff), axis=-1)  # (N, M)
    to_b = ad.sum_(ad.min_(d2, axis=1))
    to_a = ad.sum_(ad.min_(d2, axis=0))
    return ad.add(ad.mul(tape.constant(norm_a), to_b), ad.mul(tape.constant(norm_b), to_a))


def loss_ellipsoid_chamfer(projected: Value, mask_points: np.ndarray) -> Value:
    """Symmetric chamfer between projected surface samples and mask samples."""
    return chamfer(projected, mask_points, 1.0 / projected.shape[0], 1.0 / len(mask_points))


def loss_part_coverage(projected_centers: Value, mask_points: np.ndarray) -> Value:
    """As the surface chamfer, but per part: 1/P and 1/N_M normalization."""
    return chamfer(projected_centers, mask_points, 1.0 / projected_centers.shape[0], 1.0 / len(mask_points))


def loss_separation(centers: Value, sigma: float) -> Value:
    """(1/P^2) sum_{i != j} exp(-||t_i - t_j||^2 / (2 sigma^2)).

    Penalizes coincident part centers (the printed sign in the source
    material grows with distance, contradicting its stated purpose).
    """
    tape = centers.tape
    p = centers.shape[0]
    if p < 2:
        return tape.constant(0.0)
    diff = ad.add(ad.reshape(centers, (p, 1, 3)), ad.neg(ad.reshape(centers, (1, p, 3))))
    d2 = ad.sum_(ad.square(diff), axis=-1)
    kernel = ad.exp(ad.div(ad.neg(d2), tape.constant(2.0 * sigma * sigma)))
    off = tape.constant(1.0 - np.eye(p))
    return ad.div(ad.sum_(ad.mul(kernel, off)), tape.constant(float(p * p)))


# ---------------------------------------------------------------------------
# trainer


@dataclass
class TrainEvent:
    iteration: int
    terms: dict[str, float]
    total: float
    frames_in_use: int
    lr: float
    seconds: float


class Trainer:
    def __init__(self, model: ArticulatedModel, dataset: SceneDataset, config: RunConfig, log_path=None):
        dataset.validate()
        self.model = model
        self.dataset = dataset
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.schedule = FrameSchedule(
            dataset.n_frames, config.t0_frames, config.tau0, config.tau1, config.tau2, config.tau_final
        )
        self.opt = AdamW(model.store, config.lr, config.beta1, config.beta2, config.weight_decay)
        self.cameras = config.train_cameras if config.train_cameras is not None else list(range(dataset.n_cameras))
        for c in self.cameras:
            if not (0 <= c < dataset.n_cameras):
                raise ValueError(f"train camera {c} out of range (dataset has {dataset.n_cameras})")
        self.log_path = Path(log_path) if log_path is not None else None
        self._log_file = None
        self._mask_pixels = [
            [np.argwhere(dataset.masks[c, t] >= 0.5) for t in range(dataset.n_frames)]
            for c in range(dataset.n_cameras)
        ]
        self.iteration = 0

    # -- ray sampling -------------------------------------------------------

    def _sample_batch(self, n_frames_in_use: int):
        cfg = self.config
        ds = self.dataset
        views = []
        for _ in range(cfg.images_per_batch):
            cam = self.cameras[int(self.rng.integers(len(self.cameras)))]
            frame = int(self.rng.integers(n_frames_in_use))
            views.append((cam, frame))
        h, w = ds.images.shape[2:4]
        per = cfg.rays_per_image
        origins = np.zeros((len(views) * per, 3))
        dirs = np.zeros((len(views) * per, 3))
        frame_ids = np.zeros(len(views) * per, dtype=int)
        target_c = np.zeros((len(views) * per, 3))
        target_m = np.zeros(len(views) * per)
        validity = np.ones(len(views) * per)
        for k, (cam_idx, frame) in enumerate(views):
            cam = ds.cameras[cam_idx]
            us = self.rng.integers(0, w, size=per)
            vs = self.rng.integers(0, h, size=per)
            jitter = self.rng.uniform(-0.5, 0.5, size=(per, 2))
            pix = np.stack([us + 0.5 + jitter[:, 0], vs + 0.5 + jitter[:, 1]], axis=-1)
            sl = slice(k * per, (k + 1) * per)
            dirs[sl] = cam.pixel_direction(pix)
            origins[sl] = cam.center
            frame_ids[sl] = frame
            target_c[sl] = ds.images[cam_idx, frame, vs, us]
            target_m[sl] = ds.masks[cam_idx, frame, vs, us]
            if ds.validity is not None:
                validity[sl] = ds.validity[cam_idx, frame, vs, us]
        near, far = ray_sphere_interval(origins, dirs, ds.scene_radius * cfg.near_far_margin)
        return views, origins, dirs, near, far, frame_ids, target_c, target_m, validity

    def _eikonal_points(self, origins, dirs, near, far, frame_ids, batch_frames: np.ndarray):
        cfg = self.config
        n_uniform = cfg.eikonal_points // 2
        n_surface = cfg.eikonal_points - n_uniform
        radius = self.dataset.scene_radius * cfg.near_far_margin
        u = self.rng.normal(size=(n_uniform, 3))
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        pts_uniform = u * (radius * np.cbrt(self.rng.random((n_uniform, 1))))
        frames_uniform = batch_frames[self.rng.integers(len(batch_frames), size=n_uniform)]
        hit = np.flatnonzero(far > near)
        if hit.size:
            pick = hit[self.rng.integers(hit.size, size=n_surface)]
            depth = near[pick] + (far[pick] - near[pick]) * self.rng.random(n_surface)
            pts_ray = origins[pick] + depth[:, None] * dirs[pick]
            pts_ray = pts_ray + self.rng.normal(scale=cfg.eikonal_sigma, size=pts_ray.shape)
            frames_ray = frame_ids[pick]
        else:
            pts_ray = np.zeros((0, 3))
            frames_ray = np.zeros(0, dtype=int)
        pts = np.concatenate([pts_uniform, pts_ray], axis=0)
        frames = np.concatenate([frames_uniform, frames_ray], axis=0).astype(int)
        return pts, frames

    def _mask_samples(self, cam_idx: int, frame: int, width: int, height: int) -> np.ndarray | None:
        fg = self._mask_pixels[cam_idx][frame]
        if len(fg) == 0:
            return None
        pick = fg[self.rng.integers(len(fg), size=self.config.n_mask_samples)]
        # argwhere rows are (v, u); normalized positions use pixel centers
        return np.stack([(pick[:, 1] + 0.5) / width, (pick[:, 0] + 0.5) / height], axis=-1)

    # -- one iteration ------------------------------------------------------

    def step(self) -> TrainEvent:
        cfg = self.config
        it = self.iteration
        start = time.perf_counter()
        n_use = self.schedule.frames_in_use(it)
        term = "setup"
        try:
            tape = Tape()
            bound = self.model.bind(tape)
            rot_all, trans_all = bound.poses(self.model.normalize_frames(np.arange(n_use)))

            views, origins, dirs, near, far, frame_ids, tc, tm, valid = self._sample_batch(n_use)
            terms: dict[str, Value] = {}

            if cfg.loss_enabled("photo"):
                term = "photo"
                depth_jitter = self.rng.random((len(origins), cfg.n_samples_train))
                out = render_rays(
                    bound, origins, dirs, near, far, rot_all, trans_all, frame_ids, cfg.n_samples_train, depth_jitter
                )
                terms["photo"] = loss_photometric(out.color, out.mask, tc, tm, valid)

            if cfg.loss_enabled("sdf"):
                term = "sdf"
                batch_frames = np.array(sorted({f for _, f in views}), dtype=int)
                pts, pframes = self._eikonal_points(origins, dirs, near, far, frame_ids, batch_frames)
                terms["sdf"] = loss_eikonal(bound, pts, rot_all, trans_all, pframes, cfg.fd_step)

            need_silhouette = cfg.loss_enabled("ellipsoid") or cfg.loss_enabled("coverage")
            if need_silhouette:
                term = "ellipsoid"
                ell_terms, cov_terms = [], []
                p = self.model.parts
                if cfg.loss_enabled("ellipsoid"):
                    tiled = np.tile(self.model.store["radii"], (len(views), 1))
                    local_all = sample_ellipsoid_surfaces(tiled, cfg.n_surface_samples, self.rng).reshape(
                        len(views), p, cfg.n_surface_samples, 3
                    )
                for k, (cam_idx, frame) in enumerate(views):
                    cam = self.dataset.cameras[cam_idx]
                    mask_pts = self._mask_samples(cam_idx, frame, cam.width, cam.height)
                    if mask_pts is None:
                        continue  # empty mask: term skipped for this view
                    rot_f = rot_all[frame]
                    trans_f = trans_all[frame]
                    if cfg.loss_enabled("ellipsoid"):
                        dirs_unit = tape.constant(local_all[k] / self.model.store["radii"][:, None, :])
                        pts_local = ad.mul(dirs_unit, ad.reshape(bound.radii, (p, 1, 3)))
                        world = ad.add(
                            ad.einsum("pij,pnj->pni", rot_f, pts_local),
                            ad.reshape(trans_f, (p, 1, 3)),
                        )
                        flat = ad.reshape(world, (p * cfg.n_surface_samples, 3))
                        ell_terms.append(loss_ellipsoid_chamfer(project_normalized(flat, cam), mask_pts))
                    if cfg.loss_enabled("coverage"):
                        cov_terms.append(loss_part_coverage(project_normalized(trans_f, cam), mask_pts))
                if cfg.loss_enabled("ellipsoid") and ell_terms:
                    terms["ellipsoid"] = _mean_of(ell_terms)
                if cfg.loss_enabled("coverage") and cov_terms:
                    term = "coverage"
                    terms["coverage"] = _mean_of(cov_terms)

            if cfg.loss_enabled("separation"):
                term = "separation"
                sep = [loss_separation(trans_all[frame], cfg.sigma_separation) for _, frame in views]
                terms["separation"] = _mean_of(sep)

            term = "structure"
            cands_np = st.candidates_world_np(rot_all.data, trans_all.data, self.model.store["radii"])
            raw = st.pairwise_cost_np(cands_np, trans_all.data, cfg.lambda_l)
            ema_prev = self.model.ema_cost
            self.model.ema_cost = st.ema_update(ema_prev, raw, cfg.ema_momentum)
            if self.model.tree is None or it % cfg.structure_every == 0:
                self.model.tree = st.discover_structure(self.model.ema_cost)
            if cfg.loss_enabled("structure"):
                terms["structure"] = st.loss_structure(
                    self.model.tree, ema_prev, cfg.ema_momentum, rot_all, trans_all, bound.radii, cfg.lambda_l
                )

            if cfg.loss_enabled("merge") and self.schedule.merge_active(it):
                term = "merge"
                terms["merge"] = st.loss_merge(rot_all, trans_all, cfg.d_bar, cfg.lambda_motion)

            term = "total"
            weights = {
                "photo": cfg.lambda_photo,
                "sdf": cfg.lambda_sdf,
                "ellipsoid": cfg.lambda_ellipsoid,
                "coverage": cfg.lambda_coverage,
                "separation": cfg.lambda_separation,
                "structure": self.schedule.lambda_structure(it, cfg.lambda_structure_start, cfg.lambda_structure_end),
                "merge": cfg.lambda_merge,
            }
            total = tape.constant(0.0)
            for name, value in terms.items():
                total = ad.add(total, ad.mul(tape.constant(weights[name]), value))

            grads = dict(zip(self.model.store.names(), tape.backward(total, [bound.vals[n] for n in self.model.store.names()])))
            self.opt.step(grads)
            np.clip(self.model.store["radii"], cfg.radius_min, cfg.radius_max, out=self.model.store["radii"])
        except NonFiniteError as exc:
            raise TrainingDiverged(it, term, exc) from exc

        logged = {name: float(terms[name].data) if name in terms else 0.0 for name in LOG_TERMS}
        event = TrainEvent(
            iteration=it,
            terms=logged,
            total=float(total.data),
            frames_in_use=n_use,
            lr=cfg.lr,
            seconds=time.perf_counter() - start,
        )
        self.iteration += 1
        self._log(event)
        return event

    def _log(self, event: TrainEvent) -> None:
        if self.log_path is None:
            return
        if event.iteration % self.config.log_every and event.iteration != self.config.tau_final - 1:
            return
        if self._log_file is None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self._log_file = open(self.log_path, "a")
        record = {"iteration": event.iteration, "total": event.total, "lr": event.lr, "frames": event.frames_in_use}
        record.update(event.terms)
        self._log_file.write(json.dumps(record) + "\n")
        self._log_file.flush()

    def run(self, iterations: int | None = None, on_checkpoint=None) -> TrainEvent:
        """Train to tau_final (or a given iteration count); returns the last event."""
        target = self.config.tau_final if iterations is None else self.iteration + iterations
        event = None
        while self.iteration < target:
            event = self.step()
            if on_checkpoint is not None and (self.iteration in self.config.save_at):
                on_checkpoint(self.iteration)
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None
        return event


def _mean_of(values: list[Value]) -> Value:
    total = values[0]
    for v in values[1:]:
        total = ad.add(total, v)
    if len(values) == 1:
        return total
    return ad.div(total, total.tape.constant(float(len(values))))
