"""The articulated model: part set + scalars + both MLPs, and the analytic
constant-color field the synthetic generator renders with.

Both field types expose the same protocol the renderer consumes:

* ``parts``: number of parts P;
* ``bind(tape, trainable)``: inject parameters into a tape;
* ``BoundModel.field(points, rot, trans)``: per-point composite SDF and color,
  given per-point poses (N, P, 3, 3) / (N, P, 3) on the same tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets, sdf
from .autodiff import Tape, Value
from .config import RunConfig


@dataclass
class FieldEval:
    """Per-point field quantities; everything lives on one tape."""

    sdf: Value  # (N,)
    color: Value  # (N, 3)
    part_sdfs: Value  # (N, P)
    weights: Value  # (N, P)
    x_local: Value  # (N, P, 3)


def local_coordinates(points: np.ndarray, rot_frames: Value, trans_frames: Value, row_frames: np.ndarray):
    """Global points (N, 3) into every part frame: R^T (x - t) -> (N, P, 3).

    rot_frames (F, P, 3, 3) and trans_frames (F, P, 3) hold one pose set per
    frame; row_frames assigns a frame to each point. Points are processed
    grouped by frame (one small rotation contraction per group, never a
    per-point pose tensor) and scattered back to input order.
    """
    tape = rot_frames.tape
    row_frames = np.asarray(row_frames)
    uniq = np.unique(row_frames)
    if len(uniq) == 1:
        f = int(uniq[0])
        pts = tape.constant(np.asarray(points, dtype=np.float64)[:, None, :])
        rel = ad.add(pts, ad.neg(ad.reshape(trans_frames[f], (1,) + trans_frames.shape[1:])))
        return ad.einsum("pji,mpj->mpi", rot_frames[f], rel)
    chunks = []
    order = []
    for f in uniq:
        idx = np.flatnonzero(row_frames == f)
        order.append(idx)
        pts = tape.constant(np.asarray(points, dtype=np.float64)[idx][:, None, :])
        rel = ad.add(pts, ad.neg(ad.reshape(trans_frames[int(f)], (1,) + trans_frames.shape[1:])))
        chunks.append(ad.einsum("pji,mpj->mpi", rot_frames[int(f)], rel))
    grouped = ad.concatenate(chunks, axis=0)
    return ad.scatter_rows(grouped, np.concatenate(order), len(points))


class BoundModel:
    """One model bound to one tape (a snapshot of the parameters)."""

    def __init__(self, model: "ArticulatedModel", tape: Tape, vals: dict[str, Value]):
        self.model = model
        self.tape = tape
        self.vals = vals

    @property
    def radii(self) -> Value:
        return self.vals["radii"]

    def scalar(self, name: str) -> Value:
        return ad.exp(self.vals[name])

    def sharpness(self) -> Value:
        return self.scalar("log_sharpness")

    def poses(self, t_hat: np.ndarray) -> tuple[Value, Value]:
        """Normalized frame ids (B,) -> rotations (B, P, 3, 3), translations (B, P, 3)."""
        enc = nets.encode_time(np.atleast_1d(t_hat), self.model.config.k_time)
        return nets.trajectory_forward(self.vals, enc, self.model.parts, self.model.config.traj_layers)

    def render_band(self) -> float | None:
        """Half-width of the |softmin SDF| band where the residual is evaluated."""
        sigmas = self.model.config.residual_band_sigmas
        if sigmas <= 0:
            return None
        sharp = float(np.exp(self.vals["log_sharpness"].data))
        return self.model.config.d_max + sigmas / sharp

    def field(self, points: np.ndarray, rot_frames: Value, trans_frames: Value, row_frames: np.ndarray | None = None, residual_band: float | None = None) -> FieldEval:
        """Composite SDF and color at global points.

        With `residual_band` set, the decoder runs only on points whose
        bare softmin SDF lies within the band; outside it the bounded
        residual cannot move the surface and opacity weights are
        negligible, so those rows keep the bare SDF and zero color.
        """
        if row_frames is None:
            row_frames = np.zeros(len(points), dtype=int)
        cfg = self.model.config
        tape = self.tape
        x_local = local_coordinates(points, rot_frames, trans_frames, row_frames)
        part_d = sdf.ellipsoid_sdf(x_local, self.radii)
        bare = sdf.softmin_sdf(part_d, self.scalar("log_s_d"))
        if residual_band is None:
            sel = None
            x_sel, part_sel = x_local, part_d
        else:
            sel = np.flatnonzero(np.abs(bare.data) <= residual_band)
            x_sel = ad.take(x_local, sel, axis=0)
            part_sel = ad.take(part_d, sel, axis=0)
        weights = sdf.pe_weights(part_sel, self.scalar("log_s_pe"))
        feature = nets.build_feature(x_sel, weights, cfg.k_spatial)
        color, raw = nets.decoder_forward(self.vals, feature, cfg.dec_layers)
        delta = sdf.compress_residual(raw, self.scalar("log_s_res"), cfg.d_max)
        if sel is None:
            d = ad.add(bare, delta)
            return FieldEval(d, color, part_d, weights, x_local)
        n = len(points)
        d = ad.add(bare, ad.scatter_rows(delta, sel, n))
        color_full = ad.scatter_rows(color, sel, n)
        return FieldEval(d, color_full, part_d, weights, x_local)


class ArticulatedModel:
    """Persistent parameters plus the discovered structure state."""

    def __init__(self, config: RunConfig, frame_count: int, scene_radius: float = 1.0):
        self.config = config
        self.frame_count = int(frame_count)
        self.scene_radius = float(scene_radius)
        self.store = nets.ParameterStore()
        self.ema_cost: np.ndarray | None = None  # (P, 6, P, 6)
        self.tree = None  # structure.KinematicTree, set by discovery
        self.groups: list[list[int]] = [[i] for i in range(config.parts)]

        rng = np.random.default_rng(config.seed)
        p = config.parts
        self.store.add("radii", np.full((p, 3), config.radius_init))
        self.store.add("log_s_pe", np.log(config.s_pe_init))
        self.store.add("log_s_d", np.log(config.s_d_init))
        self.store.add("log_s_res", np.log(config.s_res_init))
        sharp0 = config.sharpness_init
        if sharp0 is None:
            spacing = 2.0 * scene_radius * config.near_far_margin / config.n_samples_train
            sharp0 = 2.0 / spacing  # sigmoid transition width ~ 2 sample spacings
        self.store.add("log_sharpness", np.log(sharp0))
        k_in = config.k_time
        nets.init_mlp(
            self.store, "traj", nets.mlp_sizes(k_in, config.traj_hidden, config.traj_layers, 9 * p), rng
        )
        feat = p * (3 + 6 * config.k_spatial)
        nets.init_mlp(
            self.store, "dec", nets.mlp_sizes(feat, config.dec_hidden, config.dec_layers, 4), rng
        )

    @property
    def parts(self) -> int:
        return self.config.parts

    def bind(self, tape: Tape, trainable: bool = True) -> BoundModel:
        return BoundModel(self, tape, self.store.bind(tape, trainable))

    def normalize_frames(self, t) -> np.ndarray:
        return nets.normalize_frame_ids(t, self.frame_count)

    # ------------------------------------------------------------------
    # inference conveniences (fresh constant tape; nothing recorded for grad)

    def poses_at(self, frames) -> tuple[np.ndarray, np.ndarray]:
        """Frame ids -> numpy rotations (B, P, 3, 3) and translations (B, P, 3)."""
        tape = Tape()
        bound = self.bind(tape, trainable=False)
        rot, trans = bound.poses(self.normalize_frames(np.atleast_1d(frames)))
        return rot.data, trans.data

    def part_set(self) -> sdf.PartSet:
        return sdf.PartSet(
            radii=self.store["radii"].copy(),
            log_s_pe=float(self.store["log_s_pe"]),
            log_s_d=float(self.store["log_s_d"]),
            log_s_res=float(self.store["log_s_res"]),
            d_max=self.config.d_max,
        )


class GroundTruthField:
    """Analytic union-of-ellipsoids field with constant per-part colors.

    Used by the synthetic generator (and by oracle re-renders): same softmin
    composition as the trained model, no residual, colors blended with the
    same distance-softmax weights at a fixed high temperature.
    """

    def __init__(self, radii, colors, s_pe: float = 400.0, s_d: float = 400.0, sharpness: float = 200.0):
        self.radii_np = np.asarray(radii, dtype=np.float64).reshape(-1, 3)
        self.colors_np = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        if self.radii_np.shape[0] != self.colors_np.shape[0]:
            raise ValueError("radii and colors must have one row per part")
        self.s_pe = float(s_pe)
        self.s_d = float(s_d)
        self.sharpness_value = float(sharpness)

    @property
    def parts(self) -> int:
        return self.radii_np.shape[0]

    def bind(self, tape: Tape, trainable: bool = False) -> "BoundGroundTruth":
        return BoundGroundTruth(self, tape)

    def to_dict(self) -> dict:
        return {
            "radii": self.radii_np.tolist(),
            "colors": self.colors_np.tolist(),
            "s_pe": self.s_pe,
            "s_d": self.s_d,
            "sharpness": self.sharpness_value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruthField":
        return cls(data["radii"], data["colors"], data["s_pe"], data["s_d"], data["sharpness"])


class BoundGroundTruth:
    def __init__(self, gt: GroundTruthField, tape: Tape):
        self.gt = gt
        self.tape = tape

    def sharpness(self) -> Value:
        return self.tape.constant(self.gt.sharpness_value)

    def render_band(self) -> None:
        return None  # no residual network: nothing to skip

    def field(self, points: np.ndarray, rot_frames: Value, trans_frames: Value, row_frames: np.ndarray | None = None, residual_band: float | None = None) -> FieldEval:
        if row_frames is None:
            row_frames = np.zeros(len(points), dtype=int)
        tape = self.tape
        x_local = local_coordinates(points, rot_frames, trans_frames, row_frames)
        part_d = sdf.ellipsoid_sdf(x_local, tape.constant(self.gt.radii_np))
        weights = sdf.pe_weights(part_d, tape.constant(self.gt.s_pe))
        color = ad.matmul(weights, tape.constant(self.gt.colors_np))
        d = sdf.softmin_sdf(part_d, tape.constant(self.gt.s_d))
        return FieldEval(d, color, part_d, weights, x_local)
