"""Positional encodings and the two MLPs.

The trajectory network maps an encoded frame id to per-part rigid poses
(3P translation values followed by 6P rotation coefficients); the decoder
maps the weighted spatial encoding of a query point to a color and a raw
SDF residual. Hidden activations are softplus, which keeps the residual
C^1 for the finite-difference Eikonal term.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value
from .geometry import DegenerateRotationError


class ParameterStore:
    """Named, ordered float64 arrays shared by the nets and the part set."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, array) -> np.ndarray:
        if name in self._arrays:
            raise KeyError(f"parameter '{name}' already registered")
        self._arrays[name] = np.asarray(array, dtype=np.float64)
        return self._arrays[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, array) -> None:
        if name not in self._arrays:
            raise KeyError(name)
        self._arrays[name] = np.asarray(array, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def bind(self, tape: Tape, trainable: bool = True) -> dict[str, Value]:
        """Inject every parameter into a tape (leaves, or constants for inference)."""
        put = tape.leaf if trainable else tape.constant
        return {k: put(v) for k, v in self._arrays.items()}


def normalize_frame_ids(t, frame_count: int) -> np.ndarray:
    """Map frame ids to [0, pi] so the lowest cosine frequency spans at most
    half a period over the sequence (keeps the encoding injective)."""
    t = np.asarray(t, dtype=np.float64)
    if frame_count < 2:
        raise ValueError("need at least two frames to normalize ids")
    return np.pi * t / (frame_count - 1)


def encode_time(t_hat, k: int = 50) -> np.ndarray:
    """{cos(alpha * t_hat)} for alpha = 1..k; shape (..., k)."""
    t_hat = np.asarray(t_hat, dtype=np.float64)
    alphas = np.arange(1, k + 1, dtype=np.float64)
    return np.cos(t_hat[..., None] * alphas)


def spatial_encoding(x: Value, k: int = 6) -> Value:
    """Raw coordinates plus sin/cos at octave frequencies 2^0 .. 2^(k-1).

    Input (..., 3) -> output (..., 3 + 6k), ordered [x, sin terms, cos terms].
    """
    tape = x.tape
    freqs = tape.constant(2.0 ** np.arange(k, dtype=np.float64))
    scaled = ad.mul(ad.reshape(x, x.shape + (1,)), freqs)  # (..., 3, k)
    flat = x.shape[:-1] + (3 * k,)
    s, c = ad.sincos(scaled)
    return ad.concatenate([x, ad.reshape(s, flat), ad.reshape(c, flat)], axis=-1)


def mlp_sizes(d_in: int, hidden: int, layers: int, d_out: int) -> list[int]:
    if layers < 2:
        raise ValueError("an MLP needs at least input and output layers")
    return [d_in] + [hidden] * (layers - 1) + [d_out]


def init_mlp(store: ParameterStore, prefix: str, sizes: list[int], rng: np.random.Generator) -> None:
    """Uniform +-sqrt(1/fan_in) weights, zero biases."""
    for i, (fin, fout) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(1.0 / fin)
        store.add(f"{prefix}.w{i}", rng.uniform(-bound, bound, size=(fin, fout)))
        store.add(f"{prefix}.b{i}", np.zeros(fout))


def mlp_forward(bound: dict[str, Value], prefix: str, x: Value, layers: int) -> Value:
    """(N, d_in) -> (N, d_out), softplus between layers, linear output."""
    h = x
    for i in range(layers):
        h = ad.add(ad.matmul(h, bound[f"{prefix}.w{i}"]), bound[f"{prefix}.b{i}"])
        if i < layers - 1:
            h = ad.softplus(h)
    return h


def rot6d_batch(six: Value) -> Value:
    """Gram-Schmidt (..., 6) coefficient blocks into (..., 3, 3) rotations.

    Column convention matches geometry.rot6d_to_matrix. Raises on degenerate
    inputs (checked on the primal values) instead of producing garbage.
    """
    a1 = six[..., 0:3]
    a2 = six[..., 3:6]
    n1_sq = np.square(a1.data).sum(axis=-1)
    if np.any(n1_sq < 1e-18):
        raise DegenerateRotationError("rotation coefficients: first vector has near-zero norm")
    n1 = ad.sqrt(ad.sum_(ad.square(a1), axis=-1, keepdims=True))
    b1 = ad.div(a1, n1)
    proj = ad.sum_(ad.mul(b1, a2), axis=-1, keepdims=True)
    u2 = ad.add(a2, ad.neg(ad.mul(proj, b1)))
    if np.any(np.square(u2.data).sum(axis=-1) < 1e-18):
        raise DegenerateRotationError("rotation coefficients: second vector parallel to the first")
    n2 = ad.sqrt(ad.sum_(ad.square(u2), axis=-1, keepdims=True))
    b2 = ad.div(u2, n2)
    b3 = _cross(b1, b2)
    return ad.stack([b1, b2, b3], axis=-1)  # columns


def _cross(u: Value, v: Value) -> Value:
    def comp(i, j):
        return ad.add(
            ad.mul(u[..., i], v[..., j]), ad.neg(ad.mul(u[..., j], v[..., i]))
        )

    return ad.stack([comp(1, 2), comp(2, 0), comp(0, 1)], axis=-1)


def trajectory_forward(
    bound: dict[str, Value], encoding: np.ndarray, parts: int, layers: int
) -> tuple[Value, Value]:
    """Encoded frame ids (B, k_time) -> rotations (B, P, 3, 3), translations (B, P, 3)."""
    tape = next(iter(bound.values())).tape
    out = mlp_forward(bound, "traj", tape.constant(np.atleast_2d(encoding)), layers)
    b = out.shape[0]
    trans = ad.reshape(out[:, : 3 * parts], (b, parts, 3))
    six = ad.reshape(out[:, 3 * parts :], (b, parts, 6))
    return rot6d_batch(six), trans


def decoder_forward(bound: dict[str, Value], feature: Value, layers: int) -> tuple[Value, Value]:
    """Feature rows -> (color in (0,1)^3, raw residual). Color is pose- and
    view-independent by construction: it sees only the feature."""
    out = mlp_forward(bound, "dec", feature, layers)
    color = ad.sigmoid(out[:, 0:3])
    raw = out[:, 3]
    return color, raw


def build_feature(x_local: Value, weights: Value, k_spatial: int) -> Value:
    """Concatenate per-part weighted spatial encodings: (N, P, 3) + (N, P) -> (N, P*E)."""
    enc = spatial_encoding(x_local, k_spatial)  # (N, P, E)
    n, p, e = enc.shape
    weighted = ad.mul(enc, ad.reshape(weights, (n, p, 1)))
    return ad.reshape(weighted, (n, p * e))
