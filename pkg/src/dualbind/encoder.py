"""SE(3)-invariant atom embeddings by frame averaging.

Each complex gets four right-handed frames from the principal axes of its
centred coordinates (protein and ligand atoms together). A message-passing
network runs on the atom coordinates expressed in every frame and the four
outputs are averaged. Since the frames rotate and translate with the input,
the averaged embedding is invariant to rigid motions, while mirror images are
generally told apart because no improper frame is used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .batch import N_FRAMES, Batch

N_RBF = 8
RBF_CENTERS = np.linspace(0.0, 10.0, N_RBF)
RBF_WIDTH = 1.0
MESSAGE_SCALE = 1.0 / 8.0

# sign flips of the first two principal axes; the third follows the right-hand rule
FRAME_SIGNS = np.array(
    [[1.0, 1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0], [-1.0, -1.0, 1.0]]
)


@dataclass(frozen=True)
class FrameSet:
    centroid: np.ndarray  # (3,)
    rotations: np.ndarray  # (4, 3, 3), columns are frame axes


def rbf(d: Tensor) -> Tensor:
    """Gaussian radial basis expansion of a (m,) distance vector to (m, 8)."""
    diff = ad.reshape(d, (-1, 1)) - RBF_CENTERS[None, :]
    return ad.exp(ad.square(diff) * (-1.0 / RBF_WIDTH**2))


def envelope(d: Tensor, cutoff: float) -> Tensor:
    """1 below 0.9*cutoff, cosine taper to 0 at the cutoff; C1 everywhere."""
    start = 0.9 * cutoff
    t = ad.clip((d - start) * (1.0 / (cutoff - start)), 0.0, 1.0)
    return (ad.cos(t * np.pi) + 1.0) * 0.5


def distances(x: Tensor, src: ad.IndexMap, dst: ad.IndexMap) -> Tensor:
    diff = ad.gather(x, src) - ad.gather(x, dst)
    return ad.sqrt(ad.sum_(ad.square(diff), axis=1))


def frame_axes(x: Tensor, batch: Batch) -> tuple[Tensor, Tensor]:
    """Per-complex centroid (B, 3) and principal-axis matrix (B, 3, 3)."""
    inv_counts = 1.0 / batch.counts[:, None].astype(np.float64)
    centroid = ad.scatter_add(x, batch.atom_map) * inv_counts
    xc = x - ad.gather(centroid, batch.atom_map)
    n = batch.n_atoms
    outer = ad.reshape(xc, (n, 3, 1)) * ad.reshape(xc, (n, 1, 3))
    cov = ad.scatter_add(ad.reshape(outer, (n, 9)), batch.atom_map) * inv_counts
    axes = ad.sym_eigvecs(ad.reshape(cov, (batch.n_complexes, 3, 3)))
    return centroid, axes


def build_frames(coords) -> FrameSet:
    """The four proper frames of a single point cloud."""
    arr = np.asarray(coords.data if isinstance(coords, Tensor) else coords, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 2:
        raise ValueError(f"need an (n>=2, 3) coordinate array, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite coordinates")
    centroid = arr.mean(axis=0)
    xc = arr - centroid
    cov = xc.T @ xc / len(arr)
    base = ad._canonical_eigvecs(cov)
    rots = np.stack([base * s[None, :] for s in FRAME_SIGNS])
    return FrameSet(centroid=centroid, rotations=rots)


def projected_coords(x: Tensor, batch: Batch) -> Tensor:
    """Coordinates in every frame, shape (4, N, 3)."""
    centroid, axes = frame_axes(x, batch)
    n = batch.n_atoms
    xc = x - ad.gather(centroid, batch.atom_map)
    per_atom = ad.reshape(ad.gather(ad.reshape(axes, (batch.n_complexes, 9)), batch.atom_map), (n, 3, 3))
    y0 = ad.reshape(ad.matmul(ad.reshape(xc, (n, 1, 3)), per_atom), (1, n, 3))
    return y0 * FRAME_SIGNS[:, None, :]


class EncoderParams:
    """Weights of the frame-averaged message-passing encoder."""

    def __init__(self, feature_dim: int, hidden: int = 64, layers: int = 2, rng=None, scale: float = 1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.layers = layers
        h = hidden

        def w(fan_in, fan_out):
            return Tensor(rng.normal(0.0, scale / np.sqrt(fan_in), (fan_in, fan_out)), requires_grad=True)

        def b(size):
            return Tensor(np.zeros(size), requires_grad=True)

        self.tensors: dict[str, Tensor] = {
            "enc.embed_feat": w(feature_dim, h),
            "enc.embed_pos": w(3, h),
            "enc.embed_bias": b(h),
        }
        for k in range(layers):
            self.tensors.update(
                {
                    f"enc.{k}.msg_src": w(h, h),
                    f"enc.{k}.msg_dst": w(h, h),
                    f"enc.{k}.msg_rbf": w(N_RBF, h),
                    f"enc.{k}.msg_bias": b(h),
                    f"enc.{k}.upd_self": w(h, h),
                    f"enc.{k}.upd_agg": w(h, h),
                    f"enc.{k}.upd_bias": b(h),
                }
            )

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def encode_batch(params: EncoderParams, batch: Batch, x: Tensor) -> Tensor:
    """Per-atom embeddings (N, h) for every complex in the batch."""
    p = params.tensors
    n, h, e = batch.n_atoms, params.hidden, batch.n_edges

    y = projected_coords(x, batch)  # (4, N, 3)
    feat_part = ad.reshape(ad.matmul(Tensor(batch.feats), p["enc.embed_feat"]), (1, n, h))
    state = ad.tanh(feat_part + ad.matmul(y, p["enc.embed_pos"]) + p["enc.embed_bias"])
    state = ad.reshape(state, (N_FRAMES * n, h))

    d = distances(x, batch.src_map, batch.dst_map)
    edge_rbf = rbf(d)
    edge_env = ad.reshape(envelope(d, batch.cutoff), (1, e, 1))

    for k in range(params.layers):
        src = ad.gather(ad.matmul(state, p[f"enc.{k}.msg_src"]), batch.src_map4)
        dst = ad.gather(ad.matmul(state, p[f"enc.{k}.msg_dst"]), batch.dst_map4)
        geom = ad.reshape(ad.matmul(edge_rbf, p[f"enc.{k}.msg_rbf"]) + p[f"enc.{k}.msg_bias"], (1, e, h))
        msg = ad.tanh(ad.reshape(src + dst, (N_FRAMES, e, h)) + geom) * edge_env
        agg = ad.scatter_add(ad.reshape(msg, (N_FRAMES * e, h)), batch.dst_map4) * MESSAGE_SCALE
        update = ad.matmul(state, p[f"enc.{k}.upd_self"]) + ad.matmul(agg, p[f"enc.{k}.upd_agg"])
        state = state + ad.tanh(update + p[f"enc.{k}.upd_bias"])

    out = ad.mean(ad.reshape(state, (N_FRAMES, n, h)), axis=0)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite atom embeddings")
    return out


def encode(A, X, params: EncoderParams, cutoff: float = 10.0) -> Tensor:
    """Embeddings of a single complex from features ``A`` and coordinates ``X``."""
    from .batch import make_batch

    a = np.asarray(A.data if isinstance(A, Tensor) else A, dtype=np.float64)
    x = X if isinstance(X, Tensor) else Tensor(X)
    batch = make_batch([a], [x.data], cutoff)
    return encode_batch(params, batch, x)
