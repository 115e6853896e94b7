"""Concatenate several complexes into one flat atom table with index maps.

All neighbour selection happens here, on raw coordinates, before any graph
is built. Pairs are kept when they are closer than the cutoff; the smooth
envelope applied downstream goes to zero (with zero slope) at the cutoff, so
the hard selection does not introduce discontinuities.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .autodiff import IndexMap
from .data import Complex, featurize

N_FRAMES = 4


def _pairs_within(coords: np.ndarray, rows: np.ndarray, cols: np.ndarray, cutoff: float):
    if rows.size == 0 or cols.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    diff = coords[rows][:, None, :] - coords[cols][None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    keep = dist < cutoff
    same = rows[:, None] == cols[None, :]
    keep &= ~same
    r, c = np.nonzero(keep)
    return rows[r], cols[c]


@dataclass
class Batch:
    feats: np.ndarray  # (N, d)
    coords: np.ndarray  # (N, 3)
    is_ligand: np.ndarray  # (N,)
    complex_of: np.ndarray  # (N,)
    n_complexes: int
    counts: np.ndarray  # (B,)
    cutoff: float
    # encoder edges (message from src to dst)
    edge_src: np.ndarray
    edge_dst: np.ndarray
    # ligand x protein interaction pairs
    pair_lig: np.ndarray
    pair_prot: np.ndarray
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.coords)
        self.n_atoms = n
        self.atom_map = IndexMap(self.complex_of, self.n_complexes)
        self.src_map = IndexMap(self.edge_src, n)
        self.dst_map = IndexMap(self.edge_dst, n)
        offs = (np.arange(N_FRAMES) * n)[:, None]
        self.src_map4 = IndexMap((self.edge_src[None, :] + offs).reshape(-1), N_FRAMES * n)
        self.dst_map4 = IndexMap((self.edge_dst[None, :] + offs).reshape(-1), N_FRAMES * n)
        self.pl_map = IndexMap(self.pair_lig, n)
        self.pp_map = IndexMap(self.pair_prot, n)
        self.pair_complex = IndexMap(self.complex_of[self.pair_lig], self.n_complexes)
        self.ligand_rows = np.flatnonzero(self.is_ligand)
        self.ligand_map = IndexMap(self.ligand_rows, n)
        self.ligand_complex = IndexMap(self.complex_of[self.ligand_rows], self.n_complexes)

    @property
    def n_edges(self) -> int:
        return len(self.edge_src)

    @property
    def n_pairs(self) -> int:
        return len(self.pair_lig)

    def empty_complexes(self) -> list[int]:
        """Indices of complexes with no ligand-protein pair inside the cutoff."""
        has = np.zeros(self.n_complexes, bool)
        has[self.complex_of[self.pair_lig]] = True
        return [int(i) for i in np.flatnonzero(~has)]


def make_batch(
    feats: Sequence[np.ndarray],
    coords: Sequence[np.ndarray],
    cutoff: float,
    ids: Sequence[str] = (),
) -> Batch:
    """Build a batch from per-complex feature and coordinate arrays.

    The last feature column is the ligand flag.
    """
    if len(feats) != len(coords):
        raise ValueError("feats and coords must have the same length")
    if not feats:
        raise ValueError("empty batch")
    all_feats = np.concatenate([np.asarray(f, np.float64) for f in feats])
    all_coords = np.concatenate([np.asarray(x, np.float64).reshape(-1, 3) for x in coords])
    counts = np.array([len(f) for f in feats], dtype=np.int64)
    complex_of = np.repeat(np.arange(len(feats)), counts)
    is_ligand = all_feats[:, -1] > 0.5

    src, dst, pl, pp = [], [], [], []
    start = 0
    for n in counts:
        rows = np.arange(start, start + n)
        s, d = _pairs_within(all_coords, rows, rows, cutoff)
        src.append(s)
        dst.append(d)
        lig = rows[is_ligand[rows]]
        prot = rows[~is_ligand[rows]]
        a, b = _pairs_within(all_coords, lig, prot, cutoff)
        pl.append(a)
        pp.append(b)
        start += n
    return Batch(
        feats=all_feats,
        coords=all_coords,
        is_ligand=is_ligand,
        complex_of=complex_of,
        n_complexes=len(feats),
        counts=counts,
        cutoff=float(cutoff),
        edge_src=np.concatenate(src),
        edge_dst=np.concatenate(dst),
        pair_lig=np.concatenate(pl),
        pair_prot=np.concatenate(pp),
        ids=tuple(ids),
    )


def batch_complexes(complexes: Sequence[Complex], cutoff: float, coords=None) -> Batch:
    """Featurize and batch complexes, optionally with replacement coordinates."""
    feats = [featurize(c)[0] for c in complexes]
    xs = [c.coords for c in complexes] if coords is None else list(coords)
    return make_batch(feats, xs, cutoff, ids=[c.id for c in complexes])
