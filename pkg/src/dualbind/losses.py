"""Supervised, denoising score matching and combined losses.

The score matching term uses the closed form for a Gaussian kernel: the
model's coordinate gradient at the perturbed structure is matched to
``(X~ - X) / sigma^2`` on the ligand rows, the only rows that were perturbed.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import IndexMap, Tensor
from .batch import batch_complexes
from .data import Complex

MODES = ("dual", "mse_only", "dsm_only")


@dataclass(frozen=True)
class PerturbationRecord:
    sigma: float
    epsilon: np.ndarray  # (n_lig, 3)
    x: np.ndarray  # (n, 3) original coordinates
    x_tilde: np.ndarray  # (n, 3)
    ligand_index: np.ndarray

    @property
    def target(self) -> np.ndarray:
        """Ligand rows of ``(X~ - X) / sigma^2``."""
        li = self.ligand_index
        return (self.x_tilde[li] - self.x[li]) / self.sigma**2


@dataclass
class LossReport:
    l_mse: float | None
    l_dsm: float
    total: float
    lam: float
    n_labeled: int
    n_unlabeled: int
    ids: tuple[str, ...] = ()
    sigmas: tuple[float, ...] = ()
    per_sample_dsm: tuple[float, ...] = field(default=(), repr=False)


def mse_loss(pred, y) -> Tensor:
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    if not (np.all(np.isfinite(pred.data)) and np.isfinite(y)):
        raise ValueError("mse_loss needs finite inputs")
    return ad.square(pred - float(y))


def perturb(X, ligand_mask, sigma: float, rng=None, epsilon=None) -> PerturbationRecord:
    """Add ``sigma * N(0, I3)`` noise to ligand rows only."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.array(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    li = np.flatnonzero(np.asarray(ligand_mask, dtype=bool))
    if epsilon is None:
        epsilon = rng.standard_normal((len(li), 3))
    epsilon = np.asarray(epsilon, dtype=np.float64).reshape(len(li), 3)
    x_tilde = x.copy()
    x_tilde[li] = x[li] + sigma * epsilon
    return PerturbationRecord(float(sigma), epsilon, x, x_tilde, li)


EnergyFn = Callable[[np.ndarray, Tensor], Tensor]


def dsm_loss(model, A, rec: PerturbationRecord) -> Tensor:
    """``||dE/dX~ - (X~ - X)/sigma^2||^2`` over ligand rows, differentiable in the parameters.

    ``model`` is an ``EnergyModel`` or any callable ``(A, X) -> scalar Tensor``.
    """
    x_t = Tensor(rec.x_tilde, requires_grad=True)
    if callable(model) and not hasattr(model, "energies"):
        e = model(A, x_t)
    else:
        from .energy import energy

        e = energy(model, A, x_t)
    (g,) = ad.gradient(ad.sum_(e), [x_t], create_graph=True)
    g_lig = ad.take(g, rec.ligand_index)
    return ad.sum_(ad.square(g_lig - rec.target))


def total_loss(l_mse, l_dsm, lam: float):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if l_mse is None:
        return l_dsm * lam
    return l_mse + l_dsm * lam


def batch_loss(
    model,
    items: Sequence[tuple[Complex, bool]],
    mode: str,
    lam: float,
    sigma_range: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[Tensor, LossReport]:
    """Mean losses of one batch under the given training mode.

    ``items`` pairs each complex with whether its label may be used. Labeled
    samples contribute the supervised term at the crystal structure; every
    sample contributes the score matching term at a freshly perturbed copy,
    except in ``mse_only`` mode.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    use_mse = mode != "dsm_only"
    use_dsm = mode != "mse_only"
    labeled = [c for c, lab in items if lab and use_mse and c.affinity is not None]
    dsm_items = [c for c, _ in items] if use_dsm else []
    if not labeled and not dsm_items:
        raise ValueError("batch has nothing to train on")

    lo, hi = sigma_range
    records = []
    for c in dsm_items:
        sigma = float(rng.uniform(lo, hi))
        records.append(perturb(c.coords, c.is_ligand, sigma, rng))

    structures = labeled + dsm_items
    coords = [c.coords for c in labeled] + [r.x_tilde for r in records]
    batch = batch_complexes(structures, model.cutoff, coords=coords)
    n_crys_atoms = sum(c.n_atoms for c in labeled)
    parts = []
    if labeled:
        parts.append(Tensor(batch.coords[:n_crys_atoms]))
    x_pert = None
    if dsm_items:
        x_pert = Tensor(batch.coords[n_crys_atoms:], requires_grad=True)
        parts.append(x_pert)
    x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
    e = model.energies(batch, x)

    l_mse = None
    if labeled:
        y = np.array([c.affinity for c in labeled])
        l_mse = ad.mean(ad.square(ad.take(e, slice(0, len(labeled))) - y))

    l_dsm = None
    per_sample = np.zeros(0)
    if dsm_items:
        e_pert = ad.sum_(ad.take(e, slice(len(labeled), None)))
        (g,) = ad.gradient(e_pert, [x_pert], create_graph=True)
        offsets = np.cumsum([0] + [c.n_atoms for c in dsm_items[:-1]])
        rows = np.concatenate([o + r.ligand_index for o, r in zip(offsets, records)])
        owner = np.concatenate([np.full(len(r.ligand_index), i) for i, r in enumerate(records)])
        target = np.concatenate([r.target for r in records])
        diff = ad.gather(g, IndexMap(rows, len(x_pert))) - target
        per = ad.scatter_add(ad.sum_(ad.square(diff), axis=1), IndexMap(owner, len(records)))
        per_sample = per.data.copy()
        l_dsm = ad.mean(per)

    if l_dsm is None:
        total = l_mse
    else:
        total = total_loss(l_mse, l_dsm, lam)
    n_lab = sum(1 for c, lab in items if lab and c.affinity is not None) if use_mse else 0
    report = LossReport(
        l_mse=None if l_mse is None else l_mse.item(),
        l_dsm=0.0 if l_dsm is None else l_dsm.item(),
        total=total.item(),
        lam=float(lam) if use_dsm else 0.0,
        n_labeled=len(labeled),
        n_unlabeled=len(items) - n_lab if use_mse else len(items),
        ids=tuple(c.id for c, _ in items),
        sigmas=tuple(r.sigma for r in records),
        per_sample_dsm=tuple(float(v) for v in per_sample),
    )
    return total, report
