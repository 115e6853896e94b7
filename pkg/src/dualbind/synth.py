"""Synthetic protein-ligand benchmark with an analytic oracle potential.

A ligand is grown as a bead chain, protein atoms are scattered near the
preferred contact distance around its beads, and the ligand is then relaxed
to a local minimum of the oracle potential, so every generated structure sits
at a stationary point of it. Labels are the negated oracle energy plus
optional noise (higher = stronger binding).

The label distribution is shaped by which candidates are kept: a pool larger
than the requested dataset is generated and complexes are picked to match
quantiles drawn from the target distribution, either an exponential
(``boltzmann``) or a two-component Gaussian mixture. Labels stay an exact
function of structure either way.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.optimize import minimize

from .data import (
    DATASET_FILE,
    MANIFEST_FILE,
    VOCAB,
    Complex,
    Manifest,
    ManifestEntry,
    element_code,
    save_dataset,
    save_manifest,
)

LABEL_DISTRIBUTIONS = ("boltzmann", "gaussian_mixture")

DEFAULT_DEPTHS = {"C": 0.25, "N": 0.35, "O": 0.40, "S": 0.30, "other": 0.20}


@dataclass(frozen=True)
class OraclePotential:
    """Analytic binding energy of a complex.

    The interaction part is ``sum eps_i * [(1 - exp(-a (d - r0)))^2 - 1] * taper(d)``
    over ligand-protein pairs inside the cutoff, where ``eps_i`` is the well
    depth of ligand atom ``i``'s element. A soft-sphere term
    ``k/2 * (d_min - d)^2`` between ligand atoms closer than ``d_min`` keeps
    ligand atoms from collapsing into the same well; it vanishes for a single
    ligand atom, so an isolated pair still bottoms out at ``-eps`` at ``r0``.
    """

    well_depths: dict = field(default_factory=lambda: dict(DEFAULT_DEPTHS))
    r0: float = 3.0
    a: float = 1.5
    cutoff: float = 10.0
    ligand_repulsion: float = 1.0
    ligand_min_distance: float = 2.5

    def __post_init__(self):
        if any(v <= 0 for v in self.well_depths.values()):
            raise ValueError("well depths must be positive")
        if self.cutoff <= self.r0:
            raise ValueError("cutoff must exceed r0")
        if self.ligand_repulsion < 0:
            raise ValueError("ligand_repulsion must be non-negative")

    def depth_of(self, code: int) -> float:
        sym = VOCAB[code]
        return float(self.well_depths.get(sym, self.well_depths["other"]))


def _taper(d, cutoff):
    start = 0.9 * cutoff
    t = np.clip((d - start) / (cutoff - start), 0.0, 1.0)
    s = 0.5 * (1.0 + np.cos(np.pi * t))
    inside = (t > 0.0) & (t < 1.0)
    ds = np.where(inside, -0.5 * np.pi * np.sin(np.pi * t) / (cutoff - start), 0.0)
    return s, ds


def _pair_terms(lig_xyz, prot_xyz, eps, pot: OraclePotential):
    diff = lig_xyz[:, None, :] - prot_xyz[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    inside = d < pot.cutoff
    ex = np.exp(-pot.a * (d - pot.r0))
    morse = (1.0 - ex) ** 2 - 1.0
    dmorse = 2.0 * (1.0 - ex) * pot.a * ex
    s, ds = _taper(d, pot.cutoff)
    e = np.where(inside, eps[:, None] * morse * s, 0.0)
    de_dd = np.where(inside, eps[:, None] * (dmorse * s + morse * ds), 0.0)
    grad_lig = (de_dd / d)[:, :, None] * diff
    return e, grad_lig


def _ligand_terms(lig_xyz, pot: OraclePotential):
    n = len(lig_xyz)
    if n < 2 or pot.ligand_repulsion == 0:
        return 0.0, np.zeros_like(lig_xyz)
    diff = lig_xyz[:, None, :] - lig_xyz[None, :, :]
    d = np.sqrt((diff**2).sum(-1)) + np.eye(n)
    over = np.clip(pot.ligand_min_distance - d, 0.0, None)
    np.fill_diagonal(over, 0.0)
    k = pot.ligand_repulsion
    e = 0.25 * k * float((over**2).sum())
    g = ((-k * over / d)[:, :, None] * diff).sum(axis=1)
    return e, g


def _energy_and_grad(lig_xyz, prot_xyz, eps, pot):
    e, g = _pair_terms(lig_xyz, prot_xyz, eps, pot)
    e_l, g_l = _ligand_terms(lig_xyz, pot)
    return float(e.sum()) + e_l, g.sum(axis=1) + g_l, g


def oracle_energy_coords(coords, is_ligand, elements, pot: OraclePotential) -> float:
    is_ligand = np.asarray(is_ligand, bool)
    coords = np.asarray(coords, np.float64)
    eps = np.array([pot.depth_of(int(c)) for c in np.asarray(elements)[is_ligand]])
    return _energy_and_grad(coords[is_ligand], coords[~is_ligand], eps, pot)[0]


def oracle_energy(c: Complex, pot: OraclePotential | None = None) -> float:
    return oracle_energy_coords(c.coords, c.is_ligand, c.elements, pot or OraclePotential())


def oracle_gradient(c: Complex, pot: OraclePotential | None = None) -> np.ndarray:
    """Closed-form ``dE/dX`` for all atoms, shape (n, 3)."""
    pot = pot or OraclePotential()
    lig = c.is_ligand
    eps = np.array([pot.depth_of(int(e)) for e in c.elements[lig]])
    _, g_lig, pair = _energy_and_grad(c.coords[lig], c.coords[~lig], eps, pot)
    out = np.zeros_like(c.coords)
    out[lig] = g_lig
    out[~lig] = -pair.sum(axis=0)
    return out


@dataclass
class GenConfig:
    n_complexes: int = 200
    protein_atoms: tuple[int, int] = (8, 20)
    ligand_atoms: tuple[int, int] = (4, 10)
    label_distribution: str = "gaussian_mixture"
    label_noise_std: float = 0.0
    seed: int = 0
    n_ligand_types: int | None = None
    pool_factor: int = 4
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    unlabeled_fraction: float = 0.0

    def __post_init__(self):
        self.protein_atoms = tuple(self.protein_atoms)
        self.ligand_atoms = tuple(self.ligand_atoms)
        self.split_fractions = tuple(self.split_fractions)
        if self.n_complexes < 1:
            raise ValueError("n_complexes must be positive")
        lo, hi = self.protein_atoms
        if not 1 <= lo <= hi:
            raise ValueError("protein_atoms must be a positive (low, high) range")
        lo, hi = self.ligand_atoms
        if not 1 <= lo <= hi:
            raise ValueError("ligand_atoms must be a positive (low, high) range")
        if hi > self.protein_atoms[1]:
            raise ValueError("need at least as many protein atoms as ligand atoms")
        if self.label_distribution not in LABEL_DISTRIBUTIONS:
            raise ValueError(f"label_distribution must be one of {LABEL_DISTRIBUTIONS}")
        if self.label_noise_std < 0:
            raise ValueError("label_noise_std must be non-negative")
        if self.pool_factor < 1:
            raise ValueError("pool_factor must be >= 1")
        if not 0.0 <= self.unlabeled_fraction < 1.0:
            raise ValueError("unlabeled_fraction must be in [0, 1)")

    @property
    def ligand_types(self) -> int:
        return self.n_ligand_types or max(4, self.n_complexes // 3)

    @classmethod
    def from_json(cls, obj: dict) -> "GenConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown GenConfig fields: {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LigandTemplate:
    key: str
    elements: tuple[int, ...]


def ligand_library(gcfg: GenConfig) -> list[LigandTemplate]:
    rng = np.random.default_rng([gcfg.seed, 1])
    lo, hi = gcfg.ligand_atoms
    out = []
    for t in range(gcfg.ligand_types):
        n = int(rng.integers(lo, hi + 1))
        # each chemotype leans towards a polar or apolar composition
        polar = rng.uniform(0.0, 1.0)
        probs = np.array([1.0 - polar, polar * 0.5, polar * 0.5, 0.3 * (1 - polar), 0.15])
        probs /= probs.sum()
        elements = tuple(int(e) for e in rng.choice(len(VOCAB), size=n, p=probs))
        out.append(LigandTemplate(f"L{t:03d}", elements))
    return out


class GenerationError(RuntimeError):
    pass


def _ligand_chain(n: int, rng, step: float = 2.8) -> np.ndarray:
    """Branched bead chain with beads at least 2.5 apart, centred at the origin."""
    pts = [np.zeros(3)]
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries > 20000:
            raise GenerationError("could not grow ligand chain")
        base = pts[int(rng.integers(max(0, len(pts) - 2), len(pts)))]
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        p = base + v * step * rng.uniform(0.95, 1.1)
        if all(np.linalg.norm(p - q) > 2.5 for q in pts):
            pts.append(p)
    pts = np.array(pts)
    return pts - pts.mean(axis=0)


def _pocket_around(lig: np.ndarray, n_prot: int, r0: float, rng) -> np.ndarray | None:
    """Protein atoms near distance ``r0`` from random ligand beads."""
    pts: list[np.ndarray] = []
    tries = 0
    while len(pts) < n_prot:
        tries += 1
        if tries > 5000:
            return None
        bead = lig[int(rng.integers(len(lig)))]
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        p = bead + v * (r0 + rng.uniform(-0.3, 0.3))
        if np.sqrt(((lig - p) ** 2).sum(1)).min() < r0 - 0.35:
            continue
        if any(np.linalg.norm(p - q) < 2.2 for q in pts):
            continue
        pts.append(p)
    return np.array(pts)


def relax_ligand(
    lig0: np.ndarray, prot: np.ndarray, eps: np.ndarray, pot: OraclePotential, max_steps: int = 2000
):
    """Quasi-Newton descent on ligand coordinates; returns (coords, max |grad|)."""

    def fun(flat):
        e, g, _ = _energy_and_grad(flat.reshape(-1, 3), prot, eps, pot)
        return e, g.reshape(-1)

    res = minimize(
        fun,
        lig0.reshape(-1),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_steps, "gtol": 1e-7, "ftol": 0.0, "maxcor": 20},
    )
    lig = res.x.reshape(-1, 3)
    _, g = fun(res.x)
    return lig, float(np.abs(g).max())


def acceptable_ligand(lig: np.ndarray, prot: np.ndarray) -> bool:
    if len(lig) > 1:
        dl = np.sqrt(((lig[:, None] - lig[None]) ** 2).sum(-1))
        if dl[np.triu_indices(len(lig), 1)].min() < 1.0:
            return False
    dp = np.sqrt(((lig[:, None] - prot[None]) ** 2).sum(-1))
    return dp.min() > 1.5


def generate_complex(
    gcfg: GenConfig,
    rng: np.random.Generator,
    template: LigandTemplate | None = None,
    pot: OraclePotential | None = None,
    cid: str = "syn",
    max_retries: int = 20,
) -> Complex:
    """One relaxed complex labeled with ``-oracle_energy`` (plus configured noise)."""
    pot = pot or OraclePotential()
    if template is None:
        lib = ligand_library(gcfg)
        template = lib[int(rng.integers(len(lib)))]
    lig_el = np.array(template.elements, dtype=np.int64)
    eps = np.array([pot.depth_of(int(e)) for e in lig_el])
    n_lig = len(lig_el)
    for _ in range(max_retries):
        n_prot = int(rng.integers(max(gcfg.protein_atoms[0], n_lig), gcfg.protein_atoms[1] + 1))
        beads = _ligand_chain(n_lig, rng)
        prot = _pocket_around(beads, n_prot, pot.r0, rng)
        if prot is None:
            continue
        prot_el = rng.choice(len(VOCAB), size=n_prot, p=[0.45, 0.2, 0.2, 0.1, 0.05])
        lig0 = beads + rng.normal(0.0, 0.2, beads.shape)
        lig, gmax = relax_ligand(lig0, prot, eps, pot)
        if gmax < 1e-4 and acceptable_ligand(lig, prot):
            break
    else:
        raise GenerationError(f"{cid}: relaxation failed after {max_retries} attempts")
    coords = np.concatenate([prot, lig])
    elements = np.concatenate([prot_el, lig_el])
    is_ligand = np.concatenate([np.zeros(n_prot, bool), np.ones(n_lig, bool)])
    e = oracle_energy_coords(coords, is_ligand, elements, pot)
    y = -e
    if gcfg.label_noise_std > 0:
        y += float(rng.normal(0.0, gcfg.label_noise_std))
    return Complex(cid, elements, is_ligand, coords, y, template.key)


def _target_labels(gcfg: GenConfig, pool_labels: np.ndarray, n: int, rng) -> np.ndarray:
    q = np.quantile(pool_labels, [0.15, 0.5, 0.9, 0.97])
    if gcfg.label_distribution == "boltzmann":
        scale = (q[2] - q[0]) / 3.0
        out = q[0] + rng.exponential(scale, n)
        # resample the far tail the pool cannot cover
        while np.any(bad := out > q[3]):
            out[bad] = q[0] + rng.exponential(scale, int(bad.sum()))
        return out
    spread = q[2] - q[0]
    centers = np.array([q[0] + 0.35 * spread, q[0] + 0.65 * spread])
    comp = rng.random(n) < 0.45
    return np.where(comp, centers[0], centers[1]) + rng.normal(0.0, 0.14 * spread, n)


def _match(targets: np.ndarray, labels: np.ndarray) -> list[int]:
    order = np.argsort(labels, kind="stable")
    avail = list(order)
    vals = list(labels[order])
    picked = []
    for t in targets:
        k = int(np.searchsorted(vals, t))
        best = None
        for j in (k - 1, k):
            if 0 <= j < len(vals) and (best is None or abs(vals[j] - t) < abs(vals[best] - t)):
                best = j
        picked.append(int(avail.pop(best)))
        vals.pop(best)
    return picked


def assign_splits(keys: list[str], fractions, rng) -> dict[str, str]:
    """Map ligand keys to splits so each split's complex count approximates ``fractions``."""
    counts: dict[str, int] = {}
    for k in keys:
        counts[k] = counts.get(k, 0) + 1
    uniq = sorted(counts)
    rng.shuffle(uniq)
    total = len(keys)
    want_val = fractions[1] * total
    want_test = fractions[2] * total
    got = {"val": 0, "test": 0}
    out = {}
    for k in uniq:
        if got["test"] < want_test:
            split = "test"
        elif got["val"] < want_val:
            split = "val"
        else:
            split = "train"
        out[k] = split
        if split in got:
            got[split] += counts[k]
    return out


def generate_dataset(gcfg: GenConfig, out_dir=None, pot: OraclePotential | None = None):
    """Generate ``gcfg.n_complexes`` complexes and a ligand-disjoint manifest.

    When ``out_dir`` is given, ``dataset.jsonl``, ``manifest.json`` and
    ``gen_config.json`` are written there.
    """
    pot = pot or OraclePotential()
    lib = ligand_library(gcfg)
    n = gcfg.n_complexes
    pool_size = n * gcfg.pool_factor
    pool = []
    for i in range(pool_size):
        rng = np.random.default_rng([gcfg.seed, 2, i])
        tmpl = lib[int(rng.integers(len(lib)))]
        noiseless = GenConfig(**{**gcfg.to_json(), "label_noise_std": 0.0})
        pool.append(generate_complex(noiseless, rng, tmpl, pot, cid=f"cand{i}"))
    labels = np.array([c.affinity for c in pool])

    sel_rng = np.random.default_rng([gcfg.seed, 3])
    if gcfg.pool_factor == 1:
        chosen = list(range(n))
    else:
        chosen = _match(_target_labels(gcfg, labels, n, sel_rng), labels)
    chosen.sort()
    noise_rng = np.random.default_rng([gcfg.seed, 4])
    complexes = []
    for k, i in enumerate(chosen):
        c = pool[i]
        y = c.affinity
        if gcfg.label_noise_std > 0:
            y = y + float(noise_rng.normal(0.0, gcfg.label_noise_std))
        complexes.append(Complex(f"syn{k:04d}", c.elements, c.is_ligand, c.coords, y, c.ligand_key))

    split_rng = np.random.default_rng([gcfg.seed, 5])
    split_of = assign_splits([c.ligand_key for c in complexes], gcfg.split_fractions, split_rng)
    lab_rng = np.random.default_rng([gcfg.seed, 6])
    entries = []
    for c in complexes:
        split = split_of[c.ligand_key]
        labeled = True
        if split == "train" and gcfg.unlabeled_fraction > 0:
            labeled = bool(lab_rng.random() >= gcfg.unlabeled_fraction)
        entries.append(ManifestEntry(c.id, split, labeled))
    manifest = Manifest(entries)
    if out_dir is not None:
        write_dataset_dir(out_dir, complexes, manifest, gcfg)
    return complexes, manifest


def write_dataset_dir(out_dir, complexes, manifest, gcfg: GenConfig | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(complexes, out / DATASET_FILE)
    save_manifest(manifest, out / MANIFEST_FILE)
    if gcfg is not None:
        with open(out / "gen_config.json", "w") as fh:
            json.dump(gcfg.to_json(), fh, indent=1)
            fh.write("\n")


def label_summary(complexes) -> dict:
    y = np.array([c.affinity for c in complexes if c.affinity is not None])
    if y.size == 0:
        return {"n": 0}
    return {
        "n": int(y.size),
        "mean": float(y.mean()),
        "std": float(y.std()),
        "min": float(y.min()),
        "max": float(y.max()),
    }


def exponential_fit_pvalue(labels) -> float:
    """KS p-value of ``labels`` against an exponential shifted to start at their minimum.

    The scale is the moment estimate ``mean - min``. A small p-value means
    the labels do not look Boltzmann-distributed.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.size < 2:
        raise ValueError("need at least 2 labels")
    loc = float(y.min())
    scale = float(y.mean()) - loc
    if scale <= 0:
        return 0.0
    return float(stats.kstest(y, "expon", args=(loc, scale)).pvalue)


__all__ = [
    "OraclePotential",
    "GenConfig",
    "LigandTemplate",
    "GenerationError",
    "oracle_energy",
    "oracle_gradient",
    "generate_complex",
    "generate_dataset",
    "ligand_library",
    "label_summary",
    "exponential_fit_pvalue",
    "element_code",
]
