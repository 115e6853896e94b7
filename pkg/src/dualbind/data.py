"""Protein-ligand complexes, datasets and split manifests.

Datasets are JSON-lines, one complex per line::

    {"id": "c0", "ligand_key": "L3", "affinity": 6.2,
     "atoms": [{"element": "C", "ligand": true, "pos": [x, y, z]}, ...]}

Manifests are a single JSON object ``{"entries": [{"id", "split", "labeled"}]}``.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOCAB: tuple[str, ...] = ("C", "N", "O", "S", "other")
OTHER = VOCAB.index("other")
FEATURE_DIM = len(VOCAB) + 1
SPLITS = ("train", "val", "test")

DATASET_FILE = "dataset.jsonl"
MANIFEST_FILE = "manifest.json"


class DataError(ValueError):
    """Malformed record or violated data invariant."""


def element_code(symbol: str) -> int:
    try:
        return VOCAB.index(symbol)
    except ValueError:
        return OTHER


@dataclass(frozen=True, eq=False)
class Complex:
    id: str
    elements: np.ndarray  # int codes into VOCAB
    is_ligand: np.ndarray  # bool
    coords: np.ndarray  # (n, 3)
    affinity: float | None = None
    ligand_key: str = ""

    def __post_init__(self):
        object.__setattr__(self, "elements", np.asarray(self.elements, dtype=np.int64))
        object.__setattr__(self, "is_ligand", np.asarray(self.is_ligand, dtype=bool))
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=np.float64))
        for arr in (self.elements, self.is_ligand, self.coords):
            arr.setflags(write=False)
        self.validate()

    @property
    def n_atoms(self) -> int:
        return len(self.elements)

    @property
    def labeled(self) -> bool:
        return self.affinity is not None

    @property
    def ligand_index(self) -> np.ndarray:
        return np.flatnonzero(self.is_ligand)

    @property
    def protein_index(self) -> np.ndarray:
        return np.flatnonzero(~self.is_ligand)

    def validate(self) -> None:
        n = len(self.elements)
        if n < 2:
            raise DataError(f"complex {self.id!r}: fewer than 2 atoms")
        if self.is_ligand.shape != (n,) or self.coords.shape != (n, 3):
            raise DataError(f"complex {self.id!r}: inconsistent atom array shapes")
        if not self.is_ligand.any():
            raise DataError(f"complex {self.id!r}: no ligand atoms")
        if self.is_ligand.all():
            raise DataError(f"complex {self.id!r}: no protein atoms")
        if not np.all(np.isfinite(self.coords)):
            raise DataError(f"complex {self.id!r}: non-finite coordinates")
        if len(np.unique(self.coords, axis=0)) != n:
            raise DataError(f"complex {self.id!r}: coincident atoms")
        if self.affinity is not None and not math.isfinite(self.affinity):
            raise DataError(f"complex {self.id!r}: non-finite affinity")

    def with_coords(self, coords) -> "Complex":
        return Complex(self.id, self.elements, self.is_ligand, coords, self.affinity, self.ligand_key)

    def with_label(self, affinity: float | None) -> "Complex":
        return Complex(self.id, self.elements, self.is_ligand, self.coords, affinity, self.ligand_key)

    def without_label(self) -> "Complex":
        return Complex(self.id, self.elements, self.is_ligand, self.coords, None, self.ligand_key)

    def same_as(self, other: "Complex") -> bool:
        return (
            self.id == other.id
            and self.ligand_key == other.ligand_key
            and self.affinity == other.affinity
            and np.array_equal(self.elements, other.elements)
            and np.array_equal(self.is_ligand, other.is_ligand)
            and np.array_equal(self.coords, other.coords)
        )

    def to_record(self) -> dict:
        atoms = [
            {"element": VOCAB[e], "ligand": bool(lig), "pos": [float(v) for v in pos]}
            for e, lig, pos in zip(self.elements, self.is_ligand, self.coords)
        ]
        return {
            "id": self.id,
            "ligand_key": self.ligand_key,
            "affinity": None if self.affinity is None else float(self.affinity),
            "atoms": atoms,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Complex":
        atoms = rec["atoms"]
        if not isinstance(atoms, list):
            raise DataError("atoms must be a list")
        cid = str(rec["id"])
        if len(atoms) < 2:
            raise DataError(f"complex {cid!r}: fewer than 2 atoms")
        elements = [element_code(a["element"]) for a in atoms]
        is_ligand = [bool(a["ligand"]) for a in atoms]
        coords = [[float(v) for v in a["pos"]] for a in atoms]
        if any(len(p) != 3 for p in coords):
            raise DataError(f"complex {cid!r}: positions must have 3 components")
        affinity = rec.get("affinity")
        return cls(
            id=cid,
            elements=elements,
            is_ligand=is_ligand,
            coords=np.array(coords, dtype=np.float64).reshape(-1, 3),
            affinity=None if affinity is None else float(affinity),
            ligand_key=str(rec.get("ligand_key", "")),
        )


def load_dataset(path) -> list[Complex]:
    """Read a JSON-lines dataset; blank lines are skipped."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: record must be an object")
            try:
                out.append(Complex.from_record(rec))
            except DataError:
                raise
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc!r})") from None
    return out


def dumps_complex(c: Complex) -> str:
    return json.dumps(c.to_record(), separators=(",", ":"))


def save_dataset(complexes: Iterable[Complex], path) -> None:
    with open(path, "w") as fh:
        for c in complexes:
            fh.write(dumps_complex(c))
            fh.write("\n")


def featurize(c: Complex) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-hot element plus ligand flag per atom, coordinates, ligand rows."""
    codes = c.elements
    if codes.size and (codes.min() < 0 or codes.max() >= len(VOCAB)):
        raise DataError(f"complex {c.id!r}: element code outside vocabulary {VOCAB}")
    feats = np.zeros((c.n_atoms, FEATURE_DIM))
    feats[np.arange(c.n_atoms), codes] = 1.0
    feats[:, -1] = c.is_ligand
    return feats, c.coords.copy(), c.ligand_index


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    split: str
    labeled: bool = True


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def ids(self, split: str) -> list[str]:
        return [e.id for e in self.entries if e.split == split]

    def entry(self, cid: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == cid:
                return e
        raise KeyError(cid)

    def to_json(self) -> dict:
        return {"entries": [{"id": e.id, "split": e.split, "labeled": e.labeled} for e in self.entries]}

    @classmethod
    def from_json(cls, obj: dict) -> "Manifest":
        try:
            entries = [
                ManifestEntry(str(e["id"]), str(e["split"]), bool(e.get("labeled", True)))
                for e in obj["entries"]
            ]
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed manifest ({exc!r})") from None
        for e in entries:
            if e.split not in SPLITS:
                raise DataError(f"manifest entry {e.id!r}: unknown split {e.split!r}")
        return cls(entries)


def load_manifest(path) -> Manifest:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: malformed JSON ({exc.msg})") from None
    return Manifest.from_json(obj)


def save_manifest(m: Manifest, path) -> None:
    with open(path, "w") as fh:
        json.dump(m.to_json(), fh, indent=1)
        fh.write("\n")


def validate_manifest(m: Manifest, data: Sequence[Complex]) -> list[str]:
    """Return every violation of the split rules; an empty list means ok.

    Raises ``KeyError`` if an entry names a complex that is not in ``data``.
    """
    by_id = {c.id: c for c in data}
    missing = [e.id for e in m.entries if e.id not in by_id]
    if missing:
        raise KeyError(f"manifest ids not in dataset: {missing[:5]}")

    problems = []
    seen: dict[str, str] = {}
    for e in m.entries:
        if e.id in seen:
            problems.append(f"{e.id}: listed in both {seen[e.id]} and {e.split}")
        else:
            seen[e.id] = e.split
        if e.split in ("val", "test") and not e.labeled:
            problems.append(f"{e.id}: unlabeled entry in {e.split} split")
        if e.labeled and by_id[e.id].affinity is None:
            problems.append(f"{e.id}: marked labeled but has no affinity")

    held_out: dict[str, list[str]] = {}
    for e in m.entries:
        if e.split in ("val", "test"):
            held_out.setdefault(by_id[e.id].ligand_key, []).append(e.id)
    for e in m.entries:
        if e.split == "train":
            clash = held_out.get(by_id[e.id].ligand_key)
            if clash:
                problems.append(
                    f"{e.id}: shares ligand_key {by_id[e.id].ligand_key!r} with held-out {', '.join(clash)}"
                )
    return problems


def load_dir(path) -> tuple[list[Complex], Manifest]:
    """Load ``dataset.jsonl`` and ``manifest.json`` from a dataset directory."""
    path = Path(path)
    return load_dataset(path / DATASET_FILE), load_manifest(path / MANIFEST_FILE)


def split_complexes(data: Sequence[Complex], m: Manifest, split: str) -> list[Complex]:
    by_id = {c.id: c for c in data}
    return [by_id[cid] for cid in m.ids(split)]
