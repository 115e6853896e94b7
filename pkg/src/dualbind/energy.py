"""Scalar interaction energy from pairwise ligand-protein terms.

``E = sum over ligand i, protein j with d_ij < cutoff of
pair_mlp(H_i, H_j, rbf(d_ij)) * envelope(d_ij)``. The pair MLP's first layer
is applied as three separate projections, which is the same linear map as
projecting the concatenated input and avoids materialising it per pair.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .batch import Batch, make_batch
from .data import FEATURE_DIM
from .encoder import N_RBF, EncoderParams, distances, encode_batch, envelope, rbf

CHECKPOINT_MAGIC = "DUALBIND-CKPT-1"


class NoInteractionWarning(UserWarning):
    """No ligand-protein pair lies inside the cutoff; the energy is exactly 0."""


class CheckpointError(ValueError):
    pass


class EnergyModel:
    def __init__(
        self,
        feature_dim: int = FEATURE_DIM,
        hidden: int = 64,
        layers: int = 2,
        cutoff: float = 10.0,
        seed: int = 0,
    ):
        if cutoff <= 0:
            raise ValueError("cutoff must be positive")
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.layers = layers
        self.cutoff = float(cutoff)
        self.encoder = EncoderParams(feature_dim, hidden, layers, rng=rng)
        h = hidden

        def w(fan_in, fan_out, scale=1.0):
            return Tensor(rng.normal(0.0, scale / np.sqrt(fan_in), (fan_in, fan_out)), requires_grad=True)

        self.head = {
            "head.lig": w(h, h),
            "head.prot": w(h, h),
            "head.rbf": w(N_RBF, h),
            "head.bias": Tensor(np.zeros(h), requires_grad=True),
            "head.out_w": w(h, 1, scale=0.1),
            "head.out_b": Tensor(np.zeros(1), requires_grad=True),
        }

    # -- parameters --------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.tensors, **self.head}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(arrays) != set(params):
            raise CheckpointError("parameter names do not match the model")
        for k, t in params.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise CheckpointError(f"{k}: shape {arr.shape} != {t.shape}")
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"{k}: non-finite values")
            t.data = arr.copy()

    def config(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "hidden": self.hidden,
            "layers": self.layers,
            "cutoff": self.cutoff,
        }

    # -- forward -------------------------------------------------------------
    def energies(self, batch: Batch, x: Tensor | None = None) -> Tensor:
        """Energies of every complex in ``batch``, shape (B,)."""
        x = Tensor(batch.coords) if x is None else x
        if x.shape != batch.coords.shape:
            raise ValueError(f"coordinates {x.shape} do not match batch {batch.coords.shape}")
        if batch.n_pairs == 0:
            zero = ad.sum_(x, axis=1) * 0.0
            return ad.scatter_add(zero, batch.atom_map)
        hmat = encode_batch(self.encoder, batch, x)
        p = self.head
        d = distances(x, batch.pl_map, batch.pp_map)
        hidden = ad.tanh(
            ad.gather(ad.matmul(hmat, p["head.lig"]), batch.pl_map)
            + ad.gather(ad.matmul(hmat, p["head.prot"]), batch.pp_map)
            + ad.matmul(rbf(d), p["head.rbf"])
            + p["head.bias"]
        )
        terms = ad.matmul(hidden, p["head.out_w"]) + p["head.out_b"]
        terms = terms * ad.reshape(envelope(d, self.cutoff), (-1, 1))
        return ad.reshape(ad.scatter_add(terms, batch.pair_complex), (batch.n_complexes,))

    def predict(self, complexes, batch_size: int = 32) -> np.ndarray:
        """Energies of crystal structures without recording a graph."""
        from .batch import batch_complexes

        out = []
        with ad.no_grad():
            for start in range(0, len(complexes), batch_size):
                chunk = complexes[start : start + batch_size]
                out.append(self.energies(batch_complexes(chunk, self.cutoff)).data.copy())
        return np.concatenate(out) if out else np.zeros(0)

    # -- persistence ---------------------------------------------------------
    def save(self, path, meta: dict | None = None) -> None:
        payload = {
            "magic": CHECKPOINT_MAGIC,
            "config": self.config(),
            "meta": meta or {},
            "params": {
                k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()}
                for k, v in self.named_parameters().items()
            },
        }
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(payload, fh)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> tuple["EnergyModel", dict]:
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a JSON checkpoint ({exc.msg})") from None
        if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: missing {CHECKPOINT_MAGIC} header")
        try:
            model = cls(**payload["config"])
            arrays = {
                k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                for k, v in payload["params"].items()
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: malformed checkpoint ({exc!r})") from None
        model.load_arrays(arrays)
        return model, payload.get("meta", {})


def _single(model: EnergyModel, A, X) -> tuple[Batch, Tensor]:
    a = np.asarray(A.data if isinstance(A, Tensor) else A, dtype=np.float64)
    x = X if isinstance(X, Tensor) else Tensor(X)
    batch = make_batch([a], [x.data], model.cutoff)
    if not batch.is_ligand.any() or batch.is_ligand.all():
        raise ValueError("complex needs at least one ligand and one protein atom")
    return batch, x


def energy(model: EnergyModel, A, X) -> Tensor:
    """Scalar energy of one complex; graph-linked through ``X`` and the parameters."""
    batch, x = _single(model, A, X)
    if batch.n_pairs == 0:
        warnings.warn("no ligand-protein pair within cutoff", NoInteractionWarning, stacklevel=2)
    return ad.reshape(model.energies(batch, x), ())


def energy_grad_ligand(model: EnergyModel, A, X, create_graph: bool = False) -> Tensor:
    """``dE/dX`` restricted to ligand rows, shape (n_lig, 3)."""
    coords = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    x = Tensor(coords, requires_grad=True)
    batch, _ = _single(model, A, x)
    e = ad.sum_(model.energies(batch, x))
    (g,) = ad.gradient(e, [x], create_graph=create_graph)
    if create_graph:
        return ad.gather(g, batch.ligand_map)
    out = Tensor(g.data[batch.ligand_rows])
    out.from_detached_grad = True
    return out
