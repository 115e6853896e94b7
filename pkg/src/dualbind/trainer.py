"""Training loop for the supervised, score matching and combined objectives.

Randomness is split into independent streams derived from the run seed:
parameter init, batch shuffling, perturbation noise and the choice of the
labeled subset. Keeping shuffling apart from noise is what lets a combined
run with zero score matching weight retrace a supervised-only run exactly.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Complex, Manifest
from .energy import EnergyModel
from .losses import MODES, batch_loss
from .metrics import EvalReport, evaluate, pearson

CHECKPOINT_NAME = "best.ckpt"
METRICS_NAME = "metrics.csv"
METRICS_HEADER = ("epoch", "l_mse", "l_dsm", "total", "val_pearson")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, ids: Sequence[str], sigmas: Sequence[float], detail: str):
        self.epoch = epoch
        self.ids = tuple(ids)
        self.sigmas = tuple(float(s) for s in sigmas)
        self.detail = detail
        super().__init__(
            f"non-finite {detail} at epoch {epoch}; samples {list(self.ids)}, sigmas "
            f"{[round(s, 6) for s in self.sigmas]}"
        )

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "ids": list(self.ids), "sigmas": list(self.sigmas), "detail": self.detail}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "dual"
    lam: float = 2.0
    sigma_range: tuple[float, float] = (0.1, 1.0)
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_dir: str | None = None
    labeled_fraction: float = 1.0
    hidden: int = 64
    layers: int = 2
    cutoff: float = 10.0
    # +1 regresses the energy onto the label; -1 onto its negation
    target_sign: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sigma_range", tuple(float(s) for s in self.sigma_range))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ValueError(f"sigma_range must satisfy 0 < low <= high, got {self.sigma_range}")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must be in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.hidden < 1 or self.layers < 0:
            raise ValueError("hidden must be >= 1 and layers >= 0")
        if self.target_sign not in (1.0, -1.0):
            raise ValueError("target_sign must be +1 or -1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["sigma_range"] = list(self.sigma_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})


class Adam:
    def __init__(self, params: list[ad.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpochMetrics:
    epoch: int
    l_mse: float | None
    l_dsm: float | None
    total: float
    val_pearson: float = math.nan


@dataclass
class TrainState:
    config: TrainConfig
    model: EnergyModel
    optimizer: Adam
    shuffle_rng: np.random.Generator
    noise_rng: np.random.Generator
    labeled_ids: frozenset
    epoch: int = 0
    best_val_pearson: float = -math.inf
    best_checkpoint_path: str | None = None
    best_arrays: dict | None = None
    checkpoint_epochs: list = field(default_factory=list)
    history: list = field(default_factory=list)


def _rank_key(v: float) -> float:
    return -math.inf if v is None or math.isnan(v) else v


def choose_labeled(manifest: Manifest, data: dict, config: TrainConfig) -> frozenset:
    """Training ids whose labels the run may use.

    ``labeled_fraction`` keeps that share of the labeled training samples;
    the choice depends only on the seed, so every mode trained with the same
    seed sees the same labels.
    """
    ids = sorted(
        e.id for e in manifest.entries if e.split == "train" and e.labeled and data[e.id].affinity is not None
    )
    if config.labeled_fraction >= 1.0 or not ids:
        return frozenset(ids)
    k = max(1, int(round(config.labeled_fraction * len(ids))))
    rng = np.random.default_rng([config.seed, 3])
    return frozenset(ids[i] for i in sorted(rng.choice(len(ids), size=k, replace=False)))


def init_state(config: TrainConfig, manifest: Manifest, data: dict) -> TrainState:
    model = EnergyModel(hidden=config.hidden, layers=config.layers, cutoff=config.cutoff, seed=config.seed)
    return TrainState(
        config=config,
        model=model,
        optimizer=Adam(model.parameters(), config.learning_rate),
        shuffle_rng=np.random.default_rng([config.seed, 1]),
        noise_rng=np.random.default_rng([config.seed, 2]),
        labeled_ids=choose_labeled(manifest, data, config),
    )


def make_batches(manifest: Manifest, data: dict, config: TrainConfig, rng, labeled_ids=None):
    """One epoch of shuffled batches of ``(complex, use_label)`` pairs."""
    if labeled_ids is None:
        labeled_ids = choose_labeled(manifest, data, config)
    train_ids = sorted(e.id for e in manifest.entries if e.split == "train")
    if config.mode == "mse_only":
        pool = [(data[i], True) for i in train_ids if i in labeled_ids]
    elif config.mode == "dsm_only":
        pool = [(data[i], False) for i in train_ids]
    else:
        pool = [(data[i], i in labeled_ids) for i in train_ids]
    if config.mode != "dsm_only" and not any(lab for _, lab in pool):
        raise ValueError(f"no labeled samples for mode {config.mode}")
    if not pool:
        raise ValueError("no training samples")
    order = rng.permutation(len(pool))
    bs = config.batch_size
    return [[pool[j] for j in order[s : s + bs]] for s in range(0, len(pool), bs)]


def _signed(config: TrainConfig, items):
    if config.target_sign == 1.0:
        return items
    return [(c if c.affinity is None else c.with_label(-c.affinity), lab) for c, lab in items]


def train_epoch(state: TrainState, batches) -> tuple[TrainState, EpochMetrics]:
    cfg = state.config
    params = state.model.parameters()
    mse_vals, dsm_vals, tot_vals = [], [], []
    epoch = state.epoch + 1
    for items in batches:
        items = _signed(cfg, items)
        if cfg.mode == "dual" and cfg.lam == 0.0 and any(lab for _, lab in items):
            # the zero-weighted term only gets reported; its graph never reaches the update
            total, rep = batch_loss(state.model, [(c, lab) for c, lab in items if lab], "mse_only", 0.0, cfg.sigma_range, state.noise_rng)
            _, dsm_rep = batch_loss(state.model, items, "dsm_only", 0.0, cfg.sigma_range, state.noise_rng)
            l_dsm, sigmas = dsm_rep.l_dsm, dsm_rep.sigmas
        else:
            total, rep = batch_loss(state.model, items, cfg.mode, cfg.lam, cfg.sigma_range, state.noise_rng)
            l_dsm, sigmas = rep.l_dsm, rep.sigmas
        ids = [c.id for c, _ in items]
        if not math.isfinite(rep.total) or not math.isfinite(l_dsm):
            raise NonFiniteLossError(epoch, ids, sigmas, "loss")
        grads = [g.data for g in ad.gradient(total, params)]
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise NonFiniteLossError(epoch, ids, sigmas, "gradient")
        state.optimizer.step(grads)
        if rep.l_mse is not None:
            mse_vals.append(rep.l_mse)
        if cfg.mode != "mse_only":
            dsm_vals.append(l_dsm)
        tot_vals.append(rep.total)
    state.epoch = epoch
    metrics = EpochMetrics(
        epoch=epoch,
        l_mse=float(np.mean(mse_vals)) if mse_vals else None,
        l_dsm=float(np.mean(dsm_vals)) if dsm_vals else None,
        total=float(np.mean(tot_vals)) if tot_vals else math.nan,
    )
    return state, metrics


def predict_affinity(model: EnergyModel, complexes, target_sign: float = 1.0) -> np.ndarray:
    return target_sign * model.predict(list(complexes))


def validation_pearson(state: TrainState, val: Sequence[Complex]) -> float:
    labeled = [c for c in val if c.affinity is not None]
    if len(labeled) < 2:
        return math.nan
    pred = predict_affinity(state.model, labeled, state.config.target_sign)
    return pearson(pred, [c.affinity for c in labeled])


def checkpoint_meta(state: TrainState, val_pearson: float) -> dict:
    cfg = state.config
    return {
        "mode": cfg.mode,
        "epoch": state.epoch,
        "val_pearson": None if math.isnan(val_pearson) else val_pearson,
        "target_sign": cfg.target_sign,
        "seed": cfg.seed,
        "train_config": cfg.to_json(),
    }


def select_checkpoint(state: TrainState, val_pearson: float) -> TrainState:
    """Keep the parameters when validation Pearson strictly beats the best so far.

    NaN ranks below every finite value, so it never gets selected.
    """
    score = _rank_key(val_pearson)
    if score > state.best_val_pearson:
        state.best_val_pearson = score
        state.best_arrays = state.model.state_arrays()
        state.checkpoint_epochs.append(state.epoch)
        if state.config.checkpoint_dir is not None:
            out = Path(state.config.checkpoint_dir)
            out.mkdir(parents=True, exist_ok=True)
            path = out / CHECKPOINT_NAME
            state.model.save(path, checkpoint_meta(state, val_pearson))
            state.best_checkpoint_path = str(path)
    return state


def _fmt(v) -> str:
    if v is None:
        return "N/A"
    return f"{v:.10g}"


def write_metrics_csv(history: Sequence[EpochMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in history:
            w.writerow([m.epoch, _fmt(m.l_mse), _fmt(m.l_dsm), _fmt(m.total), _fmt(m.val_pearson)])


def split_data(manifest: Manifest, data: dict, split: str) -> list[Complex]:
    return [data[e.id] for e in manifest.entries if e.split == split]


def fit(config: TrainConfig, manifest: Manifest, data: dict, out_dir=None, log=None) -> TrainState:
    """Train for ``config.epochs`` epochs with per-epoch checkpoint selection.

    Afterwards the model holds the selected parameters (the final ones when no
    epoch produced a finite validation Pearson).
    """
    state = init_state(config, manifest, data)
    val = split_data(manifest, data, "val")
    for _ in range(config.epochs):
        batches = make_batches(manifest, data, config, state.shuffle_rng, state.labeled_ids)
        state, metrics = train_epoch(state, batches)
        metrics.val_pearson = validation_pearson(state, val)
        select_checkpoint(state, metrics.val_pearson)
        state.history.append(metrics)
        if log is not None:
            log(metrics)
    if out_dir is not None:
        write_metrics_csv(state.history, Path(out_dir) / METRICS_NAME)
    if state.best_arrays is not None:
        state.model.load_arrays(state.best_arrays)
    return state


@dataclass
class ExperimentReport:
    mode: str
    seeds: tuple[int, ...]
    runs: list[EvalReport]
    labeled_fraction: float = 1.0

    def _vals(self, name):
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.runs])

    def mean_std(self, name) -> tuple[float, float] | None:
        if name == "rmse" and self.mode == "dsm_only":
            return None
        v = self._vals(name)
        return float(v.mean()), float(v.std())

    def to_json(self) -> dict:
        out = {"mode": self.mode, "seeds": list(self.seeds), "labeled_fraction": self.labeled_fraction}
        for name in ("pearson", "rmse", "spearman"):
            ms = self.mean_std(name)
            out[name] = "N/A" if ms is None else {"mean": ms[0], "std": ms[1]}
        out["runs"] = [r.to_json() for r in self.runs]
        return out


def evaluate_model(model: EnergyModel, complexes, mode: str, target_sign: float = 1.0) -> EvalReport:
    labeled = [c for c in complexes if c.affinity is not None]
    if len(labeled) < 2:
        raise ValueError(f"need >= 2 labeled samples for correlations, got {len(labeled)}")
    pred = predict_affinity(model, labeled, target_sign)
    return evaluate(pred, [c.affinity for c in labeled], with_rmse=mode != "dsm_only")


def run_experiment(
    config: TrainConfig, manifest: Manifest, data: dict, split: str = "test", log=None, seeds=None
) -> ExperimentReport:
    """Train with seeds ``seed, seed+1, seed+2`` (or ``seeds``) and evaluate each selected model."""
    seeds = tuple(seeds) if seeds is not None else tuple(config.seed + k for k in range(3))
    test = split_data(manifest, data, split)
    runs = []
    for s in seeds:
        cfg = config.replace(seed=s)
        if config.checkpoint_dir is not None:
            cfg = cfg.replace(checkpoint_dir=str(Path(config.checkpoint_dir) / f"seed{s}"))
        state = fit(cfg, manifest, data, log=log)
        runs.append(evaluate_model(state.model, test, cfg.mode, cfg.target_sign))
    return ExperimentReport(config.mode, seeds, runs, config.labeled_fraction)


def load_train_config(path) -> TrainConfig:
    with open(path) as fh:
        return TrainConfig.from_json(json.load(fh))
