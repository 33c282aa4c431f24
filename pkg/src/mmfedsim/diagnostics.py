"""Missing-modality diagnostics and the component ablation harness."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .data import ModalitySpec, channel_slices, pooled_test_set
from .engine import FLConfig, ablation_configs, predict_logits, run_federation
from .errors import DimensionError
from .metrics import EvalResult, macro_f1
from .nn.losses import log_softmax
from .nn.model import ArchSpec, ModelState, forward

__all__ = [
    "EvalResult",
    "macro_f1",
    "DiagnosticCurve",
    "missing_subsets",
    "entropy_vs_missing",
    "embedding_distance_curve",
    "mean_curve",
    "AblationRow",
    "ablation_suite",
    "mirl_pair",
    "write_curve_csv",
]

MAX_SUBSETS = 256


@dataclass(frozen=True)
class DiagnosticCurve:
    """Per-d summaries, where d is the number of masked modalities."""

    x: tuple
    y_entropy: tuple = ()
    y_f1: tuple = ()
    y_embed_dist: tuple = ()

    def __post_init__(self):
        xs = tuple(int(v) for v in self.x)
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("x must be strictly increasing")
        object.__setattr__(self, "x", xs)
        for name in ("y_entropy", "y_f1", "y_embed_dist"):
            ys = tuple(float(v) for v in getattr(self, name))
            if ys and len(ys) != len(xs):
                raise ValueError(f"{name} has {len(ys)} points, x has {len(xs)}")
            object.__setattr__(self, name, ys)


def missing_subsets(
    modality_ids: Sequence[int], d: int, rng: Optional[np.random.Generator] = None
) -> list[tuple]:
    """Modality sets to drop for a given d.

    All combinations are returned when there are at most 256 of them;
    otherwise 256 distinct ones are drawn uniformly.
    """
    ids = tuple(modality_ids)
    total = math.comb(len(ids), d)
    if total <= MAX_SUBSETS:
        return list(itertools.combinations(ids, d))
    rng = rng if rng is not None else np.random.default_rng(0)
    chosen: set = set()
    while len(chosen) < MAX_SUBSETS:
        pick = rng.choice(len(ids), size=d, replace=False)
        chosen.add(tuple(sorted(ids[i] for i in pick)))
    return sorted(chosen)


def _mask(x: np.ndarray, slices: dict, dropped: Sequence[int]) -> np.ndarray:
    out = np.array(x, dtype=np.float64)
    for mid in dropped:
        out[:, slices[mid], :] = 0.0
    return out


def entropy_vs_missing(
    model: ModelState,
    x_test: np.ndarray,
    y_test: np.ndarray,
    modalities: Sequence[ModalitySpec],
    rng: Optional[np.random.Generator] = None,
) -> DiagnosticCurve:
    """Mean prediction entropy and macro-F1 with d = 0..M-1 modalities zeroed.

    Each point averages over the masked subsets of that size; ``x_test`` must
    hold complete samples.
    """
    slices = channel_slices(modalities)
    ids = sorted(slices)
    ds, ent, f1 = [], [], []
    for d in range(len(ids)):
        hs, fs = [], []
        for dropped in missing_subsets(ids, d, rng):
            logp = log_softmax(predict_logits(model, _mask(x_test, slices, dropped)))
            hs.append(float(-(np.exp(logp) * logp).sum(axis=1).mean()))
            fs.append(macro_f1(logp.argmax(axis=1), y_test, model.arch.num_classes).macro_f1)
        ds.append(d)
        ent.append(float(np.mean(hs)))
        f1.append(float(np.mean(fs)))
    return DiagnosticCurve(tuple(ds), y_entropy=tuple(ent), y_f1=tuple(f1))


def _projections(model: ModelState, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    return np.concatenate([forward(model, x[i : i + chunk]).projections for i in range(0, len(x), chunk)])


def _distance(a: np.ndarray, b: np.ndarray, metric: str) -> float:
    if metric == "euclidean":
        return float(np.linalg.norm(a - b, axis=1).mean())
    if metric == "cosine":
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        denom = np.where(na * nb > 0, na * nb, 1.0)
        return float((1.0 - (a * b).sum(axis=1) / denom).mean())
    raise ValueError(f"unknown metric {metric!r}")


def _distance_curve(model, x, slices, ids, metric, rng) -> DiagnosticCurve:
    base = _projections(model, x)
    ds, dist = [], []
    for d in range(len(ids)):
        if d == 0:
            vals = [0.0]
        else:
            vals = [
                _distance(base, _projections(model, _mask(x, slices, dropped)), metric)
                for dropped in missing_subsets(ids, d, rng)
            ]
        ds.append(d)
        dist.append(float(np.mean(vals)))
    return DiagnosticCurve(tuple(ds), y_embed_dist=tuple(dist))


def embedding_distance_curve(
    model_with: ModelState,
    model_without: ModelState,
    x_test: np.ndarray,
    modalities: Sequence[ModalitySpec],
    metric: str = "euclidean",
    rng_seed: int = 0,
) -> tuple[DiagnosticCurve, DiagnosticCurve]:
    """Mean distance between projections of complete and d-masked inputs.

    Returns ``(curve_with, curve_without)``; both models must share an arch.
    """
    if model_with.arch != model_without.arch:
        raise DimensionError("models must share an architecture")
    slices = channel_slices(modalities)
    ids = sorted(slices)
    return (
        _distance_curve(model_with, x_test, slices, ids, metric, np.random.default_rng(rng_seed)),
        _distance_curve(model_without, x_test, slices, ids, metric, np.random.default_rng(rng_seed)),
    )


def mean_curve(curves: Sequence[DiagnosticCurve]) -> DiagnosticCurve:
    if not curves:
        raise ValueError("no curves to average")
    x = curves[0].x
    if any(c.x != x for c in curves):
        raise ValueError("curves have different x grids")

    def avg(name):
        cols = [getattr(c, name) for c in curves]
        if not all(cols):
            return ()
        return tuple(float(v) for v in np.mean(np.array(cols), axis=0))

    return DiagnosticCurve(x, avg("y_entropy"), avg("y_f1"), avg("y_embed_dist"))


CURVE_COLUMNS = ("label", "variant", "d", "entropy", "f1", "embed_dist")


def write_curve_csv(path, rows) -> None:
    """``rows`` holds ``(label, variant, DiagnosticCurve)`` triples; blank cells for absent series."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for label, variant, curve in rows:
            for i, d in enumerate(curve.x):
                cells = [format(ys[i], ".17g") if ys else "" for ys in (curve.y_entropy, curve.y_f1, curve.y_embed_dist)]
                w.writerow([label, variant, d] + cells)


@dataclass(frozen=True)
class AblationRow:
    name: str
    use_mirl: bool
    use_mqaa: bool
    use_gakd: bool
    macro_f1: float
    final_state: ModelState


def ablation_suite(population, base_cfg: FLConfig, arch: ArchSpec, test_set=None) -> list[AblationRow]:
    """Train the four component configurations on the same population and seed."""
    test_set = test_set if test_set is not None else pooled_test_set(population)
    rows = []
    for name, cfg in ablation_configs(base_cfg):
        reports = run_federation(population, cfg, arch, test_set=test_set)
        is_flism = cfg.strategy == "flism"
        rows.append(
            AblationRow(
                name,
                is_flism and cfg.use_mirl,
                is_flism and cfg.use_mqaa,
                is_flism and cfg.use_gakd,
                reports[-1].macro_f1,
                reports[-1].global_state,
            )
        )
    return rows


def mirl_pair(cfg: FLConfig) -> tuple[FLConfig, FLConfig]:
    """Configurations that differ only in whether contrastive training is on."""
    with_ = replace(cfg, strategy="flism", use_mirl=True)
    return with_, replace(with_, use_mirl=False)
