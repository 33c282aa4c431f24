"""Federated rounds: client selection, local updates, aggregation.

Strategies: ``flism`` (supervised-contrastive modality-dropout views,
entropy-weighted aggregation, distillation from the incoming global model),
plus the early-fusion baselines ``fedavg``, ``fedprox`` and ``moon``.

Randomness is keyed, never shared: selection draws from ``(seed, 0)``, model
init from ``(seed, 1)``, and each client update gets its own shuffle and
augmentation streams keyed by ``(seed, round, client_id)``. Client updates are
therefore independent of execution order and may run concurrently.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from .cost import round_seconds
from .data import ClientProfile
from .errors import AugmentationUnavailable, ConfigError, DimensionError
from .metrics import EvalResult, macro_f1
from .nn.losses import log_softmax
from .nn.model import (
    ArchSpec,
    LossSpec,
    ModelState,
    OptimizerConfig,
    backprop,
    composite_loss,
    forward,
    init_model,
    sgd_step,
)

log = logging.getLogger(__name__)

STRATEGIES = ("flism", "fedavg", "fedprox", "moon")
WEIGHTINGS = ("entropy", "samples", "hybrid")
GRANULARITIES = ("round", "batch", "sample")


@dataclass(frozen=True)
class FLConfig:
    rounds: int = 30
    local_epochs: int = 2
    selection_fraction: float = 0.3
    strategy: str = "flism"
    gamma: float = 1.0
    tau_sc: float = 0.07
    tau_kd: float = 2.0
    kd_form: str = "softened"
    mu_prox: float = 0.01
    mu_moon: float = 1.0
    tau_moon: float = 0.5
    optimizer: OptimizerConfig = OptimizerConfig()
    moon_optimizer: OptimizerConfig = OptimizerConfig(0.001, 0.001, 64)
    entropy_floor: float = 1e-3
    # FLISM component switches (ablation)
    use_mirl: bool = True
    use_mqaa: bool = True
    use_gakd: bool = True
    weighting: str = "entropy"  # aggregation weights when use_mqaa
    noise_mu: float = 0.0
    noise_sigma: float = 0.1
    augment_granularity: str = "round"
    ce_on_expanded: bool = False
    bytes_per_param: int = 8
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", str(self.strategy).lower())
        checks = [
            ("fl.rounds", self.rounds >= 1, "must be >= 1"),
            ("fl.local_epochs", self.local_epochs >= 1, "must be >= 1"),
            ("fl.selection_fraction", 0 < self.selection_fraction <= 1, "must be in (0, 1]"),
            ("fl.strategy", self.strategy in STRATEGIES, f"must be one of {STRATEGIES}"),
            ("fl.gamma", self.gamma >= 0, "must be >= 0"),
            ("fl.tau_sc", self.tau_sc > 0, "must be > 0"),
            ("fl.tau_kd", self.tau_kd > 0, "must be > 0"),
            ("fl.tau_moon", self.tau_moon > 0, "must be > 0"),
            ("fl.mu_prox", self.mu_prox >= 0, "must be >= 0"),
            ("fl.mu_moon", self.mu_moon >= 0, "must be >= 0"),
            ("fl.entropy_floor", self.entropy_floor > 0, "must be > 0"),
            ("fl.weighting", self.weighting in WEIGHTINGS, f"must be one of {WEIGHTINGS}"),
            ("fl.augment_granularity", self.augment_granularity in GRANULARITIES,
             f"must be one of {GRANULARITIES}"),
            ("fl.kd_form", self.kd_form in ("softened", "literal"), "softened or literal"),
            ("fl.noise_sigma", self.noise_sigma >= 0, "must be >= 0"),
            ("fl.eval_every", self.eval_every >= 1, "must be >= 1"),
            ("fl.bytes_per_param", self.bytes_per_param > 0, "must be > 0"),
        ]
        for path, ok, msg in checks:
            if not ok:
                raise ConfigError(path, msg)


@dataclass
class ClientUpdateResult:
    client_id: int
    params: ModelState
    quality_weight: float
    local_losses: list  # per epoch: {"sc", "kd", "ce", "total", ...}
    samples_used: int
    mean_entropy: Optional[float] = None

    def __post_init__(self):
        if not (math.isfinite(self.quality_weight) and self.quality_weight > 0):
            raise ValueError(f"quality weight must be finite and > 0, got {self.quality_weight}")


@dataclass
class RoundReport:
    round: int
    strategy: str
    selected: tuple
    weights: dict  # client_id -> normalized aggregation weight
    global_state: ModelState
    eval: Optional[EvalResult]
    comm_seconds: float
    params_trained: int
    quality_weights: dict = field(default_factory=dict)
    mean_losses: dict = field(default_factory=dict)

    @property
    def macro_f1(self) -> float:
        return float("nan") if self.eval is None else self.eval.macro_f1


# ------------------------------------------------------------------ helpers


def predict_logits(model: ModelState, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = [forward(model, x[i : i + chunk]).logits for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.arch.num_classes))


def evaluate(model: ModelState, x: np.ndarray, y: np.ndarray) -> EvalResult:
    logits = predict_logits(model, x)
    return macro_f1(logits.argmax(axis=1), y, model.arch.num_classes)


def entropy_quality_weight(model: ModelState, x: np.ndarray, floor: float = 1e-3):
    """Inverse mean prediction entropy (nats), with the entropy clamped at ``floor``.

    Returns ``(weight, mean_entropy)``.
    """
    if len(x) == 0:
        raise ValueError("entropy needs a non-empty dataset")
    logp = log_softmax(predict_logits(model, x))
    h = float(-(np.exp(logp) * logp).sum(axis=1).mean())
    return 1.0 / max(h, floor), h


def client_rngs(seed: int, rnd: int, client_id: int):
    shuffle = np.random.default_rng([seed, 2, rnd, client_id])
    augment = np.random.default_rng([seed, 3, rnd, client_id])
    return shuffle, augment


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


# ------------------------------------------------------------------ aggregation


def normalized_weights(raw: Sequence[float]) -> np.ndarray:
    """``raw / sum(raw)``, computed after scaling by the max entry.

    The rescaling keeps equal raw weights at exactly ``1/K`` in floating point.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("no weights")
    if not np.isfinite(raw).all() or (raw < 0).any() or raw.max() <= 0:
        raise ValueError(f"aggregation weights must be finite, >= 0, not all 0: {raw}")
    scaled = raw / raw.max()
    total = 0.0
    for v in scaled:
        total += v
    return scaled / total


def weighted_average(states: Sequence[ModelState], weights: Sequence[float]) -> ModelState:
    """``sum_k weights[k] * states[k]`` accumulated left to right."""
    if not states:
        raise ValueError("nothing to aggregate")
    arch = states[0].arch
    for s in states[1:]:
        if s.arch != arch:
            raise DimensionError("cannot aggregate models with different architectures")
    acc = {k: weights[0] * v for k, v in states[0].params.items()}
    for w, s in zip(weights[1:], states[1:]):
        for k in acc:
            acc[k] = acc[k] + w * s.params[k]
    return ModelState(arch, acc, states[0].version_tag)


def _canonical(updates: Sequence[ClientUpdateResult]):
    return sorted(updates, key=lambda u: u.client_id)


def aggregate_with(updates: Sequence[ClientUpdateResult], raw: Sequence[float]):
    """Aggregate with raw (unnormalized) weights given in the order of ``updates``.

    Returns ``(state, {client_id: normalized weight})``.
    """
    pairs = sorted(zip(updates, raw), key=lambda p: p[0].client_id)
    w = normalized_weights([r for _, r in pairs])
    state = weighted_average([u.params for u, _ in pairs], w)
    return state, {u.client_id: float(x) for (u, _), x in zip(pairs, w)}


def aggregate_quality_weighted(updates: Sequence[ClientUpdateResult]) -> ModelState:
    """Convex combination with weights ``r_k / sum r`` from each update's quality weight."""
    return aggregate_with(updates, [u.quality_weight for u in updates])[0]


def aggregate_fedavg(updates: Sequence[ClientUpdateResult]) -> ModelState:
    """Sample-size weighted average ``n_k / sum n``."""
    return aggregate_with(updates, [u.samples_used for u in updates])[0]


# ------------------------------------------------------------------ local updates


def _augment(client: ClientProfile, xb, retain, cfg: FLConfig, rng):
    present = client.available_modalities
    mods = client.modalities
    if len(present) < 2:
        return data_mod.noise_only(xb, present, cfg.noise_mu, cfg.noise_sigma, rng, mods)
    if cfg.augment_granularity == "sample":
        rows = []
        for i in range(len(xb)):
            r = data_mod.sample_retain_set(present, rng)
            rows.append(data_mod.modality_dropout(
                xb[i : i + 1], present, r, cfg.noise_mu, cfg.noise_sigma, rng, mods))
        return np.concatenate(rows)
    if cfg.augment_granularity == "batch":
        retain = data_mod.sample_retain_set(present, rng)
    return data_mod.modality_dropout(xb, present, retain, cfg.noise_mu, cfg.noise_sigma, rng, mods)


def _local_train(
    client: ClientProfile,
    global_state: ModelState,
    cfg: FLConfig,
    rnd: int,
    *,
    mirl: bool = False,
    kd_weight: float = 0.0,
    prox_mu: float = 0.0,
    moon_mu: float = 0.0,
    prev_local: Optional[ModelState] = None,
    optimizer: Optional[OptimizerConfig] = None,
):
    opt = optimizer or cfg.optimizer
    shuffle_rng, aug_rng = client_rngs(cfg.seed, rnd, client.client_id)
    retain = None
    if mirl and cfg.augment_granularity == "round":
        try:
            retain = data_mod.sample_retain_set(client.available_modalities, aug_rng)
        except AugmentationUnavailable:
            retain = None  # noise-only views
    w = global_state
    history = []
    for _ in range(cfg.local_epochs):
        sums: dict[str, float] = {}
        batches = _batches(client.n_samples, opt.batch_size, shuffle_rng)
        for idx in batches:
            xb, yb = client.x[idx], client.y[idx]
            spec = LossSpec(ce_weight=1.0, ce_on_all_rows=cfg.ce_on_expanded)
            x_in, y_in = xb, yb
            if mirl:
                aug = _augment(client, xb, retain, cfg, aug_rng)
                x_in = np.concatenate([xb, aug])
                y_in = np.concatenate([yb, yb])
                spec.supcon_weight = 1.0
                spec.tau_sc = cfg.tau_sc
                spec.n_original = len(xb)
            if kd_weight:
                spec.kd_weight = kd_weight
                spec.tau_kd = cfg.tau_kd
                spec.kd_form = cfg.kd_form
                spec.teacher_logits = forward(global_state, xb).logits
                spec.n_original = len(xb)
            if prox_mu:
                spec.prox_mu = prox_mu
                spec.prox_anchor = global_state
            if moon_mu:
                spec.moon_mu = moon_mu
                spec.tau_moon = cfg.tau_moon
                spec.moon_global = forward(global_state, xb).embeddings
                spec.moon_previous = forward(prev_local or global_state, xb).embeddings
            total, terms, out, dl, dz, dh = composite_loss(w, x_in, y_in, spec)
            grad = backprop(w, out, dl, dz, dh)
            if prox_mu:
                for k, v in w.params.items():
                    grad[k] = grad[k] + prox_mu * (v - global_state.params[k])
            w = sgd_step(w, grad, opt)
            sums["total"] = sums.get("total", 0.0) + total
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
        history.append({k: v / len(batches) for k, v in sums.items()})
    return w, history


def client_update_flism(
    client: ClientProfile, global_state: ModelState, cfg: FLConfig, rnd: int = 1
) -> ClientUpdateResult:
    """Local update with L_SC + gamma * L_KD + L_CE, then the entropy quality weight."""
    kd = cfg.gamma if cfg.use_gakd else 0.0
    w, history = _local_train(client, global_state, cfg, rnd, mirl=cfg.use_mirl, kd_weight=kd)
    r, h = entropy_quality_weight(w, client.x, cfg.entropy_floor)
    return ClientUpdateResult(client.client_id, w, r, history, client.n_samples, h)


def client_update_fedavg(client, global_state, cfg: FLConfig, rnd: int = 1) -> ClientUpdateResult:
    w, history = _local_train(client, global_state, cfg, rnd)
    return ClientUpdateResult(client.client_id, w, float(client.n_samples), history, client.n_samples)


def client_update_fedprox(client, global_state, cfg: FLConfig, rnd: int = 1) -> ClientUpdateResult:
    """Cross-entropy plus ``mu/2 * ||w - W_prev||^2``; weighted by sample count."""
    w, history = _local_train(client, global_state, cfg, rnd, prox_mu=cfg.mu_prox)
    return ClientUpdateResult(client.client_id, w, float(client.n_samples), history, client.n_samples)


def client_update_moon(
    client, global_state, prev_local: Optional[ModelState], cfg: FLConfig, rnd: int = 1
) -> ClientUpdateResult:
    """Cross-entropy plus model-contrastive loss on encoder embeddings.

    Without a stored previous local model the incoming global model stands in.
    """
    w, history = _local_train(
        client, global_state, cfg, rnd,
        moon_mu=cfg.mu_moon, prev_local=prev_local, optimizer=cfg.moon_optimizer,
    )
    return ClientUpdateResult(client.client_id, w, float(client.n_samples), history, client.n_samples)


# ------------------------------------------------------------------ server loop


def num_selected(fraction: float, num_clients: int) -> int:
    return max(int(math.floor(fraction * num_clients + 1e-9)), 1)


def run_federation(
    population: Sequence[ClientProfile],
    cfg: FLConfig,
    arch: ArchSpec,
    *,
    workers: int = 1,
    initial_state: Optional[ModelState] = None,
    test_set: Optional[tuple] = None,
) -> list[RoundReport]:
    """Run ``cfg.rounds`` rounds and return one report per round."""
    if not population:
        raise ConfigError("population", "empty population")
    width = population[0].x.shape[1:]
    if tuple(width) != tuple(arch.input_shape):
        raise DimensionError(f"client data {tuple(width)} does not match arch {arch.input_shape}")
    clients = list(population)
    k_total = len(clients)
    select_rng = np.random.default_rng([cfg.seed, 0])
    state = initial_state or init_model(arch, np.random.default_rng([cfg.seed, 1]))
    x_test, y_test = test_set if test_set is not None else data_mod.pooled_test_set(clients)
    prev_local: dict[int, ModelState] = {}
    n_sel = num_selected(cfg.selection_fraction, k_total)
    model_bytes = state.num_params * cfg.bytes_per_param
    reports = []

    def run_client(client: ClientProfile, t: int, w_prev: ModelState) -> ClientUpdateResult:
        if cfg.strategy == "flism":
            return client_update_flism(client, w_prev, cfg, t)
        if cfg.strategy == "fedavg":
            return client_update_fedavg(client, w_prev, cfg, t)
        if cfg.strategy == "fedprox":
            return client_update_fedprox(client, w_prev, cfg, t)
        return client_update_moon(client, w_prev, prev_local.get(client.client_id), cfg, t)

    for t in range(1, cfg.rounds + 1):
        chosen = sorted(select_rng.choice(k_total, size=n_sel, replace=False).tolist())
        selected = [clients[i] for i in chosen]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                updates = list(pool.map(lambda c: run_client(c, t, state), selected))
        else:
            updates = [run_client(c, t, state) for c in selected]
        updates = _canonical(updates)

        if cfg.strategy == "flism" and cfg.use_mqaa:
            if cfg.weighting == "entropy":
                raw = [u.quality_weight for u in updates]
            elif cfg.weighting == "hybrid":
                raw = [u.quality_weight * u.samples_used for u in updates]
            else:
                raw = [float(u.samples_used) for u in updates]
        else:
            raw = [float(u.samples_used) for u in updates]
        new_state, weights = aggregate_with(updates, raw)
        state = new_state.replace(new_state.params, version_tag=t)
        if cfg.strategy == "moon":
            for u in updates:
                prev_local[u.client_id] = u.params

        ev = None
        if t % cfg.eval_every == 0 or t == cfg.rounds:
            ev = evaluate(state, x_test, y_test)
        comm = round_seconds(model_bytes, [(c.upload_bps, c.download_bps) for c in selected])
        mean_losses = {}
        for key in ("total", "ce", "supcon", "kd", "prox", "moon"):
            vals = [u.local_losses[-1][key] for u in updates if key in u.local_losses[-1]]
            if vals:
                mean_losses[key] = float(np.mean(vals))
        reports.append(
            RoundReport(
                round=t,
                strategy=cfg.strategy,
                selected=tuple(c.client_id for c in sorted(selected, key=lambda c: c.client_id)),
                weights=weights,
                global_state=state,
                eval=ev,
                comm_seconds=comm,
                params_trained=state.num_params * len(selected),
                quality_weights={u.client_id: u.quality_weight for u in updates},
                mean_losses=mean_losses,
            )
        )
        log.debug("round %d %s f1=%s", t, cfg.strategy, None if ev is None else ev.macro_f1)
    return reports


def ablation_configs(base: FLConfig) -> list[tuple[str, FLConfig]]:
    """The four component-wise rows, from plain FedAvg up to the full method."""
    flism = replace(base, strategy="flism", weighting="entropy")
    return [
        ("fedavg_equivalent", replace(base, strategy="fedavg")),
        ("+mirl", replace(flism, use_mirl=True, use_mqaa=False, use_gakd=False)),
        ("+mirl+mqaa", replace(flism, use_mirl=True, use_mqaa=True, use_gakd=False)),
        ("full", replace(flism, use_mirl=True, use_mqaa=True, use_gakd=True)),
    ]
