"""Analytic parameter / MAC counting and communication-time simulation.

Covers three ways of handling many modalities:

* early fusion: one model whose first layer sees every channel,
* intermediate fusion: one encoder per modality plus an attention fusion head
  (optionally preceded by a unimodal-only training phase),
* deep imputation: a cross-modality imputer for every ordered modality pair.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DimensionError
from .nn.layers import Conv1D, Dense, Flatten, MaxPool1D, ReLU
from .nn.model import ArchSpec

FUSIONS = ("early", "intermediate", "deep_imputation")


def _layers_of(arch_or_layers) -> list:
    if isinstance(arch_or_layers, ArchSpec):
        return list(arch_or_layers.layers) + list(arch_or_layers.head_layers())
    return list(arch_or_layers)


def count_params(arch_or_layers) -> int:
    """Trainable parameters; an ``ArchSpec`` includes both heads."""
    total = 0
    for layer in _layers_of(arch_or_layers):
        if isinstance(layer, Conv1D):
            total += layer.out_channels * layer.in_channels * layer.kernel + layer.out_channels
        elif isinstance(layer, Dense):
            total += layer.out_dim * layer.in_dim + layer.out_dim
    return total


def count_macs(arch_or_layers, input_len: Optional[int] = None) -> int:
    """Multiply-accumulates for one sample of length ``input_len``.

    Lengths propagate through strides and pooling; ReLU/pool/flatten are free.
    Heads of an ``ArchSpec`` run on the encoder embedding.
    """
    if isinstance(arch_or_layers, ArchSpec):
        arch = arch_or_layers
        length = input_len if input_len is not None else arch.input_shape[-1]
        encoder_macs = _layer_macs(arch.layers, length)
        heads = sum(h.in_dim * h.out_dim for h in arch.head_layers())
        return encoder_macs + heads
    if input_len is None and not isinstance(_layers_of(arch_or_layers)[0], Dense):
        raise DimensionError("input_len required for convolutional layers")
    return _layer_macs(_layers_of(arch_or_layers), input_len)


def _layer_macs(layers, length) -> int:
    total = 0
    for layer in layers:
        if isinstance(layer, Conv1D):
            if length < layer.kernel:
                raise DimensionError(f"input length {length} shorter than kernel {layer.kernel}")
            length = (length - layer.kernel) // layer.stride + 1
            total += length * layer.out_channels * layer.in_channels * layer.kernel
        elif isinstance(layer, MaxPool1D):
            if length < layer.kernel:
                raise DimensionError(f"input length {length} shorter than pool {layer.kernel}")
            length //= layer.kernel
        elif isinstance(layer, Dense):
            total += layer.in_dim * layer.out_dim
        elif not isinstance(layer, (ReLU, Flatten)):
            raise TypeError(f"unsupported layer {layer!r}")
    return total


def default_imputer(channels: int, hidden: int = 16, kernel: int = 5) -> list:
    """Conv autoencoder stand-in; decoder convs take the place of transposed convs
    (same parameter count per layer)."""
    return [
        Conv1D(channels, hidden, kernel), ReLU(),
        Conv1D(hidden, 2 * hidden, kernel), ReLU(),
        Conv1D(2 * hidden, hidden, kernel), ReLU(),
        Conv1D(hidden, channels, kernel),
    ]


@dataclass
class FusionCostSpec:
    fusion: str = "early"
    num_modalities: int = 6
    per_modality_channels: int = 3
    window_len: int = 1000  # two seconds at 500 Hz
    num_classes: int = 4
    encoder: Optional[ArchSpec] = None  # template, first layer resized per fusion
    fusion_shared_dim: Optional[int] = None  # per-modality Dense before attention
    unimodal_phase_fraction: float = 0.0  # > 0 gives the two-stage (Harmony-like) schedule
    imputer: Optional[list] = None
    bytes_per_param: int = 8

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ConfigError("cost.fusion", f"must be one of {FUSIONS}")
        if self.num_modalities < 2:
            raise ConfigError("cost.num_modalities", "need M >= 2")
        if not 0.0 <= self.unimodal_phase_fraction <= 1.0:
            raise ConfigError("cost.unimodal_phase_fraction", "must be in [0, 1]")
        if self.encoder is None:
            self.encoder = ArchSpec.default(
                self.per_modality_channels, self.window_len, self.num_classes
            )
        if self.imputer is None:
            self.imputer = default_imputer(self.per_modality_channels)


@dataclass
class CostReport:
    params_per_client_round: float
    macs_per_sample: float
    models_trained_count: int
    bytes_per_round: float
    comm_seconds_total: float = 0.0
    params_trained_total: float = 0.0


def _attention_head(d: int, m: int, num_classes: int) -> tuple[int, int]:
    """(params, MACs) of a single-head self-attention block over M tokens + classifier."""
    params = 3 * (d * d + d) + d * num_classes + num_classes
    macs = 3 * m * d * d + 2 * m * m * d + d * num_classes
    return params, macs


def branch_cost(spec: FusionCostSpec) -> tuple[int, int]:
    """(params, MACs) of one per-modality branch in intermediate fusion."""
    enc = spec.encoder.with_input_channels(spec.per_modality_channels)
    params = count_params(enc.layers)
    macs = count_macs(enc.layers, spec.window_len)
    if spec.fusion_shared_dim:
        shared = Dense(enc.encoder_output_dim, spec.fusion_shared_dim)
        params += count_params([shared])
        macs += shared.in_dim * shared.out_dim
    return params, macs


def fusion_cost(spec: FusionCostSpec) -> CostReport:
    m, c = spec.num_modalities, spec.per_modality_channels
    if spec.fusion == "early":
        arch = spec.encoder.with_input_channels(m * c)
        params = count_params(arch)
        macs = count_macs(arch, spec.window_len)
        models = 1
    elif spec.fusion == "intermediate":
        bp, bm = branch_cost(spec)
        d = spec.fusion_shared_dim or spec.encoder.encoder_output_dim
        hp, hm = _attention_head(d, m, spec.num_classes)
        fused_params, fused_macs = m * bp + hp, m * bm + hm
        f = spec.unimodal_phase_fraction
        if f > 0:
            # stage one: every modality encoder with its own linear classifier
            uni_head = Dense(spec.encoder.encoder_output_dim, spec.num_classes)
            uni_params = m * (count_params(spec.encoder.with_input_channels(c).layers)
                              + count_params([uni_head]))
            uni_macs = m * (count_macs(spec.encoder.with_input_channels(c).layers, spec.window_len)
                            + uni_head.in_dim * uni_head.out_dim)
            params = f * uni_params + (1 - f) * fused_params
            macs = f * uni_macs + (1 - f) * fused_macs
            models = 2 * m + 1
        else:
            params, macs = fused_params, fused_macs
            models = m + 1
    else:
        task = spec.encoder.with_input_channels(m * c)
        imp_params = count_params(spec.imputer)
        imp_macs = count_macs(spec.imputer, spec.window_len)
        models = m * (m - 1)
        params = models * imp_params + count_params(task)
        macs = models * imp_macs + count_macs(task, spec.window_len)
    return CostReport(
        params_per_client_round=float(params),
        macs_per_sample=float(macs),
        models_trained_count=int(models),
        bytes_per_round=float(params * spec.bytes_per_param),
    )


# ---------------------------------------------------------------- communication


def round_seconds(bytes_per_client, speeds: Sequence[tuple]) -> float:
    """Synchronous round: slowest selected client's download + upload time.

    ``speeds`` holds ``(upload_bps, download_bps)`` per selected client; bytes
    are converted to bits.
    """
    if np.isscalar(bytes_per_client):
        bytes_per_client = [bytes_per_client] * len(speeds)
    worst = 0.0
    for b, (up, down) in zip(bytes_per_client, speeds):
        if up <= 0 or down <= 0:
            raise ValueError("link speeds must be positive")
        worst = max(worst, 8.0 * b / down + 8.0 * b / up)
    return worst


def selection_schedule(num_clients: int, rounds: int, fraction: float, seed: int) -> list:
    rng = np.random.default_rng(seed)
    n = max(int(math.floor(fraction * num_clients + 1e-9)), 1)
    return [sorted(rng.choice(num_clients, size=n, replace=False).tolist()) for _ in range(rounds)]


def simulate_comm(
    bytes_per_round: Union[float, Mapping[int, float]],
    speeds: Sequence[tuple],
    rounds: int,
    selection: Union[float, Sequence[Sequence[int]]],
    seed: int = 0,
) -> float:
    """Total seconds spent exchanging model updates over ``rounds`` rounds.

    ``selection`` is either the explicit per-round client index lists or a
    fraction, in which case clients are drawn uniformly with ``seed``.
    """
    for up, down in speeds:
        if up <= 0 or down <= 0:
            raise ValueError("link speeds must be positive")
    if isinstance(selection, (int, float)):
        schedule = selection_schedule(len(speeds), rounds, float(selection), seed)
    else:
        schedule = [list(s) for s in selection]
        if len(schedule) != rounds:
            raise ValueError("selection schedule length != rounds")
    total = 0.0
    for chosen in schedule:
        if isinstance(bytes_per_round, Mapping):
            b = [bytes_per_round[k] for k in chosen]
        else:
            b = float(bytes_per_round)
        total += round_seconds(b, [speeds[k] for k in chosen])
    return total


def default_speed_table(num_clients: int, seed: int = 0, up_median=5e6, down_median=20e6,
                        log_sigma: float = 0.5) -> list[tuple]:
    rng = np.random.default_rng(seed)
    up = up_median * np.exp(rng.normal(0, log_sigma, size=num_clients))
    down = down_median * np.exp(rng.normal(0, log_sigma, size=num_clients))
    return list(zip(up.tolist(), down.tolist()))


# ---------------------------------------------------------------- sweeps

STRATEGY_FUSIONS = {
    "FLISM": dict(fusion="early"),
    "FedMM": dict(fusion="intermediate"),
    "Harmony": dict(fusion="intermediate", unimodal_phase_fraction=0.5),
    "AutoFed+": dict(fusion="deep_imputation"),
}


@dataclass
class SweepSettings:
    num_clients: int = 100
    selection_fraction: float = 0.1
    rounds: int = 20
    seed: int = 0
    strategies: tuple = tuple(STRATEGY_FUSIONS)
    harmony_unimodal_fraction: float = 0.5
    extra: dict = field(default_factory=dict)


def scalability_sweep(
    m_range: Sequence[int],
    template: Optional[FusionCostSpec] = None,
    speeds: Optional[Sequence[tuple]] = None,
    rounds: int = 20,
    settings: Optional[SweepSettings] = None,
) -> dict:
    """``{(M, strategy): CostReport}`` over modality counts, one shared selection schedule."""
    settings = settings or SweepSettings(rounds=rounds)
    template = template or FusionCostSpec()
    if speeds is None:
        speeds = default_speed_table(settings.num_clients, settings.seed)
    for m in m_range:
        if not 2 <= m <= 64:
            raise ConfigError("sweep.values", f"M={m} outside [2, 64]")
    schedule = selection_schedule(len(speeds), rounds, settings.selection_fraction, settings.seed)
    table = {}
    for m in m_range:
        for name in settings.strategies:
            kw = dict(STRATEGY_FUSIONS[name])
            if name == "Harmony":
                kw["unimodal_phase_fraction"] = settings.harmony_unimodal_fraction
            spec = FusionCostSpec(
                num_modalities=m,
                per_modality_channels=template.per_modality_channels,
                window_len=template.window_len,
                num_classes=template.num_classes,
                encoder=template.encoder,
                fusion_shared_dim=template.fusion_shared_dim,
                imputer=template.imputer,
                bytes_per_param=template.bytes_per_param,
                **kw,
            )
            report = fusion_cost(spec)
            report.comm_seconds_total = simulate_comm(
                report.bytes_per_round, speeds, rounds, schedule
            )
            report.params_trained_total = report.params_per_client_round * sum(
                len(s) for s in schedule
            )
            table[(m, name)] = report
    return table


COST_COLUMNS = ("M", "strategy", "params", "macs", "models", "comm_seconds")


def cost_rows(table: dict) -> list[dict]:
    return [
        {
            "M": m,
            "strategy": name,
            "params": r.params_per_client_round,
            "macs": r.macs_per_sample,
            "models": r.models_trained_count,
            "comm_seconds": r.comm_seconds_total,
        }
        for (m, name), r in sorted(table.items(), key=lambda kv: (kv[0][0], kv[0][1]))
    ]


def write_cost_table(table: dict, csv_path=None, json_path=None) -> None:
    rows = cost_rows(table)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=COST_COLUMNS)
            w.writeheader()
            for row in rows:
                w.writerow({k: (format(v, ".17g") if isinstance(v, float) else v)
                            for k, v in row.items()})
    if json_path is not None:
        with open(json_path, "w") as f:
            json.dump(rows, f, indent=2, sort_keys=True)
            f.write("\n")


def report_dict(report: CostReport) -> dict:
    return asdict(report)
