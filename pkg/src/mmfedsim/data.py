"""Multimodal client populations: synthetic generation, CSV I/O, modality dropout.

Early-fusion layout: modality channel blocks are concatenated in ascending
``modality_id`` order, and absent modalities occupy all-zero blocks so every
client shares one input shape.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import AugmentationUnavailable, ConfigError


@dataclass(frozen=True)
class ModalitySpec:
    modality_id: int
    channels: int = 1
    informativeness: float = 1.0
    noise_std: float = 1.0

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("modalities.channels", "must be >= 1")
        if not 0.0 <= self.informativeness <= 1.0:
            raise ConfigError("modalities.informativeness", "must be in [0, 1]")
        if self.noise_std < 0:
            raise ConfigError("modalities.noise_std", "must be >= 0")


def channel_slices(modalities: Sequence[ModalitySpec]) -> dict[int, slice]:
    """Channel range of each modality inside the fused input."""
    out, start = {}, 0
    for m in sorted(modalities, key=lambda m: m.modality_id):
        out[m.modality_id] = slice(start, start + m.channels)
        start += m.channels
    return out


def total_channels(modalities: Sequence[ModalitySpec]) -> int:
    return sum(m.channels for m in modalities)


@dataclass(frozen=True)
class MultimodalSample:
    data: np.ndarray  # [total_channels, window_len]
    label: int
    present_mask: tuple  # bool per modality, in modality_id order


@dataclass(frozen=True, eq=False)
class ClientProfile:
    """One client's local data, kept as stacked arrays for speed.

    ``x``/``y`` is the training set (zero-imputed for absent modalities);
    ``x_test``/``y_test`` is the held-out split with complete modalities.
    """

    client_id: int
    x: np.ndarray
    y: np.ndarray
    available_modalities: tuple
    modalities: tuple  # ModalitySpec, ascending id
    upload_bps: float
    download_bps: float
    x_test: Optional[np.ndarray] = None
    y_test: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.y) < 1:
            raise ConfigError(f"client[{self.client_id}]", "client has no samples")
        if not 1 <= len(self.available_modalities) <= len(self.modalities):
            raise ConfigError(f"client[{self.client_id}]", "bad available modality set")
        if self.upload_bps <= 0 or self.download_bps <= 0:
            raise ConfigError(f"client[{self.client_id}]", "link speeds must be positive")
        for a in (self.x, self.y, self.x_test, self.y_test):
            if a is not None:
                a.flags.writeable = False

    @property
    def n_samples(self) -> int:
        return len(self.y)

    @property
    def num_present(self) -> int:
        return len(self.available_modalities)

    @property
    def present_mask(self) -> tuple:
        return tuple(m.modality_id in self.available_modalities for m in self.modalities)

    @property
    def dataset(self) -> list[MultimodalSample]:
        mask = self.present_mask
        return [MultimodalSample(self.x[i], int(self.y[i]), mask) for i in range(len(self.y))]

    def same_data(self, other: "ClientProfile") -> bool:
        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.client_id == other.client_id
            and tuple(self.available_modalities) == tuple(other.available_modalities)
            and eq(self.x, other.x)
            and eq(self.y, other.y)
            and eq(self.x_test, other.x_test)
            and eq(self.y_test, other.y_test)
        )


@dataclass(frozen=True)
class PopulationConfig:
    num_clients: int = 20
    num_classes: int = 4
    modalities: tuple = ()
    window_len: int = 32
    samples_per_client: tuple = (40, 60)
    test_samples_per_client: int = 12
    incomplete_ratio: float = 0.6
    label_skew: Optional[float] = None
    signal_scale: float = 1.0
    ar_coef: float = 0.5
    phase_jitter: float = 0.5
    upload_median_bps: float = 5e6
    download_median_bps: float = 20e6
    speed_log_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.modalities:
            object.__setattr__(self, "modalities", default_modalities(6))
        mods = tuple(
            m if isinstance(m, ModalitySpec) else ModalitySpec(**m) for m in self.modalities
        )
        object.__setattr__(self, "modalities", tuple(sorted(mods, key=lambda m: m.modality_id)))
        ids = [m.modality_id for m in self.modalities]
        if len(ids) < 2:
            raise ConfigError("population.modalities", "need at least 2 modalities")
        if ids != list(range(len(ids))):
            raise ConfigError("population.modalities", "modality ids must be 0..M-1")
        if not 0.0 <= self.incomplete_ratio <= 1.0:
            raise ConfigError("population.incomplete_ratio", "must be in [0, 1]")
        if self.num_clients < 1:
            raise ConfigError("population.num_clients", "must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("population.num_classes", "must be >= 2")
        lo, hi = self.samples_per_client
        if not 1 <= lo <= hi:
            raise ConfigError("population.samples_per_client", "need 1 <= min <= max")
        if self.test_samples_per_client < 0:
            raise ConfigError("population.test_samples_per_client", "must be >= 0")
        if self.window_len < 1:
            raise ConfigError("population.window_len", "must be >= 1")
        if self.label_skew is not None and self.label_skew <= 0:
            raise ConfigError("population.label_skew", "Dirichlet concentration must be > 0")

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)


def default_modalities(m: int, channels: int = 2) -> tuple:
    """Informativeness spread linearly from 1.0 down to 0.1."""
    if m < 2:
        raise ConfigError("population.modalities", "need at least 2 modalities")
    info = np.linspace(1.0, 0.1, m)
    return tuple(ModalitySpec(j, channels, float(round(info[j], 6)), 1.0) for j in range(m))


def _class_patterns(cfg: PopulationConfig, rng: np.random.Generator):
    """Per (class, modality) frequency and phase shared by every client."""
    m = cfg.num_modalities
    c = cfg.num_classes
    max_cycles = max(2.0, cfg.window_len / 6)
    freqs = np.empty((c, m))
    for j in range(m):
        # distinct frequencies per class within a modality
        freqs[:, j] = rng.permutation(np.linspace(1.0, max_cycles, c))
    phases = rng.uniform(0, 2 * np.pi, size=(c, m))
    return freqs, phases


def _synth(cfg, labels, freqs, phases, rng) -> np.ndarray:
    n = len(labels)
    length = cfg.window_len
    t = np.arange(length) / length
    blocks = []
    for j, spec in enumerate(cfg.modalities):
        amp = spec.informativeness * cfg.signal_scale
        jitter = rng.normal(0, cfg.phase_jitter, size=(n, spec.channels, 1))
        ch_offset = np.arange(spec.channels)[None, :, None] * (np.pi / 3)
        arg = (
            2 * np.pi * freqs[labels, j][:, None, None] * t[None, None, :]
            + phases[labels, j][:, None, None]
            + ch_offset
            + jitter
        )
        signal = amp * np.sin(arg)
        # AR(1) noise scaled to stationary std noise_std
        eta = rng.normal(0, 1, size=(n, spec.channels, length))
        ar = np.empty_like(eta)
        ar[..., 0] = eta[..., 0]
        a = cfg.ar_coef
        innov = math.sqrt(1 - a * a)
        for s in range(1, length):
            ar[..., s] = a * ar[..., s - 1] + innov * eta[..., s]
        blocks.append(signal + spec.noise_std * ar)
    return np.concatenate(blocks, axis=1)


def _labels(rng, n, num_classes, proportions):
    return rng.choice(num_classes, size=n, p=proportions)


def zero_absent(x: np.ndarray, modalities, available) -> np.ndarray:
    slices = channel_slices(modalities)
    out = np.array(x, dtype=np.float64)
    for mid, sl in slices.items():
        if mid not in available:
            out[:, sl, :] = 0.0
    return out


def generate_population(cfg: PopulationConfig) -> list[ClientProfile]:
    """Synthetic clients; identical output for identical ``cfg`` (including seed).

    Sample draws do not depend on ``incomplete_ratio``: for a fixed seed,
    raising the ratio only removes modalities from more clients, and the sets
    of incomplete clients are nested across ratios.
    """
    root = np.random.SeedSequence(cfg.seed)
    task_seq, assign_seq, speed_seq, client_seq = root.spawn(4)
    k, m = cfg.num_clients, cfg.num_modalities
    freqs, phases = _class_patterns(cfg, np.random.default_rng(task_seq))

    assign_rng = np.random.default_rng(assign_seq)
    order = assign_rng.permutation(k)
    # uniform over non-empty proper subsets, encoded as bitmasks 1..2^M-2
    subset_bits = assign_rng.integers(1, 2**m - 1, size=k)
    n_incomplete = int(round(cfg.incomplete_ratio * k))
    incomplete = set(order[:n_incomplete].tolist())

    speed_rng = np.random.default_rng(speed_seq)
    up = cfg.upload_median_bps * np.exp(speed_rng.normal(0, cfg.speed_log_sigma, size=k))
    down = cfg.download_median_bps * np.exp(speed_rng.normal(0, cfg.speed_log_sigma, size=k))

    lo, hi = cfg.samples_per_client
    clients = []
    for cid, seq in enumerate(client_seq.spawn(k)):
        rng = np.random.default_rng(seq)
        if cid in incomplete:
            bits = int(subset_bits[cid])
            available = tuple(j for j in range(m) if bits >> j & 1)
        else:
            available = tuple(range(m))
        if cfg.label_skew is not None:
            props = rng.dirichlet(np.full(cfg.num_classes, cfg.label_skew))
        else:
            props = np.full(cfg.num_classes, 1.0 / cfg.num_classes)
        n = int(rng.integers(lo, hi + 1))
        y = _labels(rng, n, cfg.num_classes, props)
        x = zero_absent(_synth(cfg, y, freqs, phases, rng), cfg.modalities, available)
        n_test = cfg.test_samples_per_client
        y_test = _labels(rng, n_test, cfg.num_classes, props)
        x_test = _synth(cfg, y_test, freqs, phases, rng) if n_test else np.zeros(
            (0, total_channels(cfg.modalities), cfg.window_len)
        )
        clients.append(
            ClientProfile(
                cid, x, y.astype(np.int64), available, cfg.modalities,
                float(up[cid]), float(down[cid]), x_test, y_test.astype(np.int64),
            )
        )
    return clients


def pooled_test_set(population: Sequence[ClientProfile]) -> tuple[np.ndarray, np.ndarray]:
    xs = [c.x_test for c in population if c.x_test is not None and len(c.x_test)]
    ys = [c.y_test for c in population if c.y_test is not None and len(c.y_test)]
    if not xs:
        raise ConfigError("population", "no held-out test samples")
    return np.concatenate(xs), np.concatenate(ys)


# ---------------------------------------------------------------- augmentation


def sample_retain_set(present: Sequence[int], rng: np.random.Generator) -> tuple:
    """Uniformly random non-empty proper subset of ``present`` modality ids."""
    present = tuple(sorted(present))
    m = len(present)
    if m < 2:
        raise AugmentationUnavailable("modality dropout needs >= 2 present modalities")
    bits = int(rng.integers(1, 2**m - 1))
    return tuple(present[i] for i in range(m) if bits >> i & 1)


def modality_dropout(
    batch: np.ndarray,
    present: Sequence[int],
    retain: Sequence[int],
    noise_mu: float,
    noise_sigma: float,
    rng: np.random.Generator,
    modalities: Sequence[ModalitySpec],
) -> np.ndarray:
    """Zero every block outside ``retain`` and add N(mu, sigma^2) noise to the rest.

    ``batch`` is ``[B, channels, length]`` and is not modified.
    """
    retain = set(retain)
    present = set(present)
    if not retain:
        raise ValueError("retain set is empty")
    if not retain < present:
        raise ValueError("retain must be a proper subset of the present modalities")
    return _drop_and_noise(batch, retain, noise_mu, noise_sigma, rng, modalities)


def noise_only(batch, present, noise_mu, noise_sigma, rng, modalities) -> np.ndarray:
    """Augmentation for single-modality clients: noise on present blocks only."""
    return _drop_and_noise(batch, set(present), noise_mu, noise_sigma, rng, modalities)


def _drop_and_noise(batch, retain, mu, sigma, rng, modalities):
    out = np.zeros_like(batch, dtype=np.float64)
    for mid, sl in channel_slices(modalities).items():
        if mid in retain:
            block = batch[:, sl, :]
            out[:, sl, :] = block + rng.normal(mu, sigma, size=block.shape)
    return out


# ------------------------------------------------------------------- CSV I/O


@dataclass
class CsvSchema:
    window_len: int
    modalities: list  # [{"id", "channels", "columns"}]
    label_column: str = "label"
    client_column: str = "client_id"
    split_column: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "CsvSchema":
        d = json.loads(Path(path).read_text())
        return cls.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        try:
            schema = cls(
                window_len=int(d["window_len"]),
                modalities=list(d["modalities"]),
                label_column=d.get("label_column", "label"),
                client_column=d.get("client_column", "client_id"),
                split_column=d.get("split_column"),
            )
        except KeyError as exc:
            raise ConfigError(f"schema.{exc.args[0]}", "missing") from None
        for i, m in enumerate(schema.modalities):
            if len(m.get("columns", [])) != int(m.get("channels", -1)):
                raise ConfigError(f"schema.modalities[{i}]", "columns/channels mismatch")
        return schema

    def to_dict(self) -> dict:
        d = {
            "window_len": self.window_len,
            "modalities": self.modalities,
            "label_column": self.label_column,
            "client_column": self.client_column,
        }
        if self.split_column:
            d["split_column"] = self.split_column
        return d

    def modality_specs(self) -> tuple:
        return tuple(
            ModalitySpec(int(m["id"]), int(m["channels"]))
            for m in sorted(self.modalities, key=lambda m: int(m["id"]))
        )


def schema_for(modalities: Sequence[ModalitySpec], window_len: int) -> CsvSchema:
    return CsvSchema(
        window_len=window_len,
        modalities=[
            {"id": m.modality_id, "channels": m.channels,
             "columns": [f"m{m.modality_id}_c{c}" for c in range(m.channels)]}
            for m in modalities
        ],
        split_column="split",
    )


def export_csv(population: Sequence[ClientProfile], path, schema: CsvSchema) -> None:
    """One row per time step; absent modality cells are left empty."""
    mods = sorted(schema.modalities, key=lambda m: int(m["id"]))
    slices = channel_slices(population[0].modalities)
    header = [schema.client_column, schema.label_column]
    if schema.split_column:
        header.append(schema.split_column)
    for m in mods:
        header.extend(m["columns"])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for client in population:
            splits = [("train", client.x, client.y, client.available_modalities)]
            if client.x_test is not None and len(client.y_test):
                if not schema.split_column:
                    raise ConfigError("schema.split_column", "needed to export test splits")
                splits.append(("test", client.x_test, client.y_test, tuple(slices)))
            for split, xs, ys, avail in splits:
                for x, y in zip(xs, ys):
                    for t in range(x.shape[1]):
                        row = [client.client_id, int(y)]
                        if schema.split_column:
                            row.append(split)
                        for m in mods:
                            sl = slices[int(m["id"])]
                            if int(m["id"]) in avail:
                                row.extend(format(v, ".17g") for v in x[sl, t])
                            else:
                                row.extend([""] * int(m["channels"]))
                        w.writerow(row)


def ingest_csv(
    path,
    schema: CsvSchema,
    speed_seed: int = 0,
    upload_median_bps: float = 5e6,
    download_median_bps: float = 20e6,
) -> list[ClientProfile]:
    """Assemble windows of ``schema.window_len`` consecutive rows per client.

    A modality whose cells are empty for a client's training rows is treated
    as absent (zero block). Link speeds are drawn from the seeded default table.
    """
    mods = schema.modality_specs()
    slices = channel_slices(mods)
    col_mods = {int(m["id"]): m["columns"] for m in schema.modalities}
    rows_by_client: dict[str, dict[str, list]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        needed = [schema.client_column, schema.label_column]
        needed += [c for cols in col_mods.values() for c in cols]
        if schema.split_column:
            needed.append(schema.split_column)
        missing = [c for c in needed if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError("csv.header", f"missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            split = row[schema.split_column] if schema.split_column else "train"
            if split not in ("train", "test"):
                raise ConfigError(f"csv.line{lineno}", f"bad split {split!r}")
            rows_by_client.setdefault(row[schema.client_column], {"train": [], "test": []})[
                split
            ].append((lineno, row))

    width = total_channels(mods)
    rng = np.random.default_rng(speed_seed)
    clients = []
    for idx, (cid, parts) in enumerate(rows_by_client.items()):
        built = {}
        for split, rows in parts.items():
            if len(rows) % schema.window_len:
                raise ConfigError(
                    f"csv.client[{cid}]", f"{split} rows not a multiple of window_len"
                )
            n = len(rows) // schema.window_len
            x = np.zeros((n, width, schema.window_len))
            y = np.zeros(n, dtype=np.int64)
            present_any: set = set()
            for s in range(n):
                window = rows[s * schema.window_len : (s + 1) * schema.window_len]
                labels = {r[schema.label_column] for _, r in window}
                if len(labels) != 1:
                    raise ConfigError(f"csv.line{window[0][0]}", "label changes within a window")
                try:
                    y[s] = int(labels.pop())
                except ValueError:
                    raise ConfigError(f"csv.line{window[0][0]}", "non-integer label") from None
                for mid, cols in col_mods.items():
                    cells = [[r[c] for c in cols] for _, r in window]
                    empty = [all(v == "" for v in row) for row in cells]
                    if all(empty):
                        continue
                    if any(empty) or any(v == "" for row in cells for v in row):
                        raise ConfigError(
                            f"csv.line{window[0][0]}", f"partially empty modality {mid}"
                        )
                    try:
                        block = np.array(cells, dtype=np.float64).T
                    except ValueError:
                        raise ConfigError(
                            f"csv.line{window[0][0]}", f"non-numeric value in modality {mid}"
                        ) from None
                    x[s, slices[mid], :] = block
                    present_any.add(mid)
            built[split] = (x, y, present_any)
        x, y, present = built["train"]
        if len(y) == 0:
            raise ConfigError(f"csv.client[{cid}]", "client has no training samples")
        xt, yt, _ = built["test"]
        try:
            client_id = int(cid)
        except ValueError:
            client_id = idx
        up = upload_median_bps * math.exp(rng.normal(0, 0.5))
        down = download_median_bps * math.exp(rng.normal(0, 0.5))
        clients.append(
            ClientProfile(
                client_id, x, y, tuple(sorted(present)), mods, up, down,
                xt if len(yt) else None, yt if len(yt) else None,
            )
        )
    return clients
