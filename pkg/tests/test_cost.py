import csv
import json
import time
from fractions import Fraction

import pytest

from mmfedsim.cost import (
    COST_COLUMNS,
    FusionCostSpec,
    SweepSettings,
    branch_cost,
    count_macs,
    count_params,
    default_speed_table,
    fusion_cost,
    round_seconds,
    scalability_sweep,
    simulate_comm,
    write_cost_table,
)
from mmfedsim.errors import ConfigError, DimensionError
from mmfedsim.nn import ArchSpec, Conv1D, Dense, MaxPool1D, ReLU


def test_count_examples():
    assert count_params([Dense(10, 5)]) == 55
    assert count_params([Conv1D(3, 8, 5)]) == 128
    assert count_macs([Dense(10, 5)]) == 50
    assert count_macs([Conv1D(1, 1, 3)], 5) == 9


def test_default_encoder_hand_tally_at_window_200():
    arch = ArchSpec.default(3, 200, 4)
    # conv 3->32 k8: 32*3*8+32 = 800, length 200 -> 193, pool -> 96
    # conv 32->64 k8: 64*32*8+64 = 16448, length 96 -> 89, pool -> 44
    # dense 64*44=2816 -> 128: 360576; projection 128->64: 8256; classifier 128->4: 516
    assert count_params(arch) == 800 + 16448 + 360576 + 8256 + 516
    # MACs: 193*32*3*8 + 89*64*32*8 + 2816*128 + 128*64 + 128*4
    assert count_macs(arch, 200) == 148224 + 1458176 + 360448 + 8192 + 512


def test_count_macs_too_short():
    with pytest.raises(DimensionError):
        count_macs([Conv1D(1, 1, 5)], 4)
    with pytest.raises(DimensionError):
        count_macs([Conv1D(1, 1, 2), MaxPool1D(4)], 4)


def test_counts_are_additive():
    a = [Conv1D(2, 4, 3), ReLU(), MaxPool1D(2)]
    b = [Conv1D(4, 4, 2, 2), ReLU()]
    assert count_params(a + b) == count_params(a) + count_params(b)
    # the second block sees the length the first one leaves behind: (20-3+1)//2 = 9
    assert count_macs(a + b, 20) == count_macs(a, 20) + count_macs(b, 9)


@pytest.mark.parametrize("m, expected", [(2, 2), (5, 20), (6, 30), (30, 870)])
def test_deep_imputation_model_count(m, expected):
    assert fusion_cost(FusionCostSpec("deep_imputation", num_modalities=m)).models_trained_count == expected


def test_early_fusion_doubling_changes_only_first_layer():
    template = ArchSpec.default(3, 1000, 4)
    small = fusion_cost(FusionCostSpec("early", num_modalities=4, encoder=template))
    big = fusion_cost(FusionCostSpec("early", num_modalities=8, encoder=template))
    first = template.layers[0]
    assert big.params_per_client_round - small.params_per_client_round == first.out_channels * 12 * first.kernel
    assert small.models_trained_count == big.models_trained_count == 1


def test_intermediate_params_affine_with_encoder_slope():
    spec = FusionCostSpec("intermediate")
    ms = list(range(2, 31))
    ps = [Fraction(fusion_cost(FusionCostSpec("intermediate", num_modalities=m)).params_per_client_round)
          for m in ms]
    mbar = Fraction(sum(ms), len(ms))
    pbar = sum(ps) / len(ps)
    slope = sum((m - mbar) * (p - pbar) for m, p in zip(ms, ps)) / sum((m - mbar) ** 2 for m in ms)
    encoder = count_params(spec.encoder.with_input_channels(3).layers)
    assert abs(float(slope) - encoder) < 1e-9
    residuals = [p - (pbar + slope * (m - mbar)) for m, p in zip(ms, ps)]
    assert all(r == 0 for r in residuals)
    assert branch_cost(spec)[0] == encoder


def test_early_flat_intermediate_linear():
    early = [fusion_cost(FusionCostSpec("early", num_modalities=m)).params_per_client_round for m in (5, 30)]
    inter = [fusion_cost(FusionCostSpec("intermediate", num_modalities=m)).params_per_client_round for m in (5, 30)]
    assert early[1] / early[0] < 1.10
    assert 5.5 < inter[1] / inter[0] <= 6.0


def test_harmony_phase_counts_more_models():
    plain = fusion_cost(FusionCostSpec("intermediate", num_modalities=5))
    two_stage = fusion_cost(FusionCostSpec("intermediate", num_modalities=5, unimodal_phase_fraction=0.5))
    assert two_stage.models_trained_count == 11
    assert plain.models_trained_count == 6


def test_fusion_spec_errors():
    with pytest.raises(ConfigError):
        FusionCostSpec("late")
    with pytest.raises(ConfigError):
        FusionCostSpec(num_modalities=1)
    with pytest.raises(ConfigError):
        FusionCostSpec(unimodal_phase_fraction=1.5)


# ---------------------------------------------------------------- communication


def test_one_client_sixteen_seconds():
    assert round_seconds(8e6, [(8e6, 8e6)]) == 16.0


def test_round_time_is_slowest_client():
    # 1e6 bytes: 8 Mbit each way; 1.6 Mbps -> 10 s, 8 Mbps -> 2 s
    assert round_seconds(1e6, [(8e6, 8e6), (1.6e6, 1.6e6)]) == pytest.approx(10.0)


def test_comm_linear_in_rounds_and_bytes():
    speeds = [(8e6, 8e6)]
    one = simulate_comm(8e6, speeds, 1, [[0]])
    assert simulate_comm(8e6, speeds, 7, [[0]] * 7) == 7 * one
    assert simulate_comm(16e6, speeds, 7, [[0]] * 7) == 14 * one


def test_comm_monotone_in_speed():
    speeds = default_speed_table(10, seed=1)
    base = simulate_comm(1e6, speeds, 5, 0.5, seed=2)
    faster = list(speeds)
    faster[3] = (speeds[3][0] * 2, speeds[3][1] * 2)
    assert simulate_comm(1e6, faster, 5, 0.5, seed=2) <= base


def test_comm_rejects_bad_speed():
    with pytest.raises(ValueError):
        round_seconds(1.0, [(0.0, 1.0)])
    with pytest.raises(ValueError):
        simulate_comm(1.0, [(1.0, -1.0)], 1, 1.0)


# ---------------------------------------------------------------- sweep


def test_sweep_runtime_and_shape(tmp_path):
    start = time.perf_counter()
    table = scalability_sweep([5, 10, 15, 20, 25, 30], settings=SweepSettings())
    assert time.perf_counter() - start < 5.0
    assert len(table) == 24
    assert table[(5, "AutoFed+")].models_trained_count == 20
    assert table[(30, "AutoFed+")].models_trained_count == 870
    for r in table.values():
        assert min(r.params_per_client_round, r.macs_per_sample, r.bytes_per_round, r.comm_seconds_total) >= 0
    # the same selection schedule is used for every strategy, so comm time follows the bytes
    assert table[(30, "FedMM")].comm_seconds_total > table[(30, "FLISM")].comm_seconds_total

    write_cost_table(table, tmp_path / "c.csv", tmp_path / "c.json")
    with open(tmp_path / "c.csv") as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == COST_COLUMNS
    assert len(rows) == 24
    data = json.loads((tmp_path / "c.json").read_text())
    assert data[0]["M"] == 5 and set(data[0]) == set(COST_COLUMNS)


def test_sweep_rejects_out_of_range():
    with pytest.raises(ConfigError):
        scalability_sweep([1, 5])
    with pytest.raises(ConfigError):
        scalability_sweep([65])
