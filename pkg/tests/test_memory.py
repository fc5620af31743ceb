import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frame_ssl import tensor as T
from frame_ssl.memory import MemoryAttention, MemoryBank, MemoryEntry, memory_attend, push
from frame_ssl.nn import ConfigError
from frame_ssl.tensor import ContractError, DimensionError, Tensor

from gradcheck import max_grad_error

D, N = 8, 4


def params(capacity=5, radius=0.0, seed=0, std=0.3):
    return MemoryAttention(D, N, capacity, mem_dim=8, heads=2, mlp_ratio=2.0, seed=seed, std=std, radius=radius)


def frame(rng):
    return Tensor(rng.standard_normal((N, D)))


def test_fifo_keeps_last_five(rng):
    p = params()
    bank = MemoryBank(5)
    for t in range(1, 8):
        push(bank, frame(rng), t, p)
    assert bank.timestamps == [3, 4, 5, 6, 7]


def test_single_push(rng):
    bank = push(MemoryBank(5), frame(rng), 1, params())
    assert len(bank) == 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=0, max_size=30), st.integers(0, 7))
def test_fifo_law(gaps, capacity):
    bank = MemoryBank(capacity)
    stamps, t = [], 0
    for g in gaps:
        t += g
        stamps.append(t)
        bank.append(MemoryEntry(Tensor(np.zeros((1, 1))), t))
    keep = min(len(stamps), capacity)
    assert bank.timestamps == (stamps[len(stamps) - keep:] if keep else [])


def test_timestamps_must_increase(rng):
    p = params()
    bank = push(MemoryBank(5), frame(rng), 3, p)
    with pytest.raises(ContractError):
        push(bank, frame(rng), 3, p)
    zero = push(MemoryBank(0), frame(rng), 3, p)
    with pytest.raises(ContractError):
        push(zero, frame(rng), 2, p)


def test_negative_capacity():
    with pytest.raises(ConfigError):
        MemoryBank(-1)


def test_zero_projection_stores_position_embedding(rng):
    p = params()
    p.proj.weight.data[:] = 0
    bank = push(MemoryBank(5), frame(rng), 1, p)
    np.testing.assert_array_equal(bank.entries[0].tokens.data, p.pos_spatial.data)


@pytest.mark.parametrize("radius", [0.0, 1.0, None])
def test_output_shape_any_fill_level(rng, radius):
    p = params(radius=radius)
    bank = MemoryBank(5)
    for t in range(1, 8):
        out = memory_attend(bank, frame(rng), p)
        assert out.shape == (N, D)
        push(bank, frame(rng), t, p)


def test_batched_attend(rng):
    p = params()
    bank = MemoryBank(5)
    push(bank, Tensor(rng.standard_normal((3, N, D))), 1, p)
    assert memory_attend(bank, Tensor(rng.standard_normal((3, N, D))), p).shape == (3, N, D)


@pytest.mark.parametrize("radius", [0.0, None])
def test_duplicate_memory_matches_empty_bank(rng, radius):
    p = params(radius=radius)
    p.consolidate.weight.data = np.eye(8)
    p.consolidate.bias.data[:] = 0
    p.pos_temporal.data[:] = 0
    cur = frame(rng)
    empty = memory_attend(MemoryBank(5), cur, p).data
    bank = MemoryBank(5)
    for t in range(1, 4):
        push(bank, cur, t, p)
    full = memory_attend(bank, cur, p).data
    np.testing.assert_allclose(full, empty, atol=1e-12)


def test_memory_changes_output(rng):
    p = params()
    cur = frame(rng)
    empty = memory_attend(MemoryBank(5), cur, p).data
    bank = push(MemoryBank(5), frame(rng), 1, p)
    assert np.linalg.norm(memory_attend(bank, cur, p).data - empty) > 0


def test_in_place_path_equals_masked_path(rng):
    fast = params(radius=0.0, seed=3)
    masked = params(radius=0.5, seed=3)
    bank_a, bank_b = MemoryBank(5), MemoryBank(5)
    for t in range(1, 4):
        x = frame(rng)
        push(bank_a, x, t, fast)
        push(bank_b, x, t, masked)
    cur = frame(rng)
    np.testing.assert_allclose(memory_attend(bank_a, cur, fast).data, memory_attend(bank_b, cur, masked).data,
                               atol=1e-12)


def test_locality_bias_pattern():
    p = params(radius=1.0)
    bias = p.locality_bias(2)
    assert bias.shape == (N, 2 * N)
    # 2x2 grid: diagonal neighbours are sqrt(2) apart and hidden at radius 1
    assert bias[0, 3] == -np.inf and bias[0, 1] == 0.0 and bias[0, 4] == 0.0


def test_radius_validation():
    with pytest.raises(ConfigError):
        params(radius=-1.0)
    with pytest.raises(ConfigError):
        MemoryAttention(D, 6, 5, 8, 2, radius=1.0)


def test_patch_count_mismatch(rng):
    p = params()
    bank = push(MemoryBank(5), frame(rng), 1, p)
    with pytest.raises(DimensionError):
        memory_attend(bank, Tensor(rng.standard_normal((N + 1, D))), p)


def test_bank_larger_than_parameters(rng):
    small = params(capacity=1)
    big = params(capacity=3)
    bank = MemoryBank(3)
    for t in range(1, 4):
        push(bank, frame(rng), t, big)
    with pytest.raises(ConfigError):
        memory_attend(bank, frame(rng), small)


@pytest.mark.parametrize("radius", [0.0, None])
def test_memory_path_gradients(rng, radius):
    p = params(capacity=2, radius=radius, std=0.3)
    past = [rng.standard_normal((N, D)) for _ in range(2)]
    cur = Tensor(rng.standard_normal((N, D)), requires_grad=True)
    w = Tensor(rng.standard_normal((N, D)))

    def loss():
        bank = MemoryBank(2)
        for t, y in enumerate(past, 1):
            push(bank, Tensor(y), t, p)
        return T.sum(memory_attend(bank, cur, p) * w)

    probe = dict(p.named_parameters("mem."))
    probe["current"] = cur
    err, where = max_grad_error(loss, probe, max_entries=12)
    assert err <= 1e-4, where
