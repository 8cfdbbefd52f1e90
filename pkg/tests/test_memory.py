import numpy as np
import pytest

from tgforecast.memory import (
    MemoryState,
    assemble_agent_repr,
    init_agent_repr_params,
    init_scene_memory_params,
    init_seq_memory_params,
    run_memory,
    scene_memory_encode,
    scene_memory_update,
    seq_memory_update,
)
from tgforecast.substrate import block, param
from tgforecast.substrate import tensor as T

D = 8


def zero_gru():
    p = {}
    for g in "zrh":
        p[f"W_{g}"] = param(np.zeros((D, D)))
        p[f"U_{g}"] = param(np.zeros((D, D)))
        p[f"b_{g}"] = param(np.zeros(D))
    return p


@pytest.fixture
def store(rng):
    s = {}
    init_seq_memory_params(s, D, rng)
    init_scene_memory_params(s, D, 3, rng)
    init_agent_repr_params(s, D, rng)
    return s


class TestSeqMemory:
    def test_zero(self):
        assert np.array_equal(seq_memory_update(np.zeros(D), np.zeros(D), zero_gru()).data, np.zeros(D))

    def test_half(self, rng):
        h = rng.normal(size=D)
        np.testing.assert_allclose(seq_memory_update(rng.normal(size=D), h, zero_gru()).data, 0.5 * h, atol=1e-15)

    def test_twenty_steps_bounded(self, store, rng):
        h0 = rng.uniform(-2, 2, size=D)
        h = T.Var(h0)
        for _ in range(20):
            h = seq_memory_update(rng.normal(size=D) * 5, h, block(store, "seqmem.gru"))
        assert np.all(np.isfinite(h.data))
        assert np.abs(h.data).max() <= max(np.abs(h0).max(), 1.0) + 1e-12


class TestSceneMemory:
    def test_single_row(self, store, rng):
        p = block(store, "scenemem")
        f = rng.normal(size=(1, D))
        m = f @ p["g0.W"].data.T + p["g0.b"].data
        for layer in range(3):
            m = m @ p[f"layer{layer}.attn.W_V"].data.T
            mu, var = m.mean(-1, keepdims=True), m.var(-1, keepdims=True)
            m = (m - mu) / np.sqrt(var + 1e-5) * p[f"layer{layer}.norm.gain"].data + p[f"layer{layer}.norm.bias"].data
        np.testing.assert_allclose(scene_memory_encode(f, p).data, m[0], atol=1e-12)

    def test_uniformly_duplicated_rows(self, store, rng):
        p = block(store, "scenemem")
        F = rng.normal(size=(3, D))
        a = scene_memory_encode(F, p).data
        b = scene_memory_encode(np.vstack([F, F]), p).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_all_identical_rows_match_single(self, store, rng):
        p = block(store, "scenemem")
        row = rng.normal(size=(1, D))
        np.testing.assert_allclose(scene_memory_encode(np.tile(row, (5, 1)), p).data,
                                   scene_memory_encode(row, p).data, atol=1e-12)

    def test_permutation_invariance(self, store, rng):
        p = block(store, "scenemem")
        F = rng.normal(size=(7, D))
        perm = rng.permutation(7)
        np.testing.assert_allclose(scene_memory_encode(F, p).data, scene_memory_encode(F[perm], p).data, atol=1e-12)

    def test_no_present_rows_is_zero(self, store, rng):
        out = scene_memory_encode(rng.normal(size=(3, D)), block(store, "scenemem"), np.zeros(3, bool))
        assert np.array_equal(out.data, np.zeros(D))

    def test_update_zero(self):
        assert np.array_equal(scene_memory_update(np.zeros(D), np.zeros(D), zero_gru()).data, np.zeros(D))

    def test_separate_grus(self, store):
        assert store["seqmem.gru.W_z"] is not store["scenemem.gru.W_z"]
        assert not np.array_equal(store["seqmem.gru.W_z"].data, store["scenemem.gru.W_z"].data)


def _seq(rng, n=5, t=20):
    return [T.Var(rng.normal(size=(n, D))) for _ in range(t)]


class TestRunMemory:
    def test_seq_reads_only_aoi_row(self, store, rng):
        F_seq = _seq(rng)
        present = np.ones((20, 5), bool)
        a = run_memory(F_seq, 2, present, store)
        other = [T.Var(np.where(np.arange(5)[:, None] == 2, F.data, 0.0)) for F in F_seq]
        b = run_memory(other, 2, present, store)
        assert np.array_equal(a.h_seq.data, b.h_seq.data)
        assert not np.allclose(a.h_mem.data, b.h_mem.data)

    def test_scene_memory_order_invariant(self, store, rng):
        F_seq = _seq(rng)
        present = np.ones((20, 5), bool)
        present[:4, 4] = False
        perm = np.array([3, 0, 4, 2, 1])
        a = run_memory(F_seq, 0, present, store, seq_mem=False)
        b = run_memory([T.Var(F.data[perm]) for F in F_seq], 1, present[:, perm], store, seq_mem=False)
        np.testing.assert_allclose(a.h_mem.data, b.h_mem.data, atol=1e-12)

    def test_toggles(self, store, rng):
        F_seq = _seq(rng)
        mem = run_memory(F_seq, 0, np.ones((20, 5), bool), store, seq_mem=False, scene_mem=False)
        assert mem.h_seq is None and mem.h_mem is None

    def test_twenty_step_rollout_finite(self, store, rng):
        mem = run_memory([T.Var(rng.normal(size=(5, D)) * 20) for _ in range(20)], 0, np.ones((20, 5), bool), store)
        assert np.all(np.isfinite(mem.h_seq.data)) and np.all(np.isfinite(mem.h_mem.data))


class TestAgentRepr:
    def test_width(self, store, rng):
        F = rng.normal(size=(5, D))
        is_lane = np.array([True, True, False, False, False])
        rep = assemble_agent_repr(F, 2, is_lane, np.ones(5, bool), MemoryState(None, None), block(store, "agent"))
        assert rep.enhanced.shape == (3 * D,)
        np.testing.assert_array_equal(rep.enhanced.data[:D], F[2])

    def test_aoi_and_one_lane(self, store, rng):
        F = rng.normal(size=(2, D))
        p = block(store, "agent")
        rep = assemble_agent_repr(F, 1, np.array([True, False]), np.ones(2, bool), MemoryState(None, None), p)
        lane_term = F[0] @ p["xattn_lane.W_V"].data.T
        np.testing.assert_allclose(rep.enhanced.data[2 * D:], lane_term, atol=1e-13)
        assert np.all(np.isfinite(rep.enhanced.data))

    def test_reorder_non_aoi(self, store, rng):
        F = rng.normal(size=(6, D))
        is_lane = np.array([True, False, True, False, True, False])
        p = block(store, "agent")
        a = assemble_agent_repr(F, 1, is_lane, np.ones(6, bool), MemoryState(None, None), p).enhanced.data
        perm = np.array([4, 1, 0, 5, 2, 3])
        b = assemble_agent_repr(F[perm], 1, is_lane[perm], np.ones(6, bool), MemoryState(None, None), p).enhanced.data
        np.testing.assert_allclose(a, b, atol=1e-13)

    def test_no_lanes_flagged_zero(self, store, rng):
        F = rng.normal(size=(3, D))
        rep = assemble_agent_repr(F, 0, np.zeros(3, bool), np.ones(3, bool), MemoryState(None, None), block(store, "agent"))
        assert rep.lane_context_empty
        assert np.array_equal(rep.enhanced.data[2 * D:], np.zeros(D))

    def test_composite_slices(self, store, rng):
        h1, h2 = T.Var(rng.normal(size=D)), T.Var(rng.normal(size=D))
        rep = assemble_agent_repr(rng.normal(size=(3, D)), 0, np.array([False, True, True]), np.ones(3, bool),
                                  MemoryState(h1, h2), block(store, "agent"))
        comp = rep.composite().data
        assert comp.shape == (5 * D,)
        np.testing.assert_array_equal(comp[3 * D:4 * D], h1.data)
        np.testing.assert_array_equal(comp[4 * D:], h2.data)
        rep.h_seq = None
        assert rep.composite().shape == (4 * D,)
