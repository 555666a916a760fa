import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_graph
from hcg.errors import BadK, BadThresholds, NoFeasibleK, ShapeMismatch
from hcg.graph import EDGE_TYPES, SyntheticSpec, build_csr, generate_synthetic
from hcg.model import init_layer, layer_backward, layer_forward
from hcg.partition import HIGH, LOW, MEDIUM, default_k_by_bucket
from hcg.scheduler import (
    K_CANDIDATES,
    KProfile,
    PipelineInputs,
    bucket_rows,
    build_partition_plan,
    plan_for,
    profile_k,
    run_pipeline,
    select_k,
)


def star_rows(degrees, n_cols=400):
    return build_csr(len(degrees), n_cols, [(i, j, 1.0) for i, d in enumerate(degrees) for j in range(d)])


def pipeline_inputs(g, seed, k=None):
    rng = np.random.default_rng(seed)
    d = g.d_cell
    k = k or {et: int(rng.integers(1, d + 1)) for et in EDGE_TYPES}
    return PipelineInputs(k, rng.normal(size=(g.n_cell, d)), rng.normal(size=(g.n_net, d)))


def assert_outputs_equal(a, b):
    for f in ("y_cell", "y_net", "d_x_cell", "d_x_net"):
        assert np.array_equal(getattr(a, f), getattr(b, f)), f
    assert np.array_equal(a.mask.bits, b.mask.bits)
    for et in EDGE_TYPES:
        assert np.array_equal(a.aggregated[et], b.aggregated[et])
        assert np.array_equal(a.d_biases[et], b.d_biases[et])


class TestBuckets:
    def test_identity_all_low(self):
        b = bucket_rows(build_csr(5, 5, [(i, i, 1.0) for i in range(5)]), (4, 64))
        assert b.counts() == (5, 0, 0)

    def test_three_levels(self):
        b = bucket_rows(star_rows([2, 10, 300]), (4, 64))
        assert b.tags.tolist() == [LOW, MEDIUM, HIGH]

    def test_boundaries_inclusive(self):
        b = bucket_rows(star_rows([4, 5, 64, 65]), (4, 64))
        assert b.tags.tolist() == [LOW, MEDIUM, MEDIUM, HIGH]

    @pytest.mark.parametrize("t", [(10, 10), (20, 5), (-1, 4)])
    def test_bad_thresholds(self, t):
        with pytest.raises(BadThresholds):
            bucket_rows(star_rows([1]), t)


class TestPlan:
    def test_all_low_one_task_per_row(self):
        plan = build_partition_plan(bucket_rows(star_rows([1, 2, 3])), (32, 16, 8), 64, 16)
        assert plan.tasks == [(0, 0, 16), (1, 0, 16), (2, 0, 16)]

    def test_high_row_four_slices(self):
        plan = build_partition_plan(bucket_rows(star_rows([300]), (4, 64)), (32, 16, 8), 64, 10)
        assert [(s, n) for _, s, n in plan.tasks] == [(0, 3), (3, 3), (6, 2), (8, 2)]

    def test_slices_capped_by_width(self):
        plan = build_partition_plan(bucket_rows(star_rows([300]), (4, 64)), (32, 16, 8), 64, 2)
        assert [(s, n) for _, s, n in plan.tasks] == [(0, 1), (1, 1)]

    @pytest.mark.parametrize("kb", [(16, 16, 8), (8, 16, 32), (32, 16, 0)])
    def test_bad_k(self, kb):
        with pytest.raises(BadK):
            build_partition_plan(bucket_rows(star_rows([1])), kb, 64)

    def test_k1_above_dim(self):
        with pytest.raises(BadK):
            build_partition_plan(bucket_rows(star_rows([1])), (32, 16, 8), 16)

    def test_default_k_clipping(self):
        assert default_k_by_bucket(64) == (32, 16, 8)
        assert default_k_by_bucket(12) == (12, 11, 8)
        assert default_k_by_bucket(3) == (3, 2, 1)
        assert default_k_by_bucket(2) is None

    @given(st.lists(st.integers(0, 300), min_size=1, max_size=40), st.integers(1, 64),
           st.sampled_from([(32, 16, 8), (8, 4, 2), (64, 32, 1)]))
    def test_coverage(self, degrees, width, kb):
        plan = build_partition_plan(bucket_rows(star_rows(degrees)), kb, 64, width)
        per_row = {}
        for r, s, n in plan.tasks:
            assert n >= 1
            per_row.setdefault(r, []).append((s, n))
        assert plan.n_tasks == plan.task_ptr[-1] == sum(len(v) for v in per_row.values())
        for r in range(len(degrees)):
            covered = [c for s, n in per_row[r] for c in range(s, s + n)]
            assert covered == list(range(width))

    @given(st.integers(0, 300), st.integers(1, 64))
    def test_task_count_monotone_in_k(self, degree, width):
        counts = []
        for k3 in (1, 2, 4, 8, 16):
            plan = build_partition_plan(bucket_rows(star_rows([degree]), (0, 1)), (64, 32, k3), 64, width)
            counts.append(plan.n_tasks)
        assert counts == sorted(counts, reverse=True)

    def test_row_ranges_partition_rows(self):
        plan = plan_for(star_rows([1, 300, 2, 2, 50, 7, 0, 9]), 8, 64)
        ranges = plan.row_ranges(3)
        assert ranges[0][0] == 0 and ranges[-1][1] == 8
        assert all(a[1] == b[0] for a, b in zip(ranges, ranges[1:]))


@pytest.fixture(scope="module")
def g64():
    return generate_synthetic(SyntheticSpec(300, 150, 64, 32, 10.0, 2.5, seed=1))


class TestProfile:
    def test_candidates_and_feasibility(self, g64):
        prof = profile_k(g64, reps=3)
        assert sorted(prof.edges["near"].runtimes) == list(K_CANDIDATES)
        assert sorted(prof.edges["pinned"].runtimes) == [2, 4, 8, 16, 32]  # nets have dim 32
        for et, p in prof.edges.items():
            assert p.chosen_k == select_k(p.runtimes)
            assert p.selection["min_runtime"] == min(p.runtimes.values())
        assert prof.chosen()["pinned"] <= 32

    def test_samples_and_round_trip(self, g64, tmp_path):
        prof = profile_k(g64, candidates=(2, 8), reps=3)
        assert {s["k"] for s in prof.samples} == {2, 8}
        assert len(prof.samples) == 3 * 2 * 3 * 3
        prof.save_json(tmp_path / "p.json")
        assert json.loads((tmp_path / "p.json").read_text())["schema_version"] == 1
        back = KProfile.load_json(tmp_path / "p.json")
        assert back.chosen() == prof.chosen()
        assert back.edges["near"].runtimes == prof.edges["near"].runtimes
        prof.write_csv(tmp_path / "p.csv")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "edge_type,k,rep,phase,nanos" and len(lines) == 1 + len(prof.samples)

    def test_no_feasible(self, g64):
        with pytest.raises(NoFeasibleK):
            profile_k(g64, candidates=(128,), reps=3)

    def test_reps_floor(self, g64):
        with pytest.raises(ValueError):
            profile_k(g64, reps=2)

    def test_select_k_ties_to_smaller(self):
        assert select_k({8: 1.0, 2: 1.0, 4: 3.0}) == 2


class TestPipeline:
    def test_single_worker_parallel_matches_sequential(self, tiny_graph):
        inp = pipeline_inputs(tiny_graph, 0)
        seq, r_seq = run_pipeline(tiny_graph, inp, "sequential", 1)
        par, r_par = run_pipeline(tiny_graph, inp, "parallel", 1)
        assert_outputs_equal(seq, par)
        assert r_seq.overlap_ratio == pytest.approx(0, abs=0.05)
        assert set(r_par.phases) == set(EDGE_TYPES)
        assert r_par.to_dict()["schema_version"] == 1

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 17))
        g = random_graph(seed, d_cell=d, d_net=d)
        inp = pipeline_inputs(g, seed)
        ref, _ = run_pipeline(g, inp, "sequential", 1)
        for mode, w in (("parallel", 1), ("parallel", 2), ("parallel", 4), ("sequential", 3)):
            out, _ = run_pipeline(g, inp, mode, w)
            assert_outputs_equal(ref, out)

    def test_matches_model_layer(self, tiny_graph):
        g = tiny_graph
        k = {"pins": 3, "pinned": 5, "near": 2}
        layer = init_layer(g.d_cell, g.d_net, 6, k, np.random.default_rng(4))
        rng = np.random.default_rng(5)
        for et in EDGE_TYPES:
            layer.b[et][:] = rng.normal(size=6)
        d_cell, d_net = rng.normal(size=(g.n_cell, 6)), rng.normal(size=(g.n_net, 6))
        y_cell, y_net, tape = layer_forward(layer, g, g.x_cell, g.x_net)
        grads, dxc, dxn = layer_backward(layer, tape, d_cell, d_net)
        out, _ = run_pipeline(g, PipelineInputs(k, d_cell, d_net, layer.w, layer.b), "parallel", 2)
        assert np.array_equal(out.y_cell, y_cell) and np.array_equal(out.y_net, y_net)
        assert np.array_equal(out.d_x_cell, dxc) and np.array_equal(out.d_x_net, dxn)
        for et in EDGE_TYPES:
            assert np.array_equal(out.d_weights[et], grads.w[et])

    def test_merge_without_weights_needs_equal_dims(self):
        g = generate_synthetic(SyntheticSpec(30, 20, 4, 6, 3.0, 2.0))
        with pytest.raises(ShapeMismatch):
            run_pipeline(g, PipelineInputs({et: 2 for et in EDGE_TYPES}, np.zeros((30, 4)),
                                           np.zeros((20, 4))))

    def test_bad_mode(self, tiny_graph):
        with pytest.raises(ValueError):
            run_pipeline(tiny_graph, pipeline_inputs(tiny_graph, 0), "turbo")

    def test_workload_reported(self, tiny_graph):
        _, rep = run_pipeline(tiny_graph, pipeline_inputs(tiny_graph, 1), "parallel", 2)
        for et in EDGE_TYPES:
            wl = rep.workload[et]
            assert wl["t_avail"] == 64 and wl["p_max"] >= 1
            assert wl["max_row_workload"] == tiny_graph.adj[et].degrees().max() * wl["k"]
