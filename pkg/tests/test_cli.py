import csv
import hashlib
import json

import pytest

from hcg import graph as hg
from hcg.cli import main, resolve_workers, UsageError
from hcg.model import load_checkpoint
from hcg.scheduler import KProfile

TINY = ["--n-cell", "100", "--n-net", "60", "--d-cell", "16", "--d-net", "16", "--near-mean", "6"]


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    path = tmp_path_factory.mktemp("g") / "tiny.hcg"
    assert main(["generate", *TINY, "--seed", "4", "--out", str(path)]) == 0
    return path


def rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


class TestGenerate:
    def test_tiny_is_valid(self, tiny):
        g = hg.load(tiny)
        assert (g.n_cell, g.n_net) == (100, 60) and hg.validate(g) == []
        st = json.loads(tiny.with_suffix(".hcg.stats.json").read_text())
        assert st["schema_version"] == 1 and st["edges"]["near"]["nnz"] == g.adj["near"].nnz

    def test_same_seed_same_bytes(self, tmp_path):
        digests = []
        for name in ("a.hcg", "b.hcg"):
            assert main(["generate", *TINY, "--seed", "9", "--out", str(tmp_path / name)]) == 0
            digests.append(hashlib.sha256((tmp_path / name).read_bytes()).hexdigest())
        assert digests[0] == digests[1]

    def test_preset_small(self, tmp_path):
        out = tmp_path / "small.hcg"
        assert main(["generate", "--preset", "small", "--seed", "1", "--out", str(out)]) == 0
        nnz = hg.load(out).adj["near"].nnz
        assert abs(nnz - 338050) <= 0.10 * 338050

    def test_preset_scale(self, tmp_path):
        out = tmp_path / "s.hcg"
        assert main(["generate", "--preset", "medium", "--scale", "0.05", "--out", str(out)]) == 0
        g = hg.load(out)
        assert g.n_cell == round(9493 * 0.05)

    def test_missing_sizes_is_usage_error(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path / "x.hcg")]) == 2

    def test_infeasible_is_usage_error(self, tmp_path):
        assert main(["generate", "--n-cell", "5", "--n-net", "3", "--near-mean", "50",
                     "--out", str(tmp_path / "x.hcg")]) == 2


class TestVerify:
    def test_healthy(self, tiny, tmp_path, capsys):
        report = tmp_path / "v.json"
        assert main(["verify", str(tiny), "--out", str(report), "--workers", "2"]) == 0
        doc = json.loads(report.read_text())
        assert doc["schema_version"] == 1 and doc["passed"]
        names = [c["name"] for c in doc["checks"]]
        assert names == ["validate", "oracle_equivalence", "adjoint_identity", "mask_conservation"]

    def test_corrupted_transpose(self, tiny, tmp_path, capsys):
        g = hg.load(tiny)
        p = g.adj["pinned"]
        vals = p.values.copy()
        vals[::3] = 5.0
        bad = g.replace(adj={**g.adj, "pinned": hg.CsrAdjacency(p.num_rows, p.num_cols, p.row_ptr,
                                                                 p.col_idx, vals)})
        path = tmp_path / "bad.hcg"
        hg.save(bad, path)
        assert main(["verify", str(path), "--out", str(tmp_path / "v.json")]) == 1
        assert "TransposeMismatch" in capsys.readouterr().out
        doc = json.loads((tmp_path / "v.json").read_text())
        assert not doc["passed"]

    def test_truncated_file_fails(self, tiny, tmp_path):
        path = tmp_path / "cut.hcg"
        path.write_bytes(tiny.read_bytes()[:200])
        assert main(["verify", str(path)]) == 1

    def test_fd_check(self, tiny, capsys):
        assert main(["verify", str(tiny), "--fd-check"]) == 0
        line = [l for l in capsys.readouterr().out.splitlines() if "finite_difference" in l][0]
        assert line.startswith("PASS") and float(line.split("max_error=")[1]) <= 1e-5


class TestProfileK:
    def test_six_candidates(self, tmp_path):
        g = tmp_path / "g64.hcg"
        main(["generate", "--n-cell", "200", "--n-net", "120", "--near-mean", "8", "--out", str(g)])
        assert main(["profile-k", str(g), "--reps", "3", "--out-dir", str(tmp_path)]) == 0
        sweep = rows(tmp_path / "k_sweep.csv")
        for et in hg.EDGE_TYPES:
            assert sorted({int(r["k"]) for r in sweep if r["edge_type"] == et}) == [2, 4, 8, 16, 32, 64]
        prof = KProfile.load_json(tmp_path / "k_profile.json")
        assert set(prof.chosen()) == set(hg.EDGE_TYPES)

    def test_candidate_subset(self, tiny, tmp_path):
        assert main(["profile-k", str(tiny), "--candidates", "2,8", "--reps", "3",
                     "--out-dir", str(tmp_path)]) == 0
        assert {int(r["k"]) for r in rows(tmp_path / "k_sweep.csv")} == {2, 8}


class TestBench:
    def test_both_modes(self, tiny, tmp_path):
        assert main(["bench", str(tiny), "--mode", "both", "--reps", "3", "--out-dir", str(tmp_path),
                     "--workers", "2"]) == 0
        data = rows(tmp_path / "bench.csv")
        for mode in ("sequential", "parallel"):
            assert {r["edge_type"] for r in data if r["mode"] == mode} == set(hg.EDGE_TYPES) | {"all"}
        assert {r["edge_type"] for r in data if r["mode"] == "dense"} == set(hg.EDGE_TYPES)
        doc = json.loads((tmp_path / "pipeline_report.json").read_text())
        assert doc["schema_version"] == 1 and "parallel_over_sequential" in doc
        assert doc["few_cores"] == (doc["host_cores"] < 4)
        assert len(rows(tmp_path / "workload.csv")) == 3

    def test_profile_feeds_k(self, tiny, tmp_path):
        main(["profile-k", str(tiny), "--candidates", "4", "--reps", "3", "--out-dir", str(tmp_path)])
        assert main(["bench", str(tiny), "--mode", "sequential", "--reps", "1",
                     "--profile", str(tmp_path / "k_profile.json"), "--out-dir", str(tmp_path)]) == 0
        ks = {r["k"] for r in rows(tmp_path / "bench.csv") if r["edge_type"] != "all"}
        assert ks == {"4"}


class TestTrain:
    def test_outputs(self, tiny, tmp_path):
        assert main(["train", str(tiny), "--epochs", "15", "--lr", "0.005", "--out-dir", str(tmp_path)]) == 0
        losses = [float(r["loss"]) for r in rows(tmp_path / "losses.csv")]
        assert len(losses) == 15 and losses[-1] < losses[0]
        doc = json.loads((tmp_path / "metrics.json").read_text())
        assert doc["schema_version"] == 1 and doc["final_loss"] == losses[-1]
        load_checkpoint(tmp_path / "model.hcmd")

    def test_lr_zero_flat(self, tiny, tmp_path):
        assert main(["train", str(tiny), "--epochs", "4", "--lr", "0", "--weight-decay", "0",
                     "--out-dir", str(tmp_path)]) == 0
        assert len({r["loss"] for r in rows(tmp_path / "losses.csv")}) == 1

    def test_seed_reproducible(self, tiny, tmp_path):
        texts = []
        for d in ("a", "b"):
            main(["train", str(tiny), "--epochs", "5", "--seed", "7", "--out-dir", str(tmp_path / d)])
            texts.append((tmp_path / d / "metrics.json").read_text())
        assert texts[0] == texts[1]


class TestExitCodes:
    def test_missing_file(self, tmp_path):
        assert main(["stats", str(tmp_path / "nope.hcg")]) == 3

    def test_no_subcommand(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 2

    def test_zero_workers(self, tiny):
        assert main(["verify", str(tiny), "--workers", "0"]) == 2

    def test_workers_env_fallback(self, monkeypatch):
        monkeypatch.setenv("HCG_WORKERS", "3")
        assert resolve_workers(None) == 3
        assert resolve_workers(2) == 2
        monkeypatch.setenv("HCG_WORKERS", "many")
        with pytest.raises(UsageError):
            resolve_workers(None)

    def test_stats_prints_json(self, tiny, capsys):
        assert main(["stats", str(tiny)]) == 0
        assert json.loads(capsys.readouterr().out)["schema_version"] == 1

    def test_bad_magic_is_io_error(self, tmp_path):
        p = tmp_path / "x.hcg"
        p.write_bytes(b"JUNKJUNKJUNK")
        assert main(["stats", str(p)]) == 3
