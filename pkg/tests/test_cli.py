"""End-to-end tests for the rawdrift command line driver.

Each test drives ``rawdrift.cli.main`` in process with a JSON config on
disk, then inspects exit codes and the files the run leaves behind.
"""

import hashlib
import json
import os

import numpy as np
import pytest

from rawdrift.cli import (
    EXIT_CHECKSUM,
    EXIT_CONFIG,
    EXIT_GRADCHECK,
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    main,
)
from rawdrift.param_pipeline import default_params, load_params, save_params
from rawdrift.rawio import RawImage, save_raw


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def run(tmp_path, command, doc, *extra):
    cfg = write_config(tmp_path, doc)
    out = str(tmp_path / "out")
    return main([command, "--config", cfg, "--out", out, *extra]), out


def tree_digest(root):
    """Sha256 over relative paths and contents of every file under root."""
    acc = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            acc.update(os.path.relpath(full, root).encode())
            acc.update(open(full, "rb").read())
    return acc.hexdigest()


def two_class_data(count=8, size=16):
    return {
        "source": "synth",
        "specs": [{"kind": "disks"}, {"kind": "stripes", "period": 4.0}],
        "count_per_spec": count,
        "size": size,
    }


class TestConfigErrors:
    def test_invalid_json(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{nope")
        assert main(["synth", "--config", str(cfg)]) == EXIT_CONFIG
        assert "invalid JSON" in capsys.readouterr().err

    def test_unknown_top_level_key(self, tmp_path, capsys):
        code, _ = run(tmp_path, "synth",
                      {"data": two_class_data(), "bogus": 1})
        assert code == EXIT_CONFIG
        assert "bogus" in capsys.readouterr().err

    def test_missing_required_key(self, tmp_path):
        code, _ = run(tmp_path, "synth", {"task": "classify"})
        assert code == EXIT_CONFIG

    def test_unknown_scene_kind(self, tmp_path, capsys):
        data = two_class_data()
        data["specs"][0]["kind"] = "plaid"
        code, _ = run(tmp_path, "synth", {"data": data})
        assert code == EXIT_CONFIG
        assert "plaid" in capsys.readouterr().err

    def test_unknown_config_label(self, tmp_path):
        code, _ = run(tmp_path, "process",
                      {"data": two_class_data(2), "configs": ["xx,s,me"]})
        assert code == EXIT_CONFIG

    def test_missing_out_dir(self, tmp_path):
        cfg = write_config(tmp_path, {"data": two_class_data(2)})
        assert main(["process", "--config", cfg]) == EXIT_CONFIG

    def test_odd_size_rejected(self, tmp_path):
        data = two_class_data()
        data["size"] = 15
        code, _ = run(tmp_path, "synth", {"data": data})
        assert code == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        out = str(tmp_path / "out")
        code = main(["synth", "--config", str(tmp_path / "nope.json"),
                     "--out", out])
        assert code == EXIT_IO

    def test_missing_pgm_dir(self, tmp_path):
        code, _ = run(tmp_path, "process",
                      {"data": {"source": "pgm",
                                "dir": str(tmp_path / "nowhere")}})
        assert code == EXIT_IO


class TestProcess:
    def test_renders_all_configs(self, tmp_path):
        code, out = run(tmp_path, "process", {"data": two_class_data(1)})
        assert code == EXIT_OK
        pngs = sorted(p for p in os.listdir(out) if p.endswith(".png"))
        assert len(pngs) == 24
        assert "raw000_bi-s-me.png" in pngs
        assert "raw001_ma-u-ga.png" in pngs
        assert os.path.exists(os.path.join(out, "resolved_config.json"))
        assert os.path.exists(os.path.join(out, "run.log"))

    def test_rerun_keeps_existing(self, tmp_path):
        doc = {"data": two_class_data(1), "configs": ["bi,s,me"]}
        code, out = run(tmp_path, "process", doc)
        assert code == EXIT_OK
        png = os.path.join(out, "raw000_bi-s-me.png")
        before = os.stat(png).st_mtime_ns
        code, _ = run(tmp_path, "process", doc)
        assert code == EXIT_OK
        assert os.stat(png).st_mtime_ns == before

    def test_force_rewrites(self, tmp_path):
        doc = {"data": two_class_data(1), "configs": ["bi,s,me"]}
        _, out = run(tmp_path, "process", doc)
        png = os.path.join(out, "raw000_bi-s-me.png")
        before = os.stat(png).st_mtime_ns
        code, _ = run(tmp_path, "process", doc, "--force")
        assert code == EXIT_OK
        assert os.stat(png).st_mtime_ns > before

    def test_stages_and_params(self, tmp_path):
        theta = tmp_path / "theta.json"
        save_params(str(theta), default_params())
        doc = {"data": two_class_data(1), "configs": ["bi,s,me"],
               "stages": True, "params": str(theta)}
        code, out = run(tmp_path, "process", doc)
        assert code == EXIT_OK
        names = set(os.listdir(out))
        assert "raw000_bi-s-me_demosaic.png" in names
        assert "raw000_bi-s-me_gamma.png" in names
        assert "raw000_param.png" in names

    def test_pgm_source(self, tmp_path):
        src = tmp_path / "pgms"
        src.mkdir()
        rng = np.random.default_rng(3)
        for i in range(2):
            save_raw(str(src / f"s{i}.pgm"),
                     RawImage(mosaic=rng.uniform(0.1, 0.9, (16, 16))))
        doc = {"data": {"source": "pgm", "dir": str(src)},
               "configs": ["bi,s,me"]}
        code, out = run(tmp_path, "process", doc)
        assert code == EXIT_OK
        assert os.path.exists(os.path.join(out, "raw001_bi-s-me.png"))

    def test_resolved_config_normalizes_defaults(self, tmp_path):
        code, out = run(tmp_path, "process", {"data": two_class_data(1)})
        assert code == EXIT_OK
        resolved = json.loads(
            open(os.path.join(out, "resolved_config.json")).read())
        assert resolved["command"] == "process"
        assert resolved["configs"] == "all"
        assert resolved["data"]["size"] == 16


SYNTH_DOC = {
    "data": {
        "source": "synth",
        "specs": [{"kind": "stripes", "period": 2.6},
                  {"kind": "stripes", "period": 3.6}],
        "count_per_spec": 8,
        "size": 16,
    },
    "folds": 2,
    "train": {"steps": 6, "batch": 8},
}


class TestSynth:
    def test_outputs(self, tmp_path):
        code, out = run(tmp_path, "synth", SYNTH_DOC)
        assert code == EXIT_OK
        names = set(os.listdir(out))
        for expect in ("matrix.csv", "matrix_std.csv", "rankings.csv",
                       "corruption_matrix.csv", "summary.csv", "matrix.png",
                       "corruption.png", "worst_pair_diff.png",
                       "worst_pair_diff_panels.png", "run.log",
                       "resolved_config.json"):
            assert expect in names
        header = open(os.path.join(out, "matrix.csv")).readline()
        assert header.count('"') == 24  # 12 quoted config labels

    def test_rerun_is_byte_identical(self, tmp_path):
        code, out = run(tmp_path, "synth", SYNTH_DOC)
        assert code == EXIT_OK
        first = tree_digest(out)
        for name in os.listdir(out):
            os.unlink(os.path.join(out, name))
        code, out = run(tmp_path, "synth", SYNTH_DOC)
        assert code == EXIT_OK
        assert tree_digest(out) == first

    def test_unknown_corruption(self, tmp_path):
        doc = dict(SYNTH_DOC, corruptions=["speckle"])
        code, _ = run(tmp_path, "synth", doc)
        assert code == EXIT_CONFIG


class TestForensics:
    def test_outputs(self, tmp_path):
        doc = {
            "data": two_class_data(6),
            "train": {"steps": 10, "batch": 6},
            "forensics": {"lambdas": [0.0, 1e6], "steps": 2},
        }
        code, out = run(tmp_path, "forensics", doc)
        assert code == EXIT_OK
        names = set(os.listdir(out))
        for expect in ("forensics.csv", "objective_trajectories.csv",
                       "params_lambda0.json", "params_lambda1.json",
                       "forensics.png", "run.log", "resolved_config.json"):
            assert expect in names
        rows = open(os.path.join(out, "forensics.csv")).read().splitlines()
        assert len(rows) == 1 + 2 * 7  # header + lambdas x groups
        theta = load_params(os.path.join(out, "params_lambda1.json"))
        assert theta.gamma.shape == ()

    def test_group_restriction(self, tmp_path):
        doc = {
            "data": two_class_data(6),
            "train": {"steps": 10, "batch": 6},
            "forensics": {"lambdas": [0.0], "steps": 2,
                          "groups": ["wb_gains"]},
        }
        code, out = run(tmp_path, "forensics", doc)
        assert code == EXIT_OK
        drift = {}
        for line in open(os.path.join(out, "forensics.csv")).read(
                ).splitlines()[1:]:
            cells = line.split(",")
            drift[cells[1]] = float(cells[2])
        assert all(v == 0.0 for g, v in drift.items() if g != "wb_gains")


class TestOptimize:
    def test_outputs(self, tmp_path):
        doc = {
            "data": two_class_data(6),
            "modes": ["frozen", "direct_raw"],
            "optimization": {"steps": 4, "folds": 2, "batch": 6},
        }
        code, out = run(tmp_path, "optimize", doc)
        assert code == EXIT_OK
        names = set(os.listdir(out))
        for expect in ("table.csv", "trajectories.csv", "loss_curves.csv",
                       "params_frozen_fold0.json", "optimization.png",
                       "run.log", "resolved_config.json"):
            assert expect in names
        table = open(os.path.join(out, "table.csv")).read().splitlines()
        assert len(table) == 3
        assert table[1].startswith("frozen,classify,accuracy,")

    def test_unknown_mode(self, tmp_path):
        doc = {"data": two_class_data(6), "modes": ["psychic"],
               "optimization": {"steps": 2, "folds": 2, "batch": 6}}
        code, _ = run(tmp_path, "optimize", doc)
        assert code == EXIT_CONFIG

    def test_divergent_lr_exits_numeric(self, tmp_path):
        doc = {"data": two_class_data(6), "modes": ["learned"],
               "optimization": {"steps": 8, "folds": 2, "batch": 6,
                                "lr": 1e6, "pipeline_lr": 1e6}}
        with np.errstate(all="ignore"):
            code, _ = run(tmp_path, "optimize", doc)
        assert code == EXIT_NUMERIC


class TestGradcheck:
    def test_passes_and_reports(self, tmp_path, capsys):
        doc = {"count": 1, "size": 10}
        code, out = run(tmp_path, "gradcheck", doc)
        assert code == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 8
        assert all(line.endswith("PASS") for line in lines)
        assert lines[-1].startswith("raw_input")
        rows = open(os.path.join(out, "gradcheck.csv")).read().splitlines()
        assert len(rows) == 9

    def test_fault_injection_fails(self, tmp_path, capsys):
        doc = {"count": 1, "size": 10,
               "fault": {"op": "mul", "factor": 1.001}}
        code, _ = run(tmp_path, "gradcheck", doc)
        assert code == EXIT_GRADCHECK
        assert "FAIL" in capsys.readouterr().out


class TestFetch:
    @pytest.fixture()
    def served(self, tmp_path):
        srv = tmp_path / "srv"
        srv.mkdir()
        rng = np.random.default_rng(5)
        entries = []
        for i in range(2):
            raw = RawImage(mosaic=rng.uniform(0.2, 0.8, (12, 12)))
            p = srv / f"img{i}.pgm"
            save_raw(str(p), raw)
            data = p.read_bytes()
            entries.append({"path": f"img{i}.pgm",
                            "url": "file://" + str(p),
                            "sha256": hashlib.sha256(data).hexdigest(),
                            "bytes": len(data)})
        manifest = srv / "manifest.json"
        manifest.write_text(json.dumps(
            {"schema": "manifest/1", "name": "t", "entries": entries}))
        return manifest, entries

    def test_fetch_verifies_and_reports(self, tmp_path, served, capsys):
        manifest, entries = served
        dest = tmp_path / "cache"
        doc = {"manifest": str(manifest), "dest": str(dest)}
        code, out = run(tmp_path, "fetch", doc)
        assert code == EXIT_OK
        assert sorted(os.listdir(dest)) == ["img0.pgm", "img1.pgm"]
        report = open(os.path.join(out, "fetch_report.csv")).read()
        assert entries[0]["sha256"] in report
        # second run keeps verified files instead of re-downloading
        code, _ = run(tmp_path, "fetch", doc)
        assert code == EXIT_OK
        assert "keep img0.pgm (verified)" in capsys.readouterr().err

    def test_checksum_mismatch(self, tmp_path, served):
        manifest, entries = served
        doc = json.loads(manifest.read_text())
        doc["entries"][0]["sha256"] = "0" * 64
        bad = tmp_path / "bad_manifest.json"
        bad.write_text(json.dumps(doc))
        code, _ = run(tmp_path, "fetch",
                      {"manifest": str(bad), "dest": str(tmp_path / "c2")})
        assert code == EXIT_CHECKSUM

    def test_env_cache_dir(self, tmp_path, served, monkeypatch):
        manifest, _ = served
        cache = tmp_path / "envcache"
        monkeypatch.setenv("RAWDRIFT_CACHE", str(cache))
        code, _ = run(tmp_path, "fetch", {"manifest": str(manifest)})
        assert code == EXIT_OK
        assert sorted(os.listdir(cache)) == ["img0.pgm", "img1.pgm"]


class TestSeedOverride:
    def test_seed_flag_changes_outputs(self, tmp_path):
        doc = dict(SYNTH_DOC)
        cfg = write_config(tmp_path, doc)
        out_a = str(tmp_path / "a")
        out_b = str(tmp_path / "b")
        assert main(["synth", "--config", cfg, "--out", out_a,
                     "--seed", "0"]) == EXIT_OK
        assert main(["synth", "--config", cfg, "--out", out_b,
                     "--seed", "1"]) == EXIT_OK
        a = open(os.path.join(out_a, "matrix.csv")).read()
        b = open(os.path.join(out_b, "matrix.csv")).read()
        assert a != b
