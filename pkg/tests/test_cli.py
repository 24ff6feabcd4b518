"""Command-line surface: flags, exit codes, seed fallback, pipelines."""

import json
import os

import numpy as np
import pytest

from matterbridge.cli import run_cli
from matterbridge.config import Config, save_config
from matterbridge.crystal import structure_to_json
from matterbridge.datasetgen import load_property_records
from matterbridge.evaluate import read_eval_report


@pytest.fixture()
def small_config_path(tmp_path):
    cfg = Config(d_enc=16, L_enc=1, d_b=16, n_q=8, L_b=2, n_heads=2,
                 d_lm=32, L_lm=1, lm_heads=2, batch_size=4,
                 pretrain_accum=1, finetune_accum=1,
                 pretrain_epochs=1, finetune_epochs=1)
    path = str(tmp_path / "config.json")
    save_config(path, cfg)
    return path


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestUsageErrors:
    def test_no_arguments(self, capsys):
        assert run_cli([]) == 2
        capsys.readouterr()

    def test_unknown_subcommand(self, capsys):
        assert run_cli(["frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert run_cli(["gen-data", "--out", "x", "--bogus"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_missing_required_flag(self, capsys):
        assert run_cli(["pretrain", "--out", "x"]) == 2
        capsys.readouterr()

    def test_missing_file_reports_error(self, tmp_path, capsys):
        rc = run_cli(["pretrain", "--records", str(tmp_path / "nope.jsonl"),
                      "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "error" in capsys.readouterr().err


class TestSeedFallback:
    def test_env_seed_matches_flag_seed(self, tmp_path, monkeypatch, capsys):
        a = tmp_path / "a"
        b = tmp_path / "b"
        monkeypatch.delenv("MATTERBRIDGE_SEED", raising=False)
        assert run_cli(["gen-data", "--out", str(a), "--n", "10",
                        "--seed", "123"]) == 0
        monkeypatch.setenv("MATTERBRIDGE_SEED", "123")
        assert run_cli(["gen-data", "--out", str(b), "--n", "10"]) == 0
        capsys.readouterr()
        assert read_bytes(a / "records.jsonl") == read_bytes(b / "records.jsonl")

    def test_flag_beats_env(self, tmp_path, monkeypatch, capsys):
        a = tmp_path / "a"
        b = tmp_path / "b"
        monkeypatch.setenv("MATTERBRIDGE_SEED", "999")
        assert run_cli(["gen-data", "--out", str(a), "--n", "10",
                        "--seed", "123"]) == 0
        monkeypatch.setenv("MATTERBRIDGE_SEED", "123")
        assert run_cli(["gen-data", "--out", str(b), "--n", "10"]) == 0
        capsys.readouterr()
        assert read_bytes(a / "records.jsonl") == read_bytes(b / "records.jsonl")

    def test_bad_env_seed(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("MATTERBRIDGE_SEED", "not-a-number")
        rc = run_cli(["gen-data", "--out", str(tmp_path / "x"), "--n", "10"])
        assert rc == 1
        assert "MATTERBRIDGE_SEED" in capsys.readouterr().err


class TestGenData:
    def test_writes_corpus_and_split(self, tmp_path, capsys):
        out = tmp_path / "data"
        assert run_cli(["gen-data", "--out", str(out), "--n", "12",
                        "--seed", "7"]) == 0
        capsys.readouterr()
        for name in ("records.jsonl", "records_train.jsonl",
                     "records_test.jsonl", "samples_train.jsonl",
                     "samples_test.jsonl"):
            assert (out / name).exists()
        records = load_property_records(str(out / "records.jsonl"))
        train = load_property_records(str(out / "records_train.jsonl"))
        test = load_property_records(str(out / "records_test.jsonl"))
        assert len(records) == 12
        assert len(train) == 10
        assert len(test) == 2

    def test_small_corpus_skips_split(self, tmp_path, capsys):
        out = tmp_path / "tiny"
        assert run_cli(["gen-data", "--out", str(out), "--n", "6",
                        "--seed", "7"]) == 0
        note = capsys.readouterr().out
        assert "split skipped" in note
        assert not (out / "records_train.jsonl").exists()
        assert (out / "samples_train.jsonl").exists()

    def test_two_runs_are_byte_identical(self, tmp_path, capsys):
        a = tmp_path / "a"
        b = tmp_path / "b"
        for out in (a, b):
            assert run_cli(["gen-data", "--out", str(out), "--n", "12",
                            "--seed", "5"]) == 0
        capsys.readouterr()
        for name in ("records.jsonl", "samples_train.jsonl"):
            assert read_bytes(a / name) == read_bytes(b / name)


class TestPipeline:
    @pytest.fixture()
    def workspace(self, tmp_path, small_config_path, capsys):
        data = tmp_path / "data"
        assert run_cli(["gen-data", "--out", str(data), "--n", "10",
                        "--seed", "7", "--config", small_config_path]) == 0
        pre = tmp_path / "pre"
        assert run_cli(["pretrain", "--records",
                        str(data / "records_train.jsonl"),
                        "--out", str(pre), "--seed", "7",
                        "--config", small_config_path]) == 0
        ft = tmp_path / "ft"
        assert run_cli(["finetune", "--records",
                        str(data / "records_train.jsonl"),
                        "--samples", str(data / "samples_train.jsonl"),
                        "--ckpt", str(pre / "pretrain-final.ckpt"),
                        "--out", str(ft), "--seed", "7",
                        "--config", small_config_path]) == 0
        capsys.readouterr()
        return {"data": data, "ckpt": ft / "finetune-final.ckpt",
                "tmp": tmp_path, "config": small_config_path}

    def test_train_infer_eval_store_flow(self, workspace, capsys):
        data = workspace["data"]
        ckpt = str(workspace["ckpt"])
        tmp = workspace["tmp"]
        records = load_property_records(str(data / "records_train.jsonl"))
        struct_path = str(tmp / "query.json")
        with open(struct_path, "w", encoding="utf-8") as fh:
            fh.write(structure_to_json(records[0].structure))

        assert run_cli(["infer", "--ckpt", ckpt, "--structure", struct_path,
                        "--task", "is_metal", "--max-new", "16"]) == 0
        answer = capsys.readouterr().out.strip()
        assert answer

        report_path = str(tmp / "report.json")
        assert run_cli(["eval", "--ckpt", ckpt,
                        "--records", str(data / "records_train.jsonl"),
                        "--samples", str(data / "samples_train.jsonl"),
                        "--out", report_path, "--max-new", "16"]) == 0
        capsys.readouterr()
        report = read_eval_report(report_path)
        assert report.rag is False
        assert report.n_samples > 0

        store = str(tmp / "store")
        assert run_cli(["embed", "--ckpt", ckpt,
                        "--records", str(data / "records_train.jsonl"),
                        "--out", store]) == 0
        capsys.readouterr()
        assert os.path.exists(os.path.join(store, "store.bin"))

        assert run_cli(["retrieve", "--store", store,
                        "--query-id", records[0].material_id,
                        "--k", "3"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3
        dists = [float(line.split()[1]) for line in lines]
        assert dists == sorted(dists)
        assert records[0].material_id not in [line.split()[0] for line in lines]

        coords_path = str(tmp / "coords.csv")
        assert run_cli(["project", "--store", store,
                        "--out", coords_path]) == 0
        capsys.readouterr()
        rows = open(coords_path, encoding="utf-8").read().strip().splitlines()
        assert rows[0] == "material_id,x,y"
        assert len(rows) == len(records) + 1
        for row in rows[1:]:
            _, x, y = row.split(",")
            assert np.isfinite(float(x)) and np.isfinite(float(y))

    def test_infer_rag_lines_and_fallback(self, workspace, capsys):
        data = workspace["data"]
        ckpt = str(workspace["ckpt"])
        tmp = workspace["tmp"]
        records = load_property_records(str(data / "records_train.jsonl"))
        struct_path = str(tmp / "query.json")
        with open(struct_path, "w", encoding="utf-8") as fh:
            fh.write(structure_to_json(records[0].structure))
        store = str(tmp / "store2")
        assert run_cli(["embed", "--ckpt", ckpt,
                        "--records", str(data / "records_train.jsonl"),
                        "--out", store]) == 0
        capsys.readouterr()
        assert run_cli(["infer", "--ckpt", ckpt, "--structure", struct_path,
                        "--task", "is_metal", "--max-new", "16",
                        "--rag", "--store", store,
                        "--records", str(data / "records_train.jsonl"),
                        "--id", records[0].material_id]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("self: ")
        assert out[1].startswith("retrieved: ")
        assert out[2].startswith("final: ")
        retrieved = out[1].split(": ", 1)[1].split(",")
        assert len(retrieved) == 2
        assert records[0].material_id not in retrieved

    def test_rag_without_store_is_an_error(self, workspace, capsys):
        data = workspace["data"]
        ckpt = str(workspace["ckpt"])
        tmp = workspace["tmp"]
        records = load_property_records(str(data / "records_train.jsonl"))
        struct_path = str(tmp / "query.json")
        with open(struct_path, "w", encoding="utf-8") as fh:
            fh.write(structure_to_json(records[0].structure))
        rc = run_cli(["infer", "--ckpt", ckpt, "--structure", struct_path,
                      "--task", "is_metal", "--rag"])
        assert rc == 1
        assert "--store" in capsys.readouterr().err

    def test_unknown_task_is_an_error(self, workspace, capsys):
        tmp = workspace["tmp"]
        data = workspace["data"]
        records = load_property_records(str(data / "records_train.jsonl"))
        struct_path = str(tmp / "query.json")
        with open(struct_path, "w", encoding="utf-8") as fh:
            fh.write(structure_to_json(records[0].structure))
        rc = run_cli(["infer", "--ckpt", str(workspace["ckpt"]),
                      "--structure", struct_path, "--task", "nonsense"])
        assert rc == 1
        assert "unknown task" in capsys.readouterr().err


class TestSimilarityCommand:
    def test_csv_output(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run_cli(["gen-data", "--out", str(data), "--n", "6",
                        "--seed", "3"]) == 0
        capsys.readouterr()
        records = load_property_records(str(data / "records.jsonl"))
        ids = ",".join(r.material_id for r in records[:2])
        out_path = str(tmp_path / "sim.csv")
        assert run_cli(["similarity", "--records", str(data / "records.jsonl"),
                        "--ids", ids, "--n-max", "3", "--l-max", "2",
                        "--out", out_path]) == 0
        capsys.readouterr()
        rows = open(out_path, encoding="utf-8").read().strip().splitlines()
        assert rows[0] == "id_a,id_b,similarity"
        assert len(rows) == 4
        values = {}
        for row in rows[1:]:
            a, b, v = row.split(",")
            values[(a, b)] = float(v)
        for r in records[:2]:
            key = (r.material_id, r.material_id)
            assert abs(values[key] - 1.0) < 1e-9

    def test_unknown_id_rejected(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run_cli(["gen-data", "--out", str(data), "--n", "6",
                        "--seed", "3"]) == 0
        capsys.readouterr()
        rc = run_cli(["similarity", "--records", str(data / "records.jsonl"),
                      "--ids", "missing-id"])
        assert rc == 1
        assert "unknown material ids" in capsys.readouterr().err
