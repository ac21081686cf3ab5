import json
import shutil
import subprocess
import sys

import pytest

from gimp import checkpoint as ckpt
from gimp.cli import EXIT_CODES, main

TINY_INI = """[run]
seed = 3

[data]
n_genes = 32
embed_dim = 8

[model]
d = 8
heads = 2
gene_heads = 2
landmarks = 4
n_fragments = 8
n_groups = 2

[train]
window_len = 16
gene_epochs = 2
pretrain_epochs = 2
finetune_epochs = 2
batch_size = 4
accumulate = 4

[synth]
num_patients = 20
n_min = 4
n_max = 12
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def records(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


@pytest.fixture
def tiny_ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return p


@pytest.fixture
def loop(tmp_path, tiny_ini, capsys):
    """gen-data -> pretrain-gene -> pretrain -> finetune on the tiny config."""
    d = tmp_path
    assert run(capsys, "gen-data", "--config", tiny_ini, "--out", d / "data")[0] == 0
    assert run(capsys, "pretrain-gene", "--config", tiny_ini, "--data", d / "data", "--out", d / "gene")[0] == 0
    assert run(capsys, "pretrain", "--config", tiny_ini, "--data", d / "data",
               "--gene-ckpt", d / "gene" / "checkpoint.gimp", "--out", d / "pre")[0] == 0
    assert run(capsys, "finetune", "--config", tiny_ini, "--data", d / "data",
               "--ckpt", d / "pre" / "checkpoint.gimp", "--out", d / "ft")[0] == 0
    return d


class TestFullLoop:
    def test_outputs(self, loop, capsys):
        for stage in ("gene", "pre", "ft"):
            assert (loop / stage / "config.ini").exists() and (loop / stage / "checkpoint.gimp").exists()
        pre = records((loop / "pre" / "metrics.jsonl").read_text())
        assert [r["epoch"] for r in pre] == [0, 1]
        assert all({"L_pre", "L_tri", "L_rec", "loss", "split"} <= set(r) for r in pre)
        ft = ckpt.load(loop / "ft" / "checkpoint.gimp")
        assert ft.stage == "finetune" and ft.extra == {"selected": "best_val"}
        assert ft.frozen["gene_encoder"]
        gene = ckpt.load(loop / "gene" / "checkpoint.gimp")
        for k, v in gene.params["gene_encoder"].items():
            assert ft.params["gene_encoder"][k].tobytes() == v.tobytes()

    def test_eval_and_export(self, loop, capsys):
        code, out, _ = run(capsys, "eval", "--ckpt", loop / "ft" / "checkpoint.gimp", "--data", loop / "data",
                           "--split", "test", "--export-cls", loop / "cls.tsv")
        assert code == 0
        rec = records(out)[-1]
        assert rec["split_sizes"] == {"train": 12, "val": 4, "test": 4}
        assert rec["n"] == 4 and 0.0 <= rec["accuracy"] <= 1.0
        rows = [line.split("\t") for line in (loop / "cls.tsv").read_text().splitlines()]
        assert len(rows) == 4 and all(len(r) == 2 + 16 for r in rows)

    def test_config_echo_reproduces_pretrain(self, loop, capsys):
        echo = loop / "pre" / "config.ini"
        assert run(capsys, "pretrain", "--config", echo, "--data", loop / "data",
                   "--gene-ckpt", loop / "gene" / "checkpoint.gimp", "--out", loop / "pre2")[0] == 0
        assert (loop / "pre2" / "checkpoint.gimp").read_bytes() == (loop / "pre" / "checkpoint.gimp").read_bytes()
        strip = lambda p: [{k: v for k, v in r.items() if k != "seconds"} for r in records(p.read_text())]
        assert strip(loop / "pre2" / "metrics.jsonl") == strip(loop / "pre" / "metrics.jsonl")

    def test_resume_reproduces(self, loop, tiny_ini, capsys):
        args = ["pretrain", "--config", tiny_ini, "--data", loop / "data",
                "--gene-ckpt", loop / "gene" / "checkpoint.gimp", "--out", loop / "pre3"]
        assert run(capsys, *args, "--stop-after", 1)[0] == 0
        assert ckpt.load(loop / "pre3" / "checkpoint.gimp").epoch == 1
        assert run(capsys, *args, "--resume")[0] == 0
        assert (loop / "pre3" / "checkpoint.gimp").read_bytes() == (loop / "pre" / "checkpoint.gimp").read_bytes()

    def test_finetune_resume(self, loop, tiny_ini, capsys):
        args = ["finetune", "--config", tiny_ini, "--data", loop / "data",
                "--ckpt", loop / "pre" / "checkpoint.gimp", "--out", loop / "ft2"]
        assert run(capsys, *args, "--stop-after", 1)[0] == 0
        assert run(capsys, *args, "--resume")[0] == 0
        assert (loop / "ft2" / "checkpoint.gimp").read_bytes() == (loop / "ft" / "checkpoint.gimp").read_bytes()

    def test_architecture_mismatch(self, loop, tmp_path, capsys):
        other = tmp_path / "other.ini"
        other.write_text(TINY_INI.replace("d = 8", "d = 16"))
        code, _, err = run(capsys, "finetune", "--config", other, "--data", loop / "data",
                           "--ckpt", loop / "pre" / "checkpoint.gimp", "--out", tmp_path / "x")
        assert code == 4 and json.loads(err.splitlines()[-1])["error"] == "config"


class TestErrors:
    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--ckpt", tmp_path / "none.gimp", "--data", tmp_path)
        assert code == 3
        rec = json.loads(err.splitlines()[-1])
        assert rec["exit_code"] == 3 and "none.gimp" in rec["message"]

    def test_bad_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nwindow_len = lots\n")
        code, _, err = run(capsys, "gen-data", "--config", bad, "--out", tmp_path / "d")
        assert code == 4 and json.loads(err.splitlines()[-1])["exit_code"] == 4

    def test_bad_data(self, tmp_path, capsys):
        bad = tmp_path / "ck.gimp"
        bad.write_bytes(b"garbage!" * 4)
        code, _, err = run(capsys, "eval", "--ckpt", bad, "--data", tmp_path)
        assert code == 6 and json.loads(err.splitlines()[-1])["error"] == "data"

    def test_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["pretrain"])
        assert exc.value.code == 2
        assert json.loads(capsys.readouterr().err.splitlines()[-1])["exit_code"] == 2

    def test_exit_codes_distinct_and_documented(self, capsys):
        assert len(set(EXIT_CODES)) == len(EXIT_CODES)
        with pytest.raises(SystemExit):
            main(["--help"])
        out = capsys.readouterr().out
        for code, text in EXIT_CODES.items():
            assert f"{code}  {text}" in out


class TestTools:
    def test_bench_csv(self, tmp_path, capsys):
        out = tmp_path / "b.csv"
        assert run(capsys, "bench-nystrom", "--t-list", "16", "--m-list", "4,16", "--seeds", "2",
                   "--out", out)[0] == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "T,m,seed,max_abs_err,wall_ms" and len(lines) == 5
        assert float(lines[-1].split(",")[3]) < 1e-3

    def test_grad_check(self, tiny_ini, capsys):
        code, out, _ = run(capsys, "grad-check", "--config", tiny_ini, "--max-coords", "3")
        recs = records(out)
        assert code == 0 and recs[-1]["failed"] == 0
        assert any(r.get("check") == "pretrain_objective[config]" for r in recs)

    def test_split_sizes_on_full_size_manifest(self, tmp_path, capsys):
        ini = tmp_path / "c.ini"
        ini.write_text("[data]\nn_genes = 8\nembed_dim = 4\n[model]\nd = 8\nheads = 2\ngene_heads = 2\n"
                       "landmarks = 2\nn_fragments = 4\nn_groups = 2\n"
                       "[synth]\nnum_patients = 946\nn_min = 1\nn_max = 2\n")
        assert run(capsys, "gen-data", "--config", ini, "--out", tmp_path / "d")[0] == 0
        from gimp.config import TrainConfig
        from gimp.model import GiMPModel
        cfg = TrainConfig.from_ini(ini.read_text().split("[synth]")[0])
        ckpt.save(ckpt.Checkpoint.capture(GiMPModel.build(cfg), cfg, "finetune", 0), tmp_path / "ck.gimp")
        code, out, _ = run(capsys, "eval", "--ckpt", tmp_path / "ck.gimp", "--data", tmp_path / "d")
        rec = records(out)[-1]
        assert code == 0 and rec["split_sizes"] == {"train": 567, "val": 189, "test": 190} and rec["n"] == 190

    def test_console_script(self, tmp_path):
        exe = shutil.which("gimp")
        cmd = [exe] if exe else [sys.executable, "-m", "gimp.cli"]
        res = subprocess.run(cmd + ["eval", "--ckpt", str(tmp_path / "x"), "--data", str(tmp_path)],
                             capture_output=True, text=True)
        assert res.returncode == 3 and json.loads(res.stderr.splitlines()[-1])["error"] == "missing-file"
