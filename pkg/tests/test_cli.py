import io
import subprocess
import sys

import numpy as np
import pytest

from conftest import GOLDEN, MODELS
from minisol import ingest
from minisol.cli import BadToken, main, vdims_flag_parse


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


def test_inspect_alexnet_matches_golden():
    code, out, _ = run("inspect", MODELS / "alexnet.dlb.json")
    assert code == 0
    assert out == (GOLDEN / "alexnet_summary.txt").read_text()
    text_lines = [ln for ln in out.splitlines() if ln.strip("_= ")]
    assert text_lines[-3] == "Total params: 61,100,840"


def test_inspect_is_byte_stable():
    assert run("inspect", MODELS / "alexnet.dla.json") == run("inspect", MODELS / "alexnet.dla.json")


def test_optimize_branchy_prints_the_vdim_report(tmp_path):
    code, out, _ = run("optimize", MODELS / "branchy.json", "--vdims", "#0=true,#1=true,#2=true",
                       "--cost-model", "ref", "--out", tmp_path / "b.solp")
    assert code == 0
    assert "in_0 [#0, #1, #2, 3]" in out
    assert (tmp_path / "b.solp").exists() and (tmp_path / "b.solw").exists()


def _alexnet_plan(tmp_path):
    plan = tmp_path / "alex.solp"
    assert run("deploy", MODELS / "alexnet.dlb.json", "--cost-model", "ref", "-o", plan)[0] == 0
    x = np.random.default_rng(0).standard_normal((1, 224, 224, 3)).astype(np.float32)
    (tmp_path / "x.solw").write_bytes(ingest.save_weights({"input_1": x}))
    return plan


def test_offload_rerun_syncs_no_weights(tmp_path):
    plan = _alexnet_plan(tmp_path)
    code, out, _ = run("run", plan, "--input", tmp_path / "x.solw", "--device", "offload", "--repeat", 2,
                       "--output", tmp_path / "y.solw")
    assert code == 0
    first, second = [ln for ln in out.splitlines() if ln.startswith("run ")]
    assert "weight_sync_bytes=0 " not in first
    assert "weight_sync_bytes=0 " in second
    y = ingest.load_weights((tmp_path / "y.solw").read_bytes())
    code, _, _ = run("exec", plan, "--input", tmp_path / "x.solw", "--output", tmp_path / "h.solw")
    h = ingest.load_weights((tmp_path / "h.solw").read_bytes())
    assert y["dense_2"].tobytes() == h["dense_2"].tobytes()


def test_memory_block_and_csv(tmp_path):
    code, out, _ = run("memory", MODELS / "small_cnn.dlb.json", "--cost-model", "ref")
    assert code == 0 and out.startswith("Estimated Peak Memory Consumption:\nInference: ~")
    code, out, _ = run("memory", MODELS / "small_cnn.dlb.json", "--cost-model", "ref", "--format", "csv",
                       "--align", 1)
    assert out.splitlines()[0] == "step,group,parameter,input,output,intermediate,saved,total"


def test_tune_writes_a_report(tmp_path):
    csv = tmp_path / "costs.csv"
    rows = ["conv,REF,5", "conv,GEMM_TILED,1", "conv/relu,REF,2", "conv/relu,FUSED_EW,1", "pool,REF,1",
            "gap,REF,1", "flat,REF,1", "fc,REF,1", "fc,GEMM_TILED,2"]
    csv.write_text("node,backend,cost\n" + "\n".join(rows) + "\n")
    code, _, _ = run("tune", MODELS / "small_cnn.dlb.json", "--cost-model", csv, "--report", tmp_path / "r.csv")
    assert code == 0
    report = (tmp_path / "r.csv").read_text().splitlines()
    assert "conv,GEMM_TILED,1.0,1" in report and "fc,REF,1.0,1" in report


def test_partial_cost_table_is_a_data_error(tmp_path):
    csv = tmp_path / "costs.csv"
    csv.write_text("node,backend,cost\nconv,REF,5\n")
    code, _, err = run("tune", MODELS / "small_cnn.dlb.json", "--cost-model", csv)
    assert code == 2 and "no entry for (conv, GEMM_TILED)" in err


def test_train_writes_weights(tmp_path):
    x = np.linspace(-1, 1, 8).reshape(8, 1).astype(np.float32)
    (tmp_path / "d.solw").write_bytes(ingest.save_weights({"x": x, "target": 2 * x}))
    code, out, _ = run("train", MODELS / "linear1.json", "--data", tmp_path / "d.solw", "--epochs", 3,
                       "--lr", 0.1, "--out", tmp_path / "w.solw", "--cost-model", "ref")
    assert code == 0 and out.count("loss") == 3
    assert set(ingest.load_weights((tmp_path / "w.solw").read_bytes())) == {"fc/kernel", "fc/bias"}


@pytest.mark.parametrize("text,expect", [
    ("#0=true", {0: True}),
    ("#0=8,#1=false", {0: 8, 1: False}),
    ("", {}),
    (" #2 = TRUE ", {2: True}),
])
def test_vdims_flag_parse(text, expect):
    assert vdims_flag_parse(text) == expect


@pytest.mark.parametrize("text,pos", [("#0=maybe", 0), ("#0=1,", 5), ("#0=true,#0=false", 8), ("#0=0", 3)])
def test_vdims_flag_parse_errors(text, pos):
    with pytest.raises(BadToken) as e:
        vdims_flag_parse(text)
    assert e.value.pos == pos


@pytest.mark.parametrize("argv,code", [
    (["inspect"], 1),
    (["inspect", "m.json", "--bogus"], 1),
    (["frobnicate"], 1),
    (["optimize", str(MODELS / "branchy.json"), "--vdims", "#x"], 1),
    (["inspect", "/nonexistent/model.json"], 2),
])
def test_exit_codes(argv, code):
    got, out, err = run(*argv)
    assert got == code
    assert out == "" and err


def test_data_error_on_corrupt_plan(tmp_path):
    (tmp_path / "p.solp").write_bytes(b"junk")
    (tmp_path / "x.solw").write_bytes(ingest.save_weights({}))
    (tmp_path / "p.solw").write_bytes(ingest.save_weights({}))
    code, _, err = run("run", tmp_path / "p.solp", "--input", tmp_path / "x.solw")
    assert code == 2 and "PlanFormatError" in err


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "minisol", "inspect", str(MODELS / "linear1.json")],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "Total params: 2" in r.stdout
