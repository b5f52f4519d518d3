"""End-to-end command line tests: every subcommand once, plus exit codes.

A module-scoped fixture drives the full pipeline on a miniature corpus
(4 speakers x 5 utterances x 120 frames; the two train speakers give the
probe sub-splits their fit/dev/eval utterances).  Individual tests then
inspect the artifacts each stage left behind.
"""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from segvae import cli, corpus, latent, pgm
from segvae.checkpoint import load_checkpoint

WIDTHS = "8,12,16"
FC = "32"
LATENT = 8


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipe(tmp_path_factory):
    """Run the whole pipeline once; hand tests a dict of output paths."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    p = {
        "root": root,
        "corp": root / "corp",
        "feat": root / "feat",
        "vae": root / "vae",
        "probes": root / "probes",
        "table": root / "table.json",
        "figs": root / "figs",
        "shift": root / "shift.json",
        "mod": root / "mod",
        "latents": root / "z.csv",
        "dec": root / "dec",
        "interp": root / "interp",
        "samp": root / "samp",
        "cos": root / "cos.csv",
        "cov": root / "cov.csv",
        "rep": root / "rep" / "spk00_to_spk01",
    }
    p["index"] = p["feat"] / "segments.jsonl"
    model = p["vae"] / "best.ckpt"

    steps = [
        ("synth-data", "--out", p["corp"], "--speakers", 4, "--phones", 3,
         "--utts", 5, "--utt-frames", 120, "--seed", 0),
        ("extract", "--manifest", p["corp"] / "manifest.jsonl", "--out", p["feat"],
         "--feature-kind", "fbank", "--seg-len", 20),
        ("train", "--index", p["index"], "--out", p["vae"], "--widths", WIDTHS,
         "--fc-units", FC, "--latent", LATENT, "--batch-size", 16,
         "--max-epochs", 2, "--patience", 5, "--seed", 0),
        ("probe-train", "--index", p["index"], "--out", p["probes"],
         "--attribute", "speaker", "--widths", WIDTHS, "--fc-units", FC,
         "--latent", LATENT, "--batch-size", 16, "--max-epochs", 2, "--seed", 0),
        ("probe-train", "--index", p["index"], "--out", p["probes"],
         "--attribute", "phone", "--widths", WIDTHS, "--fc-units", FC,
         "--latent", LATENT, "--batch-size", 16, "--max-epochs", 2, "--seed", 0),
        ("attr", "--index", p["index"], "--model", model, "--out", p["table"],
         "--figures", p["figs"]),
        ("shift", "--table", p["table"], "--attribute", "speaker",
         "--source", "spk00", "--target", "spk01", "--out", p["shift"]),
        ("modify", "--index", p["index"], "--model", model, "--shift", p["shift"],
         "--limit", 3, "--out", p["mod"]),
        ("encode", "--index", p["index"], "--model", model, "--split", "dev",
         "--out", p["latents"]),
        ("decode", "--model", model, "--latents", p["latents"], "--out", p["dec"]),
        ("interp", "--index", p["index"], "--model", model, "--a", 0, "--b", 1,
         "--steps", 3, "--out", p["interp"]),
        ("sample", "--model", model, "--n", 2, "--seed", 1, "--out", p["samp"]),
        ("diag-cos", "--table", p["table"], "--out", p["cos"]),
        ("diag-cov", "--index", p["index"], "--model", model, "--split", "test",
         "--out", p["cov"]),
        ("report", "--index", p["index"], "--model", model, "--shift", p["shift"],
         "--probe-shift", p["probes"] / "probe_speaker.ckpt",
         "--probe-fixed", p["probes"] / "probe_phone.ckpt",
         "--fold", "eval", "--out", p["rep"]),
    ]
    for step in steps:
        rc = run(*step)
        assert rc == 0, f"{step[0]} exited {rc}"
    p["model"] = model
    return p


# -- artifact checks -----------------------------------------------------------


def test_synth_and_extract_outputs(pipe):
    assert (pipe["corp"] / "manifest.jsonl").exists()
    assert (pipe["corp"] / "config.json").exists()
    assert (pipe["feat"] / "manifest.jsonl").exists()
    records = corpus.read_segment_index(pipe["index"])
    assert len(records) == 4 * 5 * (120 // 20)
    assert {r.split for r in records} == {"train", "dev", "test"}
    assert {r.speaker for r in records} == {"spk00", "spk01", "spk02", "spk03"}


def test_config_echo_contents(pipe):
    cfg = json.loads((pipe["vae"] / "config.json").read_text())
    assert cfg["command"] == "train"
    assert cfg["max_epochs"] == 2 and cfg["latent"] == LATENT
    assert cfg["widths"] == WIDTHS


def test_train_outputs(pipe):
    for name in ("best.ckpt", "last.ckpt", "log.csv"):
        assert (pipe["vae"] / name).exists()
    ck = load_checkpoint(pipe["model"])
    assert ck.header["arch"]["kind"] == "vae"
    assert ck.header["arch"]["latent_dim"] == LATENT
    rows = (pipe["vae"] / "log.csv").read_text().strip().splitlines()
    assert rows[0] == "epoch,train_bound,dev_bound,kl,recon,seconds"
    assert len(rows) >= 2  # epoch 0 plus at least one training epoch


def test_probe_outputs(pipe):
    for attr in ("speaker", "phone"):
        ck = load_checkpoint(pipe["probes"] / f"probe_{attr}.ckpt")
        assert ck.header["arch"]["kind"] == "probe"
        assert ck.header["arch"]["attribute"] == attr
        log = (pipe["probes"] / f"probe_{attr}_log.csv").read_text().splitlines()
        assert log[0] == "epoch,train_loss,dev_acc,seconds"
    spk = load_checkpoint(pipe["probes"] / "probe_speaker.ckpt")
    assert spk.header["arch"]["classes"] == ["spk00", "spk01"]


def test_attr_table_and_figures(pipe):
    table = latent.AttributeTable.load(pipe["table"])
    assert table.values("speaker") == ["spk00", "spk01"]  # train speakers only
    assert len(table.values("phone")) >= 2
    for e in table.entries:
        for prefix in ("repr", "avg"):
            fig = pipe["figs"] / f"{prefix}_{e.attribute}_{e.value}.pgm"
            assert fig.exists(), fig


def test_shift_and_modify_outputs(pipe):
    shift = latent.LatentShift.load(pipe["shift"])
    assert (shift.attribute, shift.source, shift.target) == ("speaker", "spk00", "spk01")
    assert shift.vector.shape == (LATENT,)
    pgms = sorted(pipe["mod"].glob("*.pgm"))
    lsfs = sorted(pipe["mod"].glob("*.lsf"))
    assert len(pgms) == 3 and len(lsfs) == 3  # --limit 3
    assert all("_to_spk01" in f.name for f in pgms)
    fm = corpus.read_feature_file(lsfs[0])
    assert fm.values.shape == (20, 80)


def test_encode_csv(pipe):
    with open(pipe["latents"]) as f:
        rows = list(csv.reader(f))
    header, data = rows[0], rows[1:]
    assert header[:4] == ["utt", "start", "speaker", "phone"]
    assert sum(c.startswith("z") for c in header) == LATENT
    assert len(data) == 30  # dev split: 1 speaker x 5 utts x 6 segments
    assert all(r[2] == "spk02" for r in data)


def test_decode_outputs(pipe):
    pgms = sorted(pipe["dec"].glob("*.pgm"))
    lsfs = sorted(pipe["dec"].glob("*.lsf"))
    assert len(pgms) == 30 and len(lsfs) == 30
    fm = corpus.read_feature_file(lsfs[0])
    assert fm.values.min() >= -20.0  # decoded features respect the dB floor


def test_interp_outputs(pipe):
    assert len(list(pipe["interp"].glob("interp_*.pgm"))) == 3
    rows = (pipe["interp"] / "interp.csv").read_text().strip().splitlines()
    assert rows[0] == "step,alpha,log_prior"
    alphas = [float(r.split(",")[1]) for r in rows[1:]]
    assert alphas == [0.0, 0.5, 1.0]


def test_sample_outputs(pipe):
    files = sorted(pipe["samp"].glob("sample_*.pgm"))
    assert len(files) == 2
    g = pgm.read_pgm(files[0])
    assert g.shape == (80, 20)  # transposed view: frequency rows, time columns


def test_diag_outputs(pipe):
    table = latent.AttributeTable.load(pipe["table"])
    cos = (pipe["cos"]).read_text().strip().splitlines()
    assert len(cos) == len(table.entries) + 1
    cov = (pipe["cov"]).read_text().strip().splitlines()
    assert cov[0] == "dim,offdiag_abs_sum"
    assert len(cov) == LATENT + 1
    vals = [float(r.split(",")[1]) for r in cov[1:]]
    assert all(np.isfinite(v) and v >= 0 for v in vals)


def test_report_outputs(pipe):
    txt = (pipe["rep"].parent / (pipe["rep"].name + ".txt")).read_text()
    assert "speaker" in txt and "spk00 -> spk01" in txt
    rows = (pipe["rep"].parent / (pipe["rep"].name + ".csv")).read_text().splitlines()
    assert rows[0] == "condition,p_source,p_target,p_fixed,n"
    assert [r.split(",")[0] for r in rows[1:]] == ["before", "after"]
    for row in rows[1:]:
        cells = row.split(",")
        assert all(0.0 <= float(c) <= 1.0 for c in cells[1:4])
        assert int(cells[4]) >= 1


def test_text_artifacts_hold_plain_python_scalars(pipe):
    # repr() of a numpy scalar ("np.float64(...)") must never reach a file;
    # every number in a CSV/JSON/TXT artifact has to round-trip via float().
    suffixes = {".csv", ".json", ".txt", ".jsonl"}
    checked = 0
    for path in sorted(pipe["root"].rglob("*")):
        if path.suffix in suffixes and path.is_file():
            body = path.read_text()
            assert "np.float" not in body, path
            assert "np.int" not in body, path
            checked += 1
    assert checked > 20


# -- exit codes ----------------------------------------------------------------


def test_no_arguments_is_usage_error(capsys):
    assert run() == 1
    assert "usage error:" in capsys.readouterr().err


def test_unknown_command_is_usage_error():
    assert run("frobnicate") == 1


def test_bad_interp_steps_is_usage_error(pipe, capsys):
    rc = run("interp", "--index", pipe["index"], "--model", pipe["model"],
             "--a", 0, "--b", 1, "--steps", 1, "--out", pipe["interp"])
    assert rc == 1
    assert "--steps" in capsys.readouterr().err


def test_interp_row_out_of_range_is_usage_error(pipe):
    rc = run("interp", "--index", pipe["index"], "--model", pipe["model"],
             "--a", 0, "--b", 10 ** 6, "--out", pipe["interp"])
    assert rc == 1


def test_missing_index_is_data_error(tmp_path, capsys):
    rc = run("train", "--index", tmp_path / "nope.jsonl", "--out", tmp_path / "m")
    assert rc == 2
    assert "data error:" in capsys.readouterr().err


def test_missing_model_is_data_error(pipe, tmp_path):
    rc = run("sample", "--model", tmp_path / "nope.ckpt", "--out", tmp_path / "s")
    assert rc == 2


def test_unknown_shift_value_is_data_error(pipe, tmp_path, capsys):
    rc = run("shift", "--table", pipe["table"], "--attribute", "speaker",
             "--source", "spk99", "--target", "spk01", "--out", tmp_path / "s.json")
    assert rc == 2
    assert "spk99" in capsys.readouterr().err


def test_empty_split_filter_is_data_error(pipe, tmp_path):
    rc = run("encode", "--index", pipe["index"], "--model", pipe["model"],
             "--split", "bogus", "--out", tmp_path / "z.csv")
    assert rc == 2


def test_latent_dim_mismatch_is_data_error(pipe, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("utt,start,speaker,phone,z000\nu,0,s,,0.25\n")
    rc = run("decode", "--model", pipe["model"], "--latents", bad,
             "--out", tmp_path / "dec")
    assert rc == 2
    assert "dim" in capsys.readouterr().err


def test_divergent_training_is_numerical_error(pipe, tmp_path, capsys):
    with np.errstate(all="ignore"):
        rc = run("train", "--index", pipe["index"], "--out", tmp_path / "diverge",
                 "--widths", WIDTHS, "--fc-units", FC, "--latent", LATENT,
                 "--batch-size", 16, "--max-epochs", 1, "--lr", 1e5)
    assert rc == 3
    assert "numerical failure:" in capsys.readouterr().err


def test_module_entrypoint():
    ok = subprocess.run([sys.executable, "-m", "segvae", "--help"],
                        capture_output=True, text=True)
    assert ok.returncode == 0
    assert "synth-data" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "segvae"],
                         capture_output=True, text=True)
    assert bad.returncode == 1
    assert "usage error" in bad.stderr
