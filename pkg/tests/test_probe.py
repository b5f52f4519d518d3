"""Attribute probes: training folds, checkpointing, and the shift report."""

import numpy as np
import pytest

from conftest import random_db, tiny_config, tiny_model
from segvae.checkpoint import load_checkpoint, save_checkpoint
from segvae.corpus import SegmentRecord
from segvae.errors import DataError, UsageError
from segvae.latent import LatentShift, make_shift, build_attribute_table
from segvae.probe import (ProbeModel, eval_fold_records, posterior_shift_report,
                          probe_checkpoint, restore_probe, train_probe)
from segvae.rng import Rng
from segvae.training import TrainConfig


def _rec(utt, start, speaker, phone, split="train"):
    return SegmentRecord(utt=utt, feats=f"features/{utt}.lsf", start=start,
                         length=8, speaker=speaker, phone=phone, split=split)


def _separable_data(n_utts=5, segs_per_utt=4, gap_db=15.0):
    """Two speakers whose segments differ by a constant dB offset."""
    records, blocks = [], []
    k = 0
    for s, spk in enumerate(("s0", "s1")):
        for u in range(n_utts):
            for g in range(segs_per_utt):
                records.append(_rec(f"{spk}_u{u}", g * 8, spk, f"p{g % 2}"))
                blocks.append(random_db((1, 8, 6), seed=1000 + k) + s * gap_db)
                k += 1
    return records, np.concatenate(blocks).astype(np.float32)


def _probe(classes=("a", "b", "c"), seed=0):
    return ProbeModel(tiny_config(), "speaker", sorted(classes),
                      Rng.from_seed(seed, "probe-init"))


# -- the model --------------------------------------------------------------------


def test_probe_validation():
    with pytest.raises(DataError, match="at least 2"):
        ProbeModel(tiny_config(), "speaker", ["only"])
    with pytest.raises(DataError, match="sorted"):
        ProbeModel(tiny_config(), "speaker", ["b", "a"])


def test_predict_proba_rows_sum_to_one():
    p = _probe()
    x = random_db((5, 8, 6), seed=3)
    p.fit_norm_stats(x)
    probs = p.predict_proba(x)
    assert probs.shape == (5, 3)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert probs.min() > 0.0
    assert p.predict_proba(x[0]).shape == (1, 3)


def test_class_index():
    p = _probe()
    assert p.class_index("b") == 1
    with pytest.raises(DataError, match="no class 'zz'"):
        p.class_index("zz")


def test_probe_checkpoint_round_trip(tmp_path):
    p = _probe()
    x = random_db((4, 8, 6), seed=5)
    p.fit_norm_stats(x)
    ckpt = probe_checkpoint(p)
    save_checkpoint(tmp_path / "p.ckpt", ckpt)
    back = restore_probe(load_checkpoint(tmp_path / "p.ckpt"))
    assert back.attribute == "speaker"
    assert back.classes == ["a", "b", "c"]
    assert np.array_equal(back.predict_proba(x), p.predict_proba(x))


def test_restore_probe_rejects_vae_checkpoint(tmp_path):
    from segvae.checkpoint import checkpoint_from_model
    m = tiny_model()
    save_checkpoint(tmp_path / "m.ckpt", checkpoint_from_model(m, None, None, None))
    with pytest.raises(DataError, match="probe"):
        restore_probe(load_checkpoint(tmp_path / "m.ckpt"))


# -- fold plumbing ------------------------------------------------------------------


def test_eval_fold_records():
    records, _ = _separable_data()
    ev = eval_fold_records(records)
    # position 4 of 5 sorted utterances per speaker -> exactly one utt each
    assert {r.utt for r in ev} == {"s0_u4", "s1_u4"}
    assert len(ev) == 8
    # non-train records never appear
    extra = [_rec("dev_u0", 0, "s9", "p0", split="dev")]
    assert {r.utt for r in eval_fold_records(records + extra)} == {"s0_u4", "s1_u4"}


# -- training ---------------------------------------------------------------------


def test_train_probe_learns_separable_classes(tmp_path):
    records, x = _separable_data()
    cfg = TrainConfig(batch_size=8, lr=0.03, max_epochs=20, patience=10, seed=0)
    best, log = train_probe(records, x, "speaker", tiny_config(), cfg, out_dir=tmp_path)
    assert best.header["arch"]["attribute"] == "speaker"
    assert best.header["arch"]["classes"] == ["s0", "s1"]
    assert best.header["train"]["best_dev"] == 1.0
    assert best.header["train"]["best_epoch"] > 0  # learning actually happened
    assert (tmp_path / "probe_speaker.ckpt").is_file()
    assert all(len(row) == 4 for row in log)
    assert [row[0] for row in log] == list(range(1, len(log) + 1))
    # the restored probe separates the held-out eval fold perfectly
    probe = restore_probe(load_checkpoint(tmp_path / "probe_speaker.ckpt"))
    ev_idx = [i for i, r in enumerate(records) if r.utt.endswith("u4")]
    probs = probe.predict_proba(x[ev_idx])
    pred = np.array(probe.classes)[probs.argmax(axis=1)]
    assert (pred == [records[i].speaker for i in ev_idx]).all()


def test_train_probe_is_deterministic():
    records, x = _separable_data()
    cfg = TrainConfig(batch_size=8, max_epochs=3, patience=6, seed=0)
    a, la = train_probe(records, x, "speaker", tiny_config(), cfg)
    b, lb = train_probe(records, x, "speaker", tiny_config(), cfg)
    assert [r[:3] for r in la] == [r[:3] for r in lb]
    assert all(np.array_equal(pa, pb) for (_, pa), (_, pb) in zip(a.params, b.params))


def test_train_probe_ignores_unlabeled_and_nontrain():
    records, x = _separable_data()
    # phone probe: strip labels from one speaker's segments entirely
    for r in records:
        if r.speaker == "s1":
            r.phone = None
    cfg = TrainConfig(batch_size=8, max_epochs=2, patience=6, seed=0)
    best, _ = train_probe(records, x, "phone", tiny_config(), cfg)
    assert best.header["arch"]["classes"] == ["p0", "p1"]


def test_train_probe_errors():
    records, x = _separable_data()
    cfg = TrainConfig(batch_size=8, max_epochs=2, patience=6, seed=0)
    for r in records:
        r.phone = None
    with pytest.raises(DataError, match="no train-split segments"):
        train_probe(records, x, "phone", tiny_config(), cfg)
    # two utterances per speaker -> positions 0,1 are both fit, dev empty
    few = [r for r in records if r.utt.endswith(("u0", "u1"))]
    xf = x[[i for i, r in enumerate(records) if r.utt.endswith(("u0", "u1"))]]
    with pytest.raises(DataError, match="fold empty"):
        train_probe(few, xf, "speaker", tiny_config(), cfg)


# -- shift report ------------------------------------------------------------------


def _report_setup():
    records, x = _separable_data()
    vae = tiny_model()
    vae.fit_norm_stats(x)
    table = build_attribute_table(vae, records, x)
    p_spk = ProbeModel(tiny_config(), "speaker", ["s0", "s1"])
    p_ph = ProbeModel(tiny_config(), "phone", ["p0", "p1"])
    for p in (p_spk, p_ph):
        p.fit_norm_stats(x)
    return records, x, vae, table, p_spk, p_ph


def test_shift_report_structure_and_counts():
    records, x, vae, table, p_spk, p_ph = _report_setup()
    sh = make_shift(table, "speaker", "s0", "s1")
    rep = posterior_shift_report(vae, p_spk, p_ph, records, x, sh, "phone")
    assert rep.n == sum(1 for r in records if r.speaker == "s0" and r.phone is not None)
    for row in (rep.before, rep.after):
        assert set(row) == {"source", "target", "fixed"}
        assert all(0.0 <= v <= 1.0 for v in row.values())
    text = rep.to_text()
    assert "s0 -> s1" in text and "before" in text and "after" in text
    csv = rep.to_csv()
    assert csv.splitlines()[0] == "condition,p_source,p_target,p_fixed,n"
    assert len(csv.splitlines()) == 3


def test_zero_vector_shift_leaves_report_unchanged():
    records, x, vae, table, p_spk, p_ph = _report_setup()
    sh = LatentShift("speaker", "s0", "s1", np.zeros(vae.cfg.latent_dim))
    rep = posterior_shift_report(vae, p_spk, p_ph, records, x, sh, "phone")
    assert rep.before == rep.after  # modify == reconstruct, bit for bit


def test_shift_report_invariant_to_input_order():
    records, x, vae, table, p_spk, p_ph = _report_setup()
    sh = make_shift(table, "speaker", "s0", "s1")
    a = posterior_shift_report(vae, p_spk, p_ph, records, x, sh, "phone")
    perm = Rng.from_seed(3, "t").permutation(len(records))
    b = posterior_shift_report(vae, p_spk, p_ph, [records[i] for i in perm],
                               x[perm], sh, "phone")
    assert a.before == b.before and a.after == b.after and a.n == b.n


def test_shift_report_validation():
    records, x, vae, table, p_spk, p_ph = _report_setup()
    sh = make_shift(table, "speaker", "s0", "s1")
    with pytest.raises(UsageError, match="shift probe"):
        posterior_shift_report(vae, p_ph, p_spk, records, x, sh, "phone")
    with pytest.raises(UsageError, match="fixed probe"):
        posterior_shift_report(vae, p_spk, p_ph, records, x, sh, "speaker")
    missing = LatentShift("speaker", "s7", "s1", np.zeros(vae.cfg.latent_dim))
    with pytest.raises(DataError, match="no segments"):
        posterior_shift_report(vae, p_spk, p_ph, records, x, missing, "phone")
