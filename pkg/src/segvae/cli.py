"""Command line interface.

One subcommand per pipeline stage; every command takes an explicit --seed
where randomness is involved and writes the full effective configuration as
JSON next to its outputs.  Exit codes: 0 success, 1 usage error, 2 data
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import corpus, features, latent, pgm, probe, synth
from .errors import DataError, NumericalError, UsageError
from .model import KIND_AE, KIND_VAE, ModelConfig, build_model
from .rng import Rng
from .training import TrainConfig, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _echo_config(out, args: dict) -> None:
    """Write the effective post-default configuration next to the outputs."""
    out = Path(out)
    path = out / "config.json" if out.is_dir() else Path(str(out) + ".config.json")
    with open(path, "w") as f:
        json.dump({k: str(v) if isinstance(v, Path) else v for k, v in sorted(args.items())},
                  f, indent=2, sort_keys=True)
        f.write("\n")


def _train_config(ns) -> TrainConfig:
    return TrainConfig(batch_size=ns.batch_size, lr=ns.lr, patience=ns.patience,
                       max_epochs=ns.max_epochs, l2=ns.l2, seed=ns.seed)


def _add_train_flags(p, max_epochs: int) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--max-epochs", type=int, default=max_epochs)


def _load_index(ns):
    records = corpus.read_segment_index(ns.index)
    base = Path(ns.features) if ns.features else Path(ns.index).parent
    return records, base


def _filter_records(records, split=None, fold=None):
    if split:
        records = [r for r in records if r.split == split]
    if fold and fold != "all":
        folds = corpus.utterance_folds(records)
        records = [r for r in records if folds[r.utt] == fold]
    if not records:
        raise DataError("no segments left after split/fold filtering")
    return records


def _model_config_from_data(records, base, ns) -> ModelConfig:
    fm = corpus.read_feature_file(base / records[0].feats)
    widths = tuple(int(w) for w in ns.widths.split(","))
    return ModelConfig(seg_len=records[0].length, n_features=fm.n_bins,
                       feature_kind=fm.feature_kind, conv_channels=widths,
                       fc_units=ns.fc_units, latent_dim=ns.latent, kind=ns.arch)


# -- subcommands --------------------------------------------------------------


def cmd_synth_data(ns):
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    synth.synth_corpus(out, n_speakers=ns.speakers, n_phones=ns.phones,
                       utts_per_speaker=ns.utts, utt_frames=ns.utt_frames, seed=ns.seed)
    _echo_config(out, {"command": "synth-data", "out": ns.out, "speakers": ns.speakers,
                       "phones": ns.phones, "utts": ns.utts,
                       "utt_frames": ns.utt_frames, "seed": ns.seed})


def cmd_extract(ns):
    manifest_path = Path(ns.manifest)
    records = corpus.read_manifest(manifest_path, required=("audio", "align", "speaker", "split"))
    corpus.check_split_disjoint(records)
    src = manifest_path.parent
    out = Path(ns.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "align").mkdir(parents=True, exist_ok=True)
    hop = ns.hop if ns.hop else ns.seg_len

    feat_records, seg_records = [], []
    for r in sorted(records, key=lambda r: Path(r["audio"]).stem):
        utt = Path(r["audio"]).stem
        wave = features.Waveform(corpus.read_wav(src / r["audio"]))
        fm = features.stft_magnitude_db(wave)
        if ns.feature_kind == features.KIND_FBANK:
            fm = features.mel_filterbank(fm)
        feat_rel = f"features/{utt}.lsf"
        corpus.write_feature_file(out / feat_rel, fm)
        spans = corpus.read_alignment(src / r["align"])
        align_rel = f"align/{utt}.ali"
        corpus.write_alignment(out / align_rel, spans)
        feat_records.append({"feats": feat_rel, "align": align_rel,
                             "speaker": r["speaker"], "split": r["split"]})
        frame_phones = corpus.frame_phone_labels(spans, fm.n_frames)
        for seg in features.segment_frames(fm, ns.seg_len, hop, utt=utt):
            seg = features.label_segment(seg, frame_phones, r["speaker"])
            seg_records.append(corpus.SegmentRecord(
                utt, feat_rel, seg.start, ns.seg_len, r["speaker"],
                seg.labels.get("phone"), r["split"]))
    corpus.write_manifest(out / "manifest.jsonl", feat_records)
    corpus.write_segment_index(out / "segments.jsonl", seg_records)
    _echo_config(out, {"command": "extract", "manifest": ns.manifest, "out": ns.out,
                       "feature_kind": ns.feature_kind, "seg_len": ns.seg_len, "hop": hop})


def cmd_train(ns):
    records, base = _load_index(ns)
    train_recs = _filter_records(records, split="train")
    dev_recs = _filter_records(records, split="dev")
    train_db = corpus.load_segment_matrix(train_recs, base)
    dev_db = corpus.load_segment_matrix(dev_recs, base)
    cfg = _train_config(ns)
    mcfg = _model_config_from_data(train_recs, base, ns)
    model = build_model(mcfg, Rng.from_seed(ns.seed, "init"))
    out = Path(ns.out)
    result = train(model, train_db, dev_db, cfg, out_dir=out, resume=ns.resume)
    _echo_config(out, {"command": "train", "index": ns.index, "out": ns.out,
                       "arch": ns.arch, "widths": ns.widths, "fc_units": ns.fc_units,
                       "latent": ns.latent, "seed": ns.seed, "batch_size": ns.batch_size,
                       "lr": ns.lr, "l2": ns.l2, "patience": ns.patience,
                       "max_epochs": ns.max_epochs, "resume": ns.resume})
    print(f"best epoch {result.best_epoch} dev bound {result.best_dev:.4f} "
          f"(stopped after epoch {result.last_epoch})")


def cmd_probe_train(ns):
    records, base = _load_index(ns)
    values_db = corpus.load_segment_matrix(records, base)
    cfg = _train_config(ns)
    ns.arch = KIND_VAE  # probes reuse the encoder trunk configuration
    mcfg = _model_config_from_data(records, base, ns)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    best, log = probe.train_probe(records, values_db, ns.attribute, mcfg, cfg, out_dir=out)
    with open(out / f"probe_{ns.attribute}_log.csv", "w") as f:
        f.write("epoch,train_loss,dev_acc,seconds\n")
        for row in log:
            f.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}\n")
    _echo_config(out, {"command": "probe-train", "index": ns.index, "out": ns.out,
                       "attribute": ns.attribute, "widths": ns.widths,
                       "fc_units": ns.fc_units, "latent": ns.latent, "seed": ns.seed,
                       "batch_size": ns.batch_size, "lr": ns.lr, "l2": ns.l2,
                       "patience": ns.patience, "max_epochs": ns.max_epochs})
    acc = best.header["train"].get("best_dev")
    print(f"probe {ns.attribute}: dev accuracy {acc}")


def _load_model(path):
    return ckpt_io.restore_model(ckpt_io.load_checkpoint(path))


def cmd_encode(ns):
    model = _load_model(ns.model)
    records, base = _load_index(ns)
    if ns.split:
        records = _filter_records(records, split=ns.split)
    x = corpus.load_segment_matrix(records, base)
    enc = model.encode_np(x)
    if isinstance(enc, tuple):
        mu, lv = enc
        z = mu if not ns.sample else mu + np.exp(0.5 * lv) * Rng.from_seed(
            ns.seed, "encode").normal(mu.shape, mu.dtype)
    else:
        z = enc
    out = Path(ns.out)
    with open(out, "w") as f:
        dim = z.shape[1]
        f.write("utt,start,speaker,phone," + ",".join(f"z{d:03d}" for d in range(dim)) + "\n")
        for r, row in zip(records, z):
            f.write(f"{r.utt},{r.start},{r.speaker},{r.phone or ''},"
                    + ",".join(repr(float(v)) for v in row) + "\n")
    _echo_config(out, {"command": "encode", "model": ns.model, "index": ns.index,
                       "split": ns.split, "sample": ns.sample, "seed": ns.seed,
                       "out": ns.out})


def _read_latents_csv(path):
    with open(path) as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty latent file")
        zcols = [i for i, name in enumerate(header) if name.startswith("z")]
        if not zcols:
            raise DataError(f"{path}: no z columns found")
        names, rows = [], []
        for row in reader:
            names.append("_".join(row[i] for i in range(min(2, zcols[0]))) or f"row{len(rows):04d}")
            rows.append([float(row[i]) for i in zcols])
    return names, np.array(rows, dtype=np.float64)


def cmd_decode(ns):
    model = _load_model(ns.model)
    names, z = _read_latents_csv(ns.latents)
    if z.shape[1] != model.cfg.latent_dim:
        raise DataError(f"latents have dim {z.shape[1]}, model expects {model.cfg.latent_dim}")
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    mu, _ = model.decode_np(z)
    db = np.maximum(model.denormalize(mu), features.DB_FLOOR)
    for i, name in enumerate(names):
        pgm.write_pgm(out / f"{name}.pgm", db[i])
        corpus.write_feature_file(out / f"{name}.lsf",
                                  features.FrameMatrix(db[i], model.cfg.feature_kind))
    _echo_config(out, {"command": "decode", "model": ns.model, "latents": ns.latents,
                       "out": ns.out})


def cmd_attr(ns):
    model = _load_model(ns.model)
    records, base = _load_index(ns)
    records = _filter_records(records, split=ns.split, fold=ns.fold)
    x = corpus.load_segment_matrix(records, base)
    attrs = tuple(ns.attribute) if ns.attribute else ("speaker", "phone")
    table = latent.build_attribute_table(model, records, x, attrs, j=ns.j, seed=ns.seed)
    table.save(ns.out)
    if ns.figures:
        figs = Path(ns.figures)
        figs.mkdir(parents=True, exist_ok=True)
        for e in table.entries:
            pgm.write_pgm(figs / f"repr_{e.attribute}_{e.value}.pgm",
                          latent.decode_attribute_repr(model, e.mean))
            idx = [i for i, r in enumerate(records) if getattr(r, e.attribute, None) == e.value]
            pgm.write_pgm(figs / f"avg_{e.attribute}_{e.value}.pgm",
                          latent.feature_space_average(x[idx]))
    _echo_config(Path(ns.out), {"command": "attr", "model": ns.model, "index": ns.index,
                                "split": ns.split, "fold": ns.fold,
                                "attribute": list(attrs), "j": ns.j, "seed": ns.seed,
                                "out": ns.out, "figures": ns.figures})


def cmd_shift(ns):
    table = latent.AttributeTable.load(ns.table)
    shift = latent.make_shift(table, ns.attribute, ns.source, ns.target)
    shift.save(ns.out)
    _echo_config(Path(ns.out), {"command": "shift", "table": ns.table,
                                "attribute": ns.attribute, "source": ns.source,
                                "target": ns.target, "out": ns.out})


def cmd_modify(ns):
    model = _load_model(ns.model)
    shift = latent.LatentShift.load(ns.shift)
    records, base = _load_index(ns)
    records = _filter_records(records, split=ns.split, fold=ns.fold)
    records = [r for r in records if getattr(r, shift.attribute, None) == shift.source]
    if not records:
        raise DataError(f"no segments with {shift.attribute}={shift.source}")
    if ns.limit:
        records = records[: ns.limit]
    x = corpus.load_segment_matrix(records, base)
    out_db = latent.modify(model, x, shift, mode=ns.mode, seed=ns.seed)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    for r, seg in zip(records, out_db):
        stem = f"{r.utt}_{r.start:05d}_to_{shift.target}"
        pgm.write_pgm(out / f"{stem}.pgm", seg)
        corpus.write_feature_file(out / f"{stem}.lsf",
                                  features.FrameMatrix(seg, model.cfg.feature_kind))
    _echo_config(out, {"command": "modify", "model": ns.model, "shift": ns.shift,
                       "index": ns.index, "split": ns.split, "fold": ns.fold,
                       "mode": ns.mode, "seed": ns.seed, "limit": ns.limit,
                       "out": ns.out})


def cmd_interp(ns):
    model = _load_model(ns.model)
    records, base = _load_index(ns)
    if not (0 <= ns.a < len(records) and 0 <= ns.b < len(records)):
        raise UsageError(f"--a/--b must be row numbers in [0, {len(records)})")
    if ns.steps < 2:
        raise UsageError("--steps must be >= 2")
    x = corpus.load_segment_matrix([records[ns.a], records[ns.b]], base)
    mu, _ = latent._posterior(model, x)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in range(ns.steps):
        alpha = k / (ns.steps - 1)
        z = latent.interpolate(mu[0], mu[1], 1.0 - alpha)  # alpha 0 -> endpoint a
        mu_x, _ = model.decode_np(z)
        db = np.maximum(model.denormalize(mu_x[0]), features.DB_FLOOR)
        pgm.write_pgm(out / f"interp_{k:02d}.pgm", db)
        rows.append((k, alpha, latent.log_prior(z)))
    with open(out / "interp.csv", "w") as f:
        f.write("step,alpha,log_prior\n")
        for k, alpha, lp in rows:
            f.write(f"{k},{alpha!r},{lp!r}\n")
    _echo_config(out, {"command": "interp", "model": ns.model, "index": ns.index,
                       "a": ns.a, "b": ns.b, "steps": ns.steps, "out": ns.out})


def cmd_sample(ns):
    model = _load_model(ns.model)
    db = latent.sample_prior(model, ns.n, seed=ns.seed)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(ns.n):
        pgm.write_pgm(out / f"sample_{i:03d}.pgm", db[i])
    _echo_config(out, {"command": "sample", "model": ns.model, "n": ns.n,
                       "seed": ns.seed, "out": ns.out})


def cmd_diag_cos(ns):
    table = latent.AttributeTable.load(ns.table)
    labels, m = latent.cosine_matrix(table)
    with open(ns.out, "w") as f:
        f.write("label," + ",".join(labels) + "\n")
        for lab, row in zip(labels, m):
            f.write(lab + "," + ",".join(f"{v:.6f}" for v in row) + "\n")
    _echo_config(Path(ns.out), {"command": "diag-cos", "table": ns.table, "out": ns.out})


def cmd_diag_cov(ns):
    model = _load_model(ns.model)
    records, base = _load_index(ns)
    records = _filter_records(records, split=ns.split)
    x = corpus.load_segment_matrix(records, base)
    profile = latent.offdiag_cov_profile(model, x)
    with open(ns.out, "w") as f:
        f.write("dim,offdiag_abs_sum\n")
        for d, v in enumerate(profile):
            f.write(f"{d},{float(v)!r}\n")
    _echo_config(Path(ns.out), {"command": "diag-cov", "model": ns.model,
                                "index": ns.index, "split": ns.split, "out": ns.out})


def cmd_report(ns):
    model = _load_model(ns.model)
    shift = latent.LatentShift.load(ns.shift)
    probe_shift = probe.restore_probe(ckpt_io.load_checkpoint(ns.probe_shift))
    probe_fixed = probe.restore_probe(ckpt_io.load_checkpoint(ns.probe_fixed))
    records, base = _load_index(ns)
    if ns.fold == "eval":
        records = probe.eval_fold_records(records)
    else:
        records = _filter_records(records, split="train", fold=ns.fold)
    matching = [r for r in records if getattr(r, shift.attribute, None) == shift.source
                and getattr(r, probe_fixed.attribute, None) is not None]
    if ns.limit:
        matching = matching[: ns.limit]
    if not matching:
        raise DataError(f"no eligible segments with {shift.attribute}={shift.source}")
    x = corpus.load_segment_matrix(matching, base)
    rep = probe.posterior_shift_report(model, probe_shift, probe_fixed, matching, x,
                                       shift, probe_fixed.attribute)
    out = Path(ns.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(str(out) + ".csv", "w") as f:
        f.write(rep.to_csv())
    with open(str(out) + ".txt", "w") as f:
        f.write(rep.to_text())
    _echo_config(Path(str(out) + ".csv"),
                 {"command": "report", "model": ns.model, "shift": ns.shift,
                  "probe_shift": ns.probe_shift, "probe_fixed": ns.probe_fixed,
                  "index": ns.index, "fold": ns.fold, "limit": ns.limit, "out": ns.out})
    print(rep.to_text(), end="")


# -- parser -------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="segvae", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def with_index(q):
        q.add_argument("--index", required=True, help="segment index jsonl")
        q.add_argument("--features", default=None, help="base dir for feature paths "
                       "(default: the index file's directory)")

    q = sub.add_parser("synth-data", help="generate the synthetic corpus")
    q.add_argument("--out", required=True)
    q.add_argument("--speakers", type=int, default=6)
    q.add_argument("--phones", type=int, default=10)
    q.add_argument("--utts", type=int, default=10)
    q.add_argument("--utt-frames", type=int, default=1100)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(fn=cmd_synth_data)

    q = sub.add_parser("extract", help="audio manifest -> feature files + segment index")
    q.add_argument("--manifest", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--feature-kind", choices=[features.KIND_SPEC, features.KIND_FBANK],
                   default=features.KIND_FBANK)
    q.add_argument("--seg-len", type=int, default=20)
    q.add_argument("--hop", type=int, default=0, help="segment hop (default: seg-len)")
    q.set_defaults(fn=cmd_extract)

    q = sub.add_parser("train", help="train the VAE or the AE baseline")
    with_index(q)
    q.add_argument("--out", required=True)
    q.add_argument("--arch", choices=[KIND_VAE, KIND_AE], default=KIND_VAE)
    q.add_argument("--widths", default="64,128,256")
    q.add_argument("--fc-units", type=int, default=512)
    q.add_argument("--latent", type=int, default=128)
    q.add_argument("--resume", action="store_true")
    _add_train_flags(q, max_epochs=500)
    q.set_defaults(fn=cmd_train)

    q = sub.add_parser("probe-train", help="train an attribute probe classifier")
    with_index(q)
    q.add_argument("--out", required=True)
    q.add_argument("--attribute", required=True, choices=["speaker", "phone"])
    q.add_argument("--widths", default="64,128,256")
    q.add_argument("--fc-units", type=int, default=512)
    q.add_argument("--latent", type=int, default=128)
    _add_train_flags(q, max_epochs=100)
    q.set_defaults(fn=cmd_probe_train)

    q = sub.add_parser("encode", help="segments -> latent CSV")
    with_index(q)
    q.add_argument("--model", required=True)
    q.add_argument("--split", default=None)
    q.add_argument("--sample", action="store_true")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_encode)

    q = sub.add_parser("decode", help="latent CSV -> feature files + figures")
    q.add_argument("--model", required=True)
    q.add_argument("--latents", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_decode)

    q = sub.add_parser("attr", help="estimate attribute representations")
    with_index(q)
    q.add_argument("--model", required=True)
    q.add_argument("--attribute", action="append", choices=["speaker", "phone"])
    q.add_argument("--split", default="train")
    q.add_argument("--fold", default="fit", choices=["fit", "dev", "eval", "all"])
    q.add_argument("--j", type=int, default=0, help="posterior samples per segment "
                   "(0 = exact mode)")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--figures", default=None, help="also decode each entry to PGM here")
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_attr)

    q = sub.add_parser("shift", help="difference of two attribute representations")
    q.add_argument("--table", required=True)
    q.add_argument("--attribute", required=True)
    q.add_argument("--source", required=True)
    q.add_argument("--target", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_shift)

    q = sub.add_parser("modify", help="apply a latent shift to matching segments")
    with_index(q)
    q.add_argument("--model", required=True)
    q.add_argument("--shift", required=True)
    q.add_argument("--split", default="train")
    q.add_argument("--fold", default="all", choices=["fit", "dev", "eval", "all"])
    q.add_argument("--mode", choices=["mean", "sample"], default="mean")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--limit", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_modify)

    q = sub.add_parser("interp", help="decode a latent interpolation path")
    with_index(q)
    q.add_argument("--model", required=True)
    q.add_argument("--a", type=int, required=True, help="index row of endpoint a")
    q.add_argument("--b", type=int, required=True, help="index row of endpoint b")
    q.add_argument("--steps", type=int, default=5)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_interp)

    q = sub.add_parser("sample", help="decode prior draws")
    q.add_argument("--model", required=True)
    q.add_argument("--n", type=int, default=5)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_sample)

    q = sub.add_parser("diag-cos", help="cosine similarity matrix of table entries")
    q.add_argument("--table", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_diag_cos)

    q = sub.add_parser("diag-cov", help="off-diagonal covariance profile")
    with_index(q)
    q.add_argument("--model", required=True)
    q.add_argument("--split", default="test")
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_diag_cov)

    q = sub.add_parser("report", help="before/after probe posteriors for a shift")
    with_index(q)
    q.add_argument("--model", required=True)
    q.add_argument("--shift", required=True)
    q.add_argument("--probe-shift", required=True, help="probe for the shifted attribute")
    q.add_argument("--probe-fixed", required=True, help="probe for the untouched attribute")
    q.add_argument("--fold", default="eval", choices=["fit", "dev", "eval", "all"])
    q.add_argument("--limit", type=int, default=0)
    q.add_argument("--out", required=True, help="output prefix (.csv/.txt added)")
    q.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        ns.fn(ns)
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
