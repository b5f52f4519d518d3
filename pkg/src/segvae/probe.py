"""Attribute probes and the before/after posterior shift report.

A probe is the encoder trunk with a softmax head, trained on labeled train
split segments under the same optimizer recipe as the VAE, early-stopped on
held-out accuracy.  Probes judge modification quality: for a source-to-target
shift, the posterior mass they assign to source, target, and the untouched
attribute before and after modification.

Probes never see eval-fold utterances during training; shift reports are
computed on exactly that fold, so every reported segment is held out.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, checkpoint_from_model, save_checkpoint
from .corpus import utterance_folds
from .errors import DataError, UsageError
from .latent import LatentShift, fsum_mean, modify, reconstruct
from .model import ModelConfig, Trunk, _SegmentModelBase
from .nn import tensor as T
from .nn.layers import Linear
from .rng import Rng
from .training import EarlyStopper, TrainConfig, batch_plan


class ProbeModel(_SegmentModelBase):
    """Encoder trunk plus a linear softmax head over attribute values."""

    def __init__(self, trunk_cfg: ModelConfig, attribute: str, classes: list,
                 init_rng: Rng | None = None):
        if len(classes) < 2:
            raise DataError("probe needs at least 2 classes")
        if sorted(classes) != list(classes):
            raise DataError("classes must be sorted")
        self.cfg = trunk_cfg
        self.attribute = attribute
        self.classes = list(classes)
        rng = init_rng if init_rng is not None else Rng.from_seed(0, "probe-init")
        self.trunk = Trunk(trunk_cfg, rng.derive("trunk"), "probe")
        self.head = Linear(trunk_cfg.fc_units, len(classes), rng.derive("head"),
                           trunk_cfg.np_dtype, "probe.head")
        self._all_layers = self.trunk._layers + [self.head]
        self._init_norm()

    def forward(self, x: T.Tensor, train: bool) -> T.Tensor:
        return self.head(self.trunk(x, train))

    def params(self):
        return self.trunk.params() + self.head.params()

    def stats(self):
        return self.trunk.stats() + self.norm_stats()

    def predict_proba(self, segments_db: np.ndarray, batch: int = 512) -> np.ndarray:
        """(N, n_classes) softmax posteriors for raw dB segments."""
        x = np.asarray(segments_db)
        if x.ndim == 2:
            x = x[None]
        out = []
        for i in range(0, x.shape[0], batch):
            logits = self.forward(self.as_input(x[i:i + batch]), train=False)
            out.append(T.softmax(logits.data.astype(np.float64)))
        return np.concatenate(out)

    def class_index(self, value: str) -> int:
        try:
            return self.classes.index(value)
        except ValueError:
            raise DataError(f"probe for {self.attribute!r} has no class {value!r}; "
                            f"classes {self.classes}") from None

    def arch_header(self) -> dict:
        h = self.cfg.to_header()
        h["kind"] = "probe"
        h["attribute"] = self.attribute
        h["classes"] = self.classes
        return h


def probe_checkpoint(probe: ProbeModel, adam=None, rng=None, extra=None) -> Checkpoint:
    ckpt = checkpoint_from_model(probe, adam, rng, extra)
    ckpt.header["arch"] = probe.arch_header()
    return ckpt


def restore_probe(ckpt: Checkpoint) -> ProbeModel:
    arch = dict(ckpt.header["arch"])
    if arch.get("kind") != "probe":
        raise DataError("checkpoint does not hold a probe")
    attribute, classes = arch.pop("attribute"), arch.pop("classes")
    arch["kind"] = "vae"  # trunk config reuses the generative-model schema
    probe = ProbeModel(ModelConfig.from_header(arch), attribute, classes)
    probe.load_arrays(dict(ckpt.params), dict(ckpt.stats))
    return probe


def _accuracy(probe: ProbeModel, xn: np.ndarray, y: np.ndarray, batch: int = 512) -> float:
    hits = 0
    for i in range(0, xn.shape[0], batch):
        logits = probe.forward(T.Tensor(np.ascontiguousarray(xn[i:i + batch])), train=False)
        hits += int((logits.data.argmax(axis=1) == y[i:i + batch]).sum())
    return hits / xn.shape[0]


def train_probe(records: list, values_db: np.ndarray, attribute: str,
                trunk_cfg: ModelConfig, cfg: TrainConfig, out_dir=None):
    """Fit a probe on the fit fold, early-stop on dev-fold accuracy.

    Only train-split segments carrying the attribute label participate.
    Returns (best Checkpoint, log rows [(epoch, train_loss, dev_acc, seconds)]).
    """
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    folds = utterance_folds(records)
    labeled = [(i, getattr(r, attribute)) for i, r in enumerate(records)
               if r.split == "train" and getattr(r, attribute, None) is not None]
    if not labeled:
        raise DataError(f"no train-split segments labeled with {attribute!r}")
    fit_rows = [(i, v) for i, v in labeled if folds[records[i].utt] == "fit"]
    dev_rows = [(i, v) for i, v in labeled if folds[records[i].utt] == "dev"]
    if len(fit_rows) < 2 or not dev_rows:
        raise DataError("probe sub-split left fit or dev fold empty")
    classes = sorted({v for _, v in fit_rows} | {v for _, v in dev_rows})

    probe = ProbeModel(trunk_cfg, attribute, classes,
                       Rng.from_seed(cfg.seed, f"probe-init:{attribute}"))
    fit_idx = np.array([i for i, _ in fit_rows])
    probe.fit_norm_stats(values_db[fit_idx])
    xn_fit = np.ascontiguousarray(probe.normalize(values_db[fit_idx])[:, None])
    y_fit = np.array([classes.index(v) for _, v in fit_rows])
    dev_idx = np.array([i for i, _ in dev_rows])
    xn_dev = np.ascontiguousarray(probe.normalize(values_db[dev_idx])[:, None])
    y_dev = np.array([classes.index(v) for _, v in dev_rows])

    adam = cfg.make_adam(probe.params())
    rng = Rng.from_seed(cfg.seed, f"probe-train:{attribute}")
    stopper = EarlyStopper(cfg.patience)
    stopper.update(0, _accuracy(probe, xn_dev, y_dev))
    # the init state is the incumbent best until an epoch strictly beats it
    best = probe_checkpoint(probe, adam, rng, {
        "train": {"epoch": 0, "best_epoch": 0, "best_dev": stopper.best,
                  "seed": cfg.seed}})
    if out_dir is not None:
        save_checkpoint(out_dir / f"probe_{attribute}.ckpt", best)
    log = []
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        tot_loss = 0.0
        for idx in batch_plan(rng.permutation(len(fit_rows)), cfg.batch_size):
            xb = T.Tensor(np.ascontiguousarray(xn_fit[idx]))
            loss = T.cross_entropy(probe.forward(xb, train=True), y_fit[idx])
            tot_loss += float(loss.data) * idx.shape[0]
            adam.zero_grad()
            loss.backward()
            adam.step()
        acc = _accuracy(probe, xn_dev, y_dev)
        log.append((epoch, tot_loss / len(fit_rows), acc, time.perf_counter() - t0))
        if stopper.update(epoch, acc):
            best = probe_checkpoint(probe, adam, rng, {
                "train": {"epoch": epoch, "best_epoch": epoch, "best_dev": acc,
                          "seed": cfg.seed}})
            if out_dir is not None:
                save_checkpoint(out_dir / f"probe_{attribute}.ckpt", best)
        if stopper.should_stop(epoch):
            break
    return best, log


# -- shift report -----------------------------------------------------------------


@dataclass
class ShiftReport:
    """Mean posteriors before/after applying a shift to held-out segments."""

    shift_attribute: str
    source: str
    target: str
    fixed_attribute: str
    n: int
    before: dict
    after: dict

    COLUMNS = ("source", "target", "fixed")

    def to_csv(self) -> str:
        lines = ["condition,p_source,p_target,p_fixed,n"]
        for name, row in (("before", self.before), ("after", self.after)):
            lines.append(f"{name},{row['source']!r},{row['target']!r},{row['fixed']!r},{self.n}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = (f"shift {self.shift_attribute}: {self.source} -> {self.target}   "
                f"(fixed attribute: {self.fixed_attribute}, n={self.n})")
        cols = (f"{'':8s} {'p(' + self.source + ')':>16s} {'p(' + self.target + ')':>16s} "
                f"{'p(own ' + self.fixed_attribute + ')':>18s}")
        rows = [f"{name:8s} {row['source']:16.4f} {row['target']:16.4f} {row['fixed']:18.4f}"
                for name, row in (("before", self.before), ("after", self.after))]
        return "\n".join([head, cols, *rows]) + "\n"


def posterior_shift_report(vae, probe_shift: ProbeModel, probe_fixed: ProbeModel,
                           records: list, values_db: np.ndarray,
                           shift: LatentShift, fixed_attribute: str) -> ShiftReport:
    """Probe posteriors on reconstructions vs modified decodes, mean mode.

    Segments must carry the shift's source value and a fixed-attribute label.
    Instances are processed in canonical (utt, start) order and means use
    correctly-rounded sums, so the report is invariant to input ordering.
    """
    if probe_shift.attribute != shift.attribute:
        raise UsageError(f"shift probe classifies {probe_shift.attribute!r}, "
                         f"shift moves {shift.attribute!r}")
    if probe_fixed.attribute != fixed_attribute:
        raise UsageError("fixed probe attribute mismatch")
    pairs = [(r, values_db[i]) for i, r in enumerate(records)
             if getattr(r, shift.attribute, None) == shift.source
             and getattr(r, fixed_attribute, None) is not None]
    if not pairs:
        raise DataError(f"no segments with {shift.attribute}={shift.source} "
                        f"and a {fixed_attribute} label")
    pairs.sort(key=lambda p: (p[0].utt, p[0].start))
    recs = [r for r, _ in pairs]
    x = np.stack([v for _, v in pairs])

    before = reconstruct(vae, x, mode="mean")
    after = modify(vae, x, shift, mode="mean")
    i_src = probe_shift.class_index(shift.source)
    i_tgt = probe_shift.class_index(shift.target)
    i_fix = np.array([probe_fixed.class_index(getattr(r, fixed_attribute)) for r in recs])
    rows = {}
    for name, batch_x in (("before", before), ("after", after)):
        p_shift = probe_shift.predict_proba(batch_x)
        p_fixed = probe_fixed.predict_proba(batch_x)
        rows[name] = {
            "source": float(fsum_mean(p_shift[:, [i_src]])[0]),
            "target": float(fsum_mean(p_shift[:, [i_tgt]])[0]),
            "fixed": float(fsum_mean(p_fixed[np.arange(len(recs)), i_fix][:, None])[0]),
        }
    return ShiftReport(shift.attribute, shift.source, shift.target, fixed_attribute,
                       len(recs), rows["before"], rows["after"])


def eval_fold_records(records: list) -> list:
    """Train-split records in held-out (eval-fold) utterances."""
    folds = utterance_folds(records)
    return [r for r in records if r.split == "train" and folds[r.utt] == "eval"]
