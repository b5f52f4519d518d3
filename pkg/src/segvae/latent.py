"""Latent attribute arithmetic: representations, shifts, modification.

An attribute representation is the average latent of the segments carrying an
attribute value; a shift is the difference between two such representations;
modifying a segment means encoding it, adding a shift, and decoding.

Exactness contract.  Latent analysis runs in float64 on a fixed 2^-20 grid:
attribute means are snapped to the grid when estimated, and apply_shift
snaps its input before adding.  Grid values here are integers below 2^30
times 2^-20, and float64 adds and subtracts of such numbers are exact, so
shift antisymmetry, composition along value chains, and apply-then-undo round
trips hold bit for bit rather than approximately.  The grid resolution (1e-6)
sits far below both estimation noise and the float32 cast the decoder applies
anyway.

Averages in exact mode use correctly-rounded per-dimension summation
(math.fsum), which makes them invariant to segment ordering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError
from .features import DB_FLOOR
from .rng import Rng

GRID = float(2 ** 20)

TABLE_FORMAT = "segvae-attribute-table"
SHIFT_FORMAT = "segvae-latent-shift"


def snap(z: np.ndarray) -> np.ndarray:
    """Round float64 values to the 2^-20 grid shared by all shift arithmetic."""
    return np.round(np.asarray(z, dtype=np.float64) * GRID) / GRID


def fsum_mean(rows: np.ndarray) -> np.ndarray:
    """Permutation-invariant column means: correctly rounded float64 sums."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise DataError("need a non-empty (N, D) array")
    n = rows.shape[0]
    return np.array([math.fsum(rows[:, d]) / n for d in range(rows.shape[1])])


def _posterior(model, segments_db: np.ndarray):
    """(mu, log_var) as float64; a deterministic AE contributes zero variance."""
    enc = model.encode_np(segments_db)
    if isinstance(enc, tuple):
        mu, lv = enc
        return mu.astype(np.float64), lv.astype(np.float64)
    code = enc.astype(np.float64)
    return code, np.full_like(code, -np.inf)


def estimate_attribute_repr(model, segments_db: np.ndarray, j: int = 0,
                            seed: int = 0) -> np.ndarray:
    """Average latent representation of a set of segments, snapped to the grid.

    j = 0 selects exact mode: the per-segment posterior means are averaged
    directly (the infinite-sample limit).  j > 0 averages j posterior draws
    per segment instead, reproducing the finite-sample estimator.
    """
    mu, lv = _posterior(model, segments_db)
    if j < 0:
        raise UsageError("j must be >= 0")
    if j == 0:
        return snap(fsum_mean(mu))
    n, d = mu.shape
    sigma = np.exp(0.5 * lv)
    eps = Rng.from_seed(seed, "attr-sample").normal((n, j, d))
    draws = (mu[:, None, :] + sigma[:, None, :] * eps).reshape(n * j, d)
    return snap(fsum_mean(draws))


@dataclass
class AttributeEntry:
    attribute: str
    value: str
    count: int
    mean: np.ndarray  # float64, grid-snapped


class AttributeTable:
    """Attribute representations keyed by (attribute, value)."""

    def __init__(self, entries: list[AttributeEntry], j_samples: int, latent_dim: int):
        self.j_samples = int(j_samples)
        self.latent_dim = int(latent_dim)
        self.entries = sorted(entries, key=lambda e: (e.attribute, e.value))
        self._by_key = {(e.attribute, e.value): e for e in self.entries}
        if len(self._by_key) != len(self.entries):
            raise DataError("duplicate (attribute, value) entries")
        for e in self.entries:
            if e.mean.shape != (self.latent_dim,):
                raise DataError(f"entry {e.attribute}:{e.value} has wrong dimension")

    def get(self, attribute: str, value: str) -> AttributeEntry:
        key = (attribute, value)
        if key not in self._by_key:
            have = sorted(v for a, v in self._by_key if a == attribute)
            raise DataError(f"no entry for {attribute}:{value}; known values {have}")
        return self._by_key[key]

    def values(self, attribute: str) -> list:
        return [e.value for e in self.entries if e.attribute == attribute]

    def attributes(self) -> list:
        return sorted({e.attribute for e in self.entries})

    def save(self, path) -> None:
        doc = {"format": TABLE_FORMAT, "j_samples": self.j_samples,
               "latent_dim": self.latent_dim,
               "entries": [{"attribute": e.attribute, "value": e.value,
                            "count": e.count, "mean": [float(v) for v in e.mean]}
                           for e in self.entries]}
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True, separators=(",", ":"))
            f.write("\n")

    @classmethod
    def load(cls, path) -> "AttributeTable":
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: not an attribute table") from e
        if doc.get("format") != TABLE_FORMAT:
            raise DataError(f"{path}: not an attribute table")
        entries = [AttributeEntry(e["attribute"], e["value"], int(e["count"]),
                                  np.array(e["mean"], dtype=np.float64))
                   for e in doc["entries"]]
        return cls(entries, doc["j_samples"], doc["latent_dim"])


def build_attribute_table(model, records: list, values_db: np.ndarray,
                          attributes=("speaker", "phone"), j: int = 0,
                          seed: int = 0) -> AttributeTable:
    """Estimate one entry per observed value of each requested attribute.

    records[i] labels values_db[i] (a SegmentRecord or any object with
    .speaker / .phone).  Unlabeled segments are skipped for "phone".
    Sampled mode draws one epsilon block over all segments in index order, so
    the table depends only on (data, j, seed).
    """
    if len(records) != values_db.shape[0]:
        raise DataError("records and segment values disagree in length")
    mu, lv = _posterior(model, values_db)
    sigma = np.exp(0.5 * lv)
    if j > 0:
        eps = Rng.from_seed(seed, "attr-sample").normal((mu.shape[0], j, mu.shape[1]))
    entries = []
    for attr in attributes:
        groups: dict = {}
        for i, r in enumerate(records):
            value = getattr(r, attr, None)
            if value is not None:
                groups.setdefault(value, []).append(i)
        for value in sorted(groups):
            idx = groups[value]
            if j == 0:
                mean = snap(fsum_mean(mu[idx]))
            else:
                draws = (mu[idx, None, :] + sigma[idx, None, :] * eps[idx]
                         ).reshape(len(idx) * j, mu.shape[1])
                mean = snap(fsum_mean(draws))
            entries.append(AttributeEntry(attr, value, len(idx), mean))
    if not entries:
        raise DataError("no labeled segments for any requested attribute")
    return AttributeTable(entries, j, mu.shape[1])


@dataclass
class LatentShift:
    attribute: str
    source: str
    target: str
    vector: np.ndarray  # float64, difference of grid-snapped means

    def negated(self) -> "LatentShift":
        return LatentShift(self.attribute, self.target, self.source, -self.vector)

    def save(self, path) -> None:
        doc = {"format": SHIFT_FORMAT, "attribute": self.attribute,
               "source": self.source, "target": self.target,
               "vector": [float(v) for v in self.vector]}
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True, separators=(",", ":"))
            f.write("\n")

    @classmethod
    def load(cls, path) -> "LatentShift":
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: not a latent shift file") from e
        if doc.get("format") != SHIFT_FORMAT:
            raise DataError(f"{path}: not a latent shift file")
        return cls(doc["attribute"], doc["source"], doc["target"],
                   np.array(doc["vector"], dtype=np.float64))


def make_shift(table: AttributeTable, attribute: str, source: str, target: str) -> LatentShift:
    """Shift = target representation minus source representation (exact)."""
    ms = table.get(attribute, source).mean
    mt = table.get(attribute, target).mean
    return LatentShift(attribute, source, target, mt - ms)


def zero_shift(latent_dim: int) -> LatentShift:
    return LatentShift("none", "", "", np.zeros(latent_dim, dtype=np.float64))


def apply_shift(z: np.ndarray, shift: LatentShift) -> np.ndarray:
    """Grid-snap z and add the shift vector; exact and exactly invertible."""
    z = snap(z)
    if z.shape[-1] != shift.vector.shape[0]:
        raise DataError("latent dimension mismatch between z and shift")
    return z + shift.vector


def modify(model, segments_db: np.ndarray, shift: LatentShift | None,
           mode: str = "mean", seed: int = 0) -> np.ndarray:
    """Encode, apply a shift, decode; returns dB segments floored at -20.

    mode "mean" uses the posterior mean and the output mean (deterministic);
    mode "sample" draws one posterior sample and one output sample.  A None
    shift is the zero shift, which makes plain reconstruction the same code
    path (and therefore bitwise identical to a zero-vector modify).
    """
    if mode not in ("mean", "sample"):
        raise UsageError(f"unknown modify mode {mode!r}")
    x = np.asarray(segments_db)
    single = x.ndim == 2
    if single:
        x = x[None]
    mu, lv = _posterior(model, x)
    if mode == "sample":
        rng = Rng.from_seed(seed, "modify")
        z = mu + np.exp(0.5 * lv) * rng.derive("posterior").normal(mu.shape)
    else:
        z = mu
    if shift is None:
        shift = zero_shift(z.shape[1])
    z_mod = apply_shift(z, shift)
    mu_x, lv_x = model.decode_np(z_mod)
    if mode == "sample":
        rng = Rng.from_seed(seed, "modify")
        out_norm = mu_x + np.exp(0.5 * lv_x) * rng.derive("output").normal(
            mu_x.shape, model.cfg.np_dtype)
    else:
        out_norm = mu_x
    out = np.maximum(model.denormalize(out_norm), DB_FLOOR)
    return out[0] if single else out


def reconstruct(model, segments_db: np.ndarray, mode: str = "mean", seed: int = 0) -> np.ndarray:
    """Reconstruction = modify with the zero shift (shared path on purpose)."""
    return modify(model, segments_db, None, mode=mode, seed=seed)


def decode_attribute_repr(model, mean: np.ndarray) -> np.ndarray:
    """Decode a table mean to its dB mean segment (floored like modify)."""
    mu_x, _ = model.decode_np(np.asarray(mean, dtype=np.float64))
    return np.maximum(model.denormalize(mu_x[0]), DB_FLOOR)


def feature_space_average(segments_db: np.ndarray) -> np.ndarray:
    """Plain dB-domain average of segments: the no-model baseline figure."""
    x = np.asarray(segments_db, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] == 0:
        raise DataError("need a non-empty (N, T, F) array")
    return x.mean(axis=0)


# -- prior-space diagnostics ------------------------------------------------------


def log_prior(z: np.ndarray) -> float:
    """log N(z; 0, I) in float64."""
    z = np.asarray(z, dtype=np.float64)
    return float(-0.5 * (z.size * math.log(2.0 * math.pi) + z @ z))


def interpolate(z_a: np.ndarray, z_b: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination alpha * z_a + (1 - alpha) * z_b in float64.

    Log-concavity of the Gaussian prior guarantees
    log_prior(interpolate(a, b, alpha)) >= min(log_prior(a), log_prior(b)).
    """
    if not 0.0 <= alpha <= 1.0:
        raise UsageError("alpha must lie in [0, 1]")
    a = np.asarray(z_a, dtype=np.float64)
    b = np.asarray(z_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError("endpoint shapes differ")
    return alpha * a + (1.0 - alpha) * b


def sample_prior(model, n: int, seed: int = 0) -> np.ndarray:
    """Decode n prior draws to dB segments (mean head, floored)."""
    if n < 1:
        raise UsageError("n must be >= 1")
    z = Rng.from_seed(seed, "prior").normal((n, model.cfg.latent_dim))
    mu_x, _ = model.decode_np(z)
    return np.maximum(model.denormalize(mu_x), DB_FLOOR)


def cosine_matrix(table: AttributeTable):
    """Pairwise cosine similarities between all table entries.

    Returns (labels, matrix); labels are "attribute:value" in table order.
    The matrix is exactly symmetric (the lower triangle mirrors the upper)
    with unit diagonal up to rounding.
    """
    labels = [f"{e.attribute}:{e.value}" for e in table.entries]
    v = np.stack([e.mean for e in table.entries])
    norms = np.sqrt((v * v).sum(axis=1))
    if np.any(norms == 0.0):
        raise DataError("zero-norm table entry; cosine undefined")
    m = (v / norms[:, None]) @ (v / norms[:, None]).T
    lower = np.tril_indices(m.shape[0], -1)
    m[lower] = m.T[lower]
    return labels, m


def offdiag_cov_profile_z(z: np.ndarray) -> np.ndarray:
    """Per-dimension absolute off-diagonal covariance mass of latent vectors."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise DataError("need at least 2 latent vectors")
    c = np.cov(z, rowvar=False)
    a = np.abs(c)
    return a.sum(axis=1) - np.diag(a)


def offdiag_cov_profile(model, segments_db: np.ndarray) -> np.ndarray:
    """Same profile for the posterior means of a segment set."""
    mu, _ = _posterior(model, segments_db)
    return offdiag_cov_profile_z(mu)
