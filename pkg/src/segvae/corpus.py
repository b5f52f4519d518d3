"""Corpus plumbing: WAV and feature files, alignments, manifests, segment index.

All on-disk formats are deterministic: fixed little-endian binary layouts,
sorted JSON keys, records ordered by utterance id.  Writing what read() just
returned reproduces the original bytes.

Feature file layout (magic "LSF1"): 4-byte magic, u32 n_frames, u32 n_bins,
u8 feature kind (0 spectrogram, 1 filter bank), then row-major float32 data.
"""

from __future__ import annotations

import json
import struct
import wave as wavemod
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import (DB_FLOOR, KIND_FBANK, KIND_SPEC, SAMPLE_RATE, FrameMatrix)

FEATURE_MAGIC = b"LSF1"
_KIND_CODE = {KIND_SPEC: 0, KIND_FBANK: 1}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


# -- WAV ---------------------------------------------------------------------


def read_wav(path) -> np.ndarray:
    """Read 16 kHz mono PCM16 RIFF; returns float64 samples in [-1, 1].

    Decode and encode share the same full-scale constant so that
    write_wav(read_wav(p)) reproduces p byte for byte.
    """
    try:
        with wavemod.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio")
            if f.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM")
            if f.getframerate() != SAMPLE_RATE:
                raise DataError(f"{path}: expected {SAMPLE_RATE} Hz")
            raw = f.readframes(f.getnframes())
    except wavemod.Error as e:
        raise DataError(f"{path}: not a readable RIFF WAV ({e})") from e
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0


def write_wav(path, samples: np.ndarray) -> None:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.rint(x * 32767.0).astype("<i2")
    with wavemod.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())


# -- feature files -------------------------------------------------------------


def write_feature_file(path, fm: FrameMatrix) -> None:
    values = np.ascontiguousarray(fm.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IIB", values.shape[0], values.shape[1], _KIND_CODE[fm.feature_kind]))
        f.write(values.tobytes())


def read_feature_file(path) -> FrameMatrix:
    with open(path, "rb") as f:
        head = f.read(13)
        if len(head) != 13 or head[:4] != FEATURE_MAGIC:
            raise DataError(f"{path}: not a feature file")
        n, d, code = struct.unpack("<IIB", head[4:])
        if code not in _CODE_KIND:
            raise DataError(f"{path}: unknown feature kind code {code}")
        data = f.read(4 * n * d)
        if len(data) != 4 * n * d or f.read(1):
            raise DataError(f"{path}: truncated or oversized payload")
    values = np.frombuffer(data, dtype="<f4").reshape(n, d)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite feature values")
    if values.size and values.min() < DB_FLOOR:
        raise DataError(f"{path}: values below the {DB_FLOOR} dB floor")
    return FrameMatrix(values.copy(), _CODE_KIND[code])


# -- alignments -----------------------------------------------------------------


def write_alignment(path, spans: list[tuple[int, int, str]]) -> None:
    with open(path, "w") as f:
        for start, end, phone in spans:
            f.write(f"{start} {end} {phone}\n")


def read_alignment(path) -> list[tuple[int, int, str]]:
    """Frame-level spans "<start> <end_exclusive> <phone>", contiguous from 0."""
    spans = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{ln}: expected 'start end phone'")
            try:
                start, end = int(parts[0]), int(parts[1])
            except ValueError as e:
                raise DataError(f"{path}:{ln}: non-integer span") from e
            if start < 0 or end <= start:
                raise DataError(f"{path}:{ln}: bad span [{start}, {end})")
            if spans and start != spans[-1][1]:
                raise DataError(f"{path}:{ln}: span not contiguous with previous")
            if not spans and start != 0:
                raise DataError(f"{path}:{ln}: first span must start at frame 0")
            spans.append((start, end, parts[2]))
    if not spans:
        raise DataError(f"{path}: empty alignment")
    return spans


def frame_phone_labels(spans, n_frames: int) -> list:
    """Expand spans to one phone per frame; frames past the last span get None."""
    labels: list = [None] * n_frames
    for start, end, phone in spans:
        for t in range(start, min(end, n_frames)):
            labels[t] = phone
    return labels


# -- manifests -------------------------------------------------------------------


def _utt_of(record: dict) -> str:
    key = record.get("feats") or record.get("audio") or ""
    return Path(key).stem


def write_manifest(path, records: list[dict]) -> None:
    records = sorted(records, key=_utt_of)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path, required: tuple = ()) -> list[dict]:
    records = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                r = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{ln}: bad JSON") from e
            for k in required:
                if k not in r:
                    raise DataError(f"{path}:{ln}: missing key {k!r}")
            records.append(r)
    if not records:
        raise DataError(f"{path}: empty manifest")
    return records


def check_split_disjoint(records: list[dict]) -> None:
    """Manifest invariant: no speaker appears in more than one split."""
    by_speaker: dict = {}
    for r in records:
        by_speaker.setdefault(r["speaker"], set()).add(r["split"])
    bad = {s: sorted(sp) for s, sp in by_speaker.items() if len(sp) > 1}
    if bad:
        raise DataError(f"speakers span multiple splits: {bad}")


# -- segment index -----------------------------------------------------------------


@dataclass
class SegmentRecord:
    utt: str
    feats: str
    start: int
    length: int
    speaker: str
    phone: str | None
    split: str

    def to_json(self) -> dict:
        return {"utt": self.utt, "feats": self.feats, "start": self.start,
                "length": self.length, "speaker": self.speaker,
                "phone": self.phone, "split": self.split}

    @classmethod
    def from_json(cls, d: dict) -> "SegmentRecord":
        return cls(d["utt"], d["feats"], int(d["start"]), int(d["length"]),
                   d["speaker"], d.get("phone"), d["split"])


def write_segment_index(path, records: list[SegmentRecord]) -> None:
    records = sorted(records, key=lambda r: (r.utt, r.start))
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_segment_index(path) -> list[SegmentRecord]:
    rows = read_manifest(path, required=("utt", "feats", "start", "length", "speaker", "split"))
    return [SegmentRecord.from_json(r) for r in rows]


def load_segment_matrix(records: list[SegmentRecord], base_dir) -> np.ndarray:
    """Stack segment values into (N, T, F) float32; feature files cached per path."""
    if not records:
        raise DataError("no segments to load")
    base = Path(base_dir)
    cache: dict = {}
    lengths = {r.length for r in records}
    if len(lengths) != 1:
        raise DataError(f"mixed segment lengths {sorted(lengths)}")
    out = []
    for r in records:
        fm = cache.get(r.feats)
        if fm is None:
            fm = read_feature_file(base / r.feats)
            cache[r.feats] = fm
        if r.start < 0 or r.start + r.length > fm.n_frames:
            raise DataError(f"{r.utt}: segment [{r.start}, {r.start + r.length}) "
                            f"outside {fm.n_frames} frames")
        out.append(fm.values[r.start:r.start + r.length])
    return np.stack(out)


def utterance_folds(records: list[SegmentRecord]) -> dict:
    """Deterministic probe sub-split of utterances within each (split, speaker).

    Sorted utterances are assigned by position mod 5: 3 -> "dev", 4 -> "eval",
    everything else -> "fit".  Folds are stable under re-listing because they
    depend only on the sorted utterance ids.
    """
    groups: dict = {}
    for r in records:
        groups.setdefault((r.split, r.speaker), set()).add(r.utt)
    fold: dict = {}
    for key in sorted(groups):
        for pos, utt in enumerate(sorted(groups[key])):
            fold[utt] = {3: "dev", 4: "eval"}.get(pos % 5, "fit")
    return fold
