"""DSP frontend: dB spectrograms, mel filter banks, segmentation, labeling.

Fixed analysis chain for 16 kHz mono speech: 25 ms Hann windows every 10 ms,
512-point FFT, magnitudes in dB floored at exactly -20, optionally pooled
through 80 triangular mel filters.  The floor constant is shared by both
feature kinds because 20*log10|X| and 10*log10|X|^2 are the same number.

Segments are fixed-length frame windows; labels attach per segment: the
speaker always, a phone only when one non-silence phone covers a strict
majority of frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError

SAMPLE_RATE = 16000
FRAME_LEN = 400       # 25 ms
FRAME_HOP = 160       # 10 ms
N_FFT = 512
N_SPEC_BINS = N_FFT // 2 + 1
N_MEL_FILTERS = 80
MEL_FMIN = 0.0
MEL_FMAX = 8000.0
DB_FLOOR = -20.0

KIND_SPEC = "spec"
KIND_FBANK = "fbank"

# alignment labels treated as silence: never attached as a segment phone label
SILENCE_PHONES = frozenset({"sil", "sp", "spn", "pau", "epi", "h#"})


@dataclass
class Waveform:
    """Mono PCM audio as float64 in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("waveform must be mono (1-d)")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")
        if self.sample_rate_hz != SAMPLE_RATE:
            raise DataError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate_hz}")


@dataclass
class FrameMatrix:
    """(n_frames, n_bins) float32 dB features for one utterance."""

    values: np.ndarray
    feature_kind: str
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DataError("frame matrix must be 2-d")
        if not np.all(np.isfinite(self.values)):
            raise DataError("frame matrix contains non-finite values")
        if self.feature_kind not in (KIND_SPEC, KIND_FBANK):
            raise DataError(f"unknown feature kind {self.feature_kind!r}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


@dataclass
class FeatureSegment:
    """Fixed-length slice of a frame matrix plus its attribute labels."""

    values: np.ndarray
    feature_kind: str
    utt: str = ""
    start: int = 0
    labels: dict = field(default_factory=dict)


def stft_magnitude_db(wave: Waveform) -> FrameMatrix:
    """Hann-windowed magnitude spectrogram in dB, floored at DB_FLOOR.

    Frame count is floor((n - 400) / 160) + 1; trailing samples that do not
    fill a final window are dropped.
    """
    n = wave.samples.shape[0]
    if n < FRAME_LEN:
        raise DataError(f"need at least {FRAME_LEN} samples for one frame, got {n}")
    n_frames = (n - FRAME_LEN) // FRAME_HOP + 1
    window = np.hanning(FRAME_LEN)
    idx = np.arange(FRAME_LEN)[None, :] + FRAME_HOP * np.arange(n_frames)[:, None]
    frames = wave.samples[idx] * window
    mag = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag)
    db = np.maximum(db, DB_FLOOR)
    return FrameMatrix(db.astype(np.float32), KIND_SPEC)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


_MEL_WEIGHTS = None


def mel_weights() -> np.ndarray:
    """(80, 257) triangular filters on the mel scale, each row summing to 1.

    Unit row sums make the bank a convex average of linear-power bins, so an
    all-floor spectrogram maps to an all-floor filter bank output.
    """
    global _MEL_WEIGHTS
    if _MEL_WEIGHTS is not None:
        return _MEL_WEIGHTS
    mel_pts = np.linspace(hz_to_mel(MEL_FMIN), hz_to_mel(MEL_FMAX), N_MEL_FILTERS + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_hz = np.arange(N_SPEC_BINS, dtype=np.float64) * SAMPLE_RATE / N_FFT
    w = np.zeros((N_MEL_FILTERS, N_SPEC_BINS), dtype=np.float64)
    for i in range(N_MEL_FILTERS):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bin_hz - lo) / (center - lo)
        down = (hi - bin_hz) / (hi - center)
        w[i] = np.maximum(0.0, np.minimum(up, down))
        s = w[i].sum()
        if s <= 0.0:
            raise DataError(f"mel filter {i} has empty support")
        w[i] /= s
    _MEL_WEIGHTS = w
    return w


def mel_filterbank(fm: FrameMatrix) -> FrameMatrix:
    """Pool a dB spectrogram into 80 mel filter-bank dB values, re-floored."""
    if fm.feature_kind != KIND_SPEC:
        raise DataError("mel_filterbank expects a spectrogram input")
    if fm.n_bins != N_SPEC_BINS:
        raise DataError(f"expected {N_SPEC_BINS} bins, got {fm.n_bins}")
    power = 10.0 ** (fm.values.astype(np.float64) / 10.0)  # undo dB to linear power
    pooled = power @ mel_weights().T
    db = 10.0 * np.log10(pooled)
    db = np.maximum(db, DB_FLOOR)
    return FrameMatrix(db.astype(np.float32), KIND_FBANK,
                       fm.frame_shift_ms, fm.frame_length_ms)


def segment_frames(fm: FrameMatrix, seg_len: int, hop: int, utt: str = "") -> list[FeatureSegment]:
    """Slice an utterance into fixed-length windows of seg_len frames.

    Windows start at 0, hop, 2*hop, ...; a window is emitted only if it fits
    entirely, so the tail shorter than seg_len is dropped.
    """
    if seg_len < 1 or hop < 1:
        raise DataError("seg_len and hop must be positive")
    out = []
    start = 0
    while start + seg_len <= fm.n_frames:
        out.append(FeatureSegment(fm.values[start:start + seg_len].copy(),
                                  fm.feature_kind, utt=utt, start=start))
        start += hop
    return out


def label_segment(seg: FeatureSegment, frame_phones: list, speaker: str) -> FeatureSegment:
    """Attach labels: speaker always; a phone only on strict majority.

    frame_phones holds one phone string (or None) per frame of the whole
    utterance.  Silence phones never become the label and do not weaken the
    majority requirement: a phone must cover more than half the frames of the
    segment.  Ties and silence-dominated segments get no phone label.
    """
    t = seg.values.shape[0]
    if seg.start < 0 or seg.start + t > len(frame_phones):
        raise DataError(f"segment [{seg.start}, {seg.start + t}) outside alignment "
                        f"of {len(frame_phones)} frames")
    counts: dict = {}
    for p in frame_phones[seg.start:seg.start + t]:
        if p is None or p in SILENCE_PHONES:
            continue
        counts[p] = counts.get(p, 0) + 1
    labels = {"speaker": speaker}
    if counts:
        best = max(counts.values())
        winners = [p for p, c in counts.items() if c == best]
        if len(winners) == 1 and best * 2 > t:
            labels["phone"] = winners[0]
    return replace(seg, labels=labels)
