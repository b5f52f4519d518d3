"""Synthetic desk-scale speech corpus.

Speakers are harmonic combs with a fixed fundamental (pitch carries speaker
identity); phones are two-peak spectral envelopes over a tilted base (formant
positions carry phone identity).  Utterances concatenate randomly chosen
phone units, rendered as phase-continuous additive harmonics whose per-hop
amplitudes are linearly interpolated between hop centers so unit boundaries
stay click-free.  Everything derives from one seed; regenerating with the
same arguments reproduces the files byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus
from .errors import UsageError
from .features import FRAME_HOP, FRAME_LEN, SAMPLE_RATE
from .rng import Rng

F0_LO = 100.0
F0_HI = 220.0
GAIN = 0.05
NOISE_STD = 1.5e-3
SIL_HOPS = 4
UNIT_HOPS_MIN = 10
UNIT_HOPS_MAX = 20

# vowel-flavored names for readability; extras fall back to p10, p11, ...
_PHONE_NAMES = ["aa", "ae", "iy", "uw", "eh", "ow", "ah", "ey", "ih", "uh"]


@dataclass
class PhoneDef:
    name: str
    f1: float
    f2: float


def speaker_f0(i: int, n_speakers: int) -> float:
    if n_speakers < 2:
        raise UsageError("need at least 2 speakers")
    return F0_LO + (F0_HI - F0_LO) * i / (n_speakers - 1)


def phone_bank(n_phones: int, rng: Rng) -> list[PhoneDef]:
    """Assign each phone a distinct (f1, f2) pair from shuffled formant grids."""
    if n_phones < 2:
        raise UsageError("need at least 2 phones")
    names = [_PHONE_NAMES[i] if i < len(_PHONE_NAMES) else f"p{i:02d}" for i in range(n_phones)]
    f1_grid = np.linspace(320.0, 1080.0, n_phones)
    f2_grid = np.linspace(1450.0, 3650.0, n_phones)
    p1 = rng.derive("f1").permutation(n_phones)
    p2 = rng.derive("f2").permutation(n_phones)
    return [PhoneDef(names[i], float(f1_grid[p1[i]]), float(f2_grid[p2[i]])) for i in range(n_phones)]


def envelope_db(freq_hz: np.ndarray, phone: PhoneDef) -> np.ndarray:
    """Two Gaussian bumps in dB on a tilted base; peaks near 0 dB."""
    f = np.asarray(freq_hz, dtype=np.float64)
    base = -26.0 - 8.0 * f / 8000.0
    bump1 = 26.0 * np.exp(-0.5 * ((f - phone.f1) / 140.0) ** 2)
    bump2 = 20.0 * np.exp(-0.5 * ((f - phone.f2) / 220.0) ** 2)
    return base + bump1 + bump2


def _phone_sequence(phones: list[PhoneDef], target_hops: int, rng: Rng) -> list[tuple[str, int]]:
    """[(label, n_hops)] with silence bookends and no immediate phone repeats."""
    seq = [("sil", SIL_HOPS)]
    interior = 0
    prev = -1
    while interior < target_hops:
        k = rng.choice(len(phones))
        if k == prev:
            k = (k + 1) % len(phones)
        dur = UNIT_HOPS_MIN + rng.choice(UNIT_HOPS_MAX - UNIT_HOPS_MIN + 1)
        seq.append((phones[k].name, dur))
        interior += dur
        prev = k
    seq.append(("sil", SIL_HOPS))
    return seq


def render_utterance(f0: float, phones: list[PhoneDef], seq: list[tuple[str, int]],
                     rng: Rng) -> np.ndarray:
    """Additive harmonic synthesis with hop-wise amplitude interpolation."""
    by_name = {p.name: p for p in phones}
    n_hops = sum(d for _, d in seq)
    n_samples = FRAME_HOP * n_hops + (FRAME_LEN - FRAME_HOP)
    n_harm = int(7800.0 // f0)
    harm_f = f0 * np.arange(1, n_harm + 1)

    # per-hop linear amplitude for every harmonic: envelope of the active phone,
    # zero during silence
    amp_hops = np.zeros((n_hops, n_harm))
    hop0 = 0
    for name, dur in seq:
        if name != "sil":
            amp_hops[hop0:hop0 + dur] = 10.0 ** (envelope_db(harm_f, by_name[name]) / 20.0)
        hop0 += dur
    hop_centers = FRAME_HOP * np.arange(n_hops) + FRAME_HOP // 2
    t_idx = np.arange(n_samples)

    phase_rng = rng.derive("phase")
    phases = phase_rng.uniform((n_harm,)) * 2.0 * math.pi
    t = t_idx / SAMPLE_RATE
    sig = np.zeros(n_samples)
    for h in range(n_harm):
        amp = np.interp(t_idx, hop_centers, amp_hops[:, h])
        sig += amp * np.sin(2.0 * math.pi * harm_f[h] * t + phases[h])
    sig *= GAIN
    sig += NOISE_STD * rng.derive("noise").normal((n_samples,))
    return np.clip(sig, -0.999, 0.999)


def assign_splits(speakers: list[str]) -> dict:
    """Disjoint speaker split: last two speakers become dev and test."""
    if len(speakers) < 2:
        raise UsageError("need at least 2 speakers")
    split = {s: "train" for s in speakers}
    if len(speakers) >= 3:
        split[speakers[-2]] = "dev"
        split[speakers[-1]] = "test"
    else:
        split[speakers[-1]] = "dev"
    return split


def synth_corpus(out_dir, n_speakers: int = 6, n_phones: int = 10,
                 utts_per_speaker: int = 10, utt_frames: int = 1100,
                 seed: int = 0) -> list[dict]:
    """Write wav/, align/, and manifest.jsonl under out_dir; returns the records.

    Every utterance carries exactly utt_frames' worth of hops up to the random
    overshoot of its last phone unit, so feature extraction later yields one
    frame per hop (the renderer leaves the extra window tail in place).
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "align").mkdir(parents=True, exist_ok=True)
    root = Rng.from_seed(seed, "synth")
    phones = phone_bank(n_phones, root.derive("phones"))
    speakers = [f"spk{i:02d}" for i in range(n_speakers)]
    split = assign_splits(speakers)

    records = []
    for i, spk in enumerate(speakers):
        f0 = speaker_f0(i, n_speakers)
        for u in range(utts_per_speaker):
            utt = f"{spk}_u{u:02d}"
            urng = root.derive(f"utt:{utt}")
            seq = _phone_sequence(phones, utt_frames - 2 * SIL_HOPS, urng.derive("seq"))
            samples = render_utterance(f0, phones, seq, urng)
            corpus.write_wav(out / "wav" / f"{utt}.wav", samples)
            spans = []
            hop0 = 0
            for name, dur in seq:
                spans.append((hop0, hop0 + dur, name))
                hop0 += dur
            corpus.write_alignment(out / "align" / f"{utt}.ali", spans)
            records.append({"audio": f"wav/{utt}.wav", "align": f"align/{utt}.ali",
                            "speaker": spk, "split": split[spk]})
    corpus.write_manifest(out / "manifest.jsonl", records)
    return records
