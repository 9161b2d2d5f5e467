"""Stem datasets, training excerpts with augmentation, and a synthetic toy corpus."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import SAMPLE_RATE, StereoWaveform, read_wav, write_wav

log = logging.getLogger(__name__)

STEMS = ("vocals", "bass", "drums", "other")
TARGET = "vocals"


class DatasetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Track:
    """Four stems plus their sum. The mixture is always rebuilt from the stems."""

    stems: dict[str, StereoWaveform]
    identifier: str = ""
    mixture: StereoWaveform = field(init=False)

    def __post_init__(self):
        missing = set(STEMS) - set(self.stems)
        if missing:
            raise ValueError(f"track {self.identifier!r} lacks stems {sorted(missing)}")
        lengths = {s.n_samples for s in self.stems.values()}
        rates = {s.sample_rate for s in self.stems.values()}
        if len(lengths) != 1 or len(rates) != 1:
            raise ValueError(f"track {self.identifier!r}: stems differ in length or rate")
        total = sum(self.stems[name].samples for name in STEMS)
        object.__setattr__(self, "mixture", StereoWaveform(total, rates.pop()))

    @property
    def n_samples(self) -> int:
        return self.mixture.n_samples


@dataclass(frozen=True)
class ExcerptPair:
    mixture: StereoWaveform
    target: StereoWaveform
    stems: dict[str, StereoWaveform]


@dataclass(frozen=True)
class AugmentConfig:
    p_mix: float = 0.5
    p_gain: float = 1.0
    gain_db: float = 6.0
    p_polarity: float = 0.5
    p_swap: float = 0.5
    p_pitch: float = 0.3
    pitch_semitones: float = 2.0
    apply_to: tuple[str, ...] = STEMS

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(p_mix=0.0, p_gain=0.0, p_polarity=0.0, p_swap=0.0, p_pitch=0.0)


def scan_dataset(root: str | Path) -> list[Track]:
    """Load every ``<root>/<track>/{vocals,bass,drums,other}.wav`` folder.

    Incomplete or inconsistent folders are skipped with a :class:`DatasetWarning`.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    tracks = []
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            files = {name: folder / f"{name}.wav" for name in STEMS}
            missing = [n for n, f in files.items() if not f.is_file()]
            if missing:
                raise ValueError(f"missing stems {missing}")
            tracks.append(Track({n: read_wav(f) for n, f in files.items()}, folder.name))
        except ValueError as err:
            warnings.warn(f"skipping {folder.name}: {err}", DatasetWarning, stacklevel=2)
    if not tracks:
        raise ValueError(f"no valid tracks under {root}")
    return tracks


def write_dataset(tracks: list[Track], root: str | Path, subtype: str = "float32") -> None:
    root = Path(root)
    for track in tracks:
        folder = root / track.identifier
        folder.mkdir(parents=True, exist_ok=True)
        for name in STEMS:
            write_wav(folder / f"{name}.wav", track.stems[name], subtype)


def _resample_to(x: np.ndarray, n: int) -> np.ndarray:
    if x.shape[-1] == n:
        return x
    return signal.resample(x, n, axis=-1)


def sample_excerpt(
    tracks: list[Track],
    duration_s: float,
    aug: AugmentConfig,
    rng: np.random.Generator,
) -> ExcerptPair:
    """Draw one augmented training excerpt.

    Augmentations: random mixing of stems across tracks and offsets, per-stem
    gain, polarity inversion, channel swap and a pitch shift shared by all
    stems (resample-and-trim, so tempo moves with pitch). The mixture is summed
    after augmentation.
    """
    length = int(round(duration_s * SAMPLE_RATE))
    ratio = 1.0
    if aug.p_pitch > 0 and rng.random() < aug.p_pitch:
        ratio = 2.0 ** (rng.uniform(-aug.pitch_semitones, aug.pitch_semitones) / 12)
    src_len = int(round(length * ratio))
    eligible = [t for t in tracks if t.n_samples >= src_len]
    if not eligible:
        raise ValueError(f"no track is longer than {src_len / SAMPLE_RATE:.2f} s")

    base = eligible[rng.integers(len(eligible))]
    base_off = int(rng.integers(base.n_samples - src_len + 1))
    stems = {}
    for name in STEMS:
        track, off = base, base_off
        active = name in aug.apply_to
        if active and aug.p_mix > 0 and rng.random() < aug.p_mix:
            track = eligible[rng.integers(len(eligible))]
            off = int(rng.integers(track.n_samples - src_len + 1))
        x = _resample_to(track.stems[name].samples[:, off : off + src_len], length)
        if active:
            if aug.p_gain > 0 and rng.random() < aug.p_gain:
                x = x * 10 ** (rng.uniform(-aug.gain_db, aug.gain_db) / 20)
            if aug.p_polarity > 0 and rng.random() < aug.p_polarity:
                x = -x
            if aug.p_swap > 0 and rng.random() < aug.p_swap:
                x = x[::-1]
        stems[name] = StereoWaveform(np.ascontiguousarray(x))
    mixture = StereoWaveform(sum(stems[name].samples for name in STEMS))
    return ExcerptPair(mixture, stems[TARGET], stems)


# -- synthetic toy corpus ---------------------------------------------------


def _pan(mono: np.ndarray, position: float) -> np.ndarray:
    theta = (position + 1) * np.pi / 4
    return np.stack([np.cos(theta) * mono, np.sin(theta) * mono])


def _envelope(n: int, attack: int, release: int) -> np.ndarray:
    env = np.ones(n)
    a, r = min(attack, n), min(release, n)
    env[:a] = np.linspace(0, 1, a, endpoint=False)
    if r:
        env[n - r :] *= np.linspace(1, 0, r)
    return env


def _synth_vocals(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Sung-like line: harmonic notes with vibrato, glides and rests."""
    f0 = np.zeros(n)
    amp = np.zeros(n)
    pos = 0
    prev = None
    while pos < n:
        dur = int(rng.uniform(0.25, 0.9) * sr)
        end = min(n, pos + dur)
        if rng.random() < 0.2:
            pos = end
            prev = None
            continue
        freq = 440.0 * 2 ** ((rng.integers(50, 71) - 69) / 12)
        if prev is None:
            f0[pos:end] = freq
        else:
            glide = min(end - pos, int(0.04 * sr))
            f0[pos:end] = freq
            f0[pos : pos + glide] = np.linspace(prev, freq, glide)
        amp[pos:end] = rng.uniform(0.6, 1.0) * _envelope(end - pos, int(0.02 * sr), int(0.05 * sr))
        prev = freq
        pos = end
    t = np.arange(n) / sr
    rate, depth = rng.uniform(4.5, 6.5), rng.uniform(0.004, 0.012)
    inst = np.where(f0 > 0, f0, 200.0) * (1 + depth * np.sin(2 * np.pi * rate * t))
    phase = 2 * np.pi * np.cumsum(inst) / sr
    formant = rng.uniform(500, 1200)
    out = np.zeros(n)
    for k in range(1, 40):
        partial = k * inst
        # harmonics stay under 3.6 kHz
        weight = np.where(partial < 3600, 1.0 / k, 0.0) * (1 + np.exp(-((partial - formant) / 300) ** 2))
        out += weight * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    return out * amp


def _synth_bass(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    out = np.zeros(n)
    pos = 0
    phase = 0.0
    while pos < n:
        end = min(n, pos + int(rng.uniform(0.3, 1.0) * sr))
        f_start = rng.uniform(40, 150)
        f_end = f_start * 2 ** (rng.uniform(-0.5, 0.5))
        freq = np.linspace(f_start, f_end, end - pos)
        ph = phase + 2 * np.pi * np.cumsum(freq) / sr
        out[pos:end] = (np.sin(ph) + 0.3 * np.sin(2 * ph)) * _envelope(
            end - pos, int(0.01 * sr), int(0.03 * sr)
        )
        phase = ph[-1]
        pos = end
    sos = signal.butter(4, 300, "lowpass", fs=sr, output="sos")
    return signal.sosfilt(sos, out)


def _synth_drums(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Click train: kick on beats, filtered noise hits on off-beats."""
    beat = 60.0 / rng.uniform(90, 140)
    out = np.zeros(n)
    kick_len = int(0.15 * sr)
    tk = np.arange(kick_len) / sr
    kick = np.sin(2 * np.pi * (50 * tk + 60 * (1 - np.exp(-tk * 30)) / 30)) * np.exp(-tk * 25)
    hit_len = int(0.08 * sr)
    sos_hit = signal.butter(2, [1500, 9000], "bandpass", fs=sr, output="sos")
    t = rng.uniform(0, beat / 2)
    while t * sr < n:
        i = int(t * sr)
        seg = kick[: n - i]
        out[i : i + len(seg)] += 0.9 * seg
        j = int((t + beat / 2) * sr)
        if j < n:
            hit = signal.sosfilt(sos_hit, rng.standard_normal(hit_len)) * np.exp(
                -np.arange(hit_len) / (0.02 * sr)
            )
            seg = hit[: n - j]
            out[j : j + len(seg)] += 2.0 * seg
        t += beat
    return out


def _synth_other(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Band-passed noise under a slow random amplitude contour."""
    lo, hi = rng.uniform(150, 400), rng.uniform(5000, 9000)
    sos = signal.butter(2, [lo, hi], "bandpass", fs=sr, output="sos")
    noise = signal.sosfilt(sos, rng.standard_normal(n))
    knots = rng.uniform(0.2, 1.0, size=max(2, int(n / sr * 2) + 2))
    contour = np.interp(np.arange(n), np.linspace(0, n, len(knots)), knots)
    return noise * contour


_SYNTHS = {
    "vocals": _synth_vocals,
    "bass": _synth_bass,
    "drums": _synth_drums,
    "other": _synth_other,
}


def synth_track(duration_s: float, rng: np.random.Generator, identifier: str = "") -> Track:
    n = int(round(duration_s * SAMPLE_RATE))
    stems = {}
    for name in STEMS:
        mono = _SYNTHS[name](n, rng)
        rms = np.sqrt(np.mean(mono**2))
        level = 0.1 * rng.uniform(0.7, 1.3)
        mono = mono * (level / rms if rms > 0 else 0.0)
        position = rng.uniform(-0.2, 0.2) if name in ("vocals", "bass") else rng.uniform(-0.7, 0.7)
        stems[name] = StereoWaveform(_pan(mono, position))
    return Track(stems, identifier)


def synth_toy_dataset(
    n_tracks: int, duration_s: float, seed: int | np.random.SeedSequence = 0, prefix: str = "toy"
) -> list[Track]:
    """Deterministic synthetic four-stem tracks standing in for a real corpus.

    * vocals: harmonic tones with vibrato, glides and rests, partials below 3.6 kHz
    * bass: low-passed sine sweeps
    * drums: kick clicks and band-passed noise hits
    * other: band-passed noise with a slow amplitude contour
    """
    if n_tracks < 1:
        raise ValueError("n_tracks must be >= 1")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [
        synth_track(duration_s, np.random.default_rng(child), f"{prefix}{i:03d}")
        for i, child in enumerate(seq.spawn(n_tracks))
    ]
