"""Signal transforms between stereo waveforms and the diffusion state space.

The forward path is::

    waveform -> peak_normalize -> stft -> compress -> to_channels -> band_split

and every step has an exact (or numerically exact) inverse. All functions are
pure and operate on numpy arrays wrapped in small frozen dataclasses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window

SAMPLE_RATE = 44100
WINDOW_SIZE = 2048
HOP = 1024
ALPHA = 0.667
BETA = 0.065
N_SPLITS = 4

CHANNEL_LAYOUT = ("L-re", "L-im", "R-re", "R-im")


@dataclass(frozen=True)
class StereoWaveform:
    samples: np.ndarray  # [2, n_samples]
    sample_rate: int = SAMPLE_RATE
    peak_gain: float = 1.0

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = np.stack([s, s])
        if s.ndim != 2 or s.shape[0] != 2:
            raise ValueError(f"expected samples of shape [2, n], got {s.shape}")
        object.__setattr__(self, "samples", s)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    bins: np.ndarray  # complex [2, F, T]
    window_size: int = WINDOW_SIZE
    hop: int = HOP

    @property
    def n_bins(self) -> int:
        return self.bins.shape[-2]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[-1]


@dataclass(frozen=True)
class ChannelStack:
    values: np.ndarray  # real [C, F, T]
    layout: tuple[str, ...] = CHANNEL_LAYOUT


@dataclass(frozen=True)
class BandSplitTensor:
    values: np.ndarray  # real [C * n_splits, F', T]
    n_splits: int
    f_trunc: int
    layout: tuple[str, ...] = field(default=CHANNEL_LAYOUT)

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]


def peak_normalize(wave: StereoWaveform) -> StereoWaveform:
    """Scale ``wave`` so that its largest absolute sample is 1.

    The divisor is kept in ``peak_gain``; silent input is returned as is
    with ``peak_gain=1``.
    """
    if wave.n_samples < 1:
        raise ValueError("cannot normalize an empty waveform")
    peak = float(np.max(np.abs(wave.samples)))
    if peak == 0.0:
        return replace(wave, peak_gain=1.0)
    return replace(wave, samples=wave.samples / peak, peak_gain=peak)


def hann(window_size: int = WINDOW_SIZE) -> np.ndarray:
    # periodic Hann: sums to exactly 1 at 50% overlap
    return get_window("hann", window_size, fftbins=True)


def stft(
    wave: StereoWaveform, window_size: int = WINDOW_SIZE, hop: int = HOP
) -> ComplexSpectrogram:
    """Centered Hann STFT with reflect padding, ``ceil(n / hop)`` frames."""
    x = np.asarray(wave.samples)
    n = x.shape[-1]
    if n < window_size:
        raise ValueError(f"input too short: {n} samples < window of {window_size}")
    pad = window_size // 2
    padded = np.pad(x, ((0, 0), (pad, pad)), mode="reflect")
    n_frames = math.ceil(n / hop)
    frames = sliding_window_view(padded, window_size, axis=-1)[:, ::hop][:, :n_frames]
    bins = np.fft.rfft(frames * hann(window_size), axis=-1)
    return ComplexSpectrogram(np.swapaxes(bins, -1, -2), window_size, hop)


def istft(spec: ComplexSpectrogram, n_samples: int) -> StereoWaveform:
    """Weighted overlap-add inverse of :func:`stft`, trimmed to ``n_samples``."""
    win_size, hop = spec.window_size, spec.hop
    if spec.n_bins != win_size // 2 + 1:
        raise ValueError(
            f"spectrogram has {spec.n_bins} bins, window {win_size} needs {win_size // 2 + 1}"
        )
    if math.ceil(n_samples / hop) != spec.n_frames:
        raise ValueError(
            f"{spec.n_frames} frames inconsistent with {n_samples} samples at hop {hop}"
        )
    window = hann(win_size)
    frames = np.fft.irfft(np.swapaxes(spec.bins, -1, -2), n=win_size, axis=-1) * window
    n_frames = spec.n_frames
    total = (n_frames - 1) * hop + win_size
    out = np.zeros((frames.shape[0], total))
    norm = np.zeros(total)
    for t in range(n_frames):
        out[:, t * hop : t * hop + win_size] += frames[:, t]
        norm[t * hop : t * hop + win_size] += window**2
    nonzero = norm > np.finfo(np.float64).tiny
    out[:, nonzero] /= norm[nonzero]
    pad = win_size // 2
    return StereoWaveform(out[:, pad : pad + n_samples].copy())


def _compress(c: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    mag = np.abs(c)
    safe = np.where(mag > 0, mag, 1.0)
    gain = np.where(mag > 0, beta * safe ** (alpha - 1.0), 0.0)
    return c * gain


def compress(
    spec: ComplexSpectrogram, alpha: float = ALPHA, beta: float = BETA
) -> ComplexSpectrogram:
    """Power-law magnitude compression ``beta * |c|**alpha`` keeping phase."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    return replace(spec, bins=_compress(spec.bins, alpha, beta))


def expand(
    spec: ComplexSpectrogram, alpha: float = ALPHA, beta: float = BETA
) -> ComplexSpectrogram:
    """Inverse of :func:`compress`."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    # |c| = (|c~| / beta) ** (1 / alpha) is itself a power law with these constants
    return replace(spec, bins=_compress(spec.bins, 1.0 / alpha, beta ** (-1.0 / alpha)))


def to_channels(spec: ComplexSpectrogram) -> ChannelStack:
    """Stack real and imaginary parts as ``[L-re, L-im, R-re, R-im]``."""
    b = spec.bins
    values = np.stack([b[0].real, b[0].imag, b[1].real, b[1].imag])
    return ChannelStack(values)


def from_channels(
    stack: ChannelStack, window_size: int = WINDOW_SIZE, hop: int = HOP
) -> ComplexSpectrogram:
    """Inverse of :func:`to_channels`; truncated bins are restored as zeros."""
    if stack.layout != CHANNEL_LAYOUT:
        raise ValueError(f"unexpected channel layout {stack.layout}")
    v = stack.values
    n_bins = window_size // 2 + 1
    if v.shape[1] > n_bins:
        raise ValueError(f"{v.shape[1]} bins exceed {n_bins} for window {window_size}")
    bins = np.zeros((2, n_bins, v.shape[2]), dtype=np.complex128)
    bins[0, : v.shape[1]] = v[0] + 1j * v[1]
    bins[1, : v.shape[1]] = v[2] + 1j * v[3]
    return ComplexSpectrogram(bins, window_size, hop)


def band_split(
    x: ChannelStack, n_splits: int = N_SPLITS, f_trunc: int | None = None
) -> BandSplitTensor:
    """Cut the frequency axis into ``n_splits`` equal bands stacked as channels.

    Bins at and above ``f_trunc`` are dropped first; by default ``f_trunc`` is
    the largest multiple of ``n_splits`` not exceeding the bin count, which for
    1025 bins and four bands removes only the Nyquist bin.
    """
    c, f, t = x.values.shape
    if f_trunc is None:
        f_trunc = f - f % n_splits
    if f_trunc > f or f_trunc % n_splits:
        raise ValueError(f"f_trunc={f_trunc} must be <= {f} and divisible by {n_splits}")
    v = x.values[:, :f_trunc]
    # [C, Ns, F', T] -> [Ns, C, F', T]: band-major channel order
    v = v.reshape(c, n_splits, f_trunc // n_splits, t).transpose(1, 0, 2, 3)
    return BandSplitTensor(
        np.ascontiguousarray(v.reshape(n_splits * c, f_trunc // n_splits, t)),
        n_splits,
        f_trunc,
        x.layout,
    )


def band_merge(x: BandSplitTensor) -> ChannelStack:
    """Exact inverse of :func:`band_split` on the retained bins."""
    cs, fb, t = x.values.shape
    c = len(x.layout)
    if cs != c * x.n_splits or fb * x.n_splits != x.f_trunc:
        raise ValueError(
            f"tensor {x.values.shape} inconsistent with n_splits={x.n_splits}, "
            f"f_trunc={x.f_trunc}, {c} base channels"
        )
    v = x.values.reshape(x.n_splits, c, fb, t).transpose(1, 0, 2, 3)
    return ChannelStack(np.ascontiguousarray(v.reshape(c, x.f_trunc, t)), x.layout)


def band_layout(layout: tuple[str, ...], n_splits: int) -> tuple[str, ...]:
    return tuple(f"b{b}:{name}" for b in range(n_splits) for name in layout)


@dataclass(frozen=True)
class Chunks:
    chunks: list[StereoWaveform]
    offsets: list[int]
    chunk_len: int
    total: int


def chunk(
    wave: StereoWaveform, chunk_seconds: float = 6.0, overlap_fraction: float = 0.25
) -> Chunks:
    """Cut ``wave`` into equal-length overlapping chunks.

    The final chunk is zero-padded to full length.
    """
    if chunk_seconds <= 0:
        raise ValueError("chunk_seconds must be positive")
    if not 0 <= overlap_fraction < 1:
        raise ValueError("overlap_fraction must be in [0, 1)")
    size = int(round(chunk_seconds * wave.sample_rate))
    hop = max(1, int(round(size * (1 - overlap_fraction))))
    total = wave.n_samples
    offsets = [0]
    while offsets[-1] + size < total:
        offsets.append(offsets[-1] + hop)
    pieces = []
    for off in offsets:
        seg = wave.samples[:, off : off + size]
        if seg.shape[1] < size:
            seg = np.pad(seg, ((0, 0), (0, size - seg.shape[1])))
        pieces.append(StereoWaveform(seg, wave.sample_rate, wave.peak_gain))
    return Chunks(pieces, offsets, size, total)


def _fade_weights(size: int, fade_in: int, fade_out: int) -> np.ndarray:
    w = np.ones(size)
    if fade_in > 0:
        w[:fade_in] = (np.arange(fade_in) + 0.5) / fade_in
    if fade_out > 0:
        w[size - fade_out :] *= 1.0 - (np.arange(fade_out) + 0.5) / fade_out
    return w


def overlap_add(
    chunks: list[StereoWaveform] | Chunks,
    offsets: list[int] | None = None,
    total_samples: int | None = None,
) -> StereoWaveform:
    """Linear cross-fade reconstruction of chunked audio, trimmed to ``total_samples``."""
    if isinstance(chunks, Chunks):
        offsets = chunks.offsets if offsets is None else offsets
        total_samples = chunks.total if total_samples is None else total_samples
        chunks = chunks.chunks
    if offsets is None or total_samples is None:
        raise ValueError("offsets and total_samples are required")
    if len(chunks) != len(offsets) or not chunks:
        raise ValueError("need one offset per chunk and at least one chunk")
    size = chunks[0].n_samples
    if any(c.n_samples != size for c in chunks):
        raise ValueError("all chunks must share one length")
    order = np.argsort(offsets, kind="stable")
    offs = [offsets[i] for i in order]
    length = max(total_samples, offs[-1] + size)
    acc = np.zeros((2, length))
    weight = np.zeros(length)
    for k, i in enumerate(order):
        fade_in = max(0, offs[k - 1] + size - offs[k]) if k > 0 else 0
        fade_out = max(0, offs[k] + size - offs[k + 1]) if k + 1 < len(offs) else 0
        w = _fade_weights(size, min(fade_in, size), min(fade_out, size))
        acc[:, offs[k] : offs[k] + size] += chunks[i].samples * w
        weight[offs[k] : offs[k] + size] += w
    if np.any(weight[:total_samples] <= 0):
        raise ValueError("chunks leave gaps in coverage")
    out = acc[:, :total_samples] / weight[:total_samples]
    return StereoWaveform(out, chunks[0].sample_rate)


def encode(
    wave: StereoWaveform,
    alpha: float = ALPHA,
    beta: float = BETA,
    n_splits: int = N_SPLITS,
) -> BandSplitTensor:
    """stft -> compress -> channel stack -> band split (no normalization)."""
    return band_split(to_channels(compress(stft(wave), alpha, beta)), n_splits)


def decode(
    x: BandSplitTensor,
    n_samples: int,
    alpha: float = ALPHA,
    beta: float = BETA,
) -> StereoWaveform:
    """Inverse of :func:`encode`."""
    return istft(expand(from_channels(band_merge(x)), alpha, beta), n_samples)


def read_wav(path: str | Path) -> StereoWaveform:
    """Load a 44.1 kHz PCM16/24/32 or float WAV file as stereo float64.

    Mono files are duplicated to both channels.
    """
    rate, data = wavfile.read(str(path))
    if rate != SAMPLE_RATE:
        raise ValueError(f"{path}: sample rate {rate} Hz is not supported, need {SAMPLE_RATE}")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 2**15
    elif data.dtype == np.int32:  # 24-bit PCM is left-aligned into int32
        x = data.astype(np.float64) / 2**31
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128) / 128
    else:
        x = data.astype(np.float64)
    if x.ndim == 1:
        x = np.stack([x, x])
    else:
        if x.shape[1] > 2:
            raise ValueError(f"{path}: {x.shape[1]} channels, expected mono or stereo")
        x = x.T
        if x.shape[0] == 1:
            x = np.concatenate([x, x])
    return StereoWaveform(np.ascontiguousarray(x), rate)


def write_wav(path: str | Path, wave: StereoWaveform, subtype: str = "float32") -> None:
    if subtype in ("float32", "float64"):
        data = wave.samples.T.astype(subtype)
    elif subtype == "int16":
        data = (np.clip(wave.samples.T, -1.0, 1.0 - 2**-15) * 2**15).round().astype(np.int16)
    else:
        raise ValueError(f"unsupported subtype {subtype!r}")
    wavfile.write(str(path), wave.sample_rate, data)
