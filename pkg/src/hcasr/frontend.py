"""Feature extraction (power spectrogram, log-mel fbank) and augmentation.

All framing uses a 400-sample window and 160-sample hop at 16 kHz with no
padding, so ``T = 1 + (N - 400) // 160``.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import ConfigError, DataError

SAMPLE_RATE = 16000
WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 400
N_MELS = 80
N_SPEC = N_FFT // 2 + 1
LOG_FLOOR = float(np.log(1e-10))

FBANK80 = "fbank80"
SPECTROGRAM201 = "spectrogram201"
_KIND_CODES = {FBANK80: 0, SPECTROGRAM201: 1}
_KIND_DIMS = {FBANK80: N_MELS, SPECTROGRAM201: N_SPEC}

FTMX_MAGIC = b"FTMX"
FTMX_VERSION = 1


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"audio must be mono, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("audio contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    kind: str
    frame_shift_s: float = HOP_LENGTH / SAMPLE_RATE
    frame_length_s: float = WIN_LENGTH / SAMPLE_RATE
    normalized: bool = False

    def __post_init__(self):
        if self.kind not in _KIND_DIMS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.frames.ndim != 2 or self.frames.shape[1] != _KIND_DIMS[self.kind]:
            raise ValueError(
                f"{self.kind} expects D={_KIND_DIMS[self.kind]}, got shape {self.frames.shape}"
            )

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def fill_value(self) -> float:
        """Value used for masked cells: the log floor for fbank, 0 for power.

        Normalized features are masked with their mean, 0.
        """
        if self.normalized or self.kind == SPECTROGRAM201:
            return 0.0
        return LOG_FLOOR


@dataclass
class SpecAugmentPolicy:
    n_freq_masks: int = 2
    max_freq_width: int = 15
    n_time_masks: int = 2
    max_time_width: int = 20


@dataclass
class NoisePolicy:
    snr_db_min: float = 5.0
    snr_db_max: float = 15.0
    noise_kind: str = "white"


@dataclass
class AugmentPolicy:
    specaugment: SpecAugmentPolicy | None = None
    speed_factors: tuple[float, ...] = ()
    noise: NoisePolicy | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if any(f <= 0 for f in self.speed_factors):
            raise ConfigError(f"speed factors must be positive: {self.speed_factors}")
        if self.noise is not None and self.noise.snr_db_min > self.noise.snr_db_max:
            raise ConfigError("snr_db_min must not exceed snr_db_max")


@dataclass
class FrontendOptions:
    """Optional processing steps; all off by default."""

    window: str = "hamming"
    pre_emphasis: float = 0.0
    normalize: bool = False


def num_frames(n_samples: int) -> int:
    return 1 + (n_samples - WIN_LENGTH) // HOP_LENGTH


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE):
    """Triangular filters, equally spaced on the mel scale from 0 Hz to Nyquist.

    Returns an ``(n_fft // 2 + 1, n_mels)`` weight matrix.
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling)).T


_MEL_WEIGHTS = mel_filterbank()


def _check_audio(audio: AudioBuffer):
    if audio.sample_rate_hz != SAMPLE_RATE:
        raise DataError(
            f"unsupported sample rate {audio.sample_rate_hz} Hz; resample to {SAMPLE_RATE} first"
        )
    if len(audio) < WIN_LENGTH:
        raise DataError(f"audio too short: {len(audio)} samples < one {WIN_LENGTH}-sample window")


def _frames(audio: AudioBuffer, opts: FrontendOptions) -> np.ndarray:
    _check_audio(audio)
    x = audio.samples
    if opts.pre_emphasis:
        x = np.concatenate([x[:1], x[1:] - opts.pre_emphasis * x[:-1]])
    T = num_frames(len(x))
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(T)[:, None]
    if opts.window == "hamming":
        win = np.hamming(WIN_LENGTH)
    elif opts.window == "rectangular":
        win = np.ones(WIN_LENGTH)
    else:
        raise ConfigError(f"unknown window {opts.window!r}")
    return x[idx] * win


def _power_spectrum(audio, opts):
    spec = np.fft.rfft(_frames(audio, opts), n=N_FFT, axis=1)
    return spec.real**2 + spec.imag**2


def _normalize(frames):
    mean = frames.mean(axis=0, keepdims=True)
    std = frames.std(axis=0, keepdims=True)
    return (frames - mean) / np.maximum(std, 1e-5)


def compute_spectrogram(audio: AudioBuffer, opts: FrontendOptions | None = None) -> FeatureMatrix:
    """Single-sided power spectrum per frame, ``T x 201``."""
    opts = opts or FrontendOptions()
    frames = _power_spectrum(audio, opts)
    if opts.normalize:
        frames = _normalize(frames)
    return FeatureMatrix(frames, SPECTROGRAM201, normalized=opts.normalize)


def compute_fbank(audio: AudioBuffer, opts: FrontendOptions | None = None) -> FeatureMatrix:
    """80-band log-mel energies with a floor of ``log(1e-10)``, ``T x 80``."""
    opts = opts or FrontendOptions()
    energies = _power_spectrum(audio, opts) @ _MEL_WEIGHTS
    frames = np.log(np.maximum(energies, 1e-10))
    if opts.normalize:
        frames = _normalize(frames)
    return FeatureMatrix(frames, FBANK80, normalized=opts.normalize)


def spec_augment(
    feat: FeatureMatrix,
    policy: SpecAugmentPolicy,
    rng: np.random.Generator,
    return_mask: bool = False,
):
    T, D = feat.frames.shape
    if policy.n_freq_masks and policy.max_freq_width >= D:
        raise ConfigError(f"max_freq_width {policy.max_freq_width} must be < D={D}")
    if policy.n_time_masks and policy.max_time_width >= T:
        raise ConfigError(f"max_time_width {policy.max_time_width} must be < T={T}")
    if min(policy.n_freq_masks, policy.n_time_masks, policy.max_freq_width, policy.max_time_width) < 0:
        raise ConfigError("SpecAugment counts and widths must be non-negative")

    mask = np.zeros((T, D), dtype=bool)
    for _ in range(policy.n_freq_masks):
        width = int(rng.integers(0, policy.max_freq_width + 1))
        start = int(rng.integers(0, D - width + 1))
        mask[:, start : start + width] = True
    for _ in range(policy.n_time_masks):
        width = int(rng.integers(0, policy.max_time_width + 1))
        start = int(rng.integers(0, T - width + 1))
        mask[start : start + width, :] = True

    frames = feat.frames.copy()
    frames[mask] = feat.fill_value
    out = FeatureMatrix(frames, feat.kind, feat.frame_shift_s, feat.frame_length_s, feat.normalized)
    if return_mask:
        return out, mask
    return out


def speed_perturb(audio: AudioBuffer, factor: float) -> AudioBuffer:
    """Playback-rate change by polyphase windowed-sinc resampling.

    Output length is ``round(N / factor)``; pitch and duration both scale.
    """
    if not 0.5 <= factor <= 2.0:
        raise ConfigError(f"speed factor {factor} outside [0.5, 2.0]")
    n = len(audio)
    n_out = int(round(n / factor))
    if factor == 1.0:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate_hz)
    ratio = Fraction(factor).limit_denominator(1000)
    y = resample_poly(audio.samples, ratio.denominator, ratio.numerator)
    if y.shape[0] >= n_out:
        y = y[:n_out]
    else:
        y = np.concatenate([y, np.zeros(n_out - y.shape[0])])
    return AudioBuffer(y, audio.sample_rate_hz)


def _fit_noise(noise: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if noise.shape[0] < n:
        noise = np.tile(noise, -(-n // noise.shape[0]) + 1)
    offset = int(rng.integers(0, noise.shape[0] - n + 1))
    return noise[offset : offset + n]


def noise_gain(p_signal: float, p_noise: float, snr_db: float) -> float:
    return float(np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_noise(
    audio: AudioBuffer, noise: AudioBuffer, snr_db: float, rng: np.random.Generator
) -> AudioBuffer:
    if not np.isfinite(snr_db):
        raise ConfigError("snr_db must be finite")
    x = audio.samples
    segment = _fit_noise(noise.samples, x.shape[0], rng)
    p_signal = float(np.mean(x**2))
    p_noise = float(np.mean(segment**2))
    if p_signal == 0.0 or p_noise == 0.0:
        raise DataError("mix_noise needs nonzero signal and noise power")
    g = noise_gain(p_signal, p_noise, snr_db)
    return AudioBuffer(x + g * segment, audio.sample_rate_hz)


def measured_snr_db(clean: np.ndarray, mixed: np.ndarray) -> float:
    noise = mixed - clean
    return float(10.0 * np.log10(np.mean(clean**2) / np.mean(noise**2)))


def white_noise(n: int, rng: np.random.Generator) -> AudioBuffer:
    return AudioBuffer(rng.standard_normal(n))


def pink_noise(n: int, rng: np.random.Generator) -> AudioBuffer:
    """1/f noise by spectral shaping of white noise."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.shape[0], dtype=np.float64)
    f[0] = 1.0
    y = np.fft.irfft(spec / np.sqrt(f), n=n)
    return AudioBuffer(y / np.std(y))


def make_noise(kind: str, n: int, rng: np.random.Generator) -> AudioBuffer:
    if kind == "white":
        return white_noise(n, rng)
    if kind == "pink":
        return pink_noise(n, rng)
    raise ConfigError(f"unknown noise kind {kind!r}")


def augment_audio(audio: AudioBuffer, policy: AugmentPolicy, rng: np.random.Generator) -> AudioBuffer:
    """Waveform-level augmentation: speed first, then noise."""
    if policy.speed_factors:
        factor = float(policy.speed_factors[int(rng.integers(0, len(policy.speed_factors)))])
        audio = speed_perturb(audio, factor)
    if policy.noise is not None:
        snr = float(rng.uniform(policy.noise.snr_db_min, policy.noise.snr_db_max))
        noise = make_noise(policy.noise.noise_kind, len(audio), rng)
        audio = mix_noise(audio, noise, snr, rng)
    return audio


def extract_streams(
    audio: AudioBuffer,
    opts: FrontendOptions | None = None,
    policy: AugmentPolicy | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Fbank and spectrogram for one utterance, with optional augmentation.

    Order: speed perturbation, noise, feature extraction, then SpecAugment
    (same policy, independent draws, on both streams).
    """
    if policy is not None:
        rng = rng if rng is not None else np.random.default_rng(policy.rng_seed)
        audio = augment_audio(audio, policy, rng)
    fbank = compute_fbank(audio, opts)
    spec = compute_spectrogram(audio, opts)
    if policy is not None and policy.specaugment is not None:
        fbank = spec_augment(fbank, policy.specaugment, rng)
        spec = spec_augment(spec, policy.specaugment, rng)
    return fbank, spec


# -- binary feature dump ------------------------------------------------------


def write_ftmx(path, feat: FeatureMatrix):
    T, D = feat.frames.shape
    header = FTMX_MAGIC + struct.pack("<IBII", FTMX_VERSION, _KIND_CODES[feat.kind], T, D)
    Path(path).write_bytes(header + np.ascontiguousarray(feat.frames, dtype="<f8").tobytes())


def read_ftmx(path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if data[:4] != FTMX_MAGIC:
        raise DataError(f"{path}: not an FTMX file")
    version, code, T, D = struct.unpack_from("<IBII", data, 4)
    if version != FTMX_VERSION:
        raise DataError(f"{path}: unsupported FTMX version {version}")
    kind = {v: k for k, v in _KIND_CODES.items()}.get(code)
    if kind is None:
        raise DataError(f"{path}: unknown feature kind code {code}")
    offset = 4 + struct.calcsize("<IBII")
    frames = np.frombuffer(data, dtype="<f8", count=T * D, offset=offset).reshape(T, D)
    return FeatureMatrix(frames.astype(np.float64), kind)


# -- WAV I/O ------------------------------------------------------------------


def read_wav(path) -> AudioBuffer:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise DataError(f"{path}: expected 16-bit mono PCM")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, rate)


def write_wav(path, audio: AudioBuffer):
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate_hz)
        w.writeframes(pcm.tobytes())
