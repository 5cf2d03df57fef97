"""Signal preprocessing: smoothing, segmentation, phase sanitization and the
WiFi / mmWave / acoustic front ends that turn raw captures into model input."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .core import ArgumentError, DataError, NoActivityError, read_f32

SPEED_OF_SOUND = 343.0


@dataclass(frozen=True)
class CsiRecord:
    timestamps: np.ndarray
    csi: np.ndarray  # complex, T x (n_tx * n_rx * n_sub)
    sample_rate: float
    n_tx: int = 3
    n_rx: int = 3

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        csi = np.asarray(self.csi, dtype=np.complex128)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "csi", csi)
        if csi.ndim != 2 or csi.shape[0] != ts.shape[0]:
            raise ArgumentError("csi must be T x dims with one timestamp per row")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise ArgumentError("timestamps must be strictly increasing")
        if self.sample_rate <= 0:
            raise ArgumentError("sample_rate must be positive")
        if not np.all(np.isfinite(csi)):
            raise DataError("csi contains non-finite entries")
        if csi.shape[1] % (self.n_tx * self.n_rx):
            raise ArgumentError(f"{csi.shape[1]} dims do not split into {self.n_tx}x{self.n_rx} links")

    @property
    def n_links(self) -> int:
        return self.n_tx * self.n_rx

    @property
    def n_sub(self) -> int:
        return self.csi.shape[1] // self.n_links

    def link_amplitudes(self) -> np.ndarray:
        """|h| arranged as links x time x subcarriers."""
        amp = np.abs(self.csi).reshape(len(self.timestamps), self.n_links, self.n_sub)
        return amp.transpose(1, 0, 2)


@dataclass(frozen=True)
class RdmSequence:
    frames: np.ndarray  # t x ranges x velocity bins
    frame_rate: float
    velocity_axis: np.ndarray  # m/s for each velocity bin

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        vel = np.asarray(self.velocity_axis, dtype=np.float64)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "velocity_axis", vel)
        if frames.ndim != 3 or frames.shape[0] < 1:
            raise ArgumentError("frames must be a non-empty t x ranges x velocities stack")
        if vel.shape != (frames.shape[2],):
            raise ArgumentError("velocity_axis must have one entry per velocity bin")
        if np.any(frames < 0) or not np.all(np.isfinite(frames)):
            raise DataError("range-Doppler power must be finite and nonnegative")
        if self.frame_rate <= 0:
            raise ArgumentError("frame_rate must be positive")


@dataclass(frozen=True)
class AudioCapture:
    waveform: np.ndarray
    sample_rate: float = 48000.0
    carrier_hz: float = 20000.0

    def __post_init__(self):
        wav = np.asarray(self.waveform, dtype=np.float64)
        object.__setattr__(self, "waveform", wav)
        if wav.ndim != 1:
            raise ArgumentError("waveform must be one-dimensional")
        if self.sample_rate <= 2 * self.carrier_hz:
            raise ArgumentError("sample_rate must exceed twice the carrier frequency")
        if not np.all(np.isfinite(wav)):
            raise DataError("waveform contains non-finite entries")


# --------------------------------------------------------------------------
# smoothing and segmentation
# --------------------------------------------------------------------------


def _padded_windows(series: np.ndarray, window: int) -> np.ndarray:
    # edge-inclusive mirror padding, i.e. (c b a | a b c | c b a)
    left = window // 2
    right = window - 1 - left
    padded = np.pad(series, (left, right), mode="symmetric")
    return sliding_window_view(padded, window)


def median_filter(series, window: int) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ArgumentError("median_filter expects a vector")
    if window < 1 or window % 2 == 0:
        raise ArgumentError(f"median window must be odd and positive, got {window}")
    if window > x.size:
        raise ArgumentError(f"window {window} longer than series ({x.size})")
    return np.median(_padded_windows(x, window), axis=1)


def moving_average(series, window: int) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ArgumentError("moving_average expects a vector")
    if window < 1 or window > x.size:
        raise ArgumentError(f"window {window} invalid for series of length {x.size}")
    return _padded_windows(x, window).mean(axis=1)


def variance_segment(series, window: int, threshold_ratio: float) -> tuple[int, int]:
    """Span of the most active part of a channels x time series.

    Returns a half-open ``(start, end)`` covering every window whose
    channel-averaged variance exceeds ``threshold_ratio`` times the maximum.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if not 0 < threshold_ratio < 1:
        raise ArgumentError("threshold_ratio must lie in (0, 1)")
    if window < 1 or x.shape[1] < window:
        raise ArgumentError(f"series length {x.shape[1]} shorter than window {window}")
    var = sliding_window_view(x, window, axis=1).var(axis=2).mean(axis=0)
    peak = var.max()
    if peak <= 0:
        raise NoActivityError("series is constant; no activity to segment")
    active = np.flatnonzero(var > threshold_ratio * peak)
    return int(active[0]), int(active[-1] + window)


def pbc_segment(spectrogram, band: tuple[int, int], threshold_ratio: float) -> tuple[int, int]:
    """Locate the motion span with the power burst curve (in-band power per frame).

    ``band`` is a half-open range of frequency rows; spectrogram entries are
    taken as power values.
    """
    spec = np.asarray(spectrogram, dtype=np.float64)
    lo, hi = band
    if spec.ndim != 2 or not 0 <= lo < hi <= spec.shape[0]:
        raise ArgumentError(f"band {band} outside frequency axis of size {spec.shape[0]}")
    if not 0 < threshold_ratio < 1:
        raise ArgumentError("threshold_ratio must lie in (0, 1)")
    curve = spec[lo:hi].sum(axis=0)
    peak = curve.max()
    if peak <= 0:
        raise NoActivityError("no power inside band")
    active = np.flatnonzero(curve > threshold_ratio * peak)
    return int(active[0]), int(active[-1] + 1)


def threshold_filter(image, floor_ratio: float) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if not 0 <= floor_ratio < 1:
        raise ArgumentError("floor_ratio must lie in [0, 1)")
    peak = img.max() if img.size else 0.0
    if peak <= 0:
        return img.copy()
    return np.where(img < floor_ratio * peak, 0.0, img)


def sanitize_phase(raw_phase) -> np.ndarray:
    """Unwrap each row across subcarriers and remove its least-squares line."""
    phase = np.asarray(raw_phase, dtype=np.float64)
    if phase.ndim != 2 or phase.shape[1] < 2:
        raise ArgumentError("need a time x subcarrier matrix with at least 2 subcarriers")
    unwrapped = np.unwrap(phase, axis=1)
    k = np.arange(phase.shape[1], dtype=np.float64)
    kc = k - k.mean()
    centred = unwrapped - unwrapped.mean(axis=1, keepdims=True)
    slope = centred @ kc / (kc @ kc)
    return centred - slope[:, None] * kc[None, :]


# --------------------------------------------------------------------------
# spectral front ends
# --------------------------------------------------------------------------


def stft_spectrogram(series, sample_rate: float, window_len: int = 256, hop: int = 64) -> np.ndarray:
    """Hann-windowed STFT magnitude, freq x time."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ArgumentError("stft_spectrogram expects a vector")
    if sample_rate <= 0:
        raise ArgumentError("sample_rate must be positive")
    if hop < 1 or window_len < 2:
        raise ArgumentError("need hop >= 1 and window_len >= 2")
    if window_len > x.size:
        raise ArgumentError(f"window_len {window_len} longer than series ({x.size})")
    win = signal.get_window("hann", window_len)
    frames = sliding_window_view(x, window_len)[::hop]
    return np.abs(np.fft.rfft(frames * win, axis=1)).T


def _bandpass(x: np.ndarray, band: tuple[float, float], fs: float, order: int = 4) -> np.ndarray:
    lo, hi = band
    nyq = fs / 2
    if not 0 <= lo < hi:
        raise ArgumentError(f"invalid band {band}")
    if lo <= 0 and hi >= nyq:
        return x
    if lo <= 0:
        sos = signal.butter(order, hi, btype="lowpass", fs=fs, output="sos")
    elif hi >= nyq:
        sos = signal.butter(order, lo, btype="highpass", fs=fs, output="sos")
    else:
        sos = signal.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")
    padlen = min(3 * (2 * len(sos) + 1), x.shape[0] - 1)
    return signal.sosfiltfilt(sos, x, axis=0, padlen=padlen)


def principal_series(matrix) -> np.ndarray:
    """Project a time x features matrix onto its first principal component."""
    m = np.asarray(matrix, dtype=np.float64)
    centred = m - m.mean(axis=0, keepdims=True)
    cov = centred.T @ centred / max(m.shape[0] - 1, 1)
    if np.trace(cov) <= 1e-12 * max(1.0, float(np.abs(m).max()) ** 2):
        raise NoActivityError("degenerate covariance; series carries no activity")
    _, vecs = np.linalg.eigh(cov)
    pc = vecs[:, -1]
    # eigenvector sign is arbitrary; pin it for reproducibility
    if pc[np.argmax(np.abs(pc))] < 0:
        pc = -pc
    return centred @ pc


def select_link(rec: CsiRecord) -> int:
    amps = rec.link_amplitudes()
    return int(np.argmax(amps.var(axis=1).sum(axis=1)))


def csi_doppler_spectrogram(rec: CsiRecord, band: tuple[float, float] = (2.0, 80.0),
                            window_len: int = 256, hop: int = 64,
                            reduction: str = "pca") -> np.ndarray:
    """Doppler spectrogram from CSI amplitude.

    Link selection (max amplitude variance), band-pass, reduction of the
    link's subcarriers to one series, then STFT.
    """
    amps = rec.link_amplitudes()
    link = amps[select_link(rec)]
    if link.var(axis=0).sum() <= 0:
        raise NoActivityError("CSI amplitude is constant")
    filtered = _bandpass(link, band, rec.sample_rate)
    if reduction == "pca":
        series = principal_series(filtered)
    elif reduction == "mean":
        series = filtered.mean(axis=1)
    else:
        raise ArgumentError(f"unknown reduction {reduction!r}")
    return stft_spectrogram(series, rec.sample_rate, window_len, hop)


def compress_rdm(seq: RdmSequence) -> np.ndarray:
    """Velocity of the strongest Doppler bin for every (frame, range) cell.

    Ties go to the smallest |velocity|, then to the negative one.
    """
    vel = seq.velocity_axis
    priority = np.lexsort((vel >= 0, np.abs(vel)))
    best = np.argmax(seq.frames[:, :, priority], axis=2)
    return vel[priority][best]


def doppler_shift(f_t: float, v: float, theta: float = 0.0, c: float = SPEED_OF_SOUND) -> float:
    radial = v * math.cos(theta)
    denom = c - radial
    if denom <= 0 or c + radial <= 0 or c <= 0:
        raise ArgumentError(f"|v cos(theta)| = {abs(radial)} must be below c = {c}")
    return f_t * (c + radial) / denom


def acoustic_band_rows(cap: AudioCapture, half_band: float, window_len: int) -> tuple[int, int]:
    """Carrier bin index and half-width (in bins) of the analysed band."""
    if not (0 < cap.carrier_hz - half_band and cap.carrier_hz + half_band < cap.sample_rate / 2):
        raise ArgumentError("carrier +/- half_band must lie inside (0, sample_rate/2)")
    resolution = cap.sample_rate / window_len
    return int(round(cap.carrier_hz / resolution)), int(half_band // resolution)


def acoustic_doppler_spectrogram(cap: AudioCapture, half_band: float = 500.0,
                                 window_len: int = 4096, hop: int = 1024) -> np.ndarray:
    """STFT rows around the carrier; the carrier bin is the middle row."""
    centre, width = acoustic_band_rows(cap, half_band, window_len)
    spec = stft_spectrogram(cap.waveform, cap.sample_rate, window_len, hop)
    return spec[centre - width:centre + width + 1]


# --------------------------------------------------------------------------
# raw capture readers
# --------------------------------------------------------------------------


def read_csi(path, n_frames: int, dims: int, sample_rate: float = 1000.0,
             n_tx: int = 3, n_rx: int = 3) -> CsiRecord:
    """Interleaved re/im float32 samples, frame-major."""
    raw = read_f32(path, (n_frames, dims, 2))
    csi = raw[..., 0].astype(np.float64) + 1j * raw[..., 1]
    return CsiRecord(np.arange(n_frames) / sample_rate, csi, sample_rate, n_tx, n_rx)


def write_csi(path, rec: CsiRecord) -> None:
    out = np.stack([rec.csi.real, rec.csi.imag], axis=-1).astype("<f4")
    Path(path).write_bytes(out.tobytes())


def read_rdm(path, shape: Sequence[int], frame_rate: float, velocity_axis) -> RdmSequence:
    return RdmSequence(read_f32(path, tuple(shape)), frame_rate, velocity_axis)


def read_wav(path, carrier_hz: float = 20000.0) -> AudioCapture:
    """16-bit mono PCM to float in [-1, 1]."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise DataError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return AudioCapture(pcm.astype(np.float32) / 32768.0, float(rate), carrier_hz)


def write_wav(path, cap: AudioCapture) -> None:
    pcm = np.clip(np.round(cap.waveform * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(cap.sample_rate))
        fh.writeframes(pcm.tobytes())
