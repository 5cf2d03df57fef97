"""Synthetic multi-domain benchmarks with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import sigproc
from .core import (ArgumentError, DomainDataset, Modality, ModalityKind, Sample, SourceSet,
                   seeded_rng)
from .sigproc import SPEED_OF_SOUND, AudioCapture, RdmSequence

GESTURES = ("L", "O", "V", "S", "W", "Z")
ACTIVITIES = ("walk", "sit", "stand", "bend", "wave", "fall")
FALL_LABELS = ("non_fall", "fall")


@dataclass(frozen=True)
class DomainShift:
    domain_id: str
    time_scale: float = 1.0
    amplitude_gain: float = 1.0
    delay: float = 0.0
    noise_sigma: float = 0.0
    channel_tint: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "channel_tint", tuple(float(t) for t in self.channel_tint))
        values = [self.time_scale, self.amplitude_gain, self.delay, self.noise_sigma, *self.channel_tint]
        if not np.all(np.isfinite(values)):
            raise ArgumentError("domain shift parameters must be finite")
        if not 0.5 <= self.time_scale <= 2.0:
            raise ArgumentError(f"time_scale {self.time_scale} outside [0.5, 2]")
        if self.amplitude_gain <= 0 or self.delay < 0 or self.noise_sigma < 0:
            raise ArgumentError("need amplitude_gain > 0, delay >= 0, noise_sigma >= 0")
        if not self.channel_tint:
            raise ArgumentError("channel_tint must be non-empty")

    @classmethod
    def identity(cls, domain_id: str, noise_sigma: float = 0.0) -> "DomainShift":
        return cls(domain_id, noise_sigma=noise_sigma)

    def tint(self, n: int) -> np.ndarray:
        t = np.asarray(self.channel_tint, dtype=np.float64)
        return np.resize(t, n)


@dataclass(frozen=True)
class ClassTemplate:
    class_id: int
    motif: np.ndarray  # float64, modality-shaped (rank-2 view)


# --------------------------------------------------------------------------
# motifs and shifts
# --------------------------------------------------------------------------


def _smooth_walk(rng: np.random.Generator, length: int, smooth: int = 9) -> np.ndarray:
    walk = np.cumsum(rng.standard_normal(length + 2 * smooth))
    kernel = np.hanning(smooth + 2)[1:-1]
    walk = np.convolve(walk, kernel / kernel.sum(), mode="same")[smooth:smooth + length]
    walk = walk - walk.mean()
    return walk / (walk.std() + 1e-12)


def _ridge_image(rows: int, cols: int, centre: np.ndarray, width: float = 1.2) -> np.ndarray:
    r = np.arange(rows)[:, None]
    return np.exp(-0.5 * ((r - centre[None, :]) / width) ** 2)


def _motif(kind: ModalityKind, shape2d: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape2d
    if kind is ModalityKind.AMPLITUDE_SERIES or kind is ModalityKind.PHASE_MAP:
        base = _smooth_walk(rng, cols)
        mix = rng.uniform(0.5, 1.5, size=rows)
        own = np.stack([_smooth_walk(rng, cols) for _ in range(rows)])
        return mix[:, None] * base[None, :] + 0.3 * own
    if kind is ModalityKind.COMPRESSED_DOPPLER_MAP:
        # bump trajectory: range position drifting over time
        start, stop = rng.uniform(0.15, 0.85, size=2) * (cols - 1)
        path = np.linspace(start, stop, rows) + 1.5 * _smooth_walk(rng, rows)
        return _ridge_image(cols, rows, path).T
    # spectrogram-like: frequency ramp ridge over time
    lo, hi = rng.uniform(0.1, 0.9, size=2) * (rows - 1)
    path = np.linspace(lo, hi, cols) + 0.15 * rows * np.sin(np.linspace(0, rng.uniform(1, 3) * np.pi, cols))
    return _ridge_image(rows, cols, np.clip(path, 0, rows - 1))


def _pairwise_max_corr(motifs: Sequence[np.ndarray]) -> float:
    flat = [(m - m.mean()).ravel() for m in motifs]
    worst = -1.0
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            denom = np.linalg.norm(flat[i]) * np.linalg.norm(flat[j]) + 1e-12
            worst = max(worst, float(flat[i] @ flat[j] / denom))
    return worst


def make_templates(num_classes: int, modality: Modality, rng: np.random.Generator,
                   max_corr: float = 0.9, attempts: int = 200) -> list[ClassTemplate]:
    shape2d = _rank2(modality)
    motifs: list[np.ndarray] = []
    for k in range(num_classes):
        for _ in range(attempts):
            cand = _motif(modality.kind, shape2d, rng)
            if _pairwise_max_corr(motifs + [cand]) < max_corr:
                break
        else:
            raise ArgumentError(f"could not draw {num_classes} decorrelated motifs for {modality.kind}")
        motifs.append(cand)
    return [ClassTemplate(k, m) for k, m in enumerate(motifs)]


def _rank2(modality: Modality) -> tuple[int, int]:
    if modality.is_series:
        return modality.shape[0], modality.shape[1]
    sp = modality.spatial
    if modality.channels != 1:
        raise ArgumentError("synthetic images support a single channel")
    return sp[0], sp[1]


def warp_time(x: np.ndarray, time_scale: float, delay: float) -> np.ndarray:
    """Stretch the last axis about its start by ``time_scale`` and shift by ``delay``.

    Values outside the source support hold the nearest edge.
    """
    n = x.shape[-1]
    src = (np.arange(n) - delay) / time_scale
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    return x[..., lo] * (1 - frac) + x[..., hi] * frac


def apply_shift(motif: np.ndarray, shift: DomainShift) -> np.ndarray:
    out = warp_time(motif, shift.time_scale, shift.delay)
    return shift.amplitude_gain * shift.tint(out.shape[0])[:, None] * out


def synth_series_dataset(num_domains: int, num_classes: int, per_class: int, modality: Modality,
                         shifts: Sequence[DomainShift], rng: np.random.Generator,
                         label_names: Sequence[str] | None = None) -> SourceSet:
    """Domain-shifted class motifs plus Gaussian noise, one modality."""
    if len(shifts) != num_domains:
        raise ArgumentError(f"{len(shifts)} shifts for {num_domains} domains")
    templates = make_templates(num_classes, modality, rng)
    domains = []
    for shift in shifts:
        samples = []
        for t in templates:
            clean = apply_shift(t.motif, shift)
            for j in range(per_class):
                x = clean + shift.noise_sigma * rng.standard_normal(clean.shape)
                samples.append(Sample(f"c{t.class_id}_{j:03d}", shift.domain_id, t.class_id,
                                      {modality.kind: x.reshape(modality.shape)}))
        domains.append(DomainDataset(shift.domain_id, tuple(samples)))
    names = tuple(label_names) if label_names else tuple(f"class{k}" for k in range(num_classes))
    return SourceSet(tuple(domains), names, (modality,))


def shifted_templates(num_classes: int, modality: Modality, shifts: Sequence[DomainShift],
                      rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Noise-free per-domain class references (K x shape).

    With a fresh rng of the same seed these are exactly the means that
    :func:`synth_series_dataset` perturbs, since templates are drawn first.
    """
    templates = make_templates(num_classes, modality, rng)
    return {s.domain_id: np.stack([apply_shift(t.motif, s).reshape(modality.shape) for t in templates])
            for s in shifts}


def template_match_accuracy(dataset: SourceSet, references: dict[str, np.ndarray], kind=None) -> float:
    """Accuracy of assigning every sample to its nearest reference template."""
    kind = ModalityKind(kind) if kind else dataset.kinds[0]
    correct = total = 0
    for d in dataset.domains:
        x = np.stack([s.tensors[kind].ravel() for s in d.samples]).astype(np.float64)
        refs = references[d.domain_id].reshape(len(references[d.domain_id]), -1)
        dist = ((x[:, None, :] - refs[None]) ** 2).sum(axis=2)
        correct += int((dist.argmin(axis=1) == d.labels).sum())
        total += len(d)
    return correct / total


# --------------------------------------------------------------------------
# mmWave range-Doppler
# --------------------------------------------------------------------------


def velocity_axis(vbins: int, v_max: float = 4.0) -> np.ndarray:
    return (np.arange(vbins) - (vbins - 1) / 2) * (2 * v_max / max(vbins - 1, 1))


def rdm_trajectory(class_id: int, frames: int, ranges: int, v_axis: np.ndarray,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame (range, velocity) path for a class; velocity is the range rate."""
    start = rng.uniform(0.2, 0.8) * (ranges - 1)
    vmax = 0.8 * float(np.abs(v_axis).max())
    phase = 2 * np.pi * class_id / 6
    u = np.linspace(0, 1, frames)
    vel = vmax * np.sin(2 * np.pi * (0.5 + 0.25 * (class_id % 3)) * u + phase)
    vel = np.where(np.abs(vel) < 0.2 * vmax, 0.0, vel)
    rng_path = np.clip(start + np.cumsum(vel) * (ranges / (4 * frames * vmax)), 0, ranges - 1)
    return rng_path, vel


def render_rdm(rng_path: np.ndarray, vel: np.ndarray, ranges: int, v_axis: np.ndarray,
               gain: float = 1.0, tint: np.ndarray | None = None, noise: float = 0.0,
               rng: np.random.Generator | None = None, width: float = 1.0) -> np.ndarray:
    r = np.arange(ranges)[None, :, None]
    dv = v_axis[1] - v_axis[0] if len(v_axis) > 1 else 1.0
    v = v_axis[None, None, :]
    power = gain * np.exp(-0.5 * ((r - rng_path[:, None, None]) / width) ** 2
                          - 0.5 * ((v - vel[:, None, None]) / (0.6 * dv)) ** 2)
    if tint is not None:
        power = power * tint[None, :, None]
    if noise > 0:
        power = power + noise * np.abs(rng.standard_normal(power.shape))
    return power


def synth_rdm_dataset(num_domains: int, num_classes: int, per_class: int, frames: int, ranges: int,
                      vbins: int, shifts: Sequence[DomainShift], rng: np.random.Generator,
                      frame_rate: float = 10.0, keep_rdm: bool = False) -> SourceSet:
    """Class-specific (range, velocity) trajectories rendered as RDM stacks and compressed.

    The time warp / delay of each shift acts on the trajectory; gain and tint
    scale the echo power per range bin; noise is a half-normal power floor.
    """
    if len(shifts) != num_domains:
        raise ArgumentError(f"{len(shifts)} shifts for {num_domains} domains")
    v_axis = velocity_axis(vbins)
    trajectories = [rdm_trajectory(k, frames, ranges, v_axis, rng) for k in range(num_classes)]
    cdm = Modality(ModalityKind.COMPRESSED_DOPPLER_MAP, (frames, ranges))
    domains = []
    for shift in shifts:
        samples = []
        for k, (path, vel) in enumerate(trajectories):
            wpath = warp_time(path, shift.time_scale, shift.delay)
            wvel = warp_time(vel, shift.time_scale, shift.delay) / shift.time_scale
            for j in range(per_class):
                power = render_rdm(wpath, wvel, ranges, v_axis, shift.amplitude_gain,
                                   shift.tint(ranges), shift.noise_sigma, rng)
                seq = RdmSequence(power, frame_rate, v_axis)
                tensors = {cdm.kind: sigproc.compress_rdm(seq)}
                samples.append(Sample(f"c{k}_{j:03d}", shift.domain_id, k, tensors))
        domains.append(DomainDataset(shift.domain_id, tuple(samples)))
    names = ACTIVITIES[:num_classes] if num_classes <= len(ACTIVITIES) else tuple(f"class{k}" for k in range(num_classes))
    return SourceSet(tuple(domains), tuple(names), (cdm,))


# --------------------------------------------------------------------------
# acoustic forward model
# --------------------------------------------------------------------------


def synth_acoustic_wave(motion_profile: Sequence[tuple[float, float]], carrier_hz: float = 20000.0,
                        sample_rate: float = 48000.0, reflect_gain: float = 0.3,
                        rng: np.random.Generator | None = None, noise_sigma: float = 0.0,
                        c: float = SPEED_OF_SOUND) -> AudioCapture:
    """Direct carrier plus a body echo whose instantaneous frequency follows the motion."""
    freqs = []
    for v, duration in motion_profile:
        if abs(v) >= c:
            raise ArgumentError(f"speed {v} m/s is not below c = {c}")
        if duration < 0:
            raise ArgumentError("segment durations must be nonnegative")
        n = int(round(duration * sample_rate))
        freqs.append(np.full(n, sigproc.doppler_shift(carrier_hz, v, 0.0, c)))
    inst = np.concatenate(freqs) if freqs else np.zeros(0)
    t = np.arange(inst.size) / sample_rate
    echo_phase = 2 * np.pi * np.concatenate([[0.0], np.cumsum(inst[:-1])]) / sample_rate
    wave = 0.5 * np.sin(2 * np.pi * carrier_hz * t)
    if reflect_gain:
        wave = wave + 0.5 * reflect_gain * np.sin(echo_phase)
    if noise_sigma > 0:
        if rng is None:
            raise ArgumentError("noise requires an rng")
        wave = wave + noise_sigma * rng.standard_normal(wave.shape)
    return AudioCapture(wave, sample_rate, carrier_hz)


def doppler_ridge(velocities: np.ndarray, rows: int, bin_hz: float, carrier_hz: float = 20000.0) -> np.ndarray:
    """Row index (centre = carrier) of the echo for each frame's velocity."""
    shift = np.array([sigproc.doppler_shift(carrier_hz, v) - carrier_hz for v in velocities])
    return (rows - 1) / 2 + shift / bin_hz


FALL_PROFILES = {
    # velocity envelopes over normalised time, m/s (positive = towards the device)
    "fall": lambda u: -3.2 * np.exp(-0.5 * ((u - 0.45) / 0.08) ** 2),
    "walk": lambda u: 1.0 * np.sin(2 * np.pi * 1.5 * u),
    "sit": lambda u: -0.9 * np.exp(-0.5 * ((u - 0.5) / 0.2) ** 2),
    "stand": lambda u: 0.9 * np.exp(-0.5 * ((u - 0.5) / 0.2) ** 2),
    "bend": lambda u: -1.3 * np.sin(np.pi * u) * np.exp(-0.5 * ((u - 0.35) / 0.2) ** 2)
    + 1.3 * np.exp(-0.5 * ((u - 0.75) / 0.1) ** 2),
}


def _fall_spectrogram(profile: str, shift: DomainShift, rows: int, cols: int,
                      rng: np.random.Generator) -> np.ndarray:
    u = np.linspace(0, 1, cols)
    vel = warp_time(FALL_PROFILES[profile](u), shift.time_scale, shift.delay)
    centre = doppler_ridge(vel, rows, 40.0)
    img = _ridge_image(rows, cols, centre, width=1.0)
    carrier = _ridge_image(rows, cols, np.full(cols, (rows - 1) / 2), width=0.7)
    img = shift.amplitude_gain * shift.tint(rows)[:, None] * img + 0.6 * carrier
    return img + shift.noise_sigma * rng.standard_normal(img.shape)


# --------------------------------------------------------------------------
# WiFi CSI forward model
# --------------------------------------------------------------------------

WIFI_SUBCARRIERS = 8
WIFI_TIME = 64
WIFI_SPEC_WINDOW = 16
WIFI_SPEC_HOP = 4


def wifi_modalities() -> tuple[Modality, Modality, Modality]:
    n_frames = (WIFI_TIME - WIFI_SPEC_WINDOW) // WIFI_SPEC_HOP + 1
    return (Modality(ModalityKind.AMPLITUDE_SERIES, (WIFI_SUBCARRIERS, WIFI_TIME)),
            Modality(ModalityKind.PHASE_MAP, (WIFI_SUBCARRIERS, WIFI_TIME // 2)),
            Modality(ModalityKind.SPECTROGRAM, (WIFI_SPEC_WINDOW // 2 + 1, n_frames)))


def gesture_path(rng: np.random.Generator, length: int = WIFI_TIME) -> np.ndarray:
    """Reflection path-length change (in wavelengths) traced by one gesture."""
    return 1.2 * _smooth_walk(rng, length, smooth=11)


def simulate_csi(path: np.ndarray, shift: DomainShift, statics: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """Complex CSI (time x subcarrier): static paths plus one moving body echo."""
    s = statics.shape[0]
    d = warp_time(path, shift.time_scale, shift.delay)
    scale = 1.0 + 0.03 * np.arange(s)  # wavelength spread across subcarriers
    echo = shift.amplitude_gain * np.exp(-2j * np.pi * d[:, None] * scale[None, :])
    h = statics[None, :] * shift.tint(s)[None, :] + 0.6 * echo
    if shift.noise_sigma > 0:
        h = h + shift.noise_sigma * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)) / np.sqrt(2)
    # hardware offsets: random linear phase across subcarriers for every packet
    k = np.arange(s)
    offset = rng.uniform(-np.pi, np.pi, size=(h.shape[0], 1)) + rng.uniform(-0.5, 0.5, size=(h.shape[0], 1)) * k
    return h * np.exp(1j * offset)


def wifi_features(h: np.ndarray) -> dict[ModalityKind, np.ndarray]:
    """Amplitude, sanitized phase and Doppler spectrogram from one CSI capture."""
    amp = np.abs(h)
    amp = np.stack([sigproc.median_filter(amp[:, i], 3) for i in range(amp.shape[1])], axis=1)
    phase = sigproc.sanitize_phase(np.angle(h))
    phase = phase.reshape(phase.shape[0] // 2, 2, -1).mean(axis=1)
    try:
        series = sigproc.principal_series(amp)
    except Exception:
        series = np.zeros(amp.shape[0])
    spec = sigproc.stft_spectrogram(series, 1.0, WIFI_SPEC_WINDOW, WIFI_SPEC_HOP)
    return {ModalityKind.AMPLITUDE_SERIES: amp.T - amp.mean(),
            ModalityKind.PHASE_MAP: phase.T,
            ModalityKind.SPECTROGRAM: spec / 4.0}


def synth_wifi_dataset(num_classes: int, per_class: int, shifts: Sequence[DomainShift],
                       rng: np.random.Generator) -> SourceSet:
    paths = []
    for _ in range(num_classes):
        for _ in range(200):
            cand = gesture_path(rng)
            if not paths or _pairwise_max_corr(paths + [cand]) < 0.9:
                break
        paths.append(cand)
    statics = rng.uniform(0.8, 1.2, WIFI_SUBCARRIERS) * np.exp(1j * rng.uniform(-np.pi, np.pi, WIFI_SUBCARRIERS))
    domains = []
    for shift in shifts:
        samples = []
        for k, path in enumerate(paths):
            for j in range(per_class):
                h = simulate_csi(path, shift, statics, rng)
                samples.append(Sample(f"c{k}_{j:03d}", shift.domain_id, k, wifi_features(h)))
        domains.append(DomainDataset(shift.domain_id, tuple(samples)))
    names = GESTURES[:num_classes] if num_classes <= len(GESTURES) else tuple(f"g{k}" for k in range(num_classes))
    return SourceSet(tuple(domains), tuple(names), wifi_modalities())


# --------------------------------------------------------------------------
# benchmarks
# --------------------------------------------------------------------------


def default_shifts(prefix: str, count: int, rng: np.random.Generator, channels: int,
                   noise_sigma: float, tint_spread: float = 0.3) -> list[DomainShift]:
    scales = np.linspace(0.75, 1.35, count)
    rng.shuffle(scales)
    shifts = []
    for i in range(count):
        shifts.append(DomainShift(
            f"{prefix}{i + 1}",
            time_scale=float(scales[i]),
            amplitude_gain=float(rng.uniform(0.7, 1.3)),
            delay=float(rng.uniform(0, 8)),
            noise_sigma=noise_sigma,
            channel_tint=tuple(rng.uniform(1 - tint_spread, 1 + tint_spread, channels)),
        ))
    return shifts


def make_benchmark(spec_name: str, seed: int = 0) -> SourceSet:
    rng = seeded_rng(seed, f"benchmark/{spec_name}")
    if spec_name == "gesture6":
        shifts = default_shifts("P", 6, rng, WIFI_SUBCARRIERS, noise_sigma=0.08)
        return synth_wifi_dataset(6, 20, shifts, rng)
    if spec_name == "activity6":
        shifts = default_shifts("U", 6, rng, 16, noise_sigma=0.05, tint_spread=0.2)
        return synth_rdm_dataset(6, 6, 20, frames=32, ranges=16, vbins=17, shifts=shifts, rng=rng)
    if spec_name == "fall2":
        shifts = default_shifts("L", 4, rng, 24, noise_sigma=0.1)
        kind = Modality(ModalityKind.AUDIO_SPECTROGRAM, (24, 32))
        domains = []
        for shift in shifts:
            samples = []
            for j in range(40):
                img = _fall_spectrogram("fall", shift, 24, 32, rng)
                samples.append(Sample(f"fall_{j:03d}", shift.domain_id, 1, {kind.kind: img}))
            for name in ("walk", "sit", "stand", "bend"):
                for j in range(20):
                    img = _fall_spectrogram(name, shift, 24, 32, rng)
                    samples.append(Sample(f"{name}_{j:03d}", shift.domain_id, 0, {kind.kind: img}))
            domains.append(DomainDataset(shift.domain_id, tuple(samples)))
        return SourceSet(tuple(domains), FALL_LABELS, (kind,))
    raise ArgumentError(f"unknown benchmark {spec_name!r}; choose gesture6, activity6 or fall2")
