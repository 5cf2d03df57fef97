"""Shared types, configuration, seeded randomness and on-disk I/O."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

FORMAT_VERSION = 1
_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.\-]*$")


# --------------------------------------------------------------------------
# errors
# --------------------------------------------------------------------------


class DGSenseError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this failure."""

    exit_code = 2


class ArgumentError(DGSenseError, ValueError):
    exit_code = 1


class FormatError(DGSenseError):
    pass


class CorruptionError(DGSenseError):
    pass


class DataError(DGSenseError, ValueError):
    pass


class NoActivityError(DGSenseError, ValueError):
    pass


class StateError(DGSenseError, RuntimeError):
    pass


class TrainingError(DGSenseError, RuntimeError):
    exit_code = 3


class InvariantViolation(TrainingError):
    pass


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------


class ModalityKind(str, Enum):
    AMPLITUDE_SERIES = "amplitude_series"
    PHASE_MAP = "phase_map"
    SPECTROGRAM = "spectrogram"
    COMPRESSED_DOPPLER_MAP = "compressed_doppler_map"
    AUDIO_SPECTROGRAM = "audio_spectrogram"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Modality:
    kind: ModalityKind
    shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "kind", ModalityKind(self.kind))
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        if not shape or any(s < 1 for s in shape):
            raise ArgumentError(f"invalid shape {shape} for {self.kind}")
        if self.kind is ModalityKind.AMPLITUDE_SERIES:
            if len(shape) != 2:
                raise ArgumentError("amplitude_series must be rank-2 (channels x time)")
        elif len(shape) not in (2, 3):
            raise ArgumentError(f"{self.kind} must be rank-2 or rank-3")

    @property
    def is_series(self) -> bool:
        return self.kind is ModalityKind.AMPLITUDE_SERIES

    @property
    def channels(self) -> int:
        if self.is_series or len(self.shape) == 3:
            return self.shape[0]
        return 1

    @property
    def spatial(self) -> tuple[int, ...]:
        """Shape without the channel axis (rank-2 images have an implicit single channel)."""
        if self.is_series or len(self.shape) == 3:
            return self.shape[1:]
        return self.shape

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "shape": list(self.shape)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Modality":
        return cls(ModalityKind(obj["kind"]), tuple(obj["shape"]))


def _frozen_f32(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float32, order="C", copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Sample:
    sample_id: str
    domain_id: str
    label: int
    tensors: Mapping[ModalityKind, np.ndarray]

    def __post_init__(self):
        if not _ID_RE.match(self.sample_id):
            raise ArgumentError(f"sample_id {self.sample_id!r} is not filesystem-safe")
        tensors = {}
        for kind, value in self.tensors.items():
            arr = _frozen_f32(value)
            if not np.all(np.isfinite(arr)):
                raise DataError(f"sample {self.sample_id}: non-finite entries in {kind}")
            tensors[ModalityKind(kind)] = arr
        object.__setattr__(self, "tensors", tensors)
        object.__setattr__(self, "label", int(self.label))

    def digest(self) -> str:
        """Content hash over the tensors (ids and label excluded)."""
        h = hashlib.sha256()
        for kind in sorted(self.tensors, key=lambda k: k.value):
            h.update(kind.value.encode())
            h.update(self.tensors[kind].astype("<f4").tobytes())
        return h.hexdigest()

    def replace(self, **changes) -> "Sample":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DomainDataset:
    domain_id: str
    samples: tuple[Sample, ...]

    def __post_init__(self):
        if not _ID_RE.match(self.domain_id):
            raise ArgumentError(f"domain_id {self.domain_id!r} is not filesystem-safe")
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        if not samples:
            raise DataError(f"domain {self.domain_id} has no samples")
        ids = set()
        for s in samples:
            if s.domain_id != self.domain_id:
                raise DataError(f"sample {s.sample_id} belongs to {s.domain_id}, not {self.domain_id}")
            if s.sample_id in ids:
                raise DataError(f"duplicate sample_id {s.sample_id} in {self.domain_id}")
            ids.add(s.sample_id)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


@dataclass(frozen=True)
class SourceSet:
    domains: tuple[DomainDataset, ...]
    label_names: tuple[str, ...]
    modalities: tuple[Modality, ...]

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "label_names", tuple(self.label_names))
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if not self.domains:
            raise DataError("a SourceSet needs at least one domain")
        if not self.label_names or not self.modalities:
            raise DataError("a SourceSet needs labels and modalities")
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate domain ids: {ids}")
        if len({m.kind for m in self.modalities}) != len(self.modalities):
            raise DataError("duplicate modality kinds")
        shapes = {m.kind: m.shape for m in self.modalities}
        k = len(self.label_names)
        for d in self.domains:
            for s in d.samples:
                if not 0 <= s.label < k:
                    raise DataError(f"sample {s.sample_id}: label {s.label} outside [0, {k})")
                if set(s.tensors) != set(shapes):
                    raise DataError(f"sample {s.sample_id}: modalities {sorted(map(str, s.tensors))} "
                                    f"!= declared {sorted(map(str, shapes))}")
                for kind, arr in s.tensors.items():
                    if arr.shape != shapes[kind]:
                        raise DataError(f"sample {s.sample_id}: {kind} shape {arr.shape} != {shapes[kind]}")

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    @property
    def n(self) -> int:
        return sum(len(d) for d in self.domains)

    @property
    def domain_ids(self) -> list[str]:
        return [d.domain_id for d in self.domains]

    @property
    def kinds(self) -> list[ModalityKind]:
        return [m.kind for m in self.modalities]

    def modality(self, kind) -> Modality:
        kind = ModalityKind(kind)
        for m in self.modalities:
            if m.kind is kind:
                return m
        raise ArgumentError(f"modality {kind} not present")

    def domain(self, domain_id: str) -> DomainDataset:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise ArgumentError(f"unknown domain {domain_id!r}")

    def select(self, domain_ids: Iterable[str]) -> "SourceSet":
        return dataclasses.replace(self, domains=tuple(self.domain(i) for i in domain_ids))

    def samples(self) -> list[Sample]:
        return [s for d in self.domains for s in d.samples]


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "leave_one_domain_out"
    target_domains: tuple[str, ...] = ()
    k: int = 5

    def __post_init__(self):
        if self.mode not in ("leave_one_domain_out", "k_fold_in_domain"):
            raise ArgumentError(f"unknown split mode {self.mode!r}")
        object.__setattr__(self, "target_domains", tuple(self.target_domains))
        if self.k < 1:
            raise ArgumentError("k must be positive")

    def check_disjoint(self, source_ids: Iterable[str]) -> None:
        overlap = set(self.target_domains) & set(source_ids)
        if overlap:
            raise ArgumentError(f"target domains also used as sources: {sorted(overlap)}")


@dataclass
class TrainConfig:
    lambda_kl: float = 1e-3
    omega_signal: float = 0.8
    omega_noise: float = 0.2
    theta1: float = 1.0
    theta2: float = 1.0
    alpha: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    virtual_ratio: float = 1.0
    epochs_domain: int = 15
    epochs_main: int = 15
    epochs_vae: int = 150
    batch_size: int = 32
    learning_rate: float = 1e-3
    learning_rate_vae: float = 2e-3
    seed: int = 0
    optimizer: str = "adam"
    latent_dim: int = 32
    feature_dim: int = 128
    preset: str = "small"
    base_modality: str = "amplitude_series"
    generation_latent: str = "mean"
    shuffle_domains: bool = False
    virtual_in_domain_nets: bool = True

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        self.validate()

    def validate(self) -> None:
        reals = [self.lambda_kl, self.omega_signal, self.omega_noise, self.theta1, self.theta2,
                 self.virtual_ratio, self.learning_rate, self.learning_rate_vae, *self.alpha]
        if not all(math.isfinite(float(r)) for r in reals):
            raise ArgumentError("config reals must be finite")
        if len(self.alpha) != 3:
            raise ArgumentError("alpha needs exactly three weights")
        nonneg = {"lambda_kl": self.lambda_kl, "theta1": self.theta1, "theta2": self.theta2,
                  "virtual_ratio": self.virtual_ratio}
        for name, v in nonneg.items():
            if v < 0:
                raise ArgumentError(f"{name} must be nonnegative")
        if any(a < 0 for a in self.alpha):
            raise ArgumentError("alpha weights must be nonnegative")
        if self.omega_signal + self.omega_noise <= 0:
            raise ArgumentError("omega_signal + omega_noise must be positive")
        for name in ("epochs_domain", "epochs_main", "epochs_vae"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"{name} must be nonnegative")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be positive")
        if self.learning_rate <= 0 or self.learning_rate_vae <= 0:
            raise ArgumentError("learning rates must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ArgumentError("seed must fit in an unsigned 64-bit integer")
        if self.optimizer not in ("adam", "sgd"):
            raise ArgumentError(f"unknown optimizer {self.optimizer!r}")
        if self.preset not in ("small", "resnet18"):
            raise ArgumentError(f"unknown preset {self.preset!r}")
        if self.generation_latent not in ("mean", "sample"):
            raise ArgumentError(f"unknown generation_latent {self.generation_latent!r}")
        ModalityKind(self.base_modality)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["alpha"] = list(self.alpha)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base: "TrainConfig | None" = None) -> "TrainConfig":
        """Overlay ``data`` onto ``base`` (defaults when None); unknown keys are rejected."""
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ArgumentError(f"unknown config keys: {sorted(unknown)}")
        merged = (base or cls()).to_dict()
        merged.update(data)
        return cls(**merged)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict(changes, base=self)


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------


def seeded_rng(seed: int, stream_tag: str) -> np.random.Generator:
    """Deterministic PCG64 stream keyed by (seed, tag)."""
    tag_words = np.frombuffer(hashlib.sha256(stream_tag.encode()).digest(), dtype="<u4")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(w) for w in tag_words))
    return np.random.Generator(np.random.PCG64(ss))


def torch_generator(rng: np.random.Generator):
    import torch

    g = torch.Generator()
    g.manual_seed(int(rng.integers(0, 2**63 - 1)))
    return g


class BatchLog:
    """Digests of every sample that entered a training batch, grouped by stage."""

    def __init__(self):
        self.stages: dict[str, set[str]] = {}
        self.batches: dict[str, int] = {}

    def __call__(self, stage: str, digests: Iterable[str]) -> None:
        self.stages.setdefault(stage, set()).update(digests)
        self.batches[stage] = self.batches.get(stage, 0) + 1

    def seen(self) -> set[str]:
        return set().union(*self.stages.values()) if self.stages else set()

    def summary(self) -> dict[str, Any]:
        return {stage: {"batches": self.batches[stage], "unique_samples": len(d)}
                for stage, d in sorted(self.stages.items())}


# --------------------------------------------------------------------------
# dataset I/O
# --------------------------------------------------------------------------


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def save_dataset(dataset: SourceSet, root_path) -> None:
    root = Path(root_path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        manifest = {
            "version": FORMAT_VERSION,
            "labels": list(dataset.label_names),
            "modalities": [m.to_json() for m in dataset.modalities],
            "domains": [
                {
                    "id": d.domain_id,
                    "num_samples": len(d),
                    "samples": [{"id": s.sample_id, "label": s.label} for s in d.samples],
                }
                for d in dataset.domains
            ],
        }
        for d in dataset.domains:
            for s in d.samples:
                folder = root / d.domain_id / dataset.label_names[s.label]
                folder.mkdir(parents=True, exist_ok=True)
                for m in dataset.modalities:
                    (folder / f"{s.sample_id}.{m.kind.value}.f32").write_bytes(
                        s.tensors[m.kind].astype("<f4").tobytes())
        (root / "manifest.json").write_text(_dump_json(manifest), encoding="utf-8")
    except OSError as exc:
        raise DGSenseError(f"cannot write dataset to {root}: {exc}") from exc


def read_f32(path, shape: Sequence[int]) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    expected = int(np.prod(shape))
    if len(raw) % 4 or len(raw) // 4 != expected:
        raise CorruptionError(f"{path}: {len(raw) / 4:g} floats on disk, shape {list(shape)} needs {expected}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: tensor contains NaN or Inf")
    return arr


def _scan_samples(folder: Path, labels: Sequence[str]) -> list[tuple[str, int]]:
    found = []
    for label, name in enumerate(labels):
        ids = sorted({p.name.split(".", 1)[0] for p in (folder / name).glob("*.f32")})
        found.extend((i, label) for i in ids)
    return found


def load_dataset(root_path) -> SourceSet:
    root = Path(root_path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        if manifest.get("version") != FORMAT_VERSION:
            raise FormatError(f"unsupported manifest version {manifest.get('version')!r}")
        labels = list(manifest["labels"])
        modalities = [Modality.from_json(m) for m in manifest["modalities"]]
        domain_entries = manifest["domains"]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DGSenseError):
            raise
        raise FormatError(f"malformed manifest {mpath}: {exc}") from exc

    domains = []
    for entry in domain_entries:
        did = entry["id"]
        if "samples" in entry:
            listing = [(s["id"], int(s["label"])) for s in entry["samples"]]
        else:
            listing = _scan_samples(root / did, labels)
        if len(listing) != entry["num_samples"]:
            raise CorruptionError(f"domain {did}: manifest says {entry['num_samples']} samples, found {len(listing)}")
        samples = []
        for sid, label in listing:
            folder = root / did / labels[label]
            tensors = {}
            for m in modalities:
                fpath = folder / f"{sid}.{m.kind.value}.f32"
                if not fpath.is_file():
                    raise CorruptionError(f"missing sample file {fpath}")
                tensors[m.kind] = read_f32(fpath, m.shape)
            samples.append(Sample(sid, did, label, tensors))
        domains.append(DomainDataset(did, tuple(samples)))
    return SourceSet(tuple(domains), tuple(labels), tuple(modalities))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, module: str, config: Mapping[str, Any], params: Mapping[str, Any],
                    meta: Mapping[str, Any] | None = None) -> None:
    """JSON header line, then little-endian float32 parameter blocks in header order."""
    blocks = []
    entries = []
    for name, value in params.items():
        arr = np.asarray(value.detach().cpu().numpy() if hasattr(value, "detach") else value)
        entries.append({"name": name, "shape": list(arr.shape)})
        blocks.append(arr.astype("<f4").tobytes())
    header = {"version": FORMAT_VERSION, "module": module, "config": dict(config),
              "params": entries, "meta": dict(meta or {})}
    path = Path(path)
    if path.parent:
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for b in blocks:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: no checkpoint header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: bad checkpoint header") from exc
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version")
    offset = nl + 1
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = raw[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise CorruptionError(f"{path}: truncated block {entry['name']}")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
        offset += 4 * count
    if offset != len(raw):
        raise CorruptionError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, params


def worker_threads() -> int:
    value = os.environ.get("DGSENSE_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise ArgumentError(f"DGSENSE_THREADS must be an integer, got {value!r}") from None
    return os.cpu_count() or 1
