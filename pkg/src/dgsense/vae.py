"""Variational virtual-data generators (single-, cross- and multi-modal)."""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (ArgumentError, Modality, ModalityKind, Sample, StateError, TrainConfig, TrainingError,
                   load_checkpoint, save_checkpoint, torch_generator)
from .nets import as_batch, init_parameters

BatchLogger = Callable[[str, Sequence[str]], None]


# --------------------------------------------------------------------------
# latent algebra and losses
# --------------------------------------------------------------------------


def _check_sigma(sigma: torch.Tensor) -> None:
    if not torch.all(sigma > 0):
        raise ArgumentError("sigma must be strictly positive")


def reparameterize(mu, sigma, rng: torch.Generator | None = None, eps=None) -> torch.Tensor:
    """z = mu + sigma * eps with eps ~ N(0, I) unless ``eps`` is given."""
    mu = torch.as_tensor(mu)
    sigma = torch.as_tensor(sigma, dtype=mu.dtype)
    if mu.shape != sigma.shape:
        raise ArgumentError(f"mu {tuple(mu.shape)} and sigma {tuple(sigma.shape)} differ")
    _check_sigma(sigma)
    if eps is None:
        eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype)
    return mu + sigma * torch.as_tensor(eps, dtype=mu.dtype)


def kl_normal(mu, sigma) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)) summed over the last axis."""
    mu = torch.as_tensor(mu)
    sigma = torch.as_tensor(sigma, dtype=mu.dtype)
    _check_sigma(sigma)
    return 0.5 * (mu ** 2 + sigma ** 2 - 1.0 - 2.0 * torch.log(sigma)).sum(dim=-1)


def _per_sample_mse(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    if x.shape != x_rec.shape:
        raise ArgumentError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    diff = (x - x_rec) ** 2
    if diff.dim() <= 1:
        return diff.mean()
    return diff.flatten(1).mean(dim=1)


def vae_loss(x, x_rec, mu, sigma, lambda_kl: float) -> torch.Tensor:
    """Mean over the batch of MSE(x, x_rec) + lambda * KL.

    A rank-1 ``mu`` marks a single unbatched sample.
    """
    x, x_rec = torch.as_tensor(x), torch.as_tensor(x_rec)
    mu = torch.as_tensor(mu)
    if mu.dim() == 1:
        return _per_sample_mse(x.reshape(1, -1), x_rec.reshape(1, -1))[0] + lambda_kl * kl_normal(mu, sigma)
    return (_per_sample_mse(x, x_rec) + lambda_kl * kl_normal(mu, sigma)).mean()


def crossmodal_loss(x: Mapping, reconstructions: Mapping, mu, sigma, lambda_kl: float) -> torch.Tensor:
    """Sum over modalities of the per-modality generator loss."""
    missing = set(x) ^ set(reconstructions)
    if missing:
        raise ArgumentError(f"modalities missing on one side: {sorted(map(str, missing))}")
    total = None
    for kind in x:
        term = vae_loss(x[kind], reconstructions[kind], mu, sigma, lambda_kl)
        total = term if total is None else total + term
    return total


# --------------------------------------------------------------------------
# architecture
# --------------------------------------------------------------------------


def _conv(rank: int):
    return nn.Conv1d if rank == 1 else nn.Conv2d


def _deconv(rank: int):
    return nn.ConvTranspose1d if rank == 1 else nn.ConvTranspose2d


class Encoder(nn.Module):
    """Strided conv stack, then linear heads for mu and log-sigma."""

    def __init__(self, modality: Modality, latent_dim: int, widths: Sequence[int] = (16, 32, 32)):
        super().__init__()
        self.modality = modality
        rank = len(modality.spatial)
        layers = []
        prev = modality.channels
        for w in widths:
            layers += [_conv(rank)(prev, w, 3, 2, 1), nn.LeakyReLU(0.1)]
            prev = w
        self.body = nn.Sequential(*layers)
        with torch.no_grad():
            flat = self.body(torch.zeros(1, modality.channels, *modality.spatial)).numel()
        self.mu = nn.Linear(flat, latent_dim)
        self.log_sigma = nn.Linear(flat, latent_dim)

    def forward(self, x):
        h = self.body(x).flatten(1)
        return self.mu(h), self.log_sigma(h)


class Decoder(nn.Module):
    """Linear seed map, transposed convs doubling each axis, crop to the modality shape."""

    def __init__(self, modality: Modality, latent_dim: int, widths: Sequence[int] = (32, 32, 16)):
        super().__init__()
        self.modality = modality
        rank = len(modality.spatial)
        factor = 2 ** len(widths)
        self.seed_shape = (widths[0], *[max(1, math.ceil(s / factor)) for s in modality.spatial])
        self.seed = nn.Linear(latent_dim, int(np.prod(self.seed_shape)))
        layers = []
        outs = list(widths[1:]) + [modality.channels]
        prev = widths[0]
        for i, w in enumerate(outs):
            layers.append(_deconv(rank)(prev, w, 4, 2, 1))
            if i < len(outs) - 1:
                layers.append(nn.LeakyReLU(0.1))
            prev = w
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        h = F.leaky_relu(self.seed(z), 0.1).reshape(z.shape[0], *self.seed_shape)
        out = self.body(h)
        crop = tuple(slice(0, s) for s in self.modality.spatial)
        return out[(slice(None), slice(None), *crop)]


class GeneratorModel(nn.Module):
    def __init__(self, modality: Modality, latent_dim: int = 32, enc_widths=(16, 32, 32),
                 dec_widths=(32, 32, 16)):
        super().__init__()
        self.modality = modality
        self.latent_dim = latent_dim
        self.encoder = Encoder(modality, latent_dim, enc_widths)
        self.decoder = Decoder(modality, latent_dim, dec_widths)
        self.arch = {"enc_widths": list(enc_widths), "dec_widths": list(dec_widths)}
        self.trained = False

    def encode(self, x):
        mu, log_sigma = self.encoder(x)
        return mu, torch.exp(log_sigma)

    def forward(self, x, eps=None, gen: torch.Generator | None = None):
        mu, sigma = self.encode(x)
        z = reparameterize(mu, sigma, gen, eps)
        return self.decoder(z), mu, sigma


class CrossModalGenerator(nn.Module):
    """One encoder over the base modality, one decoder per modality."""

    def __init__(self, modalities: Sequence[Modality], base, latent_dim: int = 32,
                 enc_widths=(16, 32, 32), dec_widths=(32, 32, 16)):
        super().__init__()
        base = ModalityKind(base)
        if len(modalities) < 2:
            raise ArgumentError("a cross-modal generator needs at least two modalities")
        by_kind = {m.kind: m for m in modalities}
        if base not in by_kind:
            raise ArgumentError(f"base modality {base} not among {sorted(map(str, by_kind))}")
        self.modalities = tuple(modalities)
        self.base = base
        self.latent_dim = latent_dim
        self.encoder = Encoder(by_kind[base], latent_dim, enc_widths)
        self.decoders = nn.ModuleDict({m.kind.value: Decoder(m, latent_dim, dec_widths) for m in modalities})
        self.arch = {"enc_widths": list(enc_widths), "dec_widths": list(dec_widths)}
        self.trained = False

    def encode(self, x_base):
        mu, log_sigma = self.encoder(x_base)
        return mu, torch.exp(log_sigma)

    def decode(self, z) -> dict[ModalityKind, torch.Tensor]:
        return {m.kind: self.decoders[m.kind.value](z) for m in self.modalities}

    def forward(self, x_base, eps=None, gen: torch.Generator | None = None):
        mu, sigma = self.encode(x_base)
        z = reparameterize(mu, sigma, gen, eps)
        return self.decode(z), mu, sigma


class MultiModalGenerator(nn.Module):
    """Independent single-modal generators, one per modality."""

    def __init__(self, modalities: Sequence[Modality], latent_dim: int = 32, **arch):
        super().__init__()
        self.modalities = tuple(modalities)
        self.latent_dim = latent_dim
        self.models = nn.ModuleDict({m.kind.value: GeneratorModel(m, latent_dim, **arch) for m in modalities})
        self.arch = next(iter(self.models.values())).arch

    @property
    def trained(self) -> bool:
        return all(m.trained for m in self.models.values())


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _optimizer(params, cfg: TrainConfig, lr: float):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=0.9)
    return torch.optim.Adam(params, lr=lr)


def _fit(model: nn.Module, inputs: torch.Tensor, loss_fn, cfg: TrainConfig, rng: np.random.Generator,
         digests: Sequence[str] | None = None, log: BatchLogger | None = None, stage: str = "generator"):
    """Shared mini-batch loop; ``loss_fn(model, idx, eps)`` returns the batch loss."""
    n = inputs.shape[0]
    if n == 0:
        raise ArgumentError("no training data")
    gen = torch_generator(rng)
    eval_eps = torch.randn(n, model.latent_dim, generator=gen, dtype=inputs.dtype)

    def checked(idx, eps, epoch):
        try:
            loss = loss_fn(model, idx, eps)
        except ArgumentError as exc:  # sigma collapsed to 0 or NaN
            raise TrainingError(f"generator diverged at epoch {epoch}: {exc}") from exc
        if not torch.isfinite(loss):
            raise TrainingError(f"generator loss diverged at epoch {epoch}")
        return loss

    def evaluate(epoch=0):
        with torch.no_grad():
            return checked(torch.arange(n), eval_eps, epoch).item()

    history = {"initial_loss": evaluate(), "epoch_loss": [], "eval_loss": []}
    opt = _optimizer(model.parameters(), cfg, cfg.learning_rate_vae)
    for epoch in range(cfg.epochs_vae):
        perm = torch.as_tensor(rng.permutation(n))
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if log is not None and digests is not None:
                log(stage, [digests[i] for i in idx.tolist()])
            eps = torch.randn(len(idx), model.latent_dim, generator=gen, dtype=inputs.dtype)
            loss = checked(idx, eps, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history["epoch_loss"].append(total / n)
        history["eval_loss"].append(evaluate(epoch))
    history["final_loss"] = evaluate(cfg.epochs_vae)
    return history


def _stack(data, modality: Modality) -> torch.Tensor:
    if isinstance(data, torch.Tensor):
        x = data
    else:
        arrays = [np.asarray(d, dtype=np.float32) for d in data]
        if not arrays:
            raise ArgumentError("no training data")
        if len({a.shape for a in arrays}) != 1:
            raise ArgumentError("training tensors must share one shape")
        x = torch.tensor(np.stack(arrays))
    return x.reshape(x.shape[0], modality.channels, *modality.spatial)


def train_single_modal(model: GeneratorModel, data, cfg: TrainConfig, rng: np.random.Generator,
                       digests=None, log: BatchLogger | None = None):
    """Fit ``model`` on a list (or stacked tensor) of modality tensors.

    Returns ``(model, history)``; the model is updated in place.
    """
    x = _stack(data, model.modality).to(next(model.parameters()).dtype)

    def loss_fn(m, idx, eps):
        rec, mu, sigma = m(x[idx], eps=eps)
        return vae_loss(x[idx], rec, mu, sigma, cfg.lambda_kl)

    model.train()
    history = _fit(model, x, loss_fn, cfg, rng, digests, log)
    model.trained = True
    return model, history


def train_cross_modal(gen_model: CrossModalGenerator, data: Mapping[ModalityKind, torch.Tensor] | Sequence[Sample],
                      cfg: TrainConfig, rng: np.random.Generator, base=None,
                      digests=None, log: BatchLogger | None = None):
    """Encoder sees only the base modality; each decoder rebuilds its own modality."""
    if base is not None and ModalityKind(base) is not gen_model.base:
        raise ArgumentError(f"generator was built for base {gen_model.base}, not {base}")
    if not isinstance(data, Mapping):
        data = as_batch(data, gen_model.modalities)
    x = {}
    for m in gen_model.modalities:
        if m.kind not in data:
            raise ArgumentError(f"training data lacks modality {m.kind}")
        x[m.kind] = data[m.kind].reshape(data[m.kind].shape[0], m.channels, *m.spatial)

    def loss_fn(g, idx, eps):
        batch = {k: v[idx] for k, v in x.items()}
        recs, mu, sigma = g(batch[g.base], eps=eps)
        return crossmodal_loss(batch, recs, mu, sigma, cfg.lambda_kl)

    gen_model.train()
    history = _fit(gen_model, x[gen_model.base], loss_fn, cfg, rng, digests, log)
    gen_model.trained = True
    return gen_model, history


def train_multi_modal(gen_model: MultiModalGenerator, data: Mapping[ModalityKind, torch.Tensor] | Sequence[Sample],
                      cfg: TrainConfig, rng: np.random.Generator, digests=None, log: BatchLogger | None = None):
    if not isinstance(data, Mapping):
        data = as_batch(data, gen_model.modalities)
    histories = {}
    for m in gen_model.modalities:
        sub = np.random.Generator(np.random.PCG64(rng.integers(0, 2**63 - 1)))
        _, histories[m.kind.value] = train_single_modal(gen_model.models[m.kind.value], data[m.kind], cfg, sub,
                                                        digests, log)
    return gen_model, histories


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def _ensure_ready(model: nn.Module) -> None:
    if not getattr(model, "trained", False):
        raise StateError("generator has not been trained")
    for p in model.parameters():
        if not torch.all(torch.isfinite(p)):
            raise StateError("generator parameters are not finite")


def _noisy_latent(mu, sigma, omega1, omega2, gen, latent: str):
    z = mu if latent == "mean" else reparameterize(mu, sigma, gen)
    if omega2 == 0:
        return omega1 * z
    noise = torch.randn(mu.shape, generator=gen, dtype=mu.dtype)
    return omega1 * z + omega2 * noise


@torch.no_grad()
def reconstruct(model: GeneratorModel, x_real) -> torch.Tensor:
    """Deterministic decode of the encoder mean."""
    x = torch.as_tensor(x_real)
    single = x.dim() == len(model.modality.shape)
    x = x.reshape(-1, model.modality.channels, *model.modality.spatial)
    out = model.decoder(model.encode(x)[0])
    return out.reshape(model.modality.shape) if single else out


@torch.no_grad()
def generate_single(model: GeneratorModel, x_real, omega1: float, omega2: float,
                    rng: torch.Generator | None = None, latent: str = "mean") -> torch.Tensor:
    """Decode omega1 * mu(x) + omega2 * eta, eta standard normal."""
    _ensure_ready(model)
    x = torch.as_tensor(x_real)
    single = x.dim() == len(model.modality.shape)
    x = x.reshape(-1, model.modality.channels, *model.modality.spatial)
    mu, sigma = model.encode(x)
    out = model.decoder(_noisy_latent(mu, sigma, omega1, omega2, rng, latent))
    return out.reshape(model.modality.shape) if single else out


@torch.no_grad()
def generate_cross(gen_model: CrossModalGenerator, x_base, omega1: float, omega2: float,
                   rng: torch.Generator | None = None, latent: str = "mean") -> dict[ModalityKind, torch.Tensor]:
    """All modalities decoded from one shared noisy latent."""
    _ensure_ready(gen_model)
    base = next(m for m in gen_model.modalities if m.kind is gen_model.base)
    x = torch.as_tensor(x_base)
    single = x.dim() == len(base.shape)
    x = x.reshape(-1, base.channels, *base.spatial)
    mu, sigma = gen_model.encode(x)
    outs = gen_model.decode(_noisy_latent(mu, sigma, omega1, omega2, rng, latent))
    if single:
        return {m.kind: outs[m.kind].reshape(m.shape) for m in gen_model.modalities}
    return outs


@torch.no_grad()
def generate_multi(gen_model: MultiModalGenerator, x: Mapping[ModalityKind, torch.Tensor], omega1: float,
                   omega2: float, rng: torch.Generator | None = None,
                   latent: str = "mean") -> dict[ModalityKind, torch.Tensor]:
    """Each modality encoded and perturbed with its own noise draw."""
    return {m.kind: generate_single(gen_model.models[m.kind.value], x[m.kind], omega1, omega2, rng, latent)
            for m in gen_model.modalities}


# --------------------------------------------------------------------------
# pipeline helpers
# --------------------------------------------------------------------------


def build_generator(variant: str, modalities: Sequence[Modality], cfg: TrainConfig,
                    rng: np.random.Generator) -> nn.Module:
    """``variant`` is 'cross' or 'multi'; a single modality always gets a plain generator."""
    if len(modalities) == 1:
        model = GeneratorModel(modalities[0], cfg.latent_dim)
    elif variant == "cross":
        model = CrossModalGenerator(modalities, cfg.base_modality, cfg.latent_dim)
    elif variant == "multi":
        model = MultiModalGenerator(modalities, cfg.latent_dim)
    else:
        raise ArgumentError(f"unknown generator variant {variant!r}")
    init_parameters(model, torch_generator(rng))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, Encoder):
                m.log_sigma.weight.mul_(0.1)
    return model


def fit_generator(model: nn.Module, samples: Sequence[Sample], cfg: TrainConfig, rng: np.random.Generator,
                  log: BatchLogger | None = None):
    digests = [s.digest() for s in samples] if log is not None else None
    if isinstance(model, GeneratorModel):
        data = [s.tensors[model.modality.kind] for s in samples]
        return train_single_modal(model, data, cfg, rng, digests, log)
    if isinstance(model, CrossModalGenerator):
        return train_cross_modal(model, samples, cfg, rng, digests=digests, log=log)
    return train_multi_modal(model, samples, cfg, rng, digests, log)


def _pick_sources(samples: Sequence[Sample], ratio: float, rng: np.random.Generator) -> list[int]:
    """Indices of real samples to perturb: round(ratio * count) per (domain, label) group."""
    groups: dict[tuple[str, int], list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault((s.domain_id, s.label), []).append(i)
    chosen = []
    for key in sorted(groups):
        members = groups[key]
        want = int(round(ratio * len(members)))
        order = []
        while len(order) < want:
            order.extend(members[j] for j in rng.permutation(len(members)))
        chosen.extend(sorted(order[:want]))
    return chosen


@torch.no_grad()
def generate_virtual(model: nn.Module, samples: Sequence[Sample], cfg: TrainConfig, rng: np.random.Generator,
                     ratio: float | None = None, batch_size: int = 256) -> list[Sample]:
    """Virtual samples with labels and domains copied from their real sources."""
    ratio = cfg.virtual_ratio if ratio is None else ratio
    if ratio <= 0 or not samples:
        return []
    _ensure_ready(model)
    chosen = _pick_sources(samples, ratio, rng)
    gen = torch_generator(rng)
    modalities = model.modalities if hasattr(model, "modalities") else (model.modality,)
    out = []
    for start in range(0, len(chosen), batch_size):
        idx = chosen[start:start + batch_size]
        batch = as_batch([samples[i] for i in idx], modalities)
        w1, w2, lat = cfg.omega_signal, cfg.omega_noise, cfg.generation_latent
        if isinstance(model, GeneratorModel):
            gen_out = {model.modality.kind: generate_single(model, batch[model.modality.kind], w1, w2, gen, lat)}
        elif isinstance(model, CrossModalGenerator):
            gen_out = generate_cross(model, batch[model.base], w1, w2, gen, lat)
        else:
            gen_out = generate_multi(model, batch, w1, w2, gen, lat)
        for row, i in enumerate(idx):
            src = samples[i]
            tensors = {m.kind: gen_out[m.kind][row].reshape(m.shape).numpy() for m in modalities}
            out.append(Sample(f"v{start + row:05d}_{src.sample_id}", src.domain_id, src.label, tensors))
    return out


def save_generator(path, model: nn.Module, cfg: TrainConfig) -> None:
    modalities = model.modalities if hasattr(model, "modalities") else (model.modality,)
    kind = {GeneratorModel: "single", CrossModalGenerator: "cross", MultiModalGenerator: "multi"}[type(model)]
    meta = {"variant": kind, "modalities": [m.to_json() for m in modalities], "latent_dim": model.latent_dim,
            "base": getattr(model, "base", modalities[0].kind).value, "arch": model.arch}
    save_checkpoint(path, "vae", cfg.to_dict(), model.state_dict(), meta)


def load_generator(path) -> tuple[nn.Module, dict]:
    header, params = load_checkpoint(path)
    if header["module"] != "vae":
        raise ArgumentError(f"{path} holds a {header['module']} checkpoint, not a generator")
    meta = header["meta"]
    modalities = [Modality.from_json(m) for m in meta["modalities"]]
    arch = {k: tuple(v) for k, v in meta["arch"].items()}
    if meta["variant"] == "single":
        model = GeneratorModel(modalities[0], meta["latent_dim"], **arch)
    elif meta["variant"] == "cross":
        model = CrossModalGenerator(modalities, meta["base"], meta["latent_dim"], **arch)
    else:
        model = MultiModalGenerator(modalities, meta["latent_dim"], **arch)
    model.load_state_dict({k: torch.tensor(v) for k, v in params.items()})
    if isinstance(model, MultiModalGenerator):
        for m in model.models.values():
            m.trained = True
    else:
        model.trained = True
    return model, header
