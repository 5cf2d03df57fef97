"""Episodic training: per-domain networks first, then the main network
trained against the frozen domain networks; inference uses the main
network only."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .core import (ArgumentError, InvariantViolation, Modality, Sample, TrainConfig, TrainingError,
                   load_checkpoint, save_checkpoint, torch_generator)
from .nets import Classifier, Extractor, as_batch, cross_entropy, index_batch, init_parameters, predict

BatchLogger = Callable[[str, Sequence[str]], None]


class Network(nn.Module):
    """Feature extractor + classifier; ``domain_id`` is None for the main network."""

    def __init__(self, modalities: Sequence[Modality], num_classes: int, feature_dim: int = 128,
                 preset: str = "small", alpha=None, domain_id: str | None = None):
        super().__init__()
        self.extractor = Extractor(modalities, feature_dim, preset, alpha)
        self.classifier = Classifier(feature_dim, num_classes)
        self.domain_id = domain_id
        self.modalities = tuple(modalities)
        self.num_classes = num_classes

    def forward(self, batch):
        return self.classifier(self.extractor(batch))


def build_network(modalities: Sequence[Modality], num_classes: int, cfg: TrainConfig,
                  rng: np.random.Generator, domain_id: str | None = None) -> Network:
    net = Network(modalities, num_classes, cfg.feature_dim, cfg.preset, cfg.alpha, domain_id)
    init_parameters(net, torch_generator(rng))
    return net


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in sorted name order."""
    h = hashlib.sha256()
    for name, value in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


@dataclass
class DomainBatchSource:
    """Pre-stacked tensors for one domain's training samples."""

    domain_id: str
    tensors: dict
    labels: torch.Tensor
    digests: list[str]

    @classmethod
    def from_samples(cls, domain_id: str, samples: Sequence[Sample], modalities: Sequence[Modality]):
        if not samples:
            raise ArgumentError(f"domain {domain_id} has no training samples")
        wrong = {s.domain_id for s in samples} - {domain_id}
        if wrong:
            raise ArgumentError(f"samples from {sorted(wrong)} passed as domain {domain_id}")
        return cls(domain_id, as_batch(samples, modalities),
                   torch.tensor([s.label for s in samples], dtype=torch.long),
                   [s.digest() for s in samples])

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, rng: np.random.Generator):
        perm = rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = perm[start:start + batch_size]
            yield idx, index_batch(self.tensors, torch.as_tensor(idx)), self.labels[idx]


@dataclass
class EpisodicState:
    main: Network
    domains: list[Network]
    frozen_hashes: dict[str, str] = field(default_factory=dict)
    history: dict = field(default_factory=lambda: {"domain": {}, "main": []})

    def domain_net(self, domain_id: str) -> Network:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise ArgumentError(f"no domain network for {domain_id!r}")

    def verify_frozen(self) -> None:
        for d in self.domains:
            if parameter_digest(d) != self.frozen_hashes.get(d.domain_id):
                raise InvariantViolation(f"parameters of frozen domain network {d.domain_id} changed")


def _optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9)
    return torch.optim.Adam(params, lr=cfg.learning_rate)


@torch.no_grad()
def _accuracy(net: Network, tensors, labels) -> float:
    net.eval()
    preds = predict(net(tensors))
    return float((preds == labels).float().mean())


def train_domain_network(net: Network, data: DomainBatchSource, cfg: TrainConfig, rng: np.random.Generator,
                         log: BatchLogger | None = None) -> tuple[Network, dict]:
    """Minimise the mean cross entropy of one domain network on its own domain."""
    if data.domain_id != net.domain_id:
        raise ArgumentError(f"network for {net.domain_id} given data from {data.domain_id}")
    opt = _optimizer(net.parameters(), cfg)
    losses = []
    for epoch in range(cfg.epochs_domain):
        net.train()
        total = 0.0
        for idx, x, y in data.batches(cfg.batch_size, rng):
            if log is not None:
                log("domain", [data.digests[i] for i in idx])
            loss = cross_entropy(net(x), y).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"domain network {net.domain_id}: loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(data))
    history = {"epoch_loss": losses, "train_accuracy": _accuracy(net, data.tensors, data.labels)}
    return net, history


def episodic_losses(main: Network, domain_net: Network, batch, labels, domain_id: str | None = None):
    """Per-sample (loss1, loss2, loss3).

    loss1: main classifier on main features; loss2: domain classifier on main
    features; loss3: main classifier on domain features. The domain network
    must be frozen, so only main parameters receive gradients.
    """
    if domain_id is not None and domain_id != domain_net.domain_id:
        raise ArgumentError(f"batch from {domain_id} paired with domain network {domain_net.domain_id}")
    if any(p.requires_grad for p in domain_net.parameters()):
        raise ArgumentError("domain network must be frozen before episodic training")
    f_main = main.extractor(batch)
    loss1 = cross_entropy(main.classifier(f_main), labels)
    loss2 = cross_entropy(domain_net.classifier(f_main), labels)
    with torch.no_grad():
        f_dom = domain_net.extractor(batch)
    loss3 = cross_entropy(main.classifier(f_dom), labels)
    return loss1, loss2, loss3


def main_loss(losses: Sequence[tuple], theta1: float, theta2: float):
    """Mean over domains of the per-domain mean of loss1 + theta1*loss2 + theta2*loss3.

    ``losses`` holds one (loss1, loss2, loss3) triple of per-sample arrays or
    tensors per domain.
    """
    if not losses:
        raise ArgumentError("need at least one domain")
    per_domain = []
    for l1, l2, l3 in losses:
        per_domain.append((l1 + theta1 * l2 + theta2 * l3).mean())
    total = per_domain[0]
    for p in per_domain[1:]:
        total = total + p
    return total / len(per_domain)


def _round_robin(sources: Sequence[DomainBatchSource], batch_size: int, rng: np.random.Generator,
                 shuffle_domains: bool):
    per_domain = [list(s.batches(batch_size, rng)) for s in sources]
    rounds = max(len(b) for b in per_domain)
    for r in range(rounds):
        order = rng.permutation(len(sources)) if shuffle_domains else range(len(sources))
        for i in order:
            if r < len(per_domain[i]):
                yield sources[i], per_domain[i][r]


def train_domains(state: EpisodicState, sources: Sequence[DomainBatchSource], cfg: TrainConfig,
                  rng: np.random.Generator, log: BatchLogger | None = None) -> EpisodicState:
    """Train and freeze every domain network, recording its parameter digest."""
    for src in sources:
        net = state.domain_net(src.domain_id)
        sub = np.random.Generator(np.random.PCG64(rng.integers(0, 2**63 - 1)))
        _, hist = train_domain_network(net, src, cfg, sub, log)
        freeze(net)
        state.frozen_hashes[net.domain_id] = parameter_digest(net)
        state.history["domain"][net.domain_id] = hist
    return state


def train_main(state: EpisodicState, sources: Sequence[DomainBatchSource], cfg: TrainConfig,
               rng: np.random.Generator, log: BatchLogger | None = None) -> EpisodicState:
    """Episodic optimisation of the main network against the frozen domain networks.

    Domains take turns batch by batch; each step minimises the current
    domain's mean of loss1 + theta1*loss2 + theta2*loss3 and updates only the
    main network. Domain digests are checked after every epoch.
    """
    missing = [s.domain_id for s in sources if s.domain_id not in state.frozen_hashes]
    if missing:
        raise ArgumentError(f"domain networks not trained/frozen: {missing}")
    state.verify_frozen()
    main = state.main
    opt = _optimizer(main.parameters(), cfg)
    for epoch in range(cfg.epochs_main):
        main.train()
        for src, (idx, x, y) in _round_robin(sources, cfg.batch_size, rng, cfg.shuffle_domains):
            if log is not None:
                log("main", [src.digests[i] for i in idx])
            dnet = state.domain_net(src.domain_id)
            l1, l2, l3 = episodic_losses(main, dnet, x, y, src.domain_id)
            loss = main_loss([(l1, l2, l3)], cfg.theta1, cfg.theta2)
            if not torch.isfinite(loss):
                raise TrainingError(f"main network loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.history["main"].append({"epoch": epoch, "domain": src.domain_id, "loss": loss.item(),
                                          "loss1": l1.mean().item(), "loss2": l2.mean().item(),
                                          "loss3": l3.mean().item()})
        state.verify_frozen()
    return state


def train_pooled(main: Network, sources: Sequence[DomainBatchSource], cfg: TrainConfig,
                 rng: np.random.Generator, log: BatchLogger | None = None) -> tuple[Network, list]:
    """Plain cross-entropy on shuffled batches pooled over all source domains."""
    pooled = DomainBatchSource(
        "pooled",
        {k: torch.cat([s.tensors[k] for s in sources]) for k in sources[0].tensors},
        torch.cat([s.labels for s in sources]),
        [d for s in sources for d in s.digests],
    )
    opt = _optimizer(main.parameters(), cfg)
    history = []
    for epoch in range(cfg.epochs_main):
        main.train()
        for idx, x, y in pooled.batches(cfg.batch_size, rng):
            if log is not None:
                log("main", [pooled.digests[i] for i in idx])
            loss = cross_entropy(main(x), y).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"pooled network loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append({"epoch": epoch, "loss": loss.item()})
    return main, history


@torch.no_grad()
def infer(main: Network, batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Predicted class indices and logits from the main network alone."""
    main.eval()
    logits = main(batch)
    return predict(logits), logits


def new_state(modalities: Sequence[Modality], num_classes: int, domain_ids: Sequence[str], cfg: TrainConfig,
              rng: np.random.Generator) -> EpisodicState:
    main = build_network(modalities, num_classes, cfg, rng)
    domains = [build_network(modalities, num_classes, cfg, rng, domain_id=d) for d in domain_ids]
    return EpisodicState(main, domains)


def save_network(path, net: Network, cfg: TrainConfig, label_names: Sequence[str], extra: dict | None = None):
    meta = {"modalities": [m.to_json() for m in net.modalities], "num_classes": net.num_classes,
            "labels": list(label_names), "domain_id": net.domain_id, **(extra or {})}
    save_checkpoint(path, "episodic", cfg.to_dict(), net.state_dict(), meta)


def load_network(path) -> tuple[Network, dict]:
    header, params = load_checkpoint(path)
    if header["module"] != "episodic":
        raise ArgumentError(f"{path} holds a {header['module']} checkpoint, not a network")
    cfg = TrainConfig.from_dict(header["config"])
    meta = header["meta"]
    net = Network([Modality.from_json(m) for m in meta["modalities"]], meta["num_classes"], cfg.feature_dim,
                  cfg.preset, cfg.alpha, meta.get("domain_id"))
    state = net.state_dict()
    net.load_state_dict({k: torch.tensor(v).to(state[k].dtype) for k, v in params.items()})
    return net, header
