import numpy as np
import pytest
import torch

from dgsense.core import DomainDataset, Modality, ModalityKind, Sample, SourceSet, TrainConfig

torch.set_num_threads(1)

AMP = ModalityKind.AMPLITUDE_SERIES
PHASE = ModalityKind.PHASE_MAP
SPEC = ModalityKind.SPECTROGRAM


def toy_set(num_domains=2, per_class=4, num_classes=2, seed=0, modalities=None):
    """Small separable multi-modal set: class k lights up channel k."""
    rng = np.random.default_rng(seed)
    modalities = modalities or (Modality(AMP, (2, 16)), Modality(SPEC, (6, 6)))
    domains = []
    for d in range(num_domains):
        samples = []
        for k in range(num_classes):
            for j in range(per_class):
                tensors = {}
                for m in modalities:
                    x = 0.1 * rng.standard_normal(m.shape)
                    x.reshape(m.shape[0], -1)[k % m.shape[0]] += 1.0 + 0.2 * d
                    tensors[m.kind] = x
                samples.append(Sample(f"c{k}_{j:03d}", f"D{d}", k, tensors))
        domains.append(DomainDataset(f"D{d}", tuple(samples)))
    return SourceSet(tuple(domains), tuple(f"class{k}" for k in range(num_classes)), tuple(modalities))


@pytest.fixture
def tiny_cfg():
    return TrainConfig(epochs_domain=2, epochs_main=2, epochs_vae=2, batch_size=8, latent_dim=4,
                       feature_dim=8)


@pytest.fixture
def toy():
    return toy_set()


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    if module is not None and module.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.LINES):
            terminalreporter.write_line(line)
