"""Finite-difference gradient checker shared by the unit and acceptance tests."""

import numpy as np
import torch


def fd_relative_error(fn, tensors, eps, coords=24, seed=0):
    """Largest relative error between autograd and central differences.

    ``fn`` maps the list ``tensors`` to a tensor; it is reduced against a
    fixed random projection so every output element matters. Up to
    ``coords`` coordinates per tensor are probed.
    """
    gen = torch.Generator().manual_seed(seed)
    tensors = [t.detach().clone().requires_grad_(True) for t in tensors]
    out = fn(tensors)
    proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    (out * proj).sum().backward()
    worst = 0.0
    rng = np.random.default_rng(seed)
    for t in tensors:
        flat = t.detach().view(-1)
        picks = rng.choice(flat.numel(), size=min(coords, flat.numel()), replace=False)
        analytic = t.grad.view(-1)[picks].double().numpy()
        numeric = np.empty(len(picks))
        for n, i in enumerate(picks):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                plus = float((fn(tensors) * proj).sum())
                flat[i] = orig - eps
                minus = float((fn(tensors) * proj).sum())
                flat[i] = orig
            numeric[n] = (plus - minus) / (2 * eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


def module_fd_error(module, inputs, dtype, eps, seed=0, wrap=None):
    """Check gradients w.r.t. the inputs and every parameter of ``module``."""
    module = module.to(dtype)
    params = [p for p in module.parameters()]
    inputs = [x.to(dtype) for x in inputs]
    originals = [p.detach().clone() for p in params]

    def fn(ts):
        xs, ps = ts[:len(inputs)], ts[len(inputs):]
        # route parameters through functional_call so autograd sees the probed copies
        named = {n: v for (n, _), v in zip(module.named_parameters(), ps)}
        out = torch.func.functional_call(module, named, tuple(xs))
        return wrap(out) if wrap else out

    return fd_relative_error(fn, inputs + originals, eps, seed=seed)
