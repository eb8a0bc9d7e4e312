"""Shared test utilities: central finite differences and tiny fixtures."""
import numpy as np
import torch


def fd_relative_errors(loss_fn, params, eps=1e-6, per_tensor=6, seed=0):
    """Compare autograd with central differences on sampled entries.

    Returns {name: relative error} where the error is
    ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12) over the
    sampled entries of each tensor.
    """
    rng = np.random.default_rng(seed)
    names = [n for n, _ in params]
    tensors = [p for _, p in params]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = {}
    with torch.no_grad():
        for name, p, g in zip(names, tensors, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            analytic, numeric = [], []
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * eps))
                analytic.append(g.view(-1)[i].item())
            a, n = np.array(analytic), np.array(numeric)
            scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
            out[name] = float(np.linalg.norm(a - n) / scale)
    return out
