"""Central finite differences for a handful of sampled scalar parameters."""
import torch


def fd_check(fn, tensors, n_samples=20, h=1e-6, seed=0):
    """Compare autograd against central differences on sampled entries.

    ``fn`` returns a scalar; ``tensors`` are leaf tensors with requires_grad.
    Returns the worst relative error.
    """
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    sizes = torch.tensor([t.numel() for t in tensors], dtype=torch.float64)
    worst = 0.0
    for _ in range(n_samples):
        ti = int(torch.multinomial(sizes, 1, generator=gen))
        t = tensors[ti]
        k = int(torch.randint(t.numel(), (1,), generator=gen))
        flat = t.data.view(-1)
        orig = flat[k].item()
        with torch.no_grad():
            flat[k] = orig + h
            up = fn().item()
            flat[k] = orig - h
            down = fn().item()
            flat[k] = orig
        numeric = (up - down) / (2 * h)
        g = grads[ti]
        analytic = 0.0 if g is None else g.reshape(-1)[k].item()
        err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, err)
    return worst
