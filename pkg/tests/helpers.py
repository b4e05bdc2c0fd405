"""Central finite-difference oracles shared by the gradient tests."""

import torch
from torch.func import functional_call

FD_STEP = 1e-3
FD_RTOL = 1e-4


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def fd_directional(f, x: torch.Tensor, u: torch.Tensor, h: float = FD_STEP) -> float:
    with torch.no_grad():
        return (float(f(x + h * u)) - float(f(x - h * u))) / (2 * h)


def autograd_directional(f, x: torch.Tensor, u: torch.Tensor) -> float:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return float((g * u).sum())


def check_directional(f, x, u, h=FD_STEP):
    """(relative error, fd value, autograd value) of the derivative of scalar ``f`` at ``x`` along ``u``."""
    fd = fd_directional(f, x, u, h)
    an = autograd_directional(f, x, u)
    return rel_err(fd, an), fd, an


def param_directional(module, f, direction: dict, h=FD_STEP):
    """Same check with respect to a module's parameters; ``f(module_output_fn)`` gives a scalar."""
    params = {k: v.detach() for k, v in module.named_parameters()}
    buffers = dict(module.named_buffers())

    def at(shift):
        state = {k: params[k] + shift * direction.get(k, 0.0) for k in params}
        return float(f(lambda *a, **kw: functional_call(module, {**state, **buffers}, a, kw)))

    with torch.no_grad():
        fd = (at(h) - at(-h)) / (2 * h)
    live = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    out = f(lambda *a, **kw: functional_call(module, {**live, **buffers}, a, kw))
    grads = torch.autograd.grad(out, list(live.values()), allow_unused=True)
    an = sum(float((g * direction[k]).sum()) for k, g in zip(live, grads) if g is not None and k in direction)
    return rel_err(fd, an), fd, an


def unit(t: torch.Tensor) -> torch.Tensor:
    return t / t.norm()
