import numpy as np
import pytest
import torch


class _ReluSigns:
    """Records the sign pattern of every ReLU input during a forward pass."""

    def __init__(self, module):
        self.signs = []
        self.handles = [m.register_forward_hook(self._hook) for m in module.modules() if isinstance(m, torch.nn.ReLU)]

    def _hook(self, mod, inputs, output):
        self.signs.append((inputs[0] > 0).flatten())

    def take(self):
        out = torch.cat(self.signs) if self.signs else torch.zeros(0, dtype=torch.bool)
        self.signs = []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def finite_difference_errors(loss_fn, module, n_params, rng, step=1e-3, floor=1e-6):
    """Relative errors between autograd and central differences for randomly chosen scalar parameters.

    ``module`` must already be float64. Probes whose +step/-step evaluations put
    any ReLU input on different sides of zero straddle a kink, where central
    differences do not estimate the derivative; they are skipped and another
    parameter is drawn. ``floor`` bounds the denominator for near-zero gradients.
    Returns (errors, n_skipped).
    """
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = rng.permutation(sizes.sum())
    probe = _ReluSigns(module)
    errors, skipped = [], 0
    try:
        with torch.no_grad():
            for flat in order:
                if len(errors) >= n_params:
                    break
                t = int(np.searchsorted(offsets, flat, side="right") - 1)
                idx = int(flat - offsets[t])
                view = params[t].view(-1)
                orig = view[idx].item()
                view[idx] = orig + step
                up = loss_fn().item()
                s_up = probe.take()
                view[idx] = orig - step
                down = loss_fn().item()
                s_down = probe.take()
                view[idx] = orig
                if not torch.equal(s_up, s_down):
                    skipped += 1
                    continue
                numeric = (up - down) / (2 * step)
                a = analytic[t].view(-1)[idx].item()
                errors.append(abs(a - numeric) / max(abs(a), abs(numeric), floor))
    finally:
        probe.close()
    return np.array(errors), skipped


@pytest.fixture
def fd_check():
    return finite_difference_errors
