import numpy as np
import pytest
import torch

from ecgrobust.classifiers import MLP

torch.set_num_threads(1)


def linear_model(W, b=None):
    """MLP with no hidden layer: logits = x @ W + b, float64."""
    W = torch.as_tensor(W, dtype=torch.float64)
    d, k = W.shape
    m = MLP((d, k), relu_after=0).double()
    with torch.no_grad():
        m.net[0].weight.copy_(W.T)
        m.net[0].bias.copy_(torch.zeros(k) if b is None else torch.as_tensor(b, dtype=torch.float64))
    return m.eval()


def random_mlp(rng, n_layers=3, d_in=8, width=16, n_classes=4, leaky=None):
    widths = [d_in] + [int(rng.integers(2, width + 1)) for _ in range(n_layers - 1)] + [n_classes]
    torch.manual_seed(int(rng.integers(0, 2**31)))
    return MLP(tuple(widths), relu_after=n_layers - 1, leaky_slope=leaky).double().eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
