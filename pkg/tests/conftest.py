import pytest
import torch

from difflare.diffusion import UNet


@pytest.fixture
def tiny_unet():
    torch.manual_seed(0)
    return UNet(latent_channels=4, widths=(8, 16, 16), vocab_size=4).eval()


def randomize(module, seed=0, scale=0.1):
    """Give every parameter (including zero-initialized ones) random values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
