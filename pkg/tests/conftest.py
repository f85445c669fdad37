import numpy as np
import pytest

from driftbench.core import ImageTensor
from driftbench.synthetic import make_synthetic_images


def random_image(rng, side=32, sid="img"):
    return ImageTensor(rng.random((3, side, side)), sid)


def constant_image(value, side=32, sid="img"):
    return ImageTensor(np.full((3, side, side), float(value)), sid)


def step_image(side=64, sid="step"):
    data = np.zeros((3, side, side))
    data[:, :, side // 2:] = 1.0
    return ImageTensor(data, sid)


def fd_gradient_check(loss_fn, activation, target, rel=1e-3):
    """Compare autograd parameter gradients of a small float64 decoder with
    central differences; returns the number of coordinates checked."""
    import torch

    from driftbench.probe import ProbeDecoder

    torch.manual_seed(0)
    dec = ProbeDecoder(2, activation, widths=(4, 4, 4, 4)).double()
    z = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    loss = loss_fn(dec(z), target)
    params = list(dec.parameters())
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(0)
    h = 1e-6
    checked = 0
    for p, g in zip(params, grads):
        flat, gflat = p.data.view(-1), g.view(-1)
        for k in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            old = float(flat[k])
            with torch.no_grad():
                flat[k] = old + h
                up = float(loss_fn(dec(z), target))
                flat[k] = old - h
                down = float(loss_fn(dec(z), target))
                flat[k] = old
            fd = (up - down) / (2 * h)
            an = float(gflat[k])
            assert abs(fd - an) <= rel * max(abs(an), abs(fd)) + 1e-8, (k, fd, an)
            checked += 1
    return checked


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion and fail on FAIL."""

    def record(name, ok, elapsed, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}  ({elapsed:.2f}s) {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic16():
    return make_synthetic_images(16, side=64, seed=0)
