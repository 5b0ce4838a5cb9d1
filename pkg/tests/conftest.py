import numpy as np
import pytest

from chunkmix import autodiff as ad
from chunkmix.autodiff import Tensor
from chunkmix.models import ChunkedFeature


class IdentityNets:
    """Encoder = flatten, decoder = reshape; n*d equals the pixel count."""

    def __init__(self, n=4, image_shape=(3, 16, 16)):
        self.image_shape = image_shape
        size = int(np.prod(image_shape))
        assert size % n == 0
        self.n, self.d = n, size // n

    def encode(self, x, mode="infer", update_stats=True):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return ChunkedFeature(x.reshape(x.shape[0], -1), self.n, self.d)

    def decode(self, f, mode="infer", update_stats=True):
        v = f.values if isinstance(f, ChunkedFeature) else f
        return v.reshape((v.shape[0],) + self.image_shape)

    def classify(self, x1, x2, x3, mode="infer", update_stats=True):
        return Tensor(np.full((x1.shape[0], self.n), 0.5))


class ChunkZeroDecoder(IdentityNets):
    """Decoder that only looks at chunk 0."""

    def __init__(self, n=4, d=8):
        self.n, self.d = n, d
        self.image_shape = (3, 16, 16)
        self.proj = np.random.default_rng(0).normal(size=(d, 768))

    def encode(self, x, mode="infer", update_stats=True):
        x = x if isinstance(x, Tensor) else Tensor(x)
        flat = x.data.reshape(x.shape[0], -1)
        feats = flat @ np.random.default_rng(1).normal(size=(768, self.n * self.d))
        return ChunkedFeature(Tensor(feats), self.n, self.d)

    def decode(self, f, mode="infer", update_stats=True):
        v = f.values if isinstance(f, ChunkedFeature) else f
        out = ad.sigmoid(Tensor(v.data[:, :self.d] @ self.proj))
        return out.reshape((v.shape[0],) + self.image_shape)


@pytest.fixture
def identity_nets():
    return IdentityNets()


@pytest.fixture(scope="session")
def small_splits():
    from chunkmix.dataset import generate_arrays
    return generate_arrays(seed=0, copies_per_combo=5)


# ---------------------------------------------------------------------------
# acceptance reporting

def pytest_addoption(parser):
    parser.addoption("--retrain", action="store_true",
                     help="ignore cached acceptance training runs and train again")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number): acceptance criterion checked by this test")
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(config.acceptance_lines):
            terminalreporter.write_line(config.acceptance_lines[number])


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the test's criterion and assert it."""
    number = request.node.get_closest_marker("criterion").args[0]
    lines = request.config.acceptance_lines

    def record(ok: bool, detail: str):
        lines[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail

    yield record
    if number not in lines:
        lines[number] = f"criterion {number}: FAIL  test raised before reaching a verdict"
