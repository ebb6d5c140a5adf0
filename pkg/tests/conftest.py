import numpy as np
import pytest

from plaquestrat.data import DatasetManifest, ManifestEntry
from plaquestrat.model import ModelConfig


def central_diff(f, x: np.ndarray, step: float = 1e-5, index=None) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``x`` (in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if index is None else index:
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return grad


def max_rel_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def tiny_config():
    return ModelConfig(filters=(2, 2, 3, 3, 4, 4), fc_width=5, conv_dropout=0.2, fc_dropout=0.3,
                       l2_lambda=0.05, input_size=(10, 9))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_manifest(n_neg: int, n_pos: int, per_group: int = 1) -> DatasetManifest:
    """Negatives first, then positives; ``per_group`` consecutive images share a group."""
    entries = []
    for i, label in enumerate([0] * n_neg + [1] * n_pos):
        entries.append(ManifestEntry(f"img{i:04d}.pgm", label, f"{label}g{i // per_group:04d}"))
    return DatasetManifest(entries)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
