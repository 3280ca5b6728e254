import numpy as np
import pytest
from PIL import Image
import torch

from dfacon.data import AttackType, Label, PairRecord
from dfacon.embedder import make_encoder
from dfacon.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """10 anchors x 4 attacks + 20 dissimilar pairs at 64x64."""
    out = tmp_path_factory.mktemp("synth")
    generate(SynthConfig(n_anchors=10, n_dissimilar=20, seed=0), out)
    return out


@pytest.fixture(scope="session")
def toy_handle():
    return make_encoder("toy_cnn", dim=64, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def save_png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)
    return str(path)


def record(pid, anchor, cand, label="similar", attack="inpainting", orig=None):
    return PairRecord(pid, orig or f"/img/{anchor}.png", cand, Label(label), AttackType(attack), anchor)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for a criterion, then assert it."""

    def verdict(ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] {request.node.name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, detail

    return verdict


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def freeze(handle):
    """Stop every parameter and every batch-norm running statistic from moving."""
    for p in handle.model.parameters():
        p.requires_grad_(False)
    for m in handle.model.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            m.momentum = 0.0
    return handle
