import numpy as np
import pytest

from farl.data import generate
from farl.encoders import EncoderConfig
from farl.model import FarlModel
from farl.train import PretrainConfig, pretrain_contrastive


@pytest.fixture(scope="session")
def bench_ds():
    return generate(0, 64, pretrain_per_class=64)


@pytest.fixture(scope="session")
def pretrained(bench_ds):
    """Backbone state after the default contrastive pre-training (shared, read-only)."""
    model = FarlModel.create(EncoderConfig(), 0, with_adapter=False)
    losses = pretrain_contrastive(model, bench_ds, PretrainConfig())
    return model.backbone_state(), losses


@pytest.fixture
def pretrained_model(pretrained):
    state, _ = pretrained
    model = FarlModel.create(EncoderConfig(), 0, with_adapter=False)
    model.load_state({k: np.copy(v) for k, v in state.items()})
    model.init_adapter(0)
    return model


# acceptance criteria report: number -> (passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
