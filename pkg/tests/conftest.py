import numpy as np
import pytest

from stimswin.tensor import Rng, Tensor


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def randn():
    """Seeded f64 tensor factory."""
    gen = np.random.default_rng(0)

    def make(*shape, requires_grad=True, scale=1.0):
        return Tensor(gen.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=np.float64)

    return make



@pytest.fixture(scope="session")
def small_clips():
    from stimswin.data import synthetic_clips

    return synthetic_clips(videos_per_class=6, seed=3)


@pytest.fixture(scope="session")
def trained_vst_l(small_clips):
    """A briefly trained tiny vst_l model: ``(run_config, params, embeddings, history)``."""
    from stimswin.language import pseudo_embeddings
    from stimswin.training import RunConfig, train_one_model

    cfg = RunConfig(mode="vst_l", epochs=3, warmup_epochs=1, seed=0)
    emb = pseudo_embeddings(dim=16, seed=0)
    params, history = train_one_model(small_clips, cfg, emb)
    return cfg, params, emb, history


def pytest_terminal_summary(terminalreporter):
    from _report import CRITERIA, RESULTS

    ran = any("test_acceptance" in str(r.nodeid) for stats in terminalreporter.stats.values()
              for r in stats if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        ok, detail = RESULTS.get(n, (False, "no result recorded"))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}: {detail}")
