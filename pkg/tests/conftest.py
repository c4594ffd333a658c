import numpy as np
import pytest

from qatts import autograd as ag
from qatts.data import prepare, synthetic_sine
from qatts.model import ModelConfig, TransformerModel


def numeric_grad(f, arrays, eps=1e-6):
    """Central finite differences of a scalar function, evaluated in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    with ag.precision(np.float64):
        for a in arrays:
            g = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                orig = a[idx]
                a[idx] = orig + eps
                hi = f(*[ag.Tensor(x) for x in arrays]).item()
                a[idx] = orig - eps
                lo = f(*[ag.Tensor(x) for x in arrays]).item()
                a[idx] = orig
                g[idx] = (hi - lo) / (2 * eps)
            grads.append(g)
    return grads


def analytic_grad(f, arrays, dtype=np.float32):
    with ag.precision(dtype):
        ts = [ag.Tensor(a, requires_grad=True) for a in arrays]
        out = f(*ts)
        out.backward()
    return [t.grad if t.grad is not None else np.zeros(t.shape) for t in ts]


def rel_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


TINY = dict(d_model=8, n_heads=2, d_ff=16, enc_layers=1, dec_layers=2, dropout=0.0)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_config):
    return TransformerModel(tiny_config)


@pytest.fixture(scope="session")
def sine_data():
    return prepare(synthetic_sine(400, 0.05))


def calibrated_qat_model(config=None, bits=8, batches=3, seed=0, **flags):
    """Model with the default exemption policy, observers fed a few random batches then frozen."""
    from qatts.quant import default_paper_policy

    model = TransformerModel(config or ModelConfig(**TINY))
    model.enable_qat(default_paper_policy(model, bits, **flags))
    model.train()
    rng = np.random.default_rng(seed)
    with ag.no_grad():
        for _ in range(batches):
            model(rng.standard_normal((4, model.config.n)).astype(np.float32))
    model.freeze_observers()
    return model.eval()


# acceptance reporting: one line per criterion, printed after the run

ACCEPTANCE_LINES: list[str] = []
_SESSION_START = [0.0]


def pytest_sessionstart(session):
    import time

    _SESSION_START[0] = time.perf_counter()


def pytest_terminal_summary(terminalreporter):
    import time

    if not ACCEPTANCE_LINES:
        return
    elapsed = time.perf_counter() - _SESSION_START[0]
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
    verdict = "PASS" if elapsed < 600 else "FAIL"
    terminalreporter.write_line(f"criterion 7 (suite runtime): {elapsed:.1f} s, limit 600 s -> {verdict}")
