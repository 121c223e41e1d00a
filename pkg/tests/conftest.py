"""Shared fixtures: the reactor model, the study scenario, stub networks
with prescribed constant outputs, and one session-scoped training run that
the verification and closed-loop acceptance tests share."""

import pathlib
import time

import numpy as np
import pytest

from dccm import dccm_net, plant, simloop, trainer

CONFIG_PATH = pathlib.Path(__file__).resolve().parent.parent / "configs" / "cstr_study.toml"

# test_acceptance registers (name, passed, detail) tuples here; the terminal
# summary prints one line per criterion at the end of the run.
ACCEPTANCE_RESULTS = {}


@pytest.fixture(scope="session")
def scenario() -> simloop.ScenarioConfig:
    return simloop.load_config(CONFIG_PATH)


@pytest.fixture(scope="session")
def model(scenario) -> plant.UncertainModel:
    return scenario.model()


def make_stub(bias, x_box, r_box, n=2, m=1, ell=2, hidden=(4,)):
    """Network whose output is the constant vector ``bias``.

    Zero hidden weights and biases make every tanh activation 0; the identity
    output layer with zero weights then returns its bias verbatim, so the
    packed metric and gain are independent of (x, r).
    """
    w = dccm_net.init_weights(n, m, ell, hidden, x_box, r_box, seed=0)
    layers = []
    for k, layer in enumerate(w.layers):
        zb = np.zeros_like(layer.b)
        if k == len(w.layers) - 1:
            zb = np.asarray(bias, dtype=np.float64)
        layers.append(dccm_net.Layer(np.zeros_like(layer.w), zb, layer.act))
    return dccm_net.NetworkWeights(n, m, ell, tuple(layers), x_box, r_box)


def constant_pair_stub(M, K, x_box, r_box):
    """Stub returning the given 2x2 metric and 1x2 gain everywhere."""
    M = np.asarray(M, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    bias = [M[0, 0], M[0, 1], M[1, 1], K[0, 0], K[0, 1]]
    return make_stub(bias, x_box, r_box)


@pytest.fixture(scope="session")
def trained(scenario, model):
    """One full training + verification run at the configured budgets.

    Returns weights, the loss history, the verification report, and the wall
    times, so acceptance checks can assert both quality and runtime without
    repeating the run.
    """
    t0 = time.time()
    weights, history = trainer.train(model, scenario.trainer)
    train_elapsed = time.time() - t0
    t1 = time.time()
    report = trainer.verify(weights, model, scenario.trainer)
    verify_elapsed = time.time() - t1
    return {
        "weights": weights,
        "history": history,
        "report": report,
        "train_elapsed": train_elapsed,
        "verify_elapsed": verify_elapsed,
    }


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[name]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{verdict} {name}: {detail}")
