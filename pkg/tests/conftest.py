import numpy as np
import pytest

from icu_lstm.data import SyntheticConfig, generate_synthetic_cohort
from icu_lstm.preprocess import (LabeledWindow, compute_channel_stats, group_observations,
                                 interpolate_linear, label_mortality, prepare_grid,
                                 resample_to_grid)

ACCEPTANCE = {}


def planted_windows(n, frame=6, seed=5, mortality_rate=0.5, signal=3.0):
    cohort, obs = generate_synthetic_cohort(SyntheticConfig(
        n_stays=n, mortality_rate=mortality_rate, frame_signal_strength=signal, seed=seed))
    by_stay = group_observations(obs)
    grids = [interpolate_linear(resample_to_grid(by_stay.get(e.stay_id, []), frame, e.stay_id))
             for e in cohort]
    stats = compute_channel_stats(grids)
    windows = [LabeledWindow(prepare_grid(g, stats), label_mortality(e))
               for g, e in zip(grids, cohort)]
    return windows, stats


@pytest.fixture(scope="session")
def planted20():
    return planted_windows(20)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


def max_gradient_rel_error(seed, hidden, frames, inputs=4, n_out=1, batch=3, eps=1e-5):
    """Worst elementwise relative gap between BPTT and central differences.

    Relative error is |a - n| / max(|a|, |n|, 1e-7); the floor keeps
    gradients near 1e-10, where differencing roundoff dominates, from
    reading as large relative errors.
    """
    from icu_lstm import nn

    rng = np.random.default_rng(seed)
    lstm, head = nn.init_params(hidden, n_out, rng, inputs=inputs)
    X = rng.normal(size=(batch, frames, inputs))
    y = rng.integers(0, 2, batch).astype(float) if n_out == 1 else rng.integers(0, n_out, batch)
    params = nn.param_dict(lstm, head)

    def objective():
        p, h = nn.from_param_dict(params)
        probs, _ = nn.forward_batch(X, p, h)
        return nn.loss(probs, y)

    probs, cache = nn.forward_batch(X, lstm, head)
    g_lstm, g_head = nn.backward_bptt(cache, y)
    analytic = nn.param_dict(g_lstm, g_head)
    worst = 0.0
    for name, arr in params.items():
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + eps
            up = objective()
            arr[idx] = keep - eps
            down = objective()
            arr[idx] = keep
            numeric = (up - down) / (2 * eps)
            a = analytic[name][idx]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-7))
    return worst
