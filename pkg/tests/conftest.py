import numpy as np
import pytest


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
    return grad


def max_relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def elbo_gradient_check(seed=0, batch=4, h=1e-5):
    """Max relative error between tape and finite-difference ELBO gradients on a 3-2-1 net."""
    from bnnrisk.network import NetworkSpec, init_bnn
    from bnnrisk.training import elbo_gradients, elbo_loss
    from bnnrisk.variational import VariationalParams, draw_noise

    rng = np.random.default_rng(seed)
    model = init_bnn(NetworkSpec(input_dim=3, hidden_sizes=(2,)), seed=seed)
    # wider posteriors than the default init keep every sampled weight away from the prior spike
    flat = [a if i % 2 == 0 else rng.uniform(-3.0, -1.0, a.shape) for i, a in enumerate(model.params.flat())]
    model = type(model)(spec=model.spec, params=VariationalParams.from_flat(flat), prior=model.prior)
    x = rng.normal(size=(batch, 3))
    y = (rng.random(batch) < 0.5).astype(float)
    noise = draw_noise(model.params, rng)
    _, grads = elbo_gradients(model, x, y, noise, 0.25)

    worst = 0.0
    for k, base in enumerate(flat):
        def f(v, k=k):
            arrs = list(flat)
            arrs[k] = v
            m = type(model)(spec=model.spec, params=VariationalParams.from_flat(arrs), prior=model.prior)
            return elbo_loss(m, x, y, noise, 0.25)[0]

        worst = max(worst, max_relative_error(grads[k], central_difference(f, base, h)))
    return worst


def bounds_sweep(n_sets=100_000, T=10, seed=0):
    """Random probability sample-sets checked against the loss bounds for both labels.

    Returns ``(n_checked, n_violations)``.  Sets are drawn from a mix of
    uniform, U-shaped and near-degenerate distributions so the extremes of
    the variance range get exercised.
    """
    from bnnrisk.bounds import verify_bounds
    from bnnrisk.inference import _mean_and_variance

    rng = np.random.default_rng(seed)
    k = n_sets // 4
    sets = np.vstack(
        [
            rng.random((k, T)),
            rng.beta(0.05, 0.05, (k, T)),
            np.clip(rng.random((k, 1)) + 1e-6 * rng.standard_normal((k, T)), 0, 1),
            rng.choice([0.0, 1.0], size=(n_sets - 3 * k, T)),
        ]
    )
    mean, var = _mean_and_variance(sets.T)
    n = len(mean)
    rep = verify_bounds(np.r_[mean, mean], np.r_[var, var], np.r_[np.zeros(n), np.ones(n)])
    return rep.n_records, rep.n_violations


def pair_count_auroc(scores, labels):
    """Exhaustive pair counting; returns a Fraction so comparisons can be exact."""
    from fractions import Fraction

    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(2 if p > n else 1 if p == n else 0 for p in pos for n in neg)
    return Fraction(wins, 2 * len(pos) * len(neg))


def sweep_aupr(scores, labels):
    """Threshold sweep: sum over distinct thresholds of (recall step) * precision."""
    n_pos = sum(1 for y in labels if y == 1)
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        picked = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(picked)
        recall = tp / n_pos
        area += (recall - prev_recall) * (tp / len(picked))
        prev_recall = recall
    return area


# -- acceptance reporting -----------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()
_STARTED = pytest.StashKey[float]()


def pytest_sessionstart(session):
    import time

    session.config.stash[_ACCEPTANCE] = {}
    session.config.stash[_STARTED] = time.perf_counter()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records a verdict and fails the test when not ok."""
    log = request.config.stash[_ACCEPTANCE]

    def record(n, ok, detail):
        log.setdefault(n, []).append((bool(ok), detail))
        assert ok, f"criterion {n}: {detail}"

    return record


@pytest.fixture
def session_elapsed(request):
    import time

    return lambda: time.perf_counter() - request.config.stash[_STARTED]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    import time

    log = config.stash.get(_ACCEPTANCE, {})
    if not log:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, 11):
        checks = log.get(n)
        if not checks:
            tr.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        verdict = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        tr.write_line(f"criterion {n:2d}: {verdict}  " + "; ".join(d for _, d in checks))
    total = time.perf_counter() - config.stash[_STARTED]
    tr.write_line(f"whole suite wall time {total:.0f} s (limit 600 s): {'PASS' if total < 600 else 'FAIL'}")
