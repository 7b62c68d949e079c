import numpy as np
import pytest
from hypothesis import settings

from nar.bench_data import SyntheticSpec, generate_synthetic
from nar.model import NAR, ModelConfig
from nar.tiers import new_buckets

# first calls may trigger kernel compilation
settings.register_profile("nar", deadline=None, max_examples=60)
settings.load_profile("nar")


@pytest.fixture(scope="session")
def small_space():
    # 1,312 structures: quick to enumerate, big enough to search
    return generate_synthetic(SyntheticSpec(nodes=5, max_edges=6, cells=2, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> ModelConfig:
    base = dict(layers=2, d_model=16, heads=2, ffn=32, tiers=5, patches=19, resolution=7,
                dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, **kw):
    cfg = tiny_config(**kw)
    model = NAR(cfg, seed=seed)
    buckets = new_buckets(cfg.tiers, cfg.patches, cfg.d_model)
    return model, buckets


def gradcheck(loss_fn, params, names=None, entries=4, step=1e-5, seed=0):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(tape_enabled)`` returns (loss_tensor, tape or None).  Relative
    error is |a - f| / max(1, |f|), sampled at ``entries`` coordinates per tensor.
    """
    from nar import numcore as nc

    with nc.Tape() as tape:
        loss = loss_fn()
    grads = nc.backward(tape, loss, params)
    rng = np.random.default_rng(seed)
    worst = {}
    for name in names or sorted(params):
        p = params[name]
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(entries, flat.size), replace=False)
        err = 0.0
        for i in picks:
            old = flat[i]
            flat[i] = old + step
            up = float(loss_fn().data)
            flat[i] = old - step
            down = float(loss_fn().data)
            flat[i] = old
            fd = (up - down) / (2 * step)
            a = grads[name].reshape(-1)[i]
            err = max(err, abs(a - fd) / max(1.0, abs(fd)))
        worst[name] = err
    return worst


# --------------------------------------------------------------------------
# acceptance reporting: one pass/fail line per marked criterion
# --------------------------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        num, text = mark.args
        entry = _CRITERIA.setdefault(num, {"text": text, "results": [], "notes": []})
        entry["results"].append(rep.outcome)
        entry["notes"].extend(v for k, v in item.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        res = e["results"]
        if any(r == "failed" for r in res):
            status = "FAIL"
        elif all(r == "skipped" for r in res):
            status = "SKIP"
        else:
            status = "PASS"
        note = f"  ({'; '.join(e['notes'])})" if e["notes"] else ""
        tr.write_line(f"[{status}] criterion {num}: {e['text']}{note}")
