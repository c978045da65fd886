import numpy as np
import pytest


def direct_conv(x, w, b=None, stride=1, pad=0):
    """Six-nested-loop cross-correlation used as the reference."""
    n, m, h, wd = x.shape
    nout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, nout, ho, wo), dtype=np.float64)
    for b_ in range(n):
        for o in range(nout):
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0
                    for i in range(m):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, i, u, v] * xp[b_, i, r * stride + u, c * stride + v]
                    out[b_, o, r, c] = acc + (b[o] if b is not None else 0.0)
    return out


def numeric_grad(f, x, h=1e-3):
    """Central finite differences of scalar ``f`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_mixed_model(seed, hw=8):
    """Small model drawing every serializable layer kind at random."""
    from rotconv.airotate import AiPruneConfig, ai_prune_step
    from rotconv.model import Model
    from rotconv.nn import BatchNorm2d, Conv2d, Linear, MaxPool2, ReLU, ResidualAdd, ResidualBegin
    from rotconv.rotate import RotateConv2d

    r = np.random.default_rng(seed)
    c = int(r.integers(1, 4))
    in_c = c
    layers = []
    f32 = lambda a: np.asarray(a, np.float32)

    def conv(m, n):
        kind = r.choice(["conv", "rotate4", "rotate3", "ai"])
        if kind == "conv":
            bias = f32(r.normal(size=n)) if r.random() < 0.5 else None
            return Conv2d(f32(r.normal(size=(n, m, 3, 3))), bias, prunable=bool(r.random() < 0.5))
        if kind == "rotate4":
            return RotateConv2d(f32(r.normal(size=(n, m, 3))), f32(r.uniform(0, 180, size=(n, m))))
        if kind == "rotate3":
            return RotateConv2d(f32(r.normal(size=(n, m, 3))), f32(r.uniform(0, 180, size=n)), per_filter=True)
        K = f32(r.normal(scale=0.1, size=(n, m, 3, 3)))
        K[r.random((n, m)) < (1.0 if r.random() < 0.1 else 0.3)] = 0
        k = int(r.integers(1, 10))
        if (np.abs(K).reshape(n, m, 9).max(axis=-1) >= 0.001).sum() * k == 1:
            k = 2  # a lone reserved point has no tolerance
        state, P = ai_prune_step(K, AiPruneConfig(k=k))
        layer = Conv2d(P, None, prunable=True)
        layer.ai_state = state
        return layer

    def block(m, n):
        layers.append(conv(m, n))
        bn = BatchNorm2d(n)
        bn.params["gamma"] = f32(r.normal(size=n))
        bn.params["beta"] = f32(r.normal(size=n))
        bn.running_mean = f32(r.normal(size=n))
        bn.running_var = f32(r.uniform(0.5, 2, size=n))
        layers.append(bn)
        layers.append(ReLU())

    for _ in range(int(r.integers(1, 4))):
        n = int(r.integers(1, 6))
        block(c, n)
        c = n
        if r.random() < 0.4:
            layers.append(ResidualBegin())
            block(c, c)
            layers.append(ResidualAdd())
    if r.random() < 0.5:
        layers.append(MaxPool2())
        hw //= 2
    layers.append(Linear(f32(r.normal(size=(3, c * hw * hw))), f32(r.normal(size=3))))
    return Model(layers), (in_c, 8, 8)


# acceptance criteria: tests tagged @pytest.mark.criterion(n, title) are
# aggregated into one PASS/FAIL line per criterion in the terminal summary
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    num, title = mark.args
    entry = _criteria.setdefault(num, {"title": title, "ok": True, "details": []})
    if rep.failed or rep.skipped:
        entry["ok"] = False
        crash = getattr(rep.longrepr, "reprcrash", None)
        msg = crash.message.splitlines()[0] if crash else rep.outcome
        entry["details"].append(f"{item.name}: {msg}")
    for key, value in item.user_properties:
        if key == "detail" and rep.when == "call":
            entry["details"].append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        e = _criteria[num]
        line = f"criterion {num:>2}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["details"]:
            line += "  [" + "; ".join(e["details"]) + "]"
        terminalreporter.write_line(line)
