import numpy as np
import pytest

from vriqa.image import ImageBuffer


_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")
    config.stash[_VERDICTS] = {}


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL verdict for an acceptance criterion; an exception before the verdict counts as FAIL."""
    verdicts = request.config.stash[_VERDICTS]
    state = {}

    def record(number, ok, detail):
        state["n"] = number
        verdicts[number] = (bool(ok), detail)
        assert ok, detail

    yield record
    rep = getattr(request.node, "rep_call", None)
    number = getattr(request.node.function, "criterion", None)
    if number is not None and number not in verdicts:
        verdicts[number] = (False, f"errored before a verdict: {rep.longrepr if rep else 'unknown'}".splitlines()[0])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(verdicts):
        ok, detail = verdicts[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, width=32, height=16, channels=3):
    return ImageBuffer(rng.uniform(0.0, 1.0, size=(channels, height, width)))


def textured_image(rng, width=256, height=192, channels=1):
    """Smooth random field plus fine texture, kept away from the clip limits."""
    from scipy.ndimage import gaussian_filter

    base = gaussian_filter(rng.normal(size=(channels, height, width)), (0, 6, 6))
    fine = gaussian_filter(rng.normal(size=(channels, height, width)), (0, 1, 1))
    img = 0.5 + 0.15 * base / base.std() + 0.05 * fine / fine.std()
    return ImageBuffer(np.clip(img, 0.05, 0.95))


def tie_patterns(n):
    """Every weak ordering of n items, as tuples of dense levels 0..k-1."""
    import itertools

    for t in itertools.product(range(n), repeat=n):
        if set(t) == set(range(max(t) + 1)):
            yield t


def brute_twice_ranks(x):
    """Twice the mid-rank of each item by pairwise counting: 2 + 2 #less + (#equal - 1)."""
    return [2 + 2 * sum(b < a for b in x) + sum(b == a for b in x) - 1 for a in x]


def brute_spearman(x, y):
    """Pearson of mid-ranks in integer arithmetic, rounded once at the end; None when undefined."""
    import math

    n = len(x)
    rx, ry = brute_twice_ranks(x), brute_twice_ranks(y)
    sx, sy = sum(rx), sum(ry)
    num = n * sum(a * b for a, b in zip(rx, ry)) - sx * sy
    vx = n * sum(a * a for a in rx) - sx * sx
    vy = n * sum(b * b for b in ry) - sy * sy
    if vx == 0 or vy == 0:
        return None
    return num / math.sqrt(vx * vy)
