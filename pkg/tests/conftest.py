import numpy as np
import pytest

from atunlearn.gan import DiscriminatorSpec, GeneratorSpec, init_pair, make_checkpoint


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_pair():
    """Untrained 2-8-2 generator and 2-8-1 discriminator checkpoints."""
    gs, ds = GeneratorSpec(2, (8,), 2), DiscriminatorSpec(2, (8,))
    gnet, theta, dnet, phi = init_pair(gs, ds, seed=3)
    return (
        make_checkpoint(gnet, theta, gs.descriptor(), "pretrained", 3, 0),
        make_checkpoint(dnet, phi, ds.descriptor(), "pretrained", 3, 0),
    )


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def verdicts(request):
    """Collects one ``(criterion, passed, detail)`` line per acceptance criterion."""
    return request.config.stash.setdefault(_VERDICTS, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance")
    for name, ok, detail in sorted(lines):
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
