import time

import numpy as np
import pytest

from laserseg.dataio import default_scene_spec, generate_synthetic_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_scene(tmp_path_factory):
    """A low-resolution copy of the default scene, fast enough for unit tests."""
    spec = default_scene_spec(image_size=20, num_views=6, holdout_every=3, holdout_offset=1, feature_dim=8)
    out = tmp_path_factory.mktemp("tiny_scene")
    generate_synthetic_scene(spec, out)
    return out / "manifest.json"


@pytest.fixture(scope="session")
def desk_scene(tmp_path_factory):
    """The default four-object scene at full desk resolution."""
    out = tmp_path_factory.mktemp("desk_scene")
    generate_synthetic_scene(default_scene_spec(), out)
    return out / "manifest.json"


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Synthesize the default scene and train it with the default config, timing CPU end to end."""
    from laserseg.dataio import load_manifest, read_text
    from laserseg.trainer import TrainConfig, evaluate, train

    cpu0 = time.process_time()
    out = tmp_path_factory.mktemp("desk_run")
    manifest = generate_synthetic_scene(default_scene_spec(), out)
    text = read_text(manifest.path(manifest.text))
    state, report = train(manifest, TrainConfig(), text)
    result = evaluate(state, manifest, text)
    return {"manifest": out / "manifest.json", "state": state, "report": report, "eval": result,
            "cpu_seconds": time.process_time() - cpu0}


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, echoed now and in the session summary."""

    def record(name: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
