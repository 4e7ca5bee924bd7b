import pytest

from hsinerf import pipeline

# small enough that a training iteration takes milliseconds
TINY = {
    "scene.poses": "12", "scene.width": "16", "scene.height": "16", "scene.n_steps": "256",
    "views.train": "4", "views.eval": "2", "train.iterations": "3",
    "train.batch_rays": "64", "train.chunk": "32", "render.n_coarse": "8",
    "render.n_fine": "8", "patch.count": "2", "patch.size": "4", "patch.cameras": "50",
    "model.base_depth": "2", "model.base_width": "16", "model.head_width": "8",
    "model.l_pos": "2", "model.l_dir": "1",
}


def tiny_settings(**extra):
    over = dict(TINY)
    over.update({k.replace("__", "."): str(v) for k, v in extra.items()})
    return pipeline.resolve_settings(over)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    pipeline.cmd_simulate(tiny_settings(), out)
    return out


# criterion number -> (passed, detail), filled in by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
