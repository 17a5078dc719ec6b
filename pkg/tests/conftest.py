import numpy as np
import pytest

from fddm.data import GeneratorConfig, generate_synthetic, split_by_patient
from fddm.model import BackboneConfig, init_params


@pytest.fixture
def small_config():
    return BackboneConfig(input_dim=6, hidden_dims=(7,), feature_dim=5, num_classes=3)


@pytest.fixture
def student_teacher(small_config):
    teacher_cfg = BackboneConfig(6, (7,), 4, 3)
    student = init_params(small_config, 1, projector_dim=4)
    teacher = init_params(teacher_cfg, 2)
    return student, teacher


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = GeneratorConfig(num_patients=20, seed=5)
    return generate_synthetic(cfg)


@pytest.fixture(scope="session")
def tiny_split(tiny_dataset):
    return split_by_patient(tiny_dataset, 0.2, seed=5)


# -- acceptance summary: one line per criterion, printed after the run --------

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    def record(n: int, ok: bool, summary: str) -> None:
        line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {summary}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
