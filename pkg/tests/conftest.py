import numpy as np
import pytest

from hreid.data import Attribute, AttributeSchema, Dataset
from hreid.synth import AttributeSpec, SynthConfig, generate


def make_dataset(labels, identities=None, splits=None, features=None, schema=None,
                 cameras=None, dim=4, seed=0):
    """Small hand fixture; labels is a list of per-sample value-index rows."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if schema is None:
        schema = AttributeSchema(tuple(
            Attribute(f"a{j}", ("v0", "v1")) for j in range(labels.shape[1])))
    if identities is None:
        identities = [f"id{i}" for i in range(n)]
    if splits is None:
        splits = ["train"] * n
    if cameras is None:
        cameras = ["c0"] * n
    if features is None:
        features = np.random.default_rng(seed).normal(size=(n, dim)).astype(np.float32)
    return Dataset(schema, [f"s{i:03d}" for i in range(n)], identities, cameras,
                   splits, labels, features)


GENDER_DRESS = AttributeSchema((Attribute("gender", ("male", "female")),
                                Attribute("dress", ("no", "yes"))))


@pytest.fixture
def gender_dress():
    # 6 samples: 3 female, of which 2 wear a dress; no male wears one.
    labels = [[0, 0], [1, 1], [0, 0], [1, 0], [1, 1], [0, 0]]
    return make_dataset(labels, schema=GENDER_DRESS)


def small_synth(seed=0, n_identities=12, images=20, attributes=None, dim=8, **kw):
    attrs = attributes or (AttributeSpec("gender", ("male", "female"), 6.0, None),
                           AttributeSpec("upper", ("dark", "light"), 5.0, 0.0))
    return SynthConfig(seed=seed, n_identities=n_identities, images_per_identity=images,
                       feature_dim=dim, attributes=attrs, **kw)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(small_synth())


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
