import pathlib

import numpy as np
import pytest

from metaprop.ingest import load_schema, parse_dataset

ROOT = pathlib.Path(__file__).resolve().parents[1]
DATA = ROOT / "data"
TESTDATA = pathlib.Path(__file__).resolve().parent / "data"


@pytest.fixture(scope="session")
def example_dataset():
    schema = load_schema(DATA / "example_schema.yaml")
    return parse_dataset((DATA / "example_trials.csv").read_text(encoding="utf-8"), schema)


@pytest.fixture(scope="session")
def example_paths():
    return {"data": str(DATA / "example_trials.csv"),
            "schema": str(DATA / "example_schema.yaml"),
            "simconfig": str(DATA / "example_simconfig.yaml")}


def toy_instance(seed, n_studies=2, trials=2, v_range=(0.05, 0.3)):
    """Small random intercept-only problem for engine oracles."""
    gen = np.random.default_rng(seed)
    sizes = np.full(n_studies, trials, dtype=np.int64)
    m = int(sizes.sum())
    y = gen.normal(1.0, 0.3, m)
    v = gen.uniform(*v_range, m)
    X = np.ones((m, 1))
    return y, X, sizes, v
