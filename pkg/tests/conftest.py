import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path to ensure imports work correctly
project_root = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(project_root))

from acre.data import load_triples
from acre.model import ModelConfig
from acre.tensor import set_debug_checks, set_default_dtype

TOY_TRAIN = [
    ("anna", "parent_of", "ben"),
    ("anna", "parent_of", "cleo"),
    ("dan", "parent_of", "ben"),
    ("dan", "parent_of", "cleo"),
    ("ben", "sibling_of", "cleo"),
    ("cleo", "sibling_of", "ben"),
    ("anna", "married_to", "dan"),
    ("dan", "married_to", "anna"),
    ("eve", "parent_of", "finn"),
    ("gus", "parent_of", "finn"),
    ("eve", "married_to", "gus"),
    ("gus", "married_to", "eve"),
]
TOY_VALID = [
    ("anna", "parent_of", "ben"),
    ("eve", "married_to", "gus"),
    ("ben", "sibling_of", "cleo"),
]
TOY_TEST = [
    ("dan", "parent_of", "cleo"),
    ("gus", "parent_of", "finn"),
    ("cleo", "sibling_of", "ben"),
]


def write_split(path, triples, sep="\t"):
    with open(path, "w", encoding="utf-8") as f:
        for h, r, t in triples:
            f.write(f"{h}{sep}{r}{sep}{t}\n")


def write_kg(directory, train, valid, test):
    """Write train/valid/test files and return the directory as a string."""
    os.makedirs(directory, exist_ok=True)
    write_split(os.path.join(directory, "train.txt"), train)
    write_split(os.path.join(directory, "valid.txt"), valid)
    write_split(os.path.join(directory, "test.txt"), test)
    return str(directory)


@pytest.fixture(autouse=True)
def float64_defaults():
    """Every test starts and ends in 64-bit with debug checks off."""
    set_default_dtype(64)
    set_debug_checks(False)
    yield
    set_default_dtype(64)
    set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def toy_kg_dir(tmp_path):
    return write_kg(tmp_path / "toy", TOY_TRAIN, TOY_VALID, TOY_TEST)


@pytest.fixture
def toy_store(toy_kg_dir):
    store, _ = load_triples(toy_kg_dir)
    return store


@pytest.fixture
def tiny_config():
    """m=4 model reshaped to 2x4 with one atrous stage, no regularization."""
    return ModelConfig(
        embedding_dim=4,
        reshape_height=2,
        reshape_width=4,
        kernel_size=3,
        num_filters=2,
        num_atrous=1,
        atrous_rates=(2,),
        input_dropout=0.0,
        feature_dropout=0.0,
        hidden_dropout=0.0,
        batch_norm=False,
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size training runs (need ACRE_KINSHIP_DIR)")
