"""Shared fixtures: deterministic thread caps, a CLI runner, tiny datasets.

FSCE_THREADS is pinned before anything imports fsce (and through it numpy's
BLAS), so every test and every subprocess runs in the single-threaded
reproducibility mode the determinism checks rely on.
"""

import os
import subprocess
import sys

os.environ.setdefault("FSCE_THREADS", "1")

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("suite", deadline=None, max_examples=60)
settings.load_profile("suite")


def run_cli(*args, env=None, timeout=600):
    """Run the command-line entry point in a subprocess and capture output."""
    full_env = dict(os.environ)
    full_env.setdefault("FSCE_THREADS", "1")
    if env:
        full_env.update(env)
    return subprocess.run([sys.executable, "-m", "fsce.cli", *map(str, args)],
                          capture_output=True, text=True, env=full_env,
                          timeout=timeout)


@pytest.fixture(scope="session")
def cli():
    return run_cli


@pytest.fixture(scope="session")
def tiny_split():
    """16x16 four-class split, 4 train / 2 test images per class. Small
    enough that a couple of epochs run in well under a second."""
    from fsce.data import generate_split

    tr = generate_split(0, "train", per_class=4, num_classes=4, size=16)
    te = generate_split(0, "test", per_class=2, num_classes=4, size=16)
    return tr, te
