import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import identity_bundle, indirect_bundle, planted_bundle, shared_bundle

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def identity_manifest(tmp_path_factory):
    """20-sample bundle whose perturbed artifacts equal the originals."""
    return identity_bundle(tmp_path_factory.mktemp("identity"), n_samples=20)


@pytest.fixture(scope="session")
def planted_manifest(tmp_path_factory):
    """Separable 3-class bundle with planted peaks and 1-px object masks."""
    return planted_bundle(tmp_path_factory.mktemp("planted"))


@pytest.fixture(scope="session")
def indirect_manifest(tmp_path_factory):
    return indirect_bundle(tmp_path_factory.mktemp("indirect"))


@pytest.fixture(scope="session")
def shared_manifest(tmp_path_factory):
    return shared_bundle(tmp_path_factory.mktemp("shared"))
