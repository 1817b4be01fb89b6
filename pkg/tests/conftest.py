import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
DATA_DIR = Path(os.environ.get("KS_DATA_DIR", "/root/data/mnist"))
CKPT_DIR = Path(os.environ.get("KS_CKPT_DIR", ROOT / "artifacts" / "ckpt"))


def have_mnist() -> bool:
    return (DATA_DIR / "train-images-idx3-ubyte").exists() or (DATA_DIR / "train-images-idx3-ubyte.gz").exists()


needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST not found in {DATA_DIR} (set KS_DATA_DIR)")


@pytest.fixture(scope="session")
def data_dir():
    if not have_mnist():
        pytest.skip(f"MNIST not found in {DATA_DIR}")
    return DATA_DIR


@pytest.fixture(scope="session")
def mnist_test(data_dir):
    from knockoff_saliency.data import load_variant

    return load_variant(data_dir, "full", "test")


@pytest.fixture(scope="session")
def trained_classifier():
    from knockoff_saliency.models import load_checkpoint

    path = CKPT_DIR / "classifier-full.ksc"
    if not path.exists():
        pytest.skip(f"no trained classifier at {path}")
    return load_checkpoint(path, "classifier")
