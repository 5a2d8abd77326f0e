import pytest

from actquant.fxcore import FxFormat
from actquant.netgraph import load_dataset, load_model

from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"
REFERENCE = ROOT / "paper_fixtures"
DATA = Path(__file__).resolve().parent / "data"

DESK_QM = FxFormat(12, 0)


@pytest.fixture(scope="session")
def desk_model():
    return load_model(FIXTURES / "model" / "desk_cnn.json")


@pytest.fixture(scope="session")
def eval_set(desk_model):
    return load_dataset(FIXTURES / "data" / "eval", desk_model.input_dims)


@pytest.fixture(scope="session")
def calib_set(desk_model):
    return load_dataset(FIXTURES / "data" / "calib", desk_model.input_dims)
