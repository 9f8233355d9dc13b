import pytest

from config import PipelineConfig
from services.marketdata import ExchangeProfile
from tests.synthetic import make_book


@pytest.fixture
def book():
    return make_book


@pytest.fixture
def zero_fee_profiles():
    return {e: ExchangeProfile(e) for e in ("A", "B", "C")}


@pytest.fixture
def cfg(tmp_path):
    return PipelineConfig(
        date_from="2019-01-02",
        date_to="2019-01-03",
        output_dir=str(tmp_path / "out"),
        seed=7,
    )
