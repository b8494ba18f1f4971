import numpy as np
import pytest

from qrv.estimators import ReturnSeries


@pytest.fixture(scope="session")
def gauss_series():
    """A fixed mid-sized Gaussian return series shared by unit tests."""
    rng = np.random.default_rng(20240915)
    return ReturnSeries(rng.standard_normal(600) * 0.02)


@pytest.fixture()
def tick_csv(tmp_path):
    def write(text, name="ticks.csv"):
        p = tmp_path / name
        p.write_text(text)
        return str(p)
    return write
