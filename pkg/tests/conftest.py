from pathlib import Path

import numpy as np
import pytest

from sscr import fit_model, read_csv
from sscr.fitting import FitControl

DATA_DIR = Path(__file__).parent / "data"
NETHERLANDS = DATA_DIR / "netherlandsimmigrant.csv"
FARM = DATA_DIR / "farmsubmission.csv"


@pytest.fixture(scope="session")
def netherlands():
    return read_csv(NETHERLANDS)


@pytest.fixture(scope="session")
def ztp_model(netherlands):
    return fit_model(netherlands, "ztpoisson", "capture ~ gender + age + nation", control=FitControl(silent=True))


@pytest.fixture(scope="session")
def oi_model(netherlands):
    from sscr import get_family

    fam = get_family("oiztgeom", omega_link="cloglog")
    return fit_model(
        netherlands, fam, {"lambda": "capture ~ nation", "omega": "~ gender + age"}, control=FitControl(silent=True)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
