import logging
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from subsolvers.properties import load_species_database  # noqa: E402


@pytest.fixture(scope="session")
def database():
    return load_species_database()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def quiet_logger():
    logger = logging.getLogger("thermodem.tests")
    logger.setLevel(logging.WARNING)
    return logger
