import os

import numpy as np
import pytest

# The test config is read as the user's vitrojan.cfg; must be set before the config is loaded
os.environ['VITROJAN_HOME'] = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'files')
os.environ.pop('VITROJAN_OUTPUT_ROOT', None)
os.environ.pop('VITROJAN_SITE_CONFIG', None)

from vitrojan.config import getConfig
from vitrojan.datasets import gen_synthetic, SyntheticSpec
from vitrojan.log import setLogLevels, configureLogs
from vitrojan.tool import Vitrojan
from vitrojan.vit import Checkpoint
from .utils_for_tests import tiny_spec


@pytest.fixture(scope="session", autouse=True)
def configure_logging_for_tests():
    # Don't display routine diagnostic messages during tests
    getConfig(reload=True)
    setLogLevels('ERROR')
    configureLogs(force=True)
    return None


@pytest.fixture(scope="module")
def spec():
    return tiny_spec()


@pytest.fixture(scope="module")
def spec_no_cls():
    return tiny_spec(use_cls_token=False)


@pytest.fixture(scope="function")
def model(spec):
    """
    A freshly initialized tiny model, with "function" scope so tests that
    alter parameters don't affect each other.
    """
    return Checkpoint.initialize(spec, seed=0)


@pytest.fixture(scope="module")
def main_data(spec):
    synth = SyntheticSpec(family='shapes', image_size=spec.image_size, channels=spec.channels)
    return gen_synthetic(synth, 24, seed=0, split='train', name='main')


@pytest.fixture(scope="module")
def surrogate_pool(spec):
    synth = SyntheticSpec(family='glyphs', image_size=spec.image_size, channels=spec.channels)
    return gen_synthetic(synth, 30, seed=5, split='pool', name='glyphs')


@pytest.fixture(scope='function')
def vitrojan():
    return Vitrojan.getInstance(reload=True)


@pytest.fixture(scope='function')
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="function", autouse=True)
def fresh_log_handlers():
    # console handlers hold the stream current when they were made, which
    # output capture replaces per test
    yield
    configureLogs(force=True)
