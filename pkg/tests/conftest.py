from __future__ import annotations

import numpy as np
import pytest

from emoreason.clause_bank import build_clause_bank
from emoreason.synthetic_env import OracleJudge, generate_dataset
from emoreason.taxonomy import load_taxonomy
from emoreason import toy_policy as tp

FOUR = ["amusement", "awe", "fear", "sadness"]


@pytest.fixture(scope="session")
def emoset():
    return load_taxonomy("emoset")


@pytest.fixture(scope="session")
def tax4(emoset):
    return emoset.subset(FOUR)


@pytest.fixture(scope="session")
def bank4(tax4):
    return build_clause_bank(tax4)


@pytest.fixture(scope="session")
def scenes16(tax4, bank4):
    return generate_dataset(7, 16, tax4, bank=bank4)


@pytest.fixture(scope="session")
def oracle4(bank4):
    return OracleJudge(bank4)


@pytest.fixture
def random_policy(tax4, bank4, scenes16):
    return tp.init_policy(tax4, len(scenes16[0].features), bank4, scale=0.7, rng=np.random.default_rng(3))
