import numpy as np
import pytest

from nlreg import datagen, funcs


def normalize_columns(A):
    return A / np.linalg.norm(A, axis=0)


def make_instance(m, n, f_id="2x+cos(x)", seed=0, snr_db=None, s=None,
                  cond=None):
    cfg = datagen.GenerationConfig(m=m, n=n, seed=seed, snr_db=snr_db,
                                   cond_number=cond)
    return datagen.generate_instance(cfg, funcs.get_function(f_id),
                                     exact_support_size=s)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
