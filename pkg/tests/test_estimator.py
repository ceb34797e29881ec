import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from corrdistill import CorrelationDistiller
from corrdistill.corpus import synthetic_corpus
from corrdistill.exceptions import ContractError


@pytest.fixture(scope="module")
def waves():
    return [b.samples for b in synthetic_corpus(4, seed=9, duration_s=0.25)]


def small(**kw):
    return CorrelationDistiller(**{"steps": 2, "batch_size": 2, "model_dim": 8, "n_heads": 2, "n_mels": 8, **kw})


def test_fit_transform_shapes(waves):
    est = small()
    Z = est.fit(waves).transform(waves)
    assert Z.shape == (4, 8) and np.isfinite(Z).all()
    assert len(est.records_) == 2


def test_params_clone_and_determinism(waves):
    est = small(loss="kd", seed=3)
    assert est.get_params()["loss"] == "kd"
    other = clone(est)
    np.testing.assert_array_equal(est.fit_transform(waves), other.fit_transform(waves))


def test_transform_before_fit(waves):
    with pytest.raises(NotFittedError):
        small().transform(waves)


def test_rejects_ragged_and_single_waveform(waves):
    with pytest.raises(ContractError):
        small().fit([waves[0], waves[1][:-10]])
    with pytest.raises(ContractError):
        small().fit(waves[0])
