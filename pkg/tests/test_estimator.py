import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from binsplat import BinaryGaussianSegmenter
from binsplat._validation import check_level, resolve_threads
from binsplat.scene import GaussianScene, LevelLayout
from binsplat.synth import SynthSpec, generate

SPEC = SynthSpec(branching=(2, 2), level_dims=(4, 4), n_views=3, image_size=24, focal=26.0,
                 gaussians_per_leaf=15)


@pytest.fixture(scope="module")
def data():
    return generate(SPEC)


@pytest.fixture(scope="module")
def fitted(data):
    scene, cams, pyr, _ = data
    return BinaryGaussianSegmenter(iterations=20, random_pixels=64, balanced_pixels=64).fit(
        scene, pyr, cams)


def test_params_round_trip_through_clone():
    est = BinaryGaussianSegmenter(iterations=7, virtual_negative=False, seed=3)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(iterations=9).iterations == 9


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        BinaryGaussianSegmenter().transform()


def test_fit_populates_attributes(fitted, data):
    scene = data[0]
    assert len(fitted.codes_) == len(scene)
    assert len(fitted.history_) == 20
    assert fitted.layout_ == scene.layout
    codes = fitted.transform()
    assert codes.dtype == np.uint32
    codes[:] = 0
    assert fitted.codes_.codes.any() or not codes.any()


def test_predict_single_and_many(fitted, data):
    cams = data[1]
    one = fitted.predict(cams[0], level=1)
    many = fitted.predict(cams, level=2)
    assert one.shape == (24, 24) and len(many) == 3
    assert np.array_equal(fitted.predict(cams[0]), many[0])


def test_select_and_extract(fitted):
    value = int(fitted.codes_.codes[0]) & 0xF
    idx = fitted.select(1, value)
    assert 0 in idx
    assert len(fitted.extract(1, value)) == len(idx)


def test_score_in_unit_range(fitted, data):
    _, cams, pyr, _ = data
    assert 0.0 <= fitted.score(pyr, cams, level=1) <= 1.0


def test_fit_accepts_label_stacks(data):
    scene, cams, pyr, _ = data
    est = BinaryGaussianSegmenter(iterations=2, random_pixels=16, balanced_pixels=16)
    assert est.fit(scene, list(pyr.labels), cams).codes_ is not None


def test_fit_transform_matches_fit(data):
    scene, cams, pyr, _ = data
    kw = dict(iterations=3, random_pixels=16, balanced_pixels=16)
    a = BinaryGaussianSegmenter(**kw).fit_transform(scene, pyr, cams)
    b = BinaryGaussianSegmenter(**kw).fit(scene, pyr, cams).transform()
    assert np.array_equal(a, b)


def test_input_validation(data):
    scene, cams, pyr, _ = data
    est = BinaryGaussianSegmenter(iterations=1)
    with pytest.raises(TypeError):
        est.fit("scene.bgs", pyr, cams)
    with pytest.raises(ValueError):
        est.fit(GaussianScene.empty(scene.layout), pyr, cams)
    with pytest.raises(ValueError):
        est.fit(scene, pyr, cams[:2])
    with pytest.raises(TypeError):
        est.fit(scene, pyr, [cams[0], "cam", cams[2]])


def test_level_checks():
    lay = LevelLayout((4, 4))
    assert check_level(2, lay) == 2
    with pytest.raises(ValueError):
        check_level(0, lay)
    with pytest.raises(TypeError):
        check_level(1.5, lay)


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv("BINSPLAT_THREADS", raising=False)
    assert resolve_threads() == 1
    monkeypatch.setenv("BINSPLAT_THREADS", "4")
    assert resolve_threads() == 4
    assert resolve_threads(2) == 2
    monkeypatch.setenv("BINSPLAT_THREADS", "many")
    with pytest.raises(ValueError):
        resolve_threads()
    with pytest.raises(ValueError):
        resolve_threads(0)
