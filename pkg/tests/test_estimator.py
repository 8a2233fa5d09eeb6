import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from framepot.data import lj_oracle
from framepot.estimator import FramePotentialRegressor
from framepot.geometry import AtomicSystem
from framepot import validation


def dimers(n=6):
    frames = []
    for r in np.linspace(3.5, 4.6, n):
        system = AtomicSystem([18, 18], [[0.0, 0.0, 0.0], [r, 0.0, 0.0]])
        frames.append(lj_oracle(system, epsilon=0.0104, sigma=3.4, cutoff=5.0))
    return frames


def small_regressor(**overrides):
    params = dict(num_layers=1, hidden_channels=8, num_heads=2, num_basis=4,
                  cutoff=5.0, epochs=2, batch_size=3, seed=0)
    params.update(overrides)
    return FramePotentialRegressor(**params)


def test_get_params_round_trip_and_clone():
    reg = small_regressor(lr=1e-3)
    params = reg.get_params()
    assert params["hidden_channels"] == 8
    assert params["lr"] == 1e-3
    twin = clone(reg)
    assert twin.get_params() == params
    reg.set_params(epochs=5)
    assert reg.epochs == 5


def test_predict_requires_fit():
    reg = small_regressor()
    with pytest.raises(NotFittedError):
        reg.predict(dimers(2))


def test_fit_predict_score_shapes():
    frames = dimers(6)
    reg = small_regressor().fit(frames)
    energies = reg.predict(frames)
    assert energies.shape == (6,)
    forces = reg.predict_forces(frames)
    assert all(f.shape == (2, 3) for f in forces)
    assert reg.score(frames) <= 0.0
    # bare systems work for prediction too
    bare = [f.system for f in frames]
    np.testing.assert_array_equal(reg.predict(bare), energies)


def test_fit_rejects_explicit_targets():
    frames = dimers(3)
    reg = small_regressor()
    with pytest.raises(ValueError):
        reg.fit(frames, y=[1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        reg.score(frames, y=[0.0])


def test_fit_is_seed_deterministic():
    frames = dimers(4)
    a = small_regressor().fit(frames)
    b = small_regressor().fit(frames)
    np.testing.assert_array_equal(a.predict(frames), b.predict(frames))


def test_init_only_supports_prediction():
    reg = small_regressor().init_only()
    out = reg.predict_full(dimers(2), stress=False)
    assert len(out) == 2
    assert np.isfinite(out[0].energy)


def test_ensure_frames_rejects_junk():
    with pytest.raises(ValueError):
        validation.ensure_frames([])
    with pytest.raises(TypeError):
        validation.ensure_frames([object()])
    with pytest.raises(TypeError):
        validation.ensure_systems([3.14])


def test_species_flags_warn_once():
    frames = dimers(2)
    known = validation.fitted_species(frames)
    np.testing.assert_array_equal(known, [18])
    odd = AtomicSystem([18, 26], [[0.0, 0.0, 0.0], [3.9, 0.0, 0.0]])
    with pytest.warns(UserWarning, match="26"):
        flags = validation.flag_unknown_species(
            [frames[0].system, odd], known)
    np.testing.assert_array_equal(flags, [False, True])
    flags = validation.flag_unknown_species([frames[0].system], known)
    np.testing.assert_array_equal(flags, [False])
