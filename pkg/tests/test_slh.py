import numpy as np
import pytest

from hjblearn import dataset as ds
from hjblearn import slh
from hjblearn.errors import ValidationError
from hjblearn.nn import TrainConfig
from hjblearn.problems import BoundaryConditionSet


@pytest.fixture(scope="module")
def brach_data():
    res = ds.generate(ds.DatasetManifest.default("brachistochrone", 120, seed=11))
    return ds.split(res.records, (0.8, 0.2), seed=0)


@pytest.fixture(scope="module")
def brach_model(brach, brach_data):
    train, test = brach_data
    return slh.train_slh(brach, train, test, cfg=TrainConfig(optimizer="lm", epochs=200))


@pytest.fixture(scope="module")
def hyper_data():
    manifest = ds.DatasetManifest.default("hypersensitive", 12, seed=11, n_per_phase=1)
    res = ds.generate(manifest)
    return res.records, manifest


def test_brachistochrone_fit(brach, brach_model, brach_data):
    model, log = brach_model
    assert log.best_test_mse < 1e-8
    assert len(model.nets) == 1 and not model.segmented
    rec = brach_data[0][0]
    pred = slh.predict(model, rec.bc(1))
    assert abs(pred.guess.lambda0[0] - rec.label[0]) < 1e-3
    assert not pred.out_of_distribution


def test_brachistochrone_solve(brach, brach_model):
    model, _ = brach_model
    bc = BoundaryConditionSet([0.0], [1.0], 1.0)
    res = slh.solve(model, brach, bc)
    assert res.residual < 1e-2
    assert res.objective == pytest.approx(0.5828954631547426, rel=1e-2)


def test_prediction_is_deterministic(brach_model):
    model, _ = brach_model
    bc = BoundaryConditionSet([0.0], [1.3], 0.9)
    a = slh.predict(model, bc).guess.lambda0
    b = slh.predict(model, bc).guess.lambda0
    np.testing.assert_array_equal(a, b)


def test_out_of_distribution_warning(brach_model):
    model, _ = brach_model
    pred = slh.predict(model, BoundaryConditionSet([0.0], [10.0], 1.0))
    assert pred.out_of_distribution
    assert "input 1" in pred.warnings[0]


def test_model_round_trip(tmp_path, brach_model):
    model, _ = brach_model
    slh.save_model(model, tmp_path / "m")
    back = slh.load_model(tmp_path / "m")
    bc = BoundaryConditionSet([0.0], [1.7], 1.2)
    np.testing.assert_array_equal(slh.predict(back, bc).guess.lambda0,
                                  slh.predict(model, bc).guess.lambda0)


def test_wrong_problem_rejected(hyper, brach_data):
    with pytest.raises(ValidationError):
        slh.train_slh(hyper, brach_data[0], brach_data[1])


def test_segmented_records_rejected_by_single_trainer(hyper, hyper_data):
    records, _ = hyper_data
    with pytest.raises(ValidationError, match="segmented"):
        slh.train_slh(hyper, records)


def test_degenerate_topology_trains_three_nets(hyper, hyper_data):
    records, manifest = hyper_data
    model, logs = slh.train_slh_segmented(hyper, records, [], manifest,
                                          cfg=TrainConfig(optimizer="lm", epochs=100))
    assert len(model.nets) == 3 and len(logs) == 3
    rec = records[0]
    plan = slh.predict(model, rec.bc(1)).plan
    assert plan.n_segments == 3 and plan.pinned == 1
    assert np.max(np.abs(plan.guesses - rec.label)) < 1e-3


def test_inconsistent_topology_rejected(hyper, hyper_data):
    records, manifest = hyper_data
    bad = ds.LabeledRecord("hypersensitive", records[0].input, np.zeros((5, 1)),
                           dict(records[0].meta))
    with pytest.raises(ValidationError, match="segments"):
        slh.train_slh_segmented(hyper, records + [bad], [], manifest)
