import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cpnn.data import CellAnnotations, CountMatrix, DataError
from cpnn.prototype import (
    FitConfig,
    PrototypeEstimator,
    PrototypeMatrix,
    fit_prototypes,
    normalize_prototype,
    read_dispersion,
    read_prototypes,
    write_fit_sidecar,
    write_prototypes,
)
from cpnn.synth import SynthConfig, generate


def _pm(vals):
    vals = np.atleast_2d(vals)
    return PrototypeMatrix(vals, [f"c{i}" for i in range(vals.shape[0])], [f"g{j}" for j in range(vals.shape[1])])


def test_normalize_examples():
    out = normalize_prototype(_pm([2.0, 3.0, 5.0]))
    assert np.allclose(out.values, [[0.2, 0.3, 0.5]], rtol=0, atol=1e-15)
    again = normalize_prototype(out)
    assert np.max(np.abs(again.values - out.values)) <= 1e-15
    with pytest.raises(DataError):
        normalize_prototype(_pm([0.0, 0.0, 0.0]))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)), elements=st.floats(1e-3, 1e3)),
       st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_normalize_scale_invariant(vals, k):
    a = normalize_prototype(_pm(vals)).values
    b = normalize_prototype(_pm(k * vals)).values
    assert np.max(np.abs(a - b)) <= 1e-15
    assert np.allclose(a.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_prototype_matrix_invariants():
    with pytest.raises(DataError):
        _pm([[-1.0, 2.0]])
    with pytest.raises(DataError):
        PrototypeMatrix([[0.3, 0.3]], ["a"], ["x", "y"], normalized=True)


def test_single_type_constant_counts_recover_mean():
    E = np.tile([[7, 3, 12]], (40, 1))
    est = PrototypeEstimator().fit(E, np.zeros(40, dtype=int))
    assert np.allclose(est.raw_prototypes_.values[0], [7, 3, 12], rtol=0.01)
    assert est.nuisance_.s[0] == 1.0


def test_batch_scale_ratio_recovered():
    ds = generate(SynthConfig(C=3, G=40, D_batch=2, n_cells=400, batch_scales=(1.0, 2.0), batch_shift=0.0,
                              n_slides=2, seed=1))
    _, nuis, _, _ = fit_prototypes(ds.sc, ds.annotations)
    assert 1.9 <= nuis.s[1] / nuis.s[0] <= 2.1


def test_zero_batch_effects_match_empirical_means():
    ds = generate(SynthConfig(C=3, G=50, D_batch=1, n_cells=300, batch_scale_sigma=0.0, batch_shift=0.0,
                              n_slides=2, seed=2))
    _, _, _, norm = fit_prototypes(ds.sc, ds.annotations)
    ct = ds.annotations.cell_type
    for c in range(3):
        emp = ds.sc.values[ct == c].mean(axis=0)
        emp = emp / emp.sum()
        cos = norm.values[c] @ emp / (np.linalg.norm(norm.values[c]) * np.linalg.norm(emp))
        assert cos >= 0.99


def test_fit_recovers_small_synthetic_prototypes():
    ds = generate(SynthConfig(C=3, G=60, D_batch=2, n_cells=600, n_slides=2, seed=3))
    est = PrototypeEstimator().fit(ds.sc, ds.annotations)
    T = ds.truth.true_prototypes
    for c in range(3):
        assert np.corrcoef(est.transform()[c], T[c])[0, 1] >= 0.95
    # NLL milestones are non-increasing up to a small relative tolerance
    nll = np.array([v for _, v in est.nll_history_])
    assert np.all(nll[1:] <= nll[:-1] * (1 + 1e-6))
    assert np.all(est.dispersion_.theta_sc > 0)
    assert np.all(est.nuisance_.b >= 0)


def test_mismatched_annotations_rejected():
    sc = CountMatrix(np.ones((3, 2), dtype=int), ["a", "b", "c"], ["x", "y"])
    with pytest.raises(DataError):
        fit_prototypes(sc, CellAnnotations([0, 1], [0, 0], ["t0", "t1"]))


def test_small_type_warns():
    E = np.array([[1, 2], [3, 4], [5, 6]])
    with pytest.warns(RuntimeWarning, match="fewer than 2"):
        PrototypeEstimator(epochs=5).fit(E, [0, 0, 1])


def test_prototype_files_round_trip(tmp_path):
    raw = _pm(np.array([[1.5, 2.25, 0.1], [3.0, 1e-9, 7.0]]))
    norm = normalize_prototype(raw)
    write_prototypes(norm, tmp_path / "p.csv")
    back = read_prototypes(tmp_path / "p.csv")
    assert back.normalized and np.array_equal(back.values, norm.values)
    assert back.gene_ids == norm.gene_ids and back.cell_type_names == norm.cell_type_names
    write_prototypes(raw, tmp_path / "r.csv")
    assert not read_prototypes(tmp_path / "r.csv").normalized


def test_sidecar_round_trip(tmp_path):
    from cpnn.prototype import BatchNuisance, ScDispersion

    disp = ScDispersion(np.array([0.5, 2.0, 30.0]))
    write_fit_sidecar(tmp_path / "fit.json", BatchNuisance(np.array([1.0, 1.3]), np.zeros((2, 3))), disp,
                      ["a", "b", "c"], ["x", "y"])
    got, genes = read_dispersion(tmp_path / "fit.json")
    assert genes == ("a", "b", "c")
    assert np.array_equal(got.theta_sc, disp.theta_sc)


def test_fit_is_deterministic():
    ds = generate(SynthConfig(C=2, G=20, D_batch=2, n_cells=100, n_slides=2, seed=5))
    a = fit_prototypes(ds.sc, ds.annotations, FitConfig(epochs=50))[0].values
    b = fit_prototypes(ds.sc, ds.annotations, FitConfig(epochs=50))[0].values
    assert a.tobytes() == b.tobytes()
