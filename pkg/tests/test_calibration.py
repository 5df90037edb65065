import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from calibration import (
    ColorPatch,
    TransformationMatrix,
    apply_matrix,
    load_matrix,
    load_patches_csv,
    reconstruct_spectrum,
    save_matrix,
    validate_calibration,
    wiener_fit,
    write_patches_csv,
    write_report_csv,
)
from spectral import ReflectanceSpectrum
from utils.errors import DegenerateInputError, FormatError, RejectedInputError


def _exact_linear_patches(rng, n=30):
    m0 = rng.uniform(0.0, 0.6, size=(24, 3)) / 3.0
    patches = []
    for i in range(n):
        c = rng.uniform(0.0, 1.0, size=3)
        patches.append(ColorPatch(f"X{i:02d}", c, ReflectanceSpectrum(m0 @ c)))
    return m0, patches


def _normal_equations_oracle(patches, lam):
    c = np.array([p.rgb_linear for p in patches])
    r = np.array([p.reference.values for p in patches])
    return np.linalg.lstsq(c.T @ c + lam * np.eye(3), c.T @ r, rcond=None)[0].T


def test_exact_linear_model_is_recovered(rng):
    m0, patches = _exact_linear_patches(rng)
    m = wiener_fit(patches, lam=0.0)
    assert np.allclose(m.rows, m0, atol=1e-10)
    for p in patches:
        assert np.max(np.abs(reconstruct_spectrum(m, p.rgb_linear).values - p.reference.values)) <= 1e-10
    assert m.training_rmse <= 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_fit_matches_normal_equations_oracle(seed):
    from phantom import synth_patch_set

    train, _ = synth_patch_set(basis_dim=6, n_train=24, n_holdout=1, seed=seed)
    m = wiener_fit(train, lam=1e-6)
    oracle = _normal_equations_oracle(train, 1e-6)
    assert np.max(np.abs(m.rows - oracle)) <= 1e-10 * max(1.0, np.max(np.abs(oracle)))


def test_fit_does_not_depend_on_patch_order(default_patches):
    train, _ = default_patches
    a = wiener_fit(train)
    b = wiener_fit(list(reversed(train)))
    assert a.rows.tobytes() == b.rows.tobytes()


def _noisy_patches(seed, n):
    """Patches whose reflectance is unrelated to rgb, so every fit leaves a residual."""
    rng = np.random.default_rng(seed)
    return [
        ColorPatch(f"N{i:02d}", rng.uniform(0.05, 1.0, size=3), ReflectanceSpectrum(rng.uniform(0.0, 1.0, size=24)))
        for i in range(n)
    ]


def _pooled_residual(m, patches):
    c = np.array([p.rgb_linear for p in patches])
    r = np.array([p.reference.values for p in patches])
    return float(np.sqrt(np.mean((apply_matrix(m, c) - r) ** 2)))


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 10.0), st.floats(0.0, 10.0))
def test_larger_lambda_never_grows_the_matrix(seed, lam_a, lam_b):
    patches = _noisy_patches(seed, 12)
    small, large = sorted((lam_a, lam_b))
    norm_small = np.linalg.norm(wiener_fit(patches, lam=small).rows)
    norm_large = np.linalg.norm(wiener_fit(patches, lam=large).rows)
    assert norm_large <= norm_small * (1 + 1e-10)


@given(st.integers(0, 2**32 - 1), st.integers(4, 40))
def test_vanishing_lambda_is_least_squares(seed, n):
    patches = _noisy_patches(seed, n)
    c = np.array([p.rgb_linear for p in patches])
    r = np.array([p.reference.values for p in patches])
    lstsq = np.linalg.lstsq(c, r, rcond=None)[0].T
    assert np.allclose(wiener_fit(patches, lam=0.0).rows, lstsq, rtol=1e-8, atol=1e-8)
    assert np.allclose(wiener_fit(patches, lam=1e-12).rows, lstsq, rtol=1e-6, atol=1e-6)


@given(
    st.integers(0, 2**32 - 1),
    hnp.arrays(np.float64, (24, 3), elements=st.floats(-0.05, 0.05)).filter(lambda d: np.abs(d).max() > 1e-6),
)
def test_unregularized_fit_beats_any_perturbation(seed, delta):
    patches = _noisy_patches(seed, 16)
    fitted = wiener_fit(patches, lam=0.0)
    moved = TransformationMatrix(rows=fitted.rows + delta)
    assert _pooled_residual(fitted, patches) <= _pooled_residual(moved, patches) + 1e-12


def test_default_lambda_is_scaled_trace(default_patches):
    train, _ = default_patches
    c = np.array([p.rgb_linear for p in train])
    assert wiener_fit(train).lam == pytest.approx(1e-6 * np.trace(c.T @ c) / 3, rel=1e-12)


def test_bias_adds_a_column(default_patches):
    train, _ = default_patches
    m = wiener_fit(train, bias=True)
    assert m.rows.shape == (24, 4) and m.cols == 4


def test_too_few_patches_rejected(default_patches):
    train, _ = default_patches
    with pytest.raises(RejectedInputError):
        wiener_fit(train[:2])
    with pytest.raises(RejectedInputError):
        wiener_fit(train, lam=-1.0)


def test_singular_system_is_degenerate():
    same = [ColorPatch(f"S{i}", [0.2, 0.4, 0.6], ReflectanceSpectrum(np.full(24, 0.5))) for i in range(5)]
    with pytest.raises(DegenerateInputError, match="larger lambda"):
        wiener_fit(same, lam=0.0)


def test_black_maps_to_zero_spectrum(default_patches):
    m = wiener_fit(default_patches[0])
    assert np.all(reconstruct_spectrum(m, [0, 0, 0]).values == 0.0)


def test_reconstruction_matches_matrix_vector_oracle(rng):
    m = TransformationMatrix(rows=rng.uniform(-0.5, 1.5, size=(24, 3)))
    rgb = np.array([0.2, 0.5, 0.3])
    pre_clamp = apply_matrix(m, rgb[None, :])[0]
    assert np.max(np.abs(pre_clamp - m.rows @ rgb)) <= 1e-12
    assert np.array_equal(reconstruct_spectrum(m, rgb).values, np.clip(pre_clamp, 0, 1))


@pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 1.0])
def test_pre_clamp_map_is_homogeneous(rng, alpha):
    m = TransformationMatrix(rows=rng.uniform(-1, 1, size=(24, 3)))
    rgb = rng.uniform(0, 1, size=(1, 3))
    assert np.allclose(apply_matrix(m, alpha * rgb), alpha * apply_matrix(m, rgb), atol=1e-12)


def test_non_finite_rgb_rejected(default_patches):
    m = wiener_fit(default_patches[0])
    with pytest.raises(RejectedInputError):
        reconstruct_spectrum(m, [np.nan, 0.1, 0.1])


def test_noise_free_small_basis_holdout_is_exact(exact_patches):
    train, holdout = exact_patches
    report = validate_calibration(wiener_fit(train, lam=0.0), holdout)
    assert report.max_rmse <= 1e-8


def test_default_fixture_holdout_rmse_within_tolerance(default_patches):
    train, holdout = default_patches
    report = validate_calibration(wiener_fit(train), holdout, training_ids=[p.id for p in train])
    assert report.mean_rmse <= 0.05
    assert report.max_rmse >= report.mean_rmse >= 0.0
    assert report.mean_rmse == pytest.approx(np.mean([v for _, v in report.per_patch_rmse]), abs=1e-15)
    assert report.membership(holdout[0].id) == "holdout"


def test_validation_on_training_set_of_exact_model(rng):
    _, patches = _exact_linear_patches(rng)
    report = validate_calibration(wiener_fit(patches, lam=0.0), patches, training_ids=[p.id for p in patches])
    assert report.mean_rmse <= 1e-10
    assert report.membership(patches[0].id) == "train"


def test_empty_holdout_rejected(default_patches):
    with pytest.raises(RejectedInputError):
        validate_calibration(wiener_fit(default_patches[0]), [])


def test_patch_csv_roundtrip(tmp_path, default_patches):
    train, _ = default_patches
    path = tmp_path / "patches.csv"
    write_patches_csv(path, train)
    loaded = load_patches_csv(path)
    assert [p.id for p in loaded] == [p.id for p in train]
    assert all(np.array_equal(a.rgb_linear, b.rgb_linear) for a, b in zip(loaded, train))
    assert wiener_fit(loaded).rows.tobytes() == wiener_fit(train).rows.tobytes()


def test_patch_csv_with_wrong_header_is_format_error(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,r,g\nA,0.1,0.2\n")
    with pytest.raises(FormatError):
        load_patches_csv(path)


def test_matrix_json_roundtrip(tmp_path, default_patches):
    m = wiener_fit(default_patches[0], bias=True)
    save_matrix(tmp_path / "m.json", m)
    loaded = load_matrix(tmp_path / "m.json")
    assert loaded.rows.tobytes() == m.rows.tobytes()
    assert loaded.bias and loaded.checksum() == m.checksum()


def test_report_csv_labels_membership(tmp_path, default_patches):
    train, holdout = default_patches
    m = wiener_fit(train)
    report = validate_calibration(m, train[:2] + holdout[:3], training_ids=[p.id for p in train])
    write_report_csv(tmp_path / "r.csv", report)
    df = pd.read_csv(tmp_path / "r.csv")
    assert list(df.columns) == ["id", "rmse", "set"]
    assert list(df["set"]) == ["train", "train", "holdout", "holdout", "holdout"]
