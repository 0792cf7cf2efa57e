import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from knowcl.datacube import (
    Cube,
    GroundTruth,
    SynthSpec,
    load_cube,
    load_ground_truth,
    normalize,
    save_cube,
    save_ground_truth,
    synth_cube,
)

finite_f32 = st.floats(-1e6, 1e6, width=32, allow_nan=False, allow_infinity=False)
shapes = st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))


def test_round_trip_small(tmp_path):
    cube = Cube(np.array([[[0.0, 1.0]], [[2.0, 3.0]]], dtype=np.float32), name="tiny")
    save_cube(cube, tmp_path / "tiny")
    assert load_cube(tmp_path / "tiny") == cube


@settings(max_examples=40, deadline=None)
@given(shape=shapes, data=st.data())
def test_round_trip_bit_exact(tmp_path_factory, shape, data):
    values = data.draw(arrays(np.float32, shape, elements=finite_f32))
    cube = Cube(values, name="c")
    path = tmp_path_factory.mktemp("rt") / "c"
    save_cube(cube, path)
    loaded = load_cube(path)
    assert loaded.values.tobytes() == cube.values.tobytes()


def test_single_value_byte_layout(tmp_path):
    save_cube(Cube(np.full((1, 1, 1), 0.5, dtype=np.float32), name="one"), tmp_path / "one")
    assert (tmp_path / "one.raw").read_bytes() == bytes([0x00, 0x00, 0x00, 0x3F])


def test_band_sequential_order(tmp_path):
    values = np.arange(2 * 2 * 3, dtype=np.float32).reshape(2, 2, 3)
    save_cube(Cube(values), tmp_path / "bsq")
    raw = np.frombuffer((tmp_path / "bsq.raw").read_bytes(), dtype="<f4")
    np.testing.assert_array_equal(raw, np.arange(12, dtype=np.float32))


def test_size_mismatch(tmp_path):
    save_cube(Cube(np.zeros((3, 2, 2), dtype=np.float32)), tmp_path / "c")
    with open(tmp_path / "c.raw", "ab") as fh:
        fh.write(b"\x00" * 4)
    with pytest.raises(ValueError, match="size mismatch"):
        load_cube(tmp_path / "c")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cube(tmp_path / "nope")


def test_nan_rejected_with_index(tmp_path):
    save_cube(Cube(np.zeros((2, 3, 4), dtype=np.float32)), tmp_path / "c")
    raw = np.zeros((2, 3, 4), dtype="<f4")
    raw[1, 2, 0] = np.nan
    (tmp_path / "c.raw").write_bytes(raw.tobytes())
    with pytest.raises(ValueError, match=r"\(1, 2, 0\)"):
        load_cube(tmp_path / "c")


def test_zero_rows_rejected():
    with pytest.raises(ValueError):
        Cube(np.zeros((1, 0, 1), dtype=np.float32))


def test_ground_truth_round_trip(tmp_path):
    gt = GroundTruth(np.array([[0, 1, 2], [2, 2, 0]]), 2, ["a", "b"])
    save_ground_truth(gt, tmp_path / "gt")
    assert load_ground_truth(tmp_path / "gt") == gt
    raw = np.frombuffer((tmp_path / "gt.raw").read_bytes(), dtype="<i4")
    np.testing.assert_array_equal(raw, [0, 1, 2, 2, 2, 0])


def test_ground_truth_label_range():
    with pytest.raises(ValueError):
        GroundTruth(np.array([[0, 3]]), 2)


class TestNormalize:
    def test_linear_band(self):
        out = normalize(Cube(np.array([[[2.0, 4.0, 6.0]]], dtype=np.float32)))
        np.testing.assert_array_equal(out.values.ravel(), [0.0, 0.5, 1.0])

    def test_constant_band(self):
        out = normalize(Cube(np.array([[[7.0, 7.0, 7.0]]], dtype=np.float32)))
        np.testing.assert_array_equal(out.values.ravel(), [0.0, 0.0, 0.0])

    def test_already_normalized(self):
        out = normalize(Cube(np.array([[[0.0, 1.0]]], dtype=np.float32)))
        np.testing.assert_array_equal(out.values.ravel(), [0.0, 1.0])

    @settings(max_examples=60, deadline=None)
    @given(shape=shapes, data=st.data())
    def test_idempotent_and_bounded(self, shape, data):
        values = data.draw(arrays(np.float32, shape, elements=finite_f32))
        once = normalize(Cube(values))
        twice = normalize(once)
        assert once.values.tobytes() == twice.values.tobytes()
        assert once.values.min() >= 0.0 and once.values.max() <= 1.0
        for b in range(shape[0]):
            band = once.values[b]
            if np.all(values[b] == values[b].flat[0]):
                assert np.all(band == 0)
            else:
                assert band.min() == 0.0 and band.max() == 1.0


class TestSynth:
    def test_zero_noise_class_spectra_identical(self):
        cube, gt = synth_cube(SynthSpec(32, 32, 8, 3, 0.4, 0.0, 8, seed=1))
        pix = cube.pixels()
        for c in range(1, 4):
            members = pix[gt.labels.ravel() == c]
            assert np.all(members == members[0])

    def test_deterministic(self):
        spec = SynthSpec(20, 24, 6, 3, 0.3, 0.1, 5, seed=11)
        a, ga = synth_cube(spec)
        b, gb = synth_cube(spec)
        assert a == b and ga == gb

    def test_reference_tiling_counts(self):
        _, gt = synth_cube(SynthSpec(64, 64, 32, 4, 0.5, 0.05, 16, seed=7))
        values, counts = np.unique(gt.labels, return_counts=True)
        assert values.tolist() == [1, 2, 3, 4]
        assert counts.tolist() == [1024] * 4

    def test_blobs_are_single_class(self):
        _, gt = synth_cube(SynthSpec(64, 64, 32, 4, 0.5, 0.05, 16, seed=7))
        for r in range(0, 64, 16):
            for c in range(0, 64, 16):
                assert len(np.unique(gt.labels[r:r + 16, c:c + 16])) == 1

    def test_signature_separation(self):
        sep = 0.6
        cube, gt = synth_cube(SynthSpec(30, 30, 10, 5, sep, 0.0, 6, seed=3))
        pix = cube.pixels().astype(np.float64)
        means = np.stack([pix[gt.labels.ravel() == c][0] for c in range(1, 6)])
        norms = np.linalg.norm(means, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)
        cos = means @ means.T
        off = cos[~np.eye(5, dtype=bool)]
        assert np.all(off <= math.cos(sep) + 1e-6)

    def test_infeasible_separation(self):
        with pytest.raises(ValueError, match="infeasible"):
            synth_cube(SynthSpec(8, 8, 2, 6, 2.0, 0.0, 4))

    @pytest.mark.parametrize("kwargs", [
        dict(num_classes=1), dict(noise_sigma=-1.0), dict(region_scale=0),
    ])
    def test_invalid_spec(self, kwargs):
        base = dict(rows=8, cols=8, bands=4, num_classes=2)
        base.update(kwargs)
        with pytest.raises(ValueError):
            SynthSpec(**base)
