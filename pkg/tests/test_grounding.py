"""Object selection and the grounding feature encoder."""

import numpy as np
import pytest

from mitvg.data import ImageFeatures
from mitvg.errors import DataError
from mitvg.grounding import GroundingEncoder, select_grounding
from mitvg.tensor import Tape, Tensor, backward, grad_check, sum_all


def _image(k=4, v=6, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return ImageFeatures(7, rng.normal(size=(k, v)).astype(dtype))


def test_select_single_index_returns_that_row():
    img = _image()
    out = select_grounding(img, [2])
    assert out.shape == (1, 6)
    np.testing.assert_array_equal(out[0], img.matrix[2])


def test_select_empty_returns_all_rows():
    img = _image()
    np.testing.assert_array_equal(select_grounding(img, []), img.matrix)


def test_select_duplicate_indices_allowed():
    img = _image()
    out = select_grounding(img, [1, 1])
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[0], img.matrix[1])


def test_select_bad_index_raises():
    with pytest.raises(DataError, match="index 9"):
        select_grounding(_image(k=4), [9])


def _encoder(v=6, m=8, layers=1, seed=3, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return GroundingEncoder(v, m, d_ff=16, heads=2, n_layers=layers, rng=rng, dtype=dtype)


def test_output_shape_tracks_selection():
    enc = _encoder()
    img = _image(dtype=np.float64)
    assert enc.encode(img, [2], use_vg=True).shape == (1, 8)
    assert enc.encode(img, [0, 3, 1], use_vg=True).shape == (3, 8)
    assert enc.encode(img, [], use_vg=True).shape == (4, 8)


def test_zero_layers_is_projection_only():
    enc = _encoder(layers=0)
    img = _image(dtype=np.float64)
    out = enc.encode(img, [], use_vg=True)
    expected = img.matrix @ enc.proj.weight.data + enc.proj.bias.data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_permutation_equivariance():
    enc = _encoder(layers=2)
    img = _image(k=5, dtype=np.float64)
    perm = [3, 0, 4, 1, 2]
    base = enc(Tensor(img.matrix, dtype=np.float64)).data
    permuted = enc(Tensor(img.matrix[perm], dtype=np.float64)).data
    np.testing.assert_allclose(permuted, base[perm], atol=1e-6)


def test_ablation_arm_matches_empty_grounding():
    enc = _encoder()
    img = _image(dtype=np.float64)
    ablated = enc.encode(img, [2], use_vg=False)
    fallback = enc.encode(img, [], use_vg=True)
    np.testing.assert_array_equal(ablated.data, fallback.data)


def test_distinct_objects_give_distinct_encodings():
    enc = _encoder()
    img = _image(dtype=np.float64)
    a = enc.encode(img, [2], use_vg=True).data
    b = enc.encode(img, [3], use_vg=True).data
    assert not np.allclose(a, b)


def test_deterministic_given_seed():
    img = _image(dtype=np.float64)
    a = _encoder(seed=11).encode(img, [1], use_vg=True).data
    b = _encoder(seed=11).encode(img, [1], use_vg=True).data
    np.testing.assert_array_equal(a, b)


def test_gradients_reach_all_parameters():
    enc = _encoder(layers=1)
    img = _image(dtype=np.float64)
    params = dict(enc.named_parameters("g"))
    with Tape() as tape:
        loss = sum_all(enc.encode(img, [0, 2], use_vg=True))
        backward(loss, tape)
    for name, p in params.items():
        assert p.grad is not None, name


def test_grad_check_projection_and_stack():
    enc = _encoder(layers=1)
    img = _image(k=3, dtype=np.float64)
    params = [p for _, p in enc.named_parameters("g")]
    err = grad_check(lambda: sum_all(enc.encode(img, [1], use_vg=True)), params)
    assert err < 1e-6
