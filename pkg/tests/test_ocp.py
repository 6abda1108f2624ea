import numpy as np
import pytest

from ocnet.errors import ContractError, DimensionError
from ocnet.gradcheck import run_check
from ocnet.ocp import (
    ObjectContextMap,
    ObjectContextPooling,
    object_context_aggregate,
    object_context_estimate,
    ocp_forward,
)
from ocnet.tensor import Tensor

from oracles import brute_force_aggregate, brute_force_context


def _ocp(rng, c=3, key=2, out=4):
    # untied, so a query/key mix-up cannot hide behind a symmetric similarity
    return ObjectContextPooling(c, key, out, rng, tied_init=False).to(np.float64)


def _weights(p):
    return p.f_q.weight.data[:, :, 0, 0], p.f_k.weight.data[:, :, 0, 0], p.phi.weight.data[:, :, 0, 0]


def test_constant_input_gives_uniform_rows(rng):
    p = _ocp(rng)
    x = Tensor(np.broadcast_to(rng.standard_normal((1, 3, 1, 1)), (1, 3, 3, 4)).copy())
    w = object_context_estimate(x, p).weights.data
    np.testing.assert_allclose(w, 1 / 12, atol=1e-12)


def test_single_pixel_weight_is_one(rng):
    w = object_context_estimate(Tensor(rng.standard_normal((2, 3, 1, 1))), _ocp(rng)).weights.data
    np.testing.assert_array_equal(w, np.ones((2, 1, 1)))


def test_two_by_two_identity_transforms_match_double_loop():
    rng = np.random.default_rng(5)
    p = _ocp(rng, c=2, key=2, out=2)
    eye = np.eye(2).reshape(2, 2, 1, 1)
    for conv in (p.f_q, p.f_k, p.phi):
        conv.weight.data[...] = eye
    x = np.array([[[0.5, -1.0], [2.0, 0.0]], [[1.0, 0.3], [-0.7, 0.2]]])
    w = object_context_estimate(Tensor(x[None]), p).weights.data[0]
    np.testing.assert_allclose(w, brute_force_context(x, np.eye(2), np.eye(2)), atol=1e-6)


def test_one_hot_row_selects_value(rng):
    p = _ocp(rng)
    x = rng.standard_normal((1, 3, 2, 3))
    onehot = np.zeros((1, 6, 6))
    onehot[0, :, 4] = 1.0
    out = object_context_aggregate(Tensor(x), ObjectContextMap(Tensor(onehot), 2, 3), p).data[0]
    phi = _weights(p)[2] @ x[0, :, 1, 1]
    np.testing.assert_allclose(out, np.broadcast_to(phi[:, None, None], out.shape), atol=1e-12)


def test_uniform_rows_give_spatial_mean(rng):
    p = _ocp(rng)
    x = rng.standard_normal((1, 3, 2, 3))
    uniform = ObjectContextMap(Tensor(np.full((1, 6, 6), 1 / 6)), 2, 3)
    out = object_context_aggregate(Tensor(x), uniform, p).data[0]
    mean = (_weights(p)[2] @ x[0].reshape(3, -1)).mean(axis=1)
    np.testing.assert_allclose(out, np.broadcast_to(mean[:, None, None], out.shape), atol=1e-12)


def test_random_aggregate_matches_brute_force(rng):
    p = _ocp(rng)
    x = rng.standard_normal((1, 3, 3, 2))
    w = rng.random((1, 6, 6))
    w /= w.sum(axis=-1, keepdims=True)
    out = object_context_aggregate(Tensor(x), ObjectContextMap(Tensor(w), 3, 2), p).data[0]
    np.testing.assert_allclose(out, brute_force_aggregate(x[0], w[0], _weights(p)[2]), atol=1e-6)


def test_forward_on_3x4_matches_composed_oracles(rng):
    p = _ocp(rng)
    x = rng.standard_normal((1, 3, 3, 4))
    out = ocp_forward(Tensor(x), p)[0].data[0]
    wq, wk, wv = _weights(p)
    ref = brute_force_aggregate(x[0], brute_force_context(x[0], wq, wk), wv)
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_constant_input_constant_output(rng):
    p = _ocp(rng)
    pixel = rng.standard_normal(3)
    x = Tensor(np.broadcast_to(pixel[None, :, None, None], (1, 3, 4, 4)).copy())
    out = p(x).data[0]
    phi = _weights(p)[2] @ pixel
    np.testing.assert_allclose(out, np.broadcast_to(phi[:, None, None], out.shape), atol=1e-12)


def test_single_pixel_output_is_phi(rng):
    p = _ocp(rng)
    x = rng.standard_normal((1, 3, 1, 1))
    np.testing.assert_allclose(p(Tensor(x)).data[0, :, 0, 0], _weights(p)[2] @ x[0, :, 0, 0], atol=1e-12)


def test_permutation_equivariance(rng):
    p = _ocp(rng)
    x = rng.standard_normal((2, 3, 3, 5))
    perm = rng.permutation(15)

    def permute(a):
        flat = a.reshape(a.shape[0], a.shape[1], -1)[:, :, perm]
        return flat.reshape(a.shape)

    np.testing.assert_allclose(p(Tensor(permute(x))).data, permute(p(Tensor(x)).data), atol=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_rows_stochastic_and_output_in_hull(seed):
    rng = np.random.default_rng(seed)
    p = _ocp(rng)
    x = rng.standard_normal((1, 3, 4, 3)) * 3
    out, ctx = ocp_forward(Tensor(x), p, keep_map=True)
    w = ctx.weights.data
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
    phi = np.einsum("oc,chw->ohw", _weights(p)[2], x[0]).reshape(4, -1)
    flat = out.data[0].reshape(4, -1)
    assert (flat >= phi.min(axis=1, keepdims=True) - 1e-9).all()
    assert (flat <= phi.max(axis=1, keepdims=True) + 1e-9).all()


def test_map_row_helper(rng):
    p = _ocp(rng)
    p.keep_map = True
    p(Tensor(rng.standard_normal((1, 3, 2, 3))))
    row = p.last_map.row(0, 1, 2)
    assert row.shape == (2, 3)
    np.testing.assert_array_equal(row.ravel(), p.last_map.weights.data[0, 5])


def test_map_not_kept_by_default(rng):
    p = _ocp(rng)
    p(Tensor(rng.standard_normal((1, 3, 2, 2))))
    assert p.last_map is None


def test_empty_map_rejected(rng):
    with pytest.raises(ContractError):
        object_context_estimate(Tensor(np.zeros((1, 3, 0, 4))), _ocp(rng))


def test_channel_and_size_mismatch(rng):
    p = _ocp(rng)
    with pytest.raises(DimensionError):
        object_context_estimate(Tensor(np.zeros((1, 2, 2, 2))), p)
    bad = ObjectContextMap(Tensor(np.full((1, 4, 4), 0.25)), 2, 2)
    with pytest.raises(DimensionError):
        object_context_aggregate(Tensor(np.zeros((1, 3, 3, 3))), bad, p)


def test_scaled_similarity_divides_by_root_key(rng):
    plain = _ocp(np.random.default_rng(2), key=4)
    scaled = ObjectContextPooling(3, 4, 4, np.random.default_rng(2), scaled=True, tied_init=False).to(np.float64)
    x = Tensor(rng.standard_normal((1, 3, 2, 2)))
    q = np.einsum("kc,cn->nk", _weights(plain)[0], x.data[0].reshape(3, -1))
    k = np.einsum("kc,cn->kn", _weights(plain)[1], x.data[0].reshape(3, -1))
    sim = q @ k / 2.0
    ref = np.exp(sim - sim.max(axis=1, keepdims=True))
    ref /= ref.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(object_context_estimate(x, scaled).weights.data[0], ref, atol=1e-12)


def test_ocp_gradients():
    report = run_check("ocp", seed=0)
    assert report.passed, report.lines()


def test_key_transform_starts_as_copy_of_query(rng):
    p = ObjectContextPooling(5, 3, 4, rng)
    np.testing.assert_array_equal(p.f_k.weight.data, p.f_q.weight.data)
    assert p.f_k.weight.data is not p.f_q.weight.data


def test_tied_start_favours_alike_pixels(rng):
    # two groups of near-identical features: each pixel puts most mass on its own group
    p = ObjectContextPooling(4, 4, 4, rng).to(np.float64)
    a, b = rng.standard_normal(4) * 2, rng.standard_normal(4) * 2
    feats = np.stack([a, a, a, b, b, b]) + 0.01 * rng.standard_normal((6, 4))
    w = object_context_estimate(Tensor(feats.T.reshape(1, 4, 2, 3)), p).weights.data[0]
    assert (w[:3, :3].sum(axis=1) > 0.5).all() and (w[3:, 3:].sum(axis=1) > 0.5).all()


def test_untied_transforms_differ(rng):
    p = ObjectContextPooling(5, 3, 4, rng, tied_init=False)
    assert not np.array_equal(p.f_k.weight.data, p.f_q.weight.data)
