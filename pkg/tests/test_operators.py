import numpy as np
import pytest

from dispnet import autodiff as ad
from dispnet.autodiff import Tape, Tensor, backward
from dispnet.constants import ALPHA, BETA
from dispnet.errors import ContractError
from dispnet.operators import (
    DisplacementBank,
    FeatureSet,
    UpBank,
    activation,
    activations,
    closest_distance,
    feature_extraction,
    g_aggregate,
    latent_max_pool,
    neighbor_pooling,
    pooling_selection,
    upsampling,
)
from dispnet.spatial import NeighborIndex


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def straight_line_extraction(points, deltas, sigmas, rhos, alpha, beta):
    """Entrywise evaluation with an exhaustive minimum over every point"""
    n = points.shape[0]
    d_out, s, _ = deltas.shape
    out = np.zeros((n, d_out))
    for a in range(n):
        for b in range(d_out):
            total = 0.0
            for i in range(s):
                query = points[a] + deltas[b, i]
                d = min(np.linalg.norm(query - points[j]) for j in range(n))
                total += sigmas[b, i] * np.tanh(alpha / (d + beta))
            out[a, b] = total + rhos[b] @ points[a]
    return out


def test_closest_distance_self_match(rng):
    candidates = FeatureSet.from_points(rng.normal(size=(6, 3)))
    distance, selected = closest_distance(candidates.data[2], np.zeros(3), candidates, k=None)
    assert distance.item() == 0.0
    assert selected == 2


def test_closest_distance_with_index(rng):
    points = rng.normal(size=(40, 3))
    candidates = FeatureSet.from_points(points)
    distance, selected = closest_distance(points[7], np.zeros(3), candidates, index=NeighborIndex(points), k=4)
    assert (distance.item(), selected) == (0.0, 7)


def test_closest_distance_exact_displacement():
    candidates = FeatureSet.from_points([[0.0, 0, 0], [1.0, 0, 0]])
    distance, selected = closest_distance(np.zeros(3), np.array([1.0, 0, 0]), candidates, k=None)
    assert distance.item() == 0.0
    assert selected == 1


def test_closest_distance_overshoot():
    candidates = FeatureSet.from_points([[0.0, 0, 0], [0, 0, 1.0]])
    distance, selected = closest_distance(np.zeros(3), np.array([0, 0, 5.0]), candidates, k=None)
    assert distance.item() == pytest.approx(4.0)
    assert selected == 1


def test_closest_distance_dimension_mismatch():
    candidates = FeatureSet.from_points(np.zeros((2, 3)))
    with pytest.raises(ContractError):
        closest_distance(np.zeros(2), np.zeros(2), candidates, k=None)


def test_g_aggregate_zero_displacement():
    candidates = FeatureSet.from_points([[0.0, 0, 0], [1.0, 1, 1]])
    g = g_aggregate(np.zeros(3), np.zeros((1, 3)), np.ones(1), candidates, alpha=1.0, beta=1.0, k=None)
    assert g.item() == pytest.approx(0.761594, abs=1e-6)


def test_g_aggregate_exact_hit():
    candidates = FeatureSet.from_points([[0.0, 0, 0], [1.0, 0, 0]])
    g = g_aggregate(np.zeros(3), np.array([[1.0, 0, 0]]), np.array([2.0]), candidates, alpha=1.0, beta=1e-3, k=None)
    assert g.item() == pytest.approx(2.0)


def test_g_aggregate_matches_straight_line(rng):
    points = rng.normal(size=(7, 3))
    deltas = rng.uniform(-0.5, 0.5, size=(2, 3))
    sigmas = rng.normal(size=2)
    g = g_aggregate(points[3], deltas, sigmas, FeatureSet.from_points(points), alpha=1.0, beta=1e-3, k=None)
    expected = sum(
        sigmas[i] * np.tanh(1.0 / (min(np.linalg.norm(points[3] + deltas[i] - p) for p in points) + 1e-3))
        for i in range(2))
    assert g.item() == pytest.approx(expected, abs=1e-12)


def test_g_aggregate_rejects_nonpositive_beta():
    with pytest.raises(ContractError):
        g_aggregate(np.zeros(3), np.zeros((1, 3)), np.ones(1), FeatureSet.from_points(np.zeros((1, 3))), beta=0.0)


def test_feature_extraction_matches_straight_line(rng):
    points = rng.normal(size=(4, 3))
    bank = DisplacementBank.initialize(rng, d_in=3, d_out=3, s=2)
    fout = feature_extraction(FeatureSet.from_points(points), bank, k=None)
    expected = straight_line_extraction(points, bank.deltas.data, bank.sigmas.data, bank.rhos.data, bank.alpha,
                                        bank.beta)
    np.testing.assert_allclose(fout.data, expected, rtol=0, atol=1e-12)


def test_batched_extraction_agrees_with_single_anchor(rng):
    points = rng.normal(size=(30, 3))
    fin = FeatureSet.from_points(points)
    bank = DisplacementBank.initialize(rng, d_in=3, d_out=4, s=3)
    index = NeighborIndex(points)
    fout = feature_extraction(fin, bank, k=5, index=index)
    for a in range(0, 30, 7):
        for b in range(4):
            single = g_aggregate(points[a], bank.deltas.data[b], bank.sigmas.data[b], fin, bank.alpha, bank.beta,
                                 index=index, k=5)
            assert fout.g[a, b] == pytest.approx(single.item(), abs=1e-12)


def test_first_encoder_layer_shape(rng):
    fin = FeatureSet.from_points(rng.uniform(-1, 1, size=(2048, 3)))
    bank = DisplacementBank.initialize(rng, d_in=3, d_out=16, s=10)
    fout = feature_extraction(fin, bank, k=16)
    assert (fout.count, fout.dim) == (2048, 16)
    assert fout.g.shape == (2048, 16)


def test_zero_bank_gives_zero_output(rng):
    bank = DisplacementBank.initialize(rng, d_in=3, d_out=5, s=2, zero=True)
    fout = feature_extraction(FeatureSet.from_points(rng.normal(size=(10, 3))), bank, k=4)
    np.testing.assert_array_equal(fout.data, np.zeros((10, 5)))


def test_feature_extraction_dimension_mismatch(rng):
    bank = DisplacementBank.initialize(rng, d_in=4, d_out=2, s=1)
    with pytest.raises(ContractError):
        feature_extraction(FeatureSet.from_points(np.zeros((3, 3))), bank)


@pytest.mark.parametrize('row, expected', [((0.0, 0.0, 0.0), 0.0), ((1.0, -1.0), 1.523188)])
def test_activation(row, expected):
    assert activation(row) == pytest.approx(expected, abs=1e-6)


def test_activations_need_cached_g():
    with pytest.raises(ContractError):
        activations(FeatureSet.from_points(np.zeros((2, 3))))


def test_pooling_keeps_highest_in_original_order():
    fout = FeatureSet(Tensor(np.arange(8.0).reshape(4, 2)), g=np.zeros((4, 1)))
    pooled = neighbor_pooling(fout, np.array([0.1, 0.9, 0.5, 0.7]), 2)
    np.testing.assert_array_equal(pooled.data, [[2.0, 3.0], [6.0, 7.0]])


def test_pooling_schedule():
    assert pooling_selection(np.random.default_rng(0).random(2048), 8).shape == (256, )


def test_pooling_tau_one_is_identity():
    fout = FeatureSet(Tensor(np.arange(6.0).reshape(3, 2)))
    np.testing.assert_array_equal(neighbor_pooling(fout, np.array([0.3, 0.1, 0.2]), 1).data, fout.data)


def test_pooling_floors_with_minimum_one():
    assert len(pooling_selection(np.array([0.2, 0.4, 0.1]), 2)) == 1
    assert list(pooling_selection(np.array([0.2, 0.4, 0.1]), 3)) == [1]


def test_pooling_ties_go_to_lower_id():
    assert list(pooling_selection(np.array([0.5, 0.5, 0.5, 0.5]), 2)) == [0, 1]


@pytest.mark.parametrize('tau', [0, 5, 1.5])
def test_pooling_rejects_bad_tau(tau):
    fout = FeatureSet(Tensor(np.zeros((4, 2))))
    with pytest.raises(ContractError):
        neighbor_pooling(fout, np.zeros(4), tau)


def test_latent_max_pool():
    pooled = latent_max_pool(FeatureSet(Tensor([[1.0, 5.0], [4.0, 2.0]])))
    np.testing.assert_array_equal(pooled.data, [[4.0, 5.0]])


def test_latent_max_pool_single_row():
    pooled = latent_max_pool(FeatureSet(Tensor([[1.0, -5.0, 3.0]])))
    np.testing.assert_array_equal(pooled.data, [[1.0, -5.0, 3.0]])


def test_first_decoder_layer_shape(rng):
    latent = FeatureSet.from_points(rng.normal(size=(1, 64)))
    up = UpBank(tuple(DisplacementBank.initialize(rng, d_in=64, d_out=256, s=5) for _ in range(2)))
    out = upsampling(latent, up)
    assert (out.count, out.dim) == (2, 256)


def test_single_bank_upsampling_is_extraction(rng):
    fin = FeatureSet.from_points(rng.normal(size=(5, 3)))
    bank = DisplacementBank.initialize(rng, d_in=3, d_out=4, s=2)
    np.testing.assert_array_equal(upsampling(fin, UpBank((bank, )), k=None).data,
                                  feature_extraction(fin, bank, k=None).data)


def test_upsampling_block_structure(rng):
    points = rng.normal(size=(3, 3))
    fin = FeatureSet.from_points(points)
    banks = tuple(DisplacementBank.initialize(rng, d_in=3, d_out=2, s=2) for _ in range(4))
    out = upsampling(fin, UpBank(banks), k=None)
    assert out.data.shape == (12, 2)
    for u, bank in enumerate(banks):
        expected = straight_line_extraction(points, bank.deltas.data, bank.sigmas.data, bank.rhos.data, bank.alpha,
                                            bank.beta)
        np.testing.assert_allclose(out.data[3 * u:3 * (u + 1)], expected, rtol=0, atol=1e-12)


def test_upbank_requires_matching_banks(rng):
    with pytest.raises(ContractError):
        UpBank((DisplacementBank.initialize(rng, 3, 2, 1), DisplacementBank.initialize(rng, 3, 4, 1)))


def test_bank_shape_validation():
    with pytest.raises(ContractError):
        DisplacementBank(Tensor(np.zeros((2, 1, 3))), Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize('scale', [1e-3, 0.5, 7.0, 1e4])
def test_pooling_selection_ignores_positive_scale(rng, scale):
    acts = rng.random(37)
    np.testing.assert_array_equal(pooling_selection(acts * scale, 4), pooling_selection(acts, 4))


def test_pooling_gradient_reaches_kept_rows_only():
    x = Tensor(np.arange(12.0).reshape(6, 2), requires_grad=True)
    acts = np.array([0.4, 0.1, 0.9, 0.3, 0.8, 0.2])
    with Tape():
        pooled = neighbor_pooling(FeatureSet(x), acts, 2)
        loss = ad.reduce_sum(pooled.vectors)
    grad = backward(loss)[x]
    np.testing.assert_array_equal(grad, [[1, 1], [0, 0], [1, 1], [0, 0], [1, 1], [0, 0]])


@pytest.mark.parametrize('alpha, beta', [(ALPHA, BETA), (1.0, 1.0), (0.5, 0.2), (3.0, 0.05)])
def test_g_response_falls_with_distance(alpha, beta):
    sigma = 0.7
    candidates = FeatureSet.from_points([[0.0, 0.0, 0.0]])

    def response(d):
        return g_aggregate([d, 0.0, 0.0], [[0.0, 0.0, 0.0]], [sigma], candidates, alpha=alpha, beta=beta).item()

    supremum = sigma * np.tanh(alpha / beta)
    values = np.array([response(d) for d in np.linspace(0.1, 5.0, 25)])
    assert np.all(np.diff(values) < 0)
    assert np.all(values < supremum)
    assert response(0.0) == pytest.approx(supremum)


@pytest.mark.parametrize('seed', range(5))
def test_activation_ignores_signs(seed):
    rng = np.random.default_rng(seed)
    row = rng.normal(size=9)
    flips = rng.choice([-1.0, 1.0], size=9)
    assert activation(-row) == pytest.approx(activation(row))
    assert activation(row * flips) == pytest.approx(activation(row))


@pytest.mark.parametrize('seed', range(5))
def test_latent_max_pool_ignores_row_order(seed):
    rng = np.random.default_rng(seed)
    vectors = rng.normal(size=(7, 5))
    shuffled = vectors[rng.permutation(7)]
    np.testing.assert_array_equal(latent_max_pool(FeatureSet(Tensor(shuffled))).data,
                                  latent_max_pool(FeatureSet(Tensor(vectors))).data)


def test_latent_max_pool_tie_sends_gradient_to_lowest_id():
    x = Tensor([[1.0, 2.0], [3.0, 2.0], [3.0, 0.0]], requires_grad=True)
    with Tape():
        loss = ad.reduce_sum(latent_max_pool(FeatureSet(x)).vectors)
    np.testing.assert_array_equal(backward(loss)[x], [[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]])
