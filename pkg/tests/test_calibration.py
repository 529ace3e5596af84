"""Calibration search: grids, masking, metric, caching, and the full pipeline.

The heavyweight checks here compare the production pipeline against the
straight-line oracle in ``_oracles.py`` — exact equality, not tolerance,
since both sides mirror the same documented arithmetic.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from bbcq.calibration import (CalibConfig, CalibInstrumentation, CalibResult,
                              PROFILE_RANGES, bbc_metric, bottom_mask,
                              bottom_threshold, cache_fp_pass, calibrate,
                              candidate_scales, load_result, save_result,
                              search_site, total_blockwise_metric)
from bbcq.data import generate_dataset
from bbcq.errors import (ConfigError, DegenerateRangeError, DimensionError,
                         ParameterError)
from bbcq.model import (BLOCK_KINDS, MatmulSite, ModelSpec, forward,
                        forward_from, init_model)
from bbcq.quantizers import EPSILON, QuantParams, minmax_affine_params
from bbcq.tensor import Tensor, cross_entropy

from _oracles import naive_bbc_metric, oracle_calibrate


def _small_setup(num_blocks=1, embed_dim=16, seed=7, samples=6):
    spec = ModelSpec(num_blocks=num_blocks, embed_dim=embed_dim, num_heads=2,
                     patch_count=4, num_classes=4, init_seed=seed)
    model = init_model(spec)
    x, y = generate_dataset(samples, spec.patch_count, spec.embed_dim,
                            spec.num_classes, seed=seed + 100)
    return model, x, y


# ---------------------------------------------------------------------------
# candidate grid


def test_candidate_grid_hand_example():
    """Range [0,2], k=2, alpha=.5, beta=1.2, n=8: steps 0.25..0.60 plus 2/3."""
    cands = candidate_scales(0.0, 2.0, bits=2, alpha=0.5, beta=1.2, n=8)
    assert len(cands) == 9
    scales = [c.scale for c in cands]
    np.testing.assert_allclose(scales[:8], 0.25 + 0.05 * np.arange(8),
                               rtol=1e-14)
    assert scales[0] == 0.25
    assert scales[8] == 2.0 / 3.0
    assert all(c.zero_point == 0 for c in cands)
    assert all(c.bits == 2 and c.scheme == "uniform" for c in cands)


def test_candidate_grid_minmax_always_last():
    cands = candidate_scales(-1.0, 3.0, bits=4, alpha=0.2, beta=0.9, n=5)
    assert cands[-1].scale == 4.0 / 15.0


def test_candidate_grid_zero_points_follow_scale():
    cands = candidate_scales(-1.0, 3.0, bits=4, alpha=0.5, beta=1.0, n=2)
    for c in cands:
        expected = int(np.clip(np.floor(abs(1.0 / c.scale) + 0.5), 0, 15))
        assert c.zero_point == expected


def test_candidate_grid_equal_alpha_beta_collapses():
    cands = candidate_scales(0.0, 1.0, bits=4, alpha=0.7, beta=0.7, n=6)
    assert all(c.scale == cands[0].scale for c in cands[:-1])


def test_candidate_grid_alpha_zero_floors_at_epsilon():
    cands = candidate_scales(0.0, 1.0, bits=4, alpha=0.0, beta=1.0, n=4)
    assert cands[0].scale == EPSILON


def test_candidate_grid_errors():
    with pytest.raises(DegenerateRangeError):
        candidate_scales(1.0, 1.0, 4, 0.0, 1.0, 4)
    with pytest.raises(DegenerateRangeError):
        candidate_scales(2.0, 1.0, 4, 0.0, 1.0, 4)
    with pytest.raises(ParameterError):
        candidate_scales(0.0, 1.0, 4, -0.1, 1.0, 4)
    with pytest.raises(ParameterError):
        candidate_scales(0.0, 1.0, 4, 0.8, 0.2, 4)
    with pytest.raises(ParameterError):
        candidate_scales(0.0, 1.0, 4, 0.0, 1.0, 1)


# ---------------------------------------------------------------------------
# bottom elimination


SIGMA_EXAMPLE = np.array([0.5, -0.1, 0.02, -0.3, 0.01, 0.2, -0.04, 0.08,
                          0.9, -0.06])


def test_bottom_mask_gamma_zero_is_identity():
    out = bottom_mask(SIGMA_EXAMPLE, 0.0)
    np.testing.assert_array_equal(out, SIGMA_EXAMPLE)


def test_bottom_mask_gamma_hundred_zeroes_everything():
    np.testing.assert_array_equal(bottom_mask(SIGMA_EXAMPLE, 100.0),
                                  np.zeros_like(SIGMA_EXAMPLE))
    assert bottom_threshold(SIGMA_EXAMPLE, 100.0) == math.inf


def test_bottom_mask_ten_percent_example():
    """Nearest-rank 10th percentile of ten entries drops exactly the smallest."""
    out = bottom_mask(SIGMA_EXAMPLE, 10.0)
    expected = SIGMA_EXAMPLE.copy()
    expected[4] = 0.0  # 0.01 is the single smallest magnitude
    np.testing.assert_array_equal(out, expected)


def test_bottom_mask_survivors_are_bit_identical(rng):
    sigma = rng.normal(size=(4, 5, 6))
    out = bottom_mask(sigma, 25.0)
    kept = out != 0.0
    np.testing.assert_array_equal(out[kept], sigma[kept])


def test_bottom_mask_ties_survive():
    sigma = np.array([1.0, 1.0, 2.0, 3.0])
    # m = 1, threshold = second-smallest |sigma| = 1.0; nothing is < 1.0
    out = bottom_mask(sigma, 25.0)
    np.testing.assert_array_equal(out, sigma)
    # at 50% the threshold moves to 2.0 and both ones drop
    np.testing.assert_array_equal(bottom_mask(sigma, 50.0),
                                  [0.0, 0.0, 2.0, 3.0])


def test_bottom_mask_count_never_exceeds_rank(rng):
    sigma = rng.normal(size=200)
    for gamma in (10.0, 33.0, 75.0):
        m = math.ceil(gamma / 100.0 * sigma.size)
        zeroed = int((bottom_mask(sigma, gamma) == 0.0).sum())
        assert zeroed <= m  # ties at the threshold survive


def test_bottom_mask_gamma_out_of_range():
    with pytest.raises(ParameterError):
        bottom_mask(SIGMA_EXAMPLE, -1.0)
    with pytest.raises(ParameterError):
        bottom_threshold(SIGMA_EXAMPLE, 100.5)


# ---------------------------------------------------------------------------
# metric


def test_metric_hand_example():
    assert bbc_metric(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == 19.0


def test_metric_zero_sigma():
    assert bbc_metric(np.zeros(5), np.ones(5)) == 0.0


def test_metric_quadratic_homogeneity(rng):
    sigma = rng.normal(size=(3, 7))
    h = rng.uniform(0.1, 2.0, size=(3, 7))
    assert bbc_metric(2.0 * sigma, h) == 4.0 * bbc_metric(sigma, h)


def test_metric_batch_mean():
    sigma = np.array([[1.0, 2.0], [3.0, 4.0]])
    h = np.ones((2, 2))
    # per-sample sums 5 and 25, batch mean 15
    assert bbc_metric(sigma, h) == 15.0


def test_metric_matches_naive_double_loop(rng):
    for shape in [(7,), (3, 5), (2, 3, 4)]:
        sigma = rng.normal(size=shape)
        h = rng.uniform(0.0, 1.0, size=shape)
        fast = bbc_metric(sigma, h)
        slow = naive_bbc_metric(sigma, h)
        assert fast == pytest.approx(slow, rel=1e-12)


def test_metric_shape_mismatch():
    with pytest.raises(DimensionError):
        bbc_metric(np.zeros(3), np.zeros(4))


def test_metric_nonincreasing_in_gamma(rng):
    sigma = rng.normal(size=(4, 9))
    h = rng.uniform(0.0, 1.0, size=(4, 9))
    values = [bbc_metric(bottom_mask(sigma, g), h)
              for g in (0.0, 10.0, 25.0, 50.0, 75.0, 100.0)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert values[-1] == 0.0


def test_metric_accepts_tensors():
    assert bbc_metric(Tensor(np.array([1.0, 2.0])),
                      Tensor(np.array([3.0, 4.0]))) == 19.0


# ---------------------------------------------------------------------------
# config


def test_config_defaults():
    cfg = CalibConfig()
    assert (cfg.w_bits, cfg.a_bits) == (8, 8)
    assert cfg.gamma == 10.0
    assert (cfg.alpha, cfg.beta) == (0.0, 1.2)
    assert cfg.num_candidates == 100
    assert cfg.rounds == 3
    assert cfg.softmax_quantizer == "mpq"
    assert not cfg.dynamic_softmax


def test_config_profile_defaults():
    det = CalibConfig.for_profile("detection")
    assert (det.alpha, det.beta) == PROFILE_RANGES["detection"] == (0.5, 1.2)
    cls = CalibConfig.for_profile("classification", w_bits=4)
    assert cls.alpha == 0.0 and cls.w_bits == 4


@pytest.mark.parametrize("kwargs", [
    {"w_bits": 1}, {"a_bits": 9}, {"w_bits": 4.0}, {"gamma": -1.0},
    {"gamma": 101.0}, {"alpha": 1.2, "beta": 1.2}, {"alpha": -0.5},
    {"alpha": 0.9, "beta": 0.3}, {"num_candidates": 1}, {"rounds": 0},
    {"softmax_quantizer": "nope"}, {"calib_batch": 0}, {"profile": "video"},
    {"beta": float("inf")},
])
def test_config_validation(kwargs):
    with pytest.raises(ParameterError):
        CalibConfig(**kwargs)


def test_config_json_round_trip():
    cfg = CalibConfig(w_bits=4, a_bits=6, gamma=25.0, rounds=2,
                      softmax_quantizer="log2", blocks_as_layers=True)
    assert CalibConfig.from_json(cfg.to_json()) == cfg


# ---------------------------------------------------------------------------
# FP caching pass


def test_cache_fp_pass_structure():
    model, x, y = _small_setup(num_blocks=2)
    fp = cache_fp_pass(model, x, y)
    assert len(fp.caches) == 2
    assert [c.kind for c in fp.caches] == ["block", "block"]
    result = forward(model, x)
    np.testing.assert_array_equal(fp.caches[0].block_input,
                                  result.embed_output.data)
    np.testing.assert_array_equal(fp.caches[1].block_input,
                                  result.block_outputs[0].data)
    for b, cache in enumerate(fp.caches):
        np.testing.assert_array_equal(cache.output,
                                      result.block_outputs[b].data)
        np.testing.assert_array_equal(cache.h_diag, cache.grad * cache.grad)
    assert fp.loss == cross_entropy(result.logits, y).item()
    assert np.isfinite(fp.logits).all()


def test_cache_fp_pass_deterministic():
    model, x, y = _small_setup()
    a = cache_fp_pass(model, x, y)
    b = cache_fp_pass(model, x, y)
    assert a.loss == b.loss
    np.testing.assert_array_equal(a.caches[0].grad, b.caches[0].grad)
    assert a.ranges == b.ranges
    assert a.softmax_max == b.softmax_max


def test_cache_fp_pass_ranges_match_operands():
    model, x, y = _small_setup()
    fp = cache_fp_pass(model, x, y)
    embed = fp.ranges[MatmulSite("embed", "B")]
    assert embed == (float(model.embed_w.min()), float(model.embed_w.max()))
    blk = model.blocks[0]
    qkv = fp.ranges[MatmulSite("qkv-projection", "B", 0)]
    assert qkv == (min(float(blk.w_q.min()), float(blk.w_k.min()),
                       float(blk.w_v.min())),
                   max(float(blk.w_q.max()), float(blk.w_k.max()),
                       float(blk.w_v.max())))
    assert 0.0 < fp.softmax_max[0] <= 1.0
    assert 0.0 <= fp.softmax_min[0] < fp.softmax_max[0]


def test_cache_fp_pass_counts_allocations():
    model, x, y = _small_setup(num_blocks=3)
    instr = CalibInstrumentation()
    cache_fp_pass(model, x, y, instrumentation=instr)
    assert instr.cache_triples_allocated == 3


def test_cache_fp_pass_layerwise_units():
    model, x, y = _small_setup(num_blocks=2)
    fp = cache_fp_pass(model, x, y, blocks_as_layers=True)
    assert len(fp.caches) == 12
    kinds = {(c.block, c.kind) for c in fp.caches}
    assert kinds == {(b, k) for b in range(2) for k in BLOCK_KINDS}
    qkv = next(c for c in fp.caches if c.kind == "qkv-projection")
    assert len(qkv.outputs) == len(qkv.grads) == len(qkv.h_diags) == 3
    block0 = [c for c in fp.caches if c.block == 0]
    for cache in block0[1:]:
        np.testing.assert_array_equal(cache.block_input,
                                      block0[0].block_input)


def test_block_output_gradient_matches_finite_difference():
    """Spot check of the cached loss gradient via the forward_from tail."""
    model, x, y = _small_setup(num_blocks=2, seed=3)
    fp = cache_fp_pass(model, x, y)
    h = 1e-5
    probe_rng = np.random.default_rng(0)
    for b, cache in enumerate(fp.caches):
        base = cache.output
        flat = probe_rng.choice(base.size, size=8, replace=False)
        for f_idx in flat:
            idx = np.unravel_index(f_idx, base.shape)

            def loss_at(value):
                probe = base.copy()
                probe[idx] = value
                logits = forward_from(model, b, probe)
                return cross_entropy(logits, y).item()

            fd = (loss_at(base[idx] + h) - loss_at(base[idx] - h)) / (2 * h)
            assert np.isclose(cache.grad[idx], fd, rtol=1e-4, atol=1e-9), \
                f"block {b} coord {idx}"


# ---------------------------------------------------------------------------
# search_site


def _one_block_search_fixture():
    model, x, y = _small_setup()
    config = CalibConfig(w_bits=4, a_bits=4, num_candidates=6, rounds=1)
    fp = cache_fp_pass(model, x, y)
    return model, config, fp


def test_search_site_tie_breaks_to_lowest_index():
    model, config, fp = _one_block_search_fixture()
    site = MatmulSite("mlp-1", "B", 0)
    same = QuantParams(bits=4, scale=0.021, zero_point=7, scheme="uniform")
    params, chosen, trace = search_site(model, site, [same] * 5, {},
                                        fp.caches[0], config)
    assert chosen == 0
    assert params is same
    assert len(set(trace)) == 1


def test_search_site_returns_argmin_and_full_trace():
    model, config, fp = _one_block_search_fixture()
    site = MatmulSite("mlp-1", "B", 0)
    lo, hi = fp.ranges[site]
    cands = candidate_scales(lo, hi, 4, config.alpha, config.beta,
                             config.num_candidates)
    params, chosen, trace = search_site(model, site, cands, {}, fp.caches[0],
                                        config)
    assert len(trace) == config.num_candidates + 1
    assert chosen == int(np.argmin(trace))
    assert params == cands[chosen]
    assert trace[chosen] <= trace[-1]  # dominates the min-max baseline


def test_search_site_leaves_state_untouched():
    model, config, fp = _one_block_search_fixture()
    site = MatmulSite("mlp-1", "B", 0)
    frozen = {MatmulSite("mlp-2", "B", 0):
              QuantParams(bits=4, scale=0.01, zero_point=8, scheme="uniform")}
    before = dict(frozen)
    cands = candidate_scales(*fp.ranges[site], 4, 0.2, 1.0, 4)
    search_site(model, site, cands, frozen, fp.caches[0], config)
    assert frozen == before


# ---------------------------------------------------------------------------
# calibrate: structure and bookkeeping


def test_calibrate_covers_every_site():
    model, x, y = _small_setup(num_blocks=2)
    config = CalibConfig(w_bits=4, a_bits=4, num_candidates=4, rounds=1)
    result = calibrate(model, x, y, config)
    spec = model.spec
    assert len(result.params) == 12 * spec.num_blocks + 2
    searched = [s for s in result.params if result.traces.get(s)]
    assert len(searched) == 11 * spec.num_blocks
    for site in searched:
        final = result.traces[site][-1]
        assert len(final) == config.num_candidates + 1
        assert result.chosen_index[site] == int(np.argmin(final))
        assert final[result.chosen_index[site]] <= final[-1]


def test_calibrate_edges_and_softmax_are_not_searched():
    model, x, y = _small_setup()
    config = CalibConfig(w_bits=4, a_bits=4, num_candidates=4, rounds=1)
    result = calibrate(model, x, y, config)
    embed = result.params[MatmulSite("embed", "B")]
    assert embed == minmax_affine_params(model.embed_w, 4)
    assert result.chosen_index[MatmulSite("embed", "B")] is None
    head = result.params[MatmulSite("head", "B")]
    assert head == minmax_affine_params(model.head_w, 4)
    softmax_site = MatmulSite("attn-apply", "A", 0)
    softmax = result.params[softmax_site]
    assert softmax.scheme == "mpq"
    assert softmax.calibrated_max == result.softmax_max[0]
    assert result.traces[softmax_site] == []


def test_calibrate_weight_vs_activation_bits():
    model, x, y = _small_setup()
    config = CalibConfig(w_bits=3, a_bits=5, num_candidates=4, rounds=1)
    result = calibrate(model, x, y, config)
    assert result.params[MatmulSite("mlp-1", "B", 0)].bits == 3
    assert result.params[MatmulSite("mlp-1", "A", 0)].bits == 5
    # attn-score B is an activation operand despite its role letter
    assert result.params[MatmulSite("attn-score", "B", 0)].bits == 5
    assert result.params[MatmulSite("attn-apply", "A", 0)].bits == 5


def test_calibrate_deterministic():
    model, x, y = _small_setup()
    config = CalibConfig(w_bits=4, a_bits=4, num_candidates=4, rounds=2)
    a = calibrate(model, x, y, config)
    b = calibrate(model, x, y, config)
    assert a.dumps() == b.dumps()


def test_calibrate_thread_count_does_not_change_result(monkeypatch):
    model, x, y = _small_setup()
    config = CalibConfig(w_bits=4, a_bits=4, num_candidates=5, rounds=1)
    monkeypatch.delenv("BBCQ_THREADS", raising=False)
    sequential = calibrate(model, x, y, config)
    monkeypatch.setenv("BBCQ_THREADS", "3")
    threaded = calibrate(model, x, y, config)
    assert sequential.dumps() == threaded.dumps()


def test_bad_thread_env_rejected(monkeypatch):
    model, x, y = _small_setup()
    config = CalibConfig(num_candidates=2, rounds=1)
    monkeypatch.setenv("BBCQ_THREADS", "many")
    with pytest.raises(ConfigError):
        calibrate(model, x, y, config)
    monkeypatch.setenv("BBCQ_THREADS", "0")
    with pytest.raises(ConfigError):
        calibrate(model, x, y, config)


def test_calib_result_json_round_trip(tmp_path):
    model, x, y = _small_setup()
    config = CalibConfig(w_bits=4, a_bits=4, num_candidates=4, rounds=1)
    result = calibrate(model, x, y, config)
    clone = CalibResult.from_json(result.to_json())
    assert clone.dumps() == result.dumps()
    assert clone.params == result.params
    assert clone.chosen_index == result.chosen_index
    path = tmp_path / "calib.json"
    save_result(result, path)
    assert load_result(path).dumps() == result.dumps()


def test_calib_result_rejects_other_documents():
    with pytest.raises(ParameterError):
        CalibResult.from_json({"kind": "report"})


def test_instrumentation_tracks_single_working_block():
    model, x, y = _small_setup(num_blocks=3)
    instr = CalibInstrumentation()
    config = CalibConfig(w_bits=4, a_bits=4, num_candidates=2, rounds=1)
    calibrate(model, x, y, config, instrumentation=instr)
    assert instr.cache_triples_allocated == 3
    assert instr.max_live_working_blocks == 1
    assert instr.live_working_blocks == 0


# ---------------------------------------------------------------------------
# calibrate vs the straight-line oracle


def _assert_matches_oracle(result, oracle):
    searched = [s for s in result.params if result.traces.get(s)]
    assert len(searched) == len(oracle)
    for site in searched:
        scale, zero_point, idx, trace = oracle[site.site_id]
        got = result.params[site]
        assert got.scale == scale, site.site_id
        assert got.zero_point == zero_point, site.site_id
        assert result.chosen_index[site] == idx, site.site_id
        assert result.traces[site][-1] == trace, site.site_id


def test_single_block_reduces_to_layerwise_search():
    """With one block and gamma=0 the pipeline is a plain layerwise
    Hessian-guided search over that block; an independent exhaustive
    implementation must pick identical scales."""
    model, x, y = _small_setup()
    config = CalibConfig(w_bits=4, a_bits=4, gamma=0.0, alpha=0.0, beta=1.2,
                         num_candidates=8, rounds=1)
    result = calibrate(model, x, y, config)
    oracle = oracle_calibrate(model, x, y, w_bits=4, a_bits=4, gamma=0.0,
                              alpha=0.0, beta=1.2, n=8, rounds=1)
    _assert_matches_oracle(result, oracle)


def test_matmul_units_match_layerwise_oracle():
    """blocks_as_layers scores each matmul against its own output; the
    oracle re-runs that search with the package's cached sensitivities."""
    model, x, y = _small_setup()
    config = CalibConfig(w_bits=4, a_bits=4, gamma=0.0, alpha=0.0, beta=1.2,
                         num_candidates=6, rounds=1, blocks_as_layers=True)
    result = calibrate(model, x, y, config)
    fp = cache_fp_pass(model, x, y, blocks_as_layers=True)
    h_override = {(c.block, c.kind): c.h_diags for c in fp.caches}
    oracle = oracle_calibrate(model, x, y, w_bits=4, a_bits=4, gamma=0.0,
                              alpha=0.0, beta=1.2, n=6, rounds=1,
                              unit="layer", h_override=h_override)
    _assert_matches_oracle(result, oracle)


def test_multi_round_oracle_agreement():
    """Two alternation rounds with a nonzero gamma, still exact."""
    model, x, y = _small_setup(seed=9)
    config = CalibConfig(w_bits=4, a_bits=4, gamma=10.0, alpha=0.0, beta=1.2,
                         num_candidates=6, rounds=2)
    result = calibrate(model, x, y, config)
    oracle = oracle_calibrate(model, x, y, w_bits=4, a_bits=4, gamma=10.0,
                              alpha=0.0, beta=1.2, n=6, rounds=2)
    _assert_matches_oracle(result, oracle)


# ---------------------------------------------------------------------------
# alternation rounds


def _frozen_rounds_setup():
    """Pinned seed where extra rounds strictly help (see notes on A-site
    regressions: alternation guarantees monotone weight-side metrics, but an
    activation row can drift when its partner moves; this seed is stable)."""
    spec = ModelSpec(num_blocks=1, embed_dim=32, num_heads=4, patch_count=8,
                     num_classes=5, init_seed=12)
    model = init_model(spec)
    x, y = generate_dataset(16, 8, 32, 5, seed=112)
    return model, x, y


def _final_metrics(result):
    return {site.site_id: result.traces[site][-1][result.chosen_index[site]]
            for site in result.params if result.traces.get(site)}


def test_second_round_never_worse_at_frozen_seed():
    model, x, y = _frozen_rounds_setup()
    base = dict(w_bits=4, a_bits=4, num_candidates=20)
    one = calibrate(model, x, y, CalibConfig(rounds=1, **base))
    two = calibrate(model, x, y, CalibConfig(rounds=2, **base))
    metrics_one, metrics_two = _final_metrics(one), _final_metrics(two)
    assert metrics_one.keys() == metrics_two.keys()
    for site_id, first in metrics_one.items():
        assert metrics_two[site_id] <= first, site_id


def test_rounds_improve_within_single_run_at_frozen_seed():
    model, x, y = _frozen_rounds_setup()
    result = calibrate(model, x, y, CalibConfig(w_bits=4, a_bits=4,
                                                num_candidates=20, rounds=3))
    for site in result.params:
        rounds = result.traces.get(site)
        if not rounds:
            continue
        chosen_per_round = [min(trace) for trace in rounds]
        for earlier, later in zip(chosen_per_round, chosen_per_round[1:]):
            assert later <= earlier, site.site_id


# ---------------------------------------------------------------------------
# whole-assignment metric


def test_total_blockwise_metric_zero_for_fp_assignment():
    model, x, y = _small_setup(num_blocks=2)
    assert total_blockwise_metric(model, x, y, {}, gamma=0.0) == 0.0


def test_total_blockwise_metric_positive_under_coarse_quant():
    model, x, y = _small_setup()
    config = CalibConfig(w_bits=2, a_bits=2, num_candidates=3, rounds=1)
    result = calibrate(model, x, y, config)
    total = total_blockwise_metric(model, x, y, result.quant_state(),
                                   gamma=0.0)
    assert total > 0.0
