"""Two-stage filter behavior and baseline aggregator oracles."""

import itertools
import math

import numpy as np
import pytest

from noisegate import (MlpModel, ServerState, apply_update, coordinate_median,
                       filter_gradient, first_agg, first_agg_verdict, krum,
                       rfa_geometric_median, score_round, selection_size,
                       trimmed_mean)
from noisegate.numerics import stream

SIGMA = 1.0
B_C = 4
# Large enough that the KS-statistic gate accepts genuine noise with
# overwhelming probability (typical D scales like 0.8/sqrt(dim)).
DIM = 4096


def noise_upload(rng, sigma=SIGMA, dim=DIM, b_c=B_C):
    return rng.standard_normal(dim) * sigma / b_c


def make_model():
    # 256 -> 8 -> 3 keeps dim (2083) above the KS gate's reliable range.
    return MlpModel(256, 8, 3)


def make_server(n, gamma, model=None, seed=0, **kw):
    model = model or make_model()
    rng = stream(seed, 3, 1)
    aux_f = rng.standard_normal((6, model.input_dim))
    aux_l = rng.integers(0, model.n_classes, size=6)
    return ServerState(model=model, n=n, gamma=gamma, sigma=SIGMA, b_c=B_C,
                       aux_features=aux_f, aux_labels=aux_l, **kw)


class TestFirstAgg:
    def test_pure_noise_passes(self):
        rng = stream(1, 0)
        passed = sum(
            first_agg_verdict(noise_upload(rng, dim=25450), SIGMA, B_C).passed
            for _ in range(300))
        assert passed >= 297  # >= 99%

    def test_zero_vector_rejected(self):
        verdict = first_agg_verdict(np.zeros(DIM), SIGMA, B_C)
        assert not verdict.passed and not verdict.norm_ok

    def test_constant_vector_rejected_by_ks_not_norm(self):
        # All coordinates at sigma/b_c: the unaveraged norm is exactly
        # sigma*sqrt(d) (band center) but the ECDF is a single step.
        g = np.full(DIM, SIGMA / B_C)
        verdict = first_agg_verdict(g, SIGMA, B_C)
        assert verdict.norm_ok
        assert verdict.ks_statistic > 0.5
        assert not verdict.passed

    def test_oversized_and_undersized_norms_rejected(self):
        rng = stream(2, 0)
        g = noise_upload(rng)
        base = np.linalg.norm(g * B_C)
        bounds_hi = 1.2 * math.sqrt(SIGMA**2 * DIM + 3 * SIGMA**2 * math.sqrt(2 * DIM))
        too_big = g * (bounds_hi / base)
        assert not first_agg_verdict(too_big, SIGMA, B_C).norm_ok
        too_small = g * 0.5
        assert not first_agg_verdict(too_small, SIGMA, B_C).norm_ok

    def test_first_agg_passes_through_or_zeroes(self):
        rng = stream(3, 0)
        good = noise_upload(rng)
        np.testing.assert_array_equal(first_agg(good, SIGMA, B_C), good)
        np.testing.assert_array_equal(first_agg(good * 5, SIGMA, B_C),
                                      np.zeros(DIM))

    def test_shifted_noise_rejected(self):
        # A mean shift of sigma/2 per coordinate is far outside the KS band.
        rng = stream(4, 0)
        g = noise_upload(rng) + 0.5 * SIGMA / B_C
        assert not first_agg_verdict(g, SIGMA, B_C).passed

    def test_small_dimension_rejected(self):
        with pytest.raises(ValueError):
            first_agg_verdict(np.ones(10), SIGMA, B_C)


class TestScoreRound:
    def test_worked_example(self):
        # Round scores [5, 4, 1, 0] with gamma=0.5: top-2 mean is 4.5, scores
        # below it are suppressed, worker 0 alone gains score; the second
        # selection slot falls to worker 1 on the lowest-index tie rule.
        scores = np.zeros(4)
        inc, selected, mu_hat = score_round(np.array([5.0, 4.0, 1.0, 0.0]),
                                            scores, 0.5)
        assert mu_hat == pytest.approx(4.5)
        np.testing.assert_array_equal(inc, [5.0, 0.0, 0.0, 0.0])
        np.testing.assert_array_equal(scores, [5.0, 0.0, 0.0, 0.0])
        assert selected == [0, 1]

    def test_scores_accumulate_across_rounds(self):
        scores = np.zeros(3)
        score_round(np.array([3.0, 2.0, 0.0]), scores, 1 / 3)
        _, selected, _ = score_round(np.array([0.0, 5.0, 4.0]), scores, 1 / 3)
        np.testing.assert_array_equal(scores, [3.0, 5.0, 0.0])
        assert selected == [1]

    def test_negative_mean_survives_unless_clamped(self):
        scores = np.zeros(2)
        inc, _, mu_hat = score_round(np.array([-1.0, -5.0]), scores, 0.5)
        assert mu_hat == -1.0
        np.testing.assert_array_equal(inc, [-1.0, 0.0])

        clamped = np.zeros(2)
        inc, _, _ = score_round(np.array([-1.0, -5.0]), clamped, 0.5, clamp=True)
        np.testing.assert_array_equal(inc, [0.0, 0.0])
        np.testing.assert_array_equal(clamped, [0.0, 0.0])

    def test_selection_size_ceiling(self):
        assert selection_size(0.4, 50) == 20
        assert selection_size(0.1, 200) == 20
        assert selection_size(0.34, 3) == 2
        assert selection_size(1.0, 7) == 7

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError):
            score_round(np.zeros(3), np.zeros(4), 0.5)


class TestFilterGradient:
    def test_failing_upload_scores_exactly_zero(self):
        # An upload aligned with the auxiliary gradient but wildly out of
        # band is zeroed in stage one, so its round score cannot be positive.
        model = make_model()
        model.init_params(stream(5, 2, 0))
        server = make_server(4, 0.5, model=model, seed=5)
        g_aux = model.batch_gradient(server.aux_features, server.aux_labels)
        rng = stream(6, 0)
        dim = model.dim
        uploads = [noise_upload(rng, dim=dim) for _ in range(3)]
        uploads.append(50.0 * g_aux / np.linalg.norm(g_aux))
        result = filter_gradient(uploads, server, model)
        assert not result.verdicts[3].passed
        assert result.score_increments[3] == 0.0
        np.testing.assert_array_equal(result.filtered[3], np.zeros(dim))

    def test_aligned_survivor_wins_selection(self):
        model = make_model()
        model.init_params(stream(7, 2, 0))
        server = make_server(4, 0.25, model=model, seed=7)
        g_aux = model.batch_gradient(server.aux_features, server.aux_labels)
        rng = stream(8, 0)
        dim = model.dim

        def planted(target):
            # Noise plus a nudge along g_aux so the inner product is `target`
            # while the wire statistics stay valid.
            z = noise_upload(rng, dim=dim)
            adjust = (target - z @ g_aux) / (g_aux @ g_aux)
            return z + adjust * g_aux

        uploads = [planted(0.001), planted(0.2), planted(0.001), planted(0.001)]
        result = filter_gradient(uploads, server, model)
        assert all(v.passed for v in result.verdicts)
        assert result.selected == [1]
        assert result.selected_uploads[0] is result.filtered[1]

    def test_selection_count_and_mutation(self):
        model = make_model()
        model.init_params(stream(9, 2, 0))
        server = make_server(6, 0.5, model=model, seed=9)
        rng = stream(10, 0)
        uploads = [noise_upload(rng, dim=model.dim) for _ in range(6)]
        before = server.scores.copy()
        result = filter_gradient(uploads, server, model)
        assert len(result.selected) == 3
        assert result.selected == sorted(set(result.selected))
        np.testing.assert_array_equal(server.scores,
                                      before + result.score_increments)

    def test_permutation_equivariance(self):
        # Round scores and the threshold depend only on upload values, so
        # permuting the workers permutes the increments and relabels the
        # top scorer.  (Full selected-set equivariance needs tie-free
        # accumulated scores; suppressed workers all sit at zero.)
        model = make_model()
        model.init_params(stream(11, 2, 0))
        rng = stream(12, 0)
        uploads = [noise_upload(rng, dim=model.dim) for _ in range(5)]
        perm = [3, 0, 4, 1, 2]

        s1 = make_server(5, 0.4, model=model, seed=11)
        r1 = filter_gradient(uploads, s1, model)
        s2 = make_server(5, 0.4, model=model, seed=11)
        r2 = filter_gradient([uploads[p] for p in perm], s2, model)
        assert r2.mu_hat == pytest.approx(r1.mu_hat, abs=1e-12)
        np.testing.assert_allclose(np.asarray(r1.score_increments)[perm],
                                   r2.score_increments, atol=1e-12)
        assert perm[int(np.argmax(s2.scores))] == int(np.argmax(s1.scores))

    def test_upload_count_mismatch_rejected(self):
        server = make_server(4, 0.5)
        with pytest.raises(ValueError):
            filter_gradient([np.zeros(8)] * 3, server, server.model)

    def test_selected_uploads_have_bounded_wire_norm(self):
        # Whatever an attacker sends, anything that reaches the model update
        # is either inside the stage-one norm band or exactly zero.
        from noisegate.stats import norm_test_bounds

        model = make_model()
        model.init_params(stream(20, 2, 0))
        server = make_server(6, 0.5, model=model, seed=20)
        rng = stream(21, 0)
        dim = model.dim
        uploads = [noise_upload(rng, dim=dim) for _ in range(3)]
        uploads += [rng.standard_normal(dim) * 100,   # huge
                    np.zeros(dim),                    # degenerate
                    rng.standard_normal(dim) * 1e-6]  # vanishing
        result = filter_gradient(uploads, server, model)
        upper = norm_test_bounds(SIGMA, dim).upper
        for g in result.selected_uploads:
            wire = np.linalg.norm(g) * B_C
            assert wire <= upper + 1e-9 or wire == 0.0


class TestApplyUpdate:
    def test_divides_by_enrolled_count_not_selected(self):
        server = make_server(5, 0.4)
        server.model.params[:] = 1.0
        ones = np.ones(server.model.dim)
        apply_update(server, [ones, ones], eta=0.5)
        np.testing.assert_allclose(server.model.params,
                                   1.0 - 0.5 * 2.0 / 5.0)

    def test_empty_selection_is_noop(self):
        server = make_server(5, 0.4)
        server.model.params[:] = 2.0
        apply_update(server, [], eta=0.5)
        np.testing.assert_array_equal(server.model.params, 2.0)

    def test_nonpositive_eta_rejected(self):
        server = make_server(5, 0.4)
        with pytest.raises(ValueError):
            apply_update(server, [np.zeros(server.model.dim)], eta=0.0)


def brute_force_krum(uploads, gamma):
    n = len(uploads)
    m = n - math.ceil(gamma * n) - 2
    best_idx, best_score = None, math.inf
    for i in range(n):
        others = [float(np.sum((uploads[i] - uploads[j]) ** 2))
                  for j in range(n) if j != i]
        score = min(sum(combo) for combo in itertools.combinations(others, m))
        if score < best_score:
            best_idx, best_score = i, score
    return uploads[best_idx]


def golden_section_median_2d(points, lo=-10.0, hi=10.0, iters=80):
    # Nested golden-section search over x and y for the geometric median.
    phi = (math.sqrt(5) - 1) / 2

    def cost_at(x, y):
        return float(np.sum(np.hypot(points[:, 0] - x, points[:, 1] - y)))

    def min_y(x, a=lo, b=hi):
        c, d = b - phi * (b - a), a + phi * (b - a)
        for _ in range(iters):
            if cost_at(x, c) < cost_at(x, d):
                b, d = d, c
                c = b - phi * (b - a)
            else:
                a, c = c, d
                d = a + phi * (b - a)
        y = (a + b) / 2
        return y, cost_at(x, y)

    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    for _ in range(iters):
        if min_y(c)[1] < min_y(d)[1]:
            b, d = d, c
            c = b - phi * (b - a)
        else:
            a, c = c, d
            d = a + phi * (b - a)
    x = (a + b) / 2
    return np.array([x, min_y(x)[0]])


class TestBaselineAggregators:
    def test_krum_picks_cluster_member(self):
        uploads = [np.array([0.0, 0.0]), np.array([0.1, 0.0]),
                   np.array([0.0, 0.1]), np.array([10.0, 10.0])]
        np.testing.assert_array_equal(krum(uploads, 0.25), uploads[0])

    def test_krum_matches_brute_force(self):
        rng = stream(13, 0)
        for _ in range(40):
            n = int(rng.integers(5, 12))
            dim = int(rng.integers(1, 6))
            gamma = float(rng.uniform(0.05, (n - 3) / n))
            uploads = [rng.standard_normal(dim) for _ in range(n)]
            np.testing.assert_array_equal(krum(uploads, gamma),
                                          brute_force_krum(uploads, gamma))

    def test_krum_too_few_neighbors_rejected(self):
        with pytest.raises(ValueError):
            krum([np.zeros(2)] * 4, gamma=0.75)

    def test_coordinate_median_even_count(self):
        uploads = [np.array([1.0]), np.array([2.0]),
                   np.array([10.0]), np.array([11.0])]
        np.testing.assert_allclose(coordinate_median(uploads), [6.0])

    def test_coordinate_median_ignores_one_outlier(self):
        uploads = [np.array([1.0, -1.0]), np.array([1.1, -0.9]),
                   np.array([0.9, -1.1]), np.array([1e6, 1e6])]
        np.testing.assert_allclose(coordinate_median(uploads), [1.05, -0.95])

    def test_trimmed_mean_drops_extremes(self):
        uploads = [np.array([v]) for v in (0.0, 1.0, 2.0, 3.0, 100.0)]
        np.testing.assert_allclose(trimmed_mean(uploads, 0.2), [2.0])

    def test_trimmed_mean_gamma_zero_is_mean(self):
        rng = stream(14, 0)
        uploads = [rng.standard_normal(4) for _ in range(6)]
        np.testing.assert_allclose(trimmed_mean(uploads, 0.0),
                                   np.mean(uploads, axis=0))

    def test_trimmed_mean_overtrim_rejected(self):
        with pytest.raises(ValueError):
            trimmed_mean([np.zeros(2)] * 4, gamma=0.5)

    def test_cm_tm_permutation_invariant(self):
        rng = stream(15, 0)
        uploads = [rng.standard_normal(5) for _ in range(7)]
        shuffled = [uploads[i] for i in (6, 2, 0, 5, 1, 4, 3)]
        np.testing.assert_allclose(coordinate_median(uploads),
                                   coordinate_median(shuffled))
        np.testing.assert_allclose(trimmed_mean(uploads, 0.2),
                                   trimmed_mean(shuffled, 0.2))

    def test_rfa_singleton_and_known_median(self):
        np.testing.assert_allclose(
            rfa_geometric_median([np.array([3.0, -2.0])]), [3.0, -2.0])
        # Median of this diamond is the hub where three unit vectors cancel.
        points = [np.array([0.0, 0.0]), np.array([2.0, 0.0]),
                  np.array([1.0, 1.0]), np.array([1.0, -1.0])]
        np.testing.assert_allclose(rfa_geometric_median(points), [1.0, 0.0],
                                   atol=1e-6)

    def test_rfa_matches_golden_section_oracle(self):
        rng = stream(16, 0)
        for _ in range(5):
            n = int(rng.integers(3, 8))
            points = rng.standard_normal((n, 2)) * 3
            ours = rfa_geometric_median([p for p in points])
            oracle = golden_section_median_2d(points)
            np.testing.assert_allclose(ours, oracle, atol=1e-4)

    def test_rfa_resists_single_outlier(self):
        cluster = [np.array([1.0, 1.0]) + 0.01 * stream(17, i).standard_normal(2)
                   for i in range(6)]
        median = rfa_geometric_median(cluster + [np.array([1e5, 1e5])])
        assert np.linalg.norm(median - [1.0, 1.0]) < 1.0

    def test_empty_uploads_rejected(self):
        for agg in (coordinate_median, rfa_geometric_median):
            with pytest.raises(ValueError):
                agg([])
