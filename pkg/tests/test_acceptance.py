"""One test per acceptance criterion; each records a one-line detail for the summary."""

import time

import numpy as np
import pytest

from tginee.covariance import WorkingCovariance, estimate_w_pooled
from tginee.estimator import (
    FitConfig,
    estimate_w_full,
    fit,
    fit_best,
    gradient_of_quadratic_loss,
    load_checkpoint,
    quadratic_loss,
    save_checkpoint,
    score,
)
from tginee.evaluation import (
    auc,
    diagnostics_from_counts,
    fit_and_evaluate,
    kruskal_check,
    link_prediction_auc,
    split_triplets,
)
from tginee.link_fn import LinkFunction
from tginee.model_jacobian import pair_probability, prob_pair_jacobian, theta_pair_jacobian
from tginee.synth import SynthSpec, generate, generate_heterogeneous, perturb, plant_cp_model, true_probabilities, upper_pairs
from tginee.tensor_core import FactorPair, SparseMultiLayerGraph, read_edgelist, write_edgelist

from conftest import ALL_LINKS, central_difference, identity_safe_factors, random_factors, random_graph
from oracles import block_jacobian_dense, brute_auc, brute_kruskal_rank

pytestmark = pytest.mark.acceptance


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


class Timer:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start

    def check(self):
        assert self.elapsed < self.limit, f"took {self.elapsed:.1f}s, limit {self.limit}s"


def test_criterion_01_jacobian_matches_finite_differences(record_property):
    rng = np.random.default_rng(101)
    worst = 0.0
    instances = 0
    with Timer(5) as t:
        for link in ALL_LINKS:
            for _ in range(6):
                n, M, R = int(rng.integers(2, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
                f = identity_safe_factors(rng, n, M, R) if link.kind == "identity" else random_factors(rng, n, M, R)
                i, j = sorted(int(x) for x in rng.integers(0, n, size=2))

                def prob(gamma):
                    return pair_probability(FactorPair.from_vector(gamma, n, M, R), link, i, j)

                numeric = central_difference(prob, f.to_vector())
                worst = max(worst, rel_err(prob_pair_jacobian(f, link, i, j).dense(), numeric))
                instances += 1
    record_property("detail", f"{instances} instances, max rel err {worst:.2e} (tol 1e-6), {t.elapsed:.2f}s")
    assert instances >= 20
    assert worst <= 1e-6
    t.check()


def test_criterion_02_block_equivalence(record_property):
    rng = np.random.default_rng(102)
    worst = 0.0
    with Timer(5) as t:
        for n, M, R in [(2, 1, 1), (2, 2, 2), (3, 1, 2), (3, 2, 1), (3, 2, 2)]:
            f = random_factors(rng, n, M, R)
            full = block_jacobian_dense(f.alpha, f.beta)
            for i in range(n):
                for j in range(n):
                    rows = [m * n * n + i * n + j for m in range(M)]
                    worst = max(worst, float(np.max(np.abs(theta_pair_jacobian(f, i, j).dense() - full[rows]))))
    record_property("detail", f"max abs diff {worst:.2e} (tol 1e-12), {t.elapsed:.2f}s")
    assert worst <= 1e-12
    t.check()


def test_criterion_03_score_gradient_identity(record_property):
    rng = np.random.default_rng(103)
    worst = 0.0
    with Timer(10) as t:
        for k in range(10):
            n, M, R = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
            link = ALL_LINKS[k % 4]
            f = identity_safe_factors(rng, n, M, R) if link.kind == "identity" else random_factors(rng, n, M, R)
            g = random_graph(rng, n, M, 0.4, diagonal=True)
            A = rng.normal(size=(M, M))
            wc = WorkingCovariance(M, ridge_eps=0.0)
            wc.set_W(A @ A.T / M + np.eye(M))
            grad = gradient_of_quadratic_loss(g, f, link, wc, sigma_factors=f)
            np.testing.assert_array_equal(grad, -score(g, f, link, wc, sigma_factors=f))

            def q(gamma):
                return quadratic_loss(g, FactorPair.from_vector(gamma, n, M, R), link, wc, sigma_factors=f)

            worst = max(worst, rel_err(grad, central_difference(q, f.to_vector())))
    record_property("detail", f"10 instances, max rel err {worst:.2e} (tol 1e-6), {t.elapsed:.2f}s")
    assert worst <= 1e-6
    t.check()


def test_criterion_04_headline_synthetic(record_property):
    gee, plain = [], []
    with Timer(300) as t:
        for seed in range(5):
            g, _ = generate(SynthSpec(100, 3, rho=0.2, seed=seed))
            split = split_triplets(g)
            gee.append(fit_and_evaluate(g, FitConfig(seed=seed), split=split)[1])
            plain.append(fit_and_evaluate(g, FitConfig(seed=seed, gee_lambda=0.0, estimate_w=False), split=split)[1])
    mean, base = float(np.mean(gee)), float(np.mean(plain))
    record_property("detail", f"mean AUC {mean:.4f} (need >= 0.85), no-GEE {base:.4f}, {t.elapsed:.0f}s")
    assert mean >= base - 0.01
    assert mean >= 0.85
    t.check()


def test_criterion_05_covariance_ablation(record_property):
    est, ident = [], []
    with Timer(600) as t:
        for seed in range(5):
            g, _ = generate(SynthSpec(200, 3, rho=0.5, seed=seed))
            split = split_triplets(g)
            est.append(fit_and_evaluate(g, FitConfig(seed=seed), split=split)[1])
            ident.append(fit_and_evaluate(g, FitConfig(seed=seed, estimate_w=False), split=split)[1])
    a, b = float(np.mean(est)), float(np.mean(ident))
    record_property("detail", f"estimated-W {a:.4f} vs identity-W {b:.4f} (need >= identity - 0.005), {t.elapsed:.0f}s")
    assert a >= b - 0.005
    t.check()


def test_criterion_06_heterogeneous_w_ordering(record_property):
    rho = {(0, 1): 0.1, (0, 2): 0.5, (1, 2): 0.2}
    wins = 0
    with Timer(900) as t:
        for seed in range(20):
            spec = SynthSpec(100, 3, base_kind="block", base_jitter=0.5, layer_rho=rho, seed=seed)
            g, _, _ = generate_heterogeneous(spec)
            W = fit(g, FitConfig(seed=seed)).w_final
            wins += W[0, 2] > W[0, 1]
    record_property("detail", f"W02 > W01 in {wins}/20 runs (need >= 14), {t.elapsed:.0f}s")
    assert wins >= 14
    t.check()


def test_criterion_07_noise_robustness(record_property):
    ratios = (0.0, 0.1, 0.3, 0.5)
    cfg = FitConfig(rank=3, epochs=300, learning_rate=0.05, init_scale=0.5, include_diagonal=False)
    scores = np.zeros((3, len(ratios)))
    with Timer(600) as t:
        for seed in range(3):
            _, g = plant_cp_model(150, 3, 3, LinkFunction(), seed=seed)
            split = split_triplets(g)
            train = split.train_graph(g)
            for k, ratio in enumerate(ratios):
                noisy = perturb(train, ratio, np.random.default_rng(seed)).graph
                report = fit_best(noisy, cfg.with_(seed=seed), restarts=3)
                scores[seed, k] = link_prediction_auc(report.factors, report.link, split.test, split.test_neg)
    mean, std = scores.mean(axis=0), scores.std(axis=0, ddof=1)
    retention = mean[2] / mean[0]
    monotone = all(mean[k + 1] <= mean[k] + std[k + 1] for k in range(len(ratios) - 1))
    curve = " ".join(f"{m:.3f}" for m in mean)
    record_property("detail", f"AUC {curve}, retention@0.3 {retention:.1%} (need >= 60%), {t.elapsed:.0f}s")
    assert monotone
    assert retention >= 0.6
    t.check()


def test_criterion_08_consistency_rate(record_property):
    sizes = (50, 100, 200)
    cfg = FitConfig(rank=2, epochs=400, learning_rate=0.05, init_scale=0.5, include_diagonal=False)
    link = LinkFunction()
    rmse = np.zeros((3, len(sizes)))
    with Timer(600) as t:
        for seed in range(3):
            for k, n in enumerate(sizes):
                truth, g = plant_cp_model(n, 3, 2, link, seed=seed)
                report = fit_best(g, cfg.with_(seed=seed), restarts=5)
                I, J = upper_pairs(n)
                diff = true_probabilities(report.factors, link, I, J) - true_probabilities(truth, link, I, J)
                rmse[seed, k] = np.sqrt(np.mean(diff**2))
    slopes = [np.polyfit(np.log(sizes), np.log(r), 1)[0] for r in rmse]
    slope = np.polyfit(np.log(sizes), np.log(rmse.mean(axis=0)), 1)[0]
    per_seed = ", ".join(f"{s:.2f}" for s in slopes)
    record_property("detail", f"log-log slope {slope:.2f} (per seed {per_seed}; need [-1.5, -0.3]), {t.elapsed:.0f}s")
    assert -1.5 <= slope <= -0.3
    t.check()


def test_criterion_09_negative_sampling_ratio(record_property):
    link = LinkFunction("sparse_logit", s=0.0195)
    ratios = (1, 3, 5)
    scores = np.zeros((3, len(ratios)))
    densities = []
    with Timer(600) as t:
        for seed in range(3):
            _, g = plant_cp_model(2000, 3, 4, link, seed=seed, beta_scale=3.0)
            densities.append(g.num_edges() / (3 * 2000 * 1999 / 2))
            split = split_triplets(g)
            train = split.train_graph(g)
            for k, ratio in enumerate(ratios):
                cfg = FitConfig(
                    rank=4,
                    mode="mini_batch",
                    neg_ratio=ratio,
                    epochs=30,
                    batch_size=1000,
                    learning_rate=0.1,
                    init_scale=0.5,
                    include_diagonal=False,
                    seed=seed,
                )
                report = fit_best(train, cfg, restarts=3)
                scores[seed, k] = link_prediction_auc(report.factors, report.link, split.test, split.test_neg)
    mean = scores.mean(axis=0)
    curve = " ".join(f"1:{r}={m:.4f}" for r, m in zip(ratios, mean))
    record_property("detail", f"density {max(densities):.4f}, AUC {curve}, {t.elapsed:.0f}s")
    assert max(densities) <= 0.01
    assert mean[1] >= mean.max() - 0.02
    t.check()


def test_criterion_10_brute_force_oracles(record_property):
    rng = np.random.default_rng(110)
    with Timer(10) as t:
        auc_checked = 0
        while auc_checked < 100:
            size = int(rng.integers(2, 40))
            scores = rng.integers(0, 10, size=size) / 10.0
            labels = rng.integers(0, 2, size=size)
            if labels.min() == labels.max():
                continue
            assert auc(scores, labels) == brute_auc(scores, labels)
            auc_checked += 1
        for _ in range(50):
            n, M, R = int(rng.integers(2, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
            alpha, beta = rng.normal(size=(n, R)), rng.normal(size=(M, R))
            if R > 1 and rng.random() < 0.4:
                alpha[:, -1] = 2.0 * alpha[:, 0]
            k_a, k_b, ok = kruskal_check(FactorPair(alpha, beta))
            assert (k_a, k_b) == (brute_kruskal_rank(alpha), brute_kruskal_rank(beta))
            assert ok == (2 * k_a + k_b >= 2 * R + 2)
        worst = 0.0
        for _ in range(5):
            n, M, R = int(rng.integers(3, 8)), int(rng.integers(2, 5)), 2
            f = random_factors(rng, n, M, R)
            g = random_graph(rng, n, M, 0.4, diagonal=True)
            link = LinkFunction()
            dense = np.zeros((M, M))
            for i in range(n):
                for j in range(i, n):
                    p = pair_probability(f, link, i, j)
                    r = (np.array([g.value(i, j, m) for m in range(M)]) - p) / np.sqrt(p * (1 - p))
                    dense += np.outer(r, r)
            dense /= n * (n + 1) // 2
            worst = max(worst, float(np.max(np.abs(estimate_w_full(g, f, link) - dense))))
        rows = rng.normal(size=(100, 3))
        worst = max(worst, float(np.max(np.abs(estimate_w_pooled(rows) - sum(np.outer(x, x) for x in rows) / 100))))
    record_property("detail", f"100 AUC + 50 Kruskal instances exact, W max diff {worst:.1e} (tol 1e-10), {t.elapsed:.2f}s")
    assert worst <= 1e-10
    t.check()


def test_criterion_11_diagnostics_arithmetic(record_property):
    with Timer(1) as t:
        d = diagnostics_from_counts(100, 3, 32, 0)
        dblp = diagnostics_from_counts(300000, 5, 16, 1032786)
        so = diagnostics_from_counts(2580000, 5, 16, 47903266)
    record_property("detail", f"N={d.N} p={d.p}, DBLP {dblp.ratio_edges:.3f}, Stack Overflow {so.ratio_edges:.2f}")
    assert (d.N, d.p) == (5050, 3296)
    assert f"{dblp.ratio_edges:.3f}" == "0.215"
    assert f"{so.ratio_edges:.2f}" == "1.16"
    t.check()


def test_criterion_12_determinism_and_round_trips(tmp_path, record_property):
    rng = np.random.default_rng(112)
    with Timer(30) as t:
        g, _ = generate(SynthSpec(40, 3, seed=1))
        for mode in ("full_batch", "mini_batch"):
            cfg = FitConfig(rank=3, epochs=4, seed=7, mode=mode, batch_size=200, warmup_epochs=1, cov_refresh_every=1)
            paths = []
            for run in range(2):
                r = fit(g, cfg)
                path = tmp_path / f"{mode}{run}.ckpt"
                save_checkpoint(path, r.factors, r.link, r.w_final)
                paths.append(path)
            assert paths[0].read_bytes() == paths[1].read_bytes()
            factors, link, W = load_checkpoint(paths[0])
            assert factors == r.factors and link == r.link
            np.testing.assert_array_equal(W, r.w_final)
            again = tmp_path / f"{mode}.again.ckpt"
            save_checkpoint(again, factors, link, W)
            assert again.read_bytes() == paths[0].read_bytes()
        f = random_factors(rng, 5, 2, 3)
        for link in ALL_LINKS:
            save_checkpoint(tmp_path / "l.ckpt", f, link)
            back, back_link, _ = load_checkpoint(tmp_path / "l.ckpt")
            assert back == f and back_link == link
        write_edgelist(g, tmp_path / "g.edges")
        assert read_edgelist(tmp_path / "g.edges") == g
        weighted = SparseMultiLayerGraph.from_triplets(4, 2, [[0, 1, 0], [2, 2, 1], [1, 3, 1]], [0.125, 1e-17, 3.0])
        write_edgelist(weighted, tmp_path / "w.edges")
        assert read_edgelist(tmp_path / "w.edges") == weighted
    record_property("detail", f"checkpoints byte-identical for both modes, round trips lossless, {t.elapsed:.2f}s")
    t.check()
