#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mmbc/divergences.hpp"
#include "test_support.hpp"

using namespace mmbc;
using namespace mmbc::testing;

TEST_CASE("gaussian_kl closed-form values") {
    CHECK(gaussian_kl({0.0}, {0.0}, {0.0}, {0.0}) == doctest::Approx(0.0));
    CHECK(gaussian_kl({1.0}, {0.0}, {0.0}, {0.0}) == doctest::Approx(0.5));
    // KL(N(0,4) || N(0,1)) = (4 - 1 - ln 4) / 2
    CHECK(gaussian_kl({0.0}, {std::log(4.0)}, {0.0}, {0.0}) ==
          doctest::Approx(0.5 * (4.0 - 1.0 - std::log(4.0))).epsilon(1e-9));
    // sums over dimensions
    CHECK(gaussian_kl({1.0, 1.0}, {0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}) ==
          doctest::Approx(1.0));
    CHECK_THROWS_AS(gaussian_kl({0.0}, {0.0, 0.0}, {0.0}, {0.0}), ShapeError);
}

TEST_CASE("gaussian_kl is nonnegative and vanishes only at equality") {
    Rng rng(21);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> mq = {rng.uniform(-2, 2)}, lq = {rng.uniform(-2, 2)};
        std::vector<double> mp = {rng.uniform(-2, 2)}, lp = {rng.uniform(-2, 2)};
        CHECK(gaussian_kl(mq, lq, mp, lp) >= 0.0);
        CHECK(gaussian_kl(mq, lq, mq, lq) == doctest::Approx(0.0));
    }
}

TEST_CASE("tape KL to standard normal matches the closed form") {
    Rng rng(3);
    Tensor mu = random_tensor({5, 3}, rng);
    Tensor lv = random_tensor({5, 3}, rng);
    Tape tape;
    Var kl = gaussian_kl_mean_to_std(tape, tape.constant(mu), tape.constant(lv));
    double expect = 0.0;
    for (int64_t r = 0; r < 5; ++r) {
        std::vector<double> mq, lq, zero(3, 0.0);
        for (int64_t c = 0; c < 3; ++c) {
            mq.push_back(mu.at2(r, c));
            lq.push_back(lv.at2(r, c));
        }
        expect += gaussian_kl(mq, lq, zero, zero);
    }
    CHECK(tape.scalar_value(kl) == doctest::Approx(expect / 5.0).epsilon(1e-5));
}

TEST_CASE("imq mmd oracle cases") {
    SUBCASE("identical batches vanish") {
        Rng rng(5);
        Tensor z = random_tensor({16, 3}, rng);
        CHECK(imq_mmd(z, z, imq_default_scales(3)) == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("singletons at 0 and 1 with a single unit scale give exactly 1") {
        Tensor zq = Tensor::from_data({1, 1}, {0.0f});
        Tensor zp = Tensor::from_data({1, 1}, {1.0f});
        CHECK(imq_mmd(zq, zp, {1.0}) == doctest::Approx(1.0));
    }
    SUBCASE("symmetric in its arguments") {
        Rng rng(6);
        Tensor a = random_tensor({8, 2}, rng), b = random_tensor({8, 2}, rng);
        CHECK(imq_mmd(a, b, imq_default_scales(2)) ==
              doctest::Approx(imq_mmd(b, a, imq_default_scales(2))));
    }
    SUBCASE("nonnegative on random batches") {
        Rng rng(7);
        for (int i = 0; i < 120; ++i) {
            Tensor a = random_tensor({6, 2}, rng, -2.0, 2.0);
            Tensor b = random_tensor({6, 2}, rng, -2.0, 2.0);
            CHECK(imq_mmd(a, b, imq_default_scales(2)) >= -1e-9);
        }
    }
}

TEST_CASE("imq mmd gradients match finite differences") {
    Rng rng(8);
    for (int c = 0; c < 6; ++c) {
        auto rep = fd_check(
            [](Tape& t, const std::vector<Var>& in) {
                return imq_mmd_op(t, in[0], in[1], imq_default_scales(2));
            },
            {random_tensor({5, 2}, rng), random_tensor({5, 2}, rng)});
        CHECK(rep.max_rel_err < 1e-3);
    }
}

TEST_CASE("sinkhorn divergence oracle cases") {
    SUBCASE("identical batches vanish by debiasing") {
        Rng rng(9);
        Tensor z = random_tensor({12, 2}, rng);
        const SinkhornResult r = sinkhorn_divergence(z, z, 0.1);
        CHECK(r.converged);
        CHECK(std::fabs(r.value) < 1e-6);
    }
    SUBCASE("singletons pay exactly the squared distance") {
        Tensor zq = Tensor::from_data({1, 1}, {0.0f});
        Tensor zp = Tensor::from_data({1, 1}, {1.0f});
        const SinkhornResult r = sinkhorn_divergence(zq, zp, 0.1);
        CHECK(r.value == doctest::Approx(1.0).epsilon(1e-8));
    }
    SUBCASE("nonnegative over random batches") {
        Rng rng(10);
        for (int i = 0; i < 110; ++i) {
            Tensor a = random_tensor({6, 2}, rng, -1.5, 1.5);
            Tensor b = random_tensor({6, 2}, rng, -1.5, 1.5);
            const SinkhornResult r = sinkhorn_divergence(a, b, 0.1, 1e-9, 2000);
            CHECK(r.value >= -1e-7);
        }
    }
    SUBCASE("hitting the iteration cap reports non-convergence") {
        Rng rng(11);
        Tensor a = random_tensor({8, 2}, rng), b = random_tensor({8, 2}, rng, 3.0, 4.0);
        const SinkhornResult r = sinkhorn_divergence(a, b, 0.1, 1e-12, 1);
        CHECK_FALSE(r.converged);
    }
    SUBCASE("blur must be positive") {
        Tensor a = Tensor::from_data({1, 1}, {0.0f});
        CHECK_THROWS_AS(sinkhorn_divergence(a, a, 0.0), std::invalid_argument);
    }
}

TEST_CASE("sinkhorn envelope gradients match finite differences") {
    Rng rng(12);
    for (int c = 0; c < 4; ++c) {
        auto rep = fd_check(
            [](Tape& t, const std::vector<Var>& in) {
                return sinkhorn_op(t, in[0], in[1], 0.1, 1e-12, 5000);
            },
            {random_tensor({5, 2}, rng), random_tensor({5, 2}, rng)});
        CHECK(rep.max_rel_err < 2e-3); // envelope is exact only at convergence
    }
}

TEST_CASE("geometry penalty closed-form cases") {
    GeomRegConfig cfg;
    SUBCASE("an exactly whitened batch is near zero") {
        // rows at the corners of a square: mean 0, per-dim std 1, diag cov
        Tensor z = Tensor::from_data({4, 2}, {1, 1, 1, -1, -1, 1, -1, -1});
        Tape tape;
        Var pen = geometry_penalty(tape, tape.constant(z), cfg);
        CHECK(tape.scalar_value(pen) == doctest::Approx(0.0).epsilon(1e-4));
    }
    SUBCASE("a constant batch at the origin pays the std target") {
        Tensor z({8, 3}, 0.0f);
        Tape tape;
        Var pen = geometry_penalty(tape, tape.constant(z), cfg);
        CHECK(tape.scalar_value(pen) ==
              doctest::Approx(double(cfg.beta_std) * cfg.sigma_star * cfg.sigma_star)
                  .epsilon(1e-2));
    }
    SUBCASE("shifting every latent by v adds beta_mean * |v|^2") {
        Rng rng(13);
        Tensor z = random_tensor({16, 2}, rng);
        Tensor shifted = z;
        const float vx = 0.7f, vy = -0.4f;
        for (int64_t r = 0; r < 16; ++r) {
            shifted.at2(r, 0) += vx;
            shifted.at2(r, 1) += vy;
        }
        Tape tape;
        const double base = tape.scalar_value(geometry_penalty(tape, tape.constant(z), cfg));
        const double moved =
            tape.scalar_value(geometry_penalty(tape, tape.constant(shifted), cfg));
        CHECK(moved - base ==
              doctest::Approx(double(cfg.beta_mean) * (vx * vx + vy * vy)).epsilon(1e-3));
    }
    SUBCASE("the max-std hinge activates beyond sigma_max") {
        // constant +/- 5 pattern: std 5 > sigma_max = 2
        Tensor z({8, 1});
        for (int64_t r = 0; r < 8; ++r) z.at2(r, 0) = r % 2 ? 5.0f : -5.0f;
        Tape tape;
        Var pen = geometry_penalty(tape, tape.constant(z), cfg);
        const double expect_std = double(cfg.beta_std) * (5.0 - cfg.sigma_star) *
                                  (5.0 - cfg.sigma_star);
        const double expect_max = double(cfg.beta_max) * (5.0 - cfg.sigma_max) *
                                  (5.0 - cfg.sigma_max);
        CHECK(tape.scalar_value(pen) ==
              doctest::Approx(expect_std + expect_max).epsilon(1e-3));
    }
}

TEST_CASE("geometry penalty gradients match finite differences") {
    Rng rng(14);
    GeomRegConfig cfg;
    for (int c = 0; c < 6; ++c) {
        auto rep = fd_check(
            [&](Tape& t, const std::vector<Var>& in) {
                return geometry_penalty(t, in[0], cfg);
            },
            {random_tensor({6, 3}, rng)});
        CHECK(rep.max_rel_err < 1e-3);
    }
}
