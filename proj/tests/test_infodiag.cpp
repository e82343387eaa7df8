#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mmbc/infodiag.hpp"
#include "test_support.hpp"

using namespace mmbc;

namespace {

// Labeled 1-D Gaussian cluster data: mode m centered at centers[m-1].
void make_clusters(const std::vector<double>& centers, double sigma, int per_mode, Rng& rng,
                   std::vector<std::vector<double>>& latents, std::vector<int>& labels) {
    latents.clear();
    labels.clear();
    for (size_t m = 0; m < centers.size(); ++m)
        for (int i = 0; i < per_mode; ++i) {
            latents.push_back({centers[m] + sigma * rng.normal()});
            labels.push_back(int(m) + 1);
        }
}

} // namespace

TEST_CASE("fano bound closed-form cases") {
    CHECK(fano_bound(std::log(4.0), 0.0, 4) == doctest::Approx(std::log(4.0)).epsilon(1e-9));
    // H_b(0.75) + 0.75 log 3 equals log 4 exactly
    CHECK(fano_bound(std::log(4.0), 0.75, 4) == doctest::Approx(0.0).scale(1.0).epsilon(1e-6));
    CHECK(fano_bound(0.0, 0.0, 1) == doctest::Approx(0.0));
    CHECK(fano_bound(0.7, 0.0, 1) == doctest::Approx(0.7)); // bracket zero when K = 1
    CHECK_THROWS_AS(fano_bound(1.0, 0.8, 4), std::invalid_argument);
    CHECK_THROWS_AS(fano_bound(1.0, -0.1, 4), std::invalid_argument);
}

TEST_CASE("fano bound is non-increasing in rho") {
    for (int K : {2, 4, 16}) {
        double prev = fano_bound(std::log(double(K)), 0.0, K);
        const double hi = 1.0 - 1.0 / double(K);
        for (int i = 1; i <= 40; ++i) {
            const double rho = hi * double(i) / 40.0;
            const double b = fano_bound(std::log(double(K)), rho, K);
            CHECK(b <= prev + 1e-12);
            prev = b;
        }
        CHECK(prev == doctest::Approx(0.0).scale(1.0).epsilon(1e-9)); // uniform at chance
    }
}

TEST_CASE("bayes classifier on separable and chance-level data") {
    Rng rng(3);
    SUBCASE("two far clusters are almost perfectly classified") {
        std::vector<std::vector<double>> latents;
        std::vector<int> labels;
        make_clusters({-3.0, 3.0}, 1.0, 4000, rng, latents, labels);
        const auto res = bayes_mode_classifier(latents, labels, 2, 99);
        // Bayes error for unit-variance clusters at +/-3 is Phi(-3)
        CHECK(res.rho_z == doctest::Approx(0.00135).epsilon(3.0)); // Monte-Carlo band
        CHECK(res.rho_z < 0.006);
    }
    SUBCASE("shuffled labels sit at chance level") {
        std::vector<std::vector<double>> latents;
        std::vector<int> labels;
        make_clusters({-2.0, 0.0, 2.0, 4.0}, 0.2, 300, rng, latents, labels);
        // destroy the association
        Rng shuffle_rng(5);
        for (size_t i = labels.size(); i > 1; --i)
            std::swap(labels[i - 1], labels[size_t(shuffle_rng.uniform_index(uint64_t(i)))]);
        const auto res = bayes_mode_classifier(latents, labels, 4, 99);
        CHECK(res.rho_z == doctest::Approx(0.75).epsilon(0.08));
    }
    SUBCASE("preconditions are enforced") {
        std::vector<std::vector<double>> latents = {{0.0}, {0.1}, {0.2}};
        std::vector<int> labels = {1, 1, 1};
        CHECK_THROWS_AS(bayes_mode_classifier(latents, labels, 1, 0), std::invalid_argument);
        labels = {1, 2, 1}; // mode 2 has a single sample < d+2
        CHECK_THROWS_AS(bayes_mode_classifier(latents, labels, 2, 0), std::invalid_argument);
    }
}

TEST_CASE("mode information estimator") {
    Rng rng(7);
    SUBCASE("a deterministic code attains log K") {
        std::vector<std::vector<double>> latents;
        std::vector<int> labels;
        make_clusters({-6.0, -2.0, 2.0, 6.0}, 0.05, 400, rng, latents, labels);
        const double i_mode = estimate_i_mode(latents, labels, 4, 11);
        CHECK(i_mode == doctest::Approx(std::log(4.0)).epsilon(0.02));
    }
    SUBCASE("shuffled labels carry almost nothing") {
        std::vector<std::vector<double>> latents;
        std::vector<int> labels;
        make_clusters({-6.0, -2.0, 2.0, 6.0}, 0.05, 400, rng, latents, labels);
        Rng shuffle_rng(13);
        for (size_t i = labels.size(); i > 1; --i)
            std::swap(labels[i - 1], labels[size_t(shuffle_rng.uniform_index(uint64_t(i)))]);
        CHECK(estimate_i_mode(latents, labels, 4, 11) < 0.05);
    }
}

TEST_CASE("action information estimator") {
    SUBCASE("identical posteriors carry zero information") {
        std::vector<DiagGaussian> posteriors(50, DiagGaussian{{0.3}, {0.0}});
        Rng rng(17);
        CHECK(estimate_i_action(posteriors, 64, rng) ==
              doctest::Approx(0.0).scale(1.0).epsilon(1e-6));
    }
    SUBCASE("two far components converge to log 2") {
        std::vector<DiagGaussian> posteriors;
        for (int i = 0; i < 200; ++i)
            posteriors.push_back(DiagGaussian{{i % 2 ? 5.0 : -5.0}, {0.0}});
        Rng rng(19);
        CHECK(estimate_i_action(posteriors, 64, rng) ==
              doctest::Approx(std::log(2.0)).epsilon(0.03));
    }
    SUBCASE("never exceeds the pointwise KL on the same posteriors") {
        Rng rng(23);
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<DiagGaussian> posteriors;
            for (int i = 0; i < 60; ++i)
                posteriors.push_back(DiagGaussian{{rng.uniform(-2, 2), rng.uniform(-2, 2)},
                                                  {rng.uniform(-1, 1), rng.uniform(-1, 1)}});
            Rng mc(101 + uint64_t(trial));
            const double i_action = estimate_i_action(posteriors, 32, mc);
            CHECK(i_action <= pointwise_kl_average(posteriors) + 0.05);
            CHECK(i_action >= -0.02);
        }
    }
}

TEST_CASE("pointwise KL average closed forms") {
    std::vector<DiagGaussian> at_prior(10, DiagGaussian{{0.0, 0.0}, {0.0, 0.0}});
    CHECK(pointwise_kl_average(at_prior) == doctest::Approx(0.0));
    std::vector<DiagGaussian> shifted(10, DiagGaussian{{1.0}, {0.0}});
    CHECK(pointwise_kl_average(shifted) == doctest::Approx(0.5));
}

TEST_CASE("surgery decomposition on a synthetic Gaussian construction") {
    // finitely many actions with known posteriors: k_pt should split into
    // I(A;Z) plus the aggregate-prior KL within Monte-Carlo tolerance
    std::vector<DiagGaussian> posteriors;
    for (int a = 0; a < 4; ++a)
        for (int rep = 0; rep < 100; ++rep)
            posteriors.push_back(
                DiagGaussian{{-1.5 + 1.0 * a, 0.4 * a}, {std::log(0.3), std::log(0.5)}});
    const double k_pt = pointwise_kl_average(posteriors);
    Rng rng_i(31), rng_m(37);
    const double i_action = estimate_i_action(posteriors, 400, rng_i);
    const double agg_kl = mixture_prior_kl_mc(posteriors, 200000, rng_m);
    CHECK(std::fabs(k_pt - i_action - agg_kl) <= 0.02);
    CHECK(agg_kl >= -0.02); // the mismatch term is nonnegative
}

TEST_CASE("aggregate matching can preserve mode information") {
    // disjoint mode-conditioned latents whose mixture is the prior: the
    // aggregate divergence vanishes while the mode information stays at H(M)
    const int K = 4, per_mode = 500;
    Rng rng(41);
    std::vector<std::vector<double>> latents;
    std::vector<int> labels;
    make_clusters({-9.0, -3.0, 3.0, 9.0}, 0.1, per_mode, rng, latents, labels);

    Tensor agg({int64_t(latents.size()), 1});
    for (size_t i = 0; i < latents.size(); ++i) agg.at(int64_t(i)) = float(latents[i][0]);
    // prior = an independent draw from the same mixture
    std::vector<std::vector<double>> prior_latents;
    std::vector<int> prior_labels;
    make_clusters({-9.0, -3.0, 3.0, 9.0}, 0.1, per_mode, rng, prior_latents, prior_labels);
    Tensor prior({int64_t(prior_latents.size()), 1});
    for (size_t i = 0; i < prior_latents.size(); ++i)
        prior.at(int64_t(i)) = float(prior_latents[i][0]);

    CHECK(imq_mmd(agg, prior, imq_default_scales(1)) <= 0.01);
    CHECK(estimate_i_mode(latents, labels, K, 43) >= std::log(double(K)) - 0.05);
}

TEST_CASE("info_chain runs on a kl-cvae policy and keeps its ordering") {
    const TaskSpec task = build_task(TaskId::Sequential);
    const Dataset ds = generate_dataset(task, 200, 3);
    Hyper h;
    h.hidden = 32;
    PolicyState p = make_policy(Family::KlCvae, task, ds.norm, h, 3);
    const InfoChain chain = info_chain(p, ds, 8, 77);
    CHECK(chain.h_mode == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    CHECK(chain.n_samples == 200);
    CHECK(chain.b_fano <= chain.i_mode + 0.05);
    CHECK(chain.i_mode <= chain.i_action + 0.05);
    CHECK(chain.i_action <= chain.k_pt + 0.05);
    PolicyState bcat = make_policy(Family::BCAT, task, ds.norm, h, 3);
    CHECK_THROWS_AS(info_chain(bcat, ds, 8, 77), std::invalid_argument);
}

TEST_CASE("valid mass gap on constructed toy decoders") {
    const TaskSpec task = build_task(TaskId::Circle);
    const Dataset ds = generate_dataset(task, 64, 5);
    Hyper h;
    h.hidden = 16;
    SUBCASE("a decoder pinned at an expert template is valid from both sides") {
        PolicyState p = make_policy(Family::MmdCwae, task, ds.norm, h, 5);
        // zero all decoder weights, bias = normalized template 1
        for (const auto& name : p.decoder.param_names())
            for (int64_t i = 0; i < p.params.at(name).size(); ++i)
                p.params.at(name).at(i) = 0.0f;
        Tensor& bias = p.params.at("dec.b" + std::to_string(p.decoder.widths().size() - 2));
        const Trajectory& tmpl = task.templates[0];
        for (int t = 0; t < task.H; ++t) {
            bias.at(2 * t) = ds.norm.nx(tmpl.xy[size_t(2 * t)]);
            bias.at(2 * t + 1) = ds.norm.ny(tmpl.xy[size_t(2 * t) + 1]);
        }
        const ValidMassReport rep = valid_mass_gap(p, ds, task, 500, 7);
        CHECK(rep.posterior_valid == doctest::Approx(1.0));
        CHECK(rep.prior_valid == doctest::Approx(1.0));
        CHECK(rep.delta_valid == doctest::Approx(0.0));
    }
    SUBCASE("a prior supported off the decoder-valid region loses all its mass") {
        PolicyState p = make_policy(Family::MmdCwae, task, ds.norm, h, 5);
        // encoder constant at z = 6; decoder = template + (z - 6) * big
        for (const auto& name : p.encoder.param_names())
            for (int64_t i = 0; i < p.params.at(name).size(); ++i)
                p.params.at(name).at(i) = 0.0f;
        p.params.at("enc.b" + std::to_string(p.encoder.widths().size() - 2)).at(0) = 6.0f;
        for (const auto& name : p.decoder.param_names())
            for (int64_t i = 0; i < p.params.at(name).size(); ++i)
                p.params.at(name).at(i) = 0.0f;
        const size_t dec_last = p.decoder.widths().size() - 2;
        Tensor& bias = p.params.at("dec.b" + std::to_string(dec_last));
        const Trajectory& tmpl = task.templates[0];
        for (int t = 0; t < task.H; ++t) {
            bias.at(2 * t) = ds.norm.nx(tmpl.xy[size_t(2 * t)]) - 6.0f * 3.0f;
            bias.at(2 * t + 1) = ds.norm.ny(tmpl.xy[size_t(2 * t) + 1]);
        }
        // single linear decoder path: route z through the layers identically is
        // impossible with zeroed weights, so wire the first column chain
        // weight w0[z->h0]=1, w1[h0->h1]=1, w2[h1->h2]=1, w3[h2->outputs_x]=3
        p.params.at("dec.w0").at2(0, 0) = 1.0f;
        p.params.at("dec.w1").at2(0, 0) = 1.0f;
        p.params.at("dec.w2").at2(0, 0) = 1.0f;
        Tensor& w3 = p.params.at("dec.w3");
        for (int t = 0; t < task.H; ++t) w3.at2(0, 2 * t) = 3.0f;
        const ValidMassReport rep = valid_mass_gap(p, ds, task, 400, 7);
        CHECK(rep.posterior_valid > 0.99);
        CHECK(rep.prior_valid < 0.01);
        CHECK(rep.delta_valid == doctest::Approx(rep.posterior_valid).epsilon(0.02));
    }
}
