#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "slode/gradcheck.hpp"
#include "slode/objective.hpp"
#include "support/oracles.hpp"

using namespace slode;
using Catch::Approx;
using oracle::random_array;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_times = 12;
    c.d_u = 3;
    c.d_eps = 2;
    c.state_dim = 2;
    c.hidden = 6;
    c.conv_channels = 4;
    return c;
}

SystemInput mixed_input(std::vector<int> labels, std::mt19937_64& rng) {
    SystemInput u;
    const std::size_t b = labels.size();
    u.labels = std::move(labels);
    u.continuous = random_array({b, 2}, rng, -1.0, 1.0);
    return u;
}

void zero_prefix(SlOdeModel& m, const std::string& prefix) {
    for (auto& [name, e] : m.parameters())
        if (name.rfind(prefix, 0) == 0) e.param.mutable_value().fill(0.0);
}

} // namespace

TEST_CASE("ald scalar examples and domain", "[objective][ald]") {
    CHECK(ald_log_density(1.3, 1.3, 1.0, 0.5) == Approx(-1.386294361).epsilon(1e-9));
    CHECK(ald_log_density(3.0, 1.0, 1.0, 0.5) == Approx(-2.386294361).epsilon(1e-9));
    CHECK_THROWS_AS(ald_log_density(0, 0, 1.0, 0.0), DomainError);
    CHECK_THROWS_AS(ald_log_density(0, 0, 1.0, 1.0), DomainError);
    CHECK_THROWS_AS(ald_log_density(0, 0, 0.0, 0.5), DomainError);
    CHECK_THROWS_AS(ald_log_density(0, 0, -1.0, 0.5), DomainError);
    CHECK_THROWS_AS(ald_log_density(Var(Array::vector({0.0})), Var(Array::vector({0.0})), Var(Array::vector({0.0})), 1.5),
                    DomainError);
}

TEST_CASE("ald integrates to one with mass tau below the location", "[objective][ald][property]") {
    for (double tau : {0.025, 0.5, 0.975, 0.2}) {
        for (double sigma : {0.3, 1.0, 2.5}) {
            auto mass = oracle::ald_mass(0.7, sigma, tau);
            INFO("tau=" << tau << " sigma=" << sigma);
            CHECK(std::abs(mass.total - 1.0) < 1e-6);
            CHECK(std::abs(mass.below - tau) < 1e-6);
        }
    }
}

TEST_CASE("ald at tau 0.5 is Laplace with scale 2 sigma", "[objective][ald][property]") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> ud(-5, 5), us(0.05, 4);
    for (int i = 0; i < 1000; ++i) {
        const double y = ud(rng), m = ud(rng), s = us(rng);
        CHECK(std::abs(ald_log_density(y, m, s, 0.5) - oracle::laplace_log_density(y, m, 2.0 * s)) < 1e-12);
    }
}

TEST_CASE("ald maximizer is the empirical quantile", "[objective][ald][property]") {
    std::mt19937_64 rng(32);
    std::normal_distribution<double> nd(0.0, 2.0);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> ys(101);
        for (auto& y : ys) y = nd(rng);
        for (double tau : {0.025, 0.5, 0.975, 0.3}) {
            CHECK(oracle::ald_argmax(ys, ys, 0.7, tau) == oracle::empirical_quantile(ys, tau));
        }
    }
}

TEST_CASE("elementwise ald agrees with the scalar form", "[objective][ald]") {
    std::mt19937_64 rng(33);
    Array y = random_array({4, 3}, rng), m = random_array({4, 3}, rng), ls = random_array({4, 3}, rng, -1, 1);
    Var out = ald_log_density(Var(y), Var(m), Var(ls), 0.3);
    for (std::size_t i = 0; i < y.size(); ++i) {
        CHECK(out[i] == Approx(ald_log_density(y[i], m[i], std::exp(ls[i]), 0.3)).epsilon(1e-13));
    }
    // at y == m the location derivative takes the y > m branch: d/dm = tau / sigma
    Var loc = Var::leaf(Array::vector({0.4}));
    backward(sum(ald_log_density(Var(Array::vector({0.4})), loc, Var(Array::vector({std::log(2.0)})), 0.3)));
    CHECK(loc.grad()[0] == Approx(0.3 / 2.0).epsilon(1e-14));
}

TEST_CASE("quantile reconstruction likelihood", "[objective][recon]") {
    std::mt19937_64 rng(34);
    const std::size_t t = 6, b = 2, k = 3;
    Array yv = random_array({t, b, k}, rng);
    Var y = Var::constant(yv);
    QuantileEmission at_data{y, y, y, Var::constant(Array(Shape{t, b, k}))};
    Var r = recon_log_lik(y, at_data);
    CHECK(r.shape() == Shape{b});
    // sum over the three levels of log(tau (1 - tau)), per entry
    const double per_entry = -8.814688885316343;
    for (std::size_t i = 0; i < b; ++i) CHECK(r[i] == Approx(per_entry * t * k).epsilon(1e-12));

    QuantileEmission doubled{y, y, y, Var::constant(Array(Shape{t, b, k}, std::log(2.0)))};
    Var r2 = recon_log_lik(y, doubled);
    for (std::size_t i = 0; i < b; ++i) {
        CHECK(r2[i] - r[i] == Approx(-3.0 * k * t * std::log(2.0)).epsilon(1e-12));
    }

    Var med = Var::leaf(random_array({t, b, k}, rng));
    Var lo = Var::constant(random_array({t, b, k}, rng, -3, -2));
    Var hi = Var::constant(random_array({t, b, k}, rng, 2, 3));
    Var ls = Var::leaf(random_array({t, b, k}, rng, -0.5, 0.5));
    auto rep = check_gradients([&] { return sum(recon_log_lik(y, QuantileEmission{med, lo, hi, ls})); }, {med, ls});
    CHECK(rep.max_rel_error < 1e-5);

    CHECK_THROWS_AS(recon_log_lik(Var::constant(Array(Shape{t, b, 2})), at_data), DimensionError);
}

TEST_CASE("gaussian log-density", "[objective][gaussian]") {
    CHECK(gaussian_log_density(0.3, 0.3, 0.0) == Approx(-0.918938533).epsilon(1e-9));
    CHECK(gaussian_log_density(1.3, 0.3, 0.0) == Approx(-1.418938533).epsilon(1e-9));
    for (double lv : {-1.0, 0.0, 1.5}) {
        const double sd = std::exp(0.5 * lv);
        const double mass =
            oracle::trapezoid([&](double y) { return std::exp(gaussian_log_density(y, 0.2, lv)); }, 0.2 - 40 * sd,
                              0.2 + 40 * sd, 200000);
        CHECK(std::abs(mass - 1.0) < 1e-8);
    }
    std::mt19937_64 rng(35);
    Array y = random_array({5}, rng), m = random_array({5}, rng), lv = random_array({5}, rng);
    Var g = gaussian_log_density(Var(y), Var(m), Var(lv));
    for (std::size_t i = 0; i < 5; ++i) CHECK(g[i] == Approx(gaussian_log_density(y[i], m[i], lv[i])).epsilon(1e-13));

    Array mean = random_array({4, 2, 3}, rng), logv = random_array({4, 2, 3}, rng);
    Var rg = recon_log_lik(Var(mean), GaussianEmission{Var(mean), Var(logv)});
    for (std::size_t i = 0; i < 2; ++i) {
        double expected = 0.0;
        for (std::size_t tt = 0; tt < 4; ++tt)
            for (std::size_t kk = 0; kk < 3; ++kk)
                expected += -0.5 * (std::log(2 * std::numbers::pi) + logv[(tt * 2 + i) * 3 + kk]);
        CHECK(rg[i] == Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("gaussian kl", "[objective][kl]") {
    auto gp = [](Array m, Array v) { return GaussianParams{Var(std::move(m)), Var(std::move(v))}; };
    CHECK(gaussian_kl(gp(Array::matrix({{1.0}}), Array::matrix({{0.0}})), gp(Array::matrix({{0.0}}), Array::matrix({{0.0}})))[0] ==
          Approx(0.5).epsilon(1e-15));

    std::mt19937_64 rng(36);
    for (int i = 0; i < 200; ++i) {
        Array m1 = random_array({1, 4}, rng), v1 = random_array({1, 4}, rng);
        Array m2 = random_array({1, 4}, rng), v2 = random_array({1, 4}, rng);
        CHECK(gaussian_kl(gp(m1, v1), gp(m2, v2))[0] >= 0.0);
        CHECK(std::abs(gaussian_kl(gp(m1, v1), gp(m1, v1))[0]) < 1e-12);
    }

    // Monte Carlo: E_q[log q - log p]
    Array mq = Array::matrix({{0.3, -0.5}}), vq = Array::matrix({{-0.4, 0.2}});
    Array mp = Array::matrix({{-0.2, 0.1}}), vp = Array::matrix({{0.3, -0.1}});
    const double kl = gaussian_kl(gp(mq, vq), gp(mp, vp))[0];
    std::normal_distribution<double> nd;
    const std::size_t n = 1000000;
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = 0.0;
        for (std::size_t j = 0; j < 2; ++j) {
            const double z = mq[j] + std::exp(0.5 * vq[j]) * nd(rng);
            d += gaussian_log_density(z, mq[j], vq[j]) - gaussian_log_density(z, mp[j], vp[j]);
        }
        s1 += d;
        s2 += d * d;
    }
    const double mean = s1 / n, se = std::sqrt((s2 / n - mean * mean) / n);
    CHECK(std::abs(mean - kl) < 3.0 * se);

    CHECK_THROWS_AS(gaussian_kl(gp(Array::matrix({{0.0, 0.0}}), Array::matrix({{0.0, 0.0}})),
                                gp(Array::matrix({{0.0}}), Array::matrix({{0.0}}))),
                    DimensionError);
}

TEST_CASE("log p(u)", "[objective]") {
    SystemInput u;
    u.labels = {0, 2};
    u.continuous = Array::matrix({{0.0, 0.0}, {1.0, -1.0}});
    Array lp = log_prior_u(u, InputSpec{4, 2});
    CHECK(lp[0] == Approx(std::log(0.25) - std::log(2 * std::numbers::pi)).epsilon(1e-14));
    CHECK(lp[1] == Approx(std::log(0.25) - std::log(2 * std::numbers::pi) - 1.0).epsilon(1e-14));
    CHECK(log_prior_u(u, InputSpec{4, 0})[1] == Approx(std::log(0.25)).epsilon(1e-15));
}

TEST_CASE("estimate of log q(u | Y)", "[objective][qu]") {
    SlOdeModel m(small_config(), 40);
    std::mt19937_64 rng(41);
    Array y = random_array({2, 3, 12}, rng, 0, 1);
    SystemInput u = mixed_input({1, 2}, rng);
    auto q = m.encode(Var::constant(y));

    // S = 1 equals the single-sample head density
    Array eta = SlOdeModel::standard_normal({1, 2, 3}, rng);
    Var est = estimate_log_q_u_given_y(m, q, u, eta);
    Array zu(Shape{2, 3});
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            zu.at(i, j) = q.mean.value().at(i, j) + std::exp(0.5 * q.log_var.value().at(i, j)) * eta.at(0, i, j);
    Var direct = log_q_u_given_z(m.input_head(Var::constant(zu)), u);
    for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(est[i] - direct[i]) < 1e-12);

    // constant head
    ModelConfig cat = small_config();
    cat.inputs = {4, 0};
    SlOdeModel mc(cat, 42);
    zero_prefix(mc, "input_head");
    SystemInput uc;
    uc.labels = {0, 3};
    uc.continuous = Array(Shape{2, 0});
    for (std::size_t S : {1u, 7u, 50u}) {
        Var e = estimate_log_q_u_given_y(mc, y, uc, S, rng);
        for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(e[i] - std::log(0.25)) < 1e-12);
    }
    CHECK_THROWS_AS(estimate_log_q_u_given_y(mc, y, uc, 0, rng), ArgumentError);
}

TEST_CASE("estimate of log q(u | Y) converges in S", "[objective][qu][property]") {
    ModelConfig cat = small_config();
    cat.inputs = {4, 0};
    SlOdeModel m(cat, 43);
    std::mt19937_64 rng(44);
    Array y = random_array({1, 3, 12}, rng, 0, 1);
    SystemInput u;
    u.labels = {2};
    u.continuous = Array(Shape{1, 0});
    NoGradGuard ng;
    const double a = estimate_log_q_u_given_y(m, y, u, 4096, rng)[0];
    const double b = estimate_log_q_u_given_y(m, y, u, 65536, rng)[0];
    CHECK(std::abs(a - b) < 0.02);
}

TEST_CASE("elbo with a constant input head collapses to the plain bound", "[objective][elbo]") {
    ModelConfig cat = small_config();
    cat.inputs = {4, 0};
    SlOdeModel m(cat, 45);
    zero_prefix(m, "input_head");
    std::mt19937_64 rng(46);
    Array y = random_array({3, 3, 12}, rng, 0, 1);
    SystemInput u;
    u.labels = {0, 1, 3};
    u.continuous = Array(Shape{3, 0});
    const TimeGrid grid = TimeGrid::uniform(0, 3, 12);
    ElboNoise noise = ElboNoise::draw(3, cat.latent_dim(), cat.d_u, 10, rng);
    ElboResult r = elbo(m, y, u, grid, noise);

    // independent assembly of recon + log p(z) - log q(z | Y) + log p(u)
    auto q = m.encode(Var::constant(y));
    auto lat = m.reparameterize(q, noise.outer);
    auto em = m.emit(m.solve(lat, grid, SolverConfig{}));
    Array ytm = to_time_major(y);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto& s = r.series[i];
        CHECK(std::abs(s.importance_weight - 1.0) < 1e-12);
        CHECK(std::abs(s.log_q_u_given_y - std::log(0.25)) < 1e-12);
        double recon = 0.0;
        for (std::size_t t = 0; t < 12; ++t)
            for (std::size_t k = 0; k < 3; ++k) {
                const std::size_t idx = (t * 3 + i) * 3 + k;
                const double sig = std::exp(em.log_sigma.value()[idx]);
                recon += ald_log_density(ytm[idx], em.lower.value()[idx], sig, 0.025) +
                         ald_log_density(ytm[idx], em.median.value()[idx], sig, 0.5) +
                         ald_log_density(ytm[idx], em.upper.value()[idx], sig, 0.975);
            }
        CHECK(s.recon_log_lik == Approx(recon).epsilon(1e-12));
        auto prior = m.conditional_prior(u);
        double log_pz = 0.0, log_qz = 0.0;
        for (std::size_t j = 0; j < cat.latent_dim(); ++j) {
            const double z = lat.z.value().at(i, j);
            log_pz += j < cat.d_u ? gaussian_log_density(z, prior.mean.value().at(i, j), prior.log_var.value().at(i, j))
                                  : gaussian_log_density(z, 0.0, 0.0);
            log_qz += gaussian_log_density(z, q.mean.value().at(i, j), q.log_var.value().at(i, j));
        }
        CHECK(s.log_p_u == Approx(std::log(0.25)).epsilon(1e-15));
        CHECK(s.total == Approx(s.log_p_u + recon + log_pz - log_qz).epsilon(1e-10));
        CHECK(s.total == Approx(s.log_q_u_given_y + s.log_p_u + s.weighted_log_ratio).epsilon(1e-12));
    }
}

TEST_CASE("elbo is deterministic for a fixed seed", "[objective][elbo]") {
    SlOdeModel m(small_config(), 47);
    std::mt19937_64 data_rng(48);
    Array y = random_array({2, 3, 12}, data_rng, 0, 1);
    SystemInput u = mixed_input({0, 2}, data_rng);
    const TimeGrid grid = TimeGrid::uniform(0, 3, 12);
    std::mt19937_64 r1(7), r2(7);
    auto a = elbo(m, y, u, grid, 50, r1), b = elbo(m, y, u, grid, 50, r2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(a.series[i].total == b.series[i].total);
        CHECK(a.series[i].recon_log_lik == b.series[i].recon_log_lik);
        CHECK(a.series[i].importance_weight == b.series[i].importance_weight);
        CHECK(std::isfinite(a.series[i].total));
    }
    CHECK_THROWS_AS(elbo(m, y, u, grid, 0, r1), ArgumentError);
    CHECK_THROWS_AS(elbo(m, y, u, TimeGrid::uniform(0, 3, 13), 5, r1), DimensionError);
}

TEST_CASE("per-series noise streams are independent of batching", "[objective][elbo]") {
    std::vector<std::mt19937_64> two{std::mt19937_64(1), std::mt19937_64(2)};
    std::vector<std::mt19937_64> one{std::mt19937_64(2)};
    auto a = ElboNoise::draw(two, 5, 3, 4);
    auto b = ElboNoise::draw(one, 5, 3, 4);
    for (std::size_t j = 0; j < 5; ++j) CHECK(a.outer.at(1, j) == b.outer.at(0, j));
    for (std::size_t s = 0; s < 4; ++s)
        for (std::size_t j = 0; j < 3; ++j) CHECK(a.inner.at(s, 1, j) == b.inner.at(s, 0, j));
}

TEST_CASE("bound property on the linear-Gaussian toy", "[objective][elbo][property]") {
    oracle::LinearGaussianToy toy;
    const double y = 0.7;
    const int u = 1;
    const double evidence = toy.evidence_quadrature(y, u);
    CHECK(std::abs(evidence - toy.evidence_closed_form(y, u)) < 1e-6);
    std::mt19937_64 rng(49);
    auto draws = toy.elbo_draws(y, u, 10000, 50, rng);
    auto ms = oracle::mean_and_se(draws);
    INFO("mean " << ms.mean << " se " << ms.se << " evidence " << evidence);
    CHECK(ms.mean <= evidence + 3.0 * ms.se);
}

TEST_CASE("full bound gradient matches finite differences with frozen noise", "[objective][elbo][gradcheck]") {
    for (auto mode : {EmissionMode::ald, EmissionMode::gaussian}) {
        for (auto wg : {WeightGradient::ratio, WeightGradient::numerator_only}) {
            for (const auto& g : oracle::frozen_elbo_gradcheck(1, mode, wg)) {
                INFO(to_string(mode) << " " << static_cast<int>(wg) << " " << g.name << " rel error " << g.rel_error);
                CHECK(g.rel_error < 1e-3);
            }
        }
    }
}

TEST_CASE("input head receives gradient", "[objective][elbo]") {
    SlOdeModel m(small_config(), 51);
    std::mt19937_64 rng(52);
    Array y = random_array({2, 3, 12}, rng, 0, 1);
    SystemInput u = mixed_input({1, 3}, rng);
    auto r = elbo(m, y, u, TimeGrid::uniform(0, 3, 12), 20, rng);
    backward(r.objective);
    double norm = 0.0;
    for (double g : m.parameters().get("input_head.fc2.weight").grad().values()) norm += g * g;
    CHECK(norm > 0.0);
}

TEST_CASE("head gradient modes split the backward pass", "[objective][elbo]") {
    SlOdeModel m(small_config(), 61);
    std::mt19937_64 rng(62);
    Array y = random_array({3, 3, 12}, rng, 0, 1);
    SystemInput u = mixed_input({0, 2, 3}, rng);
    const TimeGrid grid = TimeGrid::uniform(0, 3, 12);
    ElboNoise noise = ElboNoise::draw(3, m.config().latent_dim(), m.config().d_u, 7, rng);
    auto& params = m.parameters();

    auto grads = [&] {
        std::map<std::string, Array> g;
        for (auto& [n, e] : params) g.emplace(n, e.param.grad());
        params.zero_grad();
        return g;
    };
    params.zero_grad();
    backward(neg(elbo(m, y, u, grid, noise).objective));
    auto full = grads();
    backward(neg(mean(elbo(m, y, u, grid, noise).head_fit)));
    auto supervised = grads();
    backward_elbo(elbo(m, y, u, grid, noise), params, HeadGradient::supervised);
    auto split = grads();
    backward_elbo(elbo(m, y, u, grid, noise), params, HeadGradient::bound);
    auto bound = grads();
    const double weight = 2.5;
    backward_elbo(elbo(m, y, u, grid, noise), params, HeadGradient::auxiliary, weight);
    auto auxiliary = grads();

    std::size_t heads = 0, encoders = 0;
    for (const auto& [n, g] : split) {
        INFO(n);
        CHECK(bound.at(n) == full.at(n));
        if (SlOdeModel::is_input_head_parameter(n)) {
            ++heads;
            CHECK(g == supervised.at(n));
            CHECK(auxiliary.at(n) == supervised.at(n));
        } else if (SlOdeModel::is_encoder_parameter(n)) {
            ++encoders;
            CHECK(g == full.at(n));
            Array expected = full.at(n);
            for (std::size_t i = 0; i < expected.size(); ++i) expected[i] += weight * supervised.at(n)[i];
            CHECK(auxiliary.at(n) == expected);
        } else {
            CHECK(g == full.at(n));
            CHECK(auxiliary.at(n) == full.at(n));
        }
    }
    CHECK(heads > 0);
    CHECK(encoders > 0);
}
