#include <catch2/catch_amalgamated.hpp>

#include <cstdint>

#include "kctrace/metrics.hpp"
#include "kctrace/util.hpp"

using namespace kctrace;

// Reference AUC straight from the pairwise definition, in the same 2U integer
// units as the production rank-based path, so equality checks are exact.
static std::optional<double> auc_pairwise(const std::vector<int>& y,
                                          const std::vector<double>& s) {
    std::uint64_t two_u = 0, np = 0, nn = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i]) {
            ++np;
        } else {
            ++nn;
        }
    }
    if (np == 0 || nn == 0) return std::nullopt;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (!y[i]) continue;
        for (std::size_t j = 0; j < y.size(); ++j) {
            if (y[j]) continue;
            if (s[i] > s[j])
                two_u += 2;
            else if (s[i] == s[j])
                two_u += 1;
        }
    }
    return static_cast<double>(two_u) / (2.0 * np * nn);
}

TEST_CASE("auc on a small mixed example") {
    std::vector<int> y{0, 0, 1, 1};
    std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    auto a = auc_score(y, s);
    REQUIRE(a.has_value());
    REQUIRE(*a == Catch::Approx(0.75));
}

TEST_CASE("auc perfect separation") {
    std::vector<int> y{0, 0, 1, 1};
    std::vector<double> s{0.1, 0.2, 0.8, 0.9};
    REQUIRE(*auc_score(y, s) == 1.0);
    std::vector<double> inv{0.9, 0.8, 0.2, 0.1};
    REQUIRE(*auc_score(y, inv) == 0.0);
}

TEST_CASE("auc with all scores tied is one half") {
    std::vector<int> y{0, 1, 0, 1, 1};
    std::vector<double> s{0.5, 0.5, 0.5, 0.5, 0.5};
    REQUIRE(*auc_score(y, s) == 0.5);
}

TEST_CASE("auc is undefined on a single class") {
    REQUIRE(!auc_score({1, 1, 1}, {0.1, 0.5, 0.9}).has_value());
    REQUIRE(!auc_score({0, 0}, {0.1, 0.5}).has_value());
}

TEST_CASE("auc matches the pairwise definition exactly, ties included") {
    Rng rng(1234);
    for (int rep = 0; rep < 50; ++rep) {
        std::size_t n = 2 + rng.bounded(60);
        std::vector<int> y(n);
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = rng.uniform() < 0.4 ? 1 : 0;
            // coarse grid forces plenty of ties
            s[i] = static_cast<double>(rng.bounded(8)) / 8.0;
        }
        auto got = auc_score(y, s);
        auto want = auc_pairwise(y, s);
        REQUIRE(got.has_value() == want.has_value());
        if (got.has_value()) {
            REQUIRE(*got == *want);  // exact binary equality
        }
    }
}

TEST_CASE("rmse examples") {
    REQUIRE(rmse({1, 1}, {0.8, 0.9}) == Catch::Approx(std::sqrt(0.025)));
    REQUIRE(rmse({0, 1}, {0.0, 1.0}) == 0.0);
    REQUIRE(rmse({1}, {0.0}) == 1.0);
}

TEST_CASE("accuracy thresholds at one half, rounding up") {
    REQUIRE(accuracy({1, 0, 1, 0}, {0.9, 0.1, 0.4, 0.6}) == Catch::Approx(0.5));
    REQUIRE(accuracy({1}, {0.5}) == 1.0);
    REQUIRE(accuracy({0}, {0.5}) == 0.0);
}

TEST_CASE("log loss on certain predictions is near zero, clamped") {
    REQUIRE(log_loss({1, 0}, {1.0, 0.0}) < 1e-10);
    REQUIRE(std::isfinite(log_loss({1}, {0.0})));
    REQUIRE(log_loss({1, 0}, {0.5, 0.5}) == Catch::Approx(std::log(2.0)));
}

TEST_CASE("metric input validation") {
    REQUIRE_THROWS_AS(auc_score({1}, {0.1, 0.2}), Error);
    REQUIRE_THROWS_AS(rmse({}, {}), Error);
    REQUIRE_THROWS_AS(accuracy({1}, {}), Error);
}
