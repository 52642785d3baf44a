#include <gtest/gtest.h>

#include <atomic>
#include <numeric>
#include <stdexcept>

#include "cope/common.hpp"

using namespace cope;

TEST(NormalQuantile, MatchesTabulatedValues) {
    EXPECT_NEAR(normal_quantile(0.975), 1.959963984540054, 1e-12);
    EXPECT_NEAR(normal_quantile(0.5), 0.0, 1e-14);
    EXPECT_NEAR(normal_quantile(0.05), -1.6448536269514722, 1e-12);
    EXPECT_NEAR(two_sided_z(0.05), 1.959963984540054, 1e-12);
    EXPECT_NEAR(normal_quantile(1e-10), -6.361340902404056, 1e-9);
}

TEST(SampleStats, UnbiasedVariance) {
    const std::vector<double> xs{1.0, 2.0, 3.0, 4.0};
    EXPECT_DOUBLE_EQ(mean_of(xs), 2.5);
    EXPECT_DOUBLE_EQ(sample_variance(xs), 5.0 / 3.0);
}

TEST(Rng, StreamsAreReproducibleAndDistinct) {
    Rng a = make_rng(42, 3), b = make_rng(42, 3), c = make_rng(42, 4);
    const auto x = a(), y = b(), z = c();
    EXPECT_EQ(x, y);
    EXPECT_NE(x, z);
    EXPECT_NE(mix_seed(1, 2), mix_seed(2, 1));
}

TEST(Rng, UniformAndNormalMoments) {
    Rng rng = make_rng(5, 0);
    double su = 0, sn = 0, sn2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = uniform01(rng);
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        su += u;
        const double z = standard_normal(rng);
        sn += z;
        sn2 += z * z;
    }
    EXPECT_NEAR(su / n, 0.5, 0.005);
    EXPECT_NEAR(sn / n, 0.0, 0.01);
    EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(Rng, SampleIndexFollowsPmf) {
    Rng rng = make_rng(9, 0);
    const std::vector<double> p{0.2, 0.5, 0.3};
    std::vector<int> counts(3, 0);
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sample_index(p, rng))];
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(counts[k] / double(n), p[k], 0.01);
}

TEST(ParallelFor, VisitsEveryIndexOnce) {
    std::vector<std::atomic<int>> hits(1000);
    parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
    for (auto& h : hits) EXPECT_EQ(h.load(), 1);
}

TEST(ParallelFor, PropagatesExceptions) {
    EXPECT_THROW(parallel_for(100, 3,
                              [](std::size_t i) {
                                  if (i == 37) throw std::runtime_error("boom");
                              }),
                 std::runtime_error);
}
