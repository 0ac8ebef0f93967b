#include "catch_amalgamated.hpp"

#include <functional>
#include <map>
#include <numeric>
#include <vector>

#include "ibattr/detect.hpp"
#include "ibattr/rng.hpp"

using namespace ibattr;

namespace {

std::vector<double> zeros(int h, int w) {
    return std::vector<double>(static_cast<std::size_t>(h) * w, 0.0);
}

void fill_rect(std::vector<double>& g, int w, int r0, int c0, int r1, int c1, double v) {
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) g[static_cast<std::size_t>(r) * w + c] = v;
}

// Independent union-find labeling used as the oracle for the pixel-accounting
// property.
std::vector<int> oracle_components(const std::vector<std::uint8_t>& fg, int h, int w) {
    std::vector<int> parent(fg.size());
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int x) {
        while (parent[static_cast<std::size_t>(x)] != x) {
            parent[static_cast<std::size_t>(x)] =
                parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
            x = parent[static_cast<std::size_t>(x)];
        }
        return x;
    };
    auto unite = [&](int a, int b) { parent[static_cast<std::size_t>(find(a))] = find(b); };
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const int i = r * w + c;
            if (!fg[static_cast<std::size_t>(i)]) continue;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    const int nr = r + dr, nc = c + dc;
                    if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
                    const int ni = nr * w + nc;
                    if (fg[static_cast<std::size_t>(ni)]) unite(i, ni);
                }
        }
    std::vector<int> roots;
    for (std::size_t i = 0; i < fg.size(); ++i)
        if (fg[i]) roots.push_back(find(static_cast<int>(i)));
    return roots;
}

}  // namespace

TEST_CASE("detect basic cases", "[detect]") {
    SECTION("all-zero heatmap yields no detections") {
        REQUIRE(detect(zeros(64, 64), 64, 64).empty());
    }
    SECTION("two disjoint 3x3 squares give two tight boxes") {
        auto g = zeros(64, 64);
        fill_rect(g, 64, 5, 5, 7, 7, 1.0);
        fill_rect(g, 64, 20, 30, 22, 32, 0.8);
        const auto dets = detect(g, 64, 64);
        REQUIRE(dets.size() == 2);
        // equal areas: scan order breaks the tie
        REQUIRE(dets[0].area == 9);
        REQUIRE(dets[1].area == 9);
        REQUIRE(dets[0].row_min == 5);
        REQUIRE(dets[0].col_min == 5);
        REQUIRE(dets[0].row_max == 7);
        REQUIRE(dets[0].col_max == 7);
        REQUIRE(dets[1].row_min == 20);
        REQUIRE(dets[1].col_min == 30);
        REQUIRE(dets[1].row_max == 22);
        REQUIRE(dets[1].col_max == 32);
    }
    SECTION("diagonal touch is one component under 8-connectivity") {
        auto g = zeros(8, 8);
        // two 2x2 blocks touching only at a corner
        fill_rect(g, 8, 0, 0, 1, 1, 1.0);
        fill_rect(g, 8, 2, 2, 3, 3, 1.0);
        const auto dets = detect(g, 8, 8, nullptr, 0.3, 1);
        REQUIRE(dets.size() == 1);
        REQUIRE(dets[0].area == 8);
    }
    SECTION("min_area drops specks") {
        auto g = zeros(16, 16);
        fill_rect(g, 16, 0, 0, 0, 1, 1.0);   // 2 px
        fill_rect(g, 16, 8, 8, 10, 10, 1.0); // 9 px
        const auto dets = detect(g, 16, 16, nullptr, 0.3, 4);
        REQUIRE(dets.size() == 1);
        REQUIRE(dets[0].area == 9);
    }
    SECTION("roi restricts the threshold set") {
        auto g = zeros(8, 8);
        fill_rect(g, 8, 0, 0, 7, 7, 1.0);
        BinaryMask roi{8, 8, std::vector<std::uint8_t>(64, 0)};
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 8; ++c) roi.pix[static_cast<std::size_t>(r) * 8 + c] = 1;
        const auto dets = detect(g, 8, 8, &roi, 0.3, 1);
        REQUIRE(dets.size() == 1);
        REQUIRE(dets[0].area == 32);
        BinaryMask bad{4, 4, std::vector<std::uint8_t>(16, 1)};
        REQUIRE_THROWS_AS(detect(g, 8, 8, &bad), ContractError);
    }
}

TEST_CASE("detect is invariant under positive rescaling", "[detect][property]") {
    SplitMix64 rng(5);
    for (int trial = 0; trial < 25; ++trial) {
        auto g = zeros(32, 32);
        for (auto& v : g) v = rng.uniform() < 0.2 ? rng.uniform(0.1, 1.0) : 0.0;
        auto scaled = g;
        const double k = rng.uniform(0.25, 40.0);
        for (auto& v : scaled) v *= k;
        const auto d1 = detect(g, 32, 32);
        const auto d2 = detect(scaled, 32, 32);
        REQUIRE(d1.size() == d2.size());
        for (std::size_t i = 0; i < d1.size(); ++i) {
            REQUIRE(d1[i].area == d2[i].area);
            REQUIRE(d1[i].row_min == d2[i].row_min);
            REQUIRE(d1[i].col_min == d2[i].col_min);
            REQUIRE(d1[i].row_max == d2[i].row_max);
            REQUIRE(d1[i].col_max == d2[i].col_max);
        }
    }
}

TEST_CASE("detected pixels account for the whole threshold set", "[detect][property]") {
    SplitMix64 rng(7);
    const int h = 24, w = 24;
    const double tau = 0.3;
    const int min_area = 4;
    for (int trial = 0; trial < 25; ++trial) {
        auto g = zeros(h, w);
        for (auto& v : g) v = rng.uniform() < 0.3 ? rng.uniform(0.0, 1.0) : 0.0;
        double mx = 0;
        for (const double v : g) mx = std::max(mx, v);
        std::vector<std::uint8_t> fg(g.size(), 0);
        for (std::size_t i = 0; i < g.size(); ++i)
            fg[i] = (mx > 0 && g[i] / mx > tau) ? 1 : 0;

        // oracle: total threshold pixels minus pixels in sub-min_area components
        auto roots = oracle_components(fg, h, w);
        std::map<int, int> sizes;
        for (const int r : roots) ++sizes[r];
        int expected = 0;
        for (const auto& [root, size] : sizes)
            if (size >= min_area) expected += size;

        const auto dets = detect(g, h, w, nullptr, tau, min_area);
        int got = 0;
        for (const auto& d : dets) got += d.area;
        REQUIRE(got == expected);
    }
}

TEST_CASE("estimate_severity mapping", "[detect][severity]") {
    BinaryMask lung{8, 8, std::vector<std::uint8_t>(64, 0)};
    for (int i = 0; i < 40; ++i) lung.pix[static_cast<std::size_t>(i)] = 1;  // 40 lung px

    auto heat_with_hot = [&](int hot) {
        std::vector<double> g(64, 0.0);
        for (int i = 0; i < hot; ++i) g[static_cast<std::size_t>(i)] = 1.0;
        return g;
    };

    SECTION("fraction 0.30 positive maps to CT-2") {
        const auto est = estimate_severity(heat_with_hot(12), 8, 8, lung, true);
        REQUIRE_THAT(est.ggo_fraction_pred, Catch::Matchers::WithinAbs(0.30, 1e-12));
        REQUIRE(est.severity_pred == SeverityClass::CT2);
    }
    SECTION("fraction 0.80 positive maps to CT-4") {
        const auto est = estimate_severity(heat_with_hot(32), 8, 8, lung, true);
        REQUIRE_THAT(est.ggo_fraction_pred, Catch::Matchers::WithinAbs(0.80, 1e-12));
        REQUIRE(est.severity_pred == SeverityClass::CT4);
    }
    SECTION("negative prediction is CT-0 regardless of the heatmap") {
        const auto est = estimate_severity(heat_with_hot(32), 8, 8, lung, false);
        REQUIRE(est.severity_pred == SeverityClass::CT0);
    }
    SECTION("positive with zero area maps to the minimal positive class") {
        const auto est = estimate_severity(heat_with_hot(0), 8, 8, lung, true);
        REQUIRE(est.ggo_fraction_pred == 0.0);
        REQUIRE(est.severity_pred == SeverityClass::CT1);
    }
    SECTION("empty lung mask is rejected") {
        BinaryMask empty{8, 8, std::vector<std::uint8_t>(64, 0)};
        REQUIRE_THROWS_AS(estimate_severity(heat_with_hot(4), 8, 8, empty, true),
                          ContractError);
    }
}

TEST_CASE("severity is monotone in the heatmap", "[detect][severity][property]") {
    SplitMix64 rng(11);
    BinaryMask lung{16, 16, std::vector<std::uint8_t>(256, 0)};
    for (int i = 40; i < 200; ++i) lung.pix[static_cast<std::size_t>(i)] = 1;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> h1(256), bump(256);
        for (auto& v : h1) v = rng.uniform();
        std::vector<double> h2(h1);
        for (std::size_t i = 0; i < h2.size(); ++i) h2[i] += rng.uniform(0, 0.5);
        const auto e1 = estimate_severity(h1, 16, 16, lung, true);
        const auto e2 = estimate_severity(h2, 16, 16, lung, true);
        REQUIRE(static_cast<int>(e2.severity_pred) >= static_cast<int>(e1.severity_pred));
        REQUIRE(e2.ggo_fraction_pred >= e1.ggo_fraction_pred);
    }
}
