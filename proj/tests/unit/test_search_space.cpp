#include <map>
#include <set>

#include "doctest.h"
#include "parawidth/errors.hpp"
#include "parawidth/search_space.hpp"

using namespace parawidth;

namespace {

LayerSpec conv(const std::string& name, int c, int k, int groups, int source, int out = 8,
               std::optional<std::string> coupling = std::nullopt) {
  LayerSpec s;
  s.name = name;
  s.kind = LayerKind::kConv;
  s.max_out_channels = c;
  s.kernel_h = s.kernel_w = k;
  s.in_h = s.in_w = out;
  s.out_h = s.out_w = out;
  s.group_count = groups;
  s.source = source;
  s.coupling_group = std::move(coupling);
  return s;
}

SearchSpace chain(int layers, int c, int groups, double keep) {
  std::vector<LayerSpec> specs;
  for (int l = 0; l < layers; ++l) specs.push_back(conv("l" + std::to_string(l), c, 3, groups, l - 1));
  return SearchSpace(specs, 3, keep, {8, 8});
}

}  // namespace

TEST_CASE("allowed_choices examples") {
  CHECK(allowed_choices(chain(1, 64, 8, 0.2), 0) == std::vector<int>{16, 24, 32, 40, 48, 56, 64});
  std::vector<int> twenty;
  for (int w = 4; w <= 20; ++w) twenty.push_back(w);
  CHECK(allowed_choices(chain(1, 20, 20, 0.2), 0) == twenty);
  CHECK(allowed_choices(chain(1, 64, 8, 0.0), 0) == std::vector<int>{8, 16, 24, 32, 40, 48, 56, 64});
  CHECK_THROWS_AS(allowed_choices(chain(1, 64, 8, 0.2), 1), IndexError);
  CHECK_THROWS_AS(allowed_choices(chain(1, 64, 8, 0.2), -1), IndexError);
}

TEST_CASE("allowed_choices always contains the maximum and stays on the grid") {
  for (int groups : {1, 2, 4, 5, 8, 10, 20}) {
    for (int mult = 1; mult <= 12; ++mult) {
      for (double keep : {0.0, 0.1, 0.2, 0.25, 0.5, 0.8, 1.0}) {
        const int c = groups * mult;
        const auto choices = allowed_choices(chain(1, c, groups, keep), 0);
        REQUIRE(!choices.empty());
        CHECK(choices.back() == c);
        for (int w : choices) {
          CHECK(w % mult == 0);
          CHECK(w >= static_cast<int>(std::ceil(keep * c - 1e-9)));
        }
      }
    }
  }
}

TEST_CASE("indivisible channel counts are rejected") {
  CHECK_THROWS_AS(chain(1, 30, 8, 0.2), ConfigError);
}

TEST_CASE("coupled layers must agree") {
  std::vector<LayerSpec> specs{conv("a", 16, 3, 4, -1, 8, "g"), conv("b", 32, 3, 4, 0, 8, "g")};
  CHECK_THROWS_AS(SearchSpace(specs, 3, 0.2, {8, 8}), ConfigError);
  specs[1].max_out_channels = 16;
  specs[1].group_count = 2;
  CHECK_THROWS_AS(SearchSpace(specs, 3, 0.2, {8, 8}), ConfigError);
}

TEST_CASE("space_size examples") {
  CHECK(space_size(chain(3, 10, 10, 0.0)) == 1000);
  BigInt expect = 1;
  for (int i = 0; i < 50; ++i) expect *= 20;
  CHECK(space_size(chain(50, 20, 20, 0.0)) == expect);
  std::vector<LayerSpec> specs{conv("a", 10, 3, 5, -1, 8, "g"), conv("b", 10, 3, 5, 0, 8, "g")};
  CHECK(space_size(SearchSpace(specs, 3, 0.0, {8, 8})) == 5);
}

TEST_CASE("space_size agrees with enumeration") {
  std::vector<LayerSpec> specs{conv("a", 16, 3, 4, -1, 8, "g"), conv("b", 24, 3, 3, 0), conv("c", 16, 1, 4, 1, 8, "g"),
                               conv("d", 40, 3, 5, 2)};
  SearchSpace space(specs, 3, 0.2, {8, 8});
  std::set<WidthConfig> seen;
  const auto visited = enumerate_configs(space, [&](const WidthConfig& c) {
    CHECK(is_valid(space, c));
    seen.insert(c);
  });
  CHECK(BigInt(visited) == space_size(space));
  CHECK(seen.size() == visited);
}

TEST_CASE("sample_uniform respects the space and is deterministic") {
  std::vector<LayerSpec> specs{conv("a", 16, 3, 4, -1, 8, "g"), conv("b", 24, 3, 3, 0), conv("c", 16, 1, 4, 1, 8, "g")};
  SearchSpace space(specs, 3, 0.2, {8, 8});
  Rng r1(42), r2(42);
  for (int i = 0; i < 500; ++i) {
    const auto a = sample_uniform(space, r1);
    CHECK(is_valid(space, a));
    CHECK(a.widths[0] == a.widths[2]);
    CHECK(a == sample_uniform(space, r2));
  }
}

TEST_CASE("sample_uniform frequencies are uniform") {
  SearchSpace space = chain(1, 16, 4, 0.0);
  Rng rng(1);
  std::map<int, int> counts;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) counts[sample_uniform(space, rng).widths[0]]++;
  REQUIRE(counts.size() == 4);
  double chi2 = 0;
  for (auto [w, n] : counts) {
    CHECK(std::abs(n / static_cast<double>(draws) - 0.25) <= 0.01);
    chi2 += (n - draws / 4.0) * (n - draws / 4.0) / (draws / 4.0);
  }
  CHECK(chi2 < 16.27);  // 3 dof, p = 0.001
}

TEST_CASE("single-choice space samples its only config") {
  SearchSpace space = chain(3, 16, 1, 0.2);
  Rng rng(3);
  CHECK(sample_uniform(space, rng) == largest_config(space));
}

TEST_CASE("flops and params of a single conv") {
  std::vector<LayerSpec> specs{conv("a", 16, 3, 1, -1, 32)};
  SearchSpace space(specs, 3, 0.2, {32, 32});
  CHECK(flops(space, largest_config(space)) == 442368);
  CHECK(params(space, largest_config(space)) == 3 * 16 * 9);
  CHECK_THROWS_AS(flops(space, WidthConfig{{8}}), ConstraintError);
}

TEST_CASE("depthwise and linear cost terms") {
  LayerSpec dw = conv("dw", 16, 3, 4, 0, 8, "g");
  dw.kind = LayerKind::kDepthwise;
  LayerSpec fc;
  fc.name = "fc";
  fc.kind = LayerKind::kLinear;
  fc.max_out_channels = 10;
  fc.in_h = fc.in_w = 2;
  fc.source = 1;
  std::vector<LayerSpec> specs{conv("a", 16, 1, 4, -1, 8, "g"), dw, fc};
  SearchSpace space(specs, 3, 0.0, {8, 8});
  const WidthConfig c{{8, 8, 10}};
  CHECK(flops(space, c) == 3 * 8 * 64 + 8 * 9 * 64 + 8 * 4 * 10);
  CHECK(params(space, c) == 3 * 8 + 8 * 9 + 8 * 4 * 10);
}

TEST_CASE("costs are monotone in every coordinate and maximal at the largest config") {
  std::vector<LayerSpec> specs{conv("a", 16, 3, 4, -1, 8, "g"), conv("b", 24, 3, 3, 0), conv("c", 16, 1, 4, 1, 8, "g"),
                               conv("d", 40, 3, 5, 2)};
  SearchSpace space(specs, 3, 0.0, {8, 8});
  const auto top = flops(space, largest_config(space));
  Rng rng(5);
  for (int i = 0; i < 300; ++i) {
    auto c = sample_uniform(space, rng);
    CHECK(flops(space, c) <= top);
    for (int dof = 0; dof < space.num_dofs(); ++dof) {
      const auto& ch = space.dof_choices(dof);
      auto pos = std::find(ch.begin(), ch.end(), c.widths[static_cast<std::size_t>(space.dof_layers(dof)[0])]);
      if (pos + 1 == ch.end()) continue;
      auto bigger = c;
      for (int l : space.dof_layers(dof)) bigger.widths[static_cast<std::size_t>(l)] = *(pos + 1);
      CHECK(flops(space, bigger) >= flops(space, c));
      CHECK(params(space, bigger) >= params(space, c));
    }
  }
}

TEST_CASE("uniform_config lands near the target") {
  SearchSpace space = chain(4, 64, 8, 0.2);
  const auto full = flops(space, largest_config(space));
  const auto half = uniform_config(space, full / 2);
  CHECK(is_valid(space, half));
  for (std::size_t l = 1; l < half.widths.size(); ++l) CHECK(half.widths[l] == half.widths[0]);
  CHECK(std::abs(static_cast<double>(flops(space, half)) / full - 0.5) < 0.15);
}

TEST_CASE("width parsing") {
  CHECK(parse_widths(" 16, 24 ,32").widths == std::vector<int>{16, 24, 32});
  CHECK(to_string(WidthConfig{{1, 2}}) == "1,2");
  CHECK_THROWS_AS(parse_widths("16,x"), ConfigError);
  CHECK_THROWS_AS(parse_widths(""), ConfigError);
}
