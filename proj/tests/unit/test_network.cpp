#include <cmath>
#include <sstream>

#include "doctest.h"
#include "parawidth/errors.hpp"
#include "parawidth/network.hpp"
#include "test_nets.hpp"

using namespace parawidth;

namespace {

Architecture single_conv(int in_c, int out_c, int kernel, int stride, int hw, bool bn) {
  nlohmann::json doc = {
      {"name", "single"},
      {"input_channels", in_c},
      {"reference_resolution", {hw, hw}},
      {"group_count", 1},
      {"layers",
       {{{"name", "c"}, {"kind", "conv"}, {"out", out_c}, {"kernel", kernel}, {"stride", stride}, {"bn", bn},
         {"relu", false}},
        {{"name", "gap"}, {"kind", "avgpool"}},
        {{"name", "head"}, {"kind", "linear"}, {"out", 2}}}}};
  return parse_architecture(doc);
}

}  // namespace

TEST_CASE("conv forward matches a direct convolution, full and sliced") {
  Rng rng(5);
  for (int trial = 0; trial < 12; ++trial) {
    const int kernel = trial % 2 ? 3 : 1, stride = 1 + trial % 3 / 2;
    Architecture arch = testnets::two_layer_net(3, 8, 8, 4, 7, 4, false);
    Network<double> net(arch, 100 + trial);
    (void)kernel;
    (void)stride;
    const auto x = testnets::random_tensor<double>(2, 3, 7, 7, rng);
    const WidthConfig cfg{{trial % 2 ? 4 : 8, 8, 4}};
    const ForwardTrace<double> trace = net.forward(x, sliced_plan(arch, cfg), BnUsage::kRunning);
    const auto& w1 = net.params()[static_cast<std::size_t>(net.node_params(0).weight)].value;
    Tensor<double> ref = testnets::naive_conv(x, w1, 8, 3, cfg.widths[0], 3, 3, 1, 1);
    for (double& v : ref.values()) v = std::max(v, 0.0);
    REQUIRE(ref.shape() == trace.nodes[0].out.shape());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(trace.nodes[0].out.values()[i] == doctest::Approx(ref.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("strided and 1x1 convolutions match the direct loop") {
  Rng rng(9);
  for (int kernel : {1, 3, 5}) {
    for (int stride : {1, 2}) {
      Architecture arch = single_conv(3, 6, kernel, stride, 9, false);
      Network<float> net(arch, 1);
      const auto x = testnets::random_tensor<float>(3, 3, 9, 9, rng);
      const auto trace = net.forward(x, sliced_plan(arch, largest_config(arch.space)), BnUsage::kRunning);
      const auto& w = net.params()[0].value;
      const auto ref = testnets::naive_conv(x, w, 6, 3, 6, kernel, kernel, stride, (kernel - 1) / 2);
      REQUIRE(ref.shape() == trace.nodes[0].out.shape());
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(trace.nodes[0].out.values()[i] == doctest::Approx(ref.values()[i]).epsilon(1e-5));
    }
  }
}

TEST_CASE("batch norm with running statistics is the affine formula") {
  Architecture arch = single_conv(1, 2, 1, 1, 2, true);
  Network<double> net(arch, 3);
  net.params()[0].value = {2.0, -1.0};
  auto& gamma = net.params()[static_cast<std::size_t>(net.node_params(0).gamma)].value;
  auto& beta = net.params()[static_cast<std::size_t>(net.node_params(0).beta)].value;
  gamma = {1.5, 0.5};
  beta = {0.25, -0.75};
  net.running_mean(0) = {1.0, -2.0};
  net.running_var(0) = {4.0, 0.25};
  Tensor<double> x(1, 1, 2, 2);
  x.values()[0] = 3.0;
  const auto trace = net.forward(x, sliced_plan(arch, largest_config(arch.space)), BnUsage::kRunning);
  const double expect0 = 1.5 * (6.0 - 1.0) / std::sqrt(4.0 + 1e-5) + 0.25;
  const double expect1 = 0.5 * (-3.0 + 2.0) / std::sqrt(0.25 + 1e-5) - 0.75;
  CHECK(trace.nodes[0].out.at(0, 0, 0, 0) == doctest::Approx(expect0).epsilon(1e-14));
  CHECK(trace.nodes[0].out.at(0, 1, 0, 0) == doctest::Approx(expect1).epsilon(1e-14));
}

TEST_CASE("batch statistics normalize each channel to zero mean") {
  Rng rng(2);
  Architecture arch = single_conv(2, 4, 3, 1, 5, true);
  Network<double> net(arch, 4);
  const auto x = testnets::random_tensor<double>(6, 2, 5, 5, rng);
  const auto trace = net.forward(x, sliced_plan(arch, largest_config(arch.space)), BnUsage::kBatch);
  const auto& out = trace.nodes[0].out;
  for (int c = 0; c < 4; ++c) {
    double s = 0, ss = 0;
    for (int n = 0; n < 6; ++n)
      for (std::size_t p = 0; p < out.plane(); ++p) {
        s += out.channel(n, c)[p];
        ss += out.channel(n, c)[p] * out.channel(n, c)[p];
      }
    const double m = 6.0 * out.plane();
    CHECK(std::abs(s / m) < 1e-12);
    CHECK(ss / m == doctest::Approx(1.0).epsilon(1e-3));
  }
  CHECK(net.running_mean(0) == std::vector<double>(4, 0.0));
}

TEST_CASE("momentum mode updates running statistics") {
  Rng rng(2);
  Architecture arch = single_conv(2, 4, 3, 1, 5, true);
  Network<double> net(arch, 4);
  const auto x = testnets::random_tensor<double>(6, 2, 5, 5, rng);
  net.forward(x, sliced_plan(arch, largest_config(arch.space)), BnUsage::kBatchMomentum);
  CHECK(net.running_mean(0) != std::vector<double>(4, 0.0));
}

TEST_CASE("sliced gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(seed);
    Architecture arch = testnets::two_layer_net(2, 6, 4, 3, 5, 2, true);
    Network<double> net(arch, seed);
    testnets::randomize_bn(net, rng);
    const WidthConfig cfg{{3, 2, 3}};
    const ChannelPlan plan = sliced_plan(arch, cfg);
    const auto x = testnets::random_tensor<double>(4, 2, 5, 5, rng);
    const auto labels = testnets::random_labels(4, 3, rng);
    auto loss = [&] {
      const auto t = net.forward(x, plan, BnUsage::kBatch);
      return softmax_cross_entropy(t.logits(), labels, 0, 4, nullptr);
    };
    auto trace = net.forward(x, plan, BnUsage::kBatch);
    Tensor<double> d(4, 3, 1, 1);
    softmax_cross_entropy(trace.logits(), labels, 0, 4, &d);
    net.zero_grad();
    net.backward(trace, d, plan);
    for (auto& p : net.params()) {
      for (std::size_t i = 0; i < p.value.size(); i += 3) {
        const double saved = p.value[i];
        p.value[i] = saved + 1e-6;
        const double up = loss();
        p.value[i] = saved - 1e-6;
        const double down = loss();
        p.value[i] = saved;
        const double fd = (up - down) / 2e-6;
        CHECK(std::abs(fd - p.grad[i]) <= 1e-3 * std::max(1e-3, std::abs(fd)) + 1e-7);
      }
    }
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  Architecture arch = testnets::two_layer_net(3, 8, 8, 4, 6, 4, true);
  Network<float> a(arch, 1), b(arch, 2);
  REQUIRE(a.digest() != b.digest());
  std::stringstream buf;
  a.save(buf);
  b.load(buf);
  CHECK(a.digest() == b.digest());
  for (std::size_t i = 0; i < a.params().size(); ++i) CHECK(a.params()[i].value == b.params()[i].value);

  Architecture other = testnets::two_layer_net(3, 16, 8, 4, 6, 4, true);
  Network<float> c(other, 1);
  std::stringstream buf2;
  a.save(buf2);
  CHECK_THROWS_AS(c.load(buf2), ConfigError);
}

TEST_CASE("softmax cross entropy of uniform logits is log(classes)") {
  Tensor<double> logits(2, 5, 1, 1);
  const std::vector<int> labels{0, 4};
  Tensor<double> d(2, 5, 1, 1);
  CHECK(softmax_cross_entropy(logits, labels, 0, 2, &d) == doctest::Approx(std::log(5.0)));
  CHECK(d.at(0, 0, 0, 0) == doctest::Approx((0.2 - 1.0) / 2));
  CHECK(d.at(1, 0, 0, 0) == doctest::Approx(0.2 / 2));
  CHECK(count_correct(logits, labels) == 1);  // ties resolve to class 0
}

TEST_CASE("forward rejects mismatched inputs") {
  Architecture arch = testnets::two_layer_net(3, 8, 8, 4, 6, 4, false);
  Network<float> net(arch, 1);
  Tensor<float> x(2, 2, 6, 6);
  CHECK_THROWS_AS(net.forward(x, sliced_plan(arch, largest_config(arch.space)), BnUsage::kRunning), DimensionError);
  CHECK_THROWS_AS(sliced_plan(arch, WidthConfig{{3, 8, 4}}), ConstraintError);
}
