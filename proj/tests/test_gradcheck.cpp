#include <catch2/catch_amalgamated.hpp>

#include "ordmoe/autodiff.hpp"
#include "ordmoe/gradcheck.hpp"
#include "ordmoe/rng.hpp"

using namespace ordmoe;
using Catch::Matchers::ContainsSubstring;
using T = Tensor<double>;

namespace {

T fill_gaussian(const Shape& shape, Rng& rng, double scale, bool grad = true) {
  auto t = T::zeros(shape, grad);
  for (auto& v : t.value()) v = rng.gaussian() * scale;
  return t;
}

/// Scales by 3 in the forward pass but claims a factor of 2 going backward.
T corrupted_scale(const T& x) {
  auto out = detail::make_node<double>(x.shape(), {x.node()}, "corrupted_scale");
  for (std::size_t i = 0; i < x.numel(); ++i) out.value()[i] = 3.0 * x.value()[i];
  out.node()->backprop = [](TensorNode<double>& self) {
    double* g = self.parents[0]->grad_acc();
    if (!g) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += 2.0 * self.grad[i];
  };
  return out;
}

}  // namespace

TEST_CASE("finite differences agree on a composite network", "[gradcheck]") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed);
    auto w1 = fill_gaussian({4, 6}, rng, 0.5);
    auto b1 = fill_gaussian({6}, rng, 0.2);
    auto w2 = fill_gaussian({6, 3}, rng, 0.5);
    auto gain = T::filled({3}, 1.0, true);
    auto x = fill_gaussian({2, 4}, rng, 1.0, false);

    auto loss_fn = [&] {
      auto h = activate(add_rows(matmul(x, w1), b1), Activation::silu);
      auto y = rms_norm(matmul(h, w2), gain);
      return mean(mul(y, y));
    };
    auto report = finite_diff_check<double>(
        {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"gain", gain}}, loss_fn);
    INFO(report.to_string());
    REQUIRE(report.pass);
    REQUIRE(report.max_rel_err < 1e-4);
    REQUIRE(report.checked == 4 * 6 + 6 + 6 * 3 + 3);
  }
}

TEST_CASE("softmax-family gradients pass finite differences", "[gradcheck]") {
  Rng rng(7);
  auto logits = fill_gaussian({3, 5}, rng, 1.0);
  auto loss_fn = [&] {
    auto p = masked_row_softmax(logits, {{0, 2}, {1, 3, 4}, {0, 1, 2, 3, 4}});
    auto lp = gather_log_softmax(logits, {{0, 1}, {2, 4}});
    return add(sum(mul(p, p)), mean(lp));
  };
  auto report = finite_diff_check<double>({{"logits", logits}}, loss_fn);
  INFO(report.to_string());
  REQUIRE(report.pass);
}

TEST_CASE("a corrupted backward is caught and the parameter named", "[gradcheck]") {
  Rng rng(11);
  auto router_weight = fill_gaussian({4, 4}, rng, 0.5);
  auto x = fill_gaussian({1, 4}, rng, 1.0, false);
  auto loss_fn = [&] { return mean(corrupted_scale(matmul(x, router_weight))); };
  auto report = finite_diff_check<double>({{"router.weight", router_weight}}, loss_fn);
  REQUIRE_FALSE(report.pass);
  REQUIRE(report.worst.param == "router.weight");
  REQUIRE_FALSE(report.failures.empty());
  REQUIRE_THAT(report.to_string(), ContainsSubstring("router.weight"));
}

TEST_CASE("coordinate subsampling strides deterministically", "[gradcheck]") {
  auto big = T::zeros({100}, true);
  for (std::size_t i = 0; i < 100; ++i) big.value()[i] = 0.01 * static_cast<double>(i);
  auto loss_fn = [&] { return sum(mul(big, big)); };
  auto full = finite_diff_check<double>({{"big", big}}, loss_fn);
  auto sub = finite_diff_check<double>({{"big", big}}, loss_fn, 1e-5, 1e-4, 1e-4, 8, 10);
  REQUIRE(full.checked == 100);
  REQUIRE(sub.checked == 10);
  REQUIRE(sub.pass);
  auto again = finite_diff_check<double>({{"big", big}}, loss_fn, 1e-5, 1e-4, 1e-4, 8, 10);
  REQUIRE(again.checked == sub.checked);
  REQUIRE(again.max_rel_err == sub.max_rel_err);
}

TEST_CASE("near-zero gradients are judged against the noise floor", "[gradcheck]") {
  auto x = T::from({1}, {0.0}, true);
  // loss = x^3 has zero gradient at 0; central differences return ~epsilon^2.
  auto loss_fn = [&] { return sum(mul(mul(x, x), x)); };
  auto report = finite_diff_check<double>({{"x", x}}, loss_fn);
  REQUIRE(report.pass);
}
