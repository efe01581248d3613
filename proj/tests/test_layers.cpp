#include <doctest.h>

#include <cmath>

#include "dir3d/config.hpp"
#include "dir3d/errors.hpp"
#include "dir3d/gradcheck.hpp"
#include "dir3d/layers.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace dir3d;
using oracle::random_parameter;
using oracle::random_tensor;
using namespace fixture;

namespace {

std::vector<double> vals(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_SUITE("landmark_residual_block") {
  TEST_CASE("ones mask, zero branches and identity activation reproduce the input") {
    auto p = tiny_block(3, 1, Activation::Identity);
    zero_all(p);
    auto x = random_tensor({2, 3, 4, 4, 3}, 2);
    auto y = landmark_residual_block(x, std::optional{Tensor<double>({2, 3, 4, 4, 1}, 1.0)}, p);
    CHECK(vals(y) == vals(x));
  }

  TEST_CASE("zero mask, zero branches and relu give zeros") {
    auto p = tiny_block(3, 1);
    zero_all(p);
    auto y = landmark_residual_block(random_tensor({1, 3, 4, 4, 3}, 2), std::optional{Tensor<double>({1, 3, 4, 4, 1}, 0.0)}, p);
    for (double v : y.data()) CHECK(v == 0.0);
  }

  TEST_CASE("ones mask is bitwise identical to the plain shortcut") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto p = tiny_block(3, seed * 100);
      auto x = random_tensor({2, 3, 5, 5, 3}, seed);
      auto masked = landmark_residual_block(x, std::optional{Tensor<double>({2, 3, 5, 5, 1}, 1.0)}, p);
      auto plain = landmark_residual_block(x, std::optional<Tensor<double>>{}, p);
      CHECK(bitwise_equal(masked, plain));
    }
  }

  TEST_CASE("mask is applied elementwise and broadcast over channels") {
    auto p = tiny_block(2, 5, Activation::Identity);
    zero_all(p);
    auto x = random_tensor({1, 2, 3, 2}, 6);
    auto m = random_tensor({1, 2, 3, 1}, 7, 0, 1);
    auto y = landmark_residual_block(x, std::optional{m}, p);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t c = 0; c < 2; ++c) CHECK(y.data()[i * 2 + c] == x.data()[i * 2 + c] * m.data()[i]);
  }

  TEST_CASE("mask extents must match the input") {
    auto p = tiny_block(3, 1);
    auto x = random_tensor({1, 3, 4, 4, 3}, 2);
    CHECK_THROWS_AS(landmark_residual_block(x, std::optional{Tensor<double>({1, 3, 4, 5, 1}, 1.0)}, p), DimensionError);
    CHECK_THROWS_AS(landmark_residual_block(x, std::optional{Tensor<double>({1, 3, 4, 4, 3}, 1.0)}, p), DimensionError);
  }

  TEST_CASE("projection must restore the channel count") {
    auto p = tiny_block(3, 1);
    p.projection = make_unit("conv k=1x1x1 c=4 linear", 5, 9);
    CHECK_THROWS_AS(landmark_residual_block(random_tensor({1, 3, 4, 4, 3}, 2), std::optional<Tensor<double>>{}, p),
                    DimensionError);
  }

  TEST_CASE("full gradient through the mask product and the branches") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      auto p = tiny_block(2, seed * 50);
      auto x = random_parameter({1, 3, 4, 4, 2}, seed + 1);
      auto m = random_tensor({1, 3, 4, 4, 1}, seed + 2, 0, 1);
      auto w = random_tensor({1, 3, 4, 4, 2}, seed + 3);
      auto inputs = block_tensors(p);
      inputs.emplace_back("x", x);
      const auto results = check_gradients<double>(
          [&] { return sum(mul(landmark_residual_block(x, std::optional{m}, p), w)); }, inputs);
      for (const auto& r : results) {
        INFO(r.name);
        CHECK(r.relative_error < 1e-4);
      }
    }
  }
}

TEST_SUITE("lstm") {
  TEST_CASE("zero affine maps halve the cell") {
    const auto p = zero_lstm(3, 2);
    Tensor<double> c({1, 3}, {0.4, -1.0, 2.0});
    auto s = lstm_cell_step(random_tensor({1, 2}, 1), random_tensor({1, 3}, 2), c, p);
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(s.f.data()[j] == 0.5);
      CHECK(s.i.data()[j] == 0.5);
      CHECK(s.o.data()[j] == 0.5);
      CHECK(s.g.data()[j] == 0.0);
      CHECK(s.c.data()[j] == doctest::Approx(0.5 * c.data()[j]).epsilon(1e-15));
      CHECK(s.h.data()[j] == doctest::Approx(0.5 * std::tanh(0.5 * c.data()[j])).epsilon(1e-15));
    }
  }

  TEST_CASE("saturated forget gate keeps the cell") {
    auto p = zero_lstm(4, 3);
    p.b_f = Tensor<double>({4}, 50.0);
    auto c = random_tensor({2, 4}, 5);
    auto s = lstm_cell_step(Tensor<double>({2, 3}, 0.0), Tensor<double>({2, 4}, 0.0), c, p);
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(s.c.data()[j] - c.data()[j]) < 1e-12);
  }

  TEST_CASE("cell step gradients for all eight tensors and the inputs") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto p = random_lstm(3, 4, seed * 20);
      auto x = random_parameter({2, 4}, seed + 1);
      auto h = random_parameter({2, 3}, seed + 2);
      auto c = random_parameter({2, 3}, seed + 3);
      auto wh = random_tensor({2, 3}, seed + 4), wc = random_tensor({2, 3}, seed + 5);
      auto f = [&] {
        auto s = lstm_cell_step(x, h, c, p);
        return add(sum(mul(s.h, wh)), sum(mul(s.c, wc)));
      };
      const auto results = check_gradients<double>(
          f, {{"W_f", p.W_f}, {"W_i", p.W_i}, {"W_o", p.W_o}, {"W_C", p.W_C}, {"b_f", p.b_f}, {"b_i", p.b_i},
              {"b_o", p.b_o}, {"b_C", p.b_C}, {"x", x}, {"h", h}, {"c", c}});
      for (const auto& r : results) {
        INFO(r.name);
        CHECK(r.relative_error < 1e-4);
      }
    }
  }

  TEST_CASE("shape mismatches are dimension errors") {
    const auto p = zero_lstm(3, 2);
    CHECK_THROWS_AS(lstm_cell_step(Tensor<double>({1, 3}), Tensor<double>({1, 3}), Tensor<double>({1, 3}), p),
                    DimensionError);
    CHECK_THROWS_AS(lstm_cell_step(Tensor<double>({1, 2}), Tensor<double>({2, 3}), Tensor<double>({1, 3}), p),
                    DimensionError);
    CHECK_THROWS_AS(lstm_sequence(Tensor<double>({2, 2}), p), DimensionError);
  }

  TEST_CASE("one step equals a single cell step from zero state") {
    const auto p = random_lstm(4, 3, 11);
    auto x = random_tensor({2, 1, 3}, 12);
    auto seq = lstm_sequence(x, p);
    auto step = lstm_cell_step(reshape(x, {2, 3}), Tensor<double>({2, 4}, 0.0), Tensor<double>({2, 4}, 0.0), p);
    CHECK(bitwise_equal(seq, step.h));
  }

  TEST_CASE("zero network follows the scalar recurrence") {
    const auto p = zero_lstm(5, 3);
    for (std::size_t T = 1; T <= 10; ++T) {
      // c0 = 1 so the closed form is not identically zero.
      double c = 1.0, h = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        c = 0.5 * c;
        h = 0.5 * std::tanh(c);
      }
      auto out = lstm_sequence<double>(random_tensor({2, T, 3}, T), p, std::nullopt, Tensor<double>({2, 5}, 1.0));
      for (double v : out.data()) CHECK(std::abs(v - h) < 1e-15);
      auto zero_start = lstm_sequence(random_tensor({1, T, 3}, T + 50), p);
      for (double v : zero_start.data()) CHECK(v == 0.0);
    }
  }

  TEST_CASE("frame order matters for generic parameters") {
    const auto p = random_lstm(4, 3, 21);
    std::vector<double> v = oracle::random_values(15, 22);
    std::vector<double> rev;
    for (std::size_t t = 5; t-- > 0;) rev.insert(rev.end(), v.begin() + t * 3, v.begin() + t * 3 + 3);
    auto a = lstm_sequence(Tensor<double>({1, 5, 3}, v), p);
    auto b = lstm_sequence(Tensor<double>({1, 5, 3}, rev), p);
    CHECK(oracle::rel_error(vals(a), vals(b)) > 1e-6);
  }

  TEST_CASE("states and gates stay in range") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const auto p = random_lstm(4, 3, seed, 3.0);
      auto h = Tensor<double>({2, 4}, 0.0), c = Tensor<double>({2, 4}, 0.0);
      for (int t = 0; t < 6; ++t) {
        auto s = lstm_cell_step(random_tensor({2, 3}, seed * 10 + t, -5, 5), h, c, p);
        for (double v : s.h.data()) CHECK((v > -1.0 && v < 1.0));
        for (const auto* g : {&s.f, &s.i, &s.o})
          for (double v : g->data()) CHECK((v >= 0.0 && v <= 1.0));
        h = s.h;
        c = s.c;
      }
    }
  }

  TEST_CASE("sequence gradients") {
    auto p = random_lstm(3, 2, 31);
    auto x = random_parameter({2, 4, 2}, 32);
    auto w = random_tensor({2, 3}, 33);
    const auto results = check_gradients<double>([&] { return sum(mul(lstm_sequence(x, p), w)); },
                                                 {{"W_f", p.W_f}, {"W_C", p.W_C}, {"b_i", p.b_i}, {"x", x}});
    for (const auto& r : results) CHECK(r.relative_error < 1e-4);
  }
}

TEST_SUITE("reduction_block") {
  // Reference branch layouts with narrow channel widths: only the grid arithmetic matters here.
  ReductionParams<double> narrow(const std::vector<BranchSpec>& specs, std::size_t cin, const std::string& variant,
                                 std::size_t grid) {
    ReductionParams<double> r;
    r.variant = variant;
    r.expected_input_grid = grid;
    std::uint64_t seed = 1;
    for (auto spec : specs) {
      for (auto& layer : spec)
        if (layer.kind == LayerKind::Conv) layer.channels = 2;
      r.branches.push_back(make_branch(spec, cin, seed += 100));
    }
    return r;
  }

  TEST_CASE("reference layouts reduce 38 to 18 and 18 to 8") {
    const auto ref = ModelConfig::reference();
    auto ra = narrow(ref.reduction_a, 2, "A", 38);
    auto ya = reduction_block(random_tensor({1, 2, 38, 38, 2}, 1), ra);
    CHECK(ya.shape()[2] == 18);
    CHECK(ya.shape()[3] == 18);
    auto rb = narrow(ref.reduction_b, 2, "B", 18);
    auto yb = reduction_block(random_tensor({1, 2, 18, 18, 2}, 2), rb);
    CHECK(yb.shape()[2] == 8);
    CHECK(yb.shape()[3] == 8);
    std::size_t channels = 0;
    for (const auto& b : rb.branches) channels += out_channels(b, 2);
    CHECK(yb.shape()[4] == channels);
  }

  TEST_CASE("unexpected grid is a dimension error") {
    const auto ref = ModelConfig::reference();
    auto ra = narrow(ref.reduction_a, 2, "A", 38);
    CHECK_THROWS_AS(reduction_block(random_tensor({1, 2, 36, 36, 2}, 1), ra), DimensionError);
  }

  TEST_CASE("branches that disagree on the grid are a dimension error") {
    ReductionParams<double> r;
    r.variant = "A";
    r.branches.push_back({make_unit("maxpool k=1x3x3 s=1x2x2 p=V", 2, 1)});
    r.branches.push_back({make_unit("conv k=1x3x3 s=1x2x2 p=S c=2", 2, 2)});
    CHECK_THROWS_AS(reduction_block(random_tensor({1, 2, 9, 9, 2}, 1), r), DimensionError);
  }

  TEST_CASE("gradients") {
    ReductionParams<double> r;
    r.variant = "A";
    r.branches.push_back({make_unit("maxpool k=3x3x3 s=1x2x2 p=SVV", 2, 1)});
    r.branches.push_back({make_unit("conv k=3x3x3 s=1x2x2 p=SVV c=2", 2, 2)});
    r.branches.push_back({make_unit("conv k=1x1x1 c=2", 2, 3), make_unit("conv k=3x3x3 s=1x2x2 p=SVV c=3", 2, 4)});
    auto x = random_parameter({1, 3, 7, 7, 2}, 5);
    auto w = random_tensor({1, 3, 3, 3, 7}, 6);
    const auto results = check_gradients<double>(
        [&] { return sum(mul(reduction_block(x, r), w)); },
        {{"x", x}, {"k1", r.branches[1][0].kernel}, {"k2", r.branches[2][0].kernel}, {"k3", r.branches[2][1].kernel},
         {"b3", r.branches[2][1].bias}});
    for (const auto& res : results) {
      INFO(res.name);
      CHECK(res.relative_error < 1e-6);
    }
  }
}

TEST_SUITE("dropout") {
  TEST_CASE("rate 0 and eval mode are the identity") {
    Rng rng(1);
    auto x = random_tensor({4, 5}, 1);
    CHECK(bitwise_equal(dropout(x, 0.0, Mode::Train, rng), x));
    CHECK(bitwise_equal(dropout(x, 0.0, Mode::Eval, rng), x));
    CHECK(bitwise_equal(dropout(x, 0.5, Mode::Eval, rng), x));
  }

  TEST_CASE("train mode drops about rate and rescales survivors") {
    Rng rng(2);
    auto x = Tensor<double>({100000}, 1.0);
    auto y = dropout(x, 0.3, Mode::Train, rng);
    std::size_t zeros = 0;
    for (double v : y.data()) {
      if (v == 0.0) ++zeros;
      else CHECK(v == doctest::Approx(1.0 / 0.7));
    }
    CHECK(static_cast<double>(zeros) / 100000.0 == doctest::Approx(0.3).epsilon(0.03));
  }

  TEST_CASE("rate outside [0, 1) is a contract error") {
    Rng rng(3);
    auto x = random_tensor({3}, 1);
    CHECK_THROWS_AS(dropout(x, 1.0, Mode::Train, rng), ContractError);
    CHECK_THROWS_AS(dropout(x, -0.1, Mode::Eval, rng), ContractError);
  }

  TEST_CASE("gradient follows the kept mask") {
    Rng rng(4);
    auto x = random_parameter({50}, 1);
    auto y = dropout(x, 0.5, Mode::Train, rng);
    sum(y).backward();
    for (std::size_t i = 0; i < 50; ++i) CHECK(x.grad().data()[i] == (y.data()[i] == 0.0 ? 0.0 : 2.0));
  }
}

TEST_SUITE("fully_connected") {
  TEST_CASE("identity weight and zero bias") {
    DenseParams<double> p{Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor<double>({3}, 0.0)};
    auto x = random_tensor({2, 3}, 1);
    CHECK(vals(fully_connected(x, p)) == vals(x));
  }

  TEST_CASE("bias only") {
    DenseParams<double> p{Tensor<double>({3, 2}, 0.0), Tensor<double>({2}, {0.5, -1.5})};
    CHECK(vals(fully_connected(random_tensor({2, 3}, 1), p)) == std::vector<double>{0.5, -1.5, 0.5, -1.5});
  }

  TEST_CASE("shape mismatch") {
    DenseParams<double> p{Tensor<double>({3, 2}, 0.0), Tensor<double>({2}, 0.0)};
    CHECK_THROWS_AS(fully_connected(random_tensor({2, 4}, 1), p), DimensionError);
  }

  TEST_CASE("gradients") {
    DenseParams<double> p{random_parameter({4, 3}, 1), random_parameter({3}, 2)};
    auto x = random_parameter({5, 4}, 3);
    auto w = random_tensor({5, 3}, 4);
    const auto results = check_gradients<double>([&] { return sum(mul(fully_connected(x, p), w)); },
                                                 {{"W", p.weight}, {"b", p.bias}, {"x", x}});
    for (const auto& r : results) CHECK(r.relative_error < 1e-6);
  }
}
