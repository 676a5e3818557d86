#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "mmn/loss.hpp"
#include "mmn/network.hpp"
#include "test_helpers.hpp"

using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;
using testutil::bits_equal;

namespace {

mmn::TowerArchitecture scalar_arch() {
  mmn::TowerArchitecture arch;
  arch.input_dim = 1;
  arch.layer_units = {1};
  return arch;
}

// Total loss = sum of logits; its gradient w.r.t. each logit is one.
double logit_sum(const mmn::Matrix& x, const mmn::ParamSet& p) {
  const mmn::Matrix logits = mmn::forward(x, p, nullptr);
  double s = 0.0;
  for (double v : logits.data) s += v;
  return s;
}

}  // namespace

TEST_CASE("architecture fan-in and fan-out") {
  mmn::TowerArchitecture arch;
  arch.input_dim = 10;
  arch.layer_units = {8, 4};
  REQUIRE(arch.num_layers() == 2);
  REQUIRE(arch.fan_in(0) == 10);
  REQUIRE(arch.fan_out(0) == 8);
  REQUIRE(arch.fan_in(1) == 8);
  REQUIRE(arch.fan_out(1) == 4);
  REQUIRE(arch.fan_in(2) == 4);
  REQUIRE(arch.fan_out(2) == 1);  // scalar head
}

TEST_CASE("param set shapes, zeroing and counting") {
  mmn::TowerArchitecture arch;
  arch.input_dim = 3;
  arch.layer_units = {2};
  mmn::ParamSet p = mmn::ParamSet::zeros(arch);
  REQUIRE(p.layers.size() == 2);
  REQUIRE(p.layers[0].w.rows == 3);
  REQUIRE(p.layers[0].w.cols == 2);
  REQUIRE(p.layers[1].w.rows == 2);
  REQUIRE(p.layers[1].w.cols == 1);
  REQUIRE(p.num_params() == 3 * 2 + 2 + 2 * 1 + 1);

  mmn::RngState rng(3);
  mmn::ParamSet q = mmn::ParamSet::he_uniform(arch, rng);
  REQUIRE(q.same_shape(p));
  for (std::size_t l = 0; l < q.layers.size(); ++l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(q.layers[l].w.rows));
    for (double v : q.layers[l].w.data) REQUIRE(std::abs(v) <= limit);
    for (double v : q.layers[l].b.data) REQUIRE(v == 0.0);
  }
  q.set_zero();
  REQUIRE(bits_equal(q, p));
}

TEST_CASE("compose sums the three sets layer by layer") {
  mmn::TowerArchitecture arch;
  arch.input_dim = 2;
  arch.layer_units = {2};
  mmn::RngState rng(4);
  const mmn::ParamSet base = mmn::ParamSet::he_uniform(arch, rng);
  const mmn::ParamSet type_set = mmn::ParamSet::he_uniform(arch, rng);
  const mmn::ParamSet scen_set = mmn::ParamSet::he_uniform(arch, rng);

  const mmn::ParamSet c = mmn::compose(base, type_set, scen_set);
  for (std::size_t l = 0; l < c.layers.size(); ++l) {
    for (std::size_t i = 0; i < c.layers[l].w.size(); ++i) {
      REQUIRE(c.layers[l].w.data[i] == base.layers[l].w.data[i] +
                                           type_set.layers[l].w.data[i] +
                                           scen_set.layers[l].w.data[i]);
    }
  }

  // Composing with zero sets reproduces the base bitwise.
  const mmn::ParamSet z = mmn::ParamSet::zeros(arch);
  REQUIRE(bits_equal(mmn::compose(base, z, z), base));
}

TEST_CASE("forward reproduces the worked single-unit example") {
  const mmn::TowerArchitecture arch = scalar_arch();
  mmn::ParamSet ctr = mmn::ParamSet::zeros(arch);
  testutil::set_scalar_tower(ctr, 0.5, 0.1, 0.8, 0.05);

  mmn::Matrix x(1, 1);
  x.at(0, 0) = 0.3;
  const mmn::Matrix g = mmn::forward(x, ctr, nullptr);
  REQUIRE_THAT(g.at(0, 0), WithinRel(0.25, 1e-15));
  REQUIRE_THAT(mmn::sigmoid_scalar(g.at(0, 0)), WithinRel(0.5621765008857981, 1e-15));

  // Composed CVR tower: base + type + scenario = W 0.7, b 0.3, head 0.8, 0.15.
  mmn::ParamSet base = mmn::ParamSet::zeros(arch);
  mmn::ParamSet type_set = mmn::ParamSet::zeros(arch);
  mmn::ParamSet scen_set = mmn::ParamSet::zeros(arch);
  testutil::set_scalar_tower(base, 0.4, 0.2, 0.7, 0.10);
  testutil::set_scalar_tower(type_set, 0.1, 0.0, 0.1, 0.00);
  testutil::set_scalar_tower(scen_set, 0.2, 0.1, 0.0, 0.05);
  const mmn::ParamSet tower = mmn::compose(base, type_set, scen_set);
  const mmn::Matrix h = mmn::forward(x, tower, nullptr);
  REQUIRE_THAT(h.at(0, 0), WithinRel(0.558, 1e-14));
  REQUIRE_THAT(mmn::sigmoid_scalar(h.at(0, 0)), WithinRel(0.6359896527029889, 1e-14));
}

TEST_CASE("forward with cache matches forward without") {
  mmn::TowerArchitecture arch;
  arch.input_dim = 4;
  arch.layer_units = {3, 2};
  mmn::RngState rng(8);
  const mmn::ParamSet p = mmn::ParamSet::he_uniform(arch, rng);
  mmn::Matrix x(6, 4);
  for (double& v : x.data) v = rng.uniform(-1.0, 1.0);

  mmn::ForwardCache cache;
  const mmn::Matrix with_cache = mmn::forward(x, p, &cache);
  const mmn::Matrix without = mmn::forward(x, p, nullptr);
  REQUIRE(bits_equal(with_cache, without));
  REQUIRE(cache.pre.size() == 3);
  REQUIRE(cache.act.size() == 2);
  REQUIRE(bits_equal(cache.input, x));
}

TEST_CASE("backward matches central finite differences") {
  mmn::TowerArchitecture arch;
  arch.input_dim = 3;
  arch.layer_units = {4, 2};
  mmn::RngState rng(21);
  mmn::ParamSet p = mmn::ParamSet::he_uniform(arch, rng);
  // Random biases keep ReLU pre-activations away from zero.
  for (auto& layer : p.layers) {
    for (double& v : layer.b.data) v = rng.uniform(-0.3, 0.3);
  }
  mmn::Matrix x(5, 3);
  for (double& v : x.data) v = rng.uniform(-1.0, 1.0);

  mmn::ForwardCache cache;
  mmn::forward(x, p, &cache);
  mmn::ParamSet grad = mmn::ParamSet::zeros(arch);
  mmn::Matrix dlogit(5, 1, 1.0);
  mmn::Matrix dinput;
  mmn::backward(p, cache, dlogit, grad, &dinput);

  const double h = 1e-6;
  auto check = [&](double& slot, double analytic) {
    const double keep = slot;
    slot = keep + h;
    const double up = logit_sum(x, p);
    slot = keep - h;
    const double down = logit_sum(x, p);
    slot = keep;
    const double fd = (up - down) / (2.0 * h);
    if (std::max(std::abs(fd), std::abs(analytic)) < 1e-8) {
      REQUIRE_THAT(fd - analytic, WithinAbs(0.0, 1e-8));
    } else {
      REQUIRE_THAT(analytic, WithinRel(fd, 1e-5));
    }
  };
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    for (std::size_t i = 0; i < p.layers[l].w.size(); ++i) {
      check(p.layers[l].w.data[i], grad.layers[l].w.data[i]);
    }
    for (std::size_t i = 0; i < p.layers[l].b.size(); ++i) {
      check(p.layers[l].b.data[i], grad.layers[l].b.data[i]);
    }
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    check(x.data[i], dinput.data[i]);
  }
}

TEST_CASE("relu gate blocks gradients at zero pre-activation") {
  mmn::TowerArchitecture arch;
  arch.input_dim = 2;
  arch.layer_units = {3};
  mmn::RngState rng(5);
  const mmn::ParamSet p = mmn::ParamSet::he_uniform(arch, rng);  // biases zero

  mmn::Matrix x(1, 2);  // zero input, zero bias: every pre-activation is 0
  mmn::ForwardCache cache;
  mmn::forward(x, p, &cache);
  mmn::ParamSet grad = mmn::ParamSet::zeros(arch);
  mmn::Matrix dlogit(1, 1, 1.0);
  mmn::Matrix dinput;
  mmn::backward(p, cache, dlogit, grad, &dinput);

  for (double v : dinput.data) REQUIRE(v == 0.0);
  for (double v : grad.layers[0].w.data) REQUIRE(v == 0.0);
  for (double v : grad.layers[0].b.data) REQUIRE(v == 0.0);
  // The head bias gradient is the batch size regardless of gating.
  REQUIRE(grad.layers[1].b.at(0, 0) == 1.0);
}

TEST_CASE("adagrad two-step reference value") {
  std::vector<double> p = {0.0};
  std::vector<double> g = {1.0};
  std::vector<double> accum = {0.0};
  mmn::adagrad_update(p, g, accum, 0.1, 0.0);
  mmn::adagrad_update(p, g, accum, 0.1, 0.0);
  REQUIRE(p[0] == -0.17071067811865476);
  REQUIRE(accum[0] == 2.0);
}

TEST_CASE("adagrad skips zero gradients bitwise") {
  std::vector<double> p = {1.5, -2.0, 0.25};
  std::vector<double> g = {0.0, 0.5, 0.0};
  std::vector<double> accum = {0.75, 0.0, 0.0};
  const std::vector<double> p_before = p;
  const std::vector<double> accum_before = accum;

  mmn::adagrad_update(p, g, accum, 0.1, 1e-8);

  REQUIRE(bits_equal(p[0], p_before[0]));
  REQUIRE(bits_equal(p[2], p_before[2]));
  REQUIRE(bits_equal(accum[0], accum_before[0]));
  REQUIRE(bits_equal(accum[2], accum_before[2]));
  REQUIRE(p[1] != p_before[1]);
  REQUIRE(accum[1] == 0.25);
}

TEST_CASE("adagrad_step validates shapes") {
  mmn::TowerArchitecture a1, a2;
  a1.input_dim = 2;
  a1.layer_units = {2};
  a2.input_dim = 3;
  a2.layer_units = {2};
  mmn::ParamSet p = mmn::ParamSet::zeros(a1);
  mmn::ParamSet g = mmn::ParamSet::zeros(a2);
  mmn::ParamSet acc = mmn::ParamSet::zeros(a1);
  REQUIRE_THROWS_AS(mmn::adagrad_step(p, g, acc, 0.1, 1e-8), mmn::ShapeError);
}

TEST_CASE("ctr loss reference values") {
  {
    const std::vector<double> p = {0.5, 0.5};
    const std::vector<std::uint8_t> y = {0, 1};
    REQUIRE_THAT(mmn::ctr_loss(p, y), WithinRel(0.6931471805599453, 1e-15));
  }
  {
    const std::vector<double> p = {0.9, 0.2};
    const std::vector<std::uint8_t> y = {1, 0};
    REQUIRE_THAT(mmn::ctr_loss(p, y), WithinRel(0.164252033486018, 1e-14));
  }
}

TEST_CASE("ctcvr per-instance loss and clamping") {
  const std::vector<double> p_ctr = {0.5, 0.5, 1.0};
  const std::vector<double> p_cvr = {0.5, 0.5, 1.0};
  const std::vector<std::uint8_t> y = {1, 1, 0};
  const std::vector<std::uint8_t> z = {1, 0, 0};
  const std::vector<double> l = mmn::ctcvr_per_instance(p_ctr, p_cvr, y, z);
  REQUIRE_THAT(l[0], WithinRel(-std::log(0.25), 1e-15));
  REQUIRE_THAT(l[1], WithinRel(-std::log(0.75), 1e-15));
  // P = 1 clamps to 1 - 1e-12 so the log stays finite.
  REQUIRE(std::isfinite(l[2]));
  REQUIRE_THAT(l[2], WithinRel(-std::log(mmn::kProbClamp), 1e-6));
}

TEST_CASE("clamp_prob bounds") {
  REQUIRE(mmn::clamp_prob(0.0) == mmn::kProbClamp);
  REQUIRE(mmn::clamp_prob(1.0) == 1.0 - mmn::kProbClamp);
  REQUIRE(mmn::clamp_prob(0.3) == 0.3);
}

TEST_CASE("dynamic loss equals the sum of nonempty-domain means") {
  const mmn::DomainRegistry reg = testutil::small_registry(3, 2);
  mmn::RngState rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.next_below(50);
    std::vector<std::pair<int, int>> ids;
    std::vector<double> p_ctr(n), p_cvr(n);
    std::vector<std::uint8_t> y(n), z(n);
    for (std::size_t i = 0; i < n; ++i) {
      ids.emplace_back(static_cast<int>(rng.next_below(3)),
                       static_cast<int>(rng.next_below(2)));
      p_ctr[i] = 0.05 + 0.9 * rng.next_double();
      p_cvr[i] = 0.05 + 0.9 * rng.next_double();
      y[i] = rng.bernoulli(0.5) ? 1 : 0;
      z[i] = y[i] && rng.bernoulli(0.5) ? 1 : 0;
    }
    const mmn::BatchMasks masks = mmn::compute_masks(ids, reg);
    const std::vector<double> per = mmn::ctcvr_per_instance(p_ctr, p_cvr, y, z);

    // Oracle form: sum over nonempty domains of the domain's mean loss.
    double oracle = 0.0;
    for (const auto& slice : masks.nonempty) {
      double s = 0.0;
      for (std::uint32_t r : slice.rows) s += per[r];
      oracle += s / static_cast<double>(slice.count());
    }
    const double weighted =
        mmn::ctcvr_loss(p_ctr, p_cvr, y, z, masks, mmn::Weighting::dynamic);
    REQUIRE_THAT(weighted, WithinRel(oracle, 1e-12));

    double mean = 0.0;
    for (double v : per) mean += v;
    mean /= static_cast<double>(n);
    const double unweighted =
        mmn::ctcvr_loss(p_ctr, p_cvr, y, z, masks, mmn::Weighting::none);
    REQUIRE_THAT(unweighted, WithinRel(mean, 1e-15));
  }
}

TEST_CASE("dynamic weighting on the worked four-row example") {
  // Rows 0 and 2 share one domain; rows 1 and 3 are singleton domains. The
  // weighted loss is (a0 + a2)/2 + a1 + a3: per-domain means summed, with no
  // division by the number of nonempty domains.
  const mmn::DomainRegistry reg = testutil::small_registry(2, 2);
  const std::vector<std::pair<int, int>> ids = {{0, 0}, {1, 0}, {0, 0}, {1, 1}};
  const mmn::BatchMasks masks = mmn::compute_masks(ids, reg);
  const std::vector<double> a = {0.2, 0.4, 0.6, 0.8};
  const std::vector<double> w = mmn::dynamic_weights(masks);
  double weighted = 0.0;
  for (std::size_t i = 0; i < 4; ++i) weighted += w[i] * a[i];
  weighted /= 4.0;
  REQUIRE_THAT(weighted, WithinRel((0.2 + 0.6) / 2.0 + 0.4 + 0.8, 1e-15));
}

TEST_CASE("loss-scale diagnostic splits a 3:1 batch 75/25") {
  const mmn::DomainRegistry reg = testutil::small_registry(1, 2);
  const std::vector<std::pair<int, int>> ids = {{0, 0}, {0, 0}, {0, 0}, {0, 1}};
  const mmn::BatchMasks masks = mmn::compute_masks(ids, reg);
  const std::vector<double> per = {0.6, 0.6, 0.6, 0.6};

  const auto diag = mmn::loss_scale_diagnostic(per, masks);
  REQUIRE(diag.size() == 2);
  REQUIRE(diag[0].count == 3);
  REQUIRE_THAT(diag[0].contribution, WithinRel(0.45, 1e-15));
  REQUIRE_THAT(diag[0].domain_mean, WithinRel(0.6, 1e-15));
  REQUIRE(diag[1].count == 1);
  REQUIRE_THAT(diag[1].contribution, WithinRel(0.15, 1e-15));
  REQUIRE_THAT(diag[1].domain_mean, WithinRel(0.6, 1e-15));
}

TEST_CASE("loss-scale contributions always sum to the unweighted mean") {
  const mmn::DomainRegistry reg = testutil::small_registry(4, 3);
  mmn::RngState rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 1 + rng.next_below(80);
    std::vector<std::pair<int, int>> ids;
    std::vector<double> per(n);
    for (std::size_t i = 0; i < n; ++i) {
      ids.emplace_back(static_cast<int>(rng.next_below(4)),
                       static_cast<int>(rng.next_below(3)));
      per[i] = rng.next_double() * 3.0;
    }
    const mmn::BatchMasks masks = mmn::compute_masks(ids, reg);
    const auto diag = mmn::loss_scale_diagnostic(per, masks);

    double mean = 0.0;
    for (double v : per) mean += v;
    mean /= static_cast<double>(n);
    double total = 0.0;
    for (const auto& c : diag) {
      total += c.contribution;
      // contribution = (N_c / N) * domain mean
      REQUIRE_THAT(c.contribution,
                   WithinRel(c.domain_mean * static_cast<double>(c.count) /
                                 static_cast<double>(n),
                             1e-12));
    }
    REQUIRE_THAT(total, WithinRel(mean, 1e-12));
  }
}
