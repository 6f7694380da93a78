#include "s2fpn/app/gradcheck_suite.hpp"

#include <functional>
#include <map>

#include "s2fpn/decoder.hpp"
#include "s2fpn/ops.hpp"
#include "s2fpn/random.hpp"
#include "s2fpn/training.hpp"

namespace s2fpn::app {

namespace {

using D = Tensor<double>;

struct Case {
  const char* group;
  std::function<GradCheckResult(std::mt19937_64&, double, double, std::uint64_t)> run;
};

std::int64_t pick(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  return lo + static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

D randn(std::mt19937_64& rng, const Shape& s, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(s.numel()));
  for (auto& x : v) x = scale * normal01(rng);
  return D::from(s, std::move(v), true);
}

Shape small_shape(std::mt19937_64& rng) {
  return Shape{pick(rng, 1, 2), pick(rng, 2, 4), pick(rng, 3, 6), pick(rng, 3, 6)};
}

std::vector<GradInput> with_params(const Module<double>& m, std::vector<GradInput> inputs) {
  const auto params = m.named_parameters();
  inputs.reserve(inputs.size() + params.size());
  for (const auto& p : params) inputs.push_back({p.name, p.value});
  return inputs;
}

// A unary op on one random input.
Case unary(const char* group, std::function<D(const D&)> op, double scale = 1.0) {
  return {group, [op, scale](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
            const D x = randn(rng, small_shape(rng), scale);
            return grad_check([&] { return op(x); }, {{"x", x}}, eps, tol, seed);
          }};
}

// A broadcasting binary op; b has random unit dims.
Case binary(std::function<D(const D&, const D&)> op) {
  return {"ops", [op](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
            const Shape s = small_shape(rng);
            Shape sb = s;
            if (uniform01(rng) < 0.5) sb.c = 1;
            if (uniform01(rng) < 0.5) sb.h = 1;
            if (uniform01(rng) < 0.5) sb.w = 1;
            const D a = randn(rng, s);
            const D b = randn(rng, sb);
            return grad_check([&] { return op(a, b); }, {{"a", a}, {"b", b}}, eps, tol, seed);
          }};
}

Case conv_case(int kernel, int stride, bool bias, bool depthwise) {
  return {"ops", [=](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
            const Shape s = small_shape(rng);
            const std::int64_t out = depthwise ? s.c : pick(rng, 1, 4);
            const int groups = depthwise ? static_cast<int>(s.c) : 1;
            const D x = randn(rng, s);
            const D w = randn(rng, Shape{out, s.c / groups, kernel, kernel});
            const D b = bias ? randn(rng, Shape{out, 1, 1, 1}) : D();
            std::vector<GradInput> in;
            in.push_back({"x", x});
            in.push_back({"weight", w});
            if (bias) in.push_back({"bias", b});
            return grad_check([&] { return ops::conv2d(x, w, b, stride, kernel / 2, groups); }, in, eps, tol, seed);
          }};
}

Case batch_norm_case(bool training) {
  return {"ops", [=](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
            const Shape s = small_shape(rng);
            const D x = randn(rng, s);
            const D gamma = randn(rng, Shape{s.c, 1, 1, 1});
            const D beta = randn(rng, Shape{s.c, 1, 1, 1});
            D rm = D::zeros(Shape{s.c, 1, 1, 1});
            D rv = D::full(Shape{s.c, 1, 1, 1}, 1.0);
            for (auto& v : rv.data()) v = 0.5 + uniform01(rng);
            return grad_check([&] { return ops::batch_norm(x, gamma, beta, rm, rv, training); },
                              {{"x", x}, {"gamma", gamma}, {"beta", beta}}, eps, tol, seed);
          }};
}

const std::map<std::string, Case>& cases() {
  static const std::map<std::string, Case> table = [] {
    std::map<std::string, Case> t;
    t["conv2d_3x3_bias"] = conv_case(3, 1, true, false);
    t["conv2d_3x3_stride2"] = conv_case(3, 2, false, false);
    t["conv2d_1x1"] = conv_case(1, 1, false, false);
    t["conv2d_depthwise_stride2"] = conv_case(3, 2, false, true);
    t["conv2d_7x7_stride2"] = conv_case(7, 2, false, false);
    t["batch_norm_train"] = batch_norm_case(true);
    t["batch_norm_eval"] = batch_norm_case(false);
    t["strip_pool_avg"] = unary("ops", [](const D& x) { return ops::strip_pool(x, PoolMode::kAvg); });
    t["strip_pool_max"] = unary("ops", [](const D& x) { return ops::strip_pool(x, PoolMode::kMax); });
    t["global_avg_pool"] = unary("ops", [](const D& x) { return ops::global_avg_pool(x); });
    t["bilinear_up"] = unary("ops", [](const D& x) {
      return ops::bilinear_upsample(x, 2 * x.shape().h + 1, 3 * x.shape().w);
    });
    t["bilinear_down"] = unary("ops", [](const D& x) { return ops::bilinear_upsample(x, 2, 2); });
    t["softmax_c"] = unary("ops", [](const D& x) { return ops::softmax(x, Axis::kC); });
    t["softmax_h"] = unary("ops", [](const D& x) { return ops::softmax(x, Axis::kH); });
    t["softmax_w"] = unary("ops", [](const D& x) { return ops::softmax(x, Axis::kW); });
    t["add"] = binary([](const D& a, const D& b) { return ops::add(a, b); });
    t["sub"] = binary([](const D& a, const D& b) { return ops::sub(a, b); });
    t["mul"] = binary([](const D& a, const D& b) { return ops::mul(a, b); });
    t["scale"] = unary("ops", [](const D& x) { return ops::scale(x, -1.7); });
    t["relu"] = unary("ops", [](const D& x) { return ops::relu(x); });
    t["sigmoid"] = unary("ops", [](const D& x) { return ops::sigmoid(x); }, 2.0);
    t["dropout"] = unary("ops", [](const D& x) {
      std::mt19937_64 mask_rng(7);  // same mask on every evaluation
      return ops::dropout(x, 0.3, true, mask_rng);
    });
    t["max_pool"] = unary("ops", [](const D& x) { return ops::max_pool(x, 3, 2, 1); });
    t["concat"] = {"ops", [](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
                     Shape s = small_shape(rng);
                     const D a = randn(rng, s);
                     s.c = pick(rng, 1, 3);
                     const D b = randn(rng, s);
                     return grad_check([&] { return ops::concat_channels<double>({a, b}); }, {{"a", a}, {"b", b}},
                                       eps, tol, seed);
                   }};
    t["sum"] = unary("ops", [](const D& x) { return ops::sum(x); });
    t["mean"] = unary("ops", [](const D& x) { return ops::mean(x); });
    t["cross_entropy"] = {"ops", [](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
                            const Shape s = small_shape(rng);
                            const D z = randn(rng, s, 2.0);
                            LabelMap y(s.n, s.h, s.w);
                            for (auto& v : y.values) {
                              v = uniform01(rng) < 0.1 ? 255 : static_cast<std::int32_t>(uniform_index(rng, s.c));
                            }
                            return grad_check([&] { return cross_entropy(z, y).loss; }, {{"logits", z}}, eps, tol,
                                              seed);
                          }};

    t["ohem_loss"] = {"blocks", [](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
                        const Shape s = small_shape(rng);
                        const D z = randn(rng, s, 2.0);
                        LabelMap y(s.n, s.h, s.w);
                        for (auto& v : y.values) v = static_cast<std::int32_t>(uniform_index(rng, s.c));
                        OhemConfig cfg;
                        cfg.min_kept = pick(rng, 1, s.n * s.h * s.w);
                        return grad_check([&] { return ohem_ce_loss(z, y, cfg); }, {{"logits", z}}, eps, tol, seed);
                      }};
    t["total_loss"] = {"blocks", [](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
                         const Shape s{1, 3, 8, 8};
                         const D main = randn(rng, s, 2.0);
                         std::array<D, 4> aux;
                         for (std::size_t i = 0; i < 4; ++i) aux[i] = randn(rng, Shape{1, 3, 8 >> (i / 2 + 1), 8 >> (i / 2 + 1)});
                         LabelMap y(1, 8, 8);
                         for (auto& v : y.values) v = static_cast<std::int32_t>(uniform_index(rng, 3));
                         LossConfig cfg;
                         cfg.ohem.min_kept = 8;
                         std::vector<GradInput> in;
                         in.push_back({"main", main});
                         for (std::size_t i = 0; i < 4; ++i) in.push_back({"aux" + std::to_string(i), aux[i]});
                         return grad_check([&] { return total_loss(main, aux, y, cfg).total; }, in, eps, tol, seed);
                       }};
    t["ssam"] = {"blocks", [](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
                   const Shape s = small_shape(rng);
                   std::mt19937_64 init(rng());
                   Ssam<double> m(s.c, init);
                   m.alpha.data()[0] = 0.3 + 0.5 * uniform01(rng);  // exercise the attention branch
                   const D x = randn(rng, s);
                   return grad_check([&] { return m.forward(x); }, with_params(m, {{"x", x}}), eps, tol, seed);
                 }};
    t["cam"] = {"blocks", [](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
                  Shape s = small_shape(rng);
                  s.c = 4 * pick(rng, 1, 2);
                  std::mt19937_64 init(rng());
                  Cam<double> m(s.c, init);
                  const D x = randn(rng, s);
                  return grad_check([&] { return m.forward(x); }, with_params(m, {{"x", x}}), eps, tol, seed);
                }};
    t["frb"] = {"blocks", [](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
                  Shape s = small_shape(rng);
                  const std::int64_t p = pick(rng, 2, 3);
                  s.c = 2 * p;
                  std::mt19937_64 init(rng());
                  Frb<double> m(2 * p, p, init);
                  const D x = randn(rng, s);
                  return grad_check([&] { return m.forward(x); }, with_params(m, {{"x", x}}), eps, tol, seed);
                }};
    t["cfgb"] = {"blocks", [](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
                   const Shape s = small_shape(rng);
                   std::mt19937_64 init(rng());
                   Cfgb<double> m(s.c, pick(rng, 2, 4), init);
                   const D x = randn(rng, s);
                   return grad_check([&] { return m.forward(x); }, with_params(m, {{"x", x}}), eps, tol, seed);
                 }};
    t["apf_stage"] = {"blocks", [](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
                        ApfSpec spec;
                        spec.level = 3;
                        spec.low_channels = pick(rng, 2, 4);
                        spec.coarse_channels = pick(rng, 2, 4);
                        spec.width = 4;
                        spec.num_classes = 3;
                        spec.dropout = 0.0;
                        std::mt19937_64 init(rng());
                        ApfStage<double> m(spec, init);
                        m.ssam.alpha.data()[0] = 0.5;
                        const std::int64_t n = pick(rng, 1, 2);
                        const std::int64_t h = pick(rng, 2, 3);
                        const std::int64_t w = pick(rng, 2, 3);
                        const D coarse = randn(rng, Shape{n, spec.coarse_channels, h, w});
                        const D low = randn(rng, Shape{n, spec.low_channels, 2 * h, 2 * w});
                        // out and aux both feed the objective
                        auto f = [&] {
                          auto [out, aux] = m.forward(coarse, low);
                          return ops::concat_channels<double>({out, aux});
                        };
                        return grad_check(f, with_params(m, {{"coarse", coarse}, {"low", low}}), eps, tol, seed);
                      }};
    t["gfu"] = {"blocks", [](std::mt19937_64& rng, double eps, double tol, std::uint64_t seed) {
                  const std::int64_t c = pick(rng, 2, 4);
                  const std::int64_t n = pick(rng, 1, 2);
                  const std::int64_t h = pick(rng, 2, 3);
                  const std::int64_t w = pick(rng, 2, 3);
                  std::mt19937_64 init(rng());
                  Gfu<double> m(c, c, init);
                  const D enc = randn(rng, Shape{n, c, h, w});
                  const D pyr = randn(rng, Shape{n, c, 2 * h, 2 * w});
                  return grad_check([&] { return m.forward(enc, pyr); }, with_params(m, {{"encoder", enc}, {"pyramid", pyr}}),
                                    eps, tol, seed);
                }};
    return t;
  }();
  return table;
}

// FNV-1a, so case streams do not depend on the standard library's hash.
std::uint64_t name_key(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : name) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

}  // namespace

std::vector<std::string> gradcheck_case_names() {
  std::vector<std::string> names;
  for (const auto& [name, c] : cases()) names.push_back(name);
  return names;
}

std::vector<GradCheckCase> run_gradcheck_suite(const std::string& scope, int seeds, double tolerance, double eps) {
  std::vector<GradCheckCase> out;
  bool matched = false;
  for (const auto& [name, c] : cases()) {
    if (scope != "all" && scope != c.group && scope != name) continue;
    matched = true;
    for (int s = 0; s < seeds; ++s) {
      const auto seed = static_cast<std::uint64_t>(s);
      std::mt19937_64 rng(derive_seed(seed, name_key(name)));
      out.push_back({name, seed, c.run(rng, eps, tolerance, seed)});
    }
  }
  if (!matched) throw UsageError("unknown gradcheck scope '" + scope + "' (use all, ops, blocks or a case name)");
  return out;
}

}  // namespace s2fpn::app
