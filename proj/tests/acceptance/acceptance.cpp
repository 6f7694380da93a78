// Acceptance suite: one PASS/FAIL line per criterion.
//
//   s2fpn_acceptance            run every criterion
//   s2fpn_acceptance 3 8        run a subset
//
// The exit status is nonzero when any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "s2fpn/analysis.hpp"
#include "s2fpn/app/gradcheck_suite.hpp"
#include "s2fpn/app/metrics.hpp"
#include "s2fpn/attention.hpp"
#include "s2fpn/backbone.hpp"
#include "s2fpn/decoder.hpp"
#include "s2fpn/pyramid.hpp"
#include "s2fpn/training.hpp"
#include "synthetic.hpp"

using namespace s2fpn;

namespace {

/// Collects named checks; a criterion passes when all of them hold.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) failed_.push_back(what);
    ++count_;
  }
  void near(double got, double want, double tol, const std::string& what) {
    std::ostringstream s;
    s << what << " = " << got << " (want " << want << " +- " << tol << ")";
    expect(std::abs(got - want) <= tol, s.str());
  }
  void note(const std::string& s) { notes_.push_back(s); }

  bool ok() const { return failed_.empty(); }
  std::string summary() const {
    std::ostringstream s;
    s << count_ - static_cast<int>(failed_.size()) << "/" << count_ << " checks";
    for (const auto& n : notes_) s << "; " << n;
    for (const auto& f : failed_) s << "\n    failed: " << f;
    return s.str();
  }

 private:
  int count_ = 0;
  std::vector<std::string> failed_;
  std::vector<std::string> notes_;
};

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

ModelConfig model_config(BackboneVariant v) {
  ModelConfig cfg;
  cfg.backbone.variant = v;
  cfg.num_classes = 19;
  return cfg;
}

void parameter_accounting(Checks& c) {
  std::mt19937_64 rng(0);
  Backbone<float> r18(BackboneConfig{BackboneVariant::kR18}, rng);
  const double b18 = static_cast<double>(r18.parameter_count()) / 1e6;
  c.near(b18, 11.2, 0.02 * 11.2, "R18 backbone params (M)");

  S2Fpn<float> m18(model_config(BackboneVariant::kR18));
  S2Fpn<float> m34(model_config(BackboneVariant::kR34));
  S2Fpn<float> m34m(model_config(BackboneVariant::kR34M));
  const double p18 = static_cast<double>(m18.parameter_count()) / 1e6;
  const double p34 = static_cast<double>(m34.parameter_count()) / 1e6;
  c.near(p18, 17.8, 0.10 * 17.8, "S2-FPN18 params (M)");
  c.near(p34, 27.9, 0.10 * 27.9, "S2-FPN34 params (M)");
  c.expect(m34.parameter_count() == m34m.parameter_count(), "R34 and R34M parameter counts equal");

  Backbone<float> r34(BackboneConfig{BackboneVariant::kR34}, rng);
  Backbone<float> r34m(BackboneConfig{BackboneVariant::kR34M}, rng);
  c.expect(r34.parameter_count() == r34m.parameter_count(), "R34 and R34M backbone counts equal");
  c.note("backbone " + fixed(b18, 3) + " M, S2-FPN18 " + fixed(p18, 3) + " M, S2-FPN34 " + fixed(p34, 3) + " M");
}

void cost_accounting(Checks& c) {
  // Reported G values are multiply-accumulates (1 MAC = one multiply plus one add).
  const Shape input{1, 3, 512, 1024};
  std::mt19937_64 rng(0);
  Backbone<float> r18(BackboneConfig{BackboneVariant::kR18}, rng);
  const auto backbone = count_flops(r18, input, "resnet18");
  S2Fpn<float> m18(model_config(BackboneVariant::kR18));
  S2Fpn<float> m34(model_config(BackboneVariant::kR34));
  S2Fpn<float> m34m(model_config(BackboneVariant::kR34M));
  const auto r18m = count_flops(m18, input);
  const auto r34 = count_flops(m34, input);
  const auto r34mm = count_flops(m34m, input);

  const double gb = static_cast<double>(backbone.total_macs) / 1e9;
  const double g18 = static_cast<double>(r18m.total_macs) / 1e9;
  const double ratio = static_cast<double>(r34mm.total_macs) / static_cast<double>(r34.total_macs);
  c.near(gb, 19.0, 0.15 * 19.0, "R18 backbone GMAC");
  c.near(g18, 29.1, 0.15 * 29.1, "S2-FPN18 GMAC");
  c.near(ratio, 190.0 / 48.4, 0.20 * (190.0 / 48.4), "S2-FPN34M / S2-FPN34 cost ratio");
  c.note("backbone " + fixed(gb, 2) + " GMAC, S2-FPN18 " + fixed(g18, 2) + " GMAC (" +
         fixed(static_cast<double>(r18m.total_flops) / 1e9, 2) + " GFLOP), S2-FPN34 " +
         fixed(static_cast<double>(r34.total_macs) / 1e9, 2) + " GMAC, ratio " + fixed(ratio, 3));
}

void gradient_suite(Checks& c) {
  const auto start = std::chrono::steady_clock::now();
  const auto results = app::run_gradcheck_suite("all", 5, 1e-4, 1e-6);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::set<std::string> names;
  double worst = 0.0;
  for (const auto& r : results) {
    names.insert(r.name);
    worst = std::max(worst, r.result.max_rel_error);
    c.expect(r.result.passed(), r.name + " seed " + std::to_string(r.seed) + ": " + r.result.report());
  }
  for (const char* block : {"ssam", "cam", "frb", "apf_stage", "gfu", "ohem_loss"}) {
    c.expect(names.count(block) == 1, std::string("suite covers ") + block);
  }
  c.expect(results.size() == 5 * names.size(), "five seeds per case");
  c.expect(seconds < 300.0, "suite runtime " + fixed(seconds, 1) + " s < 300 s");
  c.note(std::to_string(names.size()) + " cases x 5 seeds, worst rel err " + fixed(worst * 1e6, 3) + "e-6, " +
         fixed(seconds, 1) + " s");
}

void block_oracles(Checks& c) {
  double worst = 0.0;
  auto within = [&](double err, double tol, const std::string& what) {
    worst = std::max(worst, err);
    c.expect(err < tol, what + " err " + std::to_string(err));
  };
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const std::string tag = " seed " + std::to_string(seed);
    std::mt19937_64 rng(seed);

    Ssam<float> ssam(3, rng);
    testing::randomize_module(ssam, rng);
    ssam.alpha.data()[0] = static_cast<float>(0.2 + 0.6 * uniform01(rng));
    const auto x = testing::random_tensor<float>(Shape{1, 3, 5, 4}, rng);
    within(oracle::max_abs_diff(ssam.forward(x), oracle::ssam(oracle::of(x), ssam).output), 1e-6, "SSAM" + tag);

    ApfSpec spec;
    spec.level = 3;
    spec.low_channels = 3;
    spec.coarse_channels = 3;
    spec.width = 4;
    spec.num_classes = 4;
    ApfStage<float> stage(spec, rng);
    testing::randomize_module(stage, rng, 0.4);
    stage.ssam.alpha.data()[0] = 0.5f;
    stage.eval();
    const auto coarse = testing::random_tensor<float>(Shape{1, 3, 3, 2}, rng);
    const auto low = testing::random_tensor<float>(Shape{1, 3, 5, 4}, rng);
    const auto t = stage.trace(coarse, low);
    const auto b = oracle::apf_branches(oracle::of(t.lateral), oracle::of(t.up), oracle::of(t.refined), stage);
    within(oracle::max_abs_diff(t.x_a, b.x_a), 1e-6, "APF channel branch" + tag);
    within(oracle::max_abs_diff(t.x_b, b.x_b), 1e-6, "APF strip branch" + tag);
    within(oracle::max_abs_diff(t.fused, b.fused), 1e-6, "APF fusion" + tag);

    for (bool literal : {false, true}) {
      Gfu<float> gfu(3, 3, rng, literal);
      testing::randomize_module(gfu, rng);
      gfu.eval();
      const auto xf = testing::random_tensor<float>(Shape{1, 3, 2, 2}, rng);
      const auto xp = testing::random_tensor<float>(Shape{1, 3, 5, 4}, rng);
      within(oracle::max_abs_diff(gfu.forward(xf, xp), oracle::gfu(oracle::of(xf), oracle::of(xp), gfu)), 1e-6,
             std::string("GFU ") + (literal ? "literal" : "default") + tag);
    }

    const auto p = testing::random_tensor<float>(Shape{2, 3, 5, 4}, rng, 3.0);
    const auto op = oracle::of(p);
    c.expect(oracle::max_abs_diff(ops::strip_pool(p, PoolMode::kAvg), oracle::strip_avg<float>(op)) == 0.0,
             "strip avg pool exact" + tag);
    c.expect(oracle::max_abs_diff(ops::strip_pool(p, PoolMode::kMax), oracle::strip_max(op)) == 0.0,
             "strip max pool exact" + tag);
    c.expect(oracle::max_abs_diff(ops::global_avg_pool(p), oracle::global_avg<float>(op)) == 0.0,
             "global avg pool exact" + tag);
    const auto q = testing::random_tensor<float>(Shape{1, 3, 1, 4}, rng);
    const auto oq = oracle::of(q);
    c.expect(oracle::max_abs_diff(ops::add(p, q), oracle::add<float>(op, oq)) == 0.0, "broadcast add exact" + tag);
    c.expect(oracle::max_abs_diff(ops::mul(q, p), oracle::mul<float>(oq, op)) == 0.0, "broadcast mul exact" + tag);
    c.expect(oracle::max_abs_diff(ops::sub(p, q), oracle::sub<float>(op, oq)) == 0.0, "broadcast sub exact" + tag);
  }
  c.note("worst block error " + std::to_string(worst));
}

void structural_invariants(Checks& c) {
  std::mt19937_64 rng(11);
  Ssam<float> ssam(4, rng);
  testing::randomize_module(ssam, rng);
  ssam.alpha.data()[0] = 0.0f;
  const auto x = testing::random_tensor<float>(Shape{2, 4, 7, 6}, rng);
  c.expect(oracle::max_abs_diff(ssam.forward(x), oracle::of(x)) == 0.0, "alpha = 0 gives the identity");

  ssam.alpha.data()[0] = 0.7f;
  const auto a = ssam.trace(testing::random_tensor<float>(Shape{2, 4, 9, 5}, rng, 2.0)).attention;
  double col_err = 0.0;
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t ch = 0; ch < 4; ++ch) {
      double s = 0.0;
      for (std::int64_t h = 0; h < 9; ++h) s += a.at(n, ch, h, 0);
      col_err = std::max(col_err, std::abs(s - 1.0));
    }
  c.expect(col_err <= 1e-6, "attention columns sum to 1 (err " + std::to_string(col_err) + ")");

  Cam<float> cam(8, rng);
  testing::randomize_module(cam, rng, 0.5);
  const auto gate = cam.forward(testing::random_tensor<float>(Shape{2, 8, 5, 5}, rng, 2.0));
  bool in_unit = true;
  for (float v : gate.data())
    in_unit = in_unit && v > 0.0f && v < 1.0f;
  c.expect(in_unit, "CAM outputs in (0, 1)");

  S2Fpn<float> model(model_config(BackboneVariant::kR18));
  model.train();
  const auto out = model.forward(Tensor<float>::meta(Shape{1, 3, 512, 1024}));
  const std::array<std::int64_t, 4> strides{4, 8, 16, 32};
  c.expect(model.pyramid_strides() == std::array<int, 4>{4, 8, 16, 32}, "pyramid strides {4, 8, 16, 32}");
  for (std::size_t k = 0; k < 4; ++k) {
    c.expect(out.aux[k].defined() && out.aux[k].shape() == Shape{1, 19, 512 / strides[k], 1024 / strides[k]},
             "aux head " + std::to_string(k) + " at stride " + std::to_string(strides[k]));
  }

  Backbone<float> r34(BackboneConfig{BackboneVariant::kR34}, rng);
  Backbone<float> r34m(BackboneConfig{BackboneVariant::kR34M}, rng);
  const auto f = r34.forward(Tensor<float>::meta(Shape{1, 3, 256, 512}));
  const auto g = r34m.forward(Tensor<float>::meta(Shape{1, 3, 256, 512}));
  for (int i = 2; i < 5; ++i) {
    c.expect(g[i].shape().h == 2 * f[i].shape().h && g[i].shape().w == 2 * f[i].shape().w,
             "R34M doubles F" + std::to_string(i + 1));
  }
}

void ohem_exactness(Checks& c) {
  std::mt19937_64 rng(2024);
  const double levels[] = {0.1, 0.3, 0.5, 0.7, 0.9};
  int mismatches = 0;
  int fallback_cases = 0;
  for (int k = 0; k < 200; ++k) {
    const auto n = 1 + uniform_index(rng, 32);
    std::vector<double> p(n);
    std::vector<std::uint8_t> valid(n);
    std::vector<bool> valid_b(n);
    const bool discrete = k % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = discrete ? levels[uniform_index(rng, 5)] : uniform01(rng);
      valid[i] = uniform01(rng) < 0.85;
      valid_b[i] = valid[i] != 0;
    }
    const auto min_kept = static_cast<std::int64_t>(1 + uniform_index(rng, 40));
    const auto want = oracle::ohem_reference(p, valid_b, 0.7, min_kept);
    std::int64_t hard = 0;
    for (std::size_t i = 0; i < n; ++i) hard += valid[i] && p[i] < 0.7;
    fallback_cases += hard < min_kept;
    if (ohem_select(p, valid, 0.7, min_kept) != want) {
      ++mismatches;
      c.expect(false, "case " + std::to_string(k));
    }
  }
  c.expect(mismatches == 0, "all 200 cases match");
  c.note(std::to_string(fallback_cases) + " cases exercised the min_kept floor");
}

void schedule_and_optimizer(Checks& c) {
  c.expect(poly_lr(0, 1000, 3e-4, 0.9) == 3e-4, "poly_lr(0) == 3e-4");
  c.expect(poly_lr(1000, 1000, 3e-4, 0.9) == 0.0, "poly_lr(max_iter) == 0");
  c.near(poly_lr(500, 1000, 3e-4, 0.9), 3e-4 * std::pow(0.5, 0.9), 1e-18, "poly_lr(max_iter / 2)");

  std::mt19937_64 rng(7);
  const OptimConfig cfg;
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    std::vector<double> theta(16), grad(16);
    for (auto& t : theta) t = normal01(rng);
    for (auto& g : grad) g = normal01(rng) * std::pow(10.0, static_cast<double>(uniform_index(rng, 5)) - 2.0);
    const std::vector<double> before = theta;
    AdamState st;
    adam_step<double>(theta, grad, st, 3e-4, 5e-6, cfg);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      // One step from zero moments: m = (1-b1) g, v = (1-b2) g^2, and the
      // bias corrections divide those factors back out.
      const double m_hat = ((1 - 0.9) * grad[i]) / (1 - 0.9);
      const double v_hat = ((1 - 0.999) * grad[i] * grad[i]) / (1 - 0.999);
      const double want = before[i] - 3e-4 * (m_hat / (std::sqrt(v_hat) + 1e-8) + 5e-6 * before[i]);
      worst = std::max(worst, std::abs(theta[i] - want));
    }
  }
  c.expect(worst <= 1e-12, "Adam first step within 1e-12 (err " + std::to_string(worst) + ")");
}

void training_liveness(Checks& c) {
  const auto corpus = testing::synthetic_corpus(4, 64, 128, 4, 1);
  RunConfig cfg = testing::overfit_config(64, 128, 4, 300, 1);
  cfg.model.set_uniform_width(128);
  const auto r = testing::run_overfit(corpus, cfg);
  c.expect(r.pixel_accuracy > 0.95, "pixel accuracy " + fixed(100 * r.pixel_accuracy, 2) + "% > 95%");
  c.expect(r.losses.size() == 300, "300 iterations");
  c.expect(r.seconds < 600.0, "wall clock " + fixed(r.seconds, 1) + " s < 600 s");
  c.expect(testing::trending_down(r.losses, 30), "loss trends down over 30-iteration windows");
  c.note("loss " + fixed(r.losses.front(), 3) + " -> " + fixed(r.losses.back(), 4) + ", accuracy " +
         fixed(100 * r.pixel_accuracy, 2) + "%, " + fixed(r.seconds, 1) + " s");
}

void latency_ordering(Checks& c) {
  const Shape input{1, 3, 256, 512};
  std::vector<double> fps;
  std::string detail;
  for (auto v : {BackboneVariant::kR18, BackboneVariant::kR34, BackboneVariant::kR34M}) {
    S2Fpn<float> model(model_config(v));
    const auto stats = benchmark_latency(model, input, 1, 3, 0);
    fps.push_back(stats.fps);
    detail += (detail.empty() ? "" : ", ") + to_string(v) + " " + fixed(stats.fps, 2) + " FPS";
  }
  c.expect(fps[0] > fps[1], "FPS R18 > R34");
  c.expect(fps[1] > fps[2], "FPS R34 > R34M");
  c.note(detail);
}

void metrics(Checks& c) {
  app::ConfusionMatrix cm(2);
  cm.add(std::vector<std::int32_t>{0, 0, 1, 1}, std::vector<std::int32_t>{0, 1, 1, 1});
  c.expect(cm.count(0, 0) == 1 && cm.count(0, 1) == 1 && cm.count(1, 0) == 0 && cm.count(1, 1) == 2,
           "confusion counts [[1, 1], [0, 2]]");
  c.expect(cm.iou(0) == 1.0 / 2.0, "IoU_0 == 1/2");
  c.expect(cm.iou(1) == 2.0 / 3.0, "IoU_1 == 2/3");
  c.near(cm.miou(), 7.0 / 12.0, 1e-15, "mIoU");

  app::ConfusionMatrix perfect(19);
  std::mt19937_64 rng(3);
  std::vector<std::int32_t> gt(500);
  for (auto& v : gt) v = static_cast<std::int32_t>(uniform01(rng) < 0.05 ? 255 : uniform_index(rng, 19));
  perfect.add(gt, gt);
  c.expect(perfect.miou() == 1.0, "perfect prediction gives mIoU 1.0");
}

struct Criterion {
  int id;
  const char* title;
  std::function<void(Checks&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "parameter accounting", parameter_accounting},
      {2, "cost accounting at 512x1024", cost_accounting},
      {3, "gradient suite", gradient_suite},
      {4, "block oracles", block_oracles},
      {5, "structural invariants", structural_invariants},
      {6, "OHEM exactness", ohem_exactness},
      {7, "schedule and optimizer", schedule_and_optimizer},
      {8, "training liveness", training_liveness},
      {9, "latency ordering", latency_ordering},
      {10, "metrics", metrics},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    char* end = nullptr;
    const long id = std::strtol(argv[i], &end, 10);
    if (*end != '\0' || id < 1 || id > static_cast<long>(all.size())) {
      std::fprintf(stderr, "usage: %s [criterion number 1-%zu ...]\n", argv[0], all.size());
      return 1;
    }
    selected.insert(static_cast<int>(id));
  }

  int failures = 0;
  for (const auto& crit : all) {
    if (!selected.empty() && !selected.count(crit.id)) continue;
    Checks checks;
    const auto start = std::chrono::steady_clock::now();
    try {
      crit.run(checks);
    } catch (const std::exception& e) {
      checks.expect(false, std::string("exception: ") + e.what());
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !checks.ok();
    std::printf("%s criterion %d: %s [%s] (%.1f s)\n", checks.ok() ? "PASS" : "FAIL", crit.id, crit.title,
                checks.summary().c_str(), seconds);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
