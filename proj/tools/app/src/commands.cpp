#include "s2fpn/app/commands.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "s2fpn/analysis.hpp"
#include "s2fpn/app/gradcheck_suite.hpp"
#include "s2fpn/parallel.hpp"

namespace s2fpn::app {

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

void apply_threads(const GlobalOptions& global, int fallback) { set_num_threads(global.threads.value_or(fallback)); }

Palette palette_for(const std::filesystem::path& path, std::int64_t num_classes) {
  if (path.empty()) return Palette::generated(num_classes);
  Palette p = Palette::load(path);
  if (p.size() != num_classes) {
    throw ConfigError("palette '" + path.string() + "' has " + std::to_string(p.size()) +
                      " classes but the model predicts " + std::to_string(num_classes));
  }
  return p;
}

}  // namespace

template <typename T>
LoadedModel<T> load_model(const Checkpoint& ckpt) {
  LoadedModel<T> lm;
  lm.model = std::make_unique<S2Fpn<T>>(read_model_meta(ckpt));
  lm.stats = read_channel_stats(ckpt);
  const LoadReport report = lm.model->load_state(ckpt);
  if (!report.missing.empty()) {
    throw LoadError("checkpoint lacks model tensor '" + report.missing.front() + "' (" +
                    std::to_string(report.missing.size()) + " missing)");
  }
  lm.model->eval();
  return lm;
}

template <typename T>
GrayImage predict(S2Fpn<T>& model, const RgbImage& image, const ChannelStats& stats) {
  const std::int64_t m = model.backbone().input_multiple();
  auto padded = [m](std::int64_t v) { return std::max((v + m - 1) / m * m, 2 * m); };
  const std::int64_t hp = padded(image.h);
  const std::int64_t wp = padded(image.w);

  const Tensor<T> x0 = normalize_image<T>(image, stats);
  Tensor<T> x = x0;
  if (hp != image.h || wp != image.w) {
    x = Tensor<T>::zeros(Shape{1, 3, hp, wp});
    for (std::int64_t c = 0; c < 3; ++c) {
      for (std::int64_t y = 0; y < image.h; ++y) {
        for (std::int64_t xx = 0; xx < image.w; ++xx) x.at(0, c, y, xx) = x0.at(0, c, y, xx);
      }
    }
  }

  const bool was_training = model.is_training();
  model.eval();
  Tensor<T> logits;
  {
    NoGradGuard no_grad;
    logits = model.forward(x).main;
  }
  model.train(was_training);

  const std::int64_t k = logits.shape().c;
  GrayImage out(image.h, image.w);
  for (std::int64_t y = 0; y < image.h; ++y) {
    for (std::int64_t xx = 0; xx < image.w; ++xx) {
      std::int64_t best = 0;
      T best_v = logits.at(0, 0, y, xx);
      for (std::int64_t c = 1; c < k; ++c) {
        const T v = logits.at(0, c, y, xx);
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out.data[static_cast<std::size_t>(y * image.w + xx)] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

template <typename T>
ConfusionMatrix evaluate(S2Fpn<T>& model, const std::vector<LabeledImage>& samples, const ChannelStats& stats,
                         std::int32_t ignore_index) {
  ConfusionMatrix cm(model.config().num_classes, ignore_index);
  for (const auto& s : samples) cm.add(s.label, predict(model, s.image, stats));
  return cm;
}

std::string iou_table(const ConfusionMatrix& cm, const Palette& palette) {
  std::size_t name_w = 5;
  for (std::int64_t k = 0; k < palette.size(); ++k) name_w = std::max(name_w, palette[k].name.size());
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%5s  %-*s  %8s\n", "id", static_cast<int>(name_w), "class", "IoU");
  out << buf;
  for (std::int64_t k = 0; k < cm.num_classes(); ++k) {
    const auto v = cm.iou(k);
    const std::string value = v ? fmt("%8.4f", *v) : std::string("     n/a");
    std::snprintf(buf, sizeof(buf), "%5lld  %-*s  %s\n", static_cast<long long>(k), static_cast<int>(name_w),
                  palette[k].name.c_str(), value.c_str());
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "%5s  %-*s  %8.4f\n", "", static_cast<int>(name_w), "mIoU", cm.miou());
  out << buf;
  std::snprintf(buf, sizeof(buf), "%5s  %-*s  %8.4f\n", "", static_cast<int>(name_w), "pixel_acc", cm.pixel_accuracy());
  out << buf;
  return out.str();
}

std::string iou_csv(const ConfusionMatrix& cm, const Palette& palette) {
  std::ostringstream out;
  out << "class,name,iou\n";
  for (std::int64_t k = 0; k < cm.num_classes(); ++k) {
    const auto v = cm.iou(k);
    out << k << "," << palette[k].name << "," << (v ? fmt("%.6f", *v) : std::string()) << "\n";
  }
  out << "miou,," << fmt("%.6f", cm.miou()) << "\n";
  return out.str();
}

std::string confusion_csv(const ConfusionMatrix& cm) {
  std::ostringstream out;
  out << "gt\\pred";
  for (std::int64_t k = 0; k < cm.num_classes(); ++k) out << "," << k;
  out << "\n";
  for (std::int64_t g = 0; g < cm.num_classes(); ++g) {
    out << g;
    for (std::int64_t p = 0; p < cm.num_classes(); ++p) out << "," << cm.count(g, p);
    out << "\n";
  }
  return out.str();
}

namespace {

template <typename T>
void train_with(RunConfig cfg, const std::vector<SampleRecord>& train, const std::vector<LabeledImage>& val,
                std::ostream& out) {
  S2Fpn<T> model(cfg.model);
  out << "model " << to_string(cfg.model.backbone.variant) << ", " << model.parameter_count() << " parameters, "
      << train.size() << " training images, " << val.size() << " validation images\n";
  Trainer<T> trainer(cfg, model, train);
  out << "training for " << trainer.max_iter() << " iterations (" << trainer.iterations_per_epoch()
      << " per epoch), output " << cfg.output_dir.string() << "\n";
  typename Trainer<T>::Validator validate;
  const ChannelStats stats = *cfg.stats;
  if (!val.empty()) {
    validate = [&val, stats, ignore = cfg.loss.ohem.ignore_index](S2Fpn<T>& m) {
      return evaluate(m, val, stats, ignore).miou();
    };
  }
  trainer.run(&out, validate);
}

}  // namespace

int cmd_train(const GlobalOptions& global, std::ostream& out) {
  if (global.config.empty()) throw UsageError("train requires --config <run config>");
  RunConfig cfg = load_run_config(global.config);
  if (global.seed) cfg.seed = *global.seed;
  if (global.threads) cfg.threads = *global.threads;
  if (cfg.dataset.empty()) throw ConfigError(global.config.string() + ": key 'dataset' is required for training");
  set_num_threads(cfg.threads);
  cfg.model.seed = cfg.seed;

  const DatasetLayout layout(cfg.dataset);
  const std::vector<LabeledImage> train_images = layout.load(cfg.train_split);
  if (train_images.empty()) throw ConfigError("split '" + cfg.train_split + "' lists no images");
  if (!cfg.stats) cfg.stats = compute_channel_stats(train_images);
  std::vector<SampleRecord> train;
  train.reserve(train_images.size());
  for (const auto& s : train_images) train.push_back(to_sample(s, *cfg.stats));
  std::vector<LabeledImage> val;
  if (layout.has_split(cfg.val_split)) val = layout.load(cfg.val_split);

  if (global.f64) {
    train_with<double>(cfg, train, val, out);
  } else {
    train_with<float>(cfg, train, val, out);
  }
  return kExitOk;
}

namespace {

template <typename T>
int eval_with(const EvalOptions& opts, const Checkpoint& ckpt, std::ostream& out) {
  LoadedModel<T> lm = load_model<T>(ckpt);
  const std::int64_t k = lm.model->config().num_classes;
  const Palette palette = palette_for(opts.palette, k);
  const DatasetLayout layout(opts.dataset);
  const auto samples = layout.load(opts.split);
  const ConfusionMatrix cm = evaluate(*lm.model, samples, lm.stats);
  out << "evaluated " << samples.size() << " images (" << cm.total() << " scored pixels) from split '" << opts.split
      << "'\n";
  out << iou_table(cm, palette);
  if (!opts.csv.empty()) write_file(opts.csv, iou_csv(cm, palette));
  if (!opts.confusion.empty()) write_file(opts.confusion, confusion_csv(cm));
  return kExitOk;
}

template <typename T>
int infer_with(const InferOptions& opts, const Checkpoint& ckpt, std::ostream& out) {
  LoadedModel<T> lm = load_model<T>(ckpt);
  const Palette palette = palette_for(opts.palette, lm.model->config().num_classes);
  const RgbImage image = read_ppm(opts.image);
  const GrayImage labels = predict(*lm.model, image, lm.stats);
  auto label_path = opts.labels;
  if (label_path.empty()) {
    label_path = opts.out.parent_path() / (opts.out.stem().string() + "_labels.pgm");
  }
  write_ppm(opts.out, blend(image, palette.colorize(labels), opts.alpha));
  write_pgm(label_path, labels);
  out << "wrote " << opts.out.string() << " and " << label_path.string() << "\n";
  return kExitOk;
}

}  // namespace

int cmd_eval(const GlobalOptions& global, const EvalOptions& opts, std::ostream& out) {
  if (opts.checkpoint.empty() || opts.dataset.empty()) throw UsageError("eval requires --checkpoint and --dataset");
  apply_threads(global, 1);
  const Checkpoint ckpt = Checkpoint::load(opts.checkpoint);
  return global.f64 ? eval_with<double>(opts, ckpt, out) : eval_with<float>(opts, ckpt, out);
}

int cmd_infer(const GlobalOptions& global, const InferOptions& opts, std::ostream& out) {
  if (opts.checkpoint.empty() || opts.image.empty() || opts.out.empty()) {
    throw UsageError("infer requires --checkpoint, --image and --out");
  }
  if (!(opts.alpha >= 0.0 && opts.alpha <= 1.0)) throw UsageError("--alpha must lie in [0, 1]");
  apply_threads(global, 1);
  const Checkpoint ckpt = Checkpoint::load(opts.checkpoint);
  return global.f64 ? infer_with<double>(opts, ckpt, out) : infer_with<float>(opts, ckpt, out);
}

int cmd_analyze(const GlobalOptions& global, const AnalyzeOptions& opts, std::ostream& out) {
  ModelConfig base;
  if (!global.config.empty()) base = load_run_config(global.config).model;
  if (!opts.backbone.empty()) base.backbone.variant = parse_backbone(opts.backbone);
  if (global.seed) base.seed = *global.seed;
  const Shape input{opts.batch, 3, opts.height, opts.width};
  const int threads = global.threads.value_or(1);

  std::vector<AnalysisReport> reports;
  auto analyze = [&](ModelConfig cfg) {
    S2Fpn<float> model(cfg);
    AnalysisReport r = count_flops(model, input, "S2-FPN " + to_string(cfg.backbone.variant));
    if (opts.latency_iters > 0) {
      r.latency = benchmark_latency(model, input, opts.warmup, opts.latency_iters, base.seed, threads);
    }
    out << r.text() << "\n";
    reports.push_back(r);
  };

  if (!opts.compare) {
    analyze(base);
  } else {
    for (const auto v : {BackboneVariant::kR18, BackboneVariant::kR34, BackboneVariant::kR34M}) {
      ModelConfig cfg = base;
      cfg.backbone.variant = v;
      analyze(cfg);
    }
    const double ratio = static_cast<double>(reports[2].total_macs) / static_cast<double>(reports[1].total_macs);
    out << "summary (GMAC = 1e9 multiply-accumulates, GFLOP = 2 x GMAC + linear ops):\n";
    for (const auto& r : reports) {
      out << "  " << r.title << ": params " << fmt("%.3f", r.total_params / 1e6) << " M, "
          << fmt("%.3f", r.total_macs / 1e9) << " GMAC, " << fmt("%.3f", r.total_flops / 1e9) << " GFLOP";
      if (r.latency) out << ", " << fmt("%.2f", r.latency->fps) << " FPS";
      out << "\n";
    }
    out << "  cost ratio resnet34m / resnet34: " << fmt("%.3f", ratio) << "\n";
  }
  if (!opts.csv.empty()) {
    std::string csv;
    for (const auto& r : reports) {
      if (reports.size() > 1) csv += "# " + r.title + "\n";
      csv += r.csv();
    }
    write_file(opts.csv, csv);
  }
  return kExitOk;
}

int cmd_gradcheck(const GlobalOptions& global, const GradcheckOptions& opts, std::ostream& out) {
  if (opts.seeds < 1) throw UsageError("--seeds must be >= 1");
  apply_threads(global, 1);
  const auto results = run_gradcheck_suite(opts.scope, opts.seeds, opts.tolerance, opts.eps);
  int failed = 0;
  for (const auto& c : results) {
    if (!c.result.passed()) ++failed;
    out << c.name << " seed " << c.seed << ": " << c.result.report() << "\n";
  }
  out << results.size() - static_cast<std::size_t>(failed) << "/" << results.size() << " gradient checks passed\n";
  return failed == 0 ? kExitOk : kExitNumeric;
}

template LoadedModel<float> load_model<float>(const Checkpoint&);
template LoadedModel<double> load_model<double>(const Checkpoint&);
template GrayImage predict<float>(S2Fpn<float>&, const RgbImage&, const ChannelStats&);
template GrayImage predict<double>(S2Fpn<double>&, const RgbImage&, const ChannelStats&);
template ConfusionMatrix evaluate<float>(S2Fpn<float>&, const std::vector<LabeledImage>&, const ChannelStats&,
                                         std::int32_t);
template ConfusionMatrix evaluate<double>(S2Fpn<double>&, const std::vector<LabeledImage>&, const ChannelStats&,
                                          std::int32_t);

}  // namespace s2fpn::app
