#include "s2fpn/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "s2fpn/ops.hpp"
#include "s2fpn/random.hpp"

namespace s2fpn {

void OhemConfig::validate() const {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ConfigError("ohem threshold must lie in (0, 1), got " + std::to_string(threshold));
  }
  if (min_kept < 1) throw ConfigError("ohem min_kept must be >= 1, got " + std::to_string(min_kept));
}

std::vector<std::int64_t> ohem_select(std::span<const double> true_prob, std::span<const std::uint8_t> valid,
                                      double threshold, std::int64_t min_kept) {
  if (true_prob.size() != valid.size()) throw UsageError("ohem_select: probability / mask size mismatch");
  std::vector<std::int64_t> candidates;
  std::vector<std::int64_t> hard;
  for (std::size_t i = 0; i < true_prob.size(); ++i) {
    if (!valid[i]) continue;
    candidates.push_back(static_cast<std::int64_t>(i));
    if (true_prob[i] < threshold) hard.push_back(static_cast<std::int64_t>(i));
  }
  if (static_cast<std::int64_t>(hard.size()) >= min_kept) return hard;

  const auto keep = static_cast<std::size_t>(std::min<std::int64_t>(min_kept, static_cast<std::int64_t>(candidates.size())));
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                    [&](std::int64_t a, std::int64_t b) {
                      const double pa = true_prob[static_cast<std::size_t>(a)];
                      const double pb = true_prob[static_cast<std::size_t>(b)];
                      return pa < pb || (pa == pb && a < b);
                    });
  candidates.resize(keep);
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

namespace {

void check_labels(const Shape& s, const LabelMap& labels, std::int32_t ignore_index) {
  if (labels.n != s.n || labels.h != s.h || labels.w != s.w) {
    throw DimensionError("loss: logits " + s.str() + " and labels (" + std::to_string(labels.n) + "," +
                         std::to_string(labels.h) + "," + std::to_string(labels.w) + ") disagree");
  }
  for (const auto v : labels.values) {
    if (v != ignore_index && (v < 0 || v >= s.c)) {
      throw ConfigError("label value " + std::to_string(v) + " is outside [0, " + std::to_string(s.c) +
                        ") and is not the ignore id " + std::to_string(ignore_index));
    }
  }
}

// Cross-entropy over the pixels chosen by `select`, which receives each
// pixel's true-class probability and validity mask.
template <typename T, typename Select>
CeResult<T> selected_cross_entropy(const Tensor<T>& logits, const LabelMap& labels, std::int32_t ignore_index,
                                   Select&& select) {
  const Shape s = logits.shape();
  check_labels(s, labels, ignore_index);
  CeResult<T> result;
  if (logits.is_meta()) {
    result.loss = Tensor<T>::meta(Shape{1, 1, 1, 1});
    return result;
  }
  const std::int64_t plane = s.h * s.w;
  const std::int64_t pixels = s.n * plane;
  const auto z = logits.data();

  std::vector<double> log_norm(static_cast<std::size_t>(pixels), 0.0);
  std::vector<double> true_prob(static_cast<std::size_t>(pixels), 0.0);
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(pixels), 0);
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t p = 0; p < plane; ++p) {
      const auto idx = static_cast<std::size_t>(n * plane + p);
      const std::int64_t base = n * s.c * plane + p;
      double zmax = -INFINITY;
      for (std::int64_t k = 0; k < s.c; ++k) zmax = std::max(zmax, static_cast<double>(z[base + k * plane]));
      double acc = 0.0;
      for (std::int64_t k = 0; k < s.c; ++k) acc += std::exp(static_cast<double>(z[base + k * plane]) - zmax);
      log_norm[idx] = zmax + std::log(acc);
      const std::int32_t y = labels.values[idx];
      if (y == ignore_index) continue;
      valid[idx] = 1;
      true_prob[idx] = std::exp(static_cast<double>(z[base + y * plane]) - log_norm[idx]);
    }
  }

  result.selected = select(std::span<const double>(true_prob), std::span<const std::uint8_t>(valid));
  result.all_ignored = std::none_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; });
  const auto count = static_cast<double>(result.selected.size());

  double loss = 0.0;
  for (const auto idx : result.selected) {
    const std::int64_t n = idx / plane;
    const std::int64_t p = idx % plane;
    const std::int32_t y = labels.values[static_cast<std::size_t>(idx)];
    loss += log_norm[static_cast<std::size_t>(idx)] - static_cast<double>(z[n * s.c * plane + y * plane + p]);
  }
  if (count > 0) loss /= count;

  auto selected = result.selected;
  auto norms = std::move(log_norm);
  std::vector<std::int32_t> ys;
  ys.reserve(selected.size());
  for (const auto idx : selected) ys.push_back(labels.values[static_cast<std::size_t>(idx)]);
  const Tensor<T> saved = logits;
  result.loss = detail::make_result<T>(
      Shape{1, 1, 1, 1}, {static_cast<T>(loss)}, {&logits}, "cross_entropy",
      [saved, s, plane, selected = std::move(selected), norms = std::move(norms), ys = std::move(ys), count](
          std::span<const T> gout, std::span<std::vector<T>*> sinks) {
        if (sinks[0] == nullptr || count == 0) return;
        auto& gz = *sinks[0];
        const auto zv = saved.data();
        const double g = static_cast<double>(gout[0]) / count;
        for (std::size_t i = 0; i < selected.size(); ++i) {
          const std::int64_t n = selected[i] / plane;
          const std::int64_t p = selected[i] % plane;
          const std::int64_t base = n * s.c * plane + p;
          const double lse = norms[static_cast<std::size_t>(selected[i])];
          for (std::int64_t k = 0; k < s.c; ++k) {
            const double prob = std::exp(static_cast<double>(zv[base + k * plane]) - lse);
            gz[static_cast<std::size_t>(base + k * plane)] += static_cast<T>(g * (prob - (k == ys[i] ? 1.0 : 0.0)));
          }
        }
      });
  return result;
}

}  // namespace

template <typename T>
CeResult<T> ohem_cross_entropy(const Tensor<T>& logits, const LabelMap& labels, const OhemConfig& cfg) {
  cfg.validate();
  return selected_cross_entropy(logits, labels, cfg.ignore_index,
                                [&](std::span<const double> p, std::span<const std::uint8_t> valid) {
                                  return ohem_select(p, valid, cfg.threshold, cfg.min_kept);
                                });
}

template <typename T>
CeResult<T> cross_entropy(const Tensor<T>& logits, const LabelMap& labels, std::int32_t ignore_index) {
  return selected_cross_entropy(logits, labels, ignore_index,
                                [](std::span<const double>, std::span<const std::uint8_t> valid) {
                                  std::vector<std::int64_t> all;
                                  for (std::size_t i = 0; i < valid.size(); ++i) {
                                    if (valid[i]) all.push_back(static_cast<std::int64_t>(i));
                                  }
                                  return all;
                                });
}

template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& main, const std::array<Tensor<T>, 4>& aux, const LabelMap& labels,
                            const LossConfig& cfg) {
  auto to_label_size = [&](const Tensor<T>& logits) {
    const Shape s = logits.shape();
    if (s.h == labels.h && s.w == labels.w) return logits;
    return ops::bilinear_upsample(logits, labels.h, labels.w);
  };
  LossBreakdown<T> out;
  const CeResult<T> main_term = ohem_cross_entropy(to_label_size(main), labels, cfg.ohem);
  out.main = main_term.loss.is_meta() ? 0.0 : static_cast<double>(main_term.loss.item());
  out.all_ignored = main_term.all_ignored;
  Tensor<T> total = main_term.loss;
  for (std::size_t i = 0; i < aux.size(); ++i) {
    if (!aux[i].defined()) continue;
    const Tensor<T> up = to_label_size(aux[i]);
    const CeResult<T> term =
        cfg.aux_ohem ? ohem_cross_entropy(up, labels, cfg.ohem) : cross_entropy(up, labels, cfg.ohem.ignore_index);
    out.aux[i] = term.loss.is_meta() ? 0.0 : static_cast<double>(term.loss.item());
    ++out.aux_terms;
    total = ops::add(total, ops::scale(term.loss, static_cast<T>(cfg.aux_weight)));
  }
  out.total = total;
  return out;
}

double poly_lr(std::int64_t iter, std::int64_t max_iter, double base_lr, double power, bool* clamped) {
  if (max_iter <= 0) throw UsageError("poly_lr: max_iter must be positive");
  if (iter < 0) throw UsageError("poly_lr: iter must be non-negative");
  if (clamped != nullptr) *clamped = iter > max_iter;
  if (iter >= max_iter) return 0.0;
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr, double weight_decay,
               const OptimConfig& cfg) {
  if (params.size() != grads.size()) throw UsageError("adam_step: parameter / gradient size mismatch");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    const double theta = static_cast<double>(params[i]);
    params[i] = static_cast<T>(theta - lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + weight_decay * theta));
  }
}

template <typename T>
Adam<T>::Adam(std::vector<Parameter<T>> params, const OptimConfig& cfg)
    : params_(std::move(params)), state_(params_.size()), cfg_(cfg) {}

template <typename T>
void Adam<T>::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T>& p = params_[i].value;
    const auto g = p.grad_buffer();
    adam_step<T>(p.data(), std::span<const T>(g.data(), g.size()), state_[i], lr, cfg_.weight_decay, cfg_);
  }
  ++steps_;
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <typename T>
void Adam<T>::save_state(Checkpoint& ckpt) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Shape s = params_[i].value.shape();
    const auto& st = state_[i];
    const auto n = static_cast<std::size_t>(s.numel());
    ckpt.add("optim.m." + params_[i].name, s, st.m.empty() ? std::vector<double>(n, 0.0) : st.m);
    ckpt.add("optim.v." + params_[i].name, s, st.v.empty() ? std::vector<double>(n, 0.0) : st.v);
  }
  ckpt.add("optim.step", Shape{1, 1, 1, 1}, std::vector<double>{static_cast<double>(steps_)});
}

template <typename T>
void Adam<T>::load_state(const Checkpoint& ckpt) {
  const CheckpointEntry* step = ckpt.find("optim.step");
  if (step == nullptr) throw LoadError("checkpoint has no optimizer state ('optim.step')");
  steps_ = static_cast<std::int64_t>(step->as<double>().at(0));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const CheckpointEntry* m = ckpt.find("optim.m." + params_[i].name);
    const CheckpointEntry* v = ckpt.find("optim.v." + params_[i].name);
    if (m == nullptr || v == nullptr) throw LoadError("checkpoint lacks optimizer moments for '" + params_[i].name + "'");
    if (m->shape != params_[i].value.shape() || v->shape != params_[i].value.shape()) {
      throw LoadError("optimizer moment shape mismatch for '" + params_[i].name + "'");
    }
    state_[i].m = m->as<double>();
    state_[i].v = v->as<double>();
    state_[i].step = steps_;
  }
}

AugmentDraw draw_augment(std::mt19937_64& rng, std::int64_t h, std::int64_t w, const AugmentConfig& cfg) {
  if (cfg.scales.empty()) throw ConfigError("augment: the scale set is empty");
  if (cfg.crop_h < 1 || cfg.crop_w < 1) throw ConfigError("augment: crop size must be positive");
  AugmentDraw d;
  d.scale = cfg.scales[uniform_index(rng, cfg.scales.size())];
  d.flip = uniform01(rng) < cfg.flip_prob;
  const auto sh = std::max<std::int64_t>(1, std::llround(static_cast<double>(h) * d.scale));
  const auto sw = std::max<std::int64_t>(1, std::llround(static_cast<double>(w) * d.scale));
  const std::int64_t ph = std::max(sh, cfg.crop_h);
  const std::int64_t pw = std::max(sw, cfg.crop_w);
  d.crop_y = static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(ph - cfg.crop_h + 1)));
  d.crop_x = static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(pw - cfg.crop_w + 1)));
  return d;
}

LabelMap resize_labels_nearest(const LabelMap& labels, std::int64_t out_h, std::int64_t out_w) {
  LabelMap out(labels.n, out_h, out_w);
  auto src_index = [](std::int64_t dst, std::int64_t in, std::int64_t out_len) {
    const auto s = static_cast<std::int64_t>(std::floor((static_cast<double>(dst) + 0.5) * static_cast<double>(in) /
                                                        static_cast<double>(out_len)));
    return std::clamp<std::int64_t>(s, 0, in - 1);
  };
  for (std::int64_t n = 0; n < labels.n; ++n) {
    for (std::int64_t y = 0; y < out_h; ++y) {
      const std::int64_t sy = src_index(y, labels.h, out_h);
      for (std::int64_t x = 0; x < out_w; ++x) out.at(n, y, x) = labels.at(n, sy, src_index(x, labels.w, out_w));
    }
  }
  return out;
}

SampleRecord apply_augment(const SampleRecord& sample, const AugmentDraw& draw, const AugmentConfig& cfg) {
  const Shape is = sample.image.shape();
  if (is.n != 1 || sample.label.n != 1 || is.h != sample.label.h || is.w != sample.label.w) {
    throw DimensionError("augment: image " + is.str() + " and label map disagree");
  }
  const auto sh = std::max<std::int64_t>(1, std::llround(static_cast<double>(is.h) * draw.scale));
  const auto sw = std::max<std::int64_t>(1, std::llround(static_cast<double>(is.w) * draw.scale));
  Tensor<float> image = sample.image;
  LabelMap label = sample.label;
  if (sh != is.h || sw != is.w) {
    NoGradGuard no_grad;
    image = ops::bilinear_upsample(sample.image, sh, sw);
    label = resize_labels_nearest(sample.label, sh, sw);
  }

  SampleRecord out;
  out.image = Tensor<float>::full(Shape{1, is.c, cfg.crop_h, cfg.crop_w}, cfg.image_pad);
  out.label = LabelMap(1, cfg.crop_h, cfg.crop_w, cfg.label_pad);
  const auto src = image.data();
  auto dst = out.image.data();
  for (std::int64_t y = 0; y < cfg.crop_h; ++y) {
    const std::int64_t sy = y + draw.crop_y;
    if (sy >= sh) continue;
    for (std::int64_t x = 0; x < cfg.crop_w; ++x) {
      const std::int64_t px = x + draw.crop_x;  // position in the flipped, padded frame
      if (px >= sw) continue;
      const std::int64_t sx = draw.flip ? sw - 1 - px : px;
      out.label.at(0, y, x) = label.at(0, sy, sx);
      for (std::int64_t c = 0; c < is.c; ++c) {
        dst[static_cast<std::size_t>((c * cfg.crop_h + y) * cfg.crop_w + x)] =
            src[static_cast<std::size_t>((c * sh + sy) * sw + sx)];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run config

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  for (const char c : v) {
    if (c == ',' || c == 'x' || c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

template <typename N>
N parse_number(const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw std::invalid_argument("expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("expected true/false, got '" + v + "'");
}

template <typename N, std::size_t K>
std::array<N, K> parse_tuple(const std::string& v) {
  const auto parts = split_list(v);
  if (parts.size() != K) {
    throw std::invalid_argument("expected " + std::to_string(K) + " values, got " + std::to_string(parts.size()));
  }
  std::array<N, K> out{};
  for (std::size_t i = 0; i < K; ++i) out[i] = parse_number<N>(parts[i]);
  return out;
}

std::int64_t positive(std::int64_t v) {
  if (v < 1) throw std::invalid_argument("must be >= 1");
  return v;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

struct KeySpec {
  std::string help;
  Setter set;
};

const std::map<std::string, KeySpec>& key_table() {
  static const std::map<std::string, KeySpec> table = [] {
    std::map<std::string, KeySpec> t;
    t["backbone"] = {"resnet18 | resnet34 | resnet34m",
                     [](RunConfig& c, const std::string& v) { c.model.backbone.variant = parse_backbone(v); }};
    t["dense_stage"] = {"resnet34m only: pool (default) | layer2", [](RunConfig& c, const std::string& v) {
                          if (v == "pool") {
                            c.model.backbone.dense_stage = DenseStage::kPool;
                          } else if (v == "layer2") {
                            c.model.backbone.dense_stage = DenseStage::kLayer2;
                          } else {
                            throw std::invalid_argument("expected pool or layer2, got '" + v + "'");
                          }
                        }};
    t["num_classes"] = {"number of classes K",
                        [](RunConfig& c, const std::string& v) { c.model.num_classes = positive(parse_number<std::int64_t>(v)); }};
    t["pyramid_width"] = {"one width for every pyramid level", [](RunConfig& c, const std::string& v) {
                            c.model.set_uniform_width(positive(parse_number<std::int64_t>(v)));
                          }};
    t["pyramid_widths"] = {"widths of APF2,APF3,APF4,APF5", [](RunConfig& c, const std::string& v) {
                             c.model.widths = parse_tuple<std::int64_t, 4>(v);
                             for (const auto w : c.model.widths) positive(w);
                           }};
    t["head_dropout"] = {"dropout before the aux classifiers",
                         [](RunConfig& c, const std::string& v) { c.model.head_dropout = parse_number<double>(v); }};
    t["cam_reduction"] = {"channel attention bottleneck ratio", [](RunConfig& c, const std::string& v) {
                            c.model.cam_reduction = positive(parse_number<std::int64_t>(v));
                          }};
    t["literal_ssam"] = {"use the literal A*F2 + A*F2 scale term",
                         [](RunConfig& c, const std::string& v) { c.model.literal_ssam = parse_bool(v); }};
    t["literal_gfu"] = {"plain 1x1 convs in the global upsample block",
                        [](RunConfig& c, const std::string& v) { c.model.literal_gfu = parse_bool(v); }};
    t["dataset"] = {"dataset root (images/, labels/, split lists)",
                    [](RunConfig& c, const std::string& v) { c.dataset = v; }};
    t["train_split"] = {"training split name", [](RunConfig& c, const std::string& v) { c.train_split = v; }};
    t["val_split"] = {"validation split name (empty: none)",
                      [](RunConfig& c, const std::string& v) { c.val_split = v; }};
    t["output_dir"] = {"directory for checkpoints and train.log",
                       [](RunConfig& c, const std::string& v) { c.output_dir = v; }};
    t["resume"] = {"checkpoint to resume from", [](RunConfig& c, const std::string& v) { c.resume = v; }};
    t["epochs"] = {"training epochs",
                   [](RunConfig& c, const std::string& v) { c.epochs = positive(parse_number<std::int64_t>(v)); }};
    t["max_iter"] = {"total iterations (overrides epochs)",
                     [](RunConfig& c, const std::string& v) { c.max_iter = positive(parse_number<std::int64_t>(v)); }};
    t["batch_size"] = {"images per iteration",
                       [](RunConfig& c, const std::string& v) { c.batch_size = positive(parse_number<std::int64_t>(v)); }};
    t["checkpoint_every"] = {"epochs between checkpoints", [](RunConfig& c, const std::string& v) {
                               c.checkpoint_every = positive(parse_number<std::int64_t>(v));
                             }};
    t["log_every"] = {"iterations between log lines",
                      [](RunConfig& c, const std::string& v) { c.log_every = positive(parse_number<std::int64_t>(v)); }};
    t["lr"] = {"initial learning rate", [](RunConfig& c, const std::string& v) { c.optim.base_lr = parse_number<double>(v); }};
    t["weight_decay"] = {"decoupled weight decay",
                         [](RunConfig& c, const std::string& v) { c.optim.weight_decay = parse_number<double>(v); }};
    t["beta1"] = {"Adam beta1", [](RunConfig& c, const std::string& v) { c.optim.beta1 = parse_number<double>(v); }};
    t["beta2"] = {"Adam beta2", [](RunConfig& c, const std::string& v) { c.optim.beta2 = parse_number<double>(v); }};
    t["adam_eps"] = {"Adam epsilon", [](RunConfig& c, const std::string& v) { c.optim.eps = parse_number<double>(v); }};
    t["poly_power"] = {"poly schedule exponent",
                       [](RunConfig& c, const std::string& v) { c.optim.power = parse_number<double>(v); }};
    t["ohem.threshold"] = {"hard-pixel probability threshold",
                           [](RunConfig& c, const std::string& v) { c.loss.ohem.threshold = parse_number<double>(v); }};
    t["ohem.min_kept"] = {"minimum pixels kept per batch (default crop pixels / 16)",
                          [](RunConfig& c, const std::string& v) {
                            c.loss.ohem.min_kept = positive(parse_number<std::int64_t>(v));
                            c.min_kept_set = true;
                          }};
    t["ignore_index"] = {"label id excluded from loss and metrics", [](RunConfig& c, const std::string& v) {
                           const auto id = parse_number<std::int32_t>(v);
                           c.loss.ohem.ignore_index = id;
                           c.augment.label_pad = id;
                         }};
    t["aux_weight"] = {"deep-supervision weight",
                       [](RunConfig& c, const std::string& v) { c.loss.aux_weight = parse_number<double>(v); }};
    t["aux_ohem"] = {"aux losses use OHEM (false: plain cross-entropy)",
                     [](RunConfig& c, const std::string& v) { c.loss.aux_ohem = parse_bool(v); }};
    t["augment.scales"] = {"comma-separated resize factors", [](RunConfig& c, const std::string& v) {
                             c.augment.scales.clear();
                             for (const auto& part : split_list(v)) {
                               const double s = parse_number<double>(part);
                               if (!(s > 0.0)) throw std::invalid_argument("scales must be positive");
                               c.augment.scales.push_back(s);
                             }
                             if (c.augment.scales.empty()) throw std::invalid_argument("empty scale list");
                           }};
    t["augment.flip_prob"] = {"horizontal flip probability", [](RunConfig& c, const std::string& v) {
                                c.augment.flip_prob = parse_number<double>(v);
                              }};
    t["crop"] = {"crop size HxW", [](RunConfig& c, const std::string& v) {
                   const auto hw = parse_tuple<std::int64_t, 2>(v);
                   c.augment.crop_h = positive(hw[0]);
                   c.augment.crop_w = positive(hw[1]);
                 }};
    t["mean"] = {"per-channel input mean (0..1 scale); default: computed from the training split",
                 [](RunConfig& c, const std::string& v) {
                   ChannelStats s = c.stats.value_or(ChannelStats{});
                   s.mean = parse_tuple<double, 3>(v);
                   c.stats = s;
                 }};
    t["std"] = {"per-channel input std (0..1 scale)", [](RunConfig& c, const std::string& v) {
                  ChannelStats s = c.stats.value_or(ChannelStats{});
                  s.std = parse_tuple<double, 3>(v);
                  for (const auto x : s.std) {
                    if (!(x > 0.0)) throw std::invalid_argument("std must be positive");
                  }
                  c.stats = s;
                }};
    t["seed"] = {"global seed", [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>(v); }};
    t["threads"] = {"kernel threads",
                    [](RunConfig& c, const std::string& v) { c.threads = static_cast<int>(positive(parse_number<int>(v))); }};
    return t;
  }();
  return table;
}

}  // namespace

const std::vector<std::pair<std::string, std::string>>& run_config_keys() {
  static const std::vector<std::pair<std::string, std::string>> keys = [] {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [k, spec] : key_table()) out.emplace_back(k, spec.help);
    return out;
  }();
  return keys;
}

RunConfig parse_run_config(std::string_view text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    const auto hash = raw.find('#');
    const std::string line = trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const auto it = key_table().find(key);
    if (it == key_table().end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (value.empty()) throw ConfigError(where + "key '" + key + "' has no value");
    try {
      it->second.set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + "invalid value for key '" + key + "': " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(where + "invalid value for key '" + key + "': " + e.what());
    }
  }
  if (!cfg.min_kept_set) cfg.loss.ohem.min_kept = std::max<std::int64_t>(1, cfg.augment.crop_h * cfg.augment.crop_w / 16);
  try {
    cfg.loss.ohem.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  if (cfg.augment.flip_prob < 0.0 || cfg.augment.flip_prob > 1.0) {
    throw ConfigError(origin + ": augment.flip_prob must lie in [0, 1]");
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open run config '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  RunConfig cfg = parse_run_config(buffer.str(), path.string());
  // Relative paths inside the file are relative to the file itself.
  const auto base = path.parent_path();
  auto resolve = [&](std::filesystem::path& p) {
    if (!p.empty() && p.is_relative()) p = base / p;
  };
  resolve(cfg.dataset);
  resolve(cfg.output_dir);
  resolve(cfg.resume);
  return cfg;
}

// ---------------------------------------------------------------------------
// Checkpoint metadata

namespace {

void put(Checkpoint& ckpt, const std::string& name, std::vector<double> values) {
  const auto n = static_cast<std::int64_t>(values.size());
  ckpt.add(name, Shape{1, n, 1, 1}, std::move(values));
}

std::vector<double> get(const Checkpoint& ckpt, const std::string& name, std::size_t expected) {
  const CheckpointEntry* e = ckpt.find(name);
  if (e == nullptr) throw LoadError("checkpoint lacks '" + name + "'");
  auto v = e->as<double>();
  if (v.size() != expected) throw LoadError("checkpoint entry '" + name + "' has the wrong size");
  return v;
}

}  // namespace

void write_model_meta(Checkpoint& ckpt, const ModelConfig& cfg, const ChannelStats& stats) {
  put(ckpt, "meta.backbone", {static_cast<double>(cfg.backbone.variant)});
  put(ckpt, "meta.dense_stage", {static_cast<double>(cfg.backbone.dense_stage)});
  put(ckpt, "meta.num_classes", {static_cast<double>(cfg.num_classes)});
  put(ckpt, "meta.pyramid_widths",
      {static_cast<double>(cfg.widths[0]), static_cast<double>(cfg.widths[1]), static_cast<double>(cfg.widths[2]),
       static_cast<double>(cfg.widths[3])});
  put(ckpt, "meta.cam_reduction", {static_cast<double>(cfg.cam_reduction)});
  put(ckpt, "meta.head_dropout", {cfg.head_dropout});
  put(ckpt, "meta.literal", {cfg.literal_ssam ? 1.0 : 0.0, cfg.literal_gfu ? 1.0 : 0.0});
  put(ckpt, "data.mean", {stats.mean[0], stats.mean[1], stats.mean[2]});
  put(ckpt, "data.std", {stats.std[0], stats.std[1], stats.std[2]});
}

ModelConfig read_model_meta(const Checkpoint& ckpt) {
  ModelConfig cfg;
  cfg.backbone.variant = static_cast<BackboneVariant>(static_cast<int>(get(ckpt, "meta.backbone", 1)[0]));
  cfg.backbone.dense_stage = static_cast<DenseStage>(static_cast<int>(get(ckpt, "meta.dense_stage", 1)[0]));
  cfg.num_classes = static_cast<std::int64_t>(get(ckpt, "meta.num_classes", 1)[0]);
  const auto w = get(ckpt, "meta.pyramid_widths", 4);
  for (std::size_t i = 0; i < 4; ++i) cfg.widths[i] = static_cast<std::int64_t>(w[i]);
  cfg.cam_reduction = static_cast<std::int64_t>(get(ckpt, "meta.cam_reduction", 1)[0]);
  cfg.head_dropout = get(ckpt, "meta.head_dropout", 1)[0];
  const auto lit = get(ckpt, "meta.literal", 2);
  cfg.literal_ssam = lit[0] != 0.0;
  cfg.literal_gfu = lit[1] != 0.0;
  return cfg;
}

ChannelStats read_channel_stats(const Checkpoint& ckpt) {
  ChannelStats s;
  const auto m = get(ckpt, "data.mean", 3);
  const auto d = get(ckpt, "data.std", 3);
  std::copy(m.begin(), m.end(), s.mean.begin());
  std::copy(d.begin(), d.end(), s.std.begin());
  return s;
}

// ---------------------------------------------------------------------------
// Trainer

template <typename T>
std::string format_log_line(const StepStats<T>& s) {
  // "loss" is the optimized total; the per-head aux terms follow unweighted.
  const double total = s.loss.total.defined() && !s.loss.total.is_meta() ? static_cast<double>(s.loss.total.item()) : 0.0;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "iter %lld lr %.6e loss %.6f", static_cast<long long>(s.iter), s.lr, total);
  std::string line = buf;
  if (s.loss.aux_terms > 0) {
    line += " aux";
    for (int i = 0; i < 4; ++i) {
      std::snprintf(buf, sizeof(buf), " %.6f", s.loss.aux[static_cast<std::size_t>(i)]);
      line += buf;
    }
  }
  return line;
}

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kAugmentStream = 0x4155;
constexpr std::uint64_t kDropoutStream = 0x4450;

}  // namespace

template <typename T>
Trainer<T>::Trainer(const RunConfig& cfg, S2Fpn<T>& model, std::vector<SampleRecord> train_set)
    : cfg_(cfg), model_(model), train_(std::move(train_set)), adam_(model.named_parameters(), cfg.optim) {
  if (train_.empty()) throw ConfigError("training split is empty");
  max_iter_ = cfg_.max_iter > 0 ? cfg_.max_iter : cfg_.epochs * iterations_per_epoch();
}

template <typename T>
std::int64_t Trainer<T>::iterations_per_epoch() const {
  const auto n = static_cast<std::int64_t>(train_.size());
  return (n + cfg_.batch_size - 1) / cfg_.batch_size;
}

template <typename T>
std::pair<Tensor<T>, LabelMap> Trainer<T>::batch(std::int64_t iter) const {
  const auto n = static_cast<std::int64_t>(train_.size());
  const std::int64_t per_epoch = iterations_per_epoch();
  const std::int64_t epoch = iter / per_epoch;
  const std::int64_t pos = iter % per_epoch;

  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(derive_seed(cfg_.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(uniform_index(shuffle_rng, static_cast<std::uint64_t>(i + 1)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }

  const std::int64_t b = cfg_.batch_size;
  const std::int64_t ch = cfg_.augment.crop_h;
  const std::int64_t cw = cfg_.augment.crop_w;
  const std::int64_t channels = train_.front().image.shape().c;
  std::vector<T> images(static_cast<std::size_t>(b * channels * ch * cw));
  LabelMap labels(b, ch, cw);
  for (std::int64_t k = 0; k < b; ++k) {
    const std::int64_t idx = order[static_cast<std::size_t>((pos * b + k) % n)];
    std::mt19937_64 rng(derive_seed(cfg_.seed, static_cast<std::uint64_t>(idx),
                                    kAugmentStream ^ (static_cast<std::uint64_t>(epoch) << 16)));
    const SampleRecord s = augment(train_[static_cast<std::size_t>(idx)], rng, cfg_.augment);
    const auto src = s.image.data();
    std::transform(src.begin(), src.end(), images.begin() + k * channels * ch * cw,
                   [](float v) { return static_cast<T>(v); });
    std::copy(s.label.values.begin(), s.label.values.end(), labels.values.begin() + k * ch * cw);
  }
  return {Tensor<T>::from(Shape{b, channels, ch, cw}, std::move(images)), std::move(labels)};
}

template <typename T>
StepStats<T> Trainer<T>::step() {
  StepStats<T> stats;
  stats.iter = iter_;
  model_.train();
  model_.reseed(derive_seed(cfg_.seed, kDropoutStream, static_cast<std::uint64_t>(iter_)));
  auto [x, y] = batch(iter_);
  adam_.zero_grad();
  const ModelOutput<T> out = model_.forward(x);
  stats.loss = total_loss(out.main, out.aux, y, cfg_.loss);
  const double total = static_cast<double>(stats.loss.total.item());
  if (!std::isfinite(total)) {
    throw NumericError("non-finite loss " + std::to_string(total) + " at iteration " + std::to_string(iter_));
  }
  backward(stats.loss.total);
  stats.lr = poly_lr(iter_, max_iter_, cfg_.optim.base_lr, cfg_.optim.power);
  adam_.step(stats.lr);
  ++iter_;
  return stats;
}

template <typename T>
Checkpoint Trainer<T>::checkpoint() const {
  Checkpoint ckpt = model_.state();
  write_model_meta(ckpt, model_.config(), cfg_.stats.value_or(ChannelStats{}));
  adam_.save_state(ckpt);
  ckpt.add("train.iter", Shape{1, 1, 1, 1}, std::vector<double>{static_cast<double>(iter_)});
  return ckpt;
}

template <typename T>
void Trainer<T>::restore(const Checkpoint& ckpt) {
  const LoadReport report = model_.load_state(ckpt);
  if (!report.missing.empty()) {
    throw LoadError("resume checkpoint lacks model tensor '" + report.missing.front() + "'");
  }
  adam_.load_state(ckpt);
  const CheckpointEntry* it = ckpt.find("train.iter");
  if (it == nullptr) throw LoadError("resume checkpoint lacks 'train.iter'");
  iter_ = static_cast<std::int64_t>(it->as<double>().at(0));
}

template <typename T>
void Trainer<T>::run(std::ostream* log, const Validator& validate) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg_.output_dir);
  if (!cfg_.resume.empty()) restore(Checkpoint::load(cfg_.resume));
  std::ofstream log_file(cfg_.output_dir / "train.log", std::ios::app);
  if (!log_file) throw IoError("cannot open '" + (cfg_.output_dir / "train.log").string() + "'");

  const std::int64_t per_epoch = iterations_per_epoch();
  double best = -1.0;
  bool wrote_best = fs::exists(cfg_.output_dir / "best.ckpt") && !cfg_.resume.empty();
  while (iter_ < max_iter_) {
    const StepStats<T> s = step();
    if (iter_ % cfg_.log_every == 0 || iter_ == max_iter_) {
      const std::string line = format_log_line(s);
      log_file << line << '\n' << std::flush;
      if (log != nullptr) *log << line << '\n' << std::flush;
    }
    const bool epoch_end = iter_ % per_epoch == 0;
    const std::int64_t epoch = iter_ / per_epoch;
    if ((epoch_end && epoch % cfg_.checkpoint_every == 0) || iter_ == max_iter_) {
      const Checkpoint ckpt = checkpoint();
      if (epoch_end) ckpt.save(cfg_.output_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"));
      ckpt.save(cfg_.output_dir / "last.ckpt");
      if (validate) {
        const double miou = validate(model_);
        const std::string line = "epoch " + std::to_string(epoch) + " val_miou " + std::to_string(miou);
        log_file << line << '\n' << std::flush;
        if (log != nullptr) *log << line << '\n' << std::flush;
        if (miou > best) {
          best = miou;
          ckpt.save(cfg_.output_dir / "best.ckpt");
          wrote_best = true;
        }
      }
    }
  }
  if (!wrote_best) checkpoint().save(cfg_.output_dir / "best.ckpt");
}

template CeResult<float> ohem_cross_entropy<float>(const Tensor<float>&, const LabelMap&, const OhemConfig&);
template CeResult<double> ohem_cross_entropy<double>(const Tensor<double>&, const LabelMap&, const OhemConfig&);
template CeResult<float> cross_entropy<float>(const Tensor<float>&, const LabelMap&, std::int32_t);
template CeResult<double> cross_entropy<double>(const Tensor<double>&, const LabelMap&, std::int32_t);
template LossBreakdown<float> total_loss<float>(const Tensor<float>&, const std::array<Tensor<float>, 4>&,
                                                const LabelMap&, const LossConfig&);
template LossBreakdown<double> total_loss<double>(const Tensor<double>&, const std::array<Tensor<double>, 4>&,
                                                  const LabelMap&, const LossConfig&);
template void adam_step<float>(std::span<float>, std::span<const float>, AdamState&, double, double,
                               const OptimConfig&);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamState&, double, double,
                                const OptimConfig&);
template class Adam<float>;
template class Adam<double>;
template std::string format_log_line<float>(const StepStats<float>&);
template std::string format_log_line<double>(const StepStats<double>&);
template class Trainer<float>;
template class Trainer<double>;

}  // namespace s2fpn
