#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "s2fpn/checkpoint.hpp"
#include "s2fpn/decoder.hpp"

namespace s2fpn {

/// Integer class map of shape (N, H, W). Values are class ids or the ignore id.
struct LabelMap {
  std::int64_t n = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<std::int32_t> values;

  LabelMap() = default;
  LabelMap(std::int64_t n_, std::int64_t h_, std::int64_t w_, std::int32_t fill = 0)
      : n(n_), h(h_), w(w_), values(static_cast<std::size_t>(n_ * h_ * w_), fill) {}
  std::int64_t numel() const { return n * h * w; }
  std::int32_t& at(std::int64_t in, std::int64_t y, std::int64_t x) {
    return values[static_cast<std::size_t>((in * h + y) * w + x)];
  }
  std::int32_t at(std::int64_t in, std::int64_t y, std::int64_t x) const {
    return values[static_cast<std::size_t>((in * h + y) * w + x)];
  }
};

struct OhemConfig {
  double threshold = 0.7;
  std::int64_t min_kept = 1;
  std::int32_t ignore_index = 255;

  /// Throws ConfigError unless 0 < threshold < 1 and min_kept >= 1.
  void validate() const;
};

/// Pixels (flat indices) trained on by OHEM, given each pixel's true-class
/// probability. A pixel is hard when valid and p < threshold; when fewer than
/// min_kept pixels are hard, the min_kept valid pixels with the lowest p are
/// taken instead (ties broken by index). The result is sorted ascending.
std::vector<std::int64_t> ohem_select(std::span<const double> true_prob, std::span<const std::uint8_t> valid,
                                      double threshold, std::int64_t min_kept);

template <typename T>
struct CeResult {
  Tensor<T> loss;                       ///< (1,1,1,1) mean cross-entropy over `selected`
  std::vector<std::int64_t> selected;   ///< flat (n*H + y)*W + x indices
  bool all_ignored = false;             ///< no valid pixel: loss is defined as 0
};

/// OHEM cross-entropy: softmax over the class axis, hard-pixel selection as
/// in ohem_select, mean -log p over the selection. The selection itself is
/// not differentiated.
template <typename T>
CeResult<T> ohem_cross_entropy(const Tensor<T>& logits, const LabelMap& labels, const OhemConfig& cfg);

template <typename T>
Tensor<T> ohem_ce_loss(const Tensor<T>& logits, const LabelMap& labels, const OhemConfig& cfg) {
  return ohem_cross_entropy(logits, labels, cfg).loss;
}

/// Plain cross-entropy averaged over every non-ignored pixel.
template <typename T>
CeResult<T> cross_entropy(const Tensor<T>& logits, const LabelMap& labels, std::int32_t ignore_index = 255);

struct LossConfig {
  OhemConfig ohem;
  double aux_weight = 0.4;  ///< deep-supervision weight
  bool aux_ohem = true;     ///< aux terms use OHEM (true) or plain cross-entropy
};

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double main = 0.0;
  std::array<double, 4> aux{};  ///< per aux head, before weighting
  int aux_terms = 0;
  bool all_ignored = false;
};

/// L = main + aux_weight * sum(aux_i). Logits are bilinearly resized to the
/// label resolution first; undefined aux entries are skipped.
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& main, const std::array<Tensor<T>, 4>& aux, const LabelMap& labels,
                            const LossConfig& cfg);

/// base_lr * (1 - iter / max_iter)^power. An iter past max_iter is clamped
/// to 0 and reported through `clamped`.
double poly_lr(std::int64_t iter, std::int64_t max_iter, double base_lr, double power, bool* clamped = nullptr);

struct OptimConfig {
  double base_lr = 3e-4;
  double weight_decay = 5e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double power = 0.9;
};

/// Moments of one parameter tensor.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

/// One Adam update with bias correction and decoupled weight decay:
///   m = b1 m + (1-b1) g,  v = b2 v + (1-b2) g^2
///   theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr, double weight_decay,
               const OptimConfig& cfg);

template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>> params, const OptimConfig& cfg);

  /// Applies one update with every parameter's accumulated gradient.
  void step(double lr);
  void zero_grad();
  std::int64_t steps() const { return steps_; }

  /// Moments as checkpoint entries "optim.m.<name>", "optim.v.<name>", "optim.step".
  void save_state(Checkpoint& ckpt) const;
  void load_state(const Checkpoint& ckpt);

 private:
  std::vector<Parameter<T>> params_;
  std::vector<AdamState> state_;
  OptimConfig cfg_;
  std::int64_t steps_ = 0;
};

/// A normalized training image with its label map.
struct SampleRecord {
  Tensor<float> image;  ///< (1, 3, H, W)
  LabelMap label;       ///< (1, H, W)
};

struct AugmentConfig {
  std::vector<double> scales{0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
  double flip_prob = 0.5;
  std::int64_t crop_h = 512;
  std::int64_t crop_w = 1024;
  float image_pad = 0.0f;  ///< the mean after normalization
  std::int32_t label_pad = 255;
};

/// The random choices of one augmentation.
struct AugmentDraw {
  double scale = 1.0;
  bool flip = false;
  std::int64_t crop_y = 0;
  std::int64_t crop_x = 0;
};

/// Draws scale and flip, then crop offsets valid for the rescaled, padded size.
AugmentDraw draw_augment(std::mt19937_64& rng, std::int64_t h, std::int64_t w, const AugmentConfig& cfg);

/// Resize (bilinear image, nearest label), optional horizontal flip, pad the
/// bottom/right up to the crop size, then crop at the drawn offset.
SampleRecord apply_augment(const SampleRecord& sample, const AugmentDraw& draw, const AugmentConfig& cfg);

inline SampleRecord augment(const SampleRecord& sample, std::mt19937_64& rng, const AugmentConfig& cfg) {
  return apply_augment(sample, draw_augment(rng, sample.label.h, sample.label.w, cfg), cfg);
}

/// Nearest-neighbour label resize with half-pixel centres.
LabelMap resize_labels_nearest(const LabelMap& labels, std::int64_t out_h, std::int64_t out_w);

/// Per-channel normalization constants of the training corpus.
struct ChannelStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
};

/// Everything a training run needs, parsed from the run config file.
struct RunConfig {
  ModelConfig model;
  std::filesystem::path dataset;
  std::string train_split = "train";
  std::string val_split = "val";
  std::filesystem::path output_dir = "run";
  std::filesystem::path resume;
  std::int64_t epochs = 1;
  std::int64_t max_iter = 0;  ///< 0: epochs * ceil(train size / batch)
  std::int64_t batch_size = 4;
  std::int64_t checkpoint_every = 1;  ///< epochs between checkpoints
  std::int64_t log_every = 1;
  OptimConfig optim;
  LossConfig loss;
  bool min_kept_set = false;
  AugmentConfig augment;
  std::optional<ChannelStats> stats;
  std::uint64_t seed = 0;
  int threads = 1;
};

/// Parses "key = value" lines; '#' starts a comment. Errors name the source,
/// the line and the key.
RunConfig parse_run_config(std::string_view text, const std::string& origin = "config");
RunConfig load_run_config(const std::filesystem::path& path);
/// Keys accepted by parse_run_config with a one-line description each.
const std::vector<std::pair<std::string, std::string>>& run_config_keys();

/// Model hyper-parameters and normalization stored alongside the weights.
void write_model_meta(Checkpoint& ckpt, const ModelConfig& cfg, const ChannelStats& stats);
ModelConfig read_model_meta(const Checkpoint& ckpt);
ChannelStats read_channel_stats(const Checkpoint& ckpt);

template <typename T>
struct StepStats {
  std::int64_t iter = 0;
  double lr = 0.0;
  LossBreakdown<T> loss;
};

/// Formats "iter <n> lr <v> loss <v> aux <v> <v> <v> <v>".
template <typename T>
std::string format_log_line(const StepStats<T>& s);

/// Iteration-driven training loop over an in-memory corpus. Batch order,
/// augmentation and dropout are all derived from (seed, iteration, sample),
/// so a resumed run continues bit-identically.
template <typename T>
class Trainer {
 public:
  using Validator = std::function<double(S2Fpn<T>&)>;

  Trainer(const RunConfig& cfg, S2Fpn<T>& model, std::vector<SampleRecord> train_set);

  std::int64_t iterations_per_epoch() const;
  std::int64_t max_iter() const { return max_iter_; }
  std::int64_t iter() const { return iter_; }

  /// Runs one optimization step and advances the iteration counter.
  StepStats<T> step();
  /// Trains to max_iter, writing checkpoints and the log. `validate`, when
  /// set, returns the val mIoU used to keep the best checkpoint.
  void run(std::ostream* log, const Validator& validate = {});

  /// Batch used at iteration `iter` (after augmentation).
  std::pair<Tensor<T>, LabelMap> batch(std::int64_t iter) const;

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ckpt);

 private:
  RunConfig cfg_;
  S2Fpn<T>& model_;
  std::vector<SampleRecord> train_;
  Adam<T> adam_;
  std::int64_t max_iter_ = 0;
  std::int64_t iter_ = 0;
};

}  // namespace s2fpn
