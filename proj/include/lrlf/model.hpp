#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lrlf/common.hpp"
#include "lrlf/rng.hpp"

namespace lrlf {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int layers = 2;
  int d_model = 64;
  int heads = 4;
  int ffn_dim = 256;
  int vocab_size = 0;
  int max_len = 256;
  double dropout = 0.3;

  void validate() const;
  bool same_shape(const ModelConfig& o) const;  // ignores dropout

  static ModelConfig tiny(int vocab_size);
  static ModelConfig paper_mbart_shape(int vocab_size);
};

template <typename Scalar>
struct LnParams {
  Mat<Scalar> g, b;  // 1 x d
};

template <typename Scalar>
struct AttnParams {
  Mat<Scalar> wq, wk, wv, wo;  // d x d
  Mat<Scalar> bq, bk, bv, bo;  // 1 x d
};

template <typename Scalar>
struct FfnParams {
  Mat<Scalar> w1, b1;  // d x ffn, 1 x ffn
  Mat<Scalar> w2, b2;  // ffn x d, 1 x d
};

template <typename Scalar>
struct EncLayerParams {
  LnParams<Scalar> ln1;
  AttnParams<Scalar> attn;
  LnParams<Scalar> ln2;
  FfnParams<Scalar> ffn;
};

template <typename Scalar>
struct DecLayerParams {
  LnParams<Scalar> ln1;
  AttnParams<Scalar> self_attn;
  LnParams<Scalar> ln2;
  AttnParams<Scalar> cross_attn;
  LnParams<Scalar> ln3;
  FfnParams<Scalar> ffn;
};

// θ: shared embedding plus pre-LN encoder/decoder stacks with final norms.
template <typename Scalar>
struct Params {
  Mat<Scalar> embed;  // vocab x d, shared by encoder, decoder and output head
  std::vector<EncLayerParams<Scalar>> enc;
  std::vector<DecLayerParams<Scalar>> dec;
  LnParams<Scalar> enc_ln, dec_ln;

  static Params shaped(const ModelConfig& cfg);  // zero-filled
  void randomize(std::uint64_t seed);            // N(0, 0.02) weights, LN g=1 b=0

  // Canonical (name, tensor) enumeration; the order defines the checkpoint
  // layout and keeps optimizer state aligned.
  std::vector<std::pair<std::string, Mat<Scalar>*>> tensor_list();
  std::vector<std::pair<std::string, const Mat<Scalar>*>> tensor_list() const;

  void set_zero();
  void scale(Scalar s);
  bool all_finite() const;

  template <typename S2>
  Params<S2> cast() const;
};

template <typename Scalar>
Mat<Scalar> sinusoid_table(int max_len, int d_model);

struct LossStats {
  double loss_sum = 0;
  std::size_t tokens = 0;
  double mean() const { return tokens ? loss_sum / static_cast<double>(tokens) : 0; }
};

// Incremental decoder state: per-layer self-attention history plus the
// cross-attention keys/values precomputed from the encoder memory.
template <typename Scalar>
struct DecodeState {
  std::vector<Mat<Scalar>> self_k, self_v;    // per layer, grows one row per step
  std::vector<Mat<Scalar>> cross_k, cross_v;  // per layer, fixed
  std::vector<char> enc_keep;                 // 1 = attendable encoder position
  int steps = 0;
};

template <typename Scalar>
class Transformer {
 public:
  explicit Transformer(ModelConfig cfg);
  Transformer(ModelConfig cfg, Params<Scalar> params);

  void init_params(std::uint64_t seed) { params_.randomize(seed); }
  const ModelConfig& config() const { return cfg_; }
  Params<Scalar>& params() { return params_; }
  const Params<Scalar>& params() const { return params_; }

  // Eval-mode full forward: rows are per-position distributions over vocab.
  Mat<Scalar> forward(const TokenSeq& encoder_input,
                      const TokenSeq& decoder_input) const;

  // Incremental decoding; feeding tokens one at a time reproduces the last
  // row of forward() exactly.
  DecodeState<Scalar> begin_decode(const TokenSeq& encoder_input) const;
  Mat<Scalar> decode_step(DecodeState<Scalar>& state, TokenId token) const;  // 1 x V probs

 private:
  ModelConfig cfg_;
  Params<Scalar> params_;
};

// Label-smoothed NLL summed over non-pad label positions; gradients (of the
// sum) accumulate into `grads`. Caller scales by 1/tokens for the batch mean.
// Pass dropout_rng = nullptr for eval-mode (dropout-free) computation.
template <typename Scalar>
LossStats loss_and_grad(const Params<Scalar>& p, const ModelConfig& cfg,
                        const std::vector<Example>& batch,
                        double label_smoothing, double dropout,
                        Rng* dropout_rng, Params<Scalar>* grads);

template <typename Scalar>
LossStats batch_loss(const Params<Scalar>& p, const ModelConfig& cfg,
                     const std::vector<Example>& batch, double label_smoothing);

struct TrainConfig {
  double dropout = 0.3;
  double label_smoothing = 0.2;
  std::int64_t warmup_steps = 2500;
  double max_lr = 3e-5;
  std::int64_t max_updates = 100000;
  std::int64_t batch_tokens = 4096;
  std::int64_t checkpoint_interval = 0;   // 0 → max_updates / 10, at least 1
  std::string lr_decay = "inverse_sqrt";  // or "constant"
  std::uint64_t seed = 1;

  void validate() const;
  std::int64_t effective_interval() const;

  static TrainConfig paper_bft();            // 100k updates
  static TrainConfig paper_mft();            // 300k updates
  static TrainConfig desk(double scale = 0.01);
};

// Linear warmup to max_lr, then inverse-square-root decay (or flat).
double lr_at(std::int64_t step, const TrainConfig& tcfg);

struct CheckpointMeta {
  std::string stage;
  std::int64_t update_count = 0;
  double valid_nll = 0;
  std::optional<double> valid_bleu;
};

struct ModelCheckpoint {
  std::uint32_t version = 1;
  ModelConfig config;
  Params<float> params;
  CheckpointMeta meta;
};

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
// When `expect` is given, tensor shapes must match it; the first offending
// tensor is named in the error.
ModelCheckpoint load_checkpoint(const std::string& path,
                                const ModelConfig* expect = nullptr);
CheckpointMeta peek_checkpoint_meta(const std::string& path,
                                    ModelConfig* config_out = nullptr);

class Adam {
 public:
  explicit Adam(const ModelConfig& cfg, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);
  void step(Params<float>& params, const Params<float>& grads, double lr);
  std::int64_t updates() const { return t_; }

 private:
  Params<float> m_, v_;
  std::int64_t t_ = 0;
  double beta1_, beta2_, eps_;
};

struct StageResult {
  std::vector<std::string> saved_paths;  // retained checkpoints, oldest first
  std::string best_path;                 // lowest valid_nll (tie → latest)
  CheckpointMeta best_meta;
  std::vector<CheckpointMeta> history;   // every checkpoint ever written
  std::vector<double> loss_curve;        // mean train loss per interval
};

using BatchProvider = std::function<std::vector<Example>(std::int64_t, Rng&)>;
using Validator = std::function<void(const Transformer<float>&, CheckpointMeta&)>;

// Runs up to max_updates Adam steps, checkpointing every interval; keeps the
// last ten checkpoints plus the best one on disk under out_dir. Divergence
// (non-finite loss) throws train-error after the last good checkpoint is on
// disk.
StageResult train_stage(Transformer<float>& model, const TrainConfig& tcfg,
                        const std::string& stage_name,
                        const std::string& out_dir,
                        const BatchProvider& next_batch,
                        const Validator& validate);

}  // namespace lrlf
