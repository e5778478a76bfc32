#include "lrlf/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace lrlf {

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  if (layers <= 0) throw config_error("layers must be positive");
  if (d_model <= 0 || heads <= 0 || ffn_dim <= 0)
    throw config_error("d_model, heads and ffn_dim must be positive");
  if (d_model % heads != 0)
    throw config_error("d_model " + std::to_string(d_model) +
                       " not divisible by heads " + std::to_string(heads));
  if (vocab_size <= 4) throw config_error("vocab_size must exceed the specials");
  if (max_len <= 1) throw config_error("max_len must exceed 1");
  if (dropout < 0 || dropout >= 1) throw config_error("dropout must be in [0,1)");
}

bool ModelConfig::same_shape(const ModelConfig& o) const {
  return layers == o.layers && d_model == o.d_model && heads == o.heads &&
         ffn_dim == o.ffn_dim && vocab_size == o.vocab_size &&
         max_len == o.max_len;
}

ModelConfig ModelConfig::tiny(int vocab_size) {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 64;
  c.heads = 4;
  c.ffn_dim = 256;
  c.vocab_size = vocab_size;
  c.max_len = 256;
  c.dropout = 0.3;
  return c;
}

ModelConfig ModelConfig::paper_mbart_shape(int vocab_size) {
  ModelConfig c;
  c.layers = 12;
  c.d_model = 1024;
  c.heads = 16;
  c.ffn_dim = 4096;
  c.vocab_size = vocab_size;
  c.max_len = 1024;
  c.dropout = 0.3;
  return c;
}

// ---------------------------------------------------------------- params

namespace {

template <typename S>
void shape_ln(LnParams<S>& ln, int d) {
  ln.g = Mat<S>::Zero(1, d);
  ln.b = Mat<S>::Zero(1, d);
}

template <typename S>
void shape_attn(AttnParams<S>& a, int d) {
  a.wq = Mat<S>::Zero(d, d);
  a.wk = Mat<S>::Zero(d, d);
  a.wv = Mat<S>::Zero(d, d);
  a.wo = Mat<S>::Zero(d, d);
  a.bq = Mat<S>::Zero(1, d);
  a.bk = Mat<S>::Zero(1, d);
  a.bv = Mat<S>::Zero(1, d);
  a.bo = Mat<S>::Zero(1, d);
}

template <typename S>
void shape_ffn(FfnParams<S>& f, int d, int ffn) {
  f.w1 = Mat<S>::Zero(d, ffn);
  f.b1 = Mat<S>::Zero(1, ffn);
  f.w2 = Mat<S>::Zero(ffn, d);
  f.b2 = Mat<S>::Zero(1, d);
}

template <typename S, typename P>
void list_ln(std::vector<std::pair<std::string, P>>& out, const std::string& base,
             LnParams<S>& ln) {
  out.emplace_back(base + ".g", &ln.g);
  out.emplace_back(base + ".b", &ln.b);
}

template <typename S, typename P>
void list_attn(std::vector<std::pair<std::string, P>>& out, const std::string& base,
               AttnParams<S>& a) {
  out.emplace_back(base + ".wq", &a.wq);
  out.emplace_back(base + ".bq", &a.bq);
  out.emplace_back(base + ".wk", &a.wk);
  out.emplace_back(base + ".bk", &a.bk);
  out.emplace_back(base + ".wv", &a.wv);
  out.emplace_back(base + ".bv", &a.bv);
  out.emplace_back(base + ".wo", &a.wo);
  out.emplace_back(base + ".bo", &a.bo);
}

template <typename S, typename P>
void list_ffn(std::vector<std::pair<std::string, P>>& out, const std::string& base,
              FfnParams<S>& f) {
  out.emplace_back(base + ".w1", &f.w1);
  out.emplace_back(base + ".b1", &f.b1);
  out.emplace_back(base + ".w2", &f.w2);
  out.emplace_back(base + ".b2", &f.b2);
}

}  // namespace

template <typename Scalar>
Params<Scalar> Params<Scalar>::shaped(const ModelConfig& cfg) {
  cfg.validate();
  Params<Scalar> p;
  p.embed = Mat<Scalar>::Zero(cfg.vocab_size, cfg.d_model);
  p.enc.resize(static_cast<std::size_t>(cfg.layers));
  p.dec.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& l : p.enc) {
    shape_ln(l.ln1, cfg.d_model);
    shape_attn(l.attn, cfg.d_model);
    shape_ln(l.ln2, cfg.d_model);
    shape_ffn(l.ffn, cfg.d_model, cfg.ffn_dim);
  }
  for (auto& l : p.dec) {
    shape_ln(l.ln1, cfg.d_model);
    shape_attn(l.self_attn, cfg.d_model);
    shape_ln(l.ln2, cfg.d_model);
    shape_attn(l.cross_attn, cfg.d_model);
    shape_ln(l.ln3, cfg.d_model);
    shape_ffn(l.ffn, cfg.d_model, cfg.ffn_dim);
  }
  shape_ln(p.enc_ln, cfg.d_model);
  shape_ln(p.dec_ln, cfg.d_model);
  return p;
}

template <typename Scalar>
std::vector<std::pair<std::string, Mat<Scalar>*>> Params<Scalar>::tensor_list() {
  std::vector<std::pair<std::string, Mat<Scalar>*>> out;
  out.emplace_back("embed", &embed);
  for (std::size_t i = 0; i < enc.size(); ++i) {
    std::string base = "enc." + std::to_string(i);
    list_ln<Scalar, Mat<Scalar>*>(out, base + ".ln1", enc[i].ln1);
    list_attn<Scalar, Mat<Scalar>*>(out, base + ".attn", enc[i].attn);
    list_ln<Scalar, Mat<Scalar>*>(out, base + ".ln2", enc[i].ln2);
    list_ffn<Scalar, Mat<Scalar>*>(out, base + ".ffn", enc[i].ffn);
  }
  for (std::size_t i = 0; i < dec.size(); ++i) {
    std::string base = "dec." + std::to_string(i);
    list_ln<Scalar, Mat<Scalar>*>(out, base + ".ln1", dec[i].ln1);
    list_attn<Scalar, Mat<Scalar>*>(out, base + ".self", dec[i].self_attn);
    list_ln<Scalar, Mat<Scalar>*>(out, base + ".ln2", dec[i].ln2);
    list_attn<Scalar, Mat<Scalar>*>(out, base + ".cross", dec[i].cross_attn);
    list_ln<Scalar, Mat<Scalar>*>(out, base + ".ln3", dec[i].ln3);
    list_ffn<Scalar, Mat<Scalar>*>(out, base + ".ffn", dec[i].ffn);
  }
  list_ln<Scalar, Mat<Scalar>*>(out, "enc_ln", enc_ln);
  list_ln<Scalar, Mat<Scalar>*>(out, "dec_ln", dec_ln);
  return out;
}

template <typename Scalar>
std::vector<std::pair<std::string, const Mat<Scalar>*>> Params<Scalar>::tensor_list()
    const {
  auto mutable_list = const_cast<Params<Scalar>*>(this)->tensor_list();
  std::vector<std::pair<std::string, const Mat<Scalar>*>> out;
  out.reserve(mutable_list.size());
  for (auto& [name, ptr] : mutable_list) out.emplace_back(name, ptr);
  return out;
}

template <typename Scalar>
void Params<Scalar>::randomize(std::uint64_t seed) {
  Rng rng(seed);
  for (auto& [name, t] : tensor_list()) {
    std::string leaf = name.substr(name.rfind('.') + 1);
    if (leaf == "g") {
      t->setOnes();
    } else if (!leaf.empty() && leaf[0] == 'b') {
      t->setZero();
    } else {
      for (Eigen::Index r = 0; r < t->rows(); ++r)
        for (Eigen::Index c = 0; c < t->cols(); ++c)
          (*t)(r, c) = static_cast<Scalar>(rng.normal() * 0.02);
    }
  }
}

template <typename Scalar>
void Params<Scalar>::set_zero() {
  for (auto& [name, t] : tensor_list()) t->setZero();
}

template <typename Scalar>
void Params<Scalar>::scale(Scalar s) {
  for (auto& [name, t] : tensor_list()) *t *= s;
}

template <typename Scalar>
bool Params<Scalar>::all_finite() const {
  for (auto& [name, t] : tensor_list())
    if (!t->allFinite()) return false;
  return true;
}

template <typename Scalar>
template <typename S2>
Params<S2> Params<Scalar>::cast() const {
  Params<S2> o;
  o.embed = embed.template cast<S2>();
  auto cast_ln = [](const LnParams<Scalar>& ln) {
    LnParams<S2> r;
    r.g = ln.g.template cast<S2>();
    r.b = ln.b.template cast<S2>();
    return r;
  };
  auto cast_attn = [](const AttnParams<Scalar>& a) {
    AttnParams<S2> r;
    r.wq = a.wq.template cast<S2>();
    r.wk = a.wk.template cast<S2>();
    r.wv = a.wv.template cast<S2>();
    r.wo = a.wo.template cast<S2>();
    r.bq = a.bq.template cast<S2>();
    r.bk = a.bk.template cast<S2>();
    r.bv = a.bv.template cast<S2>();
    r.bo = a.bo.template cast<S2>();
    return r;
  };
  auto cast_ffn = [](const FfnParams<Scalar>& f) {
    FfnParams<S2> r;
    r.w1 = f.w1.template cast<S2>();
    r.b1 = f.b1.template cast<S2>();
    r.w2 = f.w2.template cast<S2>();
    r.b2 = f.b2.template cast<S2>();
    return r;
  };
  for (const auto& l : enc)
    o.enc.push_back({cast_ln(l.ln1), cast_attn(l.attn), cast_ln(l.ln2), cast_ffn(l.ffn)});
  for (const auto& l : dec)
    o.dec.push_back({cast_ln(l.ln1), cast_attn(l.self_attn), cast_ln(l.ln2),
                     cast_attn(l.cross_attn), cast_ln(l.ln3), cast_ffn(l.ffn)});
  o.enc_ln = cast_ln(enc_ln);
  o.dec_ln = cast_ln(dec_ln);
  return o;
}

template <typename Scalar>
Mat<Scalar> sinusoid_table(int max_len, int d_model) {
  Mat<Scalar> p(max_len, d_model);
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < d_model; i += 2) {
      double angle = pos / std::pow(10000.0, static_cast<double>(i) / d_model);
      p(pos, i) = static_cast<Scalar>(std::sin(angle));
      if (i + 1 < d_model) p(pos, i + 1) = static_cast<Scalar>(std::cos(angle));
    }
  }
  return p;
}

// ---------------------------------------------------------------- forward/backward pieces

namespace {

constexpr double kLnEps = 1e-5;

template <typename S>
struct LnTape {
  Mat<S> xhat;     // T x d
  Mat<S> inv_std;  // T x 1
};

template <typename S>
Mat<S> layer_norm_fwd(const Mat<S>& x, const LnParams<S>& ln, LnTape<S>* tape) {
  const Eigen::Index t = x.rows(), d = x.cols();
  Mat<S> y(t, d);
  Mat<S> xhat(t, d);
  Mat<S> inv_std(t, 1);
  for (Eigen::Index r = 0; r < t; ++r) {
    S mean = x.row(r).mean();
    auto centered = (x.row(r).array() - mean).eval();
    S var = centered.square().mean();
    S is = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
    xhat.row(r) = (centered * is).matrix();
    inv_std(r, 0) = is;
    y.row(r) = (xhat.row(r).array() * ln.g.array() + ln.b.array()).matrix();
  }
  if (tape) {
    tape->xhat = std::move(xhat);
    tape->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename S>
Mat<S> layer_norm_bwd(const Mat<S>& dy, const LnParams<S>& ln,
                      const LnTape<S>& tape, LnParams<S>* dln) {
  const Eigen::Index t = dy.rows(), d = dy.cols();
  Mat<S> dx(t, d);
  for (Eigen::Index r = 0; r < t; ++r) {
    auto dxhat = (dy.row(r).array() * ln.g.array()).eval();
    S m1 = dxhat.mean();
    S m2 = (dxhat * tape.xhat.row(r).array()).mean();
    dx.row(r) = (tape.inv_std(r, 0) *
                 (dxhat - m1 - tape.xhat.row(r).array() * m2))
                    .matrix();
  }
  if (dln) {
    for (Eigen::Index r = 0; r < t; ++r) {
      dln->g.array() += dy.row(r).array() * tape.xhat.row(r).array();
      dln->b.array() += dy.row(r).array();
    }
  }
  return dx;
}

template <typename S>
struct AttnTape {
  Mat<S> xq, xkv;            // layer-norm outputs feeding Q and K/V
  Mat<S> q, k, v;            // T x d
  std::vector<Mat<S>> attn;  // per head, Tq x Tk (post softmax)
  Mat<S> concat;             // Tq x d, pre output projection
};

template <typename S>
Mat<S> attention_fwd(const Mat<S>& xq, const Mat<S>& xkv, const AttnParams<S>& ap,
                     int heads, bool causal, const std::vector<char>* key_keep,
                     AttnTape<S>* tape) {
  const Eigen::Index tq = xq.rows(), tk = xkv.rows(), d = xq.cols();
  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const S neg_inf = -std::numeric_limits<S>::infinity();

  Mat<S> q = (xq * ap.wq).rowwise() + ap.bq.row(0);
  Mat<S> k = (xkv * ap.wk).rowwise() + ap.bk.row(0);
  Mat<S> v = (xkv * ap.wv).rowwise() + ap.bv.row(0);

  Mat<S> concat(tq, d);
  std::vector<Mat<S>> attn(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    auto qh = q.block(0, h * dh, tq, dh);
    auto kh = k.block(0, h * dh, tk, dh);
    auto vh = v.block(0, h * dh, tk, dh);
    Mat<S> s = qh * kh.transpose() * scale;  // tq x tk
    for (Eigen::Index i = 0; i < tq; ++i) {
      for (Eigen::Index j = 0; j < tk; ++j) {
        if ((causal && j > i) || (key_keep && !(*key_keep)[static_cast<std::size_t>(j)]))
          s(i, j) = neg_inf;
      }
      S mx = s.row(i).maxCoeff();
      auto e = (s.row(i).array() - mx).exp().eval();
      s.row(i) = (e / e.sum()).matrix();
    }
    concat.block(0, h * dh, tq, dh) = s * vh;
    attn[static_cast<std::size_t>(h)] = std::move(s);
  }
  Mat<S> out = (concat * ap.wo).rowwise() + ap.bo.row(0);
  if (tape) {
    tape->xq = xq;
    tape->xkv = xkv;
    tape->q = std::move(q);
    tape->k = std::move(k);
    tape->v = std::move(v);
    tape->attn = std::move(attn);
    tape->concat = std::move(concat);
  }
  return out;
}

template <typename S>
void attention_bwd(const Mat<S>& dout, const AttnParams<S>& ap, int heads,
                   const AttnTape<S>& tape, AttnParams<S>* dap, Mat<S>* dxq,
                   Mat<S>* dxkv) {
  const Eigen::Index tq = tape.xq.rows(), tk = tape.xkv.rows(), d = tape.xq.cols();
  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  dap->wo += tape.concat.transpose() * dout;
  dap->bo += dout.colwise().sum();
  Mat<S> dconcat = dout * ap.wo.transpose();

  Mat<S> dq(tq, d), dk(tk, d), dv(tk, d);
  for (int h = 0; h < heads; ++h) {
    auto qh = tape.q.block(0, h * dh, tq, dh);
    auto kh = tape.k.block(0, h * dh, tk, dh);
    auto vh = tape.v.block(0, h * dh, tk, dh);
    const Mat<S>& a = tape.attn[static_cast<std::size_t>(h)];
    auto dch = dconcat.block(0, h * dh, tq, dh);

    Mat<S> da = dch * vh.transpose();          // tq x tk
    dv.block(0, h * dh, tk, dh) = a.transpose() * dch;

    Mat<S> ds(tq, tk);
    for (Eigen::Index i = 0; i < tq; ++i) {
      S dot = (da.row(i).array() * a.row(i).array()).sum();
      ds.row(i) = (a.row(i).array() * (da.row(i).array() - dot)).matrix();
    }
    dq.block(0, h * dh, tq, dh) = ds * kh * scale;
    dk.block(0, h * dh, tk, dh) = ds.transpose() * qh * scale;
  }

  dap->wq += tape.xq.transpose() * dq;
  dap->bq += dq.colwise().sum();
  dap->wk += tape.xkv.transpose() * dk;
  dap->bk += dk.colwise().sum();
  dap->wv += tape.xkv.transpose() * dv;
  dap->bv += dv.colwise().sum();
  if (dxq) *dxq += dq * ap.wq.transpose();
  if (dxkv) *dxkv += dk * ap.wk.transpose() + dv * ap.wv.transpose();
}

template <typename S>
S gelu(S u) {
  return S(0.5) * u * (S(1) + std::erf(u / std::sqrt(S(2))));
}

template <typename S>
S gelu_grad(S u) {
  const S phi = std::exp(-u * u / S(2)) / std::sqrt(S(2) * static_cast<S>(M_PI));
  return S(0.5) * (S(1) + std::erf(u / std::sqrt(S(2)))) + u * phi;
}

template <typename S>
struct FfnTape {
  Mat<S> x;  // input (post-LN)
  Mat<S> u;  // x W1 + b1
};

template <typename S>
Mat<S> ffn_fwd(const Mat<S>& x, const FfnParams<S>& fp, FfnTape<S>* tape) {
  Mat<S> u = (x * fp.w1).rowwise() + fp.b1.row(0);
  Mat<S> h = u.unaryExpr([](S v) { return gelu(v); });
  Mat<S> y = (h * fp.w2).rowwise() + fp.b2.row(0);
  if (tape) {
    tape->x = x;
    tape->u = std::move(u);
  }
  return y;
}

template <typename S>
Mat<S> ffn_bwd(const Mat<S>& dy, const FfnParams<S>& fp, const FfnTape<S>& tape,
               FfnParams<S>* dfp) {
  Mat<S> h = tape.u.unaryExpr([](S v) { return gelu(v); });
  dfp->w2 += h.transpose() * dy;
  dfp->b2 += dy.colwise().sum();
  Mat<S> dh = dy * fp.w2.transpose();
  Mat<S> du = dh.cwiseProduct(tape.u.unaryExpr([](S v) { return gelu_grad(v); }));
  dfp->w1 += tape.x.transpose() * du;
  dfp->b1 += du.colwise().sum();
  return du * fp.w1.transpose();
}

// Inverted dropout; mask entries are 0 or 1/(1-rate). Empty mask = identity.
template <typename S>
void dropout_fwd(Mat<S>& x, double rate, Rng* rng, Mat<S>* mask_out) {
  if (!rng || rate <= 0) return;
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  Mat<S> mask(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      mask(r, c) = rng->uniform() < rate ? S(0) : keep_scale;
  x.array() *= mask.array();
  if (mask_out) *mask_out = std::move(mask);
}

void check_sequence(const TokenSeq& seq, const ModelConfig& cfg, const char* side) {
  if (seq.empty()) throw model_error(std::string(side) + " input is empty");
  if (seq.size() > static_cast<std::size_t>(cfg.max_len))
    throw model_error(std::string(side) + " length " + std::to_string(seq.size()) +
                      " exceeds max_len " + std::to_string(cfg.max_len));
  for (TokenId id : seq)
    if (id < 0 || id >= cfg.vocab_size)
      throw model_error(std::string(side) + " token id " + std::to_string(id) +
                        " out of range (vocab " + std::to_string(cfg.vocab_size) + ")");
}

template <typename S>
Mat<S> embed_sequence(const Params<S>& p, const ModelConfig& cfg,
                      const TokenSeq& ids) {
  const S scale = std::sqrt(static_cast<S>(cfg.d_model));
  static thread_local int cached_len = 0, cached_d = 0;
  static thread_local Mat<S> table;
  if (cached_len < cfg.max_len || cached_d != cfg.d_model) {
    table = sinusoid_table<S>(cfg.max_len, cfg.d_model);
    cached_len = cfg.max_len;
    cached_d = cfg.d_model;
  }
  Mat<S> x(static_cast<Eigen::Index>(ids.size()), cfg.d_model);
  for (std::size_t i = 0; i < ids.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) =
        p.embed.row(ids[i]) * scale + table.row(static_cast<Eigen::Index>(i));
  return x;
}

template <typename S>
struct EncLayerTape {
  LnTape<S> ln1;
  AttnTape<S> attn;
  Mat<S> drop1;
  LnTape<S> ln2;
  FfnTape<S> ffn;
  Mat<S> drop2;
};

template <typename S>
struct DecLayerTape {
  LnTape<S> ln1;
  AttnTape<S> self;
  Mat<S> drop1;
  LnTape<S> ln2;
  AttnTape<S> cross;
  Mat<S> drop2;
  LnTape<S> ln3;
  FfnTape<S> ffn;
  Mat<S> drop3;
};

template <typename S>
struct ExampleTape {
  Mat<S> emb_drop_enc, emb_drop_dec;
  std::vector<EncLayerTape<S>> enc;
  std::vector<DecLayerTape<S>> dec;
  LnTape<S> enc_ln, dec_ln;
  Mat<S> memory;  // post enc_ln
  Mat<S> dec_h;   // post dec_ln, feeds output projection
  std::vector<char> enc_keep;
};

template <typename S>
void apply_mask(Mat<S>& x, const Mat<S>& mask) {
  if (mask.size()) x.array() *= mask.array();
}

// Encoder stack; returns the layer-normed memory. Pads are kept out of
// attention via enc_keep.
template <typename S>
Mat<S> encoder_fwd(const Params<S>& p, const ModelConfig& cfg,
                   const TokenSeq& enc_in, double dropout, Rng* rng,
                   ExampleTape<S>* tape) {
  check_sequence(enc_in, cfg, "encoder");
  std::vector<char> keep(enc_in.size());
  bool any = false;
  for (std::size_t i = 0; i < enc_in.size(); ++i) {
    keep[i] = enc_in[i] != 0 /*PAD*/ ? 1 : 0;
    any = any || keep[i];
  }
  if (!any) throw model_error("encoder input is all padding");

  Mat<S> x = embed_sequence(p, cfg, enc_in);
  dropout_fwd(x, dropout, rng, tape ? &tape->emb_drop_enc : nullptr);
  if (tape) tape->enc.resize(p.enc.size());
  for (std::size_t l = 0; l < p.enc.size(); ++l) {
    EncLayerTape<S>* lt = tape ? &tape->enc[l] : nullptr;
    Mat<S> n1 = layer_norm_fwd(x, p.enc[l].ln1, lt ? &lt->ln1 : nullptr);
    Mat<S> a = attention_fwd(n1, n1, p.enc[l].attn, cfg.heads, false, &keep,
                             lt ? &lt->attn : nullptr);
    dropout_fwd(a, dropout, rng, lt ? &lt->drop1 : nullptr);
    x += a;
    Mat<S> n2 = layer_norm_fwd(x, p.enc[l].ln2, lt ? &lt->ln2 : nullptr);
    Mat<S> f = ffn_fwd(n2, p.enc[l].ffn, lt ? &lt->ffn : nullptr);
    dropout_fwd(f, dropout, rng, lt ? &lt->drop2 : nullptr);
    x += f;
  }
  Mat<S> memory = layer_norm_fwd(x, p.enc_ln, tape ? &tape->enc_ln : nullptr);
  if (tape) {
    tape->memory = memory;
    tape->enc_keep = keep;
  }
  return memory;
}

// Full decoder stack over the whole prefix; returns probabilities (T x V)
// or, when logits_out is set, the raw logits as well.
template <typename S>
Mat<S> decoder_fwd(const Params<S>& p, const ModelConfig& cfg,
                   const Mat<S>& memory, const std::vector<char>& enc_keep,
                   const TokenSeq& dec_in, double dropout, Rng* rng,
                   ExampleTape<S>* tape, Mat<S>* logits_out) {
  check_sequence(dec_in, cfg, "decoder");
  Mat<S> x = embed_sequence(p, cfg, dec_in);
  dropout_fwd(x, dropout, rng, tape ? &tape->emb_drop_dec : nullptr);
  if (tape) tape->dec.resize(p.dec.size());
  for (std::size_t l = 0; l < p.dec.size(); ++l) {
    DecLayerTape<S>* lt = tape ? &tape->dec[l] : nullptr;
    Mat<S> n1 = layer_norm_fwd(x, p.dec[l].ln1, lt ? &lt->ln1 : nullptr);
    Mat<S> a = attention_fwd(n1, n1, p.dec[l].self_attn, cfg.heads, true, nullptr,
                             lt ? &lt->self : nullptr);
    dropout_fwd(a, dropout, rng, lt ? &lt->drop1 : nullptr);
    x += a;
    Mat<S> n2 = layer_norm_fwd(x, p.dec[l].ln2, lt ? &lt->ln2 : nullptr);
    Mat<S> c = attention_fwd(n2, memory, p.dec[l].cross_attn, cfg.heads, false,
                             &enc_keep, lt ? &lt->cross : nullptr);
    dropout_fwd(c, dropout, rng, lt ? &lt->drop2 : nullptr);
    x += c;
    Mat<S> n3 = layer_norm_fwd(x, p.dec[l].ln3, lt ? &lt->ln3 : nullptr);
    Mat<S> f = ffn_fwd(n3, p.dec[l].ffn, lt ? &lt->ffn : nullptr);
    dropout_fwd(f, dropout, rng, lt ? &lt->drop3 : nullptr);
    x += f;
  }
  Mat<S> h = layer_norm_fwd(x, p.dec_ln, tape ? &tape->dec_ln : nullptr);
  if (tape) tape->dec_h = h;
  Mat<S> logits = h * p.embed.transpose();
  if (logits_out) *logits_out = logits;
  Mat<S> probs(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    S mx = logits.row(r).maxCoeff();
    auto e = (logits.row(r).array() - mx).exp().eval();
    probs.row(r) = (e / e.sum()).matrix();
  }
  return probs;
}

// Backward through the whole example given d(logits); accumulates into grads.
template <typename S>
void example_bwd(const Params<S>& p, const ModelConfig& cfg,
                 const TokenSeq& enc_in, const TokenSeq& dec_in,
                 const Mat<S>& dlogits, const ExampleTape<S>& tape,
                 Params<S>& g) {
  const S emb_scale = std::sqrt(static_cast<S>(cfg.d_model));

  // Output projection: logits = H E^T.
  g.embed += dlogits.transpose() * tape.dec_h;
  Mat<S> dh = dlogits * p.embed;
  Mat<S> dx = layer_norm_bwd(dh, p.dec_ln, tape.dec_ln, &g.dec_ln);

  Mat<S> dmem = Mat<S>::Zero(tape.memory.rows(), tape.memory.cols());
  for (std::size_t li = p.dec.size(); li-- > 0;) {
    const auto& lp = p.dec[li];
    auto& lg = g.dec[li];
    const auto& lt = tape.dec[li];

    Mat<S> df = dx;
    apply_mask(df, lt.drop3);
    Mat<S> dn3 = ffn_bwd(df, lp.ffn, lt.ffn, &lg.ffn);
    dx += layer_norm_bwd(dn3, lp.ln3, lt.ln3, &lg.ln3);

    Mat<S> dc = dx;
    apply_mask(dc, lt.drop2);
    Mat<S> dn2 = Mat<S>::Zero(dx.rows(), dx.cols());
    attention_bwd(dc, lp.cross_attn, cfg.heads, lt.cross, &lg.cross_attn, &dn2,
                  &dmem);
    dx += layer_norm_bwd(dn2, lp.ln2, lt.ln2, &lg.ln2);

    Mat<S> da = dx;
    apply_mask(da, lt.drop1);
    Mat<S> dn1 = Mat<S>::Zero(dx.rows(), dx.cols());
    attention_bwd(da, lp.self_attn, cfg.heads, lt.self, &lg.self_attn, &dn1, &dn1);
    dx += layer_norm_bwd(dn1, lp.ln1, lt.ln1, &lg.ln1);
  }
  apply_mask(dx, tape.emb_drop_dec);
  for (std::size_t i = 0; i < dec_in.size(); ++i)
    g.embed.row(dec_in[i]) += dx.row(static_cast<Eigen::Index>(i)) * emb_scale;

  // Encoder side, entered through the memory gradient.
  Mat<S> dex = layer_norm_bwd(dmem, p.enc_ln, tape.enc_ln, &g.enc_ln);
  for (std::size_t li = p.enc.size(); li-- > 0;) {
    const auto& lp = p.enc[li];
    auto& lg = g.enc[li];
    const auto& lt = tape.enc[li];

    Mat<S> df = dex;
    apply_mask(df, lt.drop2);
    Mat<S> dn2 = ffn_bwd(df, lp.ffn, lt.ffn, &lg.ffn);
    dex += layer_norm_bwd(dn2, lp.ln2, lt.ln2, &lg.ln2);

    Mat<S> da = dex;
    apply_mask(da, lt.drop1);
    Mat<S> dn1 = Mat<S>::Zero(dex.rows(), dex.cols());
    attention_bwd(da, lp.attn, cfg.heads, lt.attn, &lg.attn, &dn1, &dn1);
    dex += layer_norm_bwd(dn1, lp.ln1, lt.ln1, &lg.ln1);
  }
  apply_mask(dex, tape.emb_drop_enc);
  for (std::size_t i = 0; i < enc_in.size(); ++i)
    g.embed.row(enc_in[i]) += dex.row(static_cast<Eigen::Index>(i)) * emb_scale;
}

}  // namespace

// ---------------------------------------------------------------- transformer

template <typename Scalar>
Transformer<Scalar>::Transformer(ModelConfig cfg)
    : cfg_(cfg), params_(Params<Scalar>::shaped(cfg)) {}

template <typename Scalar>
Transformer<Scalar>::Transformer(ModelConfig cfg, Params<Scalar> params)
    : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
}

template <typename Scalar>
Mat<Scalar> Transformer<Scalar>::forward(const TokenSeq& encoder_input,
                                         const TokenSeq& decoder_input) const {
  ExampleTape<Scalar> tape;  // reused for its memory/keep fields only
  Mat<Scalar> memory = encoder_fwd(params_, cfg_, encoder_input, 0, nullptr, &tape);
  return decoder_fwd<Scalar>(params_, cfg_, memory, tape.enc_keep, decoder_input,
                             0, nullptr, nullptr, nullptr);
}

template <typename Scalar>
DecodeState<Scalar> Transformer<Scalar>::begin_decode(
    const TokenSeq& encoder_input) const {
  ExampleTape<Scalar> tape;
  Mat<Scalar> memory = encoder_fwd(params_, cfg_, encoder_input, 0, nullptr, &tape);
  DecodeState<Scalar> st;
  st.enc_keep = tape.enc_keep;
  const std::size_t L = params_.dec.size();
  st.self_k.resize(L);
  st.self_v.resize(L);
  st.cross_k.resize(L);
  st.cross_v.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    const auto& ap = params_.dec[l].cross_attn;
    st.cross_k[l] = (memory * ap.wk).rowwise() + ap.bk.row(0);
    st.cross_v[l] = (memory * ap.wv).rowwise() + ap.bv.row(0);
    st.self_k[l] = Mat<Scalar>(0, cfg_.d_model);
    st.self_v[l] = Mat<Scalar>(0, cfg_.d_model);
  }
  return st;
}

namespace {

// Single-query attention against cached keys/values.
template <typename S>
Mat<S> cached_attention(const Mat<S>& q_row, const Mat<S>& k, const Mat<S>& v,
                        const AttnParams<S>& ap, int heads,
                        const std::vector<char>* key_keep) {
  const Eigen::Index d = q_row.cols(), tk = k.rows();
  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const S neg_inf = -std::numeric_limits<S>::infinity();
  Mat<S> concat(1, d);
  for (int h = 0; h < heads; ++h) {
    auto qh = q_row.block(0, h * dh, 1, dh);
    auto kh = k.block(0, h * dh, tk, dh);
    auto vh = v.block(0, h * dh, tk, dh);
    Eigen::Matrix<S, 1, Eigen::Dynamic> s = (qh * kh.transpose()) * scale;
    if (key_keep)
      for (Eigen::Index j = 0; j < tk; ++j)
        if (!(*key_keep)[static_cast<std::size_t>(j)]) s(0, j) = neg_inf;
    S mx = s.maxCoeff();
    auto e = (s.array() - mx).exp().eval();
    s = (e / e.sum()).matrix();
    concat.block(0, h * dh, 1, dh) = s * vh;
  }
  return (concat * ap.wo).rowwise() + ap.bo.row(0);
}

}  // namespace

template <typename Scalar>
Mat<Scalar> Transformer<Scalar>::decode_step(DecodeState<Scalar>& state,
                                             TokenId token) const {
  if (token < 0 || token >= cfg_.vocab_size)
    throw model_error("decoder token id " + std::to_string(token) + " out of range");
  if (state.steps + 1 > cfg_.max_len)
    throw model_error("decode length exceeds max_len " + std::to_string(cfg_.max_len));

  const Scalar emb_scale = std::sqrt(static_cast<Scalar>(cfg_.d_model));
  Mat<Scalar> pos_row(1, cfg_.d_model);
  for (int i = 0; i < cfg_.d_model; i += 2) {
    double angle = state.steps /
                   std::pow(10000.0, static_cast<double>(i) / cfg_.d_model);
    pos_row(0, i) = static_cast<Scalar>(std::sin(angle));
    if (i + 1 < cfg_.d_model) pos_row(0, i + 1) = static_cast<Scalar>(std::cos(angle));
  }
  Mat<Scalar> x = params_.embed.row(token) * emb_scale + pos_row;

  for (std::size_t l = 0; l < params_.dec.size(); ++l) {
    const auto& lp = params_.dec[l];
    Mat<Scalar> n1 = layer_norm_fwd(x, lp.ln1, static_cast<LnTape<Scalar>*>(nullptr));
    Mat<Scalar> q = (n1 * lp.self_attn.wq).rowwise() + lp.self_attn.bq.row(0);
    Mat<Scalar> k = (n1 * lp.self_attn.wk).rowwise() + lp.self_attn.bk.row(0);
    Mat<Scalar> v = (n1 * lp.self_attn.wv).rowwise() + lp.self_attn.bv.row(0);
    state.self_k[l].conservativeResize(state.self_k[l].rows() + 1, cfg_.d_model);
    state.self_k[l].row(state.self_k[l].rows() - 1) = k;
    state.self_v[l].conservativeResize(state.self_v[l].rows() + 1, cfg_.d_model);
    state.self_v[l].row(state.self_v[l].rows() - 1) = v;
    x += cached_attention(q, state.self_k[l], state.self_v[l], lp.self_attn,
                          cfg_.heads, nullptr);

    Mat<Scalar> n2 = layer_norm_fwd(x, lp.ln2, static_cast<LnTape<Scalar>*>(nullptr));
    Mat<Scalar> q2 = (n2 * lp.cross_attn.wq).rowwise() + lp.cross_attn.bq.row(0);
    x += cached_attention(q2, state.cross_k[l], state.cross_v[l], lp.cross_attn,
                          cfg_.heads, &state.enc_keep);

    Mat<Scalar> n3 = layer_norm_fwd(x, lp.ln3, static_cast<LnTape<Scalar>*>(nullptr));
    x += ffn_fwd(n3, lp.ffn, static_cast<FfnTape<Scalar>*>(nullptr));
  }
  Mat<Scalar> h = layer_norm_fwd(x, params_.dec_ln, static_cast<LnTape<Scalar>*>(nullptr));
  Mat<Scalar> logits = h * params_.embed.transpose();
  Scalar mx = logits.maxCoeff();
  Mat<Scalar> probs = (logits.array() - mx).exp().matrix();
  probs /= probs.sum();
  ++state.steps;
  return probs;
}

// ---------------------------------------------------------------- loss

template <typename Scalar>
LossStats loss_and_grad(const Params<Scalar>& p, const ModelConfig& cfg,
                        const std::vector<Example>& batch,
                        double label_smoothing, double dropout,
                        Rng* dropout_rng, Params<Scalar>* grads) {
  if (label_smoothing < 0 || label_smoothing >= 1)
    throw config_error("label_smoothing must be in [0,1)");
  LossStats stats;
  const double eps = label_smoothing;
  const double v = cfg.vocab_size;

  for (const Example& ex : batch) {
    if (ex.decoder_input.size() != ex.labels.size())
      throw train_error("example with |decoder_input| != |labels|");
    ExampleTape<Scalar> tape;
    Mat<Scalar> memory = encoder_fwd(p, cfg, ex.encoder_input, dropout,
                                     dropout_rng, &tape);
    Mat<Scalar> logits;
    decoder_fwd(p, cfg, memory, tape.enc_keep, ex.decoder_input, dropout,
                dropout_rng, &tape, &logits);

    Mat<Scalar> dlogits;
    if (grads) dlogits = Mat<Scalar>::Zero(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      TokenId t = ex.labels[static_cast<std::size_t>(i)];
      if (t == 0 /*PAD*/) continue;
      // log-softmax of row i
      Scalar mx = logits.row(i).maxCoeff();
      auto shifted = (logits.row(i).array() - mx).eval();
      Scalar lse = std::log(shifted.exp().sum());
      double logp_t = static_cast<double>(shifted(t) - lse);
      double sum_logp = static_cast<double>((shifted - lse).sum());
      stats.loss_sum += -(1.0 - eps) * logp_t - (eps / v) * sum_logp;
      ++stats.tokens;
      if (grads) {
        auto prob = (shifted - lse).exp().eval();
        dlogits.row(i) = prob.matrix();
        dlogits.row(i).array() -= static_cast<Scalar>(eps / v);
        dlogits(i, t) -= static_cast<Scalar>(1.0 - eps);
      }
    }
    if (grads)
      example_bwd(p, cfg, ex.encoder_input, ex.decoder_input, dlogits, tape,
                  *grads);
  }
  return stats;
}

template <typename Scalar>
LossStats batch_loss(const Params<Scalar>& p, const ModelConfig& cfg,
                     const std::vector<Example>& batch, double label_smoothing) {
  return loss_and_grad<Scalar>(p, cfg, batch, label_smoothing, 0, nullptr, nullptr);
}

// ---------------------------------------------------------------- schedule / config

void TrainConfig::validate() const {
  if (dropout < 0 || dropout >= 1) throw config_error("dropout must be in [0,1)");
  if (label_smoothing < 0 || label_smoothing >= 1)
    throw config_error("label_smoothing must be in [0,1)");
  if (warmup_steps <= 0) throw config_error("warmup_steps must be positive");
  if (max_lr <= 0) throw config_error("max_lr must be positive");
  if (max_updates <= 0) throw config_error("max_updates must be positive");
  if (batch_tokens <= 0) throw config_error("batch_tokens must be positive");
  if (checkpoint_interval < 0) throw config_error("checkpoint_interval must be >= 0");
  if (lr_decay != "inverse_sqrt" && lr_decay != "constant")
    throw config_error("lr_decay must be inverse_sqrt or constant");
}

std::int64_t TrainConfig::effective_interval() const {
  if (checkpoint_interval > 0) return checkpoint_interval;
  return std::max<std::int64_t>(1, max_updates / 10);
}

TrainConfig TrainConfig::paper_bft() {
  TrainConfig t;
  t.max_updates = 100000;
  return t;
}

TrainConfig TrainConfig::paper_mft() {
  TrainConfig t;
  t.max_updates = 300000;
  return t;
}

TrainConfig TrainConfig::desk(double scale) {
  if (scale <= 0 || scale > 1) throw config_error("desk scale must be in (0,1]");
  TrainConfig t;
  t.warmup_steps = std::max<std::int64_t>(1, static_cast<std::int64_t>(2500 * scale));
  t.max_updates = std::max<std::int64_t>(1, static_cast<std::int64_t>(100000 * scale));
  t.max_lr = 1e-3;  // random-init tiny models need a real learning rate
  t.dropout = 0.1;
  t.batch_tokens = 512;
  return t;
}

double lr_at(std::int64_t step, const TrainConfig& tcfg) {
  if (step < 1) throw train_error("lr_at: step must be >= 1");
  double w = static_cast<double>(tcfg.warmup_steps);
  double s = static_cast<double>(step);
  double factor;
  if (tcfg.lr_decay == "constant")
    factor = std::min(s / w, 1.0);
  else
    factor = std::min(s / w, std::sqrt(w / s));
  return tcfg.max_lr * factor;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[] = "LRLF-CKPT";
constexpr std::size_t kMagicLen = 9;
constexpr std::uint32_t kVersion = 1;

ordered_json config_to_json(const ModelConfig& c) {
  ordered_json j;
  j["layers"] = c.layers;
  j["d_model"] = c.d_model;
  j["heads"] = c.heads;
  j["ffn_dim"] = c.ffn_dim;
  j["vocab_size"] = c.vocab_size;
  j["max_len"] = c.max_len;
  j["dropout"] = c.dropout;
  return j;
}

ModelConfig config_from_json(const ordered_json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.dropout = j.at("dropout").get<double>();
  return c;
}

template <typename T>
void write_le(std::ostream& out, T v) {
  // Little-endian host assumed (documented in the README byte-layout note).
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

struct CkptHeader {
  ordered_json json;
  std::uint64_t data_offset = 0;
};

CkptHeader read_header(std::ifstream& in, const std::string& path) {
  char magic[kMagicLen];
  if (!in.read(magic, kMagicLen) || std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw model_error("corrupt checkpoint " + path + ": bad magic");
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  if (!in.read(reinterpret_cast<char*>(&version), sizeof version))
    throw model_error("corrupt checkpoint " + path + ": truncated");
  if (version != kVersion)
    throw model_error("checkpoint " + path + ": version mismatch (got " +
                      std::to_string(version) + ", want " + std::to_string(kVersion) + ")");
  if (!in.read(reinterpret_cast<char*>(&header_len), sizeof header_len))
    throw model_error("corrupt checkpoint " + path + ": truncated");
  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len)))
    throw model_error("corrupt checkpoint " + path + ": truncated header");
  CkptHeader h;
  try {
    h.json = ordered_json::parse(header);
  } catch (const ordered_json::exception& e) {
    throw model_error("corrupt checkpoint " + path + ": bad header json");
  }
  h.data_offset = kMagicLen + sizeof version + sizeof header_len + header_len;
  return h;
}

CheckpointMeta meta_from_json(const ordered_json& j) {
  CheckpointMeta m;
  m.stage = j.at("stage").get<std::string>();
  m.update_count = j.at("update_count").get<std::int64_t>();
  m.valid_nll = j.at("valid_nll").get<double>();
  if (j.contains("valid_bleu") && !j.at("valid_bleu").is_null())
    m.valid_bleu = j.at("valid_bleu").get<double>();
  return m;
}

}  // namespace

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
  ckpt.config.validate();
  if (ckpt.version != kVersion)
    throw model_error("unsupported checkpoint version " + std::to_string(ckpt.version));

  ordered_json header;
  header["config"] = config_to_json(ckpt.config);
  ordered_json meta;
  meta["stage"] = ckpt.meta.stage;
  meta["update_count"] = ckpt.meta.update_count;
  meta["valid_nll"] = ckpt.meta.valid_nll;
  if (ckpt.meta.valid_bleu)
    meta["valid_bleu"] = *ckpt.meta.valid_bleu;
  else
    meta["valid_bleu"] = nullptr;
  header["meta"] = meta;

  auto tensors = ckpt.params.tensor_list();
  ordered_json manifest = ordered_json::array();
  for (const auto& [name, t] : tensors) {
    ordered_json entry;
    entry["name"] = name;
    entry["rows"] = t->rows();
    entry["cols"] = t->cols();
    manifest.push_back(entry);
  }
  header["tensors"] = manifest;
  std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write checkpoint " + path);
  out.write(kMagic, kMagicLen);
  write_le(out, kVersion);
  write_le(out, static_cast<std::uint64_t>(header_str.size()));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, t] : tensors)
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(sizeof(float) * t->size()));
  if (!out) throw io_error("write failure on checkpoint " + path);
}

ModelCheckpoint load_checkpoint(const std::string& path, const ModelConfig* expect) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint " + path);
  CkptHeader h = read_header(in, path);

  ModelCheckpoint ckpt;
  ckpt.version = kVersion;
  try {
    ckpt.config = config_from_json(h.json.at("config"));
    ckpt.meta = meta_from_json(h.json.at("meta"));
  } catch (const ordered_json::exception&) {
    throw model_error("corrupt checkpoint " + path + ": incomplete header");
  }
  ckpt.config.validate();
  ckpt.params = Params<float>::shaped(ckpt.config);

  auto tensors = ckpt.params.tensor_list();
  const ordered_json& manifest = h.json.at("tensors");
  if (manifest.size() != tensors.size())
    throw model_error("corrupt checkpoint " + path + ": tensor count " +
                      std::to_string(manifest.size()) + ", expected " +
                      std::to_string(tensors.size()));

  // Shape validation happens before any tensor data is read.
  if (expect) {
    auto expected = Params<float>::shaped(*expect);
    auto want = expected.tensor_list();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const ordered_json& e = manifest[i];
      std::string name = e.at("name").get<std::string>();
      if (i >= want.size() || want[i].first != name ||
          want[i].second->rows() != e.at("rows").get<Eigen::Index>() ||
          want[i].second->cols() != e.at("cols").get<Eigen::Index>()) {
        std::string got = name + " " + e.at("rows").dump() + "x" + e.at("cols").dump();
        std::string exp = i < want.size()
                              ? want[i].first + " " + std::to_string(want[i].second->rows()) +
                                    "x" + std::to_string(want[i].second->cols())
                              : "(none)";
        throw model_error("shape mismatch loading " + path + ": tensor '" + name +
                          "' is " + got + ", config expects " + exp);
      }
    }
  }

  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const ordered_json& e = manifest[i];
    if (e.at("name").get<std::string>() != tensors[i].first ||
        e.at("rows").get<Eigen::Index>() != tensors[i].second->rows() ||
        e.at("cols").get<Eigen::Index>() != tensors[i].second->cols())
      throw model_error("corrupt checkpoint " + path + ": tensor '" +
                        tensors[i].first + "' has unexpected name/shape");
    if (!in.read(reinterpret_cast<char*>(tensors[i].second->data()),
                 static_cast<std::streamsize>(sizeof(float) * tensors[i].second->size())))
      throw model_error("corrupt checkpoint " + path + ": truncated tensor data");
  }
  char extra;
  if (in.read(&extra, 1))
    throw model_error("corrupt checkpoint " + path + ": trailing bytes");
  return ckpt;
}

CheckpointMeta peek_checkpoint_meta(const std::string& path, ModelConfig* config_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint " + path);
  CkptHeader h = read_header(in, path);
  try {
    if (config_out) *config_out = config_from_json(h.json.at("config"));
    return meta_from_json(h.json.at("meta"));
  } catch (const ordered_json::exception&) {
    throw model_error("corrupt checkpoint " + path + ": incomplete header");
  }
}

// ---------------------------------------------------------------- adam

Adam::Adam(const ModelConfig& cfg, double beta1, double beta2, double eps)
    : m_(Params<float>::shaped(cfg)),
      v_(Params<float>::shaped(cfg)),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {}

void Adam::step(Params<float>& params, const Params<float>& grads, double lr) {
  ++t_;
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const float bc1 = 1.0f - static_cast<float>(std::pow(beta1_, t_));
  const float bc2 = 1.0f - static_cast<float>(std::pow(beta2_, t_));
  const float eps = static_cast<float>(eps_);
  const float step_lr = static_cast<float>(lr);

  auto ps = params.tensor_list();
  auto gs = grads.tensor_list();
  auto ms = m_.tensor_list();
  auto vs = v_.tensor_list();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = *ps[i].second;
    const auto& g = *gs[i].second;
    auto& m = *ms[i].second;
    auto& v = *vs[i].second;
    m = b1 * m + (1.0f - b1) * g;
    v = (b2 * v.array() + (1.0f - b2) * g.array().square()).matrix();
    p.array() -= step_lr * (m.array() / bc1) /
                 ((v.array() / bc2).sqrt() + eps);
  }
}

// ---------------------------------------------------------------- train_stage

namespace {

std::string checkpoint_path(const std::string& out_dir, std::int64_t update) {
  std::ostringstream os;
  os << out_dir << "/ckpt_" << std::setw(8) << std::setfill('0') << update
     << ".ckpt";
  return os.str();
}

}  // namespace

StageResult train_stage(Transformer<float>& model, const TrainConfig& tcfg,
                        const std::string& stage_name,
                        const std::string& out_dir,
                        const BatchProvider& next_batch,
                        const Validator& validate) {
  tcfg.validate();
  fs::create_directories(out_dir);

  Adam adam(model.config());
  Rng data_rng(derive_seed(tcfg.seed, 0xDA7A));
  Rng drop_rng(derive_seed(tcfg.seed, 0xD209));
  Params<float> grads = Params<float>::shaped(model.config());

  const std::int64_t interval = tcfg.effective_interval();
  StageResult res;
  std::vector<std::pair<std::int64_t, std::string>> live;  // update → path
  std::int64_t best_update = -1;
  double best_nll = std::numeric_limits<double>::infinity();
  double interval_loss = 0;
  std::int64_t interval_batches = 0;

  auto retain = [&]() {
    // Keep the newest ten plus the best-by-valid-NLL checkpoint.
    std::vector<std::pair<std::int64_t, std::string>> keep;
    std::size_t first_kept = live.size() > 10 ? live.size() - 10 : 0;
    for (std::size_t i = 0; i < live.size(); ++i) {
      bool in_window = i >= first_kept;
      bool is_best = live[i].first == best_update;
      if (in_window || is_best) {
        keep.push_back(live[i]);
      } else {
        std::error_code ec;
        fs::remove(live[i].second, ec);
      }
    }
    live = std::move(keep);
  };

  for (std::int64_t t = 1; t <= tcfg.max_updates; ++t) {
    std::vector<Example> batch = next_batch(t, data_rng);
    if (batch.empty()) throw train_error("empty batch at update " + std::to_string(t));
    grads.set_zero();
    LossStats ls = loss_and_grad(model.params(), model.config(), batch,
                                 tcfg.label_smoothing, tcfg.dropout, &drop_rng,
                                 &grads);
    double mean_loss = ls.mean();
    if (!std::isfinite(mean_loss)) {
      std::string last = live.empty() ? "none" : live.back().second;
      throw train_error("loss diverged (non-finite) at update " + std::to_string(t) +
                        " of stage " + stage_name + "; last good checkpoint: " + last);
    }
    grads.scale(1.0f / static_cast<float>(ls.tokens));
    adam.step(model.params(), grads, lr_at(t, tcfg));
    interval_loss += mean_loss;
    ++interval_batches;

    if (t % interval == 0 || t == tcfg.max_updates) {
      CheckpointMeta meta;
      meta.stage = stage_name;
      meta.update_count = t;
      if (validate) validate(model, meta);
      ModelCheckpoint ckpt{1, model.config(), model.params(), meta};
      std::string path = checkpoint_path(out_dir, t);
      save_checkpoint(ckpt, path);
      live.emplace_back(t, path);
      res.history.push_back(meta);
      res.loss_curve.push_back(interval_batches ? interval_loss / interval_batches : 0);
      interval_loss = 0;
      interval_batches = 0;
      // Lower NLL wins; ties go to the later checkpoint.
      if (meta.valid_nll <= best_nll) {
        best_nll = meta.valid_nll;
        best_update = t;
        res.best_meta = meta;
      }
      retain();
    }
  }

  for (const auto& [update, path] : live) {
    res.saved_paths.push_back(path);
    if (update == best_update) res.best_path = path;
  }
  if (res.best_path.empty() && !res.saved_paths.empty())
    res.best_path = res.saved_paths.back();
  return res;
}

// ---------------------------------------------------------------- instantiations

template struct Params<float>;
template struct Params<double>;
template Params<double> Params<float>::cast<double>() const;
template Params<float> Params<double>::cast<float>() const;
template Params<float> Params<float>::cast<float>() const;
template class Transformer<float>;
template class Transformer<double>;
template Mat<float> sinusoid_table<float>(int, int);
template Mat<double> sinusoid_table<double>(int, int);
template LossStats loss_and_grad<float>(const Params<float>&, const ModelConfig&,
                                        const std::vector<Example>&, double,
                                        double, Rng*, Params<float>*);
template LossStats loss_and_grad<double>(const Params<double>&, const ModelConfig&,
                                         const std::vector<Example>&, double,
                                         double, Rng*, Params<double>*);
template LossStats batch_loss<float>(const Params<float>&, const ModelConfig&,
                                     const std::vector<Example>&, double);
template LossStats batch_loss<double>(const Params<double>&, const ModelConfig&,
                                      const std::vector<Example>&, double);

}  // namespace lrlf
