#pragma once

// MicroTransformer: a small pre-LayerNorm causal decoder with seeded
// pseudo-random weights. Sinusoidal positions are added inside forward, so
// the caller-visible context is pure token (or visual-prefix) embeddings.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlguide/model.hpp"
#include "hlguide/rng.hpp"
#include "hlguide/weights_io.hpp"

namespace hlguide {

struct MicroTransformerDims {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t dim = 32;
  std::size_t ff = 64;
};

class MicroTransformer final : public GuidableModel {
 public:
  MicroTransformer(Vocabulary vocab, std::uint64_t seed, MicroTransformerDims dims = {})
      : vocab_(std::move(vocab)), dims_(dims), seed_(seed) {
    require(dims_.dim % dims_.heads == 0, "micro transformer: dim must be divisible by heads");
    require(dims_.dim % 2 == 0, "micro transformer: dim must be even");
    Rng rng(seed);
    const std::size_t d = dims_.dim;
    const std::size_t v = vocab_.size();
    tok_emb_ = random_tensor(rng, v * d, 1.0);
    layers_.resize(dims_.layers);
    for (auto& L : layers_) {
      L.ln1_g.assign(d, 1.0);
      L.ln1_b.assign(d, 0.0);
      L.wq = random_tensor(rng, d * d, 1.0 / std::sqrt(static_cast<double>(d)));
      L.wk = random_tensor(rng, d * d, 1.0 / std::sqrt(static_cast<double>(d)));
      L.wv = random_tensor(rng, d * d, 1.0 / std::sqrt(static_cast<double>(d)));
      L.wo = random_tensor(rng, d * d, 1.0 / std::sqrt(static_cast<double>(d)));
      L.ln2_g.assign(d, 1.0);
      L.ln2_b.assign(d, 0.0);
      L.w1 = random_tensor(rng, d * dims_.ff, 1.0 / std::sqrt(static_cast<double>(d)));
      L.b1 = random_tensor(rng, dims_.ff, 0.1);
      L.w2 = random_tensor(rng, dims_.ff * d, 1.0 / std::sqrt(static_cast<double>(dims_.ff)));
      L.b2 = random_tensor(rng, d, 0.1);
    }
    lnf_g_.assign(d, 1.0);
    lnf_b_.assign(d, 0.0);
    w_out_ = random_tensor(rng, v * d, 2.0 / std::sqrt(static_cast<double>(d)));
  }

  const Vocabulary& vocab() const override { return vocab_; }
  std::size_t embedding_dim() const override { return dims_.dim; }
  std::string kind() const override { return "micro_transformer"; }
  const MicroTransformerDims& dims() const { return dims_; }
  std::uint64_t seed() const { return seed_; }

  Vector embed(TokenId id) const override {
    require(id >= 0 && static_cast<std::size_t>(id) < vocab_.size(), "embed: token id out of range");
    const auto begin = tok_emb_.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(id) * dims_.dim);
    return Vector(begin, begin + static_cast<std::ptrdiff_t>(dims_.dim));
  }

  Vector next_logits(const ContextEmbeddings& ctx, std::span<const double> bias) const override {
    return run(ctx, bias, nullptr);
  }

  /// Attention scores of every layer and head, for every query position.
  std::vector<AttentionScores> attention(const ContextEmbeddings& ctx, std::span<const double> bias) const {
    check_context(*this, ctx);
    require(bias.empty() || bias.size() == ctx.size(), "attention: bias length must equal context length");
    std::vector<AttentionScores> trace;
    run(ctx, bias, &trace);
    return trace;
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json header = {
        {"kind", kind()},
        {"seed", seed_},
        {"dims", {{"layers", dims_.layers}, {"heads", dims_.heads}, {"dim", dims_.dim}, {"ff", dims_.ff},
                  {"vocab", vocab_.size()}}},
    };
    nlohmann::json layer_list = nlohmann::json::array();
    std::vector<NamedTensor> tensors;
    const std::size_t d = dims_.dim;
    const std::size_t v = vocab_.size();
    tensors.push_back({"tok_emb", {v, d}, tok_emb_});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      layer_list.push_back({{"index", l}, {"type", "attention+mlp"}});
      tensors.push_back({p + "ln1.g", {d}, L.ln1_g});
      tensors.push_back({p + "ln1.b", {d}, L.ln1_b});
      tensors.push_back({p + "wq", {d, d}, L.wq});
      tensors.push_back({p + "wk", {d, d}, L.wk});
      tensors.push_back({p + "wv", {d, d}, L.wv});
      tensors.push_back({p + "wo", {d, d}, L.wo});
      tensors.push_back({p + "ln2.g", {d}, L.ln2_g});
      tensors.push_back({p + "ln2.b", {d}, L.ln2_b});
      tensors.push_back({p + "w1", {d, dims_.ff}, L.w1});
      tensors.push_back({p + "b1", {dims_.ff}, L.b1});
      tensors.push_back({p + "w2", {dims_.ff, d}, L.w2});
      tensors.push_back({p + "b2", {d}, L.b2});
    }
    tensors.push_back({"ln_f.g", {d}, lnf_g_});
    tensors.push_back({"ln_f.b", {d}, lnf_b_});
    tensors.push_back({"w_out", {v, d}, w_out_});
    header["layers"] = layer_list;
    write_weight_file(path, header, tensors);
  }

  static MicroTransformer from_weights(const WeightFile& wf, Vocabulary vocab) {
    const auto& h = wf.header;
    if (h.at("kind") != "micro_transformer") throw ConfigError("weight file is not a micro_transformer");
    MicroTransformerDims dims;
    dims.layers = h.at("dims").at("layers").get<std::size_t>();
    dims.heads = h.at("dims").at("heads").get<std::size_t>();
    dims.dim = h.at("dims").at("dim").get<std::size_t>();
    dims.ff = h.at("dims").at("ff").get<std::size_t>();
    if (h.at("dims").at("vocab").get<std::size_t>() != vocab.size()) {
      throw ConfigError("micro transformer: vocabulary size does not match weight file");
    }
    MicroTransformer m(std::move(vocab), h.at("seed").get<std::uint64_t>(), dims);
    m.tok_emb_ = wf.get("tok_emb").values;
    for (std::size_t l = 0; l < dims.layers; ++l) {
      auto& L = m.layers_[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      L.ln1_g = wf.get(p + "ln1.g").values;
      L.ln1_b = wf.get(p + "ln1.b").values;
      L.wq = wf.get(p + "wq").values;
      L.wk = wf.get(p + "wk").values;
      L.wv = wf.get(p + "wv").values;
      L.wo = wf.get(p + "wo").values;
      L.ln2_g = wf.get(p + "ln2.g").values;
      L.ln2_b = wf.get(p + "ln2.b").values;
      L.w1 = wf.get(p + "w1").values;
      L.b1 = wf.get(p + "b1").values;
      L.w2 = wf.get(p + "w2").values;
      L.b2 = wf.get(p + "b2").values;
    }
    m.lnf_g_ = wf.get("ln_f.g").values;
    m.lnf_b_ = wf.get("ln_f.b").values;
    m.w_out_ = wf.get("w_out").values;
    return m;
  }

 private:
  struct Layer {
    Vector ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  static Vector random_tensor(Rng& rng, std::size_t n, double scale) {
    Vector out(n);
    const double a = std::sqrt(3.0) * scale;  // uniform with std `scale`
    for (double& x : out) x = rng.uniform(-a, a);
    return out;
  }

  static void layer_norm(const Vector& x, const Vector& g, const Vector& b, Vector& out) {
    const std::size_t d = x.size();
    double mean = 0.0;
    for (const double v : x) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (const double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    out.resize(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - mean) * inv * g[i] + b[i];
  }

  // out[k] = sum_j x[j] * w[j * cols + k]
  static void matvec(const Vector& x, const Vector& w, std::size_t cols, Vector& out) {
    out.assign(cols, 0.0);
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double xj = x[j];
      const double* row = w.data() + j * cols;
      for (std::size_t k = 0; k < cols; ++k) out[k] += xj * row[k];
    }
  }

  static double gelu(double x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
  }

  Vector run(const ContextEmbeddings& ctx, std::span<const double> bias, std::vector<AttentionScores>* trace) const {
    const std::size_t n = ctx.size();
    const std::size_t d = dims_.dim;
    const std::size_t hd = d / dims_.heads;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<Vector> x(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = ctx[i];
      for (std::size_t k = 0; k < d; k += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(d));
        x[i][k] += std::sin(static_cast<double>(i) * freq);
        x[i][k + 1] += std::cos(static_cast<double>(i) * freq);
      }
    }

    std::vector<Vector> q(n), k(n), v(n);
    Vector h, tmp, concat(d), hidden;
    Vector scores, probs;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Layer& L = layers_[l];
      for (std::size_t i = 0; i < n; ++i) {
        layer_norm(x[i], L.ln1_g, L.ln1_b, h);
        matvec(h, L.wq, d, q[i]);
        matvec(h, L.wk, d, k[i]);
        matvec(h, L.wv, d, v[i]);
      }
      std::vector<AttentionScores> layer_trace;
      if (trace) {
        layer_trace.resize(dims_.heads);
        for (std::size_t hh = 0; hh < dims_.heads; ++hh) {
          layer_trace[hh].layer = l;
          layer_trace[hh].head = hh;
        }
      }
      std::vector<Vector> attn_out(n, Vector(d, 0.0));
      for (std::size_t head = 0; head < dims_.heads; ++head) {
        const std::size_t off = head * hd;
        for (std::size_t i = 0; i < n; ++i) {
          scores.resize(i + 1);
          for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < hd; ++c) s += q[i][off + c] * k[j][off + c];
            scores[j] = s * inv_sqrt_hd;
          }
          Vector pre;
          if (trace) pre = scores;
          if (!bias.empty()) {
            for (std::size_t j = 0; j <= i; ++j) scores[j] += bias[j];
          }
          softmax_into(scores, probs);
          for (std::size_t j = 0; j <= i; ++j) {
            const double pj = probs[j];
            for (std::size_t c = 0; c < hd; ++c) attn_out[i][off + c] += pj * v[j][off + c];
          }
          if (trace) {
            auto& t = layer_trace[head];
            t.query_positions.push_back(i);
            t.e.push_back(std::move(pre));
            t.h.push_back(scores);
            t.p.push_back(probs);
          }
        }
      }
      if (trace) trace->insert(trace->end(), layer_trace.begin(), layer_trace.end());
      for (std::size_t i = 0; i < n; ++i) {
        matvec(attn_out[i], L.wo, d, tmp);
        for (std::size_t c = 0; c < d; ++c) x[i][c] += tmp[c];
        layer_norm(x[i], L.ln2_g, L.ln2_b, h);
        matvec(h, L.w1, dims_.ff, hidden);
        for (std::size_t c = 0; c < dims_.ff; ++c) hidden[c] = gelu(hidden[c] + L.b1[c]);
        matvec(hidden, L.w2, d, tmp);
        for (std::size_t c = 0; c < d; ++c) x[i][c] += tmp[c] + L.b2[c];
      }
    }

    layer_norm(x[n - 1], lnf_g_, lnf_b_, h);
    const std::size_t vsize = vocab_.size();
    Vector logits(vsize, 0.0);
    for (std::size_t t = 0; t < vsize; ++t) {
      const double* row = w_out_.data() + t * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += row[c] * h[c];
      logits[t] = s;
    }
    return logits;
  }

  Vocabulary vocab_;
  MicroTransformerDims dims_;
  std::uint64_t seed_;
  Vector tok_emb_;
  std::vector<Layer> layers_;
  Vector lnf_g_, lnf_b_;
  Vector w_out_;
};

}  // namespace hlguide
