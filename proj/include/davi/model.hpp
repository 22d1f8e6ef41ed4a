#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "davi/common.hpp"
#include "davi/rng.hpp"
#include "davi/tensor.hpp"
#include "davi/vocab.hpp"

// The dual-interaction model graph and its single-interaction ablation
// baseline, as pure functions over a named parameter map.
//
//   davi:     VE (ViT) -> VLE (text encoder with interleaved cross-attention
//             to visual features) -> { LD (autoregressive answer decoder),
//             LVD (visual queries over evidence) -> conv segmentor }
//   baseline: LE (text-only encoder) -> LVE (visual encoder whose blocks
//             cross-attend to text) -> VD (multi-level conv mask decoder),
//             no answer head.
//
// All blocks are pre-norm residual. Attention masks are additive, with
// masked logits at -1e30 so softmax weights underflow to exactly zero.

namespace davi {

constexpr real kMaskedLogit = real(-1e30);

enum class ModelKind { davi, baseline };

inline std::string to_string(ModelKind k) {
  return k == ModelKind::davi ? "davi" : "baseline";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "davi") return ModelKind::davi;
  if (s == "baseline") return ModelKind::baseline;
  throw config_error("unknown model kind '" + s + "' (expected davi or baseline)");
}

struct ModelConfig {
  int image_size = 64;
  int patch_size = 8;
  int d_model = 128;
  int n_heads = 4;
  int ve_layers = 6;
  int vle_layers = 4;
  int ld_layers = 4;
  int lvd_levels = 3;
  int text_vocab_size = 22;
  int answer_vocab_size = 22;
  int max_question_len = 10;
  int max_answer_len = 4;

  int grid_size() const { return image_size / patch_size; }
  int n_patches() const { return grid_size() * grid_size(); }
  int head_dim() const { return d_model / n_heads; }
  int ffn_dim() const { return 4 * d_model; }
  // Text depth of the baseline encoder; sized so the ablation baseline's
  // parameter budget stays within +-10% of the dual model's.
  int baseline_text_layers() const { return vle_layers + ld_layers; }

  // VE blocks (1-based) whose outputs are tapped as multi-level features.
  // Evenly spaced, last tap always the final block.
  std::vector<int> tap_layers() const {
    std::vector<int> taps(static_cast<std::size_t>(lvd_levels));
    for (int i = 0; i < lvd_levels; ++i)
      taps[static_cast<std::size_t>(i)] = ve_layers * (i + 1) / lvd_levels;
    return taps;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw config_error("invalid model config: " + m); };
    if (image_size <= 0 || patch_size <= 0) fail("image_size and patch_size must be positive");
    if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
    if (d_model <= 0 || n_heads <= 0) fail("d_model and n_heads must be positive");
    if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if (d_model % 4 != 0) fail("d_model must be divisible by 4 (segmentor channel halving)");
    if (ve_layers < 1 || vle_layers < 1 || ld_layers < 1) fail("all depths must be >= 1");
    if (lvd_levels < 1 || lvd_levels > ve_layers) fail("lvd_levels must be in [1, ve_layers]");
    if (text_vocab_size < 5 || answer_vocab_size < 5) fail("vocab sizes must cover the special tokens");
    if (max_question_len < 3) fail("max_question_len must be >= 3");
    if (max_answer_len < 2) fail("max_answer_len must be >= 2");
    auto taps = tap_layers();
    for (std::size_t i = 1; i < taps.size(); ++i)
      if (taps[i] <= taps[i - 1]) fail("tap layers must be strictly increasing");
    if (taps.back() != ve_layers) fail("last tap must be the final VE layer");
  }

  bool operator==(const ModelConfig&) const = default;

  // Canonical textual form, used verbatim inside checkpoints.
  std::map<std::string, std::string> to_kv() const {
    return {{"image_size", std::to_string(image_size)},
            {"patch_size", std::to_string(patch_size)},
            {"d_model", std::to_string(d_model)},
            {"n_heads", std::to_string(n_heads)},
            {"ve_layers", std::to_string(ve_layers)},
            {"vle_layers", std::to_string(vle_layers)},
            {"ld_layers", std::to_string(ld_layers)},
            {"lvd_levels", std::to_string(lvd_levels)},
            {"text_vocab_size", std::to_string(text_vocab_size)},
            {"answer_vocab_size", std::to_string(answer_vocab_size)},
            {"max_question_len", std::to_string(max_question_len)},
            {"max_answer_len", std::to_string(max_answer_len)}};
  }

  static ModelConfig from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    auto get = [&kv](const char* key, int fallback) {
      auto it = kv.find(key);
      return it == kv.end() ? fallback : std::stoi(it->second);
    };
    c.image_size = get("image_size", c.image_size);
    c.patch_size = get("patch_size", c.patch_size);
    c.d_model = get("d_model", c.d_model);
    c.n_heads = get("n_heads", c.n_heads);
    c.ve_layers = get("ve_layers", c.ve_layers);
    c.vle_layers = get("vle_layers", c.vle_layers);
    c.ld_layers = get("ld_layers", c.ld_layers);
    c.lvd_levels = get("lvd_levels", c.lvd_levels);
    c.text_vocab_size = get("text_vocab_size", c.text_vocab_size);
    c.answer_vocab_size = get("answer_vocab_size", c.answer_vocab_size);
    c.max_question_len = get("max_question_len", c.max_question_len);
    c.max_answer_len = get("max_answer_len", c.max_answer_len);
    return c;
  }
};

// ---------------------------------------------------------------------------
// Parameter manifest
// ---------------------------------------------------------------------------

struct ModelParams {
  std::map<std::string, Tensor> tensors;  // ordered by path

  Tensor& at(const std::string& path) {
    auto it = tensors.find(path);
    if (it == tensors.end()) throw contract_error("missing parameter " + path);
    return it->second;
  }
  const Tensor& at(const std::string& path) const {
    auto it = tensors.find(path);
    if (it == tensors.end()) throw contract_error("missing parameter " + path);
    return it->second;
  }

  std::int64_t total_count() const {
    std::int64_t n = 0;
    for (const auto& [path, t] : tensors) n += t.size();
    return n;
  }

  void zero_grads() {
    for (auto& [path, t] : tensors) t.zero_grad();
  }
};

// Shape manifest, derivable from the config alone. Load/save and the
// parameter-count oracle both lean on this.
inline std::vector<std::pair<std::string, Shape>> param_manifest(const ModelConfig& cfg,
                                                                 ModelKind kind) {
  cfg.validate();
  std::vector<std::pair<std::string, Shape>> m;
  const int d = cfg.d_model, ff = cfg.ffn_dim();

  auto linear = [&m](const std::string& prefix, int in, int out) {
    m.emplace_back(prefix + ".weight", Shape{in, out});
    m.emplace_back(prefix + ".bias", Shape{out});
  };
  auto ln = [&m](const std::string& prefix, int dim) {
    m.emplace_back(prefix + ".gain", Shape{dim});
    m.emplace_back(prefix + ".bias", Shape{dim});
  };
  auto attn = [&linear](const std::string& prefix, int dim) {
    linear(prefix + ".q", dim, dim);
    linear(prefix + ".k", dim, dim);
    linear(prefix + ".v", dim, dim);
    linear(prefix + ".o", dim, dim);
  };
  auto self_block = [&](const std::string& prefix) {
    ln(prefix + ".ln1", d);
    attn(prefix + ".attn", d);
    ln(prefix + ".ln2", d);
    linear(prefix + ".ffn.fc1", d, ff);
    linear(prefix + ".ffn.fc2", ff, d);
  };
  auto cross_block = [&](const std::string& prefix) {
    ln(prefix + ".ln1", d);
    attn(prefix + ".self", d);
    ln(prefix + ".ln2", d);
    attn(prefix + ".cross", d);
    ln(prefix + ".ln3", d);
    linear(prefix + ".ffn.fc1", d, ff);
    linear(prefix + ".ffn.fc2", ff, d);
  };
  auto conv_head = [&](const std::string& prefix) {
    m.emplace_back(prefix + ".conv1.weight", Shape{d / 2, d, 3, 3});
    m.emplace_back(prefix + ".conv1.bias", Shape{d / 2});
    m.emplace_back(prefix + ".conv2.weight", Shape{d / 4, d / 2, 3, 3});
    m.emplace_back(prefix + ".conv2.bias", Shape{d / 4});
    m.emplace_back(prefix + ".conv3.weight", Shape{1, d / 4, 1, 1});
    m.emplace_back(prefix + ".conv3.bias", Shape{1});
  };
  // DaVI's LVD carries one cross-attention block per level; the baseline's
  // VD is projection + fusion only (its interaction lives in LVE).
  auto level_decoder = [&](const std::string& prefix, bool with_cross) {
    for (int l = 0; l < cfg.lvd_levels; ++l) {
      const std::string lp = prefix + ".level" + std::to_string(l);
      linear(lp + ".proj", d, d);
      if (with_cross) {
        ln(lp + ".ln", d);
        attn(lp + ".cross", d);
      }
    }
    ln(prefix + ".fuse_ln", d);
  };
  auto visual_encoder = [&](const std::string& prefix, bool with_cross) {
    linear(prefix + ".patch_proj", 3 * cfg.patch_size * cfg.patch_size, d);
    m.emplace_back(prefix + ".pos_embed", Shape{cfg.n_patches(), d});
    for (int i = 0; i < cfg.ve_layers; ++i) {
      const std::string bp = prefix + ".block" + std::to_string(i);
      if (with_cross)
        cross_block(bp);
      else
        self_block(bp);
    }
    for (int l = 0; l < cfg.lvd_levels; ++l) ln(prefix + ".tap" + std::to_string(l), d);
  };

  if (kind == ModelKind::davi) {
    visual_encoder("ve", /*with_cross=*/false);

    m.emplace_back("vle.tok_embed", Shape{cfg.text_vocab_size, d});
    m.emplace_back("vle.pos_embed", Shape{cfg.max_question_len, d});
    for (int i = 0; i < cfg.vle_layers; ++i)
      cross_block("vle.block" + std::to_string(i));
    ln("vle.final_ln", d);

    m.emplace_back("ld.tok_embed", Shape{cfg.answer_vocab_size, d});
    m.emplace_back("ld.pos_embed", Shape{cfg.max_answer_len, d});
    for (int i = 0; i < cfg.ld_layers; ++i)
      cross_block("ld.block" + std::to_string(i));
    ln("ld.final_ln", d);
    linear("ld.head", d, cfg.answer_vocab_size);

    level_decoder("lvd", /*with_cross=*/true);
    conv_head("seg");
  } else {
    m.emplace_back("le.tok_embed", Shape{cfg.text_vocab_size, d});
    m.emplace_back("le.pos_embed", Shape{cfg.max_question_len, d});
    for (int i = 0; i < cfg.baseline_text_layers(); ++i)
      self_block("le.block" + std::to_string(i));
    ln("le.final_ln", d);

    visual_encoder("lve", /*with_cross=*/true);
    level_decoder("vd", /*with_cross=*/false);
    conv_head("vd");
  }
  return m;
}

// Deterministic initialization: weights and embeddings ~ N(0, 0.02^2),
// biases zero, layer-norm gains one. Each parameter draws from its own
// seed-derived stream, so the result is independent of manifest order.
inline ModelParams init_params(const ModelConfig& cfg, ModelKind kind, std::uint64_t seed) {
  ModelParams params;
  for (const auto& [path, shape] : param_manifest(cfg, kind)) {
    Tensor t = Tensor::zeros(shape, /*requires_grad=*/true);
    const bool is_gain = path.size() >= 5 && path.compare(path.size() - 5, 5, ".gain") == 0;
    const bool is_bias = path.size() >= 5 && path.compare(path.size() - 5, 5, ".bias") == 0;
    if (is_gain) {
      std::fill(t.values().begin(), t.values().end(), real(1));
    } else if (!is_bias) {
      Rng rng(Rng::derive(seed, path));
      for (auto& v : t.values()) v = static_cast<real>(rng.normal(0.0, 0.02));
    }
    params.tensors.emplace(path, std::move(t));
  }
  return params;
}

// ---------------------------------------------------------------------------
// Attention plumbing
// ---------------------------------------------------------------------------

// Additive mask with -1e30 on every column whose key position is padding.
inline Tensor pad_additive_mask(int n_queries, const std::vector<std::uint8_t>& key_pad) {
  const int nk = static_cast<int>(key_pad.size());
  Tensor mask = Tensor::zeros({n_queries, nk});
  real* pm = mask.data();
  for (int r = 0; r < n_queries; ++r)
    for (int c = 0; c < nk; ++c)
      if (key_pad[static_cast<std::size_t>(c)]) pm[r * nk + c] = kMaskedLogit;
  return mask;
}

inline Tensor causal_additive_mask(int n) {
  Tensor mask = Tensor::zeros({n, n});
  real* pm = mask.data();
  for (int r = 0; r < n; ++r)
    for (int c = r + 1; c < n; ++c) pm[r * n + c] = kMaskedLogit;
  return mask;
}

namespace detail {

struct AttnRef {
  const Tensor *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
};

inline AttnRef attn_ref(const ModelParams& p, const std::string& prefix) {
  return {&p.at(prefix + ".q.weight"), &p.at(prefix + ".q.bias"),
          &p.at(prefix + ".k.weight"), &p.at(prefix + ".k.bias"),
          &p.at(prefix + ".v.weight"), &p.at(prefix + ".v.bias"),
          &p.at(prefix + ".o.weight"), &p.at(prefix + ".o.bias")};
}

inline Tensor multihead_attention(Tape* tape, const AttnRef& w, const Tensor& q_in,
                                  const Tensor& kv_in, int n_heads, const Tensor* mask) {
  const int d = q_in.dim(1);
  const int dh = d / n_heads;
  const real att_scale = real(1) / std::sqrt(static_cast<real>(dh));
  Tensor q = add_bias(tape, matmul(tape, q_in, *w.wq), *w.bq);
  Tensor k = add_bias(tape, matmul(tape, kv_in, *w.wk), *w.bk);
  Tensor v = add_bias(tape, matmul(tape, kv_in, *w.wv), *w.bv);
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(tape, q, h * dh, dh);
    Tensor kh = slice_cols(tape, k, h * dh, dh);
    Tensor vh = slice_cols(tape, v, h * dh, dh);
    Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), att_scale);
    if (mask) scores = add(tape, scores, *mask);
    Tensor probs = softmax(tape, scores, 1);
    heads.push_back(matmul(tape, probs, vh));
  }
  Tensor merged = concat_cols(tape, heads);
  return add_bias(tape, matmul(tape, merged, *w.wo), *w.bo);
}

inline Tensor linear_at(Tape* tape, const ModelParams& p, const std::string& prefix,
                        const Tensor& x) {
  return add_bias(tape, matmul(tape, x, p.at(prefix + ".weight")), p.at(prefix + ".bias"));
}

inline Tensor ln_at(Tape* tape, const ModelParams& p, const std::string& prefix,
                    const Tensor& x) {
  return layer_norm(tape, x, p.at(prefix + ".gain"), p.at(prefix + ".bias"));
}

inline Tensor ffn_at(Tape* tape, const ModelParams& p, const std::string& prefix,
                     const Tensor& x) {
  return linear_at(tape, p, prefix + ".fc2", gelu(tape, linear_at(tape, p, prefix + ".fc1", x)));
}

// Pre-norm self-attention-only block: residual attn, residual FFN.
inline Tensor self_block(Tape* tape, const ModelParams& p, const std::string& prefix,
                         Tensor x, int n_heads, const Tensor* mask) {
  Tensor n1 = ln_at(tape, p, prefix + ".ln1", x);
  x = add(tape, x, multihead_attention(tape, attn_ref(p, prefix + ".attn"), n1, n1, n_heads, mask));
  x = add(tape, x, ffn_at(tape, p, prefix + ".ffn", ln_at(tape, p, prefix + ".ln2", x)));
  return x;
}

// Pre-norm block with a cross-attention sublayer between self-attention and
// the feed-forward network.
inline Tensor cross_block(Tape* tape, const ModelParams& p, const std::string& prefix,
                          Tensor x, const Tensor& kv, int n_heads, const Tensor* self_mask,
                          const Tensor* cross_mask) {
  Tensor n1 = ln_at(tape, p, prefix + ".ln1", x);
  x = add(tape, x, multihead_attention(tape, attn_ref(p, prefix + ".self"), n1, n1, n_heads, self_mask));
  Tensor n2 = ln_at(tape, p, prefix + ".ln2", x);
  x = add(tape, x, multihead_attention(tape, attn_ref(p, prefix + ".cross"), n2, kv, n_heads, cross_mask));
  x = add(tape, x, ffn_at(tape, p, prefix + ".ffn", ln_at(tape, p, prefix + ".ln3", x)));
  return x;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Question/answer token normalization
// ---------------------------------------------------------------------------

struct PaddedTokens {
  std::vector<int> ids;
  std::vector<std::uint8_t> pad;
  bool truncated = false;
};

// Pads with PAD (or truncates, keeping a trailing EOS) to exactly `len` ids.
inline PaddedTokens normalize_tokens(std::vector<int> ids, int len) {
  PaddedTokens out;
  out.ids = std::move(ids);
  if (static_cast<int>(out.ids.size()) > len) {
    out.ids.resize(static_cast<std::size_t>(len));
    out.ids.back() = kEosId;
    out.truncated = true;
  }
  while (static_cast<int>(out.ids.size()) < len) out.ids.push_back(kPadId);
  out.pad = pad_mask_of(out.ids);
  return out;
}

// ---------------------------------------------------------------------------
// Forward graphs
// ---------------------------------------------------------------------------

// ViT encoder; returns the tapped multi-level features, each [n_patches, d].
inline std::vector<Tensor> ve_forward(Tape* tape, const ModelParams& p, const ModelConfig& cfg,
                                      const Tensor& image, const char* prefix = "ve",
                                      const Tensor* text_kv = nullptr,
                                      const Tensor* cross_mask = nullptr) {
  if (image.shape() != Shape{3, cfg.image_size, cfg.image_size})
    throw shape_error("visual encoder: expected image [3," + std::to_string(cfg.image_size) +
                      "," + std::to_string(cfg.image_size) + "], got " + shape_str(image.shape()));
  const std::string pre(prefix);
  Tensor x = detail::linear_at(tape, p, pre + ".patch_proj", im2patches(tape, image, cfg.patch_size));
  x = add(tape, x, p.at(pre + ".pos_embed"));
  std::vector<int> taps = cfg.tap_layers();
  std::vector<Tensor> levels;
  levels.reserve(taps.size());
  std::size_t next_tap = 0;
  for (int i = 0; i < cfg.ve_layers; ++i) {
    const std::string bp = pre + ".block" + std::to_string(i);
    if (text_kv)
      x = detail::cross_block(tape, p, bp, x, *text_kv, cfg.n_heads, nullptr, cross_mask);
    else
      x = detail::self_block(tape, p, bp, x, cfg.n_heads, nullptr);
    if (next_tap < taps.size() && taps[next_tap] == i + 1) {
      levels.push_back(detail::ln_at(tape, p, pre + ".tap" + std::to_string(next_tap), x));
      ++next_tap;
    }
  }
  return levels;
}

struct Evidence {
  Tensor features;                 // [max_question_len, d_model]
  std::vector<std::uint8_t> pad;   // per-position padding flags
  bool truncated = false;          // question exceeded max_question_len
};

// Visual-based linguistic encoder: self-attention over the question, cross-
// attention with text queries over the final visual level, FFN.
inline Evidence vle_forward(Tape* tape, const ModelParams& p, const ModelConfig& cfg,
                            const std::vector<int>& question_tokens,
                            const Tensor& visual_last_level) {
  for (int id : question_tokens)
    if (id < 0 || id >= cfg.text_vocab_size)
      throw bounds_error("vle: token id " + std::to_string(id) + " outside text vocabulary");
  PaddedTokens toks = normalize_tokens(question_tokens, cfg.max_question_len);
  Tensor x = embedding(tape, p.at("vle.tok_embed"), toks.ids);
  x = add(tape, x, p.at("vle.pos_embed"));
  Tensor self_mask = pad_additive_mask(cfg.max_question_len, toks.pad);
  for (int i = 0; i < cfg.vle_layers; ++i)
    x = detail::cross_block(tape, p, "vle.block" + std::to_string(i), x, visual_last_level,
                            cfg.n_heads, &self_mask, nullptr);
  Evidence ev;
  ev.features = detail::ln_at(tape, p, "vle.final_ln", x);
  ev.pad = std::move(toks.pad);
  ev.truncated = toks.truncated;
  return ev;
}

// Linguistic decoder, teacher-forced. Input is the BOS-led answer sequence;
// logits at position t are the prediction for input token t+1, so each
// target token depends only on the tokens strictly before it.
inline Tensor ld_teacher_logits(Tape* tape, const ModelParams& p, const ModelConfig& cfg,
                                const Evidence& evidence, const std::vector<int>& tokens_with_bos) {
  const int len = static_cast<int>(tokens_with_bos.size());
  if (len < 1 || len > cfg.max_answer_len)
    throw shape_error("ld: sequence length " + std::to_string(len) + " outside [1, " +
                      std::to_string(cfg.max_answer_len) + "]");
  for (int id : tokens_with_bos)
    if (id < 0 || id >= cfg.answer_vocab_size)
      throw bounds_error("ld: token id " + std::to_string(id) + " outside answer vocabulary");
  std::vector<int> positions(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) positions[static_cast<std::size_t>(i)] = i;
  Tensor x = embedding(tape, p.at("ld.tok_embed"), tokens_with_bos);
  x = add(tape, x, embedding(tape, p.at("ld.pos_embed"), positions));
  Tensor self_mask = causal_additive_mask(len);
  Tensor cross_mask = pad_additive_mask(len, evidence.pad);
  for (int i = 0; i < cfg.ld_layers; ++i)
    x = detail::cross_block(tape, p, "ld.block" + std::to_string(i), x, evidence.features,
                            cfg.n_heads, &self_mask, &cross_mask);
  x = detail::ln_at(tape, p, "ld.final_ln", x);
  return detail::linear_at(tape, p, "ld.head", x);
}

// Greedy decoding: argmax continuation until EOS or the length limit.
// Returns the BOS-led token sequence. Ties resolve to the lowest token id.
inline std::vector<int> ld_greedy_decode(const ModelParams& p, const ModelConfig& cfg,
                                         const Evidence& evidence) {
  std::vector<int> seq{kBosId};
  while (static_cast<int>(seq.size()) < cfg.max_answer_len) {
    Tensor logits = ld_teacher_logits(nullptr, p, cfg, evidence, seq);
    const real* row = logits.data() + static_cast<std::int64_t>(seq.size() - 1) * cfg.answer_vocab_size;
    int best = 0;
    for (int j = 1; j < cfg.answer_vocab_size; ++j)
      if (row[j] > row[best]) best = j;
    seq.push_back(best);
    if (best == kEosId) break;
  }
  return seq;
}

// Linguistic-based visual decoder: per level, project, cross-attend from
// visual queries into the evidence, then fuse levels by sum + layer-norm.
// Returns the fused feature grid [d_model, g, g].
inline Tensor lvd_forward(Tape* tape, const ModelParams& p, const ModelConfig& cfg,
                          const std::vector<Tensor>& levels, const Evidence& evidence) {
  if (static_cast<int>(levels.size()) != cfg.lvd_levels)
    throw shape_error("lvd: got " + std::to_string(levels.size()) + " levels, config expects " +
                      std::to_string(cfg.lvd_levels));
  const int n = cfg.n_patches();
  Tensor cross_mask = pad_additive_mask(n, evidence.pad);
  Tensor fused;
  for (int l = 0; l < cfg.lvd_levels; ++l) {
    const std::string lp = "lvd.level" + std::to_string(l);
    Tensor z = detail::linear_at(tape, p, lp + ".proj", levels[static_cast<std::size_t>(l)]);
    Tensor zn = detail::ln_at(tape, p, lp + ".ln", z);
    z = add(tape, z, detail::multihead_attention(tape, detail::attn_ref(p, lp + ".cross"), zn,
                                                 evidence.features, cfg.n_heads, &cross_mask));
    fused = (l == 0) ? z : add(tape, fused, z);
  }
  fused = detail::ln_at(tape, p, "lvd.fuse_ln", fused);
  const int g = cfg.grid_size();
  return reshape(tape, transpose(tape, fused), {cfg.d_model, g, g});
}

// Baseline mask decoder fusion: project each level, sum, layer-norm.
inline Tensor vd_fuse_levels(Tape* tape, const ModelParams& p, const ModelConfig& cfg,
                             const std::vector<Tensor>& levels) {
  if (static_cast<int>(levels.size()) != cfg.lvd_levels)
    throw shape_error("vd: got " + std::to_string(levels.size()) + " levels, config expects " +
                      std::to_string(cfg.lvd_levels));
  Tensor fused;
  for (int l = 0; l < cfg.lvd_levels; ++l) {
    Tensor z = detail::linear_at(tape, p, "vd.level" + std::to_string(l) + ".proj",
                                 levels[static_cast<std::size_t>(l)]);
    fused = (l == 0) ? z : add(tape, fused, z);
  }
  fused = detail::ln_at(tape, p, "vd.fuse_ln", fused);
  const int g = cfg.grid_size();
  return reshape(tape, transpose(tape, fused), {cfg.d_model, g, g});
}

// Convolutional segmentor over the fused grid; emits mask logits [H, W].
inline Tensor segment_head(Tape* tape, const ModelParams& p, const ModelConfig& cfg,
                           const Tensor& fused, const char* prefix = "seg") {
  const std::string pre(prefix);
  Tensor x = add_channel_bias(tape, conv2d(tape, fused, p.at(pre + ".conv1.weight"), 1, 1),
                              p.at(pre + ".conv1.bias"));
  x = gelu(tape, x);
  x = add_channel_bias(tape, conv2d(tape, x, p.at(pre + ".conv2.weight"), 1, 1),
                       p.at(pre + ".conv2.bias"));
  x = gelu(tape, x);
  x = add_channel_bias(tape, conv2d(tape, x, p.at(pre + ".conv3.weight"), 1, 0),
                       p.at(pre + ".conv3.bias"));
  x = upsample_bilinear(tape, x, cfg.image_size, cfg.image_size);
  return reshape(tape, x, {cfg.image_size, cfg.image_size});
}

struct DaviForward {
  Tensor answer_logits;  // [max_answer_len, answer_vocab]
  Tensor mask_logits;    // [image_size, image_size]
  Evidence evidence;
};

// Full dual-interaction forward with teacher forcing for the answer head.
inline DaviForward davi_forward(Tape* tape, const ModelParams& p, const ModelConfig& cfg,
                                const Tensor& image, const std::vector<int>& question_tokens,
                                const std::vector<int>& answer_tokens_with_bos) {
  std::vector<Tensor> levels = ve_forward(tape, p, cfg, image);
  DaviForward out;
  out.evidence = vle_forward(tape, p, cfg, question_tokens, levels.back());
  out.answer_logits = ld_teacher_logits(tape, p, cfg, out.evidence, answer_tokens_with_bos);
  out.mask_logits = segment_head(tape, p, cfg, lvd_forward(tape, p, cfg, levels, out.evidence));
  return out;
}

struct DaviPrediction {
  std::vector<int> answer_tokens;  // BOS-led, possibly EOS-terminated
  Tensor mask_logits;              // [image_size, image_size]
};

// Inference path: greedy answer decode plus mask logits, no gradient tape.
inline DaviPrediction davi_predict(const ModelParams& p, const ModelConfig& cfg,
                                   const Tensor& image, const std::vector<int>& question_tokens) {
  std::vector<Tensor> levels = ve_forward(nullptr, p, cfg, image);
  Evidence ev = vle_forward(nullptr, p, cfg, question_tokens, levels.back());
  DaviPrediction out;
  out.answer_tokens = ld_greedy_decode(p, cfg, ev);
  out.mask_logits = segment_head(nullptr, p, cfg, lvd_forward(nullptr, p, cfg, levels, ev));
  return out;
}

// Single-interaction baseline: text encoded without visual input, visual
// encoder cross-attends to the text states, multi-level conv mask decoder,
// no answer head.
inline Tensor baseline_forward(Tape* tape, const ModelParams& p, const ModelConfig& cfg,
                               const Tensor& image, const std::vector<int>& question_tokens) {
  for (int id : question_tokens)
    if (id < 0 || id >= cfg.text_vocab_size)
      throw bounds_error("le: token id " + std::to_string(id) + " outside text vocabulary");
  PaddedTokens toks = normalize_tokens(question_tokens, cfg.max_question_len);
  Tensor x = embedding(tape, p.at("le.tok_embed"), toks.ids);
  x = add(tape, x, p.at("le.pos_embed"));
  Tensor self_mask = pad_additive_mask(cfg.max_question_len, toks.pad);
  for (int i = 0; i < cfg.baseline_text_layers(); ++i)
    x = detail::self_block(tape, p, "le.block" + std::to_string(i), x, cfg.n_heads, &self_mask);
  Tensor text_states = detail::ln_at(tape, p, "le.final_ln", x);

  Tensor cross_mask = pad_additive_mask(cfg.n_patches(), toks.pad);
  std::vector<Tensor> levels = ve_forward(tape, p, cfg, image, "lve", &text_states, &cross_mask);
  return segment_head(tape, p, cfg, vd_fuse_levels(tape, p, cfg, levels), "vd");
}

}  // namespace davi
