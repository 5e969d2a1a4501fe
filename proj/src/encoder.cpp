#include "synapse/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "synapse/binary_io.hpp"
#include "synapse/random.hpp"

namespace synapse {

namespace {

constexpr char kWeightMagic[] = "SYNW";
constexpr std::uint32_t kWeightVersion = 1;

bool is_gain(const std::string& name) { return name.find("gamma") != std::string::npos; }

bool is_bias(const std::string& name) {
  // beta, head_bias, and the ".bq"/".b1"-style projection biases
  return name.find("beta") != std::string::npos || name == "head_bias" ||
         (name.size() >= 3 && name[name.size() - 3] == '.' && name[name.size() - 2] == 'b');
}

void check_ref(const NeuronRef& r, const ModelConfig& c) {
  if (r.layer < 0 || r.layer >= c.layers || r.dim < 0 || r.dim >= c.hidden) {
    throw SpecError("neuron (layer " + std::to_string(r.layer) + ", dim " + std::to_string(r.dim) +
                    ") outside model with L=" + std::to_string(c.layers) + ", H=" + std::to_string(c.hidden));
  }
  if (r.global_index != r.layer * c.hidden + r.dim) {
    throw SpecError("neuron global index " + std::to_string(r.global_index) + " inconsistent with (layer, dim)");
  }
}

/// dims targeted per layer, deduplicated and sorted.
std::vector<std::vector<int>> dims_by_layer(const NeuronRefs& refs, int layers) {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(layers));
  for (const auto& r : refs) out[static_cast<std::size_t>(r.layer)].push_back(r.dim);
  for (auto& v : out) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  return out;
}

Tensor2 shaped(Eigen::Index r, Eigen::Index c) { return Tensor2::Zero(r, c); }

}  // namespace

void ModelConfig::validate() const {
  if (layers <= 0 || hidden <= 0 || heads <= 0 || ffn <= 0 || vocab <= 0 || max_seq <= 0 || classes <= 0) {
    throw ConfigError("model config: all sizes must be positive");
  }
  if (hidden % heads != 0) throw ConfigError("model config: hidden size must be divisible by head count");
  if (max_seq < 2) throw ConfigError("model config: max_seq must be at least 2");
}

EncoderWeights zeros_like(const EncoderWeights& like) {
  EncoderWeights out = like;
  out.for_each([](const std::string&, Tensor2& t) { t.setZero(); });
  return out;
}

EncoderWeights init_weights(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  const Eigen::Index H = c.hidden, F = c.ffn;
  EncoderWeights w;
  w.config = c;
  w.token_embedding = shaped(c.vocab, H);
  w.position_embedding = shaped(c.max_seq, H);
  w.layers.resize(static_cast<std::size_t>(c.layers));
  for (auto& l : w.layers) {
    l.wq = shaped(H, H); l.wk = shaped(H, H); l.wv = shaped(H, H); l.wo = shaped(H, H);
    l.bq = shaped(1, H); l.bk = shaped(1, H); l.bv = shaped(1, H); l.bo = shaped(1, H);
    l.ln1_gamma = shaped(1, H); l.ln1_beta = shaped(1, H);
    l.w1 = shaped(H, F); l.b1 = shaped(1, F); l.w2 = shaped(F, H); l.b2 = shaped(1, H);
    l.ln2_gamma = shaped(1, H); l.ln2_beta = shaped(1, H);
  }
  w.head_weight = shaped(c.classes, H);
  w.head_bias = shaped(1, c.classes);

  CounterRng rng(derive_seed(seed, "init_weights"));
  w.for_each([&](const std::string& name, Tensor2& t) {
    if (is_gain(name)) {
      t.setOnes();
    } else if (is_bias(name)) {
      t.setZero();
    } else {
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = 0.02 * rng.normal();
    }
  });
  return w;
}

std::uint64_t fingerprint(const EncoderWeights& w) {
  Fnv1a h;
  const ModelConfig& c = w.config;
  for (const int v : {c.layers, c.hidden, c.heads, c.ffn, c.vocab, c.max_seq, c.classes}) h.update_value(v);
  w.for_each([&](const std::string&, const Tensor2& t) {
    h.update(t.data(), sizeof(double) * static_cast<std::size_t>(t.size()));
  });
  return h.digest();
}

std::uint64_t head_fingerprint(const EncoderWeights& w) {
  Fnv1a h;
  h.update(w.head_weight.data(), sizeof(double) * static_cast<std::size_t>(w.head_weight.size()));
  h.update(w.head_bias.data(), sizeof(double) * static_cast<std::size_t>(w.head_bias.size()));
  return h.digest();
}

void save_weights(const EncoderWeights& w, const std::filesystem::path& path) {
  io::Writer out;
  out.magic(kWeightMagic);
  out.u32(kWeightVersion);
  const ModelConfig& c = w.config;
  for (const int v : {c.layers, c.hidden, c.heads, c.ffn, c.vocab, c.max_seq, c.classes}) {
    out.u32(static_cast<std::uint32_t>(v));
  }
  w.for_each([&](const std::string&, const Tensor2& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) out.f64(t.data()[i]);
  });
  out.save(path);
}

EncoderWeights load_weights(const std::filesystem::path& path) {
  auto in = io::Reader::open(path);
  in.expect_magic(kWeightMagic);
  if (const auto v = in.u32(); v != kWeightVersion) {
    throw FormatError(path.string() + ": unsupported weight file version " + std::to_string(v));
  }
  ModelConfig c;
  for (int* field : {&c.layers, &c.hidden, &c.heads, &c.ffn, &c.vocab, &c.max_seq, &c.classes}) {
    *field = static_cast<int>(in.u32());
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  EncoderWeights w = init_weights(c, 0);
  w.for_each([&](const std::string&, Tensor2& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = in.f64();
  });
  in.expect_end();
  return w;
}

Tensor2 embed(const EncoderWeights& w, std::span<const int> tokens) {
  ad::Tape tape(false);
  const EncoderVars vars = bind(tape, w, false);
  return tape.value(embed(tape, vars, tokens));
}

void validate_spec(const InterventionSpec& spec, const ModelConfig& c) {
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, Silence>) {
          for (const auto& r : s.targets) check_ref(r, c);
        } else if constexpr (std::is_same_v<S, GaussianCls>) {
          if (!(s.sigma >= 0.0) || !std::isfinite(s.sigma)) throw SpecError("gaussian_cls: sigma must be >= 0");
          for (const auto& r : s.targets) check_ref(r, c);
        } else if constexpr (std::is_same_v<S, LogitBias>) {
          if (s.target < 0 || s.target >= c.classes) {
            throw SpecError("logit_bias: target class " + std::to_string(s.target) + " out of range");
          }
          if (!std::isfinite(s.bias)) throw SpecError("logit_bias: bias must be finite");
          if (!(s.balanced_delta >= 0.0) || !std::isfinite(s.balanced_delta)) {
            throw SpecError("logit_bias: balanced_delta must be >= 0");
          }
        } else if constexpr (std::is_same_v<S, EmbeddingNoise>) {
          if (!(s.epsilon >= 0.0) || !std::isfinite(s.epsilon)) throw SpecError("embedding_noise: epsilon must be >= 0");
        } else {
          if (!(s.epsilon >= 0.0) || !std::isfinite(s.epsilon)) throw SpecError("fgsm: epsilon must be >= 0");
        }
      },
      spec);
}

EncoderVars bind(ad::Tape& tape, const EncoderWeights& w, bool trainable) {
  EncoderVars v;
  v.config = w.config;
  v.layers.resize(w.layers.size());
  auto reg = [&](const Tensor2& t) { return trainable ? tape.variable_ref(t) : tape.constant_ref(t); };
  v.token_embedding = reg(w.token_embedding);
  v.position_embedding = reg(w.position_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& src = w.layers[l];
    auto& dst = v.layers[l];
    dst.wq = reg(src.wq); dst.bq = reg(src.bq); dst.wk = reg(src.wk); dst.bk = reg(src.bk);
    dst.wv = reg(src.wv); dst.bv = reg(src.bv); dst.wo = reg(src.wo); dst.bo = reg(src.bo);
    dst.ln1_gamma = reg(src.ln1_gamma); dst.ln1_beta = reg(src.ln1_beta);
    dst.w1 = reg(src.w1); dst.b1 = reg(src.b1); dst.w2 = reg(src.w2); dst.b2 = reg(src.b2);
    dst.ln2_gamma = reg(src.ln2_gamma); dst.ln2_beta = reg(src.ln2_beta);
  }
  v.head_weight = reg(w.head_weight);
  v.head_bias = reg(w.head_bias);
  return v;
}

ad::Var embed(ad::Tape& tape, const EncoderVars& vars, std::span<const int> tokens) {
  const ModelConfig& c = vars.config;
  if (tokens.empty()) throw InputError("embed: empty token sequence");
  if (static_cast<int>(tokens.size()) > c.max_seq) {
    throw InputError("embed: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                     std::to_string(c.max_seq));
  }
  if (tokens[0] != kClsToken) throw InputError("embed: sequence must start with the [CLS] token");
  for (const int id : tokens) {
    if (id < 0 || id >= c.vocab) throw InputError("embed: token id " + std::to_string(id) + " out of vocabulary");
  }
  const ad::Var tok = ad::gather_rows(tape, vars.token_embedding, tokens);
  const ad::Var pos = ad::slice_rows(tape, vars.position_embedding, 0, static_cast<Eigen::Index>(tokens.size()));
  return ad::add(tape, tok, pos);
}

Tensor2 embedding_noise(const EmbeddingNoise& n, Eigen::Index rows, Eigen::Index cols, std::uint64_t sample) {
  Tensor2 delta(rows, cols);
  for (Eigen::Index s = 0; s < rows; ++s)
    for (Eigen::Index d = 0; d < cols; ++d)
      delta(s, d) = n.epsilon * keyed_normal(n.seed, {sample, std::uint64_t(s), std::uint64_t(d)});
  return delta;
}

EncoderNodes encode(ad::Tape& tape, const EncoderVars& vars, ad::Var embeddings, const OptionalSpec& spec,
                    ForwardContext ctx) {
  const ModelConfig& c = vars.config;
  const Tensor2& ev = tape.value(embeddings);
  if (ev.cols() != c.hidden || ev.rows() < 1 || ev.rows() > c.max_seq) {
    throw ShapeError("encode: embeddings must be S x H with 1 <= S <= max_seq, got " +
                     detail::shape_str(ev.rows(), ev.cols()));
  }
  if (spec) {
    validate_spec(*spec, c);
    if (std::holds_alternative<Fgsm>(*spec)) {
      throw SpecError("fgsm needs labels; build adversarial embeddings with fgsm_perturb first");
    }
  }

  std::vector<std::vector<int>> silenced;
  std::vector<std::vector<int>> noised;
  if (spec) {
    if (const auto* s = std::get_if<Silence>(&*spec)) silenced = dims_by_layer(s->targets, c.layers);
    if (const auto* g = std::get_if<GaussianCls>(&*spec)) noised = dims_by_layer(g->targets, c.layers);
  }

  ad::Var x = embeddings;
  if (spec) {
    if (const auto* n = std::get_if<EmbeddingNoise>(&*spec)) {
      x = ad::add_constant(tape, x, embedding_noise(*n, ev.rows(), ev.cols(), ctx.sample));
    }
  }

  const int dh = c.hidden / c.heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  EncoderNodes nodes;
  for (int l = 0; l < c.layers; ++l) {
    const auto& p = vars.layers[static_cast<std::size_t>(l)];
    const ad::Var q = ad::add_row(tape, ad::matmul(tape, x, p.wq), p.bq);
    const ad::Var k = ad::add_row(tape, ad::matmul(tape, x, p.wk), p.bk);
    const ad::Var v = ad::add_row(tape, ad::matmul(tape, x, p.wv), p.bv);
    std::vector<ad::Var> heads;
    heads.reserve(static_cast<std::size_t>(c.heads));
    for (int h = 0; h < c.heads; ++h) {
      const ad::Var qh = ad::slice_cols(tape, q, h * dh, dh);
      const ad::Var kh = ad::slice_cols(tape, k, h * dh, dh);
      const ad::Var vh = ad::slice_cols(tape, v, h * dh, dh);
      const ad::Var probs = ad::softmax_rows(tape, ad::scale(tape, ad::matmul_bt(tape, qh, kh), attn_scale));
      heads.push_back(ad::matmul(tape, probs, vh));
    }
    const ad::Var attn = ad::add_row(tape, ad::matmul(tape, ad::concat_cols(tape, heads), p.wo), p.bo);
    const ad::Var x1 = ad::layer_norm_rows(tape, ad::add(tape, x, attn), p.ln1_gamma, p.ln1_beta, kLayerNormEps);
    const ad::Var hidden = ad::gelu(tape, ad::add_row(tape, ad::matmul(tape, x1, p.w1), p.b1));
    const ad::Var ffn = ad::add_row(tape, ad::matmul(tape, hidden, p.w2), p.b2);
    x = ad::layer_norm_rows(tape, ad::add(tape, x1, ffn), p.ln2_gamma, p.ln2_beta, kLayerNormEps);

    if (!silenced.empty() && !silenced[static_cast<std::size_t>(l)].empty()) {
      x = ad::zero_entries(tape, x, 0, silenced[static_cast<std::size_t>(l)]);
    }
    if (!noised.empty() && !noised[static_cast<std::size_t>(l)].empty()) {
      const auto& g = std::get<GaussianCls>(*spec);
      const Tensor2& xv = tape.value(x);
      Tensor2 delta = Tensor2::Zero(xv.rows(), xv.cols());
      for (const int d : noised[static_cast<std::size_t>(l)]) {
        delta(0, d) = g.sigma * keyed_normal(g.seed, {ctx.sample, std::uint64_t(l), std::uint64_t(d)});
      }
      x = ad::add_constant(tape, x, delta);
    }
    nodes.cls.push_back(ad::slice_rows(tape, x, 0, 1));
  }

  nodes.logits = ad::add_row(tape, ad::matmul_bt(tape, nodes.cls.back(), vars.head_weight), vars.head_bias);
  if (spec) {
    if (const auto* b = std::get_if<LogitBias>(&*spec)) {
      Tensor2 shift = Tensor2::Zero(1, c.classes);
      for (int j = 0; j < c.classes; ++j) shift(0, j) = (j == b->target) ? b->bias : -b->balanced_delta;
      nodes.logits = ad::add_constant(tape, nodes.logits, shift);
    }
  }
  return nodes;
}

ForwardTrace forward_from_embeddings(const EncoderWeights& w, const Tensor2& embeddings, const OptionalSpec& spec,
                                     ForwardContext ctx) {
  ad::Tape tape(false);
  const EncoderVars vars = bind(tape, w, false);
  const ad::Var emb = tape.constant_ref(embeddings);
  const EncoderNodes nodes = encode(tape, vars, emb, spec, ctx);

  ForwardTrace trace;
  trace.cls_per_layer.resize(w.config.layers, w.config.hidden);
  for (int l = 0; l < w.config.layers; ++l) trace.cls_per_layer.row(l) = tape.value(nodes.cls[static_cast<std::size_t>(l)]);
  trace.logits = tape.value(nodes.logits).row(0);
  trace.prediction = static_cast<int>(argmax(trace.logits));
  return trace;
}

ForwardTrace forward(const EncoderWeights& w, std::span<const int> tokens, const OptionalSpec& spec,
                     ForwardContext ctx) {
  return forward_from_embeddings(w, embed(w, tokens), spec, ctx);
}

std::string variant_name(const InterventionSpec& spec) {
  static const char* const names[] = {"silence", "gaussian_cls", "logit_bias", "embedding_noise", "fgsm"};
  return names[spec.index()];
}

}  // namespace synapse
