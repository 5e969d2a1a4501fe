#include "synapse/interventions.hpp"

#include <algorithm>
#include <cmath>

#include "synapse/random.hpp"

namespace synapse {

namespace {

void check_refs(const NeuronRefs& refs) {
  for (const auto& r : refs) {
    if (r.layer < 0 || r.dim < 0 || r.global_index < 0) throw SpecError("negative neuron reference");
  }
}

void check_magnitude(double v, const char* what) {
  if (!(v >= 0.0) || !std::isfinite(v)) throw SpecError(std::string(what) + " must be a finite value >= 0");
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

InterventionSpec make_silence(NeuronRefs targets) {
  check_refs(targets);
  return Silence{std::move(targets)};
}

InterventionSpec make_gaussian_cls(NeuronRefs targets, double sigma, std::uint64_t seed) {
  check_refs(targets);
  check_magnitude(sigma, "sigma");
  return GaussianCls{std::move(targets), sigma, seed};
}

InterventionSpec make_logit_bias(int target, double bias, double balanced_delta) {
  if (target < 0) throw SpecError("logit_bias: negative target class");
  if (!std::isfinite(bias)) throw SpecError("logit_bias: bias must be finite");
  check_magnitude(balanced_delta, "balanced_delta");
  return LogitBias{target, bias, balanced_delta};
}

InterventionSpec make_embedding_noise(double epsilon, std::uint64_t seed) {
  check_magnitude(epsilon, "epsilon");
  return EmbeddingNoise{epsilon, seed};
}

InterventionSpec make_fgsm(double epsilon) {
  check_magnitude(epsilon, "epsilon");
  return Fgsm{epsilon};
}

EmbeddingGradient embedding_gradient(const EncoderWeights& w, std::span<const int> tokens, int label) {
  if (label < 0 || label >= w.config.classes) throw IndexError("fgsm: label out of range");
  EmbeddingGradient out;
  out.embeddings = embed(w, tokens);
  ad::Tape tape(true);
  const EncoderVars vars = bind(tape, w, false);
  const ad::Var emb = tape.variable_ref(out.embeddings);
  const EncoderNodes nodes = encode(tape, vars, emb, std::nullopt, {});
  const ad::Var loss = ad::cross_entropy(tape, nodes.logits, label);
  const ad::Var wrt[] = {emb};
  out.gradient = tape.grad(loss, wrt)[0];
  out.loss = tape.value(loss)(0, 0);
  return out;
}

Tensor2 fgsm_perturb(const EncoderWeights& w, std::span<const int> tokens, int label, double epsilon) {
  check_magnitude(epsilon, "epsilon");
  const EmbeddingGradient g = embedding_gradient(w, tokens, label);
  return g.embeddings + epsilon * g.gradient.unaryExpr([](double v) { return sign(v); });
}

void fgsm_self_test(const EncoderWeights& w, std::span<const int> tokens, int label, int coords, double tolerance,
                    std::uint64_t seed) {
  const EmbeddingGradient g = embedding_gradient(w, tokens, label);
  CounterRng rng(derive_seed(seed, "fgsm_self_test"));
  // Relative error is floored at 1e-4: below that the central difference is mostly roundoff.
  constexpr double h = 1e-5;
  for (int i = 0; i < coords; ++i) {
    const auto r = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(g.embeddings.rows())));
    const auto c = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(g.embeddings.cols())));
    Tensor2 plus = g.embeddings, minus = g.embeddings;
    plus(r, c) += h;
    minus(r, c) -= h;
    const double fp = cross_entropy(forward_from_embeddings(w, plus).logits, label);
    const double fm = cross_entropy(forward_from_embeddings(w, minus).logits, label);
    const double numeric = (fp - fm) / (2 * h);
    const double analytic = g.gradient(r, c);
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-4});
    if (std::abs(numeric - analytic) / denom > tolerance) {
      throw NumericalError("fgsm self-test: gradient mismatch at (" + std::to_string(r) + ", " + std::to_string(c) +
                           "): analytic " + std::to_string(analytic) + " vs numeric " + std::to_string(numeric));
    }
  }
}

ForwardTrace attacked_forward(const EncoderWeights& w, std::span<const int> tokens, int label,
                              std::uint64_t sample_index, const OptionalSpec& spec) {
  if (spec) {
    if (const auto* f = std::get_if<Fgsm>(&*spec)) {
      return forward_from_embeddings(w, fgsm_perturb(w, tokens, label, f->epsilon), std::nullopt,
                                     ForwardContext{sample_index});
    }
  }
  return forward(w, tokens, spec, ForwardContext{sample_index});
}

HeadBackup apply_head_edit(EncoderWeights& w, const HeadEdit& edit) {
  const int C = w.config.classes, H = w.config.hidden;
  HeadBackup backup{w.head_weight, w.head_bias, head_fingerprint(w), 0};

  std::visit(
      [&](const auto& e) {
        using E = std::decay_t<decltype(e)>;
        if (e.target < 0 || e.target >= C) throw SpecError("head edit: target class out of range");
        if (!std::isfinite(e.delta)) throw SpecError("head edit: delta must be finite");
        if constexpr (std::is_same_v<E, BalancedPush>) {
          if (e.columns.empty()) throw SpecError("head edit: weight push needs at least one column");
          for (const int j : e.columns) {
            if (j < 0 || j >= H) throw SpecError("head edit: column " + std::to_string(j) + " out of range");
          }
          if (e.suppress && (*e.suppress < 0 || *e.suppress >= C || *e.suppress == e.target)) {
            throw SpecError("head edit: invalid suppressed class");
          }
          const double counter = (e.balanced && C > 1) ? e.delta / double(C - 1) : 0.0;
          for (const int j : e.columns) {
            w.head_weight(e.target, j) += e.delta;
            if (e.balanced) {
              for (int c = 0; c < C; ++c)
                if (c != e.target) w.head_weight(c, j) -= counter;
            }
            if (e.suppress) w.head_weight(*e.suppress, j) -= e.delta;
          }
        } else {
          w.head_bias(0, e.target) += e.delta;
        }
      },
      edit);
  backup.edited_hash = head_fingerprint(w);
  return backup;
}

void restore_head(EncoderWeights& w, const HeadBackup& backup) {
  const std::uint64_t current = head_fingerprint(w);
  if (current == backup.original_hash) return;
  if (current != backup.edited_hash) throw RestoreError("restore_head: head does not descend from this backup");
  w.head_weight = backup.weight;
  w.head_bias = backup.bias;
  if (head_fingerprint(w) != backup.original_hash) throw RestoreError("restore_head: hash mismatch after restore");
}

std::vector<int> columns_from_refs(const NeuronRefs& refs, std::optional<std::size_t> max_columns) {
  std::vector<int> cols;
  for (const auto& r : refs) {
    if (std::find(cols.begin(), cols.end(), r.dim) == cols.end()) cols.push_back(r.dim);
    if (max_columns && cols.size() >= *max_columns) break;
  }
  return cols;
}

nlohmann::json to_json(const NeuronRef& r) {
  return {{"global", r.global_index}, {"layer", r.layer}, {"dim", r.dim}, {"score", r.score}};
}

NeuronRef neuron_ref_from_json(const nlohmann::json& j) {
  try {
    return NeuronRef{j.at("global").get<int>(), j.at("layer").get<int>(), j.at("dim").get<int>(),
                     j.at("score").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("neuron reference: ") + e.what());
  }
}

namespace {

nlohmann::json refs_json(const NeuronRefs& refs) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : refs) a.push_back(to_json(r));
  return a;
}

NeuronRefs refs_from_json(const nlohmann::json& a) {
  NeuronRefs out;
  for (const auto& j : a) out.push_back(neuron_ref_from_json(j));
  return out;
}

}  // namespace

nlohmann::json to_json(const InterventionSpec& spec) {
  nlohmann::json j;
  j["variant"] = variant_name(spec);
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, Silence>) {
          j["targets"] = refs_json(s.targets);
        } else if constexpr (std::is_same_v<S, GaussianCls>) {
          j["targets"] = refs_json(s.targets);
          j["sigma"] = s.sigma;
          j["seed"] = s.seed;
        } else if constexpr (std::is_same_v<S, LogitBias>) {
          j["target"] = s.target;
          j["bias"] = s.bias;
          j["balanced_delta"] = s.balanced_delta;
        } else if constexpr (std::is_same_v<S, EmbeddingNoise>) {
          j["epsilon"] = s.epsilon;
          j["seed"] = s.seed;
        } else {
          j["epsilon"] = s.epsilon;
        }
      },
      spec);
  return j;
}

InterventionSpec spec_from_json(const nlohmann::json& j) {
  try {
    const auto variant = j.at("variant").get<std::string>();
    if (variant == "silence") return make_silence(refs_from_json(j.at("targets")));
    if (variant == "gaussian_cls") {
      return make_gaussian_cls(refs_from_json(j.at("targets")), j.at("sigma").get<double>(),
                               j.at("seed").get<std::uint64_t>());
    }
    if (variant == "logit_bias") {
      return make_logit_bias(j.at("target").get<int>(), j.at("bias").get<double>(),
                             j.value("balanced_delta", 0.0));
    }
    if (variant == "embedding_noise") {
      return make_embedding_noise(j.at("epsilon").get<double>(), j.at("seed").get<std::uint64_t>());
    }
    if (variant == "fgsm") return make_fgsm(j.at("epsilon").get<double>());
    throw FormatError("intervention spec: unknown variant '" + variant + "'");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("intervention spec: ") + e.what());
  }
}

nlohmann::json to_json(const HeadEdit& edit) {
  if (const auto* p = std::get_if<BalancedPush>(&edit)) {
    nlohmann::json j{{"variant", "balanced_push"}, {"target", p->target},   {"delta", p->delta},
                     {"columns", p->columns},      {"balanced", p->balanced}};
    j["suppress"] = p->suppress ? nlohmann::json(*p->suppress) : nlohmann::json(nullptr);
    return j;
  }
  const auto& b = std::get<BiasOnly>(edit);
  return {{"variant", "bias_only"}, {"target", b.target}, {"delta", b.delta}};
}

HeadEdit head_edit_from_json(const nlohmann::json& j) {
  try {
    const auto variant = j.at("variant").get<std::string>();
    if (variant == "balanced_push") {
      BalancedPush p;
      p.target = j.at("target").get<int>();
      p.delta = j.at("delta").get<double>();
      p.columns = j.at("columns").get<std::vector<int>>();
      p.balanced = j.at("balanced").get<bool>();
      if (j.contains("suppress") && !j["suppress"].is_null()) p.suppress = j["suppress"].get<int>();
      return p;
    }
    if (variant == "bias_only") return BiasOnly{j.at("target").get<int>(), j.at("delta").get<double>()};
    throw FormatError("head edit: unknown variant '" + variant + "'");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("head edit: ") + e.what());
  }
}

}  // namespace synapse
