#include "synapse/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "synapse/binary_io.hpp"
#include "synapse/interventions.hpp"
#include "synapse/parallel.hpp"
#include "synapse/random.hpp"

namespace synapse {

namespace {

constexpr char kActivationMagic[] = "SYNA";
constexpr std::uint32_t kActivationVersion = 1;

Tensor2 probe_logits(const ActivationSet& acts, const Tensor2& weight, const Tensor2& bias) {
  Tensor2 logits = matmul_bt(acts.features, weight);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) logits.row(i) += bias.row(0);
  return logits;
}

void sort_by_score(NeuronRefs& refs) {
  std::sort(refs.begin(), refs.end(), [](const NeuronRef& a, const NeuronRef& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.global_index < b.global_index;
  });
}

NeuronRefs filter_scope(const NeuronRefs& ranking, Scope scope, const ModelConfig& config) {
  if (scope == Scope::AllLayers) return ranking;
  NeuronRefs out;
  for (const auto& r : ranking)
    if (r.layer == config.layers - 1) out.push_back(r);
  return out;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open for writing: " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace

void ActivationSet::require_fingerprint(std::uint64_t expected) const {
  if (fingerprint != expected) {
    throw StalenessError("activations were extracted from model " + fingerprint_hex(fingerprint) +
                         ", current model is " + fingerprint_hex(expected));
  }
}

ActivationSet extract_activations(const EncoderWeights& w, const Dataset& ds) {
  const ModelConfig& c = w.config;
  ActivationSet acts;
  acts.layers = c.layers;
  acts.hidden = c.hidden;
  acts.labels = ds.labels;
  acts.fingerprint = fingerprint(w);
  acts.features.resize(static_cast<Eigen::Index>(ds.size()), c.layers * c.hidden);
  parallel_for(ds.size(), [&](std::size_t n) {
    const ForwardTrace t = forward(w, ds.sequences[n]);
    for (int l = 0; l < c.layers; ++l) {
      acts.features.row(static_cast<Eigen::Index>(n)).segment(l * c.hidden, c.hidden) = t.cls_per_layer.row(l);
    }
  });
  return acts;
}

void save_activations(const ActivationSet& acts, const std::filesystem::path& path) {
  io::Writer out;
  out.magic(kActivationMagic);
  out.u32(kActivationVersion);
  out.u32(static_cast<std::uint32_t>(acts.size()));
  out.u32(static_cast<std::uint32_t>(acts.layers));
  out.u32(static_cast<std::uint32_t>(acts.hidden));
  out.u64(acts.fingerprint);
  for (const int l : acts.labels) out.u32(static_cast<std::uint32_t>(l));
  for (Eigen::Index i = 0; i < acts.features.size(); ++i) out.f64(acts.features.data()[i]);
  out.save(path);
}

ActivationSet load_activations(const std::filesystem::path& path) {
  auto in = io::Reader::open(path);
  in.expect_magic(kActivationMagic);
  if (const auto v = in.u32(); v != kActivationVersion) {
    throw FormatError(path.string() + ": unsupported activation file version " + std::to_string(v));
  }
  ActivationSet acts;
  const std::uint32_t n = in.u32();
  acts.layers = static_cast<int>(in.u32());
  acts.hidden = static_cast<int>(in.u32());
  acts.fingerprint = in.u64();
  const std::size_t width = std::size_t(acts.layers) * std::size_t(acts.hidden);
  if (in.remaining() != std::size_t(n) * 4 + std::size_t(n) * width * 8) {
    throw FormatError(path.string() + ": size does not match header");
  }
  acts.labels.resize(n);
  for (auto& l : acts.labels) l = static_cast<int>(in.u32());
  acts.features.resize(n, static_cast<Eigen::Index>(width));
  for (Eigen::Index i = 0; i < acts.features.size(); ++i) acts.features.data()[i] = in.f64();
  return acts;
}

double probe_loss_and_gradient(const ActivationSet& acts, const Tensor2& weight, const Tensor2& bias, double l2,
                               Tensor2* grad_weight, Tensor2* grad_bias) {
  const auto N = static_cast<Eigen::Index>(acts.size());
  const Tensor2 logits = probe_logits(acts, weight, bias);
  Tensor2 residual(N, weight.rows());  // (softmax - onehot) / N
  double loss = 0.0;
  for (Eigen::Index i = 0; i < N; ++i) {
    const int y = acts.labels[static_cast<std::size_t>(i)];
    loss += cross_entropy(logits.row(i), y);
    residual.row(i) = softmax(logits.row(i)).transpose();
    residual(i, y) -= 1.0;
  }
  residual /= double(N);
  loss /= double(N);
  double sq = 0.0;
  for (Eigen::Index i = 0; i < weight.size(); ++i) sq += weight.data()[i] * weight.data()[i];
  loss += 0.5 * l2 * sq;
  if (grad_weight) *grad_weight = matmul_at(residual, acts.features) + l2 * weight;
  if (grad_bias) {
    *grad_bias = Tensor2::Zero(1, weight.rows());
    for (Eigen::Index i = 0; i < N; ++i) grad_bias->row(0) += residual.row(i);
  }
  return loss;
}

std::vector<int> probe_predict(const ProbeModel& probe, const ActivationSet& acts) {
  const Tensor2 logits = probe_logits(acts, probe.weight, probe.bias);
  std::vector<int> out(acts.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(argmax(logits.row(static_cast<Eigen::Index>(i))));
  return out;
}

ProbeModel train_probe(const ActivationSet& acts, const ProbeHyper& hyper, int num_classes) {
  if (acts.size() == 0) throw ConfigError("train_probe: no activations");
  int classes = num_classes;
  if (classes <= 0) classes = *std::max_element(acts.labels.begin(), acts.labels.end()) + 1;
  std::vector<int> present(static_cast<std::size_t>(classes), 0);
  for (const int l : acts.labels) {
    if (l < 0 || l >= classes) throw ConfigError("train_probe: label out of range");
    present[static_cast<std::size_t>(l)] = 1;
  }
  if (std::count(present.begin(), present.end(), 1) < 2) {
    throw ConfigError("train_probe: need at least two classes present");
  }
  if (hyper.epochs < 0) throw ConfigError("train_probe: epochs must be non-negative");

  ProbeModel probe;
  probe.layers = acts.layers;
  probe.hidden = acts.hidden;
  probe.fingerprint = acts.fingerprint;
  probe.hyper = hyper;
  probe.weight = Tensor2::Zero(classes, acts.features.cols());
  probe.bias = Tensor2::Zero(1, classes);
  Tensor2 gw, gb;
  for (int e = 0; e < hyper.epochs; ++e) {
    probe_loss_and_gradient(acts, probe.weight, probe.bias, hyper.l2, &gw, &gb);
    probe.weight -= hyper.lr * gw;
    probe.bias -= hyper.lr * gb;
  }
  const auto preds = probe_predict(probe, acts);
  long correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == acts.labels[i];
  probe.train_accuracy = double(correct) / double(preds.size());
  return probe;
}

nlohmann::json to_json(const ProbeModel& probe) {
  nlohmann::json weight = nlohmann::json::array();
  for (Eigen::Index c = 0; c < probe.weight.rows(); ++c) {
    std::vector<double> row(probe.weight.row(c).begin(), probe.weight.row(c).end());
    weight.push_back(row);
  }
  std::vector<double> bias(probe.bias.row(0).begin(), probe.bias.row(0).end());
  return {{"layers", probe.layers},
          {"hidden", probe.hidden},
          {"classes", probe.classes()},
          {"fingerprint", fingerprint_hex(probe.fingerprint)},
          {"train_accuracy", probe.train_accuracy},
          {"hyper", {{"lr", probe.hyper.lr}, {"epochs", probe.hyper.epochs}, {"l2", probe.hyper.l2}, {"seed", probe.hyper.seed}}},
          {"weight", weight},
          {"bias", bias}};
}

ProbeModel probe_from_json(const nlohmann::json& j) {
  try {
    ProbeModel p;
    p.layers = j.at("layers").get<int>();
    p.hidden = j.at("hidden").get<int>();
    const int classes = j.at("classes").get<int>();
    p.fingerprint = fingerprint_from_hex(j.at("fingerprint").get<std::string>());
    p.train_accuracy = j.at("train_accuracy").get<double>();
    const auto& h = j.at("hyper");
    p.hyper = {h.at("lr").get<double>(), h.at("epochs").get<int>(), h.at("l2").get<double>(),
               h.at("seed").get<std::uint64_t>()};
    const auto rows = j.at("weight").get<std::vector<std::vector<double>>>();
    const auto bias = j.at("bias").get<std::vector<double>>();
    const auto width = static_cast<std::size_t>(p.layers) * static_cast<std::size_t>(p.hidden);
    if (rows.size() != static_cast<std::size_t>(classes) || bias.size() != rows.size()) {
      throw FormatError("probe: class count mismatch");
    }
    p.weight.resize(classes, static_cast<Eigen::Index>(width));
    p.bias.resize(1, classes);
    for (int c = 0; c < classes; ++c) {
      if (rows[static_cast<std::size_t>(c)].size() != width) throw FormatError("probe: row width mismatch");
      for (std::size_t d = 0; d < width; ++d) p.weight(c, static_cast<Eigen::Index>(d)) = rows[static_cast<std::size_t>(c)][d];
      p.bias(0, c) = bias[static_cast<std::size_t>(c)];
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("probe: ") + e.what());
  }
}

void save_probe(const ProbeModel& probe, const std::filesystem::path& path) { write_json(to_json(probe), path); }

ProbeModel load_probe(const std::filesystem::path& path) { return probe_from_json(read_json(path)); }

NeuronRefs rank_global(const ProbeModel& probe) {
  NeuronRefs refs;
  refs.reserve(static_cast<std::size_t>(probe.weight.cols()));
  for (Eigen::Index j = 0; j < probe.weight.cols(); ++j) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < probe.weight.rows(); ++c) s += std::abs(probe.weight(c, j));
    refs.push_back(NeuronRef::from_global(static_cast<int>(j), probe.hidden, s));
  }
  sort_by_score(refs);
  return refs;
}

NeuronRefs rank_per_class(const ProbeModel& probe, int c) {
  if (c < 0 || c >= probe.classes()) throw IndexError("rank_per_class: class " + std::to_string(c) + " out of range");
  NeuronRefs refs;
  refs.reserve(static_cast<std::size_t>(probe.weight.cols()));
  for (Eigen::Index j = 0; j < probe.weight.cols(); ++j) {
    refs.push_back(NeuronRef::from_global(static_cast<int>(j), probe.hidden, std::abs(probe.weight(c, j))));
  }
  sort_by_score(refs);
  return refs;
}

void SelectionSpec::validate(int classes) const {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("selection: p must be in (0, 1]");
  if (kind.kind != SelectionKind::Global && (kind.target < 0 || kind.target >= classes)) {
    throw IndexError("selection: class " + std::to_string(kind.target) + " out of range");
  }
}

int top_k_count(double p, Scope scope, const ModelConfig& config) {
  const double units = scope == Scope::AllLayers ? double(config.hidden) * double(config.layers) : double(config.hidden);
  // The small offset keeps products like 0.29 * 100 from flooring one below the exact value.
  return static_cast<int>(std::floor(p * units + 1e-9));
}

NeuronRefs select_top_k(const NeuronRefs& ranking, const SelectionSpec& sel, const ModelConfig& config) {
  const auto k = static_cast<std::size_t>(top_k_count(sel.p, sel.scope, config));
  NeuronRefs in_scope = filter_scope(ranking, sel.scope, config);
  if (in_scope.size() > k) in_scope.resize(k);
  return in_scope;
}

NeuronRefs select_directed(const NeuronRefs& global_ranking, const NeuronRefs& class_ranking,
                           const SelectionSpec& sel, const ModelConfig& config) {
  const auto k = static_cast<std::size_t>(top_k_count(sel.p, sel.scope, config));
  if (k == 0) return {};
  NeuronRefs pool = filter_scope(global_ranking, sel.scope, config);
  if (pool.size() > 2 * k) pool.resize(2 * k);
  std::map<int, double> class_score;
  for (const auto& r : class_ranking) class_score[r.global_index] = r.score;
  for (auto& r : pool) {
    const auto it = class_score.find(r.global_index);
    r.score = it == class_score.end() ? 0.0 : it->second;
  }
  sort_by_score(pool);
  if (pool.size() > k) pool.resize(k);
  return pool;
}

NeuronRefs select_neurons(const ProbeModel& probe, const SelectionSpec& sel, const ModelConfig& config) {
  sel.validate(probe.classes());
  switch (sel.kind.kind) {
    case SelectionKind::Global:
      return select_top_k(rank_global(probe), sel, config);
    case SelectionKind::Class:
      return select_top_k(rank_per_class(probe, sel.kind.target), sel, config);
    case SelectionKind::Directed:
      return select_directed(rank_global(probe), rank_per_class(probe, sel.kind.target), sel, config);
  }
  return {};
}

NeuronRefs select_random(const SelectionSpec& sel, const ModelConfig& config, std::uint64_t seed) {
  const auto k = static_cast<std::size_t>(top_k_count(sel.p, sel.scope, config));
  const int first = sel.scope == Scope::AllLayers ? 0 : (config.layers - 1) * config.hidden;
  const auto span = static_cast<std::size_t>(sel.scope == Scope::AllLayers ? config.layers * config.hidden : config.hidden);
  CounterRng rng(derive_seed(seed, "select_random"));
  const auto perm = permutation(span, rng);
  NeuronRefs out;
  for (std::size_t i = 0; i < std::min(k, span); ++i) {
    out.push_back(NeuronRef::from_global(first + static_cast<int>(perm[i]), config.hidden));
  }
  return out;
}

std::string scope_name(Scope s) { return s == Scope::AllLayers ? "all" : "last"; }

Scope scope_from_name(const std::string& s) {
  if (s == "all") return Scope::AllLayers;
  if (s == "last") return Scope::LastLayer;
  throw ConfigError("unknown scope '" + s + "' (expected all|last)");
}

std::string fingerprint_hex(std::uint64_t fp) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fp));
  return buf;
}

std::uint64_t fingerprint_from_hex(const std::string& s) {
  if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos) {
    throw FormatError("fingerprint must be 16 lowercase hex digits");
  }
  return std::stoull(s, nullptr, 16);
}

nlohmann::json to_json(const RankingRecord& r) {
  static const char* const kinds[] = {"global", "class", "directed"};
  nlohmann::json neurons = nlohmann::json::array();
  for (const auto& n : r.neurons) neurons.push_back(to_json(n));
  nlohmann::json j{{"kind", kinds[r.selection.kind.kind]},
                   {"scope", scope_name(r.selection.scope)},
                   {"p", r.selection.p},
                   {"k", r.k},
                   {"seed", r.seed},
                   {"fingerprint", fingerprint_hex(r.fingerprint)},
                   {"neurons", neurons}};
  if (r.selection.kind.kind != SelectionKind::Global) j["class"] = r.selection.kind.target;
  return j;
}

RankingRecord ranking_from_json(const nlohmann::json& j) {
  try {
    for (const char* key : {"kind", "scope", "p", "k", "seed", "fingerprint", "neurons"}) {
      if (!j.contains(key)) throw FormatError(std::string("ranking: missing key '") + key + "'");
    }
    RankingRecord r;
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "global") {
      r.selection.kind = SelectionKind::global();
    } else if (kind == "class") {
      r.selection.kind = SelectionKind::per_class(j.at("class").get<int>());
    } else if (kind == "directed") {
      r.selection.kind = SelectionKind::directed(j.at("class").get<int>());
    } else {
      throw FormatError("ranking: unknown kind '" + kind + "'");
    }
    r.selection.scope = scope_from_name(j.at("scope").get<std::string>());
    r.selection.p = j.at("p").get<double>();
    r.k = j.at("k").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.fingerprint = fingerprint_from_hex(j.at("fingerprint").get<std::string>());
    for (const auto& n : j.at("neurons")) r.neurons.push_back(neuron_ref_from_json(n));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("ranking: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("ranking: ") + e.what());
  }
}

void persist_ranking(const RankingRecord& r, const std::filesystem::path& path) { write_json(to_json(r), path); }

RankingRecord load_ranking(const std::filesystem::path& path, std::optional<std::uint64_t> expected_fingerprint) {
  RankingRecord r = ranking_from_json(read_json(path));
  if (expected_fingerprint && r.fingerprint != *expected_fingerprint) {
    throw StalenessError(path.string() + ": ranking was computed for model " + fingerprint_hex(r.fingerprint) +
                         ", current model is " + fingerprint_hex(*expected_fingerprint));
  }
  return r;
}

}  // namespace synapse
