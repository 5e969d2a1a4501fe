#include <doctest.h>

#include "support.hpp"
#include "synapse/analysis.hpp"
#include "synapse/interventions.hpp"
#include "synapse/trainer.hpp"

using namespace synapse;
using namespace synapse::testing;

namespace {

double cross_entropy(const RowVectorXd& logits, int label) {
  const double m = logits.maxCoeff();
  return std::log((logits.array() - m).exp().sum()) + m - logits(label);
}

NeuronRefs all_units(const ModelConfig& c) {
  NeuronRefs out;
  for (int i = 0; i < c.layers * c.hidden; ++i) out.push_back(NeuronRef::from_global(i, c.hidden));
  return out;
}

struct Fixture {
  ModelConfig config = tiny_config();
  EncoderWeights weights = random_weights(config, 31);
  std::vector<Tokens> inputs;
  std::vector<int> labels;

  Fixture() {
    CounterRng rng(32);
    for (int i = 0; i < 20; ++i) {
      inputs.push_back(random_tokens(config, 3 + static_cast<int>(rng.below(6)), rng));
      labels.push_back(i % config.classes);
    }
  }
};

}  // namespace

TEST_CASE("silencing nothing is the baseline; silencing everything leaves the head bias") {
  Fixture f;
  f.weights.head_bias << 0.1, -0.3, 0.7;
  for (std::size_t i = 0; i < f.inputs.size(); ++i) {
    const ForwardTrace clean = forward(f.weights, f.inputs[i]);
    const ForwardTrace none = forward(f.weights, f.inputs[i], make_silence({}));
    CHECK(none.logits == clean.logits);
    CHECK(none.cls_per_layer == clean.cls_per_layer);
    const ForwardTrace all = forward(f.weights, f.inputs[i], make_silence(all_units(f.config)));
    CHECK(all.prediction == 2);
    CHECK(all.logits == f.weights.head_bias);
  }
}

TEST_CASE("silencing a unit the linear read-out ignores keeps the prediction") {
  ModelConfig c = tiny_config();
  c.layers = 1;
  EncoderWeights w = random_weights(c, 33);
  const int j = 5;
  w.head_weight.col(j).setZero();  // the head is its own faithful probe; unit j scores 0
  CounterRng rng(34);
  for (int i = 0; i < 50; ++i) {
    const Tokens t = random_tokens(c, 6, rng);
    const ForwardTrace a = forward(w, t), b = forward(w, t, make_silence({NeuronRef::from_global(j, c.hidden)}));
    CHECK(b.prediction == a.prediction);
    CHECK((b.logits - a.logits).cwiseAbs().maxCoeff() <= 1e-15);
  }
}

TEST_CASE("silence only touches its targets, from their layer on") {
  Fixture f;
  const NeuronRef r = NeuronRef::from_global(f.config.hidden + 3, f.config.hidden);  // layer 1, dim 3
  const ForwardTrace clean = forward(f.weights, f.inputs[0]);
  const ForwardTrace s = forward(f.weights, f.inputs[0], make_silence({r}));
  CHECK(s.cls_per_layer.row(0) == clean.cls_per_layer.row(0));
  CHECK(s.cls_per_layer(1, 3) == 0.0);
  for (int d = 0; d < f.config.hidden; ++d)
    if (d != 3) CHECK(s.cls_per_layer(1, d) == clean.cls_per_layer(1, d));
}

TEST_CASE("gaussian cls noise: zero mean and variance sigma^2 over 1e5 draws") {
  Fixture f;
  const int H = f.config.hidden, last = f.config.layers - 1;
  NeuronRefs targets;
  for (int d = 0; d < H; ++d) targets.push_back(NeuronRef::from_global(last * H + d, H));
  const double sigma = 0.7;
  const InterventionSpec spec = make_gaussian_cls(targets, sigma, 99);
  const Tokens& t = f.inputs[0];
  const ForwardTrace clean = forward(f.weights, t);
  const int samples = 100000 / H;
  double sum = 0, sq = 0;
  for (int n = 0; n < samples; ++n) {
    const ForwardTrace noisy = forward(f.weights, t, spec, ForwardContext{static_cast<std::uint64_t>(n)});
    CHECK(noisy.cls_per_layer.row(0) == clean.cls_per_layer.row(0));
    for (int d = 0; d < H; ++d) {
      const double z = noisy.cls_per_layer(last, d) - clean.cls_per_layer(last, d);
      sum += z;
      sq += z * z;
    }
  }
  const double count = double(samples) * H;
  const double mean = sum / count, var = sq / count - mean * mean;
  CHECK(std::abs(mean) <= 4.0 * sigma / std::sqrt(count));
  CHECK(std::abs(var / (sigma * sigma) - 1.0) <= 0.02);

  // Same key, same draw; different sample index, different draw.
  const ForwardContext ctx{5};
  CHECK(forward(f.weights, t, spec, ctx).logits == forward(f.weights, t, spec, ctx).logits);
  CHECK(forward(f.weights, t, spec, ctx).logits != forward(f.weights, t, spec, ForwardContext{6}).logits);
  CHECK(forward(f.weights, t, make_gaussian_cls(targets, 0.0, 1)).logits == clean.logits);
}

TEST_CASE("embedding noise: RMS equals epsilon within 2%, and the forward pass adds it") {
  const EmbeddingNoise n{0.05, 4};
  double sq = 0;
  long count = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Tensor2 d = embedding_noise(n, 32, 64, s);
    sq += d.squaredNorm();
    count += d.size();
  }
  CHECK(std::abs(std::sqrt(sq / double(count)) / n.epsilon - 1.0) <= 0.02);
  CHECK(embedding_noise(n, 4, 4, 1) != embedding_noise(n, 4, 4, 2));
  CHECK(embedding_noise(EmbeddingNoise{0.0, 4}, 4, 4, 1).cwiseAbs().maxCoeff() == 0.0);

  Fixture f;
  const Tokens& t = f.inputs[1];
  const auto rows = static_cast<Eigen::Index>(t.size());
  const Tensor2 manual = embed(f.weights, t) + embedding_noise(n, rows, f.config.hidden, 7);
  const ForwardTrace a = forward_from_embeddings(f.weights, manual);
  const ForwardTrace b = forward(f.weights, t, make_embedding_noise(n.epsilon, n.seed), ForwardContext{7});
  CHECK((a.logits - b.logits).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("logit bias: huge bias forces the target; balanced delta lowers the rest") {
  const auto& sw = small_world();
  for (const int p : predict(sw.weights, sw.splits.test, make_logit_bias(1, 1e9))) CHECK(p == 1);

  Fixture f;
  const ForwardTrace clean = forward(f.weights, f.inputs[0]);
  const ForwardTrace b = forward(f.weights, f.inputs[0], make_logit_bias(2, 1.5, 0.25));
  CHECK(b.logits(2) == clean.logits(2) + 1.5);
  CHECK(b.logits(0) == clean.logits(0) - 0.25);
  CHECK(b.logits(1) == clean.logits(1) - 0.25);
}

TEST_CASE("logit bias 8.0 on class 3 is a valid default-model spec") {
  const ModelConfig c;
  CHECK_NOTHROW(validate_spec(make_logit_bias(3, 8.0), c));
  CHECK_THROWS_AS(validate_spec(make_logit_bias(5, 8.0), c), SpecError);
  CHECK_THROWS_AS(make_logit_bias(0, std::numeric_limits<double>::infinity()), SpecError);
}

TEST_CASE("property: predicting the target is monotone in the logit bias") {
  Fixture f;
  CounterRng rng(35);
  for (std::size_t i = 0; i < f.inputs.size(); ++i) {
    const int target = static_cast<int>(rng.below(3));
    bool reached = false;
    for (double b = -4.0; b <= 12.0; b += 0.25) {
      const bool hit = forward(f.weights, f.inputs[i], make_logit_bias(target, b)).prediction == target;
      if (reached) CHECK(hit);
      reached = reached || hit;
    }
    CHECK(reached);
  }
}

TEST_CASE("spec validation") {
  const ModelConfig c = tiny_config();
  CHECK_THROWS_AS(validate_spec(make_silence({NeuronRef{2, 0, 16}}), c), SpecError);
  CHECK_THROWS_AS(validate_spec(make_silence({NeuronRef{0, 9, 9}}), c), SpecError);
  CHECK_THROWS_AS(validate_spec(make_silence({NeuronRef{1, 1, 3}}), c), SpecError);
  CHECK_THROWS_AS(make_gaussian_cls({}, -1.0, 0), SpecError);
  CHECK_THROWS_AS(make_embedding_noise(std::nan(""), 0), SpecError);
  CHECK_THROWS_AS(make_fgsm(-0.1), SpecError);
  CHECK_NOTHROW(validate_spec(make_silence({NeuronRef::from_global(15, 8)}), c));
}

TEST_CASE("fgsm: epsilon 0 is the baseline; perturbation is epsilon times the gradient sign") {
  Fixture f;
  for (std::size_t i = 0; i < f.inputs.size(); ++i) {
    const Tokens& t = f.inputs[i];
    const int y = f.labels[i];
    CHECK(attacked_forward(f.weights, t, y, i, make_fgsm(0.0)).logits == forward(f.weights, t).logits);
    const EmbeddingGradient g = embedding_gradient(f.weights, t, y);
    CHECK(g.embeddings == embed(f.weights, t));
    const Tensor2 step = fgsm_perturb(f.weights, t, y, 0.01) - g.embeddings;
    for (Eigen::Index k = 0; k < step.size(); ++k) {
      const double gk = g.gradient.data()[k];
      const double expect = gk > 0 ? 0.01 : (gk < 0 ? -0.01 : 0.0);
      CHECK(std::abs(step.data()[k] - expect) <= 1e-15);
    }
  }
}

TEST_CASE("fgsm: gradient self-test and first-order loss increase") {
  const auto& sw = small_world();
  const Dataset& ds = sw.splits.test;
  CHECK_NOTHROW(fgsm_self_test(sw.weights, ds.sequences[0], ds.labels[0]));
  CHECK_THROWS_AS(fgsm_self_test(sw.weights, ds.sequences[0], ds.labels[0], 16, -1.0), NumericalError);

  int increased = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double clean = cross_entropy(forward(sw.weights, ds.sequences[i]).logits, ds.labels[i]);
    const double adv =
        cross_entropy(attacked_forward(sw.weights, ds.sequences[i], ds.labels[i], i, make_fgsm(1e-4)).logits,
                      ds.labels[i]);
    increased += adv > clean;
  }
  CHECK(double(increased) >= 0.9 * double(ds.size()));
}

TEST_CASE("fgsm raises the loss at least as much as same-size random noise") {
  const auto& sw = small_world();
  const Dataset& ds = sw.splits.test;
  for (const double eps : {1e-4, 1e-3}) {
    double fgsm = 0, noise = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto& t = ds.sequences[i];
      const int y = ds.labels[i];
      fgsm += cross_entropy(attacked_forward(sw.weights, t, y, i, make_fgsm(eps)).logits, y);
      noise += cross_entropy(attacked_forward(sw.weights, t, y, i, make_embedding_noise(eps, 1)).logits, y);
    }
    CHECK(fgsm >= noise);
  }
}

TEST_CASE("head edits: zero delta is a no-op") {
  const auto& sw = small_world();
  EncoderWeights w = sw.weights;
  const std::vector<int> before = predict(w, sw.splits.test);
  for (const HeadEdit& e : {HeadEdit{BiasOnly{1, 0.0}}, HeadEdit{BalancedPush{1, 0.0, {0, 3, 5}, true, std::nullopt}}}) {
    const HeadBackup b = apply_head_edit(w, e);
    CHECK(b.edited_hash == b.original_hash);
    CHECK(predict(w, sw.splits.test) == before);
    restore_head(w, b);
  }
  CHECK(fingerprint(w) == fingerprint(sw.weights));
}

TEST_CASE("head edits: logit shifts match the linear-algebra oracle") {
  Fixture f;
  const int C = f.config.classes, last = f.config.layers - 1;
  const Tokens& t = f.inputs[2];
  const ForwardTrace clean = forward(f.weights, t);
  const RowVectorXd x = clean.cls_per_layer.row(last);

  EncoderWeights w = f.weights;
  HeadBackup b = apply_head_edit(w, BiasOnly{0, 0.4});
  RowVectorXd shifted = forward(w, t).logits;
  CHECK(std::abs(shifted(0) - clean.logits(0) - 0.4) <= 1e-12);
  CHECK(shifted(1) == clean.logits(1));
  restore_head(w, b);

  const std::vector<int> cols{1, 4, 6};
  double s = 0;
  for (const int j : cols) s += x(j);
  for (const bool balanced : {true, false}) {
    b = apply_head_edit(w, BalancedPush{1, 0.3, cols, balanced, std::nullopt});
    shifted = forward(w, t).logits;
    CHECK(std::abs(shifted(1) - clean.logits(1) - 0.3 * s) <= 1e-12);
    const double other = balanced ? -0.3 / double(C - 1) * s : 0.0;
    CHECK(std::abs(shifted(0) - clean.logits(0) - other) <= 1e-12);
    CHECK(std::abs(shifted(2) - clean.logits(2) - other) <= 1e-12);
    restore_head(w, b);
  }

  b = apply_head_edit(w, BalancedPush{1, 0.3, cols, false, 2});
  shifted = forward(w, t).logits;
  CHECK(std::abs(shifted(2) - clean.logits(2) + 0.3 * s) <= 1e-12);
  restore_head(w, b);
  CHECK(fingerprint(w) == fingerprint(f.weights));
}

TEST_CASE("head edits: delta 0.2 over 20% of units with up to 200 columns is accepted") {
  const ModelConfig c;
  EncoderWeights w = init_weights(c, 0);
  CounterRng rng(36);
  Tensor2 probe_w = random_matrix(c.classes, c.layers * c.hidden, rng);
  ProbeModel p;
  p.weight = probe_w;
  p.bias = Tensor2::Zero(1, c.classes);
  p.layers = c.layers;
  p.hidden = c.hidden;
  SelectionSpec s;
  s.p = 0.2;
  s.kind = SelectionKind::directed(3);
  const NeuronRefs refs = select_neurons(p, s, c);
  CHECK(refs.size() == 51);
  const std::vector<int> cols = columns_from_refs(refs, 200);
  CHECK(!cols.empty());
  CHECK(cols.size() <= 51);
  const auto before = fingerprint(w);
  const HeadBackup b = apply_head_edit(w, BalancedPush{3, 0.2, cols, true, std::nullopt});
  CHECK(fingerprint(w) != before);
  restore_head(w, b);
  CHECK(fingerprint(w) == before);
}

TEST_CASE("head edits: validation") {
  Fixture f;
  EncoderWeights w = f.weights;
  CHECK_THROWS_AS(apply_head_edit(w, BiasOnly{3, 1.0}), SpecError);
  CHECK_THROWS_AS(apply_head_edit(w, BalancedPush{0, 1.0, {}, true, std::nullopt}), SpecError);
  CHECK_THROWS_AS(apply_head_edit(w, BalancedPush{0, 1.0, {8}, true, std::nullopt}), SpecError);
  CHECK_THROWS_AS(apply_head_edit(w, BalancedPush{0, 1.0, {1}, true, 0}), SpecError);
  CHECK_THROWS_AS(apply_head_edit(w, BiasOnly{0, std::numeric_limits<double>::infinity()}), SpecError);
  CHECK(fingerprint(w) == fingerprint(f.weights));
}

TEST_CASE("restore is idempotent and refuses foreign heads") {
  Fixture f;
  EncoderWeights w = f.weights;
  const HeadBackup b = apply_head_edit(w, BiasOnly{1, 2.0});
  restore_head(w, b);
  restore_head(w, b);
  CHECK(fingerprint(w) == fingerprint(f.weights));

  const HeadBackup b2 = apply_head_edit(w, BiasOnly{1, 2.0});
  w.head_weight(0, 0) += 1.0;  // drift after the edit
  CHECK_THROWS_AS(restore_head(w, b2), RestoreError);
}

TEST_CASE("columns_from_refs: distinct dims in first-seen order, truncated") {
  const NeuronRefs refs{NeuronRef::from_global(9, 8), NeuronRef::from_global(1, 8), NeuronRef::from_global(4, 8),
                        NeuronRef::from_global(12, 8)};
  CHECK(columns_from_refs(refs) == std::vector<int>{1, 4});
  CHECK(columns_from_refs(refs, 1) == std::vector<int>{1});
  CHECK(columns_from_refs({}).empty());
}

TEST_CASE("json round trips for every spec and edit") {
  const NeuronRefs refs{NeuronRef::from_global(3, 8, 0.5), NeuronRef::from_global(11, 8, 0.25)};
  const std::vector<InterventionSpec> specs{make_silence(refs), make_gaussian_cls(refs, 0.3, 42),
                                            make_logit_bias(2, 8.0, 0.1), make_embedding_noise(0.01, 7),
                                            make_fgsm(0.05)};
  for (const auto& s : specs) {
    const auto j = to_json(s);
    CHECK(j["variant"] == variant_name(s));
    CHECK(spec_from_json(nlohmann::json::parse(j.dump())) == s);
  }
  const std::vector<HeadEdit> edits{BiasOnly{1, 0.2}, BalancedPush{2, 0.2, {1, 5}, false, 0}};
  for (const auto& e : edits) {
    const HeadEdit back = head_edit_from_json(nlohmann::json::parse(to_json(e).dump()));
    CHECK(to_json(back) == to_json(e));
  }
  CHECK_THROWS_AS(spec_from_json(nlohmann::json{{"variant", "melt"}}), FormatError);
  CHECK_THROWS_AS(spec_from_json(nlohmann::json{{"variant", "fgsm"}}), FormatError);
  CHECK_THROWS_AS(head_edit_from_json(nlohmann::json{{"variant", "bias_only"}, {"target", "x"}}), FormatError);
}
