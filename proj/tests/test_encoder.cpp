#include <doctest.h>

#include <fstream>

#include "support.hpp"
#include "synapse/encoder.hpp"
#include "synapse/interventions.hpp"

using namespace synapse;
using namespace synapse::testing;

namespace {

NeuronRefs all_neurons(const ModelConfig& c) {
  NeuronRefs refs;
  for (int g = 0; g < c.layers * c.hidden; ++g) refs.push_back(NeuronRef::from_global(g, c.hidden));
  return refs;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.max_seq = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("init_weights: determinism, seed sensitivity, conventions") {
  const ModelConfig c = tiny_config();
  const EncoderWeights a = init_weights(c, 1), b = init_weights(c, 1), d = init_weights(c, 2);
  CHECK(fingerprint(a) == fingerprint(b));
  CHECK(a.token_embedding == b.token_embedding);
  CHECK(fingerprint(a) != fingerprint(d));
  CHECK(a.token_embedding != d.token_embedding);
  CHECK(a.head_bias.cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.layers[0].ln1_gamma == Tensor2::Ones(1, c.hidden));
  CHECK(a.head_weight.rows() == c.classes);
  CHECK(a.head_weight.cols() == c.hidden);
  CHECK(a.position_embedding.rows() == c.max_seq);
}

TEST_CASE("embed: lookup oracle") {
  const ModelConfig c = tiny_config();
  const EncoderWeights w = random_weights(c, 3);
  CounterRng rng(1);
  const Tokens t = random_tokens(c, 6, rng);
  const Tensor2 e = embed(w, t);
  REQUIRE(e.rows() == 6);
  for (int s = 0; s < 6; ++s) {
    for (int d = 0; d < c.hidden; ++d) {
      CHECK(e(s, d) == w.token_embedding(t[static_cast<std::size_t>(s)], d) + w.position_embedding(s, d));
    }
  }
  CHECK(embed(w, t) == e);

  const Tokens cls_only{kClsToken};
  CHECK(embed(w, cls_only).rows() == 1);
  CHECK(embed(w, cls_only).cols() == c.hidden);
}

TEST_CASE("embed: input contract") {
  const ModelConfig c = tiny_config();
  const EncoderWeights w = init_weights(c, 0);
  CHECK_THROWS_AS(embed(w, Tokens{}), InputError);
  CHECK_THROWS_AS(embed(w, Tokens{1, 2}), InputError);
  CHECK_THROWS_AS(embed(w, Tokens{0, c.vocab}), InputError);
  CHECK_THROWS_AS(embed(w, Tokens(static_cast<std::size_t>(c.max_seq + 1), 0)), InputError);
}

TEST_CASE("forward: deterministic, composition and shapes") {
  const ModelConfig c = tiny_config();
  const EncoderWeights w = random_weights(c, 4);
  CounterRng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Tokens t = random_tokens(c, 1 + static_cast<int>(rng.below(c.max_seq)), rng);
    const ForwardTrace a = forward(w, t), b = forward(w, t);
    CHECK(a.logits == b.logits);
    CHECK(a.cls_per_layer == b.cls_per_layer);
    CHECK(a.cls_per_layer.rows() == c.layers);
    CHECK(a.cls_per_layer.cols() == c.hidden);
    CHECK(a.prediction == argmax(a.logits));
    CHECK(forward_from_embeddings(w, embed(w, t)).logits == a.logits);
  }
}

TEST_CASE("forward: silencing every neuron leaves only the head bias") {
  const ModelConfig c = tiny_config();
  EncoderWeights w = random_weights(c, 5);
  w.head_bias << 0.1, 0.7, -0.2;
  const InterventionSpec spec = make_silence(all_neurons(c));
  CounterRng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Tokens t = random_tokens(c, 5, rng);
    const ForwardTrace tr = forward(w, t, spec);
    CHECK(tr.cls_per_layer.row(c.layers - 1).cwiseAbs().maxCoeff() == 0.0);
    CHECK(tr.logits == RowVectorXd(w.head_bias.row(0)));
    CHECK(tr.prediction == 1);
  }
}

TEST_CASE("forward: empty and zero-magnitude specs reproduce the baseline") {
  const ModelConfig c = tiny_config();
  const EncoderWeights w = random_weights(c, 6);
  CounterRng rng(4);
  const Tokens t = random_tokens(c, 7, rng);
  const ForwardTrace base = forward(w, t);
  const std::vector<InterventionSpec> specs = {make_silence({}), make_gaussian_cls(all_neurons(c), 0.0, 9),
                                               make_logit_bias(1, 0.0), make_embedding_noise(0.0, 9)};
  for (const auto& s : specs) {
    INFO(variant_name(s));
    const ForwardTrace tr = forward(w, t, s);
    CHECK(tr.logits == base.logits);
    CHECK(tr.cls_per_layer == base.cls_per_layer);
  }
}

TEST_CASE("forward: interventions only touch the [CLS] row") {
  // With one layer the last-layer [CLS] of a silenced run differs from the
  // baseline only in the silenced dims.
  ModelConfig c = tiny_config();
  c.layers = 1;
  const EncoderWeights w = random_weights(c, 7);
  CounterRng rng(5);
  const Tokens t = random_tokens(c, 6, rng);
  const ForwardTrace base = forward(w, t);
  const NeuronRefs targets = {NeuronRef::from_global(2, c.hidden), NeuronRef::from_global(5, c.hidden)};
  const ForwardTrace tr = forward(w, t, make_silence(targets));
  for (int d = 0; d < c.hidden; ++d) {
    if (d == 2 || d == 5) {
      CHECK(tr.cls_per_layer(0, d) == 0.0);
    } else {
      CHECK(tr.cls_per_layer(0, d) == base.cls_per_layer(0, d));
    }
  }
}

TEST_CASE("forward: silencing an early layer propagates downstream") {
  const ModelConfig c = tiny_config();
  const EncoderWeights w = random_weights(c, 8);
  CounterRng rng(6);
  const Tokens t = random_tokens(c, 6, rng);
  const ForwardTrace base = forward(w, t);
  NeuronRefs layer0;
  for (int d = 0; d < c.hidden; ++d) layer0.push_back(NeuronRef::from_global(d, c.hidden));
  const ForwardTrace tr = forward(w, t, make_silence(layer0));
  CHECK(tr.cls_per_layer.row(0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(tr.cls_per_layer.row(1) != base.cls_per_layer.row(1));
}

TEST_CASE("forward: gaussian noise on the last layer is exactly sigma times the keyed normal") {
  const ModelConfig c = tiny_config();
  const EncoderWeights w = random_weights(c, 9);
  CounterRng rng(7);
  const Tokens t = random_tokens(c, 5, rng);
  const NeuronRef target = NeuronRef::from_global(c.hidden + 3, c.hidden);
  const ForwardTrace base = forward(w, t);
  const ForwardTrace tr = forward(w, t, make_gaussian_cls({target}, 0.5, 42), ForwardContext{11});
  const double want = 0.5 * keyed_normal(42, {11, 1, 3});
  CHECK(tr.cls_per_layer(1, 3) - base.cls_per_layer(1, 3) == doctest::Approx(want).epsilon(1e-12));
  CHECK(forward(w, t, make_gaussian_cls({target}, 0.5, 42), ForwardContext{11}).logits == tr.logits);
  CHECK(forward(w, t, make_gaussian_cls({target}, 0.5, 42), ForwardContext{12}).logits != tr.logits);
}

TEST_CASE("forward: embedding noise equals adding the keyed perturbation to the embeddings") {
  const ModelConfig c = tiny_config();
  const EncoderWeights w = random_weights(c, 10);
  CounterRng rng(8);
  const Tokens t = random_tokens(c, 5, rng);
  const EmbeddingNoise n{0.3, 5};
  const Tensor2 e = embed(w, t) + embedding_noise(n, 5, c.hidden, 4);
  CHECK(forward(w, t, InterventionSpec{n}, ForwardContext{4}).logits == forward_from_embeddings(w, e).logits);
}

TEST_CASE("forward: logit bias shifts logits after the head") {
  const ModelConfig c = tiny_config();
  const EncoderWeights w = random_weights(c, 11);
  CounterRng rng(9);
  const Tokens t = random_tokens(c, 4, rng);
  const ForwardTrace base = forward(w, t);
  const ForwardTrace tr = forward(w, t, make_logit_bias(2, 1.5, 0.25));
  CHECK(tr.logits(2) == base.logits(2) + 1.5);
  CHECK(tr.logits(0) == base.logits(0) - 0.25);
  CHECK(tr.cls_per_layer == base.cls_per_layer);
}

TEST_CASE("validate_spec rejects references outside the model") {
  const ModelConfig c = tiny_config();
  CHECK_THROWS_AS(validate_spec(make_silence({NeuronRef{0, c.layers, 0, 0}}), c), SpecError);
  CHECK_THROWS_AS(validate_spec(make_silence({NeuronRef{0, 0, c.hidden, 0}}), c), SpecError);
  CHECK_THROWS_AS(validate_spec(make_logit_bias(c.classes, 1.0), c), SpecError);
  CHECK_NOTHROW(validate_spec(make_logit_bias(c.classes - 1, 1.0), c));
  const EncoderWeights w = init_weights(c, 0);
  CHECK_THROWS_AS(forward(w, Tokens{0, 1}, make_fgsm(0.1)), SpecError);
}

TEST_CASE("property: forward passes never modify the weights") {
  const ModelConfig c = tiny_config();
  const EncoderWeights w = random_weights(c, 12);
  const auto before = fingerprint(w);
  CounterRng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const Tokens t = random_tokens(c, 1 + static_cast<int>(rng.below(c.max_seq)), rng);
    forward(w, t, make_silence({NeuronRef::from_global(static_cast<int>(rng.below(16)), c.hidden)}));
    forward(w, t, make_gaussian_cls(all_neurons(c), 1.0, trial));
    forward(w, t, make_embedding_noise(0.5, trial));
    forward(w, t, make_logit_bias(0, 3.0));
  }
  CHECK(fingerprint(w) == before);
}

TEST_CASE("weights round-trip through a file") {
  TempDir dir;
  const EncoderWeights w = random_weights(tiny_config(), 13);
  save_weights(w, dir / "m.synw");
  const EncoderWeights back = load_weights(dir / "m.synw");
  CHECK(fingerprint(back) == fingerprint(w));
  CHECK(back.config == w.config);
  CHECK(back.layers[1].w2 == w.layers[1].w2);
}

TEST_CASE("weights file: errors") {
  TempDir dir;
  CHECK_THROWS_AS(load_weights(dir / "missing.synw"), InputError);
  save_weights(init_weights(tiny_config(), 0), dir / "m.synw");
  {
    std::fstream f(dir / "m.synw", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  CHECK_THROWS_AS(load_weights(dir / "m.synw"), FormatError);
  save_weights(init_weights(tiny_config(), 0), dir / "t.synw");
  std::filesystem::resize_file(dir / "t.synw", std::filesystem::file_size(dir / "t.synw") - 8);
  CHECK_THROWS_AS(load_weights(dir / "t.synw"), FormatError);
}

TEST_CASE("head fingerprint tracks only the head") {
  EncoderWeights w = init_weights(tiny_config(), 0);
  const auto h = head_fingerprint(w), f = fingerprint(w);
  w.token_embedding(0, 0) += 1.0;
  CHECK(head_fingerprint(w) == h);
  CHECK(fingerprint(w) != f);
  w.head_bias(0, 0) += 1.0;
  CHECK(head_fingerprint(w) != h);
}

TEST_CASE("embedding gradient of the full encoder matches central differences") {
  const ModelConfig c = tiny_config();
  const EncoderWeights w = random_weights(c, 14);
  CounterRng rng(11);
  const Tokens t = random_tokens(c, 6, rng);
  const EmbeddingGradient g = embedding_gradient(w, t, 1);
  CHECK(g.loss == doctest::Approx(cross_entropy(forward(w, t).logits, 1)).epsilon(1e-12));
  constexpr double h = 1e-5;
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = static_cast<Eigen::Index>(rng.below(6)), col = static_cast<Eigen::Index>(rng.below(c.hidden));
    Tensor2 plus = g.embeddings, minus = g.embeddings;
    plus(r, col) += h;
    minus(r, col) -= h;
    const double fd = (cross_entropy(forward_from_embeddings(w, plus).logits, 1) -
                       cross_entropy(forward_from_embeddings(w, minus).logits, 1)) /
                      (2 * h);
    CHECK(relative_error(g.gradient(r, col), fd, 1e-4) <= 1e-5);
  }
}
