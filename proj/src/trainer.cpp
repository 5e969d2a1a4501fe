#include "synapse/trainer.hpp"

#include <cmath>

#include "synapse/interventions.hpp"
#include "synapse/parallel.hpp"
#include "synapse/random.hpp"

namespace synapse {

namespace {

void check_dataset(const ModelConfig& c, const Dataset& ds) {
  if (ds.classes != c.classes) {
    throw ConfigError("dataset has " + std::to_string(ds.classes) + " classes, model expects " +
                      std::to_string(c.classes));
  }
}

void add_into(EncoderWeights& acc, const EncoderWeights& g) {
  std::vector<const Tensor2*> src;
  g.for_each([&](const std::string&, const Tensor2& t) { src.push_back(&t); });
  std::size_t i = 0;
  acc.for_each([&](const std::string&, Tensor2& t) { t += *src[i++]; });
}

}  // namespace

double loss_and_gradient(const EncoderWeights& w, std::span<const int> tokens, int label, EncoderWeights& grad_accum) {
  ad::Tape tape(true);
  const EncoderVars vars = bind(tape, w, true);
  const ad::Var emb = embed(tape, vars, tokens);
  const EncoderNodes nodes = encode(tape, vars, emb, std::nullopt, {});
  const ad::Var loss = ad::cross_entropy(tape, nodes.logits, label);

  std::vector<ad::Var> wrt;
  vars.for_each([&](const std::string&, const ad::Var& v) { wrt.push_back(v); });
  const auto grads = tape.grad(loss, wrt);
  std::size_t i = 0;
  grad_accum.for_each([&](const std::string&, Tensor2& t) { t += grads[i++]; });
  return tape.value(loss)(0, 0);
}

double sample_loss(const EncoderWeights& w, std::span<const int> tokens, int label) {
  const ForwardTrace trace = forward(w, tokens);
  return cross_entropy(trace.logits, label);
}

TrainResult train_encoder(const ModelConfig& config, const Dataset& train, const TrainHyper& hyper) {
  return train_encoder(init_weights(config, derive_seed(hyper.seed, "init")), train, hyper);
}

TrainResult train_encoder(EncoderWeights initial, const Dataset& train, const TrainHyper& hyper) {
  const ModelConfig config = initial.config;
  config.validate();
  check_dataset(config, train);
  if (hyper.batch <= 0 || hyper.epochs < 0) throw ConfigError("train: batch must be positive, epochs non-negative");
  if (train.size() == 0) throw ConfigError("train: empty dataset");

  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  TrainResult result;
  result.weights = std::move(initial);
  EncoderWeights& w = result.weights;
  EncoderWeights m = zeros_like(w);
  EncoderWeights v = zeros_like(w);
  long step = 0;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    CounterRng rng(hash_keys(derive_seed(hyper.seed, "shuffle"), {std::uint64_t(epoch)}));
    const auto order = permutation(train.size(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hyper.batch)) {
      const std::size_t count = std::min(order.size() - start, static_cast<std::size_t>(hyper.batch));
      std::vector<EncoderWeights> grads(count);
      std::vector<double> losses(count);
      parallel_for(count, [&](std::size_t b) {
        const std::size_t idx = order[start + b];
        grads[b] = zeros_like(w);
        losses[b] = loss_and_gradient(w, train.sequences[idx], train.labels[idx], grads[b]);
      });
      EncoderWeights g = zeros_like(w);
      for (std::size_t b = 0; b < count; ++b) {
        add_into(g, grads[b]);
        epoch_loss += losses[b];
      }
      if (!std::isfinite(epoch_loss)) throw TrainingError(epoch, "loss is not finite");

      ++step;
      const double scale = 1.0 / double(count);
      const double c1 = 1.0 - std::pow(beta1, double(step));
      const double c2 = 1.0 - std::pow(beta2, double(step));
      std::vector<Tensor2*> gp, mp, vp;
      g.for_each([&](const std::string&, Tensor2& t) { gp.push_back(&t); });
      m.for_each([&](const std::string&, Tensor2& t) { mp.push_back(&t); });
      v.for_each([&](const std::string&, Tensor2& t) { vp.push_back(&t); });
      std::size_t k = 0;
      w.for_each([&](const std::string&, Tensor2& param) {
        const Tensor2& grad = *gp[k];
        Tensor2& mt = *mp[k];
        Tensor2& vt = *vp[k];
        for (Eigen::Index i = 0; i < param.size(); ++i) {
          const double gi = grad.data()[i] * scale;
          mt.data()[i] = beta1 * mt.data()[i] + (1.0 - beta1) * gi;
          vt.data()[i] = beta2 * vt.data()[i] + (1.0 - beta2) * gi * gi;
          const double mhat = mt.data()[i] / c1;
          const double vhat = vt.data()[i] / c2;
          param.data()[i] -= hyper.lr * mhat / (std::sqrt(vhat) + adam_eps);
        }
        ++k;
      });
    }
    result.epoch_loss.push_back(epoch_loss / double(train.size()));
  }
  return result;
}

std::vector<int> predict(const EncoderWeights& w, const Dataset& ds, const OptionalSpec& spec) {
  check_dataset(w.config, ds);
  if (spec) validate_spec(*spec, w.config);
  std::vector<int> out(ds.size());
  parallel_for(ds.size(), [&](std::size_t i) {
    out[i] = attacked_forward(w, ds.sequences[i], ds.labels[i], i, spec).prediction;
  });
  return out;
}

MetricsReport evaluate(const EncoderWeights& w, const Dataset& ds, const OptionalSpec& spec) {
  const auto preds = predict(w, ds, spec);
  return compute_metrics(ds.labels, preds, w.config.classes);
}

}  // namespace synapse
