#include "synapse/data.hpp"

#include <algorithm>
#include <cmath>

#include "synapse/binary_io.hpp"
#include "synapse/random.hpp"

namespace synapse {

namespace {

constexpr char kDatasetMagic[] = "SYND";
constexpr std::uint32_t kDatasetVersion = 1;

}  // namespace

void GenSpec::validate() const {
  if (classes < 2) throw ConfigError("gen spec: need at least 2 classes");
  if (seq_len < 2 || motif_len < 1 || per_class < 1) throw ConfigError("gen spec: sizes must be positive");
  if (motif_len >= seq_len) throw ConfigError("gen spec: motif_len must be smaller than seq_len");
  // [CLS] + motif tokens + at least one background token
  if (1 + classes * motif_len >= vocab) {
    throw ConfigError("gen spec: vocab " + std::to_string(vocab) + " too small for " + std::to_string(classes) +
                      " motifs of length " + std::to_string(motif_len));
  }
  if (!(noise_rate >= 0.0 && noise_rate < 1.0)) throw ConfigError("gen spec: noise_rate must be in [0, 1)");
}

std::vector<int> Dataset::class_counts() const {
  std::vector<int> counts(static_cast<std::size_t>(std::max(classes, 0)), 0);
  for (const int l : labels) ++counts.at(static_cast<std::size_t>(l));
  return counts;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.classes = classes;
  out.vocab = vocab;
  out.seq_len = seq_len;
  out.sequences.reserve(indices.size());
  out.labels.reserve(indices.size());
  for (const auto i : indices) {
    out.sequences.push_back(sequences.at(i));
    out.labels.push_back(labels.at(i));
  }
  return out;
}

Dataset generate(const GenSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.classes = spec.classes;
  ds.vocab = spec.vocab;
  ds.seq_len = spec.seq_len;
  const int background = spec.first_background_token();
  const auto n_background = static_cast<std::uint64_t>(spec.vocab - background);
  const int body = spec.seq_len - 1;
  const std::size_t n = static_cast<std::size_t>(spec.classes) * static_cast<std::size_t>(spec.per_class);
  ds.sequences.reserve(n);
  ds.labels.reserve(n);
  const std::uint64_t base = derive_seed(spec.seed, "generate");
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(spec.classes));
    CounterRng rng(hash_keys(base, {i}));
    Tokens seq(static_cast<std::size_t>(spec.seq_len));
    seq[0] = kClsToken;
    for (int s = 1; s < spec.seq_len; ++s) seq[static_cast<std::size_t>(s)] = background + static_cast<int>(rng.below(n_background));
    const int offset = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(body - spec.motif_len + 1)));
    for (int j = 0; j < spec.motif_len; ++j) {
      const bool corrupt = rng.uniform() < spec.noise_rate;
      const int replacement = background + static_cast<int>(rng.below(n_background));
      seq[static_cast<std::size_t>(offset + j)] = corrupt ? replacement : spec.motif_token(label, j);
    }
    ds.sequences.push_back(std::move(seq));
    ds.labels.push_back(label);
  }
  return ds;
}

DatasetSplits split(const Dataset& ds, SplitFractions f, std::uint64_t seed) {
  if (!(f.train > 0 && f.probe > 0 && f.test > 0)) throw ConfigError("split: fractions must be positive");
  if (std::abs(f.train + f.probe + f.test - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.classes));
  for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(static_cast<std::size_t>(ds.labels[i])).push_back(i);

  std::vector<std::size_t> train, probe, test;
  const std::uint64_t base = derive_seed(seed, "split");
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const auto& members = by_class[c];
    const std::size_t n = members.size();
    if (n < 3) throw ConfigError("split: class " + std::to_string(c) + " has fewer than 3 samples");
    auto n_train = static_cast<std::size_t>(std::max<long long>(1, std::llround(f.train * double(n))));
    auto n_probe = static_cast<std::size_t>(std::max<long long>(1, std::llround(f.probe * double(n))));
    while (n_train + n_probe > n - 1) {
      if (n_train > 1) --n_train; else --n_probe;
    }
    CounterRng rng(hash_keys(base, {c}));
    const auto perm = permutation(n, rng);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t idx = members[perm[k]];
      if (k < n_train) train.push_back(idx);
      else if (k < n_train + n_probe) probe.push_back(idx);
      else test.push_back(idx);
    }
  }
  std::sort(train.begin(), train.end());
  std::sort(probe.begin(), probe.end());
  std::sort(test.begin(), test.end());
  return {ds.subset(train), ds.subset(probe), ds.subset(test)};
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::Writer out;
  out.magic(kDatasetMagic);
  out.u32(kDatasetVersion);
  out.u32(static_cast<std::uint32_t>(ds.classes));
  out.u32(static_cast<std::uint32_t>(ds.vocab));
  out.u32(static_cast<std::uint32_t>(ds.seq_len));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out.u32(static_cast<std::uint32_t>(ds.sequences[i].size()));
    for (const int t : ds.sequences[i]) out.u32(static_cast<std::uint32_t>(t));
    out.u32(static_cast<std::uint32_t>(ds.labels[i]));
  }
  out.save(path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  auto in = io::Reader::open(path);
  in.expect_magic(kDatasetMagic);
  if (const auto v = in.u32(); v != kDatasetVersion) {
    throw FormatError(path.string() + ": unsupported dataset version " + std::to_string(v));
  }
  Dataset ds;
  ds.classes = static_cast<int>(in.u32());
  ds.vocab = static_cast<int>(in.u32());
  ds.seq_len = static_cast<int>(in.u32());
  while (!in.at_end()) {
    const std::uint32_t len = in.u32();
    if (std::size_t(len) * 4 + 4 > in.remaining()) throw FormatError(path.string() + ": truncated sample");
    Tokens seq(len);
    for (auto& t : seq) {
      t = static_cast<int>(in.u32());
      if (t >= ds.vocab) throw FormatError(path.string() + ": token id out of vocabulary");
    }
    const auto label = static_cast<int>(in.u32());
    if (label >= ds.classes) throw FormatError(path.string() + ": label out of range");
    ds.sequences.push_back(std::move(seq));
    ds.labels.push_back(label);
  }
  return ds;
}

}  // namespace synapse
