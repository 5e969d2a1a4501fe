#pragma once

// Brute-force classification metrics, kept independent of src/eval.cpp.

#include <vector>

namespace synapse::testing {

struct OracleReport {
  std::vector<double> f1;
  double macro = 0, weighted = 0, accuracy = 0;
};

// Per-class TP/FP/FN tallied with one full scan per class.
inline OracleReport metrics_oracle(const std::vector<int>& t, const std::vector<int>& p, int C) {
  OracleReport o;
  const double n = double(t.size());
  int present = 0;
  long correct = 0;
  for (std::size_t i = 0; i < t.size(); ++i) correct += t[i] == p[i];
  o.accuracy = double(correct) / n;
  for (int c = 0; c < C; ++c) {
    long tp = 0, fp = 0, fn = 0, support = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i] == c && p[i] == c) ++tp;
      if (t[i] != c && p[i] == c) ++fp;
      if (t[i] == c && p[i] != c) ++fn;
      if (t[i] == c) ++support;
    }
    const double prec = tp + fp == 0 ? 0.0 : double(tp) / double(tp + fp);
    const double rec = tp + fn == 0 ? 0.0 : double(tp) / double(tp + fn);
    const double f1 = prec + rec == 0 ? 0.0 : 2.0 * prec * rec / (prec + rec);
    o.f1.push_back(f1);
    if (support > 0) {
      o.macro += f1;
      ++present;
    }
    o.weighted += double(support) / n * f1;
  }
  o.macro /= present;
  return o;
}

}  // namespace synapse::testing
