#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "signdyn/common.hpp"

namespace signdyn {

// Signal-plus-sparse-noise binary classification data. Each sample has L
// patches: L/2 copies of y*mu (mu = e1, unit norm) at random positions and
// L/2 independent s-sparse Gaussian noise patches.
struct DataConfig {
  int d = 0;            // ambient dimension
  int s = 0;            // nonzero coordinates per noise patch
  int n = 0;            // sample count
  int L = 2;            // patches per sample, even
  double sigma_p = 0.0; // noise standard deviation
  bool orthogonal = true; // noise support drawn from {2..d} instead of {1..d}
  // Supports carved from one seeded permutation, so they are pairwise
  // disjoint by construction (requires n * L/2 * s free coordinates). With
  // false, each patch samples its support independently; at dense sparsity
  // levels (s^2 n^2 >> d) independent supports collide almost surely.
  bool disjoint_supports = false;
  uint64_t seed = 0;

  void validate() const;
};

// A patch stored sparsely: parallel (coordinate, value) arrays, indices sorted.
struct Patch {
  std::vector<int> idx;
  std::vector<double> val;

  double dot_dense(const std::vector<double>& w) const {
    double acc = 0.0;
    for (size_t k = 0; k < idx.size(); ++k) acc += w[idx[k]] * val[k];
    return acc;
  }
  double dot_row(const Matrix& m, int row) const {
    const double* w = m.row_ptr(row);
    double acc = 0.0;
    for (size_t k = 0; k < idx.size(); ++k) acc += w[idx[k]] * val[k];
    return acc;
  }
  double l1() const {
    double acc = 0.0;
    for (double v : val) acc += std::abs(v);
    return acc;
  }
  double l2sq() const {
    double acc = 0.0;
    for (double v : val) acc += v * v;
    return acc;
  }
};

struct Sample {
  int y = 1;                          // label in {-1, +1}
  std::vector<Patch> patches;         // size L, column order
  std::vector<int> signal_positions;  // sorted patch indices holding y*mu

  bool is_signal(int patch) const {
    for (int p : signal_positions)
      if (p == patch) return true;
    return false;
  }
  // Patch indices that are noise, in order.
  std::vector<int> noise_positions() const {
    std::vector<int> out;
    for (int p = 0; p < static_cast<int>(patches.size()); ++p)
      if (!is_signal(p)) out.push_back(p);
    return out;
  }
  // The first noise patch (the only one when L = 2).
  int first_noise_position() const { return noise_positions().front(); }
};

struct Dataset {
  DataConfig config;
  std::vector<Sample> samples;
};

struct NoiseNormStats {
  int sample = 0;
  int patch = 0;
  double l1 = 0.0;
  double l2sq = 0.0;
};

Dataset generate_dataset(const DataConfig& config);

// Sample i of the stream defined by config; generate_dataset(config).samples[i]
// without materializing the rest (substreams are index-derived).
Sample generate_sample_at(const DataConfig& config, int i);

// True iff the supports of all noise patches (across samples and patches) are
// pairwise disjoint.
bool supports_disjoint(const Dataset& dataset);

// Exact l1 and squared-l2 norms of every noise patch.
std::vector<NoiseNormStats> noise_norm_stats(const Dataset& dataset);

// Fraction of configs whose generated dataset has <mu, xi> = 0 for every
// noise patch.
double signal_orthogonality_rate(const std::vector<DataConfig>& configs);

// JSONL export/import: header line with the DataConfig, then one record per
// sample (label, signal positions, sparse noise entries).
void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace signdyn
