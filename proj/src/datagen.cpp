#include "signdyn/datagen.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "json.hpp"

namespace signdyn {

using nlohmann::json;

namespace {

// Substream purposes; keep the numbering stable, it is part of the format.
enum StreamPurpose : uint64_t {
  kLabel = 1,
  kPositions = 2,
  kNoise = 3,
  kSupportPerm = 4,
};

// Uniform s-subset of {lo, ..., d-1} by partial Fisher-Yates, returned sorted.
std::vector<int> sample_support(Rng& rng, int d, int s, int lo) {
  std::vector<int> pool(d - lo);
  std::iota(pool.begin(), pool.end(), lo);
  for (int k = 0; k < s; ++k) {
    const int j = k + static_cast<int>(rng.next_below(pool.size() - k));
    std::swap(pool[k], pool[j]);
  }
  std::vector<int> out(pool.begin(), pool.begin() + s);
  std::sort(out.begin(), out.end());
  return out;
}

// Disjoint mode: noise patch `ordinal` takes the slice
// [ordinal*s, ordinal*s + s) of one shared permutation of the allowed
// coordinates. Every sample can rebuild the permutation from the seed alone,
// so parallel generation stays order-independent.
std::vector<int> disjoint_support(const DataConfig& cfg, int ordinal, int lo) {
  Rng rng(derive_seed(cfg.seed, kSupportPerm));
  std::vector<int> pool(cfg.d - lo);
  std::iota(pool.begin(), pool.end(), lo);
  const int need = (ordinal + 1) * cfg.s;
  if (need > static_cast<int>(pool.size()))
    throw config_error("disjoint supports exhausted: patch ordinal " + std::to_string(ordinal));
  for (int k = 0; k < need; ++k) {
    const int j = k + static_cast<int>(rng.next_below(pool.size() - k));
    std::swap(pool[k], pool[j]);
  }
  std::vector<int> out(pool.begin() + ordinal * cfg.s, pool.begin() + need);
  std::sort(out.begin(), out.end());
  return out;
}

Sample generate_sample(const DataConfig& cfg, int i) {
  Sample sample;
  {
    Rng rng(derive_seed(cfg.seed, kLabel, static_cast<uint64_t>(i)));
    sample.y = rng.rademacher();
  }
  {
    Rng rng(derive_seed(cfg.seed, kPositions, static_cast<uint64_t>(i)));
    std::vector<int> pos(cfg.L);
    std::iota(pos.begin(), pos.end(), 0);
    for (int k = 0; k < cfg.L / 2; ++k) {
      const int j = k + static_cast<int>(rng.next_below(pos.size() - k));
      std::swap(pos[k], pos[j]);
    }
    sample.signal_positions.assign(pos.begin(), pos.begin() + cfg.L / 2);
    std::sort(sample.signal_positions.begin(), sample.signal_positions.end());
  }
  sample.patches.resize(cfg.L);
  const int lo = cfg.orthogonal ? 1 : 0;
  int noise_ordinal = i * (cfg.L / 2);
  for (int p = 0; p < cfg.L; ++p) {
    if (sample.is_signal(p)) {
      sample.patches[p].idx = {0};
      sample.patches[p].val = {static_cast<double>(sample.y)};
      continue;
    }
    Rng rng(derive_seed(cfg.seed, kNoise, static_cast<uint64_t>(i), static_cast<uint64_t>(p)));
    Patch& patch = sample.patches[p];
    patch.idx = cfg.disjoint_supports ? disjoint_support(cfg, noise_ordinal++, lo)
                                      : sample_support(rng, cfg.d, cfg.s, lo);
    patch.val.resize(cfg.s);
    for (int k = 0; k < cfg.s; ++k) patch.val[k] = cfg.sigma_p * rng.next_gaussian();
  }
  return sample;
}

}  // namespace

void DataConfig::validate() const {
  if (d < 1) throw config_error("data config: d must be >= 1");
  const int s_max = orthogonal ? d - 1 : d;
  if (s < 1 || s > s_max)
    throw config_error("data config: s must satisfy 1 <= s <= " + std::to_string(s_max) +
                       (orthogonal ? " (orthogonal)" : ""));
  if (n < 1) throw config_error("data config: n must be >= 1");
  if (L < 2 || L % 2 != 0) throw config_error("data config: L must be even and >= 2");
  if (!(sigma_p > 0.0)) throw config_error("data config: sigma_p must be > 0");
  if (disjoint_supports && static_cast<long>(n) * (L / 2) * s > s_max)
    throw config_error("data config: disjoint supports need n*L/2*s <= " +
                       std::to_string(s_max));
}

Dataset generate_dataset(const DataConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  ds.samples.reserve(config.n);
  for (int i = 0; i < config.n; ++i) ds.samples.push_back(generate_sample(config, i));
  return ds;
}

Sample generate_sample_at(const DataConfig& config, int i) {
  config.validate();
  if (i < 0) throw config_error("generate_sample_at: negative index");
  return generate_sample(config, i);
}

bool supports_disjoint(const Dataset& dataset) {
  std::unordered_set<int> seen;
  for (const Sample& sample : dataset.samples) {
    for (int p : sample.noise_positions()) {
      for (int coord : sample.patches[p].idx) {
        if (!seen.insert(coord).second) return false;
      }
    }
  }
  return true;
}

std::vector<NoiseNormStats> noise_norm_stats(const Dataset& dataset) {
  std::vector<NoiseNormStats> out;
  for (int i = 0; i < static_cast<int>(dataset.samples.size()); ++i) {
    const Sample& sample = dataset.samples[i];
    for (int p : sample.noise_positions()) {
      out.push_back({i, p, sample.patches[p].l1(), sample.patches[p].l2sq()});
    }
  }
  return out;
}

double signal_orthogonality_rate(const std::vector<DataConfig>& configs) {
  if (configs.empty()) return 0.0;
  int hits = 0;
  for (const DataConfig& cfg : configs) {
    const Dataset ds = generate_dataset(cfg);
    bool orthogonal_everywhere = true;
    for (const Sample& sample : ds.samples) {
      for (int p : sample.noise_positions()) {
        const Patch& patch = sample.patches[p];
        // mu = e1, so orthogonality is "coordinate 0 absent from the support".
        if (!patch.idx.empty() && patch.idx.front() == 0 && patch.val.front() != 0.0) {
          orthogonal_everywhere = false;
          break;
        }
      }
      if (!orthogonal_everywhere) break;
    }
    if (orthogonal_everywhere) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(configs.size());
}

namespace {

json config_to_json(const DataConfig& c) {
  return json{{"d", c.d},
              {"s", c.s},
              {"n", c.n},
              {"L", c.L},
              {"sigma_p", c.sigma_p},
              {"orthogonal", c.orthogonal},
              {"disjoint_supports", c.disjoint_supports},
              {"seed", c.seed}};
}

DataConfig config_from_json(const json& j) {
  DataConfig c;
  c.d = j.at("d").get<int>();
  c.s = j.at("s").get<int>();
  c.n = j.at("n").get<int>();
  c.L = j.at("L").get<int>();
  c.sigma_p = j.at("sigma_p").get<double>();
  c.orthogonal = j.at("orthogonal").get<bool>();
  c.disjoint_supports = j.value("disjoint_supports", false);
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path);
  out << json{{"data_config", config_to_json(dataset.config)}}.dump() << "\n";
  for (const Sample& sample : dataset.samples) {
    json rec;
    rec["y"] = sample.y;
    rec["signal_positions"] = sample.signal_positions;
    json noise = json::array();
    for (int p : sample.noise_positions()) {
      const Patch& patch = sample.patches[p];
      json entries = json::array();
      for (size_t k = 0; k < patch.idx.size(); ++k)
        entries.push_back(json::array({patch.idx[k], patch.val[k]}));
      noise.push_back(json{{"patch", p}, {"entries", entries}});
    }
    rec["noise"] = noise;
    out << rec.dump() << "\n";
  }
  if (!out) throw io_error("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(in, line)) throw io_error("empty dataset file: " + path);
  Dataset ds;
  ds.config = config_from_json(json::parse(line).at("data_config"));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json rec = json::parse(line);
    Sample sample;
    sample.y = rec.at("y").get<int>();
    sample.signal_positions = rec.at("signal_positions").get<std::vector<int>>();
    sample.patches.resize(ds.config.L);
    for (int p : sample.signal_positions) {
      sample.patches[p].idx = {0};
      sample.patches[p].val = {static_cast<double>(sample.y)};
    }
    for (const json& np : rec.at("noise")) {
      const int p = np.at("patch").get<int>();
      Patch& patch = sample.patches[p];
      for (const json& e : np.at("entries")) {
        patch.idx.push_back(e.at(0).get<int>());
        patch.val.push_back(e.at(1).get<double>());
      }
    }
    ds.samples.push_back(std::move(sample));
  }
  if (static_cast<int>(ds.samples.size()) != ds.config.n)
    throw io_error("dataset file truncated: expected " + std::to_string(ds.config.n) +
                   " samples, found " + std::to_string(ds.samples.size()));
  return ds;
}

}  // namespace signdyn
