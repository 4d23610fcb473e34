#include "cpf/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace cpf {

namespace {

const std::vector<std::pair<std::string, std::string>>& default_pairs() {
  static const std::vector<std::pair<std::string, std::string>> d{
      {"mode", "single"},
      {"dataset", "circle"},
      {"dataset_path", ""},
      {"points", "2048"},
      {"noise", "0.02"},
      {"objects", "200"},
      {"dim", "2"},
      {"charts", "4"},
      {"tau", "0.1"},
      {"mu", "0.05"},
      {"lambda", "1.1"},
      {"width_scale", "0.25"},
      {"feature_dim", "8"},
      {"flow_blocks", "9"},
      {"prior_blocks", "3"},
      {"prior_backend", "discrete"},
      {"cnf_steps", "20"},
      {"batch_size", "100"},
      {"train_points", "128"},
      {"iterations", "5000"},
      {"lr", "0.001"},
      {"beta1", "0.9"},
      {"beta2", "0.999"},
      {"adam_eps", "1e-08"},
      {"lr_decay", "0.25"},
      {"lr_decay_period", "5000"},
      {"clip_norm", "10"},
      {"seed", "0"},
      {"log_every", "100"},
      {"checkpoint_every", "0"},
      {"checkpoint", "model.cpf"},
      {"loss_csv", "loss.csv"},
  };
  return d;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string suggest_key(const std::string& unknown) {
  std::string best;
  std::size_t best_d = 3;
  for (const auto& k : Config::keys()) {
    const std::size_t d = edit_distance(unknown, k);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

Config Config::defaults() {
  Config c;
  for (const auto& [k, v] : default_pairs()) c.values_[k] = v;
  return c;
}

const std::vector<std::string>& Config::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& p : default_pairs()) out.push_back(p.first);
    return out;
  }();
  return k;
}

void Config::set(const std::string& key, const std::string& value) {
  if (!values_.count(key)) {
    const std::string s = suggest_key(key);
    throw UsageError("unknown config key '" + key + "'" + (s.empty() ? "" : " (did you mean '" + s + "'?)"));
  }
  values_[key] = value;
}

void Config::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw UsageError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Config::parse(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    try {
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const UsageError& e) {
      throw UsageError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void Config::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  parse(ss.str(), path.string());
}

const std::string& Config::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
  return it->second;
}

double Config::get_double(const std::string& key) const {
  const std::string& s = get(key);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw UsageError("config key '" + key + "' expects a number, got '" + s + "'");
  return v;
}

std::uint64_t Config::get_u64(const std::string& key) const {
  const std::string& s = get(key);
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw UsageError("config key '" + key + "' expects a nonnegative integer, got '" + s + "'");
  return v;
}

ModelConfig Config::model_config() const {
  ModelConfig m;
  m.mode = get("mode");
  m.dim = get_size("dim");
  m.charts = get_size("charts");
  m.tau = get_double("tau");
  m.mu = get_double("mu");
  m.lambda = get_double("lambda");
  m.width_scale = get_double("width_scale");
  m.flow_blocks = get_size("flow_blocks");
  m.feature_dim = get_size("feature_dim");
  m.prior_blocks = get_size("prior_blocks");
  m.prior_backend = get("prior_backend");
  m.cnf_steps = get_size("cnf_steps");
  m.seed = get_u64("seed");
  try {
    m.validate();
  } catch (const UsageError&) {
    throw;
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  return m;
}

TrainConfig Config::train_config() const {
  TrainConfig t;
  t.mode = get("mode");
  t.batch_size = get_size("batch_size");
  t.points_per_cloud = get_size("train_points");
  t.iterations = get_size("iterations");
  t.lr = get_double("lr");
  t.beta1 = get_double("beta1");
  t.beta2 = get_double("beta2");
  t.adam_eps = get_double("adam_eps");
  t.lr_decay = get_double("lr_decay");
  t.lr_decay_period = get_size("lr_decay_period");
  t.clip_norm = get_double("clip_norm");
  // Training draws from a stream distinct from parameter initialization.
  t.seed = Rng(get_u64("seed")).split(1).next_u64();
  t.log_every = get_size("log_every");
  t.checkpoint_every = get_size("checkpoint_every");
  t.checkpoint = get("checkpoint");
  t.loss_csv = get("loss_csv");
  try {
    t.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  return t;
}

SyntheticSpec Config::dataset_spec() const {
  SyntheticSpec s;
  s.kind = get("dataset");
  const auto& kinds = synthetic_kinds();
  if (std::find(kinds.begin(), kinds.end(), s.kind) == kinds.end())
    throw UsageError("config key 'dataset': unknown dataset '" + s.kind + "'");
  s.points = get_size("points");
  s.noise = get_double("noise");
  s.seed = Rng(get_u64("seed")).split(2).next_u64();
  s.dim = get_size("dim");
  if (s.points < 1) throw UsageError("config key 'points' must be at least 1");
  if (s.noise < 0.0) throw UsageError("config key 'noise' must be nonnegative");
  return s;
}

}  // namespace cpf
