#include "cpf/commands.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>

#include "cpf/config.hpp"
#include "cpf/metrics.hpp"
#include "cpf/svg.hpp"

namespace cpf {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string cloud_name(std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "cloud_%04zu.%s", i, ext);
  return buf;
}

std::vector<PointCloud> load_clouds(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw UsageError(what + " '" + p.string() + "' does not exist");
  if (fs::is_directory(p)) return read_dataset(p);
  return {read_cloud(p)};
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  Config cfg = Config::defaults();
  std::string path = a.config;
  if (path.empty())
    if (const char* env = std::getenv("CPF_CONFIG")) path = env;
  if (!path.empty()) cfg.load_file(path);
  for (const auto& s : a.sets) cfg.set_assignment(s);
  if (a.seed) cfg.set("seed", std::to_string(*a.seed));

  const ModelConfig mc = cfg.model_config();
  const TrainConfig tc = cfg.train_config();
  const std::string dataset_path = cfg.get("dataset_path");
  std::vector<PointCloud> data;
  if (!dataset_path.empty()) {
    if (!fs::exists(dataset_path))
      throw UsageError("config key 'dataset_path': '" + dataset_path + "' does not exist");
    data = load_clouds(dataset_path, "dataset_path");
    if (data.empty()) throw UsageError("config key 'dataset_path': no clouds in '" + dataset_path + "'");
    for (const auto& c : data)
      if (c.dim != mc.dim)
        throw UsageError("config key 'dataset_path': clouds have dimension " + std::to_string(c.dim) +
                         " but dim = " + std::to_string(mc.dim));
  } else {
    SyntheticSpec spec = cfg.dataset_spec();
    const bool family = spec.kind == "ring-or-disk-family" || spec.kind == "ellipse-family";
    if (mc.mode == "full") {
      if (!family) throw UsageError("config key 'dataset': full mode needs a family dataset");
      data = generate_family(spec, cfg.get_size("objects")).clouds;
    } else {
      data = {generate_synthetic(spec)};
    }
  }

  auto report = [&out](const LossRecord& r) {
    out << "iteration " << r.iteration << " loss " << fmt(r.loss) << " lr " << fmt(r.lr) << '\n';
  };
  TrainResult res;
  if (mc.mode == "single") {
    SingleCloudModel model(mc);
    res = train_single(model, data.front(), tc, report);
  } else {
    FullModel model(mc);
    res = train_full(model, data, tc, report);
  }
  out << "trained " << tc.iterations << " iterations, loss " << fmt(res.initial_loss) << " -> "
      << fmt(res.final_loss) << " per point\n";
  if (!tc.checkpoint.empty()) out << "checkpoint: " << tc.checkpoint.string() << '\n';
  return kExitOk;
}

// ---- generate / reconstruct ----------------------------------------------

int cmd_generate(const std::string& ckpt, std::size_t points, std::size_t count, std::uint64_t seed,
                 const std::string& out_dir, bool svg, std::ostream& out) {
  LoadedModel m = load_model(ckpt);
  if (count == 0) return kExitOk;
  if (points == 0) throw UsageError("--points must be at least 1");
  Rng base(seed);
  std::vector<PointCloud> clouds;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = base.split(i);
    clouds.push_back(m.single ? m.single->generate(points, rng) : m.full->generate(points, rng));
  }
  write_dataset(out_dir, clouds);
  if (svg)
    for (std::size_t i = 0; i < clouds.size(); ++i)
      write_svg(fs::path(out_dir) / cloud_name(i, "svg"), read_cloud(fs::path(out_dir) / cloud_name(i, "csv")));
  out << "wrote " << count << " clouds to " << out_dir << '\n';
  return kExitOk;
}

int cmd_reconstruct(const std::string& ckpt, const std::string& input, std::size_t points, std::uint64_t seed,
                    const std::string& out_path, std::ostream& out) {
  LoadedModel m = load_model(ckpt);
  if (!m.full) throw UsageError("reconstruct needs a full-model checkpoint");
  auto clouds = load_clouds(input, "--input");
  Rng base(seed);
  std::vector<PointCloud> result;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    Rng rng = base.split(i);
    const std::size_t n = points == 0 ? clouds[i].size() : points;
    result.push_back(m.full->reconstruct(clouds[i], n, rng));
  }
  if (fs::is_directory(input)) {
    write_dataset(out_path, result);
  } else {
    write_cloud(out_path, result.front());
  }
  out << "reconstructed " << result.size() << " clouds\n";
  return kExitOk;
}

// ---- evaluate -------------------------------------------------------------

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_evaluate(const std::string& gen_dir, const std::string& ref_dir, const std::string& metrics,
                 const std::string& distances, const std::string& out_path, std::ostream& out, std::ostream& err) {
  if (!fs::is_directory(gen_dir)) throw UsageError("--gen '" + gen_dir + "' is not a directory");
  if (!fs::is_directory(ref_dir)) throw UsageError("--ref '" + ref_dir + "' is not a directory");
  const auto gen = read_dataset(gen_dir);
  const auto ref = read_dataset(ref_dir);
  if (gen.empty() || ref.empty()) throw UsageError("evaluate: empty cloud set");
  std::vector<CloudDistance> kinds;
  for (const auto& d : split_list(distances)) {
    try {
      kinds.push_back(parse_cloud_distance(d));
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  std::ostringstream report;
  report << "metric,distance,value,exact\n";
  auto equal_m = [&](const char* metric) {
    const std::size_t m = gen.front().size();
    for (const auto* set : {&gen, &ref})
      for (const auto& c : *set)
        if (c.size() != m)
          throw ShapeError(std::string(metric) + ": clouds must share one point count (" + std::to_string(m) +
                           " vs " + std::to_string(c.size()) + ")");
  };
  for (const auto& metric : split_list(metrics)) {
    if (metric == "mmd-cov") {
      for (auto k : kinds) {
        if (k == CloudDistance::emd) equal_m("MMD/COV");
        MmdCov r = mmd_cov(gen, ref, k);
        report << "MMD," << to_string(k) << ',' << fmt(r.mmd) << ',' << (r.exact ? "exact" : "approximate") << '\n';
        report << "COV," << to_string(k) << ',' << fmt(r.cov) << ',' << (r.exact ? "exact" : "approximate") << '\n';
      }
    } else if (metric == "1-nna") {
      if (gen.size() != ref.size())
        throw ShapeError("1-NNA: generated and reference sets need equal cloud counts (" +
                         std::to_string(gen.size()) + " vs " + std::to_string(ref.size()) + ")");
      for (auto k : kinds) {
        if (k == CloudDistance::emd) equal_m("1-NNA");
        SetMetric r = one_nn_accuracy(gen, ref, k);
        report << "1-NNA," << to_string(k) << ',' << fmt(r.value) << ',' << (r.exact ? "exact" : "approximate")
               << '\n';
      }
    } else if (metric == "jsd") {
      JsdResult r = jsd(gen, ref);
      if (r.clipped) err << "jsd: " << r.clipped << " points outside [-1, 1] counted in boundary bins\n";
      report << "JSD,none," << fmt(r.value) << ",exact\n";
    } else {
      throw UsageError("unknown metric '" + metric + "' (expected mmd-cov, 1-nna, jsd)");
    }
  }
  if (out_path.empty()) {
    out << report.str();
  } else {
    std::ofstream f(out_path);
    if (!f) throw Error("cannot write '" + out_path + "'");
    f << report.str();
    out << "wrote " << out_path << '\n';
  }
  return kExitOk;
}

// ---- segment / plot -------------------------------------------------------

int cmd_segment(const std::string& ckpt, const std::string& input, const std::string& out_path, std::ostream& out) {
  LoadedModel m = load_model(ckpt);
  PointCloud cloud = read_cloud(input);
  if (cloud.dim != m.config.dim)
    throw ShapeError("segment: '" + input + "' has dimension " + std::to_string(cloud.dim) +
                     ", checkpoint expects " + std::to_string(m.config.dim));
  std::vector<int> pred;
  if (m.full) {
    pred = m.full->segment(cloud);
  } else {
    NoGradScope no_grad;
    Tensor lp = m.single->log_probs(cloud.to_tensor());
    const std::size_t n = m.config.charts;
    pred.resize(cloud.size());
    auto v = lp.values();
    for (std::size_t i = 0; i < pred.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < n; ++j)
        if (v[i * n + j] > v[i * n + best]) best = j;
      pred[i] = static_cast<int>(best);
    }
  }
  const std::vector<int> truth = cloud.labels;
  PointCloud labeled = cloud;
  labeled.labels = pred;
  write_cloud(out_path, labeled);
  if (!truth.empty()) {
    ClusteringScores s = clustering_scores(pred, truth);
    out << "NMI " << fmt(s.nmi) << "\nPUR " << fmt(s.purity) << '\n';
  }
  return kExitOk;
}

int cmd_plot(const std::string& input, const std::string& out_path, std::ostream& out) {
  if (!fs::exists(input)) throw UsageError("--input '" + input + "' does not exist");
  write_svg(out_path, read_cloud(input));
  out << "wrote " << out_path << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Chart-conditioned normalizing flows for point clouds"};
  app.require_subcommand(1);

  TrainArgs train;
  std::uint64_t seed_value = 0;
  auto* tr = app.add_subcommand("train", "Train a model from a config file");
  tr->add_option("--config", train.config, "Config file (default: $CPF_CONFIG)");
  tr->add_option("--set", train.sets, "Override a config key: key=value");
  auto* seed_opt = tr->add_option("--seed", seed_value, "Override the seed");

  std::string ckpt, out_dir, input, out_path, gen_dir, ref_dir;
  std::string metrics = "mmd-cov,1-nna,jsd", distances = "EMD,CD";
  std::size_t points = 2048, count = 1;
  std::uint64_t seed = 0;
  bool no_svg = false;

  auto* gen = app.add_subcommand("generate", "Sample clouds from a checkpoint");
  gen->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  gen->add_option("--points", points, "Points per cloud");
  gen->add_option("--count", count, "Number of clouds");
  gen->add_option("--seed", seed, "Sampling seed");
  gen->add_option("--out-dir", out_dir, "Output directory")->required();
  gen->add_flag("--no-svg", no_svg, "Skip SVG plots");

  std::size_t rec_points = 0;
  auto* rec = app.add_subcommand("reconstruct", "Reconstruct clouds through the encoder");
  rec->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  rec->add_option("--input", input, "Cloud CSV or dataset directory")->required();
  rec->add_option("--points", rec_points, "Output points per cloud (0: same as input)");
  rec->add_option("--seed", seed, "Sampling seed");
  rec->add_option("--out", out_path, "Output CSV or directory")->required();

  auto* ev = app.add_subcommand("evaluate", "Compare generated and reference clouds");
  ev->add_option("--gen", gen_dir, "Generated dataset directory")->required();
  ev->add_option("--ref", ref_dir, "Reference dataset directory")->required();
  ev->add_option("--metrics", metrics, "Comma list of mmd-cov, 1-nna, jsd");
  ev->add_option("--distances", distances, "Comma list of EMD, CD");
  ev->add_option("--out", out_path, "Report CSV (default: stdout)");

  auto* seg = app.add_subcommand("segment", "Assign each point to a chart");
  seg->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  seg->add_option("--input", input, "Cloud CSV")->required();
  seg->add_option("--out", out_path, "Labeled CSV")->required();

  auto* plot = app.add_subcommand("plot", "Render a cloud CSV as SVG");
  plot->add_option("--input", input, "Cloud CSV")->required();
  plot->add_option("--out", out_path, "SVG file")->required();

  std::vector<const char*> argv{"cpf"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (tr->parsed()) {
      if (seed_opt->count() > 0) train.seed = seed_value;
      return cmd_train(train, out);
    }
    if (gen->parsed()) return cmd_generate(ckpt, points, count, seed, out_dir, !no_svg, out);
    if (rec->parsed()) return cmd_reconstruct(ckpt, input, rec_points, seed, out_path, out);
    if (ev->parsed()) return cmd_evaluate(gen_dir, ref_dir, metrics, distances, out_path, out, err);
    if (seg->parsed()) return cmd_segment(ckpt, input, out_path, out);
    if (plot->parsed()) return cmd_plot(input, out_path, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace cpf
