#include "cpf/data.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace cpf {

namespace fs = std::filesystem;

Tensor PointCloud::to_tensor() const { return Tensor::from(size(), dim, coords); }

PointCloud PointCloud::from_tensor(const Tensor& t, std::vector<int> labels) {
  PointCloud c;
  c.dim = t.cols();
  c.coords.assign(t.values().begin(), t.values().end());
  c.labels = std::move(labels);
  return c;
}

const std::vector<std::string>& synthetic_kinds() {
  static const std::vector<std::string> kinds{"circle",      "2sines",         "four-circle",
                                              "double-moon", "ellipse-family", "ring-or-disk-family"};
  return kinds;
}

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kTruncation = 3.0;

// Isotropic Gaussian noise with norm at most 3 sigma.
void add_noise(double* p, std::size_t dim, double sigma, Rng& rng) {
  if (sigma <= 0.0) return;
  double v[3];
  for (;;) {
    double norm2 = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      v[k] = sigma * rng.normal();
      norm2 += v[k] * v[k];
    }
    if (norm2 <= kTruncation * kTruncation * sigma * sigma) break;
  }
  for (std::size_t k = 0; k < dim; ++k) p[k] += v[k];
}

void normalize(PointCloud& c, double half_extent, double sigma) {
  const double s = 1.0 / (half_extent + kTruncation * std::max(sigma, 0.0));
  for (double& v : c.coords) v = std::clamp(v * s, -1.0, 1.0);
}

void check_spec(const SyntheticSpec& spec) {
  if (spec.points == 0) throw Error("dataset: point count must be at least 1");
  if (spec.noise < 0.0) throw Error("dataset: noise must be nonnegative");
  if (spec.dim != 2 && spec.dim != 3) throw Error("dataset: dimension must be 2 or 3");
}

}  // namespace

double circle_radius(double noise) { return 1.0 / (1.0 + kTruncation * noise); }
double double_moon_scale(double noise) { return 1.0 / (1.5 + kTruncation * noise); }
double double_moon_gap_half_width(double noise) { return (0.5 - kTruncation * noise) * double_moon_scale(noise); }
double family_scale(const SyntheticSpec& spec) { return 1.0 / (1.0 + kTruncation * spec.noise); }

PointCloud generate_synthetic(const SyntheticSpec& spec) {
  check_spec(spec);
  if (spec.kind == "ring-or-disk-family" || spec.kind == "ellipse-family") {
    Rng rng(spec.seed);
    return sample_family_member(spec, FamilyParams{}, rng);
  }
  if (spec.dim != 2) throw Error("dataset: " + spec.kind + " is two-dimensional");
  Rng rng(spec.seed);
  PointCloud c;
  c.dim = 2;
  c.coords.resize(spec.points * 2);
  c.labels.resize(spec.points);
  double extent = 1.0;
  for (std::size_t i = 0; i < spec.points; ++i) {
    double* p = &c.coords[i * 2];
    int label = 0;
    if (spec.kind == "circle") {
      const double th = 2.0 * kPi * rng.uniform();
      p[0] = std::cos(th);
      p[1] = std::sin(th);
    } else if (spec.kind == "2sines") {
      const double x = 2.0 * rng.uniform() - 1.0;
      label = static_cast<int>(rng.below(2));
      p[0] = x;
      p[1] = (label == 0 ? 1.0 : -1.0) * std::sin(kPi * x);
    } else if (spec.kind == "four-circle") {
      label = static_cast<int>(rng.below(4));
      const double cx = (label % 2 == 0) ? -0.4 : 0.4;
      const double cy = (label / 2 == 0) ? -0.4 : 0.4;
      const double th = 2.0 * kPi * rng.uniform();
      p[0] = cx + 0.5 * std::cos(th);
      p[1] = cy + 0.5 * std::sin(th);
      extent = 0.9;
    } else if (spec.kind == "double-moon") {
      label = static_cast<int>(rng.below(2));
      const double th = kPi * rng.uniform();
      if (label == 0) {
        p[0] = std::cos(th) - 0.5;
        p[1] = std::sin(th) + 0.5;
      } else {
        p[0] = 0.5 - std::cos(th);
        p[1] = -std::sin(th) - 0.5;
      }
      extent = 1.5;
    } else {
      throw Error("dataset: unknown kind '" + spec.kind + "'");
    }
    add_noise(p, 2, spec.noise, rng);
    c.labels[i] = label;
  }
  normalize(c, extent, spec.noise);
  return c;
}

PointCloud sample_family_member(const SyntheticSpec& spec, const FamilyParams& params, Rng& rng) {
  check_spec(spec);
  const std::size_t d = spec.dim;
  PointCloud c;
  c.dim = d;
  c.coords.resize(spec.points * d);
  c.labels.assign(spec.points, 0);
  for (std::size_t i = 0; i < spec.points; ++i) {
    double* p = &c.coords[i * d];
    if (spec.kind == "ring-or-disk-family") {
      if (d != 2) throw Error("dataset: ring-or-disk-family is two-dimensional");
      const double r0 = params.ring ? params.inner_ratio : 0.0;
      // Uniform over the annulus area.
      const double r = std::sqrt(r0 * r0 + (1.0 - r0 * r0) * rng.uniform());
      const double th = 2.0 * kPi * rng.uniform();
      p[0] = r * std::cos(th);
      p[1] = r * std::sin(th);
    } else if (spec.kind == "ellipse-family") {
      if (d == 2) {
        const double th = 2.0 * kPi * rng.uniform();
        p[0] = std::cos(th);
        p[1] = params.axis_b * std::sin(th);
      } else {
        double g[3], n2 = 0.0;
        do {
          n2 = 0.0;
          for (double& v : g) {
            v = rng.normal();
            n2 += v * v;
          }
        } while (n2 < 1e-12);
        const double inv = 1.0 / std::sqrt(n2);
        p[0] = g[0] * inv;
        p[1] = params.axis_b * g[1] * inv;
        p[2] = params.axis_c * g[2] * inv;
      }
    } else {
      throw Error("dataset: '" + spec.kind + "' is not a family kind");
    }
    add_noise(p, d, spec.noise, rng);
  }
  normalize(c, 1.0, spec.noise);
  return c;
}

Family generate_family(const SyntheticSpec& spec, std::size_t count, const FamilyRanges& ranges) {
  if (count < 2) throw Error("dataset: a family needs at least 2 objects");
  if (spec.kind != "ring-or-disk-family" && spec.kind != "ellipse-family")
    throw Error("dataset: '" + spec.kind + "' is not a family kind");
  Rng shapes(spec.seed);
  Family f;
  for (std::size_t i = 0; i < count; ++i) {
    FamilyParams p;
    if (!ranges.fixed) {
      p.ring = (i % 2 == 0);
      p.inner_ratio = ranges.inner_min + (ranges.inner_max - ranges.inner_min) * shapes.uniform();
      p.axis_b = ranges.axis_min + (ranges.axis_max - ranges.axis_min) * shapes.uniform();
      p.axis_c = ranges.axis_min + (ranges.axis_max - ranges.axis_min) * shapes.uniform();
    }
    Rng pts = shapes.split(i);
    f.clouds.push_back(sample_family_member(spec, p, pts));
    f.params.push_back(p);
  }
  return f;
}

// ---- CSV ------------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, pos == std::string::npos ? std::string::npos : pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

void write_cloud(const fs::path& path, const PointCloud& cloud) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  static const char* axes[] = {"x", "y", "z"};
  for (std::size_t k = 0; k < cloud.dim; ++k) out << (k ? "," : "") << axes[k];
  if (cloud.has_labels()) out << ",chart";
  out << '\n';
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t k = 0; k < cloud.dim; ++k) out << (k ? "," : "") << format_double(cloud.at(i, k));
    if (cloud.has_labels()) out << ',' << cloud.labels[i];
    out << '\n';
  }
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

PointCloud read_cloud(const fs::path& path, std::size_t expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  const std::string where = path.string();
  std::string line;
  if (!std::getline(in, line)) throw Error(where + ":1: missing header");
  const auto header = split_commas(line);
  std::size_t dim = 0;
  bool chart = false;
  static const char* axes[] = {"x", "y", "z"};
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i < 3 && !chart && header[i] == axes[i] && dim == i) {
      ++dim;
    } else if (header[i] == "chart" && i == header.size() - 1) {
      chart = true;
    } else {
      throw Error(where + ":1: unexpected header column '" + header[i] + "' (expected x,y[,z][,chart])");
    }
  }
  if (dim < 2) throw Error(where + ":1: header needs at least x,y");
  if (expected_dim != 0 && dim != expected_dim)
    throw ShapeError(where + ": file has " + std::to_string(dim) + " coordinate columns, expected " +
                     std::to_string(expected_dim));
  PointCloud c;
  c.dim = dim;
  std::size_t lineno = 1;
  const std::size_t ncols = dim + (chart ? 1 : 0);
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != ncols)
      throw Error(where + ":" + std::to_string(lineno) + ": expected " + std::to_string(ncols) + " columns, found " +
                  std::to_string(cells.size()));
    for (std::size_t k = 0; k < dim; ++k) {
      double v = 0.0;
      const auto& s = cells[k];
      auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v))
        throw Error(where + ":" + std::to_string(lineno) + ": malformed number '" + s + "'");
      c.coords.push_back(v);
    }
    if (chart) {
      int lab = 0;
      const auto& s = cells[dim];
      auto res = std::from_chars(s.data(), s.data() + s.size(), lab);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size() || lab < 0)
        throw Error(where + ":" + std::to_string(lineno) + ": malformed chart label '" + s + "'");
      c.labels.push_back(lab);
    }
  }
  return c;
}

void write_dataset(const fs::path& dir, const std::vector<PointCloud>& clouds, const std::string& stem) {
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw Error("cannot write manifest in '" + dir.string() + "'");
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_%04zu.csv", stem.c_str(), i);
    write_cloud(dir / name, clouds[i]);
    manifest << name << '\n';
  }
}

std::vector<PointCloud> read_dataset(const fs::path& dir, std::size_t expected_dim) {
  if (!fs::is_directory(dir)) throw Error("dataset directory '" + dir.string() + "' does not exist");
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw Error("dataset directory '" + dir.string() + "' has no manifest.txt");
  std::vector<PointCloud> out;
  std::string line;
  while (std::getline(manifest, line)) {
    const auto name = trim(line);
    if (name.empty()) continue;
    out.push_back(read_cloud(dir / name, expected_dim));
  }
  return out;
}

}  // namespace cpf
