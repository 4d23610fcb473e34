#pragma once

// Synthetic point-cloud generators and CSV file I/O.
//
// Every generated cloud is mapped into [-1, 1]^d by the analytic bounding box
// of its noise-free shape, inflated by the 3 sigma noise truncation radius.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cpf/autodiff.hpp"
#include "cpf/rng.hpp"

namespace cpf {

struct PointCloud {
  std::size_t dim = 2;
  std::vector<double> coords;  // size() * dim, row-major
  std::vector<int> labels;     // empty or one per point

  std::size_t size() const { return dim == 0 ? 0 : coords.size() / dim; }
  bool has_labels() const { return !labels.empty(); }
  double at(std::size_t i, std::size_t k) const { return coords[i * dim + k]; }

  Tensor to_tensor() const;
  static PointCloud from_tensor(const Tensor& t, std::vector<int> labels = {});
};

struct SyntheticSpec {
  std::string kind = "circle";  // circle, 2sines, four-circle, double-moon, ellipse-family, ring-or-disk-family
  std::size_t points = 2048;
  double noise = 0.02;
  std::uint64_t seed = 0;
  std::size_t dim = 2;  // ellipse-family may use 3
};

const std::vector<std::string>& synthetic_kinds();

// Single-object datasets. Labels hold the ground-truth component id.
PointCloud generate_synthetic(const SyntheticSpec& spec);

// Shape parameters of one family member.
struct FamilyParams {
  bool ring = true;
  double inner_ratio = 0.6;  // ring-or-disk: inner / outer radius
  double axis_b = 0.6;       // ellipse: second semi-axis
  double axis_c = 0.6;       // ellipse (3D): third semi-axis
};

struct FamilyRanges {
  double inner_min = 0.45, inner_max = 0.75;
  double axis_min = 0.3, axis_max = 1.0;
  bool fixed = false;  // every member uses FamilyParams{} defaults
};

struct Family {
  std::vector<PointCloud> clouds;
  std::vector<FamilyParams> params;
};

// N objects. ring-or-disk alternates ring, disk, ring, ... so the type split
// is exact (ceil(N/2) rings).
Family generate_family(const SyntheticSpec& spec, std::size_t count, const FamilyRanges& ranges = {});
PointCloud sample_family_member(const SyntheticSpec& spec, const FamilyParams& params, Rng& rng);

// Normalized radius of a ring-or-disk member's outer boundary and the
// normalization scale used for it.
double family_scale(const SyntheticSpec& spec);
// Scale applied to the raw double-moon coordinates.
double double_moon_scale(double noise);
// Half-width of the empty band |y| < w between the two normalized moons.
double double_moon_gap_half_width(double noise);
// Normalized circle radius.
double circle_radius(double noise);

void write_cloud(const std::filesystem::path& path, const PointCloud& cloud);
// expected_dim = 0 accepts whatever the header declares.
PointCloud read_cloud(const std::filesystem::path& path, std::size_t expected_dim = 0);

// Directory with manifest.txt listing one CSV file name per line.
void write_dataset(const std::filesystem::path& dir, const std::vector<PointCloud>& clouds,
                   const std::string& stem = "cloud");
std::vector<PointCloud> read_dataset(const std::filesystem::path& dir, std::size_t expected_dim = 0);

}  // namespace cpf
