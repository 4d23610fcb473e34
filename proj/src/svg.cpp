#include "cpf/svg.hpp"

#include <cstdio>
#include <fstream>

namespace cpf {

const std::array<const char*, 32>& chart_palette() {
  static const std::array<const char*, 32> p{
      "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
      "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173", "#3182bd",
      "#e6550d", "#31a354", "#756bb1", "#636363", "#6baed6", "#fd8d3c", "#74c476", "#9e9ac8",
      "#969696", "#9ecae1", "#fdae6b", "#a1d99b", "#bcbddc", "#bdbdbd", "#c6dbef", "#fdd0a2"};
  return p;
}

std::string render_svg(const PointCloud& cloud) {
  constexpr double kBox = 1.2;
  constexpr double kSize = 512.0;
  const double s = kSize / (2.0 * kBox);
  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"512\" height=\"512\" viewBox=\"0 0 512 512\">\n";
  out += "<rect width=\"512\" height=\"512\" fill=\"white\"/>\n";
  char buf[160];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double px = (cloud.at(i, 0) + kBox) * s;
    const double py = (kBox - cloud.at(i, 1)) * s;
    const int label = cloud.has_labels() ? cloud.labels[i] : 0;
    const char* color = chart_palette()[static_cast<std::size_t>(label) % chart_palette().size()];
    std::snprintf(buf, sizeof buf, "<circle cx=\"%.3f\" cy=\"%.3f\" r=\"1.5\" fill=\"%s\"/>\n", px, py, color);
    out += buf;
  }
  out += "</svg>\n";
  return out;
}

void write_svg(const std::filesystem::path& path, const PointCloud& cloud) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << render_svg(cloud);
}

}  // namespace cpf
