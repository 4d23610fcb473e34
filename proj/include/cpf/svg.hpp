#pragma once

// Scatter plots as SVG. Output is a pure function of the cloud, so a plot
// regenerated from its CSV is byte-identical.

#include <array>
#include <filesystem>
#include <string>

#include "cpf/data.hpp"

namespace cpf {

const std::array<const char*, 32>& chart_palette();

// Points in the fixed box [-1.2, 1.2]^2 (x, y; z dropped), colored by label.
std::string render_svg(const PointCloud& cloud);
void write_svg(const std::filesystem::path& path, const PointCloud& cloud);

}  // namespace cpf
