#pragma once

#include <string>
#include <vector>

#include "gridflow/world.hpp"

namespace gridflow {

// Renders a grid as an RGB raster (cell_px pixels per cell) and writes a PNG
// (stored-deflate, no external dependencies).
void write_grid_png(const GridImage& img, const std::string& path, int cell_px = 14);

// Minimal SVG figures for reports.
struct SeriesPoint {
    double x = 0.0;
    double y = 0.0;
};
void write_scatter_svg(const std::string& path, const std::vector<SeriesPoint>& points,
                       const std::string& x_label, const std::string& y_label,
                       const std::string& title);
void write_line_svg(const std::string& path, const std::vector<SeriesPoint>& points,
                    const std::string& x_label, const std::string& y_label,
                    const std::string& title);

}  // namespace gridflow
