#pragma once

#include <string>
#include <utility>
#include <vector>

#include "snp/image.hpp"

namespace snp {

/// Per-step metric curves for several model variants on shared x indices.
/// NaN entries break the polyline. Throws on empty input.
void plot_curves(const std::vector<std::pair<std::string, std::vector<double>>>& series,
                 const std::string& out_path);

/// Layered 1D regression plot: prediction band, mean, truth, past context,
/// current context, each in its own style.
struct Plot1dLayers {
  std::vector<std::pair<double, double>> past_context;     // blue dots
  std::vector<std::pair<double, double>> current_context;  // black dots
  std::vector<std::pair<double, double>> truth;            // black dotted segments
  std::vector<double> xgrid, mean, band;                   // blue line, +-band shading
};
void plot_1d(const Plot1dLayers& layers, const std::string& out_path);

/// Grid of channels-last float images: one row per labelled series
/// (context / truth / samples), one column per step.
void plot_image_grid(const std::vector<std::vector<std::vector<float>>>& rows, int hw,
                     const std::string& out_path);

}  // namespace snp
