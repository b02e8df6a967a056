#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "ssmtl/score.hpp"

namespace ssmtl::plot {

// Score-vs-frame figure: raw series thin, smoothed series thick, labeled anomalous frames
// shaded. Returns a BGR image.
cv::Mat render_scores(const score::ScoreSeries& series, const std::vector<std::uint8_t>& labels,
                      const std::string& title, int width = 900, int height = 300);

// The data behind render_scores: frame,raw,smoothed,label.
void write_plot_csv(const std::filesystem::path& file, const score::ScoreSeries& series,
                    const std::vector<std::uint8_t>& labels);

}  // namespace ssmtl::plot
