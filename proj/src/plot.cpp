#include "ssmtl/plot.hpp"

#include <algorithm>
#include <fstream>

#include <opencv2/imgproc.hpp>

#include "ssmtl/error.hpp"

namespace ssmtl::plot {

namespace {

constexpr int kMarginLeft = 50, kMarginRight = 15, kMarginTop = 30, kMarginBottom = 30;

}  // namespace

cv::Mat render_scores(const score::ScoreSeries& series, const std::vector<std::uint8_t>& labels,
                      const std::string& title, int width, int height) {
  const int n = static_cast<int>(series.smoothed.size());
  if (n == 0) throw ValidationError("cannot plot an empty score series");
  if (!labels.empty() && static_cast<int>(labels.size()) != n)
    throw ValidationError("labels and scores differ in length");
  cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  const int pw = width - kMarginLeft - kMarginRight, ph = height - kMarginTop - kMarginBottom;

  double top = 1.0;
  for (int i = 0; i < n; ++i) top = std::max({top, series.raw[i], series.smoothed[i]});
  auto px = [&](int f) { return kMarginLeft + (n == 1 ? 0 : f * pw / (n - 1)); };
  auto py = [&](double v) { return kMarginTop + ph - static_cast<int>(std::lround(v / top * ph)); };

  for (int f = 0; f < static_cast<int>(labels.size()); ++f) {
    if (!labels[f]) continue;
    const int x0 = px(f), x1 = std::max(x0 + 1, f + 1 < n ? px(f + 1) : x0 + 1);
    cv::rectangle(img, {x0, kMarginTop}, {x1, kMarginTop + ph}, cv::Scalar(190, 190, 255), cv::FILLED);
  }
  cv::rectangle(img, {kMarginLeft, kMarginTop}, {kMarginLeft + pw, kMarginTop + ph}, cv::Scalar(0, 0, 0));
  for (double v : {0.0, 0.5, 1.0}) {
    if (v > top) continue;
    cv::putText(img, cv::format("%.1f", v), {8, py(v) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0));
  }
  cv::putText(img, "frame", {kMarginLeft + pw / 2 - 20, height - 8}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
              cv::Scalar(0, 0, 0));
  cv::putText(img, title, {kMarginLeft, 20}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0));

  auto polyline = [&](const std::vector<double>& v, const cv::Scalar& color, int thickness) {
    std::vector<cv::Point> pts;
    for (int f = 0; f < n; ++f) pts.emplace_back(px(f), py(v[f]));
    cv::polylines(img, pts, false, color, thickness, cv::LINE_AA);
  };
  polyline(series.raw, cv::Scalar(200, 170, 120), 1);
  polyline(series.smoothed, cv::Scalar(150, 60, 0), 2);
  return img;
}

void write_plot_csv(const std::filesystem::path& file, const score::ScoreSeries& series,
                    const std::vector<std::uint8_t>& labels) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file);
  out.precision(17);
  out << "frame,raw,smoothed,label\n";
  for (size_t f = 0; f < series.smoothed.size(); ++f)
    out << f << ',' << series.raw[f] << ',' << series.smoothed[f] << ',' << (f < labels.size() ? int(labels[f]) : 0)
        << '\n';
  if (!out) throw Error("failed to write " + file.string());
}

}  // namespace ssmtl::plot
