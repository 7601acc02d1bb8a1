#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

#include "adafocus/evalbench.hpp"
#include "adafocus/serialize.hpp"

namespace adafocus {

namespace {

constexpr double kWidth = 640, kHeight = 420, kLeft = 70, kRight = 20, kTop = 30, kBottom = 50;
constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                   "#9467bd", "#8c564b", "#e377c2", "#17becf"};

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                       const std::vector<Series>& series, bool markers) {
  double x0 = 1e300, x1 = -1e300, y0 = 0.0, y1 = 1.0;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 <= x0) {
    x0 -= 0.5 * std::max(1.0, std::abs(x0));
    x1 += 0.5 * std::max(1.0, std::abs(x1));
  }
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto sx = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream os;
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kWidth / 2 << "\" y=\"18\" text-anchor=\"middle\">" << escape(title)
     << "</text>\n"
     << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << sx(fx) << "\" y=\"" << kHeight - kBottom + 16
       << "\" text-anchor=\"middle\">" << fx << "</text>\n"
       << "<text x=\"" << kLeft - 6 << "\" y=\"" << sy(fy) + 4 << "\" text-anchor=\"end\">" << fy
       << "</text>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 10 << "\" text-anchor=\"middle\">"
     << escape(xlabel) << "</text>\n"
     << "<text x=\"16\" y=\"" << kTop + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << kTop + ph / 2 << ")\">" << escape(ylabel) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kColors[i % std::size(kColors)];
    const auto& s = series[i];
    if (s.points.size() > 1) {
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (const auto& [x, y] : s.points) os << sx(x) << ',' << sy(y) << ' ';
      os << "\"/>\n";
    }
    if (markers || s.points.size() == 1) {
      for (const auto& [x, y] : s.points) {
        os << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y) << "\" r=\"4\" fill=\"" << color
           << "\"/>\n";
      }
    }
    os << "<text x=\"" << kLeft + 8 << "\" y=\"" << kTop + 16 + 14 * static_cast<double>(i)
       << "\" fill=\"" << color << "\">" << escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string series_key(const MetricsRecord& r) {
  std::ostringstream os;
  os << r.policy << " P=" << r.patch_size;
  return os.str();
}

}  // namespace

std::vector<std::string> emit_plots(std::span<const MetricsRecord> records, const std::string& out_dir) {
  if (records.empty()) throw ContractError("emit_plots: no records to plot");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::vector<std::string> written;

  // x = mean multiply-adds per video, y = top-1 accuracy.
  std::map<std::string, Series> tradeoff;
  std::ostringstream csv;
  csv.precision(10);
  csv << "label,policy,patch_size,eta,mean_flops,top1\n";
  for (const auto& r : records) {
    auto& s = tradeoff[series_key(r)];
    s.name = series_key(r);
    s.points.emplace_back(r.mean_flops, r.top1);
    csv << r.label << ',' << r.policy << ',' << r.patch_size << ',';
    if (r.eta) csv << *r.eta;
    csv << ',' << r.mean_flops << ',' << r.top1 << '\n';
  }
  std::vector<Series> ts;
  for (auto& [_, s] : tradeoff) {
    std::sort(s.points.begin(), s.points.end());
    ts.push_back(s);
  }
  const auto base = fs::path(out_dir);
  write_text_atomic(base / "tradeoff.csv", csv.str());
  write_text_atomic(base / "tradeoff.svg",
                    line_chart("Accuracy vs compute", "mean multiply-adds per video", "top-1 accuracy",
                               ts, true));
  written.push_back((base / "tradeoff.csv").string());
  written.push_back((base / "tradeoff.svg").string());

  std::vector<Series> curves;
  std::ostringstream ccsv;
  ccsv.precision(10);
  ccsv << "label,frames,accuracy\n";
  for (const auto& r : records) {
    if (r.per_frame_accuracy.empty()) continue;
    Series s;
    s.name = r.label.empty() ? series_key(r) : r.label;
    for (std::size_t t = 0; t < r.per_frame_accuracy.size(); ++t) {
      s.points.emplace_back(static_cast<double>(t + 1), r.per_frame_accuracy[t]);
      ccsv << r.label << ',' << t + 1 << ',' << r.per_frame_accuracy[t] << '\n';
    }
    curves.push_back(std::move(s));
  }
  if (!curves.empty()) {
    write_text_atomic(base / "online_curve.csv", ccsv.str());
    write_text_atomic(base / "online_curve.svg",
                      line_chart("Online accuracy", "frames processed", "top-1 accuracy", curves, true));
    written.push_back((base / "online_curve.csv").string());
    written.push_back((base / "online_curve.svg").string());
  }
  return written;
}

}  // namespace adafocus
