#pragma once

// Evaluation reports: a flat CSV of per-subject metric values, grouped
// mean / standard-deviation summaries, a plain-text table and a grouped bar
// chart (one panel per metric, one bar per method, whiskers at +-1 std).

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "png.hpp"

namespace sunet {

struct MetricRow {
  std::string subject, method, metric;
  double value = 0.0;
};

inline void write_metric_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream f(path);
  if (!f) throw data_error("report: cannot create " + path);
  f << "subject,method,metric,value\n";
  f.precision(17);
  for (const auto& r : rows) f << r.subject << "," << r.method << "," << r.metric << "," << r.value
                               << "\n";
  if (!f) throw data_error("report: write failed for " + path);
}

inline std::vector<MetricRow> read_metric_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw data_error("report: cannot open " + path);
  std::vector<MetricRow> rows;
  std::string line;
  int ln = 0;
  while (std::getline(f, line)) {
    ++ln;
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty()) continue;
    if (ln == 1 && line == "subject,method,metric,value") continue;
    std::array<std::string, 4> cell;
    size_t start = 0;
    for (int c = 0; c < 4; ++c) {
      const size_t comma = line.find(',', start);
      if (c < 3 && comma == std::string::npos)
        throw data_error("report: malformed row at " + path + ":" + std::to_string(ln));
      cell[size_t(c)] = line.substr(start, c < 3 ? comma - start : std::string::npos);
      start = comma + 1;
    }
    try {
      rows.push_back({cell[0], cell[1], cell[2], std::stod(cell[3])});
    } catch (const std::exception&) {
      throw data_error("report: bad value at " + path + ":" + std::to_string(ln));
    }
  }
  return rows;
}

struct MetricSummary {
  std::string method, metric;
  double mean = 0.0, stdev = 0.0;
  int n = 0;
};

namespace report_detail {

// preserves first-appearance order
inline std::vector<std::string> distinct(const std::vector<MetricRow>& rows,
                                         std::string MetricRow::*field) {
  std::vector<std::string> out;
  for (const auto& r : rows)
    if (std::find(out.begin(), out.end(), r.*field) == out.end()) out.push_back(r.*field);
  return out;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

}  // namespace report_detail

inline std::vector<double> metric_values(const std::vector<MetricRow>& rows,
                                         const std::string& method, const std::string& metric) {
  std::vector<std::pair<std::string, double>> picked;
  for (const auto& r : rows)
    if (r.method == method && r.metric == metric) picked.emplace_back(r.subject, r.value);
  std::sort(picked.begin(), picked.end());  // stable subject pairing across reports
  std::vector<double> out;
  out.reserve(picked.size());
  for (auto& [s, v] : picked) out.push_back(v);
  return out;
}

inline std::vector<MetricSummary> summarize_metrics(const std::vector<MetricRow>& rows) {
  if (rows.empty()) throw data_error("report: no metric rows");
  std::vector<MetricSummary> out;
  for (const auto& metric : report_detail::distinct(rows, &MetricRow::metric))
    for (const auto& method : report_detail::distinct(rows, &MetricRow::method)) {
      const auto vals = metric_values(rows, method, metric);
      if (vals.empty()) continue;
      MetricSummary s{method, metric, 0.0, 0.0, int(vals.size())};
      for (double v : vals) s.mean += v;
      s.mean /= double(vals.size());
      if (vals.size() > 1) {
        for (double v : vals) s.stdev += (v - s.mean) * (v - s.mean);
        s.stdev = std::sqrt(s.stdev / double(vals.size() - 1));
      }
      out.push_back(std::move(s));
    }
  return out;
}

inline void write_summary_table(const std::string& path,
                                const std::vector<MetricSummary>& summaries) {
  std::ofstream f(path);
  if (!f) throw data_error("report: cannot create " + path);
  f << "metric      method            mean        std         n\n";
  for (const auto& s : summaries) {
    std::ostringstream row;
    row.setf(std::ios::left);
    row.width(12);
    row << s.metric;
    row.width(18);
    row << s.method;
    row.width(12);
    row << report_detail::fmt(s.mean);
    row.width(12);
    row << report_detail::fmt(s.stdev);
    row << s.n;
    f << row.str() << "\n";
  }
}

// One panel per metric; bars are methods in first-appearance order with
// +-1 std whiskers and the mean printed above each bar.
inline void render_bar_chart(const std::string& path, const std::vector<MetricRow>& rows,
                             const std::string& title) {
  const auto summaries = summarize_metrics(rows);
  const auto metrics = report_detail::distinct(rows, &MetricRow::metric);
  const auto methods = report_detail::distinct(rows, &MetricRow::method);
  static const Rgb palette[] = {{70, 130, 180}, {225, 140, 40}, {70, 160, 80},
                                {150, 90, 170}, {200, 70, 70},  {60, 170, 170}};
  const int bar_w = 34, bar_gap = 10, panel_pad = 34, axis_w = 56;
  const int panel_w = axis_w + int(methods.size()) * (bar_w + bar_gap) + panel_pad;
  const int top = 64, bottom = 56, plot_h = 240;
  const int W = std::max(int(metrics.size()) * panel_w + 20,
                         Canvas::text_width(title, 2) + 40);
  const int H = top + plot_h + bottom + 18 * (int(methods.size()) + 1);
  Canvas cv(W, H);
  const Rgb black{0, 0, 0}, grey{150, 150, 150};
  cv.text(16, 12, title, black, 2);

  for (size_t mi = 0; mi < metrics.size(); ++mi) {
    // per-panel scale: from min(0, lowest whisker) to highest whisker
    double lo = 0.0, hi = 0.0;
    bool first = true;
    for (const auto& s : summaries)
      if (s.metric == metrics[mi]) {
        lo = first ? std::min(0.0, s.mean - s.stdev) : std::min(lo, s.mean - s.stdev);
        hi = first ? s.mean + s.stdev : std::max(hi, s.mean + s.stdev);
        first = false;
      }
    if (hi <= lo) hi = lo + 1.0;
    hi += (hi - lo) * 0.1;

    const int x0 = 10 + int(mi) * panel_w + axis_w;
    const int y0 = top, y1 = top + plot_h;
    auto ypix = [&](double v) {
      return y1 - int(std::lround((v - lo) / (hi - lo) * double(plot_h)));
    };
    cv.vline(x0 - 1, y0, y1, black);
    cv.hline(x0 - 1, x0 + int(methods.size()) * (bar_w + bar_gap),
             std::clamp(ypix(0.0), y0, y1), black);
    for (int tick = 0; tick <= 4; ++tick) {
      const double v = lo + (hi - lo) * tick / 4.0;
      const int y = ypix(v);
      cv.hline(x0 - 4, x0 - 1, y, black);
      const std::string label = report_detail::fmt(v);
      cv.text(x0 - 6 - Canvas::text_width(label), y - 3, label, black);
    }
    cv.text(x0, y1 + 8, metrics[mi], black, 2);

    for (size_t bi = 0; bi < methods.size(); ++bi) {
      const MetricSummary* s = nullptr;
      for (const auto& cand : summaries)
        if (cand.metric == metrics[mi] && cand.method == methods[bi]) s = &cand;
      if (!s) continue;
      const Rgb col = palette[bi % 6];
      const int bx0 = x0 + int(bi) * (bar_w + bar_gap) + bar_gap / 2;
      const int base = std::clamp(ypix(0.0), y0, y1);
      cv.fill_rect(bx0, std::min(base, ypix(s->mean)), bx0 + bar_w, std::max(base, ypix(s->mean)),
                   col);
      const int cx = bx0 + bar_w / 2;
      cv.vline(cx, ypix(s->mean + s->stdev), ypix(s->mean - s->stdev), black);
      cv.hline(cx - 5, cx + 5, ypix(s->mean + s->stdev), black);
      cv.hline(cx - 5, cx + 5, ypix(s->mean - s->stdev), black);
      const std::string label = report_detail::fmt(s->mean);
      cv.text(cx - Canvas::text_width(label) / 2, ypix(s->mean + s->stdev) - 12, label, black);
    }
  }

  // legend
  for (size_t bi = 0; bi < methods.size(); ++bi) {
    const int ly = top + plot_h + 34 + int(bi) * 18;
    cv.fill_rect(16, ly, 16 + 12, ly + 12, palette[bi % 6]);
    cv.text(36, ly + 2, methods[bi], black);
  }
  cv.text(16, H - 14, "whiskers: +-1 std over subjects", grey);
  write_png(path, cv);
}

}  // namespace sunet
