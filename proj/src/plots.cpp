#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "unibias/harness.hpp"

namespace unibias {

namespace fs = std::filesystem;

namespace {

// Plotted numbers are printed exactly as in the CSVs so every label in a
// figure can be found in its table.
std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string px(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", x);
  return buf;
}

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

std::string file_safe(std::string_view s) {
  std::string out(s);
  for (auto& c : out)
    if (c == '/' || c == ':') c = c == '/' ? '_' : '+';
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
constexpr double kWidth = 640, kHeight = 400, kLeft = 90, kRight = 170, kTop = 40, kBottom = 50;

struct Frame {
  double x0, x1, y0, y1;
  double x(double v) const { return kLeft + (x1 > x0 ? (v - x0) / (x1 - x0) : 0.5) * (kWidth - kLeft - kRight); }
  double y(double v) const {
    return kHeight - kBottom - (y1 > y0 ? (v - y0) / (y1 - y0) : 0.5) * (kHeight - kTop - kBottom);
  }
};

void open_svg(std::ostringstream& o, std::string_view title) {
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
    << "</text>\n";
}

void axes(std::ostringstream& o, const Frame& f, std::string_view xlabel, std::string_view ylabel,
          bool label_x_range) {
  const double bx = kHeight - kBottom;
  o << "<line x1=\"" << kLeft << "\" y1=\"" << bx << "\" x2=\"" << kWidth - kRight << "\" y2=\"" << bx
    << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << bx
    << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << kLeft - 4 << "\" y=\"" << px(f.y(f.y1) + 4) << "\" text-anchor=\"end\">" << num(f.y1)
    << "</text>\n<text x=\"" << kLeft - 4 << "\" y=\"" << px(f.y(f.y0)) << "\" text-anchor=\"end\">" << num(f.y0)
    << "</text>\n";
  if (label_x_range)
    o << "<text x=\"" << kLeft << "\" y=\"" << bx + 14 << "\">" << num(f.x0) << "</text>\n<text x=\""
      << kWidth - kRight << "\" y=\"" << bx + 14 << "\" text-anchor=\"end\">" << num(f.x1) << "</text>\n";
  o << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">"
    << escape(xlabel) << "</text>\n<text x=\"16\" y=\"" << (kTop + bx) / 2
    << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (kTop + bx) / 2 << ")\">" << escape(ylabel)
    << "</text>\n";
}

void legend(std::ostringstream& o, const std::vector<std::string>& labels) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = kTop + 16.0 * static_cast<double>(i);
    o << "<rect x=\"" << kWidth - kRight + 12 << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\""
      << kColors[i % std::size(kColors)] << "\"/>\n<text x=\"" << kWidth - kRight + 26 << "\" y=\"" << y + 9
      << "\">" << escape(labels[i]) << "</text>\n";
  }
}

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

std::string line_chart(std::string_view title, std::string_view xlabel, std::string_view ylabel,
                       const std::vector<Series>& series) {
  Frame f{INFINITY, -INFINITY, INFINITY, -INFINITY};
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      f.x0 = std::min(f.x0, x), f.x1 = std::max(f.x1, x);
      f.y0 = std::min(f.y0, y), f.y1 = std::max(f.y1, y);
    }
  if (!(f.x0 <= f.x1)) f = {0, 1, 0, 1};
  std::ostringstream o;
  open_svg(o, title);
  axes(o, f, xlabel, ylabel, true);
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < series.size(); ++i) {
    labels.push_back(series[i].label);
    o << "<polyline fill=\"none\" stroke=\"" << kColors[i % std::size(kColors)] << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t j = 0; j < series[i].points.size(); ++j)
      o << (j ? " " : "") << px(f.x(series[i].points[j].first)) << ',' << px(f.y(series[i].points[j].second));
    o << "\"/>\n";
  }
  legend(o, labels);
  o << "</svg>\n";
  return o.str();
}

struct Bar {
  std::string group, label;
  double mean = 0.0, stderr_mean = 0.0;
};

std::string bar_chart(std::string_view title, std::string_view ylabel, const std::vector<Bar>& bars,
                      const std::vector<std::string>& labels) {
  Frame f{0, 1, 0, 0};
  for (const auto& b : bars) {
    f.y0 = std::min(f.y0, b.mean - b.stderr_mean);
    f.y1 = std::max(f.y1, b.mean + b.stderr_mean);
  }
  if (f.y1 <= f.y0) f.y1 = f.y0 + 1.0;
  std::vector<std::string> groups;
  for (const auto& b : bars)
    if (std::find(groups.begin(), groups.end(), b.group) == groups.end()) groups.push_back(b.group);
  std::ostringstream o;
  open_svg(o, title);
  axes(o, f, "", ylabel, false);
  const double span = (kWidth - kLeft - kRight) / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
  const double width = span * 0.8 / static_cast<double>(std::max<std::size_t>(labels.size(), 1));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = kLeft + span * static_cast<double>(g) + span * 0.1;
    o << "<text x=\"" << px(gx + span * 0.4) << "\" y=\"" << kHeight - kBottom + 14 << "\" text-anchor=\"middle\">"
      << escape(groups[g]) << "</text>\n";
    for (const auto& b : bars) {
      if (b.group != groups[g]) continue;
      const auto li = static_cast<std::size_t>(std::find(labels.begin(), labels.end(), b.label) - labels.begin());
      const double x = gx + width * static_cast<double>(li);
      const double top = f.y(std::max(b.mean, 0.0)), base = f.y(std::min(b.mean, 0.0));
      o << "<rect x=\"" << px(x) << "\" y=\"" << px(top) << "\" width=\"" << px(width * 0.9) << "\" height=\""
        << px(base - top) << "\" fill=\"" << kColors[li % std::size(kColors)] << "\"><title>" << num(b.mean)
        << " &#177; " << num(b.stderr_mean) << "</title></rect>\n";
      const double cx = x + width * 0.45;
      o << "<line x1=\"" << px(cx) << "\" y1=\"" << px(f.y(b.mean - b.stderr_mean)) << "\" x2=\"" << px(cx)
        << "\" y2=\"" << px(f.y(b.mean + b.stderr_mean)) << "\" stroke=\"black\"/>\n";
    }
  }
  legend(o, labels);
  o << "</svg>\n";
  return o.str();
}

std::string bar_csv(const MetricReport& r, const std::string& metric) {
  std::ostringstream o;
  o << "dataset,strategy,seed,metric,value,stderr\n";
  for (const auto& d : r.datasets)
    for (const auto& s : r.strategies) {
      for (std::size_t k = 0; k < r.seeds; ++k)
        if (const auto* run = r.find(d, s, k); run && run->ok() && run->metrics.count(metric))
          o << d << ',' << s << ',' << k << ',' << metric << ',' << num(run->metrics.at(metric)) << ",\n";
      const auto sum = r.summary(d, s, metric);
      if (sum.n > 0)
        o << d << ',' << s << ",mean," << metric << ',' << num(sum.mean) << ',' << num(sum.stderr_mean) << '\n';
    }
  return o.str();
}

std::vector<Bar> bars_of(const MetricReport& r, const std::string& metric) {
  std::vector<Bar> bars;
  for (const auto& d : r.datasets)
    for (const auto& s : r.strategies)
      if (const auto sum = r.summary(d, s, metric); sum.n > 0) bars.push_back({d, s, sum.mean, sum.stderr_mean});
  return bars;
}

}  // namespace

void emit_plots(const MetricReport& report, const fs::path& dir) {
  if (report.runs.empty()) throw DataError("cannot plot an empty report");
  fs::create_directories(dir);

  for (const auto& run : report.runs) {
    if (!run.ok()) continue;
    std::vector<Series> series{{"kl_unigram", {}}, {"kl_uniform", {}}, {"xent_empirical", {}}};
    std::ostringstream csv;
    csv << "step,series,value\n";
    for (const auto& d : run.log.divergences) {
      const double s = static_cast<double>(d.step);
      series[0].points.emplace_back(s, d.kl_unigram);
      series[1].points.emplace_back(s, d.kl_uniform);
      series[2].points.emplace_back(s, d.xent_empirical);
    }
    for (const auto& s : series)
      for (const auto& [x, y] : s.points) csv << num(x) << ',' << s.label << ',' << num(y) << '\n';
    const auto stem = "divergence_" + file_safe(run.id());
    write_text(dir / (stem + ".csv"), csv.str());
    write_text(dir / (stem + ".svg"), line_chart("divergence " + run.id(), "step", "nats", series));
  }

  for (const auto& metric : report.metrics) {
    const auto stem = metric == "alc" ? std::string("alc") : "bars_" + metric;
    write_text(dir / (stem + ".csv"), bar_csv(report, metric));
    write_text(dir / (stem + ".svg"),
               bar_chart(metric == "alc" ? "ALC of validation BLEU" : metric + " (mean, standard error)", metric,
                         bars_of(report, metric), report.strategies));
  }
}

}  // namespace unibias
