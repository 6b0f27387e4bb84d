#include "maslora/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "maslora/errors.hpp"

namespace maslora {

std::string fmt_num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

Csv::Csv(const std::string& path, const std::vector<std::string>& header)
    : path_(path), out_(path), width_(header.size()) {
    if (!out_) throw IoError("cannot write " + path);
    row(header);
}

void Csv::row(const std::vector<std::string>& cells) {
    if (cells.size() != width_) {
        throw IoError("csv row of " + std::to_string(cells.size()) + " cells in " +
                      std::to_string(width_) + "-column file " + path_);
    }
    for (size_t i = 0; i < cells.size(); ++i) {
        if (i) out_ << ',';
        out_ << cells[i];
    }
    out_ << '\n';
    out_.flush();
    if (!out_) throw IoError("short write to " + path_);
}

namespace {

struct AxisScale {
    double lo, hi;

    double map(double v, double px_lo, double px_hi) const {
        if (hi == lo) return (px_lo + px_hi) / 2;
        return px_lo + (v - lo) / (hi - lo) * (px_hi - px_lo);
    }
};

AxisScale fit_axis(const std::vector<double>& vs) {
    double lo = *std::min_element(vs.begin(), vs.end());
    double hi = *std::max_element(vs.begin(), vs.end());
    if (lo == hi) {
        lo -= 1;
        hi += 1;
    }
    double pad = 0.06 * (hi - lo);
    return {lo - pad, hi + pad};
}

std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

}  // namespace

void write_line_plot_svg(const std::string& path, const std::string& title,
                         const std::string& x_label, const std::string& y_label,
                         const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.empty() || xs.size() != ys.size()) {
        throw DomainError("plot needs matching nonempty x/y series");
    }
    const double W = 640, H = 440;
    const double L = 70, R = 620, T = 50, B = 390;  // plot box
    AxisScale xs_ax = fit_axis(xs);
    AxisScale ys_ax = fit_axis(ys);

    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << W << " " << H
      << "\" font-family=\"sans-serif\" font-size=\"13\">\n";
    f << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    f << "<text x=\"" << W / 2 << "\" y=\"26\" text-anchor=\"middle\" font-size=\"16\">" << title
      << "</text>\n";

    f << "<line x1=\"" << L << "\" y1=\"" << B << "\" x2=\"" << R << "\" y2=\"" << B
      << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << B
      << "\" stroke=\"black\"/>\n";

    const int ticks = 5;
    for (int i = 0; i <= ticks; ++i) {
        double fx = xs_ax.lo + (xs_ax.hi - xs_ax.lo) * i / ticks;
        double px = xs_ax.map(fx, L, R);
        f << "<line x1=\"" << px << "\" y1=\"" << B << "\" x2=\"" << px << "\" y2=\"" << B + 6
          << "\" stroke=\"black\"/>\n";
        f << "<text x=\"" << px << "\" y=\"" << B + 22 << "\" text-anchor=\"middle\">"
          << tick_label(fx) << "</text>\n";
        double fy = ys_ax.lo + (ys_ax.hi - ys_ax.lo) * i / ticks;
        double py = ys_ax.map(fy, B, T);
        f << "<line x1=\"" << L - 6 << "\" y1=\"" << py << "\" x2=\"" << L << "\" y2=\"" << py
          << "\" stroke=\"black\"/>\n";
        f << "<text x=\"" << L - 10 << "\" y=\"" << py + 4 << "\" text-anchor=\"end\">"
          << tick_label(fy) << "</text>\n";
    }
    f << "<text x=\"" << (L + R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">"
      << x_label << "</text>\n";
    f << "<text x=\"18\" y=\"" << (T + B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << (T + B) / 2 << ")\">" << y_label << "</text>\n";

    f << "<polyline fill=\"none\" stroke=\"#1565c0\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < xs.size(); ++i) {
        if (i) f << ' ';
        f << xs_ax.map(xs[i], L, R) << ',' << ys_ax.map(ys[i], B, T);
    }
    f << "\"/>\n";
    for (size_t i = 0; i < xs.size(); ++i) {
        f << "<circle cx=\"" << xs_ax.map(xs[i], L, R) << "\" cy=\"" << ys_ax.map(ys[i], B, T)
          << "\" r=\"3.5\" fill=\"#1565c0\"/>\n";
    }
    f << "</svg>\n";
    if (!f) throw IoError("short write to " + path);
}

}  // namespace maslora
