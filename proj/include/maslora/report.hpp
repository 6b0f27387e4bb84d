#pragma once

#include <fstream>
#include <string>
#include <vector>

namespace maslora {

// Deterministic number formatting for reports: shortest form up to 10
// significant digits, so identical runs emit identical bytes.
std::string fmt_num(double v);

// Append-oriented CSV writer; every row is flushed so partial results
// survive an interrupted run.
class Csv {
public:
    Csv(const std::string& path, const std::vector<std::string>& header);
    void row(const std::vector<std::string>& cells);
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ofstream out_;
    size_t width_;
};

// Minimal line plot with axes, ticks and point markers.
void write_line_plot_svg(const std::string& path, const std::string& title,
                         const std::string& x_label, const std::string& y_label,
                         const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace maslora
