#include "maslora/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "maslora/errors.hpp"

namespace maslora {

Alignment align(const std::vector<int>& ref, const std::vector<int>& hyp) {
    if (ref.empty()) throw DomainError("align: empty reference");
    int R = static_cast<int>(ref.size());
    int H = static_cast<int>(hyp.size());
    std::vector<int> dist(static_cast<size_t>(R + 1) * (H + 1));
    auto d = [&](int i, int j) -> int& { return dist[static_cast<size_t>(i) * (H + 1) + j]; };
    for (int i = 0; i <= R; ++i) d(i, 0) = i;
    for (int j = 0; j <= H; ++j) d(0, j) = j;
    for (int i = 1; i <= R; ++i) {
        for (int j = 1; j <= H; ++j) {
            int sub = d(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            int del = d(i - 1, j) + 1;
            int ins = d(i, j - 1) + 1;
            d(i, j) = std::min({sub, del, ins});
        }
    }
    Alignment out;
    out.ref_len = R;
    int i = R, j = H;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 &&
            d(i, j) == d(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
            if (ref[i - 1] == hyp[j - 1]) ++out.hits;
            else ++out.substitutions;
            --i;
            --j;
        } else if (i > 0 && d(i, j) == d(i - 1, j) + 1) {
            ++out.deletions;
            --i;
        } else {
            ++out.insertions;
            --j;
        }
    }
    return out;
}

double wer(const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs) {
    if (pairs.empty()) throw DomainError("wer: no utterances to score");
    long long errs = 0, len = 0;
    for (const auto& [ref, hyp] : pairs) {
        Alignment a = align(ref, hyp);
        errs += a.errors();
        len += a.ref_len;
    }
    return 100.0 * double(errs) / double(len);
}

SignificanceResult mapsswe(const std::vector<int>& errs_a, const std::vector<int>& errs_b) {
    if (errs_a.size() != errs_b.size()) {
        throw DomainError("mapsswe: segment counts differ, " + std::to_string(errs_a.size()) +
                          " vs " + std::to_string(errs_b.size()));
    }
    int n = static_cast<int>(errs_a.size());
    if (n < 2) throw DomainError("mapsswe: need at least 2 segments");

    SignificanceResult out;
    out.n_segments = n;
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += errs_a[i] - errs_b[i];
    mean /= n;
    double ss = 0.0;
    for (int i = 0; i < n; ++i) {
        double d = (errs_a[i] - errs_b[i]) - mean;
        ss += d * d;
    }
    double sd = std::sqrt(ss / (n - 1));
    if (sd == 0.0) {
        if (mean == 0.0) {
            out.z = 0.0;
            out.p = 1.0;
            out.significant = false;
            return out;
        }
        out.degenerate = true;
        out.z = mean > 0 ? std::numeric_limits<double>::infinity()
                         : -std::numeric_limits<double>::infinity();
        out.p = 0.0;
        out.significant = true;
        return out;
    }
    out.z = mean / (sd / std::sqrt(double(n)));
    out.p = std::erfc(std::fabs(out.z) / std::sqrt(2.0));
    out.significant = out.p < 0.05;
    return out;
}

}  // namespace maslora
