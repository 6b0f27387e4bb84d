#include "maslora/mat.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "maslora/errors.hpp"

namespace maslora {

Mat::Mat(int r, int c, std::initializer_list<double> values) : Mat(r, c) {
    if (values.size() != data.size()) {
        throw ShapeError("Mat init: " + std::to_string(values.size()) + " values for shape " + shape_str());
    }
    std::copy(values.begin(), values.end(), data.begin());
}

Mat Mat::full(int r, int c, double v) {
    Mat m(r, c);
    std::fill(m.data.begin(), m.data.end(), v);
    return m;
}

Mat Mat::identity(int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

Mat Mat::randn(int r, int c, double stddev, Rng& rng) {
    Mat m(r, c);
    for (double& v : m.data) v = rng.normal(0.0, stddev);
    return m;
}

std::string Mat::shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: inner dimensions disagree, " + a.shape_str() + " * " + b.shape_str());
    }
    Mat out(a.rows, b.cols);
    // ikj order keeps the inner loop contiguous in both b and out.
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = &a.data[static_cast<size_t>(i) * a.cols];
        double* orow = &out.data[static_cast<size_t>(i) * out.cols];
        for (int k = 0; k < a.cols; ++k) {
            double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = &b.data[static_cast<size_t>(k) * b.cols];
            for (int j = 0; j < b.cols; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

Mat transpose(const Mat& a) {
    Mat out(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < a.cols; ++j) {
            out.at(j, i) = a.at(i, j);
        }
    }
    return out;
}

static void check_same_shape(const Mat& a, const Mat& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch, " + a.shape_str() + " vs " + b.shape_str());
    }
}

Mat add(const Mat& a, const Mat& b) {
    check_same_shape(a, b, "add");
    Mat out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

Mat sub(const Mat& a, const Mat& b) {
    check_same_shape(a, b, "sub");
    Mat out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

Mat hadamard(const Mat& a, const Mat& b) {
    check_same_shape(a, b, "hadamard");
    Mat out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    return out;
}

Mat scale(const Mat& a, double s) {
    Mat out = a;
    for (double& v : out.data) v *= s;
    return out;
}

void add_inplace(Mat& dst, const Mat& src) {
    check_same_shape(dst, src, "add_inplace");
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

void add_scaled_inplace(Mat& dst, const Mat& src, double s) {
    check_same_shape(dst, src, "add_scaled_inplace");
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += s * src.data[i];
}

Mat softmax_rows(const Mat& x) {
    Mat out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < x.cols; ++j) mx = std::max(mx, x.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            double e = std::exp(x.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < x.cols; ++j) out.at(i, j) /= sum;
    }
    return out;
}

Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps) {
    if (gain.rows != 1 || gain.cols != x.cols || bias.rows != 1 || bias.cols != x.cols) {
        throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(x.cols) +
                         ", got " + gain.shape_str() + " and " + bias.shape_str());
    }
    Mat out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        double mean = 0.0;
        for (int j = 0; j < x.cols; ++j) mean += x.at(i, j);
        mean /= x.cols;
        double var = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            double d = x.at(i, j) - mean;
            var += d * d;
        }
        var /= x.cols;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < x.cols; ++j) {
            out.at(i, j) = gain.at(0, j) * ((x.at(i, j) - mean) * inv) + bias.at(0, j);
        }
    }
    return out;
}

double cross_entropy(const Mat& logits, const std::vector<int>& targets, int pad_id) {
    if (static_cast<int>(targets.size()) != logits.rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(logits.rows) + " rows");
    }
    double total = 0.0;
    int n = 0;
    for (int t = 0; t < logits.rows; ++t) {
        int tgt = targets[t];
        if (tgt == pad_id) continue;
        if (tgt < 0 || tgt >= logits.cols) {
            throw IndexError("cross_entropy: target id " + std::to_string(tgt) +
                             " out of range for vocab " + std::to_string(logits.cols));
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < logits.cols; ++j) mx = std::max(mx, logits.at(t, j));
        double lse = 0.0;
        for (int j = 0; j < logits.cols; ++j) lse += std::exp(logits.at(t, j) - mx);
        total += (mx + std::log(lse)) - logits.at(t, tgt);
        ++n;
    }
    if (n == 0) return 0.0;
    return total / n;
}

std::vector<int> argmax_rows(const Mat& x) {
    std::vector<int> out(x.rows, 0);
    for (int i = 0; i < x.rows; ++i) {
        int best = 0;
        double bv = x.at(i, 0);
        for (int j = 1; j < x.cols; ++j) {
            if (x.at(i, j) > bv) {
                bv = x.at(i, j);
                best = j;
            }
        }
        out[i] = best;
    }
    return out;
}

double frob_norm(const Mat& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

double max_abs(const Mat& a) {
    double m = 0.0;
    for (double v : a.data) m = std::max(m, std::fabs(v));
    return m;
}

double max_abs_diff(const Mat& a, const Mat& b) {
    check_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    }
    return m;
}

bool all_finite(const Mat& a) {
    for (double v : a.data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool bitwise_equal(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) return false;
    if (a.data.empty()) return true;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

}  // namespace maslora
