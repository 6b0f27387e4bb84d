#pragma once

#include <initializer_list>
#include <string>
#include <vector>

#include "maslora/rng.hpp"

namespace maslora {

// Dense row-major matrix of doubles. Small and value-semantic; all the
// model math at this scale runs in double precision.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
    Mat(int r, int c, std::initializer_list<double> values);

    static Mat zeros(int r, int c) { return Mat(r, c); }
    static Mat full(int r, int c, double v);
    static Mat identity(int n);
    static Mat randn(int r, int c, double stddev, Rng& rng);

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    size_t size() const { return data.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
    std::string shape_str() const;
};

Mat matmul(const Mat& a, const Mat& b);
Mat transpose(const Mat& a);
Mat add(const Mat& a, const Mat& b);
Mat sub(const Mat& a, const Mat& b);
Mat hadamard(const Mat& a, const Mat& b);
Mat scale(const Mat& a, double s);
void add_inplace(Mat& dst, const Mat& src);
void add_scaled_inplace(Mat& dst, const Mat& src, double s);

// Row-wise softmax with max subtraction for stability.
Mat softmax_rows(const Mat& x);

// Per-row normalization to zero mean / unit variance (population
// variance, eps inside the sqrt) followed by the affine gain/bias.
// gain and bias are 1 x cols.
Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps);

// Mean negative log-softmax over non-pad positions; exactly 0.0 when
// every position is pad. logits is T x V, targets has length T.
double cross_entropy(const Mat& logits, const std::vector<int>& targets, int pad_id);

std::vector<int> argmax_rows(const Mat& x);

double frob_norm(const Mat& a);
double max_abs(const Mat& a);
double max_abs_diff(const Mat& a, const Mat& b);
bool all_finite(const Mat& a);
bool bitwise_equal(const Mat& a, const Mat& b);

}  // namespace maslora
