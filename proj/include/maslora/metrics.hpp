#pragma once

#include <utility>
#include <vector>

namespace maslora {

struct Alignment {
    int substitutions = 0;
    int deletions = 0;
    int insertions = 0;
    int hits = 0;
    int ref_len = 0;

    int errors() const { return substitutions + deletions + insertions; }
};

// Minimal unit-cost edit alignment. Ties resolve preferring
// substitution, then deletion, then insertion.
Alignment align(const std::vector<int>& ref, const std::vector<int>& hyp);

// Pooled word error rate: 100 * total errors / total reference length,
// never a mean of per-utterance rates.
double wer(const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs);

struct SignificanceResult {
    double z = 0.0;
    double p = 1.0;  // two-sided normal approximation
    int n_segments = 0;
    bool significant = false;  // at 0.05
    bool degenerate = false;   // zero spread with nonzero mean
};

// Matched-pairs Z test on per-utterance error-count differences.
SignificanceResult mapsswe(const std::vector<int>& errs_a, const std::vector<int>& errs_b);

}  // namespace maslora
