#pragma once

#include <optional>
#include <string>
#include <vector>

#include "maslora/autodiff.hpp"
#include "maslora/mat.hpp"
#include "maslora/rng.hpp"

namespace maslora {

enum class FtMethod { NoFT, Full, Lora, MasLora };

std::string ft_method_name(FtMethod m);
FtMethod parse_ft_method(const std::string& s);

// Low-rank update pair: the adapted weight is W0 + alpha * B * A.
// A starts Gaussian (stddev 1/sqrt(r)), B starts zero, so a fresh
// adapter is an exact no-op.
struct LoraFactors {
    Node A;  // r x k
    Node B;  // d x r
    double alpha = 1.0;
    int rank = 0;
};

LoraFactors make_lora(int d, int k, int r, double alpha, Rng& rng);

// One LoRA expert per accent, all sharing (d, k, r, alpha).
struct ExpertBank {
    std::vector<std::string> accent_ids;
    std::vector<LoraFactors> experts;

    int size() const { return static_cast<int>(experts.size()); }
    int index_of(const std::string& accent_id) const;  // RoutingError if unknown
};

ExpertBank make_bank(const std::vector<std::string>& accent_ids, int d, int k, int r,
                     double alpha, Rng& rng);

// How experts combine at inference. target is an index into the bank.
struct MixSpec {
    enum class Mode { Uniform, Aware, Single };
    Mode mode = Mode::Uniform;
    int target = -1;
    double beta = 1.0;

    static MixSpec uniform_mix() { return MixSpec{}; }
    static MixSpec aware(int target, double beta) { return {Mode::Aware, target, beta}; }
    static MixSpec single(int target) { return {Mode::Single, target, 1.0}; }
    std::string str() const;
};

// Uniform: 1/n each. Aware(j, beta): w_j = 1/beta, the rest share the
// remainder equally; beta == 1 and beta == n collapse to the one-hot
// and uniform vectors exactly. Single(j): one-hot.
std::vector<double> mixture_weights(const MixSpec& mix, int n);

// A linear layer y = W x with an optional adapter. W0 is trainable
// only under Full; every other method keeps it frozen.
struct AdaptedLinear {
    Node W0;  // d x k
    FtMethod method = FtMethod::NoFT;
    std::optional<LoraFactors> lora;
    std::optional<ExpertBank> bank;

    int d() const { return W0.value().rows; }
    int k() const { return W0.value().cols; }
};

AdaptedLinear adapt_none(Mat W0);
AdaptedLinear adapt_full(Mat W0);
AdaptedLinear adapt_lora(Mat W0, int r, double alpha, Rng& rng);
AdaptedLinear adapt_bank(Mat W0, const std::vector<std::string>& accent_ids, int r,
                         double alpha, Rng& rng);

// Training routes each sample through its own accent's expert;
// inference blends experts with a weight vector.
struct Route {
    int expert = -1;
    std::vector<double> weights;

    static Route train_on(int expert_index);
    static Route mix(std::vector<double> w);
    bool is_train() const { return expert >= 0; }
};

// Activations-as-rows forward: x is T x k, result T x d, computed as
// x W0^T + alpha * sum_i w_i (x A_i^T) B_i^T without forming any dense
// update matrix. Zero-weight experts are skipped outright.
Node apply_adapted(const AdaptedLinear& layer, const Node& x, const Route& route);

// Column-convention value-level forms (x is k x batch), matching the
// algebra the adapters are defined in.
Mat lora_forward(const Mat& x, const AdaptedLinear& layer);
Mat expert_forward(const Mat& x, const AdaptedLinear& layer, const std::string& accent_id);
Mat mixed_forward(const Mat& x, const AdaptedLinear& layer, const std::vector<double>& w);

// Folds the weighted expert updates into one dense d x k matrix:
// W0 + alpha * sum_i w_i B_i A_i. For Lora layers w is ignored; for
// plain layers this returns W0.
Mat merge(const AdaptedLinear& layer, const std::vector<double>& w);

// Which attention projections carry adapters.
struct AttachSet {
    bool q = false, k = false, v = false, o = false;

    int count() const { return int(q) + int(k) + int(v) + int(o); }
    static AttachSet qv() { return {true, false, true, false}; }
    static AttachSet qkvo() { return {true, true, true, true}; }
    static AttachSet parse(const std::string& s);  // e.g. "qv", "qkvo"
    std::string str() const;
};

struct ParamShape {
    int d_model = 0;
    int enc_layers = 0;
    int dec_layers = 0;
    AttachSet attach;
    long long base_param_total = 0;
};

struct ParamAudit {
    long long trained = 0;
    double percent = 0.0;  // of total model size, rounded to 2 decimals
};

// Trained-parameter budget for an encoder/decoder fine-tuning pair.
// Each adapted d x d matrix costs 2 r d per expert; the encoder has
// enc_layers * |attach| such matrices, the decoder twice that (self-
// plus cross-attention). Full must be Full on both sides.
ParamAudit param_count(const ParamShape& shape, FtMethod enc, FtMethod dec, int r,
                       int n_accents);

}  // namespace maslora
