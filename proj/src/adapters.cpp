#include "maslora/adapters.hpp"

#include <cmath>

#include "maslora/errors.hpp"

namespace maslora {

std::string ft_method_name(FtMethod m) {
    switch (m) {
        case FtMethod::NoFT: return "noft";
        case FtMethod::Full: return "full";
        case FtMethod::Lora: return "lora";
        case FtMethod::MasLora: return "maslora";
    }
    throw ConfigError("ft_method_name: bad enum value");
}

FtMethod parse_ft_method(const std::string& s) {
    if (s == "noft") return FtMethod::NoFT;
    if (s == "full") return FtMethod::Full;
    if (s == "lora") return FtMethod::Lora;
    if (s == "maslora") return FtMethod::MasLora;
    throw ConfigError("unknown fine-tuning method '" + s + "' (want noft|full|lora|maslora)");
}

LoraFactors make_lora(int d, int k, int r, double alpha, Rng& rng) {
    if (r < 1 || r > std::min(d, k)) {
        throw ConfigError("lora rank " + std::to_string(r) + " invalid for " +
                          std::to_string(d) + "x" + std::to_string(k));
    }
    LoraFactors f;
    f.A = Node::param(Mat::randn(r, k, 1.0 / std::sqrt(double(r)), rng));
    f.B = Node::param(Mat::zeros(d, r));
    f.alpha = alpha;
    f.rank = r;
    return f;
}

int ExpertBank::index_of(const std::string& accent_id) const {
    for (size_t i = 0; i < accent_ids.size(); ++i) {
        if (accent_ids[i] == accent_id) return static_cast<int>(i);
    }
    throw RoutingError("unknown accent '" + accent_id + "'");
}

ExpertBank make_bank(const std::vector<std::string>& accent_ids, int d, int k, int r,
                     double alpha, Rng& rng) {
    if (accent_ids.empty()) throw ConfigError("expert bank needs at least one accent");
    ExpertBank bank;
    bank.accent_ids = accent_ids;
    bank.experts.reserve(accent_ids.size());
    for (size_t i = 0; i < accent_ids.size(); ++i) {
        bank.experts.push_back(make_lora(d, k, r, alpha, rng));
    }
    return bank;
}

std::string MixSpec::str() const {
    switch (mode) {
        case Mode::Uniform: return "uniform";
        case Mode::Aware:
            return "aware(t=" + std::to_string(target) + ",beta=" + std::to_string(beta) + ")";
        case Mode::Single: return "single(t=" + std::to_string(target) + ")";
    }
    return "?";
}

std::vector<double> mixture_weights(const MixSpec& mix, int n) {
    if (n < 1) throw DomainError("mixture_weights: n must be >= 1");
    std::vector<double> w(static_cast<size_t>(n), 0.0);
    auto check_target = [&](int j) {
        if (j < 0 || j >= n) {
            throw RoutingError("mix target " + std::to_string(j) + " outside bank of " +
                               std::to_string(n));
        }
    };
    switch (mix.mode) {
        case MixSpec::Mode::Uniform:
            std::fill(w.begin(), w.end(), 1.0 / n);
            return w;
        case MixSpec::Mode::Single:
            check_target(mix.target);
            w[mix.target] = 1.0;
            return w;
        case MixSpec::Mode::Aware: {
            check_target(mix.target);
            if (mix.beta < 1.0 || mix.beta > double(n)) {
                throw DomainError("beta " + std::to_string(mix.beta) + " outside [1, " +
                                  std::to_string(n) + "]");
            }
            if (mix.beta == 1.0) {
                w[mix.target] = 1.0;
                return w;
            }
            if (mix.beta == double(n)) {
                std::fill(w.begin(), w.end(), 1.0 / n);
                return w;
            }
            double wt = 1.0 / mix.beta;
            double rest = (1.0 - wt) / (n - 1);
            std::fill(w.begin(), w.end(), rest);
            w[mix.target] = wt;
            return w;
        }
    }
    throw DomainError("mixture_weights: bad mix mode");
}

AdaptedLinear adapt_none(Mat W0) {
    AdaptedLinear l;
    l.W0 = Node::constant(std::move(W0));
    l.method = FtMethod::NoFT;
    return l;
}

AdaptedLinear adapt_full(Mat W0) {
    AdaptedLinear l;
    l.W0 = Node::param(std::move(W0));
    l.method = FtMethod::Full;
    return l;
}

AdaptedLinear adapt_lora(Mat W0, int r, double alpha, Rng& rng) {
    AdaptedLinear l;
    int d = W0.rows, k = W0.cols;
    l.W0 = Node::constant(std::move(W0));
    l.method = FtMethod::Lora;
    l.lora = make_lora(d, k, r, alpha, rng);
    return l;
}

AdaptedLinear adapt_bank(Mat W0, const std::vector<std::string>& accent_ids, int r,
                         double alpha, Rng& rng) {
    AdaptedLinear l;
    int d = W0.rows, k = W0.cols;
    l.W0 = Node::constant(std::move(W0));
    l.method = FtMethod::MasLora;
    l.bank = make_bank(accent_ids, d, k, r, alpha, rng);
    return l;
}

Route Route::train_on(int expert_index) {
    Route r;
    r.expert = expert_index;
    return r;
}

Route Route::mix(std::vector<double> w) {
    Route r;
    r.weights = std::move(w);
    return r;
}

namespace {

// x [T x k] through one expert: alpha * w * (x A^T) B^T.
Node expert_term(const Node& x, const LoraFactors& f, double weight) {
    Node t = matmul(matmul(x, transpose(f.A)), transpose(f.B));
    return scale(t, f.alpha * weight);
}

}  // namespace

Node apply_adapted(const AdaptedLinear& layer, const Node& x, const Route& route) {
    Node base = matmul(x, transpose(layer.W0));
    switch (layer.method) {
        case FtMethod::NoFT:
        case FtMethod::Full:
            return base;
        case FtMethod::Lora:
            return add(base, expert_term(x, *layer.lora, 1.0));
        case FtMethod::MasLora: {
            const ExpertBank& bank = *layer.bank;
            if (route.is_train()) {
                if (route.expert >= bank.size()) {
                    throw RoutingError("expert index " + std::to_string(route.expert) +
                                       " outside bank of " + std::to_string(bank.size()));
                }
                return add(base, expert_term(x, bank.experts[route.expert], 1.0));
            }
            if (route.weights.empty()) {
                throw RoutingError("bank layer forward needs an expert or a mix");
            }
            if (static_cast<int>(route.weights.size()) != bank.size()) {
                throw ShapeError("mix of " + std::to_string(route.weights.size()) +
                                 " weights for bank of " + std::to_string(bank.size()));
            }
            Node out = base;
            for (int i = 0; i < bank.size(); ++i) {
                if (route.weights[i] == 0.0) continue;
                out = add(out, expert_term(x, bank.experts[i], route.weights[i]));
            }
            return out;
        }
    }
    throw ConfigError("apply_adapted: bad method enum");
}

namespace {

void check_col_input(const Mat& x, const AdaptedLinear& layer, const char* op) {
    if (x.rows != layer.k()) {
        throw ShapeError(std::string(op) + ": input " + x.shape_str() + " against weights " +
                         layer.W0.value().shape_str());
    }
}

// W0 x + alpha * w * B (A x), column convention.
Mat factor_apply(const Mat& x, const LoraFactors& f, double weight, const Mat& base) {
    Mat up = matmul(f.B.value(), matmul(f.A.value(), x));
    Mat out = base;
    add_scaled_inplace(out, up, f.alpha * weight);
    return out;
}

}  // namespace

Mat lora_forward(const Mat& x, const AdaptedLinear& layer) {
    if (!layer.lora) throw ConfigError("lora_forward: layer has no lora adapter");
    check_col_input(x, layer, "lora_forward");
    return factor_apply(x, *layer.lora, 1.0, matmul(layer.W0.value(), x));
}

Mat expert_forward(const Mat& x, const AdaptedLinear& layer, const std::string& accent_id) {
    if (!layer.bank) throw ConfigError("expert_forward: layer has no expert bank");
    check_col_input(x, layer, "expert_forward");
    int j = layer.bank->index_of(accent_id);
    return factor_apply(x, layer.bank->experts[j], 1.0, matmul(layer.W0.value(), x));
}

Mat mixed_forward(const Mat& x, const AdaptedLinear& layer, const std::vector<double>& w) {
    if (!layer.bank) throw ConfigError("mixed_forward: layer has no expert bank");
    check_col_input(x, layer, "mixed_forward");
    if (static_cast<int>(w.size()) != layer.bank->size()) {
        throw ShapeError("mixed_forward: " + std::to_string(w.size()) + " weights for bank of " +
                         std::to_string(layer.bank->size()));
    }
    Mat out = matmul(layer.W0.value(), x);
    for (int i = 0; i < layer.bank->size(); ++i) {
        if (w[i] == 0.0) continue;
        const LoraFactors& f = layer.bank->experts[i];
        add_scaled_inplace(out, matmul(f.B.value(), matmul(f.A.value(), x)), f.alpha * w[i]);
    }
    return out;
}

Mat merge(const AdaptedLinear& layer, const std::vector<double>& w) {
    Mat out = layer.W0.value();
    switch (layer.method) {
        case FtMethod::NoFT:
        case FtMethod::Full:
            return out;
        case FtMethod::Lora: {
            const LoraFactors& f = *layer.lora;
            add_scaled_inplace(out, matmul(f.B.value(), f.A.value()), f.alpha);
            return out;
        }
        case FtMethod::MasLora: {
            if (static_cast<int>(w.size()) != layer.bank->size()) {
                throw ShapeError("merge: " + std::to_string(w.size()) + " weights for bank of " +
                                 std::to_string(layer.bank->size()));
            }
            for (int i = 0; i < layer.bank->size(); ++i) {
                if (w[i] == 0.0) continue;
                const LoraFactors& f = layer.bank->experts[i];
                add_scaled_inplace(out, matmul(f.B.value(), f.A.value()), f.alpha * w[i]);
            }
            return out;
        }
    }
    throw ConfigError("merge: bad method enum");
}

AttachSet AttachSet::parse(const std::string& s) {
    AttachSet a;
    for (char c : s) {
        switch (c) {
            case 'q': a.q = true; break;
            case 'k': a.k = true; break;
            case 'v': a.v = true; break;
            case 'o': a.o = true; break;
            default:
                throw ConfigError("attach set '" + s + "' has unknown projection '" +
                                  std::string(1, c) + "'");
        }
    }
    if (a.count() == 0) throw ConfigError("attach set must name at least one projection");
    return a;
}

std::string AttachSet::str() const {
    std::string s;
    if (q) s += 'q';
    if (k) s += 'k';
    if (v) s += 'v';
    if (o) s += 'o';
    return s;
}

ParamAudit param_count(const ParamShape& shape, FtMethod enc, FtMethod dec, int r,
                       int n_accents) {
    bool enc_adapter = enc == FtMethod::Lora || enc == FtMethod::MasLora;
    bool dec_adapter = dec == FtMethod::Lora || dec == FtMethod::MasLora;
    if ((enc == FtMethod::Full) != (dec == FtMethod::Full)) {
        throw ConfigError("full fine-tuning applies to the whole model; mix with " +
                          ft_method_name(enc == FtMethod::Full ? dec : enc) + " is undefined");
    }
    if ((enc_adapter || dec_adapter) && shape.attach.count() == 0) {
        throw ConfigError("adapter config needs a nonempty attach set");
    }
    if (r < 1) throw ConfigError("rank must be >= 1");
    if ((enc == FtMethod::MasLora || dec == FtMethod::MasLora) && n_accents < 1) {
        throw ConfigError("maslora needs n_accents >= 1");
    }

    ParamAudit out;
    if (enc == FtMethod::Full) {
        out.trained = shape.base_param_total;
        out.percent = 100.0;
        return out;
    }
    long long per_matrix = 2LL * r * shape.d_model;
    long long enc_matrices = static_cast<long long>(shape.enc_layers) * shape.attach.count();
    long long dec_matrices = static_cast<long long>(shape.dec_layers) * 2 * shape.attach.count();
    long long trained = 0;
    if (enc == FtMethod::Lora) trained += enc_matrices * per_matrix;
    if (enc == FtMethod::MasLora) trained += enc_matrices * n_accents * per_matrix;
    if (dec == FtMethod::Lora) trained += dec_matrices * per_matrix;
    if (dec == FtMethod::MasLora) trained += dec_matrices * n_accents * per_matrix;

    out.trained = trained;
    double pct = 100.0 * double(trained) / double(shape.base_param_total + trained);
    out.percent = std::round(pct * 100.0) / 100.0;
    return out;
}

}  // namespace maslora
