#include "maslora/model.hpp"

#include <cmath>

#include "maslora/errors.hpp"

namespace maslora {

namespace {

Mat sinusoidal_pos(int max_len, int d) {
    Mat p(max_len, d);
    for (int t = 0; t < max_len; ++t) {
        for (int i = 0; i < d; i += 2) {
            double rate = std::pow(10000.0, double(i) / d);
            p.at(t, i) = std::sin(t / rate);
            if (i + 1 < d) p.at(t, i + 1) = std::cos(t / rate);
        }
    }
    return p;
}

Node make_weight(int rows, int cols, double stddev, bool trainable, Rng& rng) {
    Mat m = Mat::randn(rows, cols, stddev, rng);
    return trainable ? Node::param(std::move(m)) : Node::constant(std::move(m));
}

Node ln_gain(int d, bool trainable) {
    Mat g = Mat::full(1, d, 1.0);
    return trainable ? Node::param(std::move(g)) : Node::constant(std::move(g));
}

Node ln_bias(int d, bool trainable) {
    Mat b = Mat::zeros(1, d);
    return trainable ? Node::param(std::move(b)) : Node::constant(std::move(b));
}

AdaptedLinear make_projection(Mat W0, FtMethod side, bool attached, const FtConfig& ft,
                              Rng& ad_rng) {
    switch (side) {
        case FtMethod::NoFT: return adapt_none(std::move(W0));
        case FtMethod::Full: return adapt_full(std::move(W0));
        case FtMethod::Lora:
            return attached ? adapt_lora(std::move(W0), ft.r, ft.alpha, ad_rng)
                            : adapt_none(std::move(W0));
        case FtMethod::MasLora:
            return attached ? adapt_bank(std::move(W0), ft.accent_ids, ft.r, ft.alpha, ad_rng)
                            : adapt_none(std::move(W0));
    }
    throw ConfigError("make_projection: bad method enum");
}

void validate(const ModelConfig& cfg, const FtConfig& ft) {
    if (cfg.vocab_size < kFirstWordId + 1 || cfg.d_model < 1 || cfg.n_heads < 1 ||
        cfg.enc_layers < 1 || cfg.dec_layers < 1 || cfg.ffn_dim < 1 || cfg.max_len < 4) {
        throw ConfigError("model config has a nonpositive or too-small dimension");
    }
    if (cfg.d_model % cfg.n_heads != 0) {
        throw ConfigError("d_model " + std::to_string(cfg.d_model) + " not divisible by " +
                          std::to_string(cfg.n_heads) + " heads");
    }
    bool enc_ad = ft.encoder == FtMethod::Lora || ft.encoder == FtMethod::MasLora;
    bool dec_ad = ft.decoder == FtMethod::Lora || ft.decoder == FtMethod::MasLora;
    if ((enc_ad || dec_ad)) {
        if (ft.attach.count() == 0) throw ConfigError("adapter config needs an attach set");
        if (ft.r < 1 || ft.r > cfg.d_model) {
            throw ConfigError("rank " + std::to_string(ft.r) + " invalid for d_model " +
                              std::to_string(cfg.d_model));
        }
    }
    if ((ft.encoder == FtMethod::MasLora || ft.decoder == FtMethod::MasLora) &&
        ft.accent_ids.empty()) {
        throw ConfigError("maslora config needs accent ids");
    }
}

}  // namespace

int Transformer::accent_index(const std::string& accent_id) const {
    for (size_t i = 0; i < ft.accent_ids.size(); ++i) {
        if (ft.accent_ids[i] == accent_id) return static_cast<int>(i);
    }
    throw RoutingError("unknown accent '" + accent_id + "'");
}

Route Transformer::train_route(const std::string& accent_id) const {
    if (!has_banks()) return Route::mix({});
    return Route::train_on(accent_index(accent_id));
}

Route Transformer::mix_route(const MixSpec& mix) const {
    if (!has_banks()) return Route::mix({});
    return Route::mix(mixture_weights(mix, ft.n_accents()));
}

Transformer build(const ModelConfig& cfg, const FtConfig& ft, Rng& rng) {
    validate(cfg, ft);
    Transformer m;
    m.cfg = cfg;
    m.ft = ft;
    m.pos = sinusoidal_pos(cfg.max_len, cfg.d_model);

    // Base weights come from their own stream in a fixed order, so two
    // configs sharing a seed share the same "pre-trained" model no
    // matter how many adapter draws happen.
    Rng base_rng = rng.derive(0x6A5E0001);
    Rng ad_rng = rng.derive(0xADA20001);

    bool full = ft.encoder == FtMethod::Full;  // validated below to match decoder
    if ((ft.encoder == FtMethod::Full) != (ft.decoder == FtMethod::Full)) {
        throw ConfigError("full fine-tuning applies to the whole model");
    }

    int d = cfg.d_model;
    double wstd = 1.0 / std::sqrt(double(d));
    m.tok_emb = make_weight(cfg.vocab_size, d, 1.0, full, base_rng);

    auto proj = [&](FtMethod side, bool attached) {
        Mat W0 = Mat::randn(d, d, wstd, base_rng);
        return make_projection(std::move(W0), side, attached, ft, ad_rng);
    };

    const AttachSet& at = ft.attach;
    for (int l = 0; l < cfg.enc_layers; ++l) {
        Transformer::EncBlock b;
        b.q = proj(ft.encoder, at.q);
        b.k = proj(ft.encoder, at.k);
        b.v = proj(ft.encoder, at.v);
        b.o = proj(ft.encoder, at.o);
        b.ln1_g = ln_gain(d, full);
        b.ln1_b = ln_bias(d, full);
        b.ln2_g = ln_gain(d, full);
        b.ln2_b = ln_bias(d, full);
        b.ff1 = make_weight(cfg.ffn_dim, d, wstd, full, base_rng);
        b.ff2 = make_weight(d, cfg.ffn_dim, 1.0 / std::sqrt(double(cfg.ffn_dim)), full, base_rng);
        m.enc.push_back(std::move(b));
    }
    for (int l = 0; l < cfg.dec_layers; ++l) {
        Transformer::DecBlock b;
        b.sq = proj(ft.decoder, at.q);
        b.sk = proj(ft.decoder, at.k);
        b.sv = proj(ft.decoder, at.v);
        b.so = proj(ft.decoder, at.o);
        b.cq = proj(ft.decoder, at.q);
        b.ck = proj(ft.decoder, at.k);
        b.cv = proj(ft.decoder, at.v);
        b.co = proj(ft.decoder, at.o);
        b.ln1_g = ln_gain(d, full);
        b.ln1_b = ln_bias(d, full);
        b.ln2_g = ln_gain(d, full);
        b.ln2_b = ln_bias(d, full);
        b.ln3_g = ln_gain(d, full);
        b.ln3_b = ln_bias(d, full);
        b.ff1 = make_weight(cfg.ffn_dim, d, wstd, full, base_rng);
        b.ff2 = make_weight(d, cfg.ffn_dim, 1.0 / std::sqrt(double(cfg.ffn_dim)), full, base_rng);
        m.dec.push_back(std::move(b));
    }
    m.enc_lnf_g = ln_gain(d, full);
    m.enc_lnf_b = ln_bias(d, full);
    m.dec_lnf_g = ln_gain(d, full);
    m.dec_lnf_b = ln_bias(d, full);
    m.out_proj = make_weight(cfg.vocab_size, d, wstd, full, base_rng);
    return m;
}

void Transformer::for_each_base(const std::function<void(const std::string&, Node&)>& fn) {
    fn("tok_emb", tok_emb);
    for (size_t l = 0; l < enc.size(); ++l) {
        std::string p = "enc" + std::to_string(l) + ".";
        EncBlock& b = enc[l];
        fn(p + "q.W0", b.q.W0);
        fn(p + "k.W0", b.k.W0);
        fn(p + "v.W0", b.v.W0);
        fn(p + "o.W0", b.o.W0);
        fn(p + "ln1.g", b.ln1_g);
        fn(p + "ln1.b", b.ln1_b);
        fn(p + "ln2.g", b.ln2_g);
        fn(p + "ln2.b", b.ln2_b);
        fn(p + "ff1", b.ff1);
        fn(p + "ff2", b.ff2);
    }
    for (size_t l = 0; l < dec.size(); ++l) {
        std::string p = "dec" + std::to_string(l) + ".";
        DecBlock& b = dec[l];
        fn(p + "self.q.W0", b.sq.W0);
        fn(p + "self.k.W0", b.sk.W0);
        fn(p + "self.v.W0", b.sv.W0);
        fn(p + "self.o.W0", b.so.W0);
        fn(p + "cross.q.W0", b.cq.W0);
        fn(p + "cross.k.W0", b.ck.W0);
        fn(p + "cross.v.W0", b.cv.W0);
        fn(p + "cross.o.W0", b.co.W0);
        fn(p + "ln1.g", b.ln1_g);
        fn(p + "ln1.b", b.ln1_b);
        fn(p + "ln2.g", b.ln2_g);
        fn(p + "ln2.b", b.ln2_b);
        fn(p + "ln3.g", b.ln3_g);
        fn(p + "ln3.b", b.ln3_b);
        fn(p + "ff1", b.ff1);
        fn(p + "ff2", b.ff2);
    }
    fn("enc_lnf.g", enc_lnf_g);
    fn("enc_lnf.b", enc_lnf_b);
    fn("dec_lnf.g", dec_lnf_g);
    fn("dec_lnf.b", dec_lnf_b);
    fn("out_proj", out_proj);
}

void Transformer::for_each_adapted(
    const std::function<void(const std::string&, AdaptedLinear&)>& fn) {
    for (size_t l = 0; l < enc.size(); ++l) {
        std::string p = "enc" + std::to_string(l) + ".";
        fn(p + "q", enc[l].q);
        fn(p + "k", enc[l].k);
        fn(p + "v", enc[l].v);
        fn(p + "o", enc[l].o);
    }
    for (size_t l = 0; l < dec.size(); ++l) {
        std::string p = "dec" + std::to_string(l) + ".";
        fn(p + "self.q", dec[l].sq);
        fn(p + "self.k", dec[l].sk);
        fn(p + "self.v", dec[l].sv);
        fn(p + "self.o", dec[l].so);
        fn(p + "cross.q", dec[l].cq);
        fn(p + "cross.k", dec[l].ck);
        fn(p + "cross.v", dec[l].cv);
        fn(p + "cross.o", dec[l].co);
    }
}

std::vector<Node> Transformer::trainable_params() {
    std::vector<Node> out;
    for_each_base([&](const std::string&, Node& n) {
        if (n.requires_grad()) out.push_back(n);
    });
    for_each_adapted([&](const std::string&, AdaptedLinear& l) {
        if (l.lora) {
            out.push_back(l.lora->A);
            out.push_back(l.lora->B);
        }
        if (l.bank) {
            for (LoraFactors& f : l.bank->experts) {
                out.push_back(f.A);
                out.push_back(f.B);
            }
        }
    });
    return out;
}

long long Transformer::trainable_param_count() {
    long long total = 0;
    for (Node& n : trainable_params()) total += static_cast<long long>(n.value().size());
    return total;
}

namespace {

Node ln(const Node& x, const Node& g, const Node& b) { return layer_norm(x, g, b, 1e-5); }

Node embed(const Transformer& m, const std::vector<int>& ids) {
    if (static_cast<int>(ids.size()) > m.cfg.max_len) {
        throw LengthError("sequence of " + std::to_string(ids.size()) + " tokens exceeds max_len " +
                          std::to_string(m.cfg.max_len));
    }
    if (ids.empty()) throw LengthError("empty token sequence");
    int T = static_cast<int>(ids.size());
    Mat p(T, m.cfg.d_model);
    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < m.cfg.d_model; ++j) p.at(t, j) = m.pos.at(t, j);
    }
    return add(gather_rows(m.tok_emb, ids), Node::constant(std::move(p)));
}

Mat causal_mask(int T) {
    Mat mask(T, T);
    for (int i = 0; i < T; ++i) {
        for (int j = i + 1; j < T; ++j) mask.at(i, j) = -1e30;
    }
    return mask;
}

Node attention(const AdaptedLinear& Wq, const AdaptedLinear& Wk, const AdaptedLinear& Wv,
               const AdaptedLinear& Wo, const Node& xq, const Node& xkv, const Mat* mask,
               const Route& route, int n_heads) {
    Node q = apply_adapted(Wq, xq, route);
    Node k = apply_adapted(Wk, xkv, route);
    Node v = apply_adapted(Wv, xkv, route);
    int d = q.value().cols;
    int dh = d / n_heads;
    double inv = 1.0 / std::sqrt(double(dh));
    std::vector<Node> heads;
    heads.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) {
        Node qh = slice_cols(q, h * dh, (h + 1) * dh);
        Node kh = slice_cols(k, h * dh, (h + 1) * dh);
        Node vh = slice_cols(v, h * dh, (h + 1) * dh);
        Node scores = scale(matmul(qh, transpose(kh)), inv);
        if (mask) scores = add(scores, Node::constant(*mask));
        heads.push_back(matmul(softmax_rows(scores), vh));
    }
    return apply_adapted(Wo, concat_cols(heads), route);
}

Node ffn(const Node& x, const Node& ff1, const Node& ff2) {
    return matmul(relu(matmul(x, transpose(ff1))), transpose(ff2));
}

}  // namespace

Node encode_node(const Transformer& m, const std::vector<int>& src, const Route& route) {
    Node x = embed(m, src);
    for (const Transformer::EncBlock& b : m.enc) {
        Node h = ln(x, b.ln1_g, b.ln1_b);
        x = add(x, attention(b.q, b.k, b.v, b.o, h, h, nullptr, route, m.cfg.n_heads));
        Node h2 = ln(x, b.ln2_g, b.ln2_b);
        x = add(x, ffn(h2, b.ff1, b.ff2));
    }
    return ln(x, m.enc_lnf_g, m.enc_lnf_b);
}

Node decode_node(const Transformer& m, const Node& memory, const std::vector<int>& tgt,
                 const Route& route) {
    Node x = embed(m, tgt);
    Mat mask = causal_mask(static_cast<int>(tgt.size()));
    for (const Transformer::DecBlock& b : m.dec) {
        Node h = ln(x, b.ln1_g, b.ln1_b);
        x = add(x, attention(b.sq, b.sk, b.sv, b.so, h, h, &mask, route, m.cfg.n_heads));
        Node h2 = ln(x, b.ln2_g, b.ln2_b);
        x = add(x, attention(b.cq, b.ck, b.cv, b.co, h2, memory, nullptr, route, m.cfg.n_heads));
        Node h3 = ln(x, b.ln3_g, b.ln3_b);
        x = add(x, ffn(h3, b.ff1, b.ff2));
    }
    x = ln(x, m.dec_lnf_g, m.dec_lnf_b);
    return matmul(x, transpose(m.out_proj));
}

Node forward_node(const Transformer& m, const std::vector<int>& src,
                  const std::vector<int>& tgt, const Route& route) {
    return decode_node(m, encode_node(m, src, route), tgt, route);
}

Mat forward(const Transformer& m, const std::vector<int>& src, const std::vector<int>& tgt,
            const Route& route) {
    NoGradGuard g;
    return forward_node(m, src, tgt, route).value();
}

std::vector<int> greedy_decode(const Transformer& m, const std::vector<int>& src,
                               const Route& route, int max_new) {
    NoGradGuard g;
    Node memory = encode_node(m, src, route);
    std::vector<int> prefix{kBosId};
    std::vector<int> out;
    while (static_cast<int>(out.size()) < max_new &&
           static_cast<int>(prefix.size()) < m.cfg.max_len) {
        Node logits = decode_node(m, memory, prefix, route);
        const Mat& lv = logits.value();
        int last = lv.rows - 1;
        int best = 0;
        double bv = lv.at(last, 0);
        for (int j = 1; j < lv.cols; ++j) {
            if (lv.at(last, j) > bv) {
                bv = lv.at(last, j);
                best = j;
            }
        }
        if (best == kEosId) break;
        out.push_back(best);
        prefix.push_back(best);
    }
    return out;
}

std::vector<int> greedy_decode(const Transformer& m, const std::vector<int>& src,
                               const MixSpec& mix, int max_new) {
    return greedy_decode(m, src, m.mix_route(mix), max_new);
}

Transformer merge_all(const Transformer& m, const std::vector<double>& w) {
    Transformer out = m;  // shares every Node; projections replaced below
    out.ft.encoder = out.ft.encoder == FtMethod::Full ? FtMethod::Full : FtMethod::NoFT;
    out.ft.decoder = out.ft.decoder == FtMethod::Full ? FtMethod::Full : FtMethod::NoFT;

    auto fold = [&](AdaptedLinear& l) {
        if (l.bank && l.bank->size() != static_cast<int>(w.size())) {
            throw ConfigError("merge_all: " + std::to_string(w.size()) + " weights for bank of " +
                              std::to_string(l.bank->size()));
        }
        if (l.method == FtMethod::Lora || l.method == FtMethod::MasLora) {
            l = adapt_none(merge(l, w));
        }
    };
    for (Transformer::EncBlock& b : out.enc) {
        fold(b.q);
        fold(b.k);
        fold(b.v);
        fold(b.o);
    }
    for (Transformer::DecBlock& b : out.dec) {
        fold(b.sq);
        fold(b.sk);
        fold(b.sv);
        fold(b.so);
        fold(b.cq);
        fold(b.ck);
        fold(b.cv);
        fold(b.co);
    }
    return out;
}

}  // namespace maslora
