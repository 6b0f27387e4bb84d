#pragma once

#include <functional>
#include <string>
#include <vector>

#include "maslora/adapters.hpp"
#include "maslora/autodiff.hpp"
#include "maslora/tokens.hpp"

namespace maslora {

struct ModelConfig {
    int vocab_size = 45;
    int d_model = 64;
    int n_heads = 4;
    int enc_layers = 2;
    int dec_layers = 2;
    int ffn_dim = 128;
    int max_len = 24;
};

struct FtConfig {
    FtMethod encoder = FtMethod::NoFT;
    FtMethod decoder = FtMethod::NoFT;
    AttachSet attach = AttachSet::qv();
    int r = 16;
    double alpha = 1.0;
    std::vector<std::string> accent_ids;  // bank order for MasLora sides

    int n_accents() const { return static_cast<int>(accent_ids.size()); }
};

// Pre-LN encoder-decoder transformer. Activations are rows: a length-T
// sequence flows as a T x d_model Mat. Per-head attention slices the
// single d x d Q/K/V/O projections so adapters see whole matrices.
struct Transformer {
    ModelConfig cfg;
    FtConfig ft;
    Mat pos;  // max_len x d_model sinusoidal table, frozen

    Node tok_emb;   // vocab x d
    Node out_proj;  // vocab x d

    struct EncBlock {
        AdaptedLinear q, k, v, o;
        Node ln1_g, ln1_b, ln2_g, ln2_b;
        Node ff1, ff2;  // ffn x d, d x ffn
    };
    struct DecBlock {
        AdaptedLinear sq, sk, sv, so;  // causal self-attention
        AdaptedLinear cq, ck, cv, co;  // cross-attention into the encoder
        Node ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
        Node ff1, ff2;
    };
    std::vector<EncBlock> enc;
    std::vector<DecBlock> dec;
    Node enc_lnf_g, enc_lnf_b, dec_lnf_g, dec_lnf_b;

    bool has_banks() const {
        return ft.encoder == FtMethod::MasLora || ft.decoder == FtMethod::MasLora;
    }
    int accent_index(const std::string& accent_id) const;  // RoutingError if unknown

    Route train_route(const std::string& accent_id) const;
    Route mix_route(const MixSpec& mix) const;

    // Every weight that exists regardless of adapters, in a fixed
    // order: embeddings, per-block projections / norms / ffn, final
    // norms, output projection.
    void for_each_base(const std::function<void(const std::string&, Node&)>& fn);
    void for_each_adapted(const std::function<void(const std::string&, AdaptedLinear&)>& fn);
    std::vector<Node> trainable_params();
    long long trainable_param_count();
};

Transformer build(const ModelConfig& cfg, const FtConfig& ft, Rng& rng);

// Teacher-forced graph ops. src/tgt hold token ids; logits come back
// as one row per target position.
Node encode_node(const Transformer& m, const std::vector<int>& src, const Route& route);
Node decode_node(const Transformer& m, const Node& memory, const std::vector<int>& tgt,
                 const Route& route);
Node forward_node(const Transformer& m, const std::vector<int>& src,
                  const std::vector<int>& tgt, const Route& route);
Mat forward(const Transformer& m, const std::vector<int>& src, const std::vector<int>& tgt,
            const Route& route);

// Argmax decoding from BOS until EOS or max_new tokens; the returned
// sequence carries neither BOS nor EOS.
std::vector<int> greedy_decode(const Transformer& m, const std::vector<int>& src,
                               const Route& route, int max_new);
std::vector<int> greedy_decode(const Transformer& m, const std::vector<int>& src,
                               const MixSpec& mix, int max_new);

// Replaces every adapted projection by its densely merged weight and
// shares everything else; the result is a plain model whose forward
// matches the runtime mixture.
Transformer merge_all(const Transformer& m, const std::vector<double>& w);

}  // namespace maslora
