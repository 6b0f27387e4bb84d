#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <map>

#include "doctest.h"
#include "maslora/errors.hpp"
#include "maslora/model.hpp"
#include "maslora/tokens.hpp"

using namespace maslora;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig mc;
    mc.vocab_size = 17;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.enc_layers = 2;
    mc.dec_layers = 2;
    mc.ffn_dim = 24;
    mc.max_len = 10;
    return mc;
}

std::vector<std::string> accents(int n) {
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back("a" + std::to_string(i));
    return ids;
}

FtConfig bank_cfg(int n, int r = 2) {
    FtConfig ft;
    ft.encoder = FtMethod::MasLora;
    ft.decoder = FtMethod::Lora;
    ft.attach = AttachSet::qv();
    ft.r = r;
    ft.accent_ids = accents(n);
    return ft;
}

std::map<std::string, Mat> weights_of(Transformer& m) {
    std::map<std::string, Mat> out;
    m.for_each_base([&](const std::string& name, Node& n) { out.emplace(name, n.value()); });
    return out;
}

void randomize_adapters(Transformer& m, uint64_t seed) {
    Rng rng(seed);
    m.for_each_adapted([&](const std::string&, AdaptedLinear& l) {
        if (l.lora) {
            l.lora->B.value_mut() =
                Mat::randn(l.lora->B.value().rows, l.lora->B.value().cols, 0.3, rng);
        }
        if (l.bank) {
            for (auto& e : l.bank->experts) {
                e.B.value_mut() = Mat::randn(e.B.value().rows, e.B.value().cols, 0.3, rng);
            }
        }
    });
}

}  // namespace

TEST_CASE("build is deterministic per seed") {
    ModelConfig mc = tiny_cfg();
    FtConfig ft = bank_cfg(3);
    Rng r1(9), r2(9), r3(10);
    Transformer a = build(mc, ft, r1);
    Transformer b = build(mc, ft, r2);
    Transformer c = build(mc, ft, r3);

    auto wa = weights_of(a), wb = weights_of(b), wc = weights_of(c);
    CHECK(wa.size() == wb.size());
    bool all_eq = true, any_diff = false;
    for (const auto& [name, mat] : wa) {
        all_eq = all_eq && bitwise_equal(mat, wb.at(name));
        any_diff = any_diff || !bitwise_equal(mat, wc.at(name));
    }
    CHECK(all_eq);
    CHECK(any_diff);
}

TEST_CASE("base weights are identical across fine-tuning configs") {
    ModelConfig mc = tiny_cfg();
    Rng r1(5), r2(5), r3(5);
    FtConfig noft;
    Transformer plain = build(mc, noft, r1);
    Transformer bank = build(mc, bank_cfg(4), r2);
    FtConfig full;
    full.encoder = FtMethod::Full;
    full.decoder = FtMethod::Full;
    Transformer dense = build(mc, full, r3);

    auto wp = weights_of(plain), wb = weights_of(bank), wd = weights_of(dense);
    CHECK(wp.size() == wb.size());
    CHECK(wp.size() == wd.size());
    for (const auto& [name, mat] : wp) {
        CHECK(bitwise_equal(mat, wb.at(name)));
        CHECK(bitwise_equal(mat, wd.at(name)));
    }
}

TEST_CASE("fresh adapters leave logits untouched under every mix") {
    ModelConfig mc = tiny_cfg();
    Rng r1(12), r2(12);
    FtConfig noft;
    Transformer plain = build(mc, noft, r1);
    FtConfig ft = bank_cfg(3);
    ft.decoder = FtMethod::MasLora;
    Transformer bank = build(mc, ft, r2);

    std::vector<int> src = {4, 5, 6, 7};
    std::vector<int> tgt = {kBosId, 4, 5};
    Mat base_logits = forward(plain, src, tgt, Route::mix({}));

    std::vector<MixSpec> mixes = {MixSpec::uniform_mix(), MixSpec::aware(0, 2.0),
                                  MixSpec::aware(2, 3.0), MixSpec::aware(1, 1.0),
                                  MixSpec::single(2)};
    for (const MixSpec& ms : mixes) {
        Mat got = forward(bank, src, tgt, bank.mix_route(ms));
        CHECK(max_abs_diff(got, base_logits) < 1e-12);
    }
    for (int e = 0; e < 3; ++e) {
        Mat got = forward(bank, src, tgt, bank.train_route("a" + std::to_string(e)));
        CHECK(max_abs_diff(got, base_logits) < 1e-12);
    }
}

TEST_CASE("decoder is causal") {
    ModelConfig mc = tiny_cfg();
    FtConfig ft = bank_cfg(2);
    Rng rng(21);
    Transformer m = build(mc, ft, rng);
    randomize_adapters(m, 77);
    Route route = m.mix_route(MixSpec::uniform_mix());

    std::vector<int> src = {4, 9, 10};
    std::vector<int> t1 = {kBosId, 5, 6, 7, 8};
    std::vector<int> t2 = {kBosId, 5, 6, 12, 13};  // diverges at position 3
    Mat l1 = forward(m, src, t1, route);
    Mat l2 = forward(m, src, t2, route);
    for (int t = 0; t < 3; ++t) {
        for (int v = 0; v < mc.vocab_size; ++v) {
            CHECK(l1.at(t, v) == l2.at(t, v));
        }
    }
    bool later_differs = false;
    for (int v = 0; v < mc.vocab_size; ++v) later_differs |= l1.at(3, v) != l2.at(3, v);
    CHECK(later_differs);
}

TEST_CASE("merged model matches runtime mixture end to end") {
    ModelConfig mc = tiny_cfg();
    FtConfig ft = bank_cfg(4);
    ft.decoder = FtMethod::MasLora;
    Rng rng(31);
    Transformer m = build(mc, ft, rng);
    randomize_adapters(m, 123);

    std::vector<int> src = {4, 5, 11, 12, 13};
    std::vector<int> tgt = {kBosId, 4, 5, 11};
    for (const MixSpec& ms :
         {MixSpec::uniform_mix(), MixSpec::aware(1, 2.5), MixSpec::single(3)}) {
        auto w = mixture_weights(ms, 4);
        Mat runtime = forward(m, src, tgt, Route::mix(w));
        Transformer folded = merge_all(m, w);
        CHECK_FALSE(folded.has_banks());
        Mat dense = forward(folded, src, tgt, Route::mix({}));
        CHECK(max_abs_diff(runtime, dense) < 1e-9);
    }
    CHECK_THROWS_AS(merge_all(m, {0.5, 0.5}), ConfigError);
}

TEST_CASE("greedy decode is deterministic and bounded") {
    ModelConfig mc = tiny_cfg();
    FtConfig ft = bank_cfg(3);
    Rng rng(41);
    Transformer m = build(mc, ft, rng);
    randomize_adapters(m, 55);

    std::vector<int> src = {4, 5, 6};
    auto h1 = greedy_decode(m, src, MixSpec::uniform_mix(), mc.max_len);
    auto h2 = greedy_decode(m, src, MixSpec::uniform_mix(), mc.max_len);
    CHECK(h1 == h2);
    CHECK(static_cast<int>(h1.size()) <= mc.max_len - 1);
    for (int t : h1) {
        CHECK(t != kBosId);
        CHECK(t != kEosId);
        CHECK(t != kPadId);
    }
}

TEST_CASE("training moves adapters but never the frozen base") {
    ModelConfig mc = tiny_cfg();
    FtConfig ft = bank_cfg(2);
    Rng rng(51);
    Transformer m = build(mc, ft, rng);
    auto before = weights_of(m);

    std::vector<int> src = {4, 5, 6, 7};
    std::vector<int> tin = {kBosId, 4, 5, 6};
    std::vector<int> tout = {4, 5, 6, kEosId};
    auto params = m.trainable_params();
    CHECK(params.size() > 0);
    for (int step = 0; step < 3; ++step) {
        Node loss = cross_entropy(forward_node(m, src, tin, m.train_route("a0")), tout, kPadId);
        backward(loss);
        for (Node& p : params) {
            add_scaled_inplace(p.value_mut(), p.grad(), -0.1);
            p.zero_grad();
        }
    }

    auto after = weights_of(m);
    for (const auto& [name, mat] : before) CHECK(bitwise_equal(mat, after.at(name)));

    double moved = 0.0;
    m.for_each_adapted([&](const std::string&, AdaptedLinear& l) {
        if (l.bank) {
            moved = std::max(moved, max_abs(l.bank->experts[0].B.value()));
        }
    });
    CHECK(moved > 0.0);
}

TEST_CASE("trainable parameter count matches the audit") {
    ModelConfig mc = tiny_cfg();
    Rng r0(3);
    FtConfig noft;
    Transformer probe = build(mc, noft, r0);
    long long base_total = 0;
    probe.for_each_base([&](const std::string&, Node& n) {
        base_total += static_cast<long long>(n.value().size());
    });

    for (auto [enc, dec] : std::initializer_list<std::pair<FtMethod, FtMethod>>{
             {FtMethod::NoFT, FtMethod::NoFT},
             {FtMethod::Full, FtMethod::Full},
             {FtMethod::Lora, FtMethod::Lora},
             {FtMethod::MasLora, FtMethod::NoFT},
             {FtMethod::MasLora, FtMethod::Lora},
             {FtMethod::MasLora, FtMethod::MasLora}}) {
        FtConfig ft;
        ft.encoder = enc;
        ft.decoder = dec;
        ft.attach = AttachSet::qv();
        ft.r = 2;
        if (enc == FtMethod::MasLora || dec == FtMethod::MasLora) ft.accent_ids = accents(3);
        Rng rng(3);
        Transformer m = build(mc, ft, rng);
        ParamShape shape{mc.d_model, mc.enc_layers, mc.dec_layers, ft.attach, base_total};
        ParamAudit audit = param_count(shape, enc, dec, ft.r, 3);
        CHECK(m.trainable_param_count() == audit.trained);
    }
}

TEST_CASE("build validates its inputs") {
    Rng rng(1);
    ModelConfig bad = tiny_cfg();
    bad.d_model = 15;  // not divisible by heads
    FtConfig noft;
    CHECK_THROWS_AS(build(bad, noft, rng), ConfigError);

    ModelConfig mc = tiny_cfg();
    FtConfig mixed;
    mixed.encoder = FtMethod::Full;
    mixed.decoder = FtMethod::Lora;
    CHECK_THROWS_AS(build(mc, mixed, rng), ConfigError);

    FtConfig no_accents;
    no_accents.encoder = FtMethod::MasLora;
    no_accents.decoder = FtMethod::NoFT;
    CHECK_THROWS_AS(build(mc, no_accents, rng), ConfigError);

    FtConfig big_rank = bank_cfg(2, 64);
    CHECK_THROWS_AS(build(mc, big_rank, rng), ConfigError);
}

TEST_CASE("sequence length limits are enforced") {
    ModelConfig mc = tiny_cfg();
    FtConfig noft;
    Rng rng(2);
    Transformer m = build(mc, noft, rng);
    std::vector<int> too_long(mc.max_len + 1, 4);
    std::vector<int> tgt = {kBosId, 4};
    CHECK_THROWS_AS(forward(m, too_long, tgt, Route::mix({})), LengthError);
    CHECK_THROWS_AS(forward(m, {}, tgt, Route::mix({})), LengthError);
}

TEST_CASE("unknown accent raises a routing error") {
    ModelConfig mc = tiny_cfg();
    FtConfig ft = bank_cfg(2);
    Rng rng(4);
    Transformer m = build(mc, ft, rng);
    CHECK_THROWS_AS(m.train_route("a7"), RoutingError);
    CHECK(m.accent_index("a1") == 1);
    CHECK_THROWS_AS(m.accent_index("zz"), RoutingError);
}
