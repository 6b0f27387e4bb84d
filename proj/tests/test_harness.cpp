#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "maslora/checkpoint.hpp"
#include "maslora/errors.hpp"
#include "maslora/harness.hpp"

using namespace maslora;
namespace fs = std::filesystem;

namespace {

CorpusConfig tiny_corpus() {
    CorpusConfig c;
    c.n_accents = 2;
    c.speakers_per_accent = 2;
    c.n_sentences = 10;
    c.n_words = 12;
    c.subs_per_accent = 3;
    c.max_sentence_len = 6;
    c.seed = 4;
    return c;
}

ModelConfig tiny_model(const Manifest& man) {
    ModelConfig mc;
    mc.vocab_size = man.vocab_size;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.enc_layers = 1;
    mc.dec_layers = 1;
    mc.ffn_dim = 24;
    mc.max_len = man.max_seq_len() + 2;
    return mc;
}

FtConfig bank_ft(const Manifest& man) {
    FtConfig ft;
    ft.encoder = FtMethod::MasLora;
    ft.decoder = FtMethod::Lora;
    ft.attach = AttachSet::qv();
    ft.r = 2;
    ft.accent_ids = man.accent_ids();
    return ft;
}

// Copy-task manifest: one clean voice reading fresh sentences.
Manifest copy_manifest(int n_sentences) {
    CorpusConfig c = tiny_corpus();
    Manifest m;
    m.cfg = c;
    m.vocab_size = 3 + c.n_words + c.n_accents * c.subs_per_accent;
    AccentSpec native;
    native.accent_id = "native";
    m.accents.push_back(native);
    Speaker sp;
    sp.speaker_id = "native_s0";
    sp.accent_id = "native";
    sp.severity = 0.0;
    m.speakers.push_back(sp);
    m.utterances = gen_clean_utterances(c, n_sentences, 500, 21);
    for (const Utterance& u : m.utterances) {
        Sentence s;
        s.id = u.sentence_id;
        s.canonical = u.reference;
        m.sentences.push_back(s);
    }
    return m;
}

std::vector<Mat> param_values(Transformer& m) {
    std::vector<Mat> vals;
    for (Node& p : m.trainable_params()) vals.push_back(p.value());
    return vals;
}

}  // namespace

TEST_CASE("learning rate schedule endpoints") {
    CHECK(lr_at(0, 100, 0.5) == 0.5);
    CHECK(lr_at(100, 100, 0.5) == 0.25);
    CHECK(lr_at(50, 100, 0.5) == doctest::Approx(0.375).epsilon(1e-15));
    CHECK_THROWS_AS(lr_at(101, 100, 0.5), DomainError);
    CHECK_THROWS_AS(lr_at(-1, 100, 0.5), DomainError);
    CHECK_THROWS_AS(lr_at(0, 0, 0.5), DomainError);
}

TEST_CASE("config files parse into the spec") {
    const char* path = "/tmp/harness_cfg.txt";
    {
        std::ofstream f(path);
        f << "# comment line\n";
        f << "n_accents = 3\n";
        f << "seeds = 7,8\n";
        f << "folds = 0,2\n";
        f << "grid = noft+noft, maslora+lora\n";
        f << "attach = qkvo   # trailing comment\n";
        f << "r = 6\n";
        f << "lr_adapter = 1e-3\n";
        f << "out_dir = /tmp/xyz\n";
    }
    ExperimentSpec spec;
    for (const auto& [k, v] : read_config(path)) apply_kv(spec, k, v);
    CHECK(spec.corpus.n_accents == 3);
    CHECK(spec.seeds == std::vector<uint64_t>{7, 8});
    CHECK(spec.folds == std::vector<int>{0, 2});
    REQUIRE(spec.grid.size() == 2);
    CHECK(spec.grid[1].encoder == FtMethod::MasLora);
    CHECK(spec.grid[1].decoder == FtMethod::Lora);
    CHECK(spec.attach.count() == 4);
    CHECK(spec.r == 6);
    CHECK(spec.lr_adapter == 1e-3);
    CHECK(spec.out_dir == "/tmp/xyz");

    CHECK_THROWS_AS(apply_kv(spec, "no_such_key", "1"), ConfigError);
    CHECK_THROWS_AS(apply_kv(spec, "r", "abc"), ConfigError);
    CHECK_THROWS_AS(apply_kv(spec, "grid", "maslora"), ConfigError);

    {
        std::ofstream f(path);
        f << "key_without_value\n";
    }
    CHECK_THROWS_AS(read_config(path), ConfigError);
    CHECK_THROWS_AS(read_config("/tmp/missing_config_file.txt"), IoError);
}

TEST_CASE("reference grid order") {
    auto g = reference_grid();
    REQUIRE(g.size() == 6);
    CHECK(g[0].name() == "noft+noft");
    CHECK(g[1].name() == "full+full");
    CHECK(g[2].name() == "lora+lora");
    CHECK(g[3].name() == "maslora+noft");
    CHECK(g[4].name() == "maslora+lora");
    CHECK(g[5].name() == "maslora+maslora");
}

TEST_CASE("model config follows the manifest") {
    ExperimentSpec spec;
    spec.corpus = tiny_corpus();
    Manifest man = gen_corpus(spec.corpus);
    ModelConfig mc = model_config_for(spec, man);
    CHECK(mc.vocab_size == man.vocab_size);
    CHECK(mc.max_len >= man.max_seq_len() + 2);
    CHECK(mc.d_model == spec.d_model);
}

TEST_CASE("zero epochs leave the model untouched") {
    Manifest man = gen_corpus(tiny_corpus());
    ModelConfig mc = tiny_model(man);
    Rng rng(3);
    Transformer m = build(mc, bank_ft(man), rng);
    Rng frng(5);
    auto folds = make_folds(man, 2, 0.8, 0.1, 0.1, frng);

    auto before = param_values(m);
    TrainConfig tc;
    tc.epochs = 0;
    TrainHistory hist = train(m, man, folds[0], tc);
    auto after = param_values(m);
    REQUIRE(before.size() == after.size());
    for (size_t i = 0; i < before.size(); ++i) CHECK(bitwise_equal(before[i], after[i]));
    CHECK(hist.train_loss.empty());
    CHECK(hist.valid_wer.size() == 1);
    CHECK(hist.best_epoch == 0);
}

TEST_CASE("training the copy task reduces the loss") {
    Manifest man = copy_manifest(24);
    ModelConfig mc = tiny_model(man);
    FtConfig full;
    full.encoder = FtMethod::Full;
    full.decoder = FtMethod::Full;
    Rng rng(11);
    Transformer m = build(mc, full, rng);

    FoldSpec fold;
    fold.fold_index = 0;
    for (int i = 0; i < 20; ++i) fold.train_ids.push_back(i);
    for (int i = 20; i < 24; ++i) fold.valid_ids.push_back(i);

    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 4;
    tc.lr0 = 0.15;
    tc.seed = 9;
    TrainHistory hist = train(m, man, fold, tc);
    REQUIRE(hist.train_loss.size() == 3);
    CHECK(hist.train_loss.back() < hist.train_loss.front());
    CHECK(hist.valid_wer.size() == 4);
    CHECK(hist.best_valid_wer <= hist.valid_wer[0]);
    CHECK(hist.seen_ids.size() == 24);
}

TEST_CASE("training is deterministic") {
    Manifest man = gen_corpus(tiny_corpus());
    ModelConfig mc = tiny_model(man);
    Rng f1(5), f2(5);
    auto folds1 = make_folds(man, 2, 0.8, 0.1, 0.1, f1);
    auto folds2 = make_folds(man, 2, 0.8, 0.1, 0.1, f2);

    auto run = [&](const FoldSpec& fold) {
        Rng rng(13);
        Transformer m = build(mc, bank_ft(man), rng);
        TrainConfig tc;
        tc.epochs = 2;
        tc.batch_size = 4;
        tc.lr0 = 0.05;
        tc.seed = 42;
        train(m, man, fold, tc);
        return param_values(m);
    };
    auto a = run(folds1[0]);
    auto b = run(folds2[0]);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(a[i], b[i]));
}

TEST_CASE("train rejects accents missing from the bank") {
    Manifest man = gen_corpus(tiny_corpus());
    ModelConfig mc = tiny_model(man);
    FtConfig ft = bank_ft(man);
    ft.accent_ids = {"a0"};  // drop a1
    Rng rng(3);
    Transformer m = build(mc, ft, rng);
    Rng frng(5);
    auto folds = make_folds(man, 2, 0.8, 0.1, 0.1, frng);
    TrainConfig tc;
    tc.epochs = 1;
    CHECK_THROWS_AS(train(m, man, folds[0], tc), RoutingError);
}

TEST_CASE("uniform evaluation equals aware at beta = n exactly") {
    Manifest man = gen_corpus(tiny_corpus());
    ModelConfig mc = tiny_model(man);
    Rng rng(17);
    Transformer m = build(mc, bank_ft(man), rng);
    // give the experts something to disagree about
    Rng arng(23);
    m.for_each_adapted([&](const std::string&, AdaptedLinear& l) {
        if (l.bank) {
            for (auto& e : l.bank->experts) {
                e.B.value_mut() = Mat::randn(e.B.value().rows, e.B.value().cols, 0.4, arng);
            }
        }
        if (l.lora) {
            l.lora->B.value_mut() =
                Mat::randn(l.lora->B.value().rows, l.lora->B.value().cols, 0.4, arng);
        }
    });

    std::vector<int> ids;  // both accents: a0 speakers sit first, a1 after
    for (int i = 0; i < 10; ++i) ids.push_back(i);
    for (int i = 20; i < 30; ++i) ids.push_back(i);

    EvalOptions uni;
    uni.mix = MixSpec::uniform_mix();
    EvalOptions aware_n;
    aware_n.mix = MixSpec::aware(0, double(m.ft.n_accents()));
    EvalResult ru = evaluate(m, man, ids, uni);
    EvalResult ra = evaluate(m, man, ids, aware_n);
    CHECK(ru.pooled_wer == ra.pooled_wer);
    REQUIRE(ru.per_utt.size() == ra.per_utt.size());
    for (size_t i = 0; i < ru.per_utt.size(); ++i) {
        CHECK(ru.per_utt[i].errors == ra.per_utt[i].errors);
    }

    EvalOptions single0;
    single0.mix = MixSpec::single(0);
    EvalOptions aware1;
    aware1.mix = MixSpec::aware(0, 1.0);
    EvalResult rs = evaluate(m, man, ids, single0);
    EvalResult r1 = evaluate(m, man, ids, aware1);
    CHECK(rs.pooled_wer == r1.pooled_wer);

    EvalOptions threaded = uni;
    threaded.threads = 4;
    EvalResult rt = evaluate(m, man, ids, threaded);
    CHECK(rt.pooled_wer == ru.pooled_wer);
    for (size_t i = 0; i < ru.per_utt.size(); ++i) {
        CHECK(rt.per_utt[i].errors == ru.per_utt[i].errors);
    }

    CHECK(ru.accent_wer.size() == 2);
    CHECK_THROWS_AS(evaluate(m, man, {}, uni), DomainError);
    CHECK_THROWS_AS(evaluate(m, man, {99999}, uni), IndexError);
}

TEST_CASE("checkpoints round trip bitwise") {
    Manifest man = gen_corpus(tiny_corpus());
    ModelConfig mc = tiny_model(man);
    FtConfig ft = bank_ft(man);
    ft.decoder = FtMethod::MasLora;
    Rng rng(29);
    Transformer m = build(mc, ft, rng);
    Rng arng(31);
    m.for_each_adapted([&](const std::string&, AdaptedLinear& l) {
        if (l.bank) {
            for (auto& e : l.bank->experts) {
                e.B.value_mut() = Mat::randn(e.B.value().rows, e.B.value().cols, 0.4, arng);
            }
        }
    });

    const std::string dir = "/tmp/ckpt_rt";
    fs::remove_all(dir);
    save_model(dir, m, 29);
    uint64_t seed = 0;
    Transformer r = load_model(dir, &seed);
    CHECK(seed == 29);
    CHECK(r.cfg.vocab_size == mc.vocab_size);
    CHECK(r.ft.encoder == ft.encoder);
    CHECK(r.ft.decoder == ft.decoder);
    CHECK(r.ft.accent_ids == ft.accent_ids);

    auto wm = base_weights(m);
    auto wr = base_weights(r);
    REQUIRE(wm.size() == wr.size());
    for (const auto& [name, mat] : wm) CHECK(bitwise_equal(mat, wr.at(name)));

    std::vector<int> src = man.utterances[0].observed;
    auto h1 = greedy_decode(m, src, MixSpec::uniform_mix(), mc.max_len);
    auto h2 = greedy_decode(r, src, MixSpec::uniform_mix(), mc.max_len);
    CHECK(h1 == h2);

    CHECK_THROWS_AS(load_model("/tmp/ckpt_missing_dir", nullptr), IoError);
}

TEST_CASE("base weight snapshots transfer between configs") {
    Manifest man = gen_corpus(tiny_corpus());
    ModelConfig mc = tiny_model(man);
    FtConfig full;
    full.encoder = FtMethod::Full;
    full.decoder = FtMethod::Full;
    Rng r1(41);
    Transformer donor = build(mc, full, r1);
    auto weights = base_weights(donor);

    Rng r2(99);  // different init, then overwritten
    Transformer taker = build(mc, bank_ft(man), r2);
    apply_base_weights(taker, weights);
    auto got = base_weights(taker);
    for (const auto& [name, mat] : weights) CHECK(bitwise_equal(mat, got.at(name)));
}

TEST_CASE("beta sweep writes outputs and demands expert banks") {
    Manifest man = gen_corpus(tiny_corpus());
    ModelConfig mc = tiny_model(man);
    Rng rng(43);
    Transformer m = build(mc, bank_ft(man), rng);
    std::vector<int> ids = {0, 1, 2, 3, 4, 5};

    const std::string dir = "/tmp/beta_out";
    fs::remove_all(dir);
    auto curve = beta_sweep(m, man, ids, {1.0, 2.0}, dir, 1);
    REQUIRE(curve.size() == 2);
    CHECK(curve[0].first == 1.0);
    // fresh adapters: every beta scores the same
    CHECK(curve[0].second == curve[1].second);
    CHECK(fs::exists(dir + "/beta_sweep.csv"));
    CHECK(fs::exists(dir + "/beta_sweep.svg"));

    CHECK_THROWS_AS(beta_sweep(m, man, ids, {0.5}, dir, 1), DomainError);
    CHECK_THROWS_AS(beta_sweep(m, man, ids, {}, dir, 1), DomainError);

    FtConfig noft;
    Rng r2(3);
    Transformer plain = build(mc, noft, r2);
    CHECK_THROWS_AS(beta_sweep(plain, man, ids, {1.0}, dir, 1), ConfigError);
}

TEST_CASE("clean eval set is stable across run seeds") {
    ExperimentSpec spec;
    spec.corpus = tiny_corpus();
    spec.clean_sentences = 12;
    auto a = clean_eval_set(spec);
    auto b = clean_eval_set(spec);
    REQUIRE(a.size() == 12);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].observed == b[i].observed);
        CHECK(a[i].observed == a[i].reference);
    }
}
