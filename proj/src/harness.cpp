#include "maslora/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "maslora/checkpoint.hpp"
#include "maslora/errors.hpp"
#include "maslora/report.hpp"

namespace fs = std::filesystem;

namespace maslora {

double lr_at(long long step, long long total_steps, double lr0) {
    if (total_steps < 1) throw DomainError("lr schedule needs at least one step");
    if (step < 0 || step > total_steps) {
        throw DomainError("step " + std::to_string(step) + " outside schedule of " +
                          std::to_string(total_steps));
    }
    return lr0 * (1.0 - double(step) / (2.0 * double(total_steps)));
}

namespace {

const Utterance& utt_at(const Manifest& man, int id) {
    if (id < 0 || id >= static_cast<int>(man.utterances.size())) {
        throw IndexError("utterance id " + std::to_string(id) + " outside manifest of " +
                         std::to_string(man.utterances.size()));
    }
    return man.utterances[static_cast<size_t>(id)];
}

double grad_sq_norm(std::vector<Node>& params) {
    double sq = 0.0;
    for (Node& p : params) {
        for (double g : p.grad().data) sq += g * g;
    }
    return sq;
}

}  // namespace

TrainHistory train(Transformer& m, const Manifest& man, const FoldSpec& fold,
                   const TrainConfig& tc) {
    if (tc.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (tc.batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (tc.lr0 <= 0) throw ConfigError("learning rate must be positive");

    std::vector<Node> params = m.trainable_params();

    TrainHistory hist;
    hist.seen_ids = fold.train_ids;
    hist.seen_ids.insert(hist.seen_ids.end(), fold.valid_ids.begin(), fold.valid_ids.end());

    std::map<std::string, std::vector<int>> groups;
    for (int id : fold.train_ids) groups[utt_at(man, id).accent_id].push_back(id);
    for (const auto& [accent, ids] : groups) {
        (void)ids;
        m.train_route(accent);  // surfaces unknown accents before any work
    }

    bool has_valid = !fold.valid_ids.empty();
    EvalOptions veo;
    veo.mix = MixSpec::uniform_mix();
    veo.threads = tc.threads;
    auto validate_wer = [&]() { return evaluate(m, man, fold.valid_ids, veo).pooled_wer; };
    auto snapshot = [&]() {
        std::vector<Mat> s;
        s.reserve(params.size());
        for (Node& p : params) s.push_back(p.value());
        return s;
    };

    std::vector<Mat> best_vals = snapshot();
    hist.best_epoch = 0;
    if (has_valid) {
        hist.valid_wer.push_back(validate_wer());
        hist.best_valid_wer = hist.valid_wer[0];
    }
    if (params.empty() || tc.epochs == 0 || fold.train_ids.empty()) return hist;

    long long batches_per_epoch = 0;
    for (const auto& [accent, ids] : groups) {
        batches_per_epoch += (static_cast<long long>(ids.size()) + tc.batch_size - 1) / tc.batch_size;
    }
    long long total_steps = batches_per_epoch * tc.epochs;
    long long step = 0;
    Rng order_rng(tc.seed);

    for (int e = 1; e <= tc.epochs; ++e) {
        auto shuffled = groups;
        Rng erng = order_rng.derive(0xE60000ULL + static_cast<uint64_t>(e));
        for (auto& [accent, ids] : shuffled) {
            (void)accent;
            erng.shuffle(ids);
        }

        double epoch_loss = 0.0;
        long long epoch_batches = 0;
        for (size_t b = 0;; ++b) {
            bool any = false;
            for (const auto& [accent, ids] : shuffled) {
                size_t start = b * static_cast<size_t>(tc.batch_size);
                if (start >= ids.size()) continue;
                any = true;
                size_t stop = std::min(ids.size(), start + tc.batch_size);
                int bn = static_cast<int>(stop - start);
                double lr = lr_at(step, total_steps, tc.lr0);
                Route route = m.train_route(accent);

                double batch_loss = 0.0;
                for (size_t i = start; i < stop; ++i) {
                    const Utterance& u = man.utterances[static_cast<size_t>(ids[i])];
                    std::vector<int> tgt_in;
                    tgt_in.reserve(u.reference.size() + 1);
                    tgt_in.push_back(kBosId);
                    tgt_in.insert(tgt_in.end(), u.reference.begin(), u.reference.end());
                    std::vector<int> tgt_out = u.reference;
                    tgt_out.push_back(kEosId);

                    Node loss = cross_entropy(forward_node(m, u.observed, tgt_in, route),
                                              tgt_out, kPadId);
                    batch_loss += loss.value().at(0, 0);
                    backward(scale(loss, 1.0 / bn));
                }
                if (tc.clip_norm > 0) {
                    double norm = std::sqrt(grad_sq_norm(params));
                    if (norm > tc.clip_norm) {
                        double s = tc.clip_norm / norm;
                        for (Node& p : params) {
                            for (double& g : p.grad_mut().data) g *= s;
                        }
                    }
                }
                for (Node& p : params) {
                    add_scaled_inplace(p.value_mut(), p.grad(), -lr);
                    p.zero_grad();
                }
                ++step;
                epoch_loss += batch_loss / bn;
                ++epoch_batches;
            }
            if (!any) break;
        }
        hist.train_loss.push_back(epoch_batches ? epoch_loss / epoch_batches : 0.0);

        if (has_valid) {
            double vw = validate_wer();
            hist.valid_wer.push_back(vw);
            if (vw < hist.best_valid_wer) {
                hist.best_valid_wer = vw;
                hist.best_epoch = e;
                best_vals = snapshot();
            }
        } else {
            hist.best_epoch = e;  // no signal to pick by; final weights stand
        }
    }

    if (has_valid && hist.best_epoch != tc.epochs) {
        for (size_t i = 0; i < params.size(); ++i) params[i].value_mut() = best_vals[i];
    }
    return hist;
}

EvalResult evaluate_utts(const Transformer& m, const std::vector<Utterance>& utts,
                         const std::vector<int>& ids, const EvalOptions& opt) {
    if (utts.size() != ids.size()) {
        throw ShapeError("evaluate: " + std::to_string(ids.size()) + " ids for " +
                         std::to_string(utts.size()) + " utterances");
    }
    if (utts.empty()) throw DomainError("evaluate: no utterances");

    int n = m.ft.n_accents();
    bool label_free = !m.has_banks() || opt.mix.mode == MixSpec::Mode::Uniform ||
                      (opt.mix.mode == MixSpec::Mode::Aware && opt.mix.beta == double(n));

    Transformer merged;
    const Transformer* runner = &m;
    Route fixed_route = Route::mix({});
    bool per_utt_route = false;
    if (label_free) {
        merged = merge_all(m, m.has_banks() ? mixture_weights(MixSpec::uniform_mix(), n)
                                            : std::vector<double>{});
        runner = &merged;
    } else if (opt.mix.target >= 0) {
        fixed_route = m.mix_route(opt.mix);
    } else {
        per_utt_route = true;
    }

    std::vector<UttScore> scores(utts.size());
    auto worker = [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            const Utterance& u = utts[i];
            Route route = fixed_route;
            if (per_utt_route) {
                MixSpec ms = opt.mix;
                ms.target = m.accent_index(u.accent_id);
                route = m.mix_route(ms);
            }
            std::vector<int> hyp = greedy_decode(*runner, u.observed, route, runner->cfg.max_len);
            Alignment a = align(u.reference, hyp);
            scores[i] = {ids[i], u.accent_id, a.errors(), a.ref_len};
        }
    };

    int T = std::max(1, opt.threads);
    T = std::min<int>(T, static_cast<int>(utts.size()));
    if (T <= 1) {
        worker(0, utts.size());
    } else {
        std::vector<std::thread> pool;
        size_t chunk = (utts.size() + T - 1) / T;
        for (int t = 0; t < T; ++t) {
            size_t lo = t * chunk;
            size_t hi = std::min(utts.size(), lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back(worker, lo, hi);
        }
        for (std::thread& th : pool) th.join();
    }

    EvalResult out;
    out.per_utt = std::move(scores);
    std::map<std::string, std::pair<long long, long long>> acc;  // errors, ref len
    long long errs = 0, len = 0;
    for (const UttScore& s : out.per_utt) {
        errs += s.errors;
        len += s.ref_len;
        acc[s.accent_id].first += s.errors;
        acc[s.accent_id].second += s.ref_len;
    }
    out.pooled_wer = 100.0 * double(errs) / double(len);
    for (const auto& [a, el] : acc) {
        out.accent_wer.emplace_back(a, 100.0 * double(el.first) / double(el.second));
    }
    return out;
}

EvalResult evaluate(const Transformer& m, const Manifest& man, const std::vector<int>& utt_ids,
                    const EvalOptions& opt) {
    std::vector<Utterance> utts;
    utts.reserve(utt_ids.size());
    for (int id : utt_ids) utts.push_back(utt_at(man, id));
    return evaluate_utts(m, utts, utt_ids, opt);
}

namespace {

long long to_ll(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("value '" + v + "' for " + key + " is not an integer");
    }
}

uint64_t to_u64(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("value '" + v + "' for " + key + " is not an unsigned integer");
    }
}

double to_f(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("value '" + v + "' for " + key + " is not a number");
    }
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&]() {
        size_t a = cur.find_first_not_of(" \t");
        size_t b = cur.find_last_not_of(" \t");
        out.push_back(a == std::string::npos ? std::string() : cur.substr(a, b - a + 1));
        cur.clear();
    };
    for (char c : s) {
        if (c == ',') flush();
        else cur += c;
    }
    if (!cur.empty() || !s.empty()) flush();
    return out;
}

}  // namespace

void apply_kv(ExperimentSpec& spec, const std::string& key, const std::string& value) {
    CorpusConfig& c = spec.corpus;
    if (key == "n_accents") c.n_accents = static_cast<int>(to_ll(value, key));
    else if (key == "speakers_per_accent") c.speakers_per_accent = static_cast<int>(to_ll(value, key));
    else if (key == "n_sentences") c.n_sentences = static_cast<int>(to_ll(value, key));
    else if (key == "min_sentence_len") c.min_sentence_len = static_cast<int>(to_ll(value, key));
    else if (key == "max_sentence_len") c.max_sentence_len = static_cast<int>(to_ll(value, key));
    else if (key == "n_words") c.n_words = static_cast<int>(to_ll(value, key));
    else if (key == "subs_per_accent") c.subs_per_accent = static_cast<int>(to_ll(value, key));
    else if (key == "sub_rate") c.sub_rate = to_f(value, key);
    else if (key == "insert_rate") c.insert_rate = to_f(value, key);
    else if (key == "severity_min") c.severity_min = to_f(value, key);
    else if (key == "severity_max") c.severity_max = to_f(value, key);
    else if (key == "corpus_seed") c.seed = to_u64(value, key);
    else if (key == "k_folds") spec.k_folds = static_cast<int>(to_ll(value, key));
    else if (key == "fold_seed") spec.fold_seed = to_u64(value, key);
    else if (key == "folds") {
        spec.folds.clear();
        for (const std::string& v : split_csv(value)) {
            spec.folds.push_back(static_cast<int>(to_ll(v, key)));
        }
    } else if (key == "seeds") {
        spec.seeds.clear();
        for (const std::string& v : split_csv(value)) spec.seeds.push_back(to_u64(v, key));
    } else if (key == "grid") {
        spec.grid.clear();
        for (const std::string& v : split_csv(value)) {
            size_t plus = v.find('+');
            if (plus == std::string::npos) {
                throw ConfigError("grid entry '" + v + "' must be encoder+decoder");
            }
            spec.grid.push_back(
                {parse_ft_method(v.substr(0, plus)), parse_ft_method(v.substr(plus + 1))});
        }
    } else if (key == "attach") {
        spec.attach = AttachSet::parse(value);
    } else if (key == "r") {
        spec.r = static_cast<int>(to_ll(value, key));
    } else if (key == "alpha") {
        spec.alpha = to_f(value, key);
    } else if (key == "d_model") {
        spec.d_model = static_cast<int>(to_ll(value, key));
    } else if (key == "n_heads") {
        spec.n_heads = static_cast<int>(to_ll(value, key));
    } else if (key == "enc_layers") {
        spec.enc_layers = static_cast<int>(to_ll(value, key));
    } else if (key == "dec_layers") {
        spec.dec_layers = static_cast<int>(to_ll(value, key));
    } else if (key == "ffn_dim") {
        spec.ffn_dim = static_cast<int>(to_ll(value, key));
    } else if (key == "epochs") {
        spec.epochs = static_cast<int>(to_ll(value, key));
    } else if (key == "batch_size") {
        spec.batch_size = static_cast<int>(to_ll(value, key));
    } else if (key == "lr_full") {
        spec.lr_full = to_f(value, key);
    } else if (key == "lr_adapter") {
        spec.lr_adapter = to_f(value, key);
    } else if (key == "clip_norm") {
        spec.clip_norm = to_f(value, key);
    } else if (key == "pretrain_sentences") {
        spec.pretrain_sentences = static_cast<int>(to_ll(value, key));
    } else if (key == "pretrain_epochs") {
        spec.pretrain_epochs = static_cast<int>(to_ll(value, key));
    } else if (key == "pretrain_lr") {
        spec.pretrain_lr = to_f(value, key);
    } else if (key == "pretrain_batch") {
        spec.pretrain_batch = static_cast<int>(to_ll(value, key));
    } else if (key == "clean_sentences") {
        spec.clean_sentences = static_cast<int>(to_ll(value, key));
    } else if (key == "beta") {
        spec.aware_beta = to_f(value, key);
    } else if (key == "threads") {
        spec.threads = static_cast<int>(to_ll(value, key));
    } else if (key == "out_dir") {
        spec.out_dir = value;
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

std::map<std::string, std::string> read_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config " + path);
    std::map<std::string, std::string> out;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        size_t a = s.find_first_not_of(" \t\r");
        size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(f, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + " needs key = value");
        }
        out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return out;
}

std::vector<GridEntry> reference_grid() {
    return {
        {FtMethod::NoFT, FtMethod::NoFT},       {FtMethod::Full, FtMethod::Full},
        {FtMethod::Lora, FtMethod::Lora},       {FtMethod::MasLora, FtMethod::NoFT},
        {FtMethod::MasLora, FtMethod::Lora},    {FtMethod::MasLora, FtMethod::MasLora},
    };
}

ModelConfig model_config_for(const ExperimentSpec& spec, const Manifest& man) {
    ModelConfig mc;
    mc.vocab_size = man.vocab_size;
    mc.d_model = spec.d_model;
    mc.n_heads = spec.n_heads;
    mc.enc_layers = spec.enc_layers;
    mc.dec_layers = spec.dec_layers;
    mc.ffn_dim = spec.ffn_dim;
    mc.max_len = std::max(man.max_seq_len(), spec.corpus.max_sentence_len) + 2;
    return mc;
}

namespace {

Manifest wrap_clean(const std::vector<Utterance>& utts, const CorpusConfig& base_cfg,
                    int vocab_size) {
    Manifest pm;
    pm.cfg = base_cfg;
    pm.vocab_size = vocab_size;
    AccentSpec native;
    native.accent_id = "native";
    pm.accents.push_back(std::move(native));
    Speaker sp;
    sp.speaker_id = "native_s0";
    sp.accent_id = "native";
    sp.severity = 0.0;
    pm.speakers.push_back(std::move(sp));
    for (const Utterance& u : utts) {
        Sentence s;
        s.id = u.sentence_id;
        s.canonical = u.reference;
        pm.sentences.push_back(std::move(s));
    }
    pm.utterances = utts;
    return pm;
}

FtConfig ft_for(const GridEntry& entry, const ExperimentSpec& spec,
                const std::vector<std::string>& accent_ids) {
    FtConfig ft;
    ft.encoder = entry.encoder;
    ft.decoder = entry.decoder;
    ft.attach = spec.attach;
    ft.r = spec.r;
    ft.alpha = spec.alpha;
    if (entry.encoder == FtMethod::MasLora || entry.decoder == FtMethod::MasLora) {
        ft.accent_ids = accent_ids;
    }
    return ft;
}

bool uses_training(const GridEntry& e) {
    return e.encoder != FtMethod::NoFT || e.decoder != FtMethod::NoFT;
}

long long count_base_params(const ModelConfig& mc) {
    FtConfig noft;
    Rng rng(0);
    Transformer probe = build(mc, noft, rng);
    long long total = 0;
    probe.for_each_base([&](const std::string&, Node& n) {
        total += static_cast<long long>(n.value().size());
    });
    return total;
}

void audit_no_leak(const TrainHistory& hist, const std::vector<int>& test_ids) {
    std::vector<int> seen = hist.seen_ids;
    std::sort(seen.begin(), seen.end());
    for (int id : test_ids) {
        if (std::binary_search(seen.begin(), seen.end(), id)) {
            throw ProtocolError("test utterance " + std::to_string(id) + " leaked into training");
        }
    }
}

}  // namespace

std::map<std::string, Mat> pretrain_base(const ExperimentSpec& spec, uint64_t seed,
                                         const ModelConfig& mc) {
    auto utts = gen_clean_utterances(spec.corpus, spec.pretrain_sentences, 2000000,
                                     spec.corpus.seed ^ 0x92E7A11ULL);
    Manifest pm = wrap_clean(utts, spec.corpus, mc.vocab_size);
    FoldSpec f;
    int n = static_cast<int>(utts.size());
    int n_valid = std::max(1, n / 10);
    for (int i = 0; i < n - n_valid; ++i) f.train_ids.push_back(i);
    for (int i = n - n_valid; i < n; ++i) f.valid_ids.push_back(i);

    FtConfig ft;
    ft.encoder = FtMethod::Full;
    ft.decoder = FtMethod::Full;
    Rng rng(seed);
    Transformer base = build(mc, ft, rng);

    TrainConfig tc;
    tc.epochs = spec.pretrain_epochs;
    tc.batch_size = spec.pretrain_batch;
    tc.lr0 = spec.pretrain_lr;
    tc.clip_norm = spec.clip_norm;
    tc.seed = seed ^ 0x9E3779B9ULL;
    tc.threads = spec.threads;
    TrainHistory hist = train(base, pm, f, tc);
    std::fprintf(stderr, "[pretrain] seed=%llu best_epoch=%d valid_wer=%.3f\n",
                 static_cast<unsigned long long>(seed), hist.best_epoch, hist.best_valid_wer);
    return base_weights(base);
}

std::vector<Utterance> clean_eval_set(const ExperimentSpec& spec) {
    return gen_clean_utterances(spec.corpus, spec.clean_sentences, 1000000,
                                spec.corpus.seed ^ 0xC1EA4E7ULL);
}

void run_experiment(const ExperimentSpec& spec) {
    fs::create_directories(spec.out_dir);
    Manifest man = gen_corpus(spec.corpus);
    save_manifest((fs::path(spec.out_dir) / "manifest.txt").string(), man);
    Rng fold_rng(spec.fold_seed);
    auto folds = make_folds(man, spec.k_folds, 0.8, 0.1, 0.1, fold_rng);
    save_folds((fs::path(spec.out_dir) / "folds.txt").string(), folds);

    ModelConfig mc = model_config_for(spec, man);
    auto grid = spec.grid.empty() ? reference_grid() : spec.grid;
    auto clean = clean_eval_set(spec);
    std::vector<int> clean_ids(clean.size());
    std::iota(clean_ids.begin(), clean_ids.end(), 0);

    long long base_total = count_base_params(mc);
    ParamShape pshape{mc.d_model, mc.enc_layers, mc.dec_layers, spec.attach, base_total};
    int n_accents = static_cast<int>(man.accents.size());

    Csv results((fs::path(spec.out_dir) / "results.csv").string(),
                {"seed", "fold", "encoder", "decoder", "attach", "r", "alpha", "n_accents",
                 "trained_params", "trained_pct", "accented_wer", "clean_wer", "clean_base_wer",
                 "best_epoch"});
    Csv per_accent((fs::path(spec.out_dir) / "per_accent.csv").string(),
                   {"seed", "fold", "encoder", "decoder", "accent", "wer"});

    EvalOptions eo;
    eo.mix = MixSpec::uniform_mix();
    eo.threads = spec.threads;

    std::map<std::string, std::vector<int>> sys_errors;
    struct Agg {
        double acc_sum = 0, clean_sum = 0, degrade_sum = 0;
        int runs = 0;
        ParamAudit audit;
    };
    std::map<std::string, Agg> agg;

    for (uint64_t seed : spec.seeds) {
        auto base = pretrain_base(spec, seed, mc);

        FtConfig noft;
        Rng brng(seed);
        Transformer b0 = build(mc, noft, brng);
        apply_base_weights(b0, base);
        double clean_base = evaluate_utts(b0, clean, clean_ids, eo).pooled_wer;

        for (size_t gi = 0; gi < grid.size(); ++gi) {
            const GridEntry& entry = grid[gi];
            ParamAudit audit = param_count(pshape, entry.encoder, entry.decoder, spec.r, n_accents);
            for (int fold_idx : spec.folds) {
                if (fold_idx < 0 || fold_idx >= static_cast<int>(folds.size())) {
                    throw ConfigError("fold index " + std::to_string(fold_idx) + " outside " +
                                      std::to_string(folds.size()) + " folds");
                }
                const FoldSpec& fold = folds[static_cast<size_t>(fold_idx)];

                FtConfig ft = ft_for(entry, spec, man.accent_ids());
                Rng mrng(seed);
                Transformer m = build(mc, ft, mrng);
                apply_base_weights(m, base);
                if (audit.trained != m.trainable_param_count()) {
                    throw ConfigError("parameter audit disagrees with the built model for " +
                                      entry.name());
                }

                TrainHistory hist;
                if (uses_training(entry)) {
                    TrainConfig tc;
                    tc.epochs = spec.epochs;
                    tc.batch_size = spec.batch_size;
                    tc.lr0 = entry.encoder == FtMethod::Full ? spec.lr_full : spec.lr_adapter;
                    tc.clip_norm = spec.clip_norm;
                    tc.seed = seed * 1000003ULL + static_cast<uint64_t>(fold_idx) * 131ULL + gi;
                    tc.threads = spec.threads;
                    hist = train(m, man, fold, tc);
                }
                audit_no_leak(hist, fold.test_ids);

                EvalResult test_res = evaluate(m, man, fold.test_ids, eo);
                EvalResult clean_res = evaluate_utts(m, clean, clean_ids, eo);

                results.row({std::to_string(seed), std::to_string(fold_idx),
                             ft_method_name(entry.encoder), ft_method_name(entry.decoder),
                             spec.attach.str(), std::to_string(spec.r), fmt_num(spec.alpha),
                             std::to_string(n_accents), std::to_string(audit.trained),
                             fmt_num(audit.percent), fmt_num(test_res.pooled_wer),
                             fmt_num(clean_res.pooled_wer), fmt_num(clean_base),
                             std::to_string(hist.best_epoch)});
                for (const auto& [accent, w] : test_res.accent_wer) {
                    per_accent.row({std::to_string(seed), std::to_string(fold_idx),
                                    ft_method_name(entry.encoder), ft_method_name(entry.decoder),
                                    accent, fmt_num(w)});
                }
                std::fprintf(stderr,
                             "[grid] seed=%llu fold=%d %s accented=%.3f clean=%.3f best_epoch=%d\n",
                             static_cast<unsigned long long>(seed), fold_idx, entry.name().c_str(),
                             test_res.pooled_wer, clean_res.pooled_wer, hist.best_epoch);

                std::vector<int>& errs = sys_errors[entry.name()];
                for (const UttScore& s : test_res.per_utt) errs.push_back(s.errors);

                Agg& a = agg[entry.name()];
                a.acc_sum += test_res.pooled_wer;
                a.clean_sum += clean_res.pooled_wer;
                a.degrade_sum += clean_res.pooled_wer - clean_base;
                a.runs += 1;
                a.audit = audit;
            }
        }
    }

    Csv sig((fs::path(spec.out_dir) / "significance.csv").string(),
            {"system_a", "system_b", "z", "p", "n_segments", "significant", "degenerate"});
    for (size_t i = 0; i < grid.size(); ++i) {
        for (size_t j = i + 1; j < grid.size(); ++j) {
            const std::vector<int>& ea = sys_errors[grid[i].name()];
            const std::vector<int>& eb = sys_errors[grid[j].name()];
            SignificanceResult r = mapsswe(ea, eb);
            sig.row({grid[i].name(), grid[j].name(), fmt_num(r.z), fmt_num(r.p),
                     std::to_string(r.n_segments), r.significant ? "yes" : "no",
                     r.degenerate ? "yes" : "no"});
        }
    }

    Csv summary((fs::path(spec.out_dir) / "summary.csv").string(),
                {"encoder", "decoder", "runs", "trained_params", "trained_pct",
                 "mean_accented_wer", "mean_clean_wer", "mean_clean_degradation"});
    for (const GridEntry& entry : grid) {
        const Agg& a = agg[entry.name()];
        summary.row({ft_method_name(entry.encoder), ft_method_name(entry.decoder),
                     std::to_string(a.runs), std::to_string(a.audit.trained),
                     fmt_num(a.audit.percent), fmt_num(a.acc_sum / a.runs),
                     fmt_num(a.clean_sum / a.runs), fmt_num(a.degrade_sum / a.runs)});
    }
}

void run_zero_shot(const ExperimentSpec& spec, const std::string& held_out) {
    fs::create_directories(spec.out_dir);
    Manifest man = gen_corpus(spec.corpus);
    Rng fold_rng(spec.fold_seed);
    auto folds = make_folds(man, spec.k_folds, 0.8, 0.1, 0.1, fold_rng);

    auto all_ids = man.accent_ids();
    if (std::find(all_ids.begin(), all_ids.end(), held_out) == all_ids.end()) {
        throw ConfigError("held-out accent '" + held_out + "' is not in the corpus");
    }
    std::vector<std::string> reduced;
    for (const std::string& a : all_ids) {
        if (a != held_out) reduced.push_back(a);
    }

    ModelConfig mc = model_config_for(spec, man);
    auto grid = spec.grid.empty() ? reference_grid() : spec.grid;

    Csv csv((fs::path(spec.out_dir) / "zero_shot.csv").string(),
            {"held_out", "seed", "fold", "encoder", "decoder", "n_experts", "wer"});

    EvalOptions eo;
    eo.mix = MixSpec::uniform_mix();
    eo.threads = spec.threads;

    for (uint64_t seed : spec.seeds) {
        auto base = pretrain_base(spec, seed, mc);
        for (size_t gi = 0; gi < grid.size(); ++gi) {
            const GridEntry& entry = grid[gi];
            for (int fold_idx : spec.folds) {
                if (fold_idx < 0 || fold_idx >= static_cast<int>(folds.size())) {
                    throw ConfigError("fold index " + std::to_string(fold_idx) + " outside " +
                                      std::to_string(folds.size()) + " folds");
                }
                const FoldSpec& fold = folds[static_cast<size_t>(fold_idx)];
                FoldSpec reduced_fold;
                reduced_fold.fold_index = fold.fold_index;
                for (int id : fold.train_ids) {
                    if (utt_at(man, id).accent_id != held_out) reduced_fold.train_ids.push_back(id);
                }
                for (int id : fold.valid_ids) {
                    if (utt_at(man, id).accent_id != held_out) reduced_fold.valid_ids.push_back(id);
                }
                for (int id : fold.test_ids) {
                    if (utt_at(man, id).accent_id == held_out) reduced_fold.test_ids.push_back(id);
                }

                FtConfig ft = ft_for(entry, spec, reduced);
                Rng mrng(seed);
                Transformer m = build(mc, ft, mrng);
                apply_base_weights(m, base);

                TrainHistory hist;
                if (uses_training(entry)) {
                    TrainConfig tc;
                    tc.epochs = spec.epochs;
                    tc.batch_size = spec.batch_size;
                    tc.lr0 = entry.encoder == FtMethod::Full ? spec.lr_full : spec.lr_adapter;
                    tc.clip_norm = spec.clip_norm;
                    tc.seed = seed * 7000003ULL + static_cast<uint64_t>(fold_idx) * 193ULL + gi;
                    tc.threads = spec.threads;
                    hist = train(m, man, reduced_fold, tc);
                }
                for (int id : hist.seen_ids) {
                    if (utt_at(man, id).accent_id == held_out) {
                        throw ProtocolError("held-out accent utterance " + std::to_string(id) +
                                            " reached training");
                    }
                }
                audit_no_leak(hist, reduced_fold.test_ids);

                EvalResult res = evaluate(m, man, reduced_fold.test_ids, eo);
                int n_experts = (entry.encoder == FtMethod::MasLora ||
                                 entry.decoder == FtMethod::MasLora)
                                    ? static_cast<int>(reduced.size())
                                    : 0;
                csv.row({held_out, std::to_string(seed), std::to_string(fold_idx),
                         ft_method_name(entry.encoder), ft_method_name(entry.decoder),
                         std::to_string(n_experts), fmt_num(res.pooled_wer)});
                std::fprintf(stderr, "[zero-shot %s] seed=%llu fold=%d %s wer=%.3f\n",
                             held_out.c_str(), static_cast<unsigned long long>(seed), fold_idx,
                             entry.name().c_str(), res.pooled_wer);
            }
        }
    }
}

std::vector<std::pair<double, double>> beta_sweep(const Transformer& m, const Manifest& man,
                                                  const std::vector<int>& test_ids,
                                                  const std::vector<double>& betas,
                                                  const std::string& out_dir, int threads) {
    if (m.ft.encoder != FtMethod::MasLora && m.ft.decoder != FtMethod::MasLora) {
        throw ConfigError("beta sweep needs a model with expert banks");
    }
    if (betas.empty()) throw DomainError("beta sweep needs at least one beta");
    int n = m.ft.n_accents();
    for (double b : betas) {
        if (b < 1.0 || b > double(n)) {
            throw DomainError("beta " + std::to_string(b) + " outside [1, " + std::to_string(n) +
                              "]");
        }
    }
    fs::create_directories(out_dir);
    Csv csv((fs::path(out_dir) / "beta_sweep.csv").string(), {"beta", "wer"});
    std::vector<std::pair<double, double>> out;
    std::vector<double> xs, ys;
    for (double b : betas) {
        EvalOptions eo;
        eo.mix = MixSpec::aware(-1, b);
        eo.threads = threads;
        double w = evaluate(m, man, test_ids, eo).pooled_wer;
        csv.row({fmt_num(b), fmt_num(w)});
        out.emplace_back(b, w);
        xs.push_back(b);
        ys.push_back(w);
        std::fprintf(stderr, "[beta-sweep] beta=%.3f wer=%.3f\n", b, w);
    }
    write_line_plot_svg((fs::path(out_dir) / "beta_sweep.svg").string(),
                        "Accent-aware expert weighting", "beta", "WER (%)", xs, ys);
    return out;
}

}  // namespace maslora
