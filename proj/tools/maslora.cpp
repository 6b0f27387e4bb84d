#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "maslora/checkpoint.hpp"
#include "maslora/errors.hpp"
#include "maslora/harness.hpp"
#include "maslora/report.hpp"

using namespace maslora;

namespace {

struct SpecArgs {
    std::string config;
    std::vector<std::string> sets;
};

void add_spec_flags(CLI::App* cmd, SpecArgs& args) {
    cmd->add_option("--config", args.config, "key = value config file");
    cmd->add_option("--set", args.sets, "override, key=value (repeatable)")
        ->type_name("KEY=VALUE");
}

ExperimentSpec make_spec(const SpecArgs& args) {
    ExperimentSpec spec;
    if (!args.config.empty()) {
        for (const auto& [k, v] : read_config(args.config)) apply_kv(spec, k, v);
    }
    for (const std::string& s : args.sets) {
        size_t eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set needs key=value, got '" + s + "'");
        apply_kv(spec, s.substr(0, eq), s.substr(eq + 1));
    }
    return spec;
}

FtConfig ft_from(const ExperimentSpec& spec, FtMethod enc, FtMethod dec, const Manifest& man) {
    FtConfig ft;
    ft.encoder = enc;
    ft.decoder = dec;
    ft.attach = spec.attach;
    ft.r = spec.r;
    ft.alpha = spec.alpha;
    if (enc == FtMethod::MasLora || dec == FtMethod::MasLora) ft.accent_ids = man.accent_ids();
    return ft;
}

const FoldSpec& pick_fold(const std::vector<FoldSpec>& folds, int idx) {
    if (idx < 0 || idx >= static_cast<int>(folds.size())) {
        throw ConfigError("fold index " + std::to_string(idx) + " outside " +
                          std::to_string(folds.size()) + " folds");
    }
    return folds[static_cast<size_t>(idx)];
}

std::vector<std::vector<int>> read_token_lines(const std::string& path,
                                               std::unordered_map<std::string, int>& dict) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    std::vector<std::vector<int>> lines;
    std::string line;
    while (std::getline(f, line)) {
        std::istringstream ss(line);
        std::vector<int> toks;
        std::string w;
        while (ss >> w) {
            auto it = dict.find(w);
            if (it == dict.end()) it = dict.emplace(w, static_cast<int>(dict.size())).first;
            toks.push_back(it->second);
        }
        lines.push_back(std::move(toks));
    }
    return lines;
}

void print_audit_row(const ParamShape& shape, FtMethod enc, FtMethod dec, int r, int n) {
    ParamAudit a = param_count(shape, enc, dec, r, n);
    std::printf("%s,%s,%s,%d,%d,%lld,%.2f\n", ft_method_name(enc).c_str(),
                ft_method_name(dec).c_str(), shape.attach.str().c_str(), r, n, a.trained,
                a.percent);
}

int run(int argc, char** argv) {
    CLI::App app{"accent-adapter experiment toolkit"};
    app.require_subcommand(1);

    SpecArgs gen_args;
    std::string gen_out = "manifest.txt";
    CLI::App* gen = app.add_subcommand("gen", "generate a synthetic accent corpus");
    add_spec_flags(gen, gen_args);
    gen->add_option("--out", gen_out, "manifest file to write");

    SpecArgs folds_args;
    std::string folds_manifest, folds_out = "folds.txt";
    CLI::App* foldsc = app.add_subcommand("folds", "build speaker/sentence-disjoint CV folds");
    add_spec_flags(foldsc, folds_args);
    foldsc->add_option("--manifest", folds_manifest, "corpus manifest")->required();
    foldsc->add_option("--out", folds_out, "folds file to write");

    SpecArgs train_args;
    std::string train_manifest, train_folds, train_enc = "maslora", train_dec = "lora";
    std::string train_ckpt = "ckpt";
    int train_fold = 0;
    uint64_t train_seed = 1;
    bool train_skip_pretrain = false;
    CLI::App* trainc = app.add_subcommand("train", "fine-tune one configuration on one fold");
    add_spec_flags(trainc, train_args);
    trainc->add_option("--manifest", train_manifest, "corpus manifest")->required();
    trainc->add_option("--folds", train_folds, "folds file")->required();
    trainc->add_option("--fold", train_fold, "fold index");
    trainc->add_option("--encoder", train_enc, "noft|full|lora|maslora");
    trainc->add_option("--decoder", train_dec, "noft|full|lora|maslora");
    trainc->add_option("--run-seed", train_seed, "weight init / shuffling seed");
    trainc->add_option("--ckpt", train_ckpt, "checkpoint directory to write");
    trainc->add_flag("--skip-pretrain", train_skip_pretrain,
                     "fine-tune from random init instead of the clean-task base");

    SpecArgs eval_args;
    std::string eval_ckpt, eval_manifest, eval_folds, eval_split = "test";
    std::string eval_mix = "uniform", eval_target;
    double eval_beta = 2.0;
    int eval_fold = 0, eval_threads = 1;
    CLI::App* evalc = app.add_subcommand("eval", "score a checkpoint on a fold split");
    add_spec_flags(evalc, eval_args);
    evalc->add_option("--ckpt", eval_ckpt, "checkpoint directory")->required();
    evalc->add_option("--manifest", eval_manifest, "corpus manifest")->required();
    evalc->add_option("--folds", eval_folds, "folds file")->required();
    evalc->add_option("--fold", eval_fold, "fold index");
    evalc->add_option("--split", eval_split, "train|valid|test|all");
    evalc->add_option("--mix", eval_mix, "uniform|aware|single");
    evalc->add_option("--beta", eval_beta, "aware sharpness in [1, n]");
    evalc->add_option("--target", eval_target,
                      "accent id for aware/single; empty uses each utterance's own");
    evalc->add_option("--threads", eval_threads, "decode threads");

    SpecArgs grid_args;
    CLI::App* gridc = app.add_subcommand("grid", "run the full fine-tuning grid");
    add_spec_flags(gridc, grid_args);

    SpecArgs zs_args;
    std::string zs_held;
    CLI::App* zsc = app.add_subcommand("zero-shot", "hold one accent out of training");
    add_spec_flags(zsc, zs_args);
    zsc->add_option("--held-out", zs_held, "accent id to exclude")->required();

    SpecArgs bs_args;
    std::string bs_ckpt, bs_manifest, bs_folds, bs_out = "out";
    std::string bs_betas;
    int bs_fold = 0, bs_threads = 1;
    CLI::App* bsc = app.add_subcommand("beta-sweep", "sweep accent-aware mixing sharpness");
    add_spec_flags(bsc, bs_args);
    bsc->add_option("--ckpt", bs_ckpt, "checkpoint directory")->required();
    bsc->add_option("--manifest", bs_manifest, "corpus manifest")->required();
    bsc->add_option("--folds", bs_folds, "folds file")->required();
    bsc->add_option("--fold", bs_fold, "fold index");
    bsc->add_option("--betas", bs_betas, "comma list; default 1..n");
    bsc->add_option("--out", bs_out, "output directory");
    bsc->add_option("--threads", bs_threads, "decode threads");

    std::string ap_attach = "qv", ap_enc, ap_dec;
    int ap_d = 768, ap_encl = 12, ap_decl = 12, ap_r = 16, ap_n = 6;
    long long ap_base = 241734912LL;
    CLI::App* apc = app.add_subcommand("audit-params", "trained-parameter counts and shares");
    apc->add_option("--d-model", ap_d, "model width");
    apc->add_option("--enc-layers", ap_encl, "encoder layers");
    apc->add_option("--dec-layers", ap_decl, "decoder layers");
    apc->add_option("--attach", ap_attach, "subset of qkvo");
    apc->add_option("--r", ap_r, "adapter rank");
    apc->add_option("--n-accents", ap_n, "experts per bank");
    apc->add_option("--base", ap_base, "backbone parameter count");
    apc->add_option("--encoder", ap_enc, "single row instead of the reference table");
    apc->add_option("--decoder", ap_dec, "single row instead of the reference table");

    std::string sc_ref, sc_hyp, sc_hyp2;
    CLI::App* scc = app.add_subcommand("score", "WER between token files, one utterance per line");
    scc->add_option("--ref", sc_ref, "reference file")->required();
    scc->add_option("--hyp", sc_hyp, "hypothesis file")->required();
    scc->add_option("--hyp2", sc_hyp2, "second hypothesis; adds a significance test");

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        ExperimentSpec spec = make_spec(gen_args);
        Manifest man = gen_corpus(spec.corpus);
        save_manifest(gen_out, man);
        std::printf("manifest %s utterances %zu vocab %d\n", gen_out.c_str(),
                    man.utterances.size(), man.vocab_size);
        return 0;
    }

    if (foldsc->parsed()) {
        ExperimentSpec spec = make_spec(folds_args);
        Manifest man = load_manifest(folds_manifest);
        Rng rng(spec.fold_seed);
        auto folds = make_folds(man, spec.k_folds, 0.8, 0.1, 0.1, rng);
        save_folds(folds_out, folds);
        std::printf("folds %s k %zu\n", folds_out.c_str(), folds.size());
        return 0;
    }

    if (trainc->parsed()) {
        ExperimentSpec spec = make_spec(train_args);
        Manifest man = load_manifest(train_manifest);
        auto folds = load_folds(train_folds);
        const FoldSpec& fold = pick_fold(folds, train_fold);
        ModelConfig mc = model_config_for(spec, man);
        FtConfig ft = ft_from(spec, parse_ft_method(train_enc), parse_ft_method(train_dec), man);

        Rng rng(train_seed);
        Transformer m = build(mc, ft, rng);
        if (!train_skip_pretrain) {
            apply_base_weights(m, pretrain_base(spec, train_seed, mc));
        }

        TrainConfig tc;
        tc.epochs = spec.epochs;
        tc.batch_size = spec.batch_size;
        tc.lr0 = ft.encoder == FtMethod::Full ? spec.lr_full : spec.lr_adapter;
        tc.clip_norm = spec.clip_norm;
        tc.seed = train_seed * 1000003ULL + static_cast<uint64_t>(train_fold);
        tc.threads = spec.threads;
        TrainHistory hist = train(m, man, fold, tc);

        save_model(train_ckpt, m, train_seed);
        for (size_t e = 0; e < hist.train_loss.size(); ++e) {
            std::printf("epoch %zu loss %.6f valid_wer %.4f\n", e + 1, hist.train_loss[e],
                        hist.valid_wer[e + 1]);
        }
        std::printf("best_epoch %d best_valid_wer %.4f ckpt %s\n", hist.best_epoch,
                    hist.best_valid_wer, train_ckpt.c_str());
        return 0;
    }

    if (evalc->parsed()) {
        uint64_t seed = 0;
        Transformer m = load_model(eval_ckpt, &seed);
        Manifest man = load_manifest(eval_manifest);
        auto folds = load_folds(eval_folds);
        const FoldSpec& fold = pick_fold(folds, eval_fold);

        std::vector<int> ids;
        if (eval_split == "train") ids = fold.train_ids;
        else if (eval_split == "valid") ids = fold.valid_ids;
        else if (eval_split == "test") ids = fold.test_ids;
        else if (eval_split == "all") {
            ids.resize(man.utterances.size());
            for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
        } else {
            throw ConfigError("unknown split '" + eval_split + "'");
        }

        int target = eval_target.empty() ? -1 : m.accent_index(eval_target);
        EvalOptions opt;
        if (eval_mix == "uniform") opt.mix = MixSpec::uniform_mix();
        else if (eval_mix == "aware") opt.mix = MixSpec::aware(target, eval_beta);
        else if (eval_mix == "single") opt.mix = MixSpec::single(target);
        else throw ConfigError("unknown mix '" + eval_mix + "'");
        opt.threads = eval_threads;

        EvalResult res = evaluate(m, man, ids, opt);
        std::printf("pooled_wer %.4f utterances %zu\n", res.pooled_wer, res.per_utt.size());
        for (const auto& [accent, w] : res.accent_wer) {
            std::printf("accent %s wer %.4f\n", accent.c_str(), w);
        }
        return 0;
    }

    if (gridc->parsed()) {
        ExperimentSpec spec = make_spec(grid_args);
        run_experiment(spec);
        std::printf("grid done, outputs under %s\n", spec.out_dir.c_str());
        return 0;
    }

    if (zsc->parsed()) {
        ExperimentSpec spec = make_spec(zs_args);
        run_zero_shot(spec, zs_held);
        std::printf("zero-shot done, outputs under %s\n", spec.out_dir.c_str());
        return 0;
    }

    if (bsc->parsed()) {
        uint64_t seed = 0;
        Transformer m = load_model(bs_ckpt, &seed);
        Manifest man = load_manifest(bs_manifest);
        auto folds = load_folds(bs_folds);
        const FoldSpec& fold = pick_fold(folds, bs_fold);

        std::vector<double> betas;
        if (bs_betas.empty()) {
            for (int b = 1; b <= m.ft.n_accents(); ++b) betas.push_back(double(b));
        } else {
            std::istringstream ss(bs_betas);
            std::string tok;
            while (std::getline(ss, tok, ',')) betas.push_back(std::stod(tok));
        }
        auto curve = beta_sweep(m, man, fold.test_ids, betas, bs_out, bs_threads);
        for (const auto& [b, w] : curve) std::printf("beta %.4f wer %.4f\n", b, w);
        return 0;
    }

    if (apc->parsed()) {
        ParamShape shape{ap_d, ap_encl, ap_decl, AttachSet::parse(ap_attach), ap_base};
        std::printf("encoder,decoder,attach,r,n_accents,trained_params,trained_pct\n");
        if (!ap_enc.empty() || !ap_dec.empty()) {
            if (ap_enc.empty() || ap_dec.empty()) {
                throw ConfigError("audit-params needs both --encoder and --decoder");
            }
            print_audit_row(shape, parse_ft_method(ap_enc), parse_ft_method(ap_dec), ap_r, ap_n);
            return 0;
        }
        print_audit_row(shape, FtMethod::NoFT, FtMethod::NoFT, ap_r, ap_n);
        print_audit_row(shape, FtMethod::Full, FtMethod::Full, ap_r, ap_n);
        for (const std::string& att : {std::string("qv"), std::string("qkvo")}) {
            ParamShape s2{ap_d, ap_encl, ap_decl, AttachSet::parse(att), ap_base};
            print_audit_row(s2, FtMethod::Lora, FtMethod::Lora, ap_r, ap_n);
            print_audit_row(s2, FtMethod::MasLora, FtMethod::NoFT, ap_r, ap_n);
            print_audit_row(s2, FtMethod::MasLora, FtMethod::Lora, ap_r, ap_n);
            print_audit_row(s2, FtMethod::MasLora, FtMethod::MasLora, ap_r, ap_n);
        }
        return 0;
    }

    if (scc->parsed()) {
        std::unordered_map<std::string, int> dict;
        auto refs = read_token_lines(sc_ref, dict);
        auto hyps = read_token_lines(sc_hyp, dict);
        if (refs.size() != hyps.size()) {
            throw ShapeError("ref has " + std::to_string(refs.size()) + " lines, hyp has " +
                             std::to_string(hyps.size()));
        }
        std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
        std::vector<int> errs_a;
        for (size_t i = 0; i < refs.size(); ++i) {
            pairs.emplace_back(refs[i], hyps[i]);
            errs_a.push_back(align(refs[i], hyps[i]).errors());
        }
        std::printf("wer %.4f segments %zu\n", wer(pairs), refs.size());
        if (!sc_hyp2.empty()) {
            auto hyps2 = read_token_lines(sc_hyp2, dict);
            if (hyps2.size() != refs.size()) {
                throw ShapeError("hyp2 has " + std::to_string(hyps2.size()) + " lines, ref has " +
                                 std::to_string(refs.size()));
            }
            std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs2;
            std::vector<int> errs_b;
            for (size_t i = 0; i < refs.size(); ++i) {
                pairs2.emplace_back(refs[i], hyps2[i]);
                errs_b.push_back(align(refs[i], hyps2[i]).errors());
            }
            std::printf("wer2 %.4f\n", wer(pairs2));
            SignificanceResult r = mapsswe(errs_a, errs_b);
            std::printf("z %.4f p %.6f significant %s degenerate %s\n", r.z, r.p,
                        r.significant ? "yes" : "no", r.degenerate ? "yes" : "no");
        }
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
