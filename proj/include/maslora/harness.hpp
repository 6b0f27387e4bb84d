#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "maslora/data.hpp"
#include "maslora/metrics.hpp"
#include "maslora/model.hpp"

namespace maslora {

// Linear decay from lr0 at step 0 to lr0/2 at the final step.
double lr_at(long long step, long long total_steps, double lr0);

struct TrainConfig {
    int epochs = 3;
    int batch_size = 16;
    double lr0 = 5e-5;
    double clip_norm = 5.0;
    uint64_t seed = 0;
    int threads = 1;  // validation decode fan-out
};

struct TrainHistory {
    std::vector<double> train_loss;  // mean batch loss per epoch
    std::vector<double> valid_wer;   // [0] before any update, then one per epoch
    int best_epoch = 0;              // index into valid_wer; 0 keeps the initial weights
    double best_valid_wer = 0.0;
    std::vector<int> seen_ids;  // train + valid utterance ids, for leakage audits
};

// SGD with teacher forcing. Batches are single-accent and accents are
// interleaved round-robin; each sample routes through its own accent's
// expert. Returns the weights of the best validation-WER checkpoint.
TrainHistory train(Transformer& m, const Manifest& man, const FoldSpec& fold,
                   const TrainConfig& tc);

struct UttScore {
    int utt_id = 0;
    std::string accent_id;
    int errors = 0;
    int ref_len = 0;
};

struct EvalOptions {
    MixSpec mix;      // Aware/Single with target -1 uses each utterance's own accent
    int threads = 1;
};

struct EvalResult {
    double pooled_wer = 0.0;
    std::vector<std::pair<std::string, double>> accent_wer;  // sorted by accent id
    std::vector<UttScore> per_utt;
};

// Greedy-decodes every utterance and pools WER per accent and overall.
// Label-free mixes (Uniform, or Aware with beta = n) run through the
// densely merged model, so merged inference is what the headline
// numbers measure.
EvalResult evaluate_utts(const Transformer& m, const std::vector<Utterance>& utts,
                         const std::vector<int>& ids, const EvalOptions& opt);
EvalResult evaluate(const Transformer& m, const Manifest& man, const std::vector<int>& utt_ids,
                    const EvalOptions& opt);

struct GridEntry {
    FtMethod encoder = FtMethod::NoFT;
    FtMethod decoder = FtMethod::NoFT;

    std::string name() const { return ft_method_name(encoder) + "+" + ft_method_name(decoder); }
};

struct ExperimentSpec {
    CorpusConfig corpus;

    int k_folds = 8;
    uint64_t fold_seed = 77;
    std::vector<int> folds = {0, 1};
    std::vector<uint64_t> seeds = {1, 2, 3};

    std::vector<GridEntry> grid;  // empty selects the reference grid
    AttachSet attach = AttachSet::qv();
    int r = 4;
    double alpha = 1.0;

    int d_model = 64;
    int n_heads = 4;
    int enc_layers = 2;
    int dec_layers = 2;
    int ffn_dim = 128;

    int epochs = 3;
    int batch_size = 16;
    double lr_full = 1e-5;
    double lr_adapter = 5e-5;
    double clip_norm = 5.0;

    int pretrain_sentences = 160;
    int pretrain_epochs = 8;
    double pretrain_lr = 0.2;
    int pretrain_batch = 8;

    int clean_sentences = 48;
    double aware_beta = 2.0;
    int threads = 1;
    std::string out_dir = "out";
};

// Config-file keys mirror the CLI flags one to one.
void apply_kv(ExperimentSpec& spec, const std::string& key, const std::string& value);
std::map<std::string, std::string> read_config(const std::string& path);

std::vector<GridEntry> reference_grid();

ModelConfig model_config_for(const ExperimentSpec& spec, const Manifest& man);

// Full fine-tune of a fresh base on clean copy data; per-seed backbone
// shared by every grid entry.
std::map<std::string, Mat> pretrain_base(const ExperimentSpec& spec, uint64_t seed,
                                         const ModelConfig& mc);

std::vector<Utterance> clean_eval_set(const ExperimentSpec& spec);

// Grid runner: pretrain, fine-tune and evaluate every (config, fold,
// seed); writes results.csv, per_accent.csv, significance.csv and
// summary.csv under spec.out_dir.
void run_experiment(const ExperimentSpec& spec);

// Leave-one-accent-out: trains with the held-out accent removed (banks
// shrink to n-1 experts) and scores the uniform mixture on the unseen
// accent's test utterances. Writes zero_shot.csv.
void run_zero_shot(const ExperimentSpec& spec, const std::string& held_out);

// One accent-aware evaluation per beta on a trained bank model; writes
// beta_sweep.csv and beta_sweep.svg, returns (beta, wer) pairs.
std::vector<std::pair<double, double>> beta_sweep(const Transformer& m, const Manifest& man,
                                                  const std::vector<int>& test_ids,
                                                  const std::vector<double>& betas,
                                                  const std::string& out_dir, int threads = 1);

}  // namespace maslora
