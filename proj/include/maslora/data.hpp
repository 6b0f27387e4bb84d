#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "maslora/rng.hpp"

namespace maslora {

struct Sentence {
    int id = 0;
    std::vector<int> canonical;
};

// An accent substitutes some canonical words with its own dedicated
// variant tokens (an injective fragment of a vocabulary permutation,
// disjoint across accents), so corrections are unambiguous in
// principle and the accents stay separable.
struct AccentSpec {
    std::string accent_id;
    std::map<int, int> substitution;  // canonical word id -> variant token id
    std::vector<int> variants;        // the accent's variant tokens, insertion pool
    double sub_rate = 0.0;
    double insert_rate = 0.0;
};

struct Speaker {
    std::string speaker_id;
    std::string accent_id;
    uint64_t idiolect_seed = 0;
    double severity = 1.0;  // scales the accent's rates for this voice
};

struct Utterance {
    std::string speaker_id;
    std::string accent_id;
    int sentence_id = 0;
    std::vector<int> observed;   // accented input
    std::vector<int> reference;  // canonical transcription
};

struct CorpusConfig {
    int n_accents = 6;
    int speakers_per_accent = 4;
    int n_sentences = 100;
    int min_sentence_len = 3;
    int max_sentence_len = 10;
    int n_words = 20;          // canonical word inventory
    int subs_per_accent = 6;   // substitution table size
    double sub_rate = 0.85;
    double insert_rate = 0.05;
    double severity_min = 0.8;
    double severity_max = 1.0;
    uint64_t seed = 1;
};

struct Manifest {
    CorpusConfig cfg;
    int vocab_size = 0;  // PAD/BOS/EOS + words + every accent's variants
    std::vector<Sentence> sentences;
    std::vector<AccentSpec> accents;
    std::vector<Speaker> speakers;
    std::vector<Utterance> utterances;

    std::vector<std::string> accent_ids() const;
    int max_seq_len() const;  // longest observed or reference sequence
};

// Every speaker reads every sentence; substitution tables, speaker
// severities and all noise draws derive from cfg.seed, so equal
// configs give byte-identical manifests.
Manifest gen_corpus(const CorpusConfig& cfg);

std::vector<int> accentize(const Sentence& s, const AccentSpec& a, const Speaker& sp, Rng& rng);

// Fresh clean sentences read verbatim by a severity-0 native voice;
// used for pretraining and for the forgetting audit. Sentence ids
// start at id_base to keep them apart from the accented corpus.
std::vector<Utterance> gen_clean_utterances(const CorpusConfig& cfg, int n_sentences,
                                            int id_base, uint64_t seed);

struct FoldSpec {
    int fold_index = 0;
    std::vector<int> train_ids, valid_ids, test_ids;  // indices into Manifest::utterances
};

// k folds, speaker- and sentence-disjoint: per accent one held-out
// test speaker per fold (cycling a seeded speaker order, so each
// speaker tests k / speakers_per_accent times) and a per-fold
// sentence split by the given ratios. test utterances pair the test
// speaker with test sentences only.
std::vector<FoldSpec> make_folds(const Manifest& m, int k, double train_ratio,
                                 double valid_ratio, double test_ratio, Rng& rng);

void save_manifest(const std::string& path, const Manifest& m);
Manifest load_manifest(const std::string& path);
void save_folds(const std::string& path, const std::vector<FoldSpec>& folds);
std::vector<FoldSpec> load_folds(const std::string& path);

}  // namespace maslora
