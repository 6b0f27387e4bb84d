#include "maslora/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "maslora/errors.hpp"
#include "maslora/tokens.hpp"

namespace maslora {

namespace {

std::string fmt_g17(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void validate(const CorpusConfig& c) {
    if (c.n_accents < 1 || c.speakers_per_accent < 1 || c.n_sentences < 1 || c.n_words < 1) {
        throw ConfigError("corpus counts must be >= 1");
    }
    if (c.min_sentence_len < 1 || c.max_sentence_len < c.min_sentence_len) {
        throw ConfigError("bad sentence length range");
    }
    if (c.subs_per_accent < 0 || c.subs_per_accent > c.n_words) {
        throw ConfigError("vocabulary of " + std::to_string(c.n_words) + " words too small for " +
                          std::to_string(c.subs_per_accent) + " substitutions per accent");
    }
    if (c.sub_rate < 0 || c.sub_rate > 1 || c.insert_rate < 0 || c.insert_rate > 1) {
        throw ConfigError("rates must lie in [0,1]");
    }
    if (c.severity_min < 0 || c.severity_max > 1 || c.severity_min > c.severity_max) {
        throw ConfigError("severity range must lie in [0,1]");
    }
}

std::vector<Sentence> draw_sentences(const CorpusConfig& cfg, int count, int id_base, Rng& rng) {
    std::vector<Sentence> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        Sentence s;
        s.id = id_base + i;
        int len = rng.uniform_int(cfg.min_sentence_len, cfg.max_sentence_len);
        s.canonical.reserve(len);
        for (int t = 0; t < len; ++t) {
            s.canonical.push_back(rng.uniform_int(kFirstWordId, kFirstWordId + cfg.n_words - 1));
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

std::vector<std::string> Manifest::accent_ids() const {
    std::vector<std::string> out;
    out.reserve(accents.size());
    for (const AccentSpec& a : accents) out.push_back(a.accent_id);
    return out;
}

int Manifest::max_seq_len() const {
    size_t m = 0;
    for (const Utterance& u : utterances) {
        m = std::max({m, u.observed.size(), u.reference.size()});
    }
    return static_cast<int>(m);
}

Manifest gen_corpus(const CorpusConfig& cfg) {
    validate(cfg);
    Manifest m;
    m.cfg = cfg;
    m.vocab_size = kFirstWordId + cfg.n_words + cfg.n_accents * cfg.subs_per_accent;

    Rng root(cfg.seed);
    Rng sent_rng = root.derive(0x5E17);
    m.sentences = draw_sentences(cfg, cfg.n_sentences, 0, sent_rng);

    Rng acc_rng = root.derive(0xACC2);
    for (int a = 0; a < cfg.n_accents; ++a) {
        AccentSpec spec;
        spec.accent_id = "a" + std::to_string(a);
        spec.sub_rate = cfg.sub_rate;
        spec.insert_rate = cfg.insert_rate;
        std::vector<int> words(cfg.n_words);
        std::iota(words.begin(), words.end(), kFirstWordId);
        acc_rng.shuffle(words);
        std::vector<int> sources(words.begin(), words.begin() + cfg.subs_per_accent);
        std::sort(sources.begin(), sources.end());
        int variant_base = kFirstWordId + cfg.n_words + a * cfg.subs_per_accent;
        for (int j = 0; j < cfg.subs_per_accent; ++j) {
            spec.substitution[sources[j]] = variant_base + j;
            spec.variants.push_back(variant_base + j);
        }
        m.accents.push_back(std::move(spec));
    }

    Rng spk_rng = root.derive(0x5B33);
    for (int a = 0; a < cfg.n_accents; ++a) {
        for (int s = 0; s < cfg.speakers_per_accent; ++s) {
            Speaker sp;
            sp.speaker_id = m.accents[a].accent_id + "_s" + std::to_string(s);
            sp.accent_id = m.accents[a].accent_id;
            sp.severity = spk_rng.uniform(cfg.severity_min, cfg.severity_max);
            sp.idiolect_seed = spk_rng.next_u64();
            m.speakers.push_back(std::move(sp));
        }
    }

    for (const Speaker& sp : m.speakers) {
        int a = -1;
        for (size_t i = 0; i < m.accents.size(); ++i) {
            if (m.accents[i].accent_id == sp.accent_id) a = static_cast<int>(i);
        }
        Rng voice(sp.idiolect_seed);
        for (const Sentence& s : m.sentences) {
            Utterance u;
            u.speaker_id = sp.speaker_id;
            u.accent_id = sp.accent_id;
            u.sentence_id = s.id;
            u.reference = s.canonical;
            Rng urng = voice.derive(static_cast<uint64_t>(s.id));
            u.observed = accentize(s, m.accents[a], sp, urng);
            m.utterances.push_back(std::move(u));
        }
    }
    return m;
}

std::vector<int> accentize(const Sentence& s, const AccentSpec& a, const Speaker& sp, Rng& rng) {
    if (s.canonical.empty()) throw DomainError("accentize: empty sentence");
    std::vector<int> out;
    out.reserve(s.canonical.size());
    for (int tok : s.canonical) {
        auto it = a.substitution.find(tok);
        if (it != a.substitution.end() && rng.uniform() < a.sub_rate * sp.severity) {
            out.push_back(it->second);
        } else {
            out.push_back(tok);
        }
        if (!a.variants.empty() && a.insert_rate > 0.0 &&
            rng.uniform() < a.insert_rate * sp.severity) {
            out.push_back(a.variants[rng.uniform_int(0, static_cast<int>(a.variants.size()) - 1)]);
        }
    }
    return out;
}

std::vector<Utterance> gen_clean_utterances(const CorpusConfig& cfg, int n_sentences,
                                            int id_base, uint64_t seed) {
    validate(cfg);
    if (n_sentences < 1) throw ConfigError("clean set needs at least one sentence");
    Rng rng(seed);
    std::vector<Sentence> sents = draw_sentences(cfg, n_sentences, id_base, rng);
    std::vector<Utterance> out;
    out.reserve(sents.size());
    for (Sentence& s : sents) {
        Utterance u;
        u.speaker_id = "native_s0";
        u.accent_id = "native";
        u.sentence_id = s.id;
        u.observed = s.canonical;
        u.reference = std::move(s.canonical);
        out.push_back(std::move(u));
    }
    return out;
}

std::vector<FoldSpec> make_folds(const Manifest& m, int k, double train_ratio,
                                 double valid_ratio, double test_ratio, Rng& rng) {
    int S = m.cfg.speakers_per_accent;
    if (k < 1) throw ProtocolError("fold count must be >= 1");
    if (S < 2) throw ProtocolError("need at least 2 speakers per accent to hold one out");
    if (k % S != 0) {
        throw ProtocolError("fold count " + std::to_string(k) + " not divisible by " +
                            std::to_string(S) + " speakers per accent");
    }
    double rsum = train_ratio + valid_ratio + test_ratio;
    if (train_ratio <= 0 || valid_ratio <= 0 || test_ratio <= 0 || std::fabs(rsum - 1.0) > 1e-9) {
        throw ProtocolError("split ratios must be positive and sum to 1");
    }
    int n_sent = static_cast<int>(m.sentences.size());
    int n_tr = static_cast<int>(std::floor(train_ratio * n_sent));
    int n_va = static_cast<int>(std::floor(valid_ratio * n_sent));
    int n_te = n_sent - n_tr - n_va;
    if (n_tr < 1 || n_va < 1 || n_te < 1) {
        throw ProtocolError("only " + std::to_string(n_sent) + " sentences; splits would be empty");
    }

    // One seeded speaker order per accent, cycled across folds.
    std::vector<std::vector<int>> speaker_order(m.accents.size());
    for (size_t a = 0; a < m.accents.size(); ++a) {
        speaker_order[a].resize(S);
        std::iota(speaker_order[a].begin(), speaker_order[a].end(), 0);
        rng.shuffle(speaker_order[a]);
    }

    // speaker_id -> position within its accent
    std::map<std::string, std::pair<int, int>> spk_pos;  // id -> (accent idx, slot)
    {
        std::map<std::string, int> next_slot;
        for (const Speaker& sp : m.speakers) {
            int a = -1;
            for (size_t i = 0; i < m.accents.size(); ++i) {
                if (m.accents[i].accent_id == sp.accent_id) a = static_cast<int>(i);
            }
            spk_pos[sp.speaker_id] = {a, next_slot[sp.accent_id]++};
        }
    }

    std::vector<FoldSpec> folds;
    for (int f = 0; f < k; ++f) {
        FoldSpec fold;
        fold.fold_index = f;

        std::vector<int> ids(n_sent);
        std::iota(ids.begin(), ids.end(), 0);
        Rng frng = rng.derive(0xF01D0000ULL + static_cast<uint64_t>(f));
        frng.shuffle(ids);
        std::map<int, int> role;  // sentence id -> 0 train, 1 valid, 2 test
        for (int i = 0; i < n_sent; ++i) {
            role[m.sentences[ids[i]].id] = i < n_tr ? 0 : (i < n_tr + n_va ? 1 : 2);
        }

        for (size_t u = 0; u < m.utterances.size(); ++u) {
            const Utterance& utt = m.utterances[u];
            auto [a, slot] = spk_pos.at(utt.speaker_id);
            bool is_test_speaker = speaker_order[a][f % S] == slot;
            int r = role.at(utt.sentence_id);
            if (is_test_speaker) {
                if (r == 2) fold.test_ids.push_back(static_cast<int>(u));
            } else {
                if (r == 0) fold.train_ids.push_back(static_cast<int>(u));
                if (r == 1) fold.valid_ids.push_back(static_cast<int>(u));
            }
        }
        folds.push_back(std::move(fold));
    }
    return folds;
}

namespace {

void put_tokens(std::ostream& os, const std::vector<int>& toks) {
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) os << ' ';
        os << toks[i];
    }
}

std::vector<int> get_tokens(std::istringstream& is) {
    std::vector<int> out;
    int v;
    while (is >> v) out.push_back(v);
    return out;
}

}  // namespace

void save_manifest(const std::string& path, const Manifest& m) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    const CorpusConfig& c = m.cfg;
    f << "corpus v1\n";
    f << "seed " << c.seed << "\n";
    f << "n_accents " << c.n_accents << "\n";
    f << "speakers_per_accent " << c.speakers_per_accent << "\n";
    f << "n_sentences " << c.n_sentences << "\n";
    f << "min_sentence_len " << c.min_sentence_len << "\n";
    f << "max_sentence_len " << c.max_sentence_len << "\n";
    f << "n_words " << c.n_words << "\n";
    f << "subs_per_accent " << c.subs_per_accent << "\n";
    f << "sub_rate " << fmt_g17(c.sub_rate) << "\n";
    f << "insert_rate " << fmt_g17(c.insert_rate) << "\n";
    f << "severity_min " << fmt_g17(c.severity_min) << "\n";
    f << "severity_max " << fmt_g17(c.severity_max) << "\n";
    f << "vocab_size " << m.vocab_size << "\n";
    for (const Sentence& s : m.sentences) {
        f << "sentence " << s.id << " | ";
        put_tokens(f, s.canonical);
        f << "\n";
    }
    for (const AccentSpec& a : m.accents) {
        f << "accent " << a.accent_id << " " << fmt_g17(a.sub_rate) << " "
          << fmt_g17(a.insert_rate) << " |";
        for (const auto& [src, dst] : a.substitution) f << " " << src << ":" << dst;
        f << "\n";
    }
    for (const Speaker& sp : m.speakers) {
        f << "speaker " << sp.speaker_id << " " << sp.accent_id << " " << sp.idiolect_seed << " "
          << fmt_g17(sp.severity) << "\n";
    }
    for (const Utterance& u : m.utterances) {
        f << "utt " << u.speaker_id << " " << u.accent_id << " " << u.sentence_id << " | ";
        put_tokens(f, u.observed);
        f << " | ";
        put_tokens(f, u.reference);
        f << "\n";
    }
    f << "end\n";
    if (!f) throw IoError("short write to " + path);
}

Manifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    std::string line;
    if (!std::getline(f, line) || line != "corpus v1") {
        throw IoError(path + " is not a corpus manifest");
    }
    Manifest m;
    bool saw_end = false;
    while (std::getline(f, line)) {
        if (line == "end") {
            saw_end = true;
            break;
        }
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key == "seed") is >> m.cfg.seed;
        else if (key == "n_accents") is >> m.cfg.n_accents;
        else if (key == "speakers_per_accent") is >> m.cfg.speakers_per_accent;
        else if (key == "n_sentences") is >> m.cfg.n_sentences;
        else if (key == "min_sentence_len") is >> m.cfg.min_sentence_len;
        else if (key == "max_sentence_len") is >> m.cfg.max_sentence_len;
        else if (key == "n_words") is >> m.cfg.n_words;
        else if (key == "subs_per_accent") is >> m.cfg.subs_per_accent;
        else if (key == "sub_rate") is >> m.cfg.sub_rate;
        else if (key == "insert_rate") is >> m.cfg.insert_rate;
        else if (key == "severity_min") is >> m.cfg.severity_min;
        else if (key == "severity_max") is >> m.cfg.severity_max;
        else if (key == "vocab_size") is >> m.vocab_size;
        else if (key == "sentence") {
            Sentence s;
            std::string bar;
            is >> s.id >> bar;
            s.canonical = get_tokens(is);
            m.sentences.push_back(std::move(s));
        } else if (key == "accent") {
            AccentSpec a;
            std::string bar;
            is >> a.accent_id >> a.sub_rate >> a.insert_rate >> bar;
            std::string pair;
            while (is >> pair) {
                size_t colon = pair.find(':');
                if (colon == std::string::npos) throw IoError("bad substitution pair " + pair);
                int src = std::stoi(pair.substr(0, colon));
                int dst = std::stoi(pair.substr(colon + 1));
                a.substitution[src] = dst;
                a.variants.push_back(dst);
            }
            m.accents.push_back(std::move(a));
        } else if (key == "speaker") {
            Speaker sp;
            is >> sp.speaker_id >> sp.accent_id >> sp.idiolect_seed >> sp.severity;
            m.speakers.push_back(std::move(sp));
        } else if (key == "utt") {
            Utterance u;
            std::string rest;
            is >> u.speaker_id >> u.accent_id >> u.sentence_id;
            std::getline(is, rest);
            size_t b1 = rest.find('|');
            size_t b2 = rest.find('|', b1 + 1);
            if (b1 == std::string::npos || b2 == std::string::npos) {
                throw IoError("bad utterance line: " + line);
            }
            std::istringstream obs(rest.substr(b1 + 1, b2 - b1 - 1));
            std::istringstream ref(rest.substr(b2 + 1));
            u.observed = get_tokens(obs);
            u.reference = get_tokens(ref);
            m.utterances.push_back(std::move(u));
        } else {
            throw IoError("unknown manifest line: " + line);
        }
    }
    if (!saw_end) throw IoError(path + " is truncated");
    return m;
}

void save_folds(const std::string& path, const std::vector<FoldSpec>& folds) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << "folds v1\n";
    f << "k " << folds.size() << "\n";
    for (const FoldSpec& fs : folds) {
        f << "fold " << fs.fold_index << "\n";
        f << "train ";
        put_tokens(f, fs.train_ids);
        f << "\nvalid ";
        put_tokens(f, fs.valid_ids);
        f << "\ntest ";
        put_tokens(f, fs.test_ids);
        f << "\n";
    }
    f << "end\n";
    if (!f) throw IoError("short write to " + path);
}

std::vector<FoldSpec> load_folds(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    std::string line;
    if (!std::getline(f, line) || line != "folds v1") throw IoError(path + " is not a fold file");
    std::vector<FoldSpec> folds;
    bool saw_end = false;
    while (std::getline(f, line)) {
        if (line == "end") {
            saw_end = true;
            break;
        }
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key == "k") {
            continue;
        } else if (key == "fold") {
            FoldSpec fs;
            is >> fs.fold_index;
            folds.push_back(std::move(fs));
        } else if (key == "train" && !folds.empty()) {
            folds.back().train_ids = get_tokens(is);
        } else if (key == "valid" && !folds.empty()) {
            folds.back().valid_ids = get_tokens(is);
        } else if (key == "test" && !folds.empty()) {
            folds.back().test_ids = get_tokens(is);
        } else {
            throw IoError("unknown fold line: " + line);
        }
    }
    if (!saw_end) throw IoError(path + " is truncated");
    return folds;
}

}  // namespace maslora
