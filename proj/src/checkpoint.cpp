#include "maslora/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "maslora/errors.hpp"

namespace fs = std::filesystem;

namespace maslora {

namespace {

std::string fmt_g17(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string join_ids(const std::vector<std::string>& ids) {
    if (ids.empty()) return "-";
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ',';
        out += ids[i];
    }
    return out;
}

std::vector<std::string> split_ids(const std::string& s) {
    std::vector<std::string> out;
    if (s == "-") return out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

void write_blob(const std::string& path, const Mat& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    int64_t dims[2] = {m.rows, m.cols};
    f.write(reinterpret_cast<const char*>(dims), sizeof dims);
    f.write(reinterpret_cast<const char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    if (!f) throw IoError("short write to " + path);
}

Mat read_blob(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path);
    int64_t dims[2];
    f.read(reinterpret_cast<char*>(dims), sizeof dims);
    if (!f || dims[0] < 0 || dims[1] < 0) throw IoError("bad blob header in " + path);
    Mat m(static_cast<int>(dims[0]), static_cast<int>(dims[1]));
    f.read(reinterpret_cast<char*>(m.data.data()),
           static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    if (!f) throw IoError("truncated blob " + path);
    return m;
}

void save_model(const std::string& dir, const Transformer& m, uint64_t seed) {
    fs::create_directories(fs::path(dir) / "weights");
    Transformer& mm = const_cast<Transformer&>(m);  // enumeration only

    std::ofstream h(fs::path(dir) / "header.txt");
    if (!h) throw IoError("cannot write checkpoint header in " + dir);
    h << "model v1\n";
    h << "seed " << seed << "\n";
    h << "vocab_size " << m.cfg.vocab_size << "\n";
    h << "d_model " << m.cfg.d_model << "\n";
    h << "n_heads " << m.cfg.n_heads << "\n";
    h << "enc_layers " << m.cfg.enc_layers << "\n";
    h << "dec_layers " << m.cfg.dec_layers << "\n";
    h << "ffn_dim " << m.cfg.ffn_dim << "\n";
    h << "max_len " << m.cfg.max_len << "\n";
    h << "encoder " << ft_method_name(m.ft.encoder) << "\n";
    h << "decoder " << ft_method_name(m.ft.decoder) << "\n";
    h << "attach " << (m.ft.attach.count() ? m.ft.attach.str() : std::string("-")) << "\n";
    h << "r " << m.ft.r << "\n";
    h << "alpha " << fmt_g17(m.ft.alpha) << "\n";
    h << "accents " << join_ids(m.ft.accent_ids) << "\n";

    mm.for_each_base([&](const std::string& name, Node& n) {
        h << "mat " << name << " " << n.value().rows << " " << n.value().cols << "\n";
        write_blob((fs::path(dir) / "weights" / (name + ".bin")).string(), n.value());
    });
    h << "end\n";
    if (!h) throw IoError("short write to checkpoint header in " + dir);

    bool any_adapter = false;
    mm.for_each_adapted([&](const std::string&, AdaptedLinear& l) {
        any_adapter = any_adapter || l.lora.has_value() || l.bank.has_value();
    });
    if (!any_adapter) return;

    fs::create_directories(fs::path(dir) / "adapters");
    std::ofstream idx(fs::path(dir) / "adapters" / "index.txt");
    if (!idx) throw IoError("cannot write adapter index in " + dir);
    idx << "adapters v1\n";
    auto dump = [&](const std::string& path, const std::string& accent, const LoraFactors& f) {
        std::string stem = path + (accent == "-" ? "" : "." + accent);
        idx << "expert " << path << " " << accent << " " << f.B.value().rows << " "
            << f.A.value().cols << " " << f.rank << " " << fmt_g17(f.alpha) << "\n";
        write_blob((fs::path(dir) / "adapters" / (stem + ".A.bin")).string(), f.A.value());
        write_blob((fs::path(dir) / "adapters" / (stem + ".B.bin")).string(), f.B.value());
    };
    mm.for_each_adapted([&](const std::string& path, AdaptedLinear& l) {
        if (l.lora) dump(path, "-", *l.lora);
        if (l.bank) {
            for (int i = 0; i < l.bank->size(); ++i) {
                dump(path, l.bank->accent_ids[i], l.bank->experts[i]);
            }
        }
    });
    idx << "end\n";
    if (!idx) throw IoError("short write to adapter index in " + dir);
}

Transformer load_model(const std::string& dir, uint64_t* seed_out) {
    std::ifstream h(fs::path(dir) / "header.txt");
    if (!h) throw IoError("no checkpoint header in " + dir);
    std::string line;
    if (!std::getline(h, line) || line != "model v1") {
        throw IoError(dir + " is not a model checkpoint");
    }
    ModelConfig cfg;
    FtConfig ft;
    uint64_t seed = 0;
    bool saw_end = false;
    while (std::getline(h, line)) {
        if (line == "end") {
            saw_end = true;
            break;
        }
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key == "seed") is >> seed;
        else if (key == "vocab_size") is >> cfg.vocab_size;
        else if (key == "d_model") is >> cfg.d_model;
        else if (key == "n_heads") is >> cfg.n_heads;
        else if (key == "enc_layers") is >> cfg.enc_layers;
        else if (key == "dec_layers") is >> cfg.dec_layers;
        else if (key == "ffn_dim") is >> cfg.ffn_dim;
        else if (key == "max_len") is >> cfg.max_len;
        else if (key == "encoder") {
            std::string v;
            is >> v;
            ft.encoder = parse_ft_method(v);
        } else if (key == "decoder") {
            std::string v;
            is >> v;
            ft.decoder = parse_ft_method(v);
        } else if (key == "attach") {
            std::string v;
            is >> v;
            if (v != "-") ft.attach = AttachSet::parse(v);
        } else if (key == "r") {
            is >> ft.r;
        } else if (key == "alpha") {
            is >> ft.alpha;
        } else if (key == "accents") {
            std::string v;
            is >> v;
            ft.accent_ids = split_ids(v);
        } else if (key == "mat") {
            continue;  // index lines; blobs carry their own dims
        } else {
            throw IoError("unknown checkpoint header line: " + line);
        }
    }
    if (!saw_end) throw IoError("checkpoint header in " + dir + " is truncated");

    Rng rng(seed);
    Transformer m = build(cfg, ft, rng);
    if (seed_out) *seed_out = seed;

    m.for_each_base([&](const std::string& name, Node& n) {
        Mat v = read_blob((fs::path(dir) / "weights" / (name + ".bin")).string());
        if (!v.same_shape(n.value())) {
            throw IoError("checkpoint matrix " + name + " is " + v.shape_str() + ", expected " +
                          n.value().shape_str());
        }
        n.value_mut() = std::move(v);
    });
    m.for_each_adapted([&](const std::string& path, AdaptedLinear& l) {
        auto load_factors = [&](const std::string& accent, LoraFactors& f) {
            std::string stem = path + (accent == "-" ? "" : "." + accent);
            Mat A = read_blob((fs::path(dir) / "adapters" / (stem + ".A.bin")).string());
            Mat B = read_blob((fs::path(dir) / "adapters" / (stem + ".B.bin")).string());
            if (!A.same_shape(f.A.value()) || !B.same_shape(f.B.value())) {
                throw IoError("adapter blob shape mismatch at " + stem);
            }
            f.A.value_mut() = std::move(A);
            f.B.value_mut() = std::move(B);
        };
        if (l.lora) load_factors("-", *l.lora);
        if (l.bank) {
            for (int i = 0; i < l.bank->size(); ++i) {
                load_factors(l.bank->accent_ids[i], l.bank->experts[i]);
            }
        }
    });
    return m;
}

std::map<std::string, Mat> base_weights(Transformer& m) {
    std::map<std::string, Mat> out;
    m.for_each_base([&](const std::string& name, Node& n) { out[name] = n.value(); });
    return out;
}

void apply_base_weights(Transformer& m, const std::map<std::string, Mat>& weights) {
    m.for_each_base([&](const std::string& name, Node& n) {
        auto it = weights.find(name);
        if (it == weights.end()) throw IoError("missing base weight " + name);
        if (!it->second.same_shape(n.value())) {
            throw IoError("base weight " + name + " is " + it->second.shape_str() +
                          ", expected " + n.value().shape_str());
        }
        n.value_mut() = it->second;
    });
}

}  // namespace maslora
