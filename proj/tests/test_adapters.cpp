#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "maslora/adapters.hpp"
#include "maslora/errors.hpp"
#include "maslora/rng.hpp"

using namespace maslora;

namespace {

Mat from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Mat m(static_cast<int>(rows.size()), static_cast<int>(rows.begin()->size()));
    int i = 0;
    for (const auto& r : rows) {
        int j = 0;
        for (double v : r) m.at(i, j++) = v;
        ++i;
    }
    return m;
}

void randomize(LoraFactors& f, Rng& rng) {
    f.A.value_mut() = Mat::randn(f.A.value().rows, f.A.value().cols, 1.0, rng);
    f.B.value_mut() = Mat::randn(f.B.value().rows, f.B.value().cols, 1.0, rng);
}

std::vector<std::string> accent_names(int n) {
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back("a" + std::to_string(i));
    return ids;
}

}  // namespace

TEST_CASE("lora forward hand case") {
    Rng rng(1);
    AdaptedLinear layer = adapt_lora(Mat::identity(2), 1, 2.0, rng);
    layer.lora->B.value_mut() = from_rows({{1}, {0}});
    layer.lora->A.value_mut() = from_rows({{0, 1}});
    Mat x = from_rows({{1}, {1}});
    Mat y = lora_forward(x, layer);
    CHECK(y.at(0, 0) == 3.0);
    CHECK(y.at(1, 0) == 1.0);
}

TEST_CASE("fresh lora is transparent") {
    Rng rng(2);
    Mat w0 = Mat::randn(4, 6, 1.0, rng);
    AdaptedLinear layer = adapt_lora(w0, 2, 1.5, rng);
    CHECK(max_abs(layer.lora->B.value()) == 0.0);
    Mat x = Mat::randn(6, 3, 1.0, rng);
    CHECK(bitwise_equal(lora_forward(x, layer), matmul(w0, x)));

    randomize(*layer.lora, rng);
    layer.lora->alpha = 0.0;
    CHECK(bitwise_equal(lora_forward(x, layer), matmul(w0, x)));
}

TEST_CASE("lora rank bounds") {
    Rng rng(3);
    CHECK_THROWS_AS(make_lora(4, 6, 5, 1.0, rng), ConfigError);
    CHECK_THROWS_AS(make_lora(4, 6, 0, 1.0, rng), ConfigError);
}

TEST_CASE("expert forward routes to the named expert") {
    Rng rng(4);
    Mat w0 = Mat::randn(5, 5, 1.0, rng);
    AdaptedLinear layer = adapt_bank(w0, accent_names(3), 2, 1.0, rng);
    for (auto& e : layer.bank->experts) randomize(e, rng);
    Mat x = Mat::randn(5, 2, 1.0, rng);

    for (int j = 0; j < 3; ++j) {
        Mat via_bank = expert_forward(x, layer, layer.bank->accent_ids[j]);
        AdaptedLinear solo = adapt_lora(w0, 2, 1.0, rng);
        solo.lora->A.value_mut() = layer.bank->experts[j].A.value();
        solo.lora->B.value_mut() = layer.bank->experts[j].B.value();
        CHECK(max_abs_diff(via_bank, lora_forward(x, solo)) == 0.0);
    }
    CHECK_THROWS_AS(expert_forward(x, layer, "a9"), RoutingError);
}

TEST_CASE("bank index lookup") {
    Rng rng(14);
    ExpertBank bank = make_bank(accent_names(4), 3, 3, 1, 1.0, rng);
    CHECK(bank.size() == 4);
    CHECK(bank.index_of("a2") == 2);
    CHECK_THROWS_AS(bank.index_of("zz"), RoutingError);
    CHECK_THROWS_AS(make_bank({}, 3, 3, 1, 1.0, rng), ConfigError);
}

TEST_CASE("mixture weights closed forms") {
    auto u = mixture_weights(MixSpec::uniform_mix(), 6);
    for (double w : u) CHECK(w == 1.0 / 6.0);

    auto aware2 = mixture_weights(MixSpec::aware(2, 2.0), 6);
    CHECK(aware2[2] == 0.5);
    for (int i = 0; i < 6; ++i) {
        if (i != 2) CHECK(aware2[i] == doctest::Approx(0.1).epsilon(1e-15));
    }

    auto onehot = mixture_weights(MixSpec::aware(3, 1.0), 6);
    for (int i = 0; i < 6; ++i) CHECK(onehot[i] == (i == 3 ? 1.0 : 0.0));
    auto single = mixture_weights(MixSpec::single(3), 6);
    CHECK(onehot == single);

    auto flat = mixture_weights(MixSpec::aware(1, 6.0), 6);
    CHECK(flat == u);

    CHECK_THROWS_AS(mixture_weights(MixSpec::aware(0, 0.5), 6), DomainError);
    CHECK_THROWS_AS(mixture_weights(MixSpec::aware(0, 6.5), 6), DomainError);
    CHECK_THROWS_AS(mixture_weights(MixSpec::aware(6, 2.0), 6), RoutingError);
    CHECK_THROWS_AS(mixture_weights(MixSpec::single(-2), 6), RoutingError);
}

TEST_CASE("mixture weights sum to one across a random sweep") {
    Rng rng(5);
    for (int t = 0; t < 10000; ++t) {
        int n = rng.uniform_int(1, 12);
        double beta = n == 1 ? 1.0 : 1.0 + rng.uniform() * (n - 1);
        int j = rng.uniform_int(0, n - 1);
        auto w = mixture_weights(MixSpec::aware(j, beta), n);
        double sum = 0.0;
        for (double v : w) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::fabs(sum - 1.0) <= 1e-15);
    }
}

TEST_CASE("aware endpoints are exact") {
    Rng rng(6);
    for (int t = 0; t < 200; ++t) {
        int n = rng.uniform_int(2, 12);
        int j = rng.uniform_int(0, n - 1);
        CHECK(mixture_weights(MixSpec::aware(j, double(n)), n) ==
              mixture_weights(MixSpec::uniform_mix(), n));
        auto w = mixture_weights(MixSpec::aware(j, 1.0), n);
        for (int i = 0; i < n; ++i) CHECK(w[i] == (i == j ? 1.0 : 0.0));
    }
}

TEST_CASE("mixed forward equals merged forward") {
    Rng rng(7);
    double worst = 0.0;
    for (int t = 0; t < 120; ++t) {
        int d = rng.uniform_int(2, 64);
        int k = rng.uniform_int(2, 64);
        int r = rng.uniform_int(1, std::min(8, std::min(d, k)));
        int n = rng.uniform_int(1, 8);
        Mat w0 = Mat::randn(d, k, 1.0, rng);
        AdaptedLinear layer = adapt_bank(w0, accent_names(n), r, 0.5 + rng.uniform(), rng);
        for (auto& e : layer.bank->experts) randomize(e, rng);

        int j = rng.uniform_int(0, n - 1);
        double beta = n == 1 ? 1.0 : 1.0 + rng.uniform() * (n - 1);
        auto w = mixture_weights(MixSpec::aware(j, beta), n);

        Mat x = Mat::randn(k, rng.uniform_int(1, 5), 1.0, rng);
        Mat runtime = mixed_forward(x, layer, w);
        Mat folded = matmul(merge(layer, w), x);
        double scale_ref = std::max(1.0, max_abs(runtime));
        worst = std::max(worst, max_abs_diff(runtime, folded) / scale_ref);
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("merge special cases") {
    Rng rng(8);
    Mat w0 = Mat::randn(4, 4, 1.0, rng);

    AdaptedLinear plain = adapt_none(w0);
    CHECK(bitwise_equal(merge(plain, {}), w0));

    AdaptedLinear l = adapt_lora(w0, 2, 2.0, rng);
    randomize(*l.lora, rng);
    Mat expect = add(w0, scale(matmul(l.lora->B.value(), l.lora->A.value()), 2.0));
    CHECK(max_abs_diff(merge(l, {}), expect) < 1e-12);

    AdaptedLinear b = adapt_bank(w0, {"x"}, 2, 2.0, rng);
    b.bank->experts[0].A.value_mut() = l.lora->A.value();
    b.bank->experts[0].B.value_mut() = l.lora->B.value();
    CHECK(max_abs_diff(merge(b, {1.0}), expect) < 1e-12);
    CHECK_THROWS_AS(merge(b, {0.5, 0.5}), ShapeError);
}

TEST_CASE("mixed forward validates weight length") {
    Rng rng(9);
    AdaptedLinear layer = adapt_bank(Mat::identity(3), {"a", "b"}, 1, 1.0, rng);
    Mat x = Mat::identity(3);
    CHECK_THROWS_AS(mixed_forward(x, layer, {1.0}), ShapeError);
}

TEST_CASE("training gradients stay inside the routed expert") {
    Rng rng(10);
    AdaptedLinear layer = adapt_bank(Mat::randn(4, 4, 1.0, rng), accent_names(3), 2, 1.0, rng);
    for (auto& e : layer.bank->experts) randomize(e, rng);

    Node x = Node::constant(Mat::randn(2, 4, 1.0, rng));
    Node out = apply_adapted(layer, x, Route::train_on(1));
    backward(sum_all(out));

    auto& experts = layer.bank->experts;
    CHECK(max_abs(experts[0].A.grad()) == 0.0);
    CHECK(max_abs(experts[0].B.grad()) == 0.0);
    CHECK(max_abs(experts[2].A.grad()) == 0.0);
    CHECK(max_abs(experts[2].B.grad()) == 0.0);
    CHECK(max_abs(experts[1].A.grad()) > 0.0);
    CHECK(max_abs(layer.W0.grad()) == 0.0);

    CHECK_THROWS_AS(apply_adapted(layer, x, Route::train_on(3)), RoutingError);
}

TEST_CASE("row-convention forward matches the column algebra") {
    Rng rng(15);
    AdaptedLinear layer = adapt_bank(Mat::randn(5, 4, 1.0, rng), accent_names(3), 2, 1.3, rng);
    for (auto& e : layer.bank->experts) randomize(e, rng);
    Mat xr = Mat::randn(2, 4, 1.0, rng);  // rows are samples
    auto w = mixture_weights(MixSpec::aware(1, 2.0), 3);

    Node out = apply_adapted(layer, Node::constant(xr), Route::mix(w));
    Mat col = mixed_forward(transpose(xr), layer, w);
    CHECK(max_abs_diff(out.value(), transpose(col)) < 1e-12);
}

TEST_CASE("attach set parsing") {
    AttachSet qv = AttachSet::qv();
    CHECK(qv.q);
    CHECK(qv.v);
    CHECK_FALSE(qv.k);
    CHECK_FALSE(qv.o);
    CHECK(qv.count() == 2);
    CHECK(qv.str() == "qv");
    CHECK(AttachSet::parse("qv").str() == "qv");
    CHECK(AttachSet::parse("qkvo").count() == 4);
    CHECK_THROWS_AS(AttachSet::parse("qx"), ConfigError);
    CHECK_THROWS_AS(AttachSet::parse(""), ConfigError);
}

TEST_CASE("parameter audit reproduces the reference table") {
    const long long base = 241734912LL;
    ParamShape qv{768, 12, 12, AttachSet::qv(), base};
    ParamShape qkvo{768, 12, 12, AttachSet::qkvo(), base};
    const int r = 16, n = 6;

    auto pct = [&](const ParamShape& s, FtMethod e, FtMethod d) {
        return param_count(s, e, d, r, n).percent;
    };

    CHECK(param_count(qv, FtMethod::NoFT, FtMethod::NoFT, r, n).trained == 0);
    CHECK(pct(qv, FtMethod::NoFT, FtMethod::NoFT) == 0.0);
    CHECK(param_count(qv, FtMethod::Full, FtMethod::Full, r, n).trained == base);
    CHECK(pct(qv, FtMethod::Full, FtMethod::Full) == 100.0);

    CHECK(pct(qv, FtMethod::Lora, FtMethod::Lora) == 0.73);
    CHECK(pct(qv, FtMethod::MasLora, FtMethod::NoFT) == 1.44);
    CHECK(pct(qv, FtMethod::MasLora, FtMethod::Lora) == 1.91);
    CHECK(pct(qv, FtMethod::MasLora, FtMethod::MasLora) == 4.21);

    CHECK(pct(qkvo, FtMethod::Lora, FtMethod::Lora) == 1.44);
    CHECK(pct(qkvo, FtMethod::MasLora, FtMethod::NoFT) == 2.84);
    CHECK(pct(qkvo, FtMethod::MasLora, FtMethod::Lora) == 3.76);
    CHECK(pct(qkvo, FtMethod::MasLora, FtMethod::MasLora) == 8.07);
}

TEST_CASE("parameter audit arithmetic") {
    ParamShape s{768, 12, 12, AttachSet::qv(), 241734912LL};
    // encoder 12 layers x 2 matrices, decoder 12 layers x 2 blocks x 2 matrices
    auto lora = param_count(s, FtMethod::Lora, FtMethod::Lora, 16, 6);
    CHECK(lora.trained == (12LL * 2 + 12LL * 2 * 2) * 2 * 16 * 768);
    auto mas = param_count(s, FtMethod::MasLora, FtMethod::MasLora, 16, 6);
    CHECK(mas.trained == lora.trained * 6);

    CHECK_THROWS_AS(param_count(s, FtMethod::Full, FtMethod::Lora, 16, 6), ConfigError);
    CHECK_THROWS_AS(param_count(s, FtMethod::NoFT, FtMethod::Full, 16, 6), ConfigError);
}

TEST_CASE("ft method names round trip") {
    for (FtMethod m : {FtMethod::NoFT, FtMethod::Full, FtMethod::Lora, FtMethod::MasLora}) {
        CHECK(parse_ft_method(ft_method_name(m)) == m);
    }
    CHECK_THROWS_AS(parse_ft_method("banana"), ConfigError);
}
