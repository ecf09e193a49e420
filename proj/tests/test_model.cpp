#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <vector>

#include "lcm/errors.hpp"
#include "lcm/gradcheck.hpp"
#include "lcm/model.hpp"
#include "lcm/rng.hpp"
#include "lcm/tensor.hpp"

using namespace lcm;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, bool requires_grad = false) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return Tensor::from_values(std::move(shape), rng.normal_vec(n), requires_grad);
}

Tensor identity(std::size_t n) {
    Tensor eye = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) eye.raw_data()[i * n + i] = 1.0;
    return eye;
}

// Element-level self-attention per head: no shared code with the model.
std::vector<double> self_attention_oracle(const Tensor& x, const Tensor& wq, const Tensor& wk,
                                          const Tensor& wv) {
    const std::size_t p = x.rows(), d = x.cols(), hd = wq.cols();
    auto project = [&](const Tensor& w) {
        std::vector<double> out(p * hd, 0.0);
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t a = 0; a < hd; ++a)
                for (std::size_t e = 0; e < d; ++e) out[i * hd + a] += x.at(i, e) * w.at(e, a);
        return out;
    };
    auto q = project(wq), k = project(wk), v = project(wv);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> out(p * hd, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        std::vector<double> logits(p, 0.0);
        double mx = -1e300;
        for (std::size_t j = 0; j < p; ++j) {
            for (std::size_t a = 0; a < hd; ++a) logits[j] += q[i * hd + a] * k[j * hd + a];
            logits[j] *= scale;
            mx = std::max(mx, logits[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < p; ++j) denom += std::exp(logits[j] - mx);
        for (std::size_t j = 0; j < p; ++j) {
            const double w = std::exp(logits[j] - mx) / denom;
            for (std::size_t a = 0; a < hd; ++a) out[i * hd + a] += w * v[j * hd + a];
        }
    }
    return out;
}

// Element-level cross-attention per head: softmax over the region axis.
std::vector<double> cross_attention_oracle(const Tensor& x, const Tensor& m, const Tensor& wk,
                                           const Tensor& wq, const Tensor& wv) {
    const std::size_t p = x.rows(), d = x.cols(), n = m.rows(), hd = wq.cols();
    std::vector<double> k(n * hd, 0.0), v(n * hd, 0.0), q(p * hd, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t a = 0; a < hd; ++a)
            for (std::size_t s = 0; s < n; ++s) {
                k[r * hd + a] += m.at(r, s) * wk.at(s, a);
                v[r * hd + a] += m.at(r, s) * wv.at(s, a);
            }
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t a = 0; a < hd; ++a)
            for (std::size_t e = 0; e < d; ++e) q[i * hd + a] += x.at(i, e) * wq.at(e, a);

    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> out(p * hd, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        std::vector<double> logits(n, 0.0);
        double mx = -1e300;
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t a = 0; a < hd; ++a) logits[r] += k[r * hd + a] * q[i * hd + a];
            logits[r] *= scale;
            mx = std::max(mx, logits[r]);
        }
        double denom = 0.0;
        for (std::size_t r = 0; r < n; ++r) denom += std::exp(logits[r] - mx);
        for (std::size_t r = 0; r < n; ++r) {
            const double w = std::exp(logits[r] - mx) / denom;
            for (std::size_t a = 0; a < hd; ++a) out[i * hd + a] += w * v[r * hd + a];
        }
    }
    return out;
}

PhenotypeSchema small_schema() {
    return PhenotypeSchema({{"sex", TaskKind::kCategorical, 2, {}},
                            {"state", TaskKind::kCategorical, 3, {}},
                            {"age", TaskKind::kContinuous, 1, {}}});
}

ModelConfig small_config() {
    ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.dim = 8;
    c.regions = 4;
    c.schema = small_schema();
    return c;
}

Tensor random_fc(std::size_t n, Rng& rng) {
    // Correlation-like symmetric matrix with unit diagonal.
    Tensor fc = Tensor::zeros({n, n});
    auto d = fc.raw_data();
    for (std::size_t i = 0; i < n; ++i) {
        d[i * n + i] = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = std::tanh(rng.normal(0.0, 0.5));
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    return fc;
}

std::map<std::string, Tensor> param_map(const LcmModel& model) {
    std::map<std::string, Tensor> out;
    for (const auto& p : model.parameters()) out.emplace(p.name, p.tensor);
    return out;
}

}  // namespace

TEST_CASE("self-attention core matches the brute-force oracle") {
    for (std::uint64_t seed = 3; seed < 8; ++seed) {
        Rng rng(seed, "sa_oracle");
        const std::size_t p = 3, d = 4;
        Tensor x = random_tensor({p, d}, rng);
        SelfAttentionParams params;
        params.query = {random_tensor({d, d}, rng)};
        params.key = {random_tensor({d, d}, rng)};
        params.value = {random_tensor({d, d}, rng)};
        params.merge = identity(d);

        Tensor out = self_attention_core(x, params);
        auto expect = self_attention_oracle(x, params.query[0], params.key[0], params.value[0]);
        for (std::size_t i = 0; i < p * d; ++i) {
            CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("multi-head self-attention concatenates then merges") {
    Rng rng(9, "sa_heads");
    const std::size_t p = 4, d = 6, heads = 2, hd = 3;
    Tensor x = random_tensor({p, d}, rng);
    SelfAttentionParams params;
    for (std::size_t h = 0; h < heads; ++h) {
        params.query.push_back(random_tensor({d, hd}, rng));
        params.key.push_back(random_tensor({d, hd}, rng));
        params.value.push_back(random_tensor({d, hd}, rng));
    }
    params.merge = random_tensor({d, d}, rng);

    Tensor out = self_attention_core(x, params);
    std::vector<std::vector<double>> head_out;
    for (std::size_t h = 0; h < heads; ++h) {
        head_out.push_back(
            self_attention_oracle(x, params.query[h], params.key[h], params.value[h]));
    }
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            double acc = 0.0;
            for (std::size_t h = 0; h < heads; ++h) {
                for (std::size_t a = 0; a < hd; ++a) {
                    acc += head_out[h][i * hd + a] * params.merge.at(h * hd + a, c);
                }
            }
            CHECK(out.at(i, c) == doctest::Approx(acc).epsilon(1e-12));
        }
    }
}

TEST_CASE("single-token self-attention returns the merged value row") {
    Rng rng(4, "sa_single");
    const std::size_t d = 4;
    Tensor x = random_tensor({1, d}, rng);
    SelfAttentionParams params;
    params.query = {random_tensor({d, d}, rng)};
    params.key = {random_tensor({d, d}, rng)};
    params.value = {random_tensor({d, d}, rng)};
    params.merge = identity(d);
    Tensor out = self_attention_core(x, params);
    Tensor v = matmul(x, params.value[0]);
    for (std::size_t i = 0; i < d; ++i) {
        CHECK(out.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-14));
    }
}

TEST_CASE("identical token rows give identical self-attention rows") {
    Rng rng(5, "sa_same");
    const std::size_t d = 4;
    std::vector<double> row = rng.normal_vec(d);
    std::vector<double> data;
    for (int i = 0; i < 3; ++i) data.insert(data.end(), row.begin(), row.end());
    Tensor x = Tensor::from_values({3, d}, data);
    SelfAttentionParams params;
    params.query = {random_tensor({d, d}, rng)};
    params.key = {random_tensor({d, d}, rng)};
    params.value = {random_tensor({d, d}, rng)};
    params.merge = random_tensor({d, d}, rng);
    Tensor out = self_attention_core(x, params);
    for (std::size_t i = 1; i < 3; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            CHECK(out.at(i, c) == doctest::Approx(out.at(0, c)).epsilon(1e-14));
        }
    }
}

TEST_CASE("cross-attention core matches the brute-force oracle") {
    for (std::uint64_t seed = 5; seed < 10; ++seed) {
        Rng rng(seed, "ca_oracle");
        const std::size_t p = 3, d = 4, n = 4;
        Tensor x = random_tensor({p, d}, rng);
        Tensor m = random_fc(n, rng);
        CrossAttentionParams params;
        params.key = {random_tensor({n, d}, rng)};
        params.query = {random_tensor({d, d}, rng)};
        params.value = {random_tensor({n, d}, rng)};
        params.merge = identity(d);

        Tensor out = cross_attention_core(x, m, params);
        auto expect = cross_attention_oracle(x, m, params.key[0], params.query[0], params.value[0]);
        for (std::size_t i = 0; i < p * d; ++i) {
            CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("zero connectome gives zero cross-attention output pre-residual") {
    Rng rng(6, "ca_zero");
    const std::size_t p = 3, d = 4, n = 5;
    Tensor x = random_tensor({p, d}, rng);
    Tensor m = Tensor::zeros({n, n});
    CrossAttentionParams params;
    params.key = {random_tensor({n, d}, rng)};
    params.query = {random_tensor({d, d}, rng)};
    params.value = {random_tensor({n, d}, rng)};
    params.merge = random_tensor({d, d}, rng);
    std::vector<Tensor> weights;
    Tensor out = cross_attention_core(x, m, params, &weights);
    for (double v : out.data()) {
        CHECK(v == doctest::Approx(0.0).epsilon(1e-15));
    }
    // Uniform weights over regions.
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t r = 0; r < n; ++r) {
            CHECK(weights[0].at(i, r) == doctest::Approx(1.0 / n).epsilon(1e-14));
        }
    }
}

TEST_CASE("single-region cross-attention weight is one") {
    Rng rng(7, "ca_single");
    const std::size_t p = 2, d = 4, n = 1;
    Tensor x = random_tensor({p, d}, rng);
    Tensor m = Tensor::from_values({1, 1}, {1.0});
    CrossAttentionParams params;
    params.key = {random_tensor({n, d}, rng)};
    params.query = {random_tensor({d, d}, rng)};
    params.value = {random_tensor({n, d}, rng)};
    params.merge = identity(d);
    std::vector<Tensor> weights;
    Tensor out = cross_attention_core(x, m, params, &weights);
    for (std::size_t i = 0; i < p; ++i) {
        CHECK(weights[0].at(i, 0) == 1.0);
        for (std::size_t c = 0; c < d; ++c) {
            // Row = (M value projection) row 0 since the single weight is 1.
            CHECK(out.at(i, c) == doctest::Approx(params.value[0].at(0, c)).epsilon(1e-12));
        }
    }
}

TEST_CASE("zeroed merge and ffn output weights make layers pass-through") {
    ModelConfig cfg = small_config();
    LcmModel model(cfg, 11);
    for (auto& p : model.parameters()) {
        const bool is_merge = p.name.find(".merge") != std::string::npos;
        const bool is_ffn_out = p.name.find("ffn.w2") != std::string::npos;
        if (is_merge || is_ffn_out) {
            for (auto& v : p.tensor.raw_data()) v = 0.0;
        }
    }
    Rng rng(12, "passthrough");
    Tensor fc = random_fc(cfg.regions, rng);
    auto result = model.forward(fc);

    // Every layer collapses to identity, so both readouts equal the token
    // table pushed through the readout head.
    auto params = param_map(model);
    Tensor tokens = params.at("tokens");
    Tensor w = params.at("readout.weight");
    const std::size_t p = cfg.schema.token_count();
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (std::size_t i = 0; i < p; ++i) {
            double expect = 0.0;
            for (std::size_t e = 0; e < cfg.dim; ++e) expect += tokens.at(i, e) * w.at(e, 0);
            CHECK(result.readouts[l].data()[i] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("forward composition equals manual sub-block composition") {
    ModelConfig cfg = small_config();
    cfg.layers = 1;
    LcmModel model(cfg, 13);
    Rng rng(14, "compose");
    Tensor fc = random_fc(cfg.regions, rng);
    auto result = model.forward(fc);

    auto params = param_map(model);
    auto collect = [&](const std::string& stem, std::size_t heads) {
        std::vector<Tensor> out;
        for (std::size_t h = 0; h < heads; ++h) out.push_back(params.at(stem + std::to_string(h)));
        return out;
    };
    SelfAttentionParams sa{collect("layer0.self.query", cfg.heads),
                           collect("layer0.self.key", cfg.heads),
                           collect("layer0.self.value", cfg.heads), params.at("layer0.self.merge")};
    CrossAttentionParams ca{collect("layer0.cross.key", cfg.heads),
                            collect("layer0.cross.value", cfg.heads),
                            collect("layer0.cross.query", cfg.heads),
                            params.at("layer0.cross.merge")};

    Tensor x = params.at("tokens");
    Tensor x1 = add(x, self_attention_core(
                           layer_norm(x, params.at("layer0.ln1.gain"), params.at("layer0.ln1.bias")),
                           sa));
    Tensor x2 = add(x1, cross_attention_core(layer_norm(x1, params.at("layer0.ln2.gain"),
                                                        params.at("layer0.ln2.bias")),
                                             fc, ca));
    Tensor x3 =
        add(x2, add_row_broadcast(
                    matmul(gelu(add_row_broadcast(
                               matmul(layer_norm(x2, params.at("layer0.ln3.gain"),
                                                 params.at("layer0.ln3.bias")),
                                      params.at("layer0.ffn.w1")),
                               params.at("layer0.ffn.b1"))),
                           params.at("layer0.ffn.w2")),
                    params.at("layer0.ffn.b2")));
    Tensor readout = reshape(
        add_row_broadcast(matmul(x3, params.at("readout.weight")), params.at("readout.bias")),
        {cfg.schema.token_count()});

    for (std::size_t i = 0; i < readout.size(); ++i) {
        CHECK(result.readouts[0].data()[i] == doctest::Approx(readout.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("parameter count matches the closed form and hand arithmetic") {
    ModelConfig cfg = small_config();
    LcmModel model(cfg, 1);
    CHECK(model.parameter_count() == LcmModel::expected_parameter_count(cfg));

    // P=6, D=8, N=4, L=2, f=4: tokens 48, per layer 14*64 + 2*32 + 88 = 1048,
    // readout 9.
    CHECK(LcmModel::expected_parameter_count(cfg) == 48 + 2 * 1048 + 9);

    ModelConfig big = cfg;
    big.layers = 3;
    big.dim = 16;
    big.heads = 4;
    big.regions = 7;
    LcmModel bigger(big, 1);
    CHECK(bigger.parameter_count() == LcmModel::expected_parameter_count(big));
}

TEST_CASE("identical seeds give identical parameters, and layer prefixes are shared") {
    ModelConfig cfg = small_config();
    LcmModel a(cfg, 77), b(cfg, 77);
    auto pa = a.parameters(), pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        for (std::size_t v = 0; v < pa[i].tensor.size(); ++v) {
            CHECK(pa[i].tensor.data()[v] == pb[i].tensor.data()[v]);
        }
    }

    // A deeper model with the same seed reuses the same per-name streams, so
    // its first layers and readout coincide bit-for-bit with the shallow
    // model's: its layer-2 predictions therefore equal the shallow model's
    // final predictions.
    ModelConfig deeper = cfg;
    deeper.layers = 3;
    LcmModel c(deeper, 77);
    Rng rng(15, "prefix");
    Tensor fc = random_fc(cfg.regions, rng);
    auto shallow = a.forward(fc), deep = c.forward(fc);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (std::size_t i = 0; i < shallow.readouts[l].size(); ++i) {
            CHECK(deep.readouts[l].data()[i] == shallow.readouts[l].data()[i]);
        }
    }
}

TEST_CASE("jointly permuting regions leaves predictions unchanged") {
    ModelConfig cfg = small_config();
    LcmModel model(cfg, 21);
    Rng rng(22, "perm");
    const std::size_t n = cfg.regions;
    Tensor fc = random_fc(n, rng);
    auto base = model.forward(fc);

    std::vector<std::size_t> perm{2, 0, 3, 1};
    Tensor pfc = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            pfc.raw_data()[i * n + j] = fc.at(perm[i], perm[j]);
        }
    }
    for (auto& p : model.parameters()) {
        if (p.name.find("cross.key") == std::string::npos &&
            p.name.find("cross.value") == std::string::npos) {
            continue;
        }
        Tensor t = p.tensor;
        std::vector<double> old(t.data().begin(), t.data().end());
        const std::size_t cols = t.cols();
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < cols; ++c) {
                t.raw_data()[i * cols + c] = old[perm[i] * cols + c];
            }
        }
    }
    auto permuted = model.forward(pfc);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (std::size_t i = 0; i < base.readouts[l].size(); ++i) {
            CHECK(permuted.readouts[l].data()[i] ==
                  doctest::Approx(base.readouts[l].data()[i]).epsilon(1e-10));
        }
    }
}

TEST_CASE("forward rejects mismatched fc shapes") {
    LcmModel model(small_config(), 1);
    CHECK_THROWS_AS(model.forward(Tensor::zeros({5, 5})), ShapeError);
}

TEST_CASE("slice_tasks splits the readout by schema offsets") {
    PhenotypeSchema schema = small_schema();
    Tensor readout = Tensor::from_values({6}, {1, 2, 3, 4, 5, 6});
    auto parts = LcmModel::slice_tasks(readout, schema);
    REQUIRE(parts.size() == 3);
    CHECK(parts[0].size() == 2);
    CHECK(parts[1].size() == 3);
    CHECK(parts[2].size() == 1);
    CHECK(parts[1].data()[0] == 3.0);
    CHECK(parts[2].data()[0] == 6.0);
}

TEST_CASE("cross-attention export rows are probability vectors and match the trace") {
    ModelConfig cfg = small_config();
    LcmModel model(cfg, 31);
    Rng rng(32, "export");
    Tensor fc = random_fc(cfg.regions, rng);

    ForwardOptions opts;
    opts.trace_attention = true;
    auto result = model.forward(fc, opts);
    REQUIRE(result.cross_attention.size() == cfg.layers);

    for (std::size_t l = 1; l <= cfg.layers; ++l) {
        auto exported = model.export_cross_attention(fc, l);
        REQUIRE(exported.size() == 1);
        const Tensor& w = exported[0];
        CHECK(w.rows() == cfg.schema.token_count());
        CHECK(w.cols() == cfg.regions);
        for (std::size_t i = 0; i < w.rows(); ++i) {
            double row_sum = 0.0;
            for (std::size_t r = 0; r < w.cols(); ++r) row_sum += w.at(i, r);
            CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-9));
        }
        for (std::size_t i = 0; i < w.size(); ++i) {
            CHECK(w.data()[i] ==
                  doctest::Approx(result.cross_attention[l - 1].data()[i]).epsilon(1e-12));
        }
    }

    auto heads = model.export_cross_attention(fc, 1, false);
    CHECK(heads.size() == cfg.heads);
    CHECK_THROWS_AS(model.export_cross_attention(fc, 0), ConfigError);
    CHECK_THROWS_AS(model.export_cross_attention(fc, cfg.layers + 1), ConfigError);
}

TEST_CASE("extending with no tasks keeps outputs bit-identical") {
    ModelConfig cfg = small_config();
    LcmModel model(cfg, 41);
    Rng rng(42, "extend");
    Tensor fc = random_fc(cfg.regions, rng);
    auto before = model.forward(fc);
    model.extend_tokens({}, 99);
    auto after = model.forward(fc);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (std::size_t i = 0; i < before.readouts[l].size(); ++i) {
            CHECK(after.readouts[l].data()[i] == before.readouts[l].data()[i]);
        }
    }
}

TEST_CASE("token extension grows offsets and parameter count as expected") {
    ModelConfig cfg = small_config();  // P = 6
    LcmModel model(cfg, 51);
    const std::size_t base_params = model.parameter_count();
    model.extend_tokens({{"diagnosis", TaskKind::kCategorical, 3, {}}}, 52);
    CHECK(model.schema().token_count() == 9);
    CHECK(model.schema().offsets().back() == 9);
    CHECK(model.schema().offset(3) == 6);
    CHECK(model.parameter_count() == base_params + 3 * cfg.dim);

    CHECK_THROWS_AS(model.extend_tokens({{"sex", TaskKind::kCategorical, 2, {}}}, 53),
                    ConfigError);
}

TEST_CASE("restricting self-attention keys reproduces the base model for old tokens") {
    ModelConfig cfg = small_config();
    LcmModel base(cfg, 61);
    LcmModel extended(cfg, 61);
    extended.extend_tokens({{"diagnosis", TaskKind::kCategorical, 4, {}}}, 62);

    Rng rng(63, "mask");
    Tensor fc = random_fc(cfg.regions, rng);
    auto base_out = base.forward(fc);

    ForwardOptions opts;
    opts.self_attn_key_limit = cfg.schema.token_count();
    auto masked = extended.forward(fc, opts);

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (std::size_t i = 0; i < cfg.schema.token_count(); ++i) {
            CHECK(masked.readouts[l].data()[i] ==
                  doctest::Approx(base_out.readouts[l].data()[i]).epsilon(1e-10));
        }
    }

    // Without the key restriction the new tokens do shift old-token outputs.
    auto unmasked = extended.forward(fc);
    bool any_diff = false;
    for (std::size_t i = 0; i < cfg.schema.token_count(); ++i) {
        any_diff = any_diff ||
                   std::abs(unmasked.readouts[0].data()[i] - base_out.readouts[0].data()[i]) > 1e-12;
    }
    CHECK(any_diff);
}

TEST_CASE("every model parameter passes finite differences on a small instance") {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.dim = 8;
    cfg.regions = 4;
    cfg.schema = PhenotypeSchema({{"sex", TaskKind::kCategorical, 2, {}},
                                  {"state", TaskKind::kCategorical, 2, {}},
                                  {"age", TaskKind::kContinuous, 1, {}}});
    LcmModel model(cfg, 71);
    Rng rng(72, "fdmodel");
    Tensor fc = random_fc(cfg.regions, rng);
    std::vector<std::vector<double>> layer_weights;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        layer_weights.push_back(rng.normal_vec(cfg.schema.token_count()));
    }

    auto f = [&]() -> Tensor {
        auto result = model.forward(fc);
        Tensor total;
        for (std::size_t l = 0; l < result.readouts.size(); ++l) {
            Tensor w = Tensor::from_values({cfg.schema.token_count()}, layer_weights[l]);
            Tensor term = sum(mul(result.readouts[l], w));
            total = l == 0 ? term : add(total, term);
        }
        return total;
    };

    std::vector<std::pair<std::string, Tensor>> named;
    for (const auto& p : model.parameters()) named.emplace_back(p.name, p.tensor);
    auto report = finite_difference_check(f, named, 1e-5, 1e-4);
    INFO("worst " << report.worst);
    CHECK(report.all_ok);
}
