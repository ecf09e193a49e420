// Acceptance battery: one criterion per line, nonzero exit when any fails.
// Each criterion is independent; later ones run even if earlier ones fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "lcm/checkpoint.hpp"
#include "lcm/dataset.hpp"
#include "lcm/errors.hpp"
#include "lcm/eval.hpp"
#include "lcm/fc.hpp"
#include "lcm/finetune.hpp"
#include "lcm/gradcheck.hpp"
#include "lcm/log.hpp"
#include "lcm/model.hpp"
#include "lcm/rng.hpp"
#include "lcm/tensor.hpp"
#include "lcm/training.hpp"

namespace fs = std::filesystem;
using namespace lcm;

namespace {

struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void expect(bool cond, const std::string& msg) {
    if (!cond) throw Failure(msg);
}

std::string fmt(const char* pattern, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, v);
    return buf;
}

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

Tensor random_fc(std::size_t n, Rng& rng) {
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

// Element-level attention oracles, no shared code with the library.
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

double ce_oracle(const std::vector<double>& logits, std::size_t target) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double denom = 0.0;
    for (double v : logits) denom += std::exp(v - mx);
    return std::log(denom) + mx - logits[target];
}

double f1_oracle(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                 std::size_t class_count) {
    double sum = 0.0;
    std::size_t included = 0;
    for (std::size_t c = 0; c < class_count; ++c) {
        std::size_t tp = 0, pred_c = 0, gt_c = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            if (preds[i] == c) ++pred_c;
            if (labels[i] == c) ++gt_c;
            if (preds[i] == c && labels[i] == c) ++tp;
        }
        if (gt_c == 0) continue;
        ++included;
        if (tp == 0 || pred_c == 0) continue;
        const double p = double(tp) / double(pred_c);
        const double r = double(tp) / double(gt_c);
        sum += 2.0 * p * r / (p + r);
    }
    return sum / double(included);
}

// Keeps only the chosen label columns of a sample set.
SampleSet task_view(const SampleSet& data, const std::vector<std::size_t>& keep,
                    PhenotypeSchema schema) {
    SampleSet out;
    out.schema = std::move(schema);
    out.region_count = data.region_count;
    for (const auto& s : data.samples) {
        Sample v;
        v.subject_id = s.subject_id;
        v.fc = s.fc;
        for (std::size_t i : keep) v.labels.push_back(s.labels[i]);
        out.samples.push_back(std::move(v));
    }
    return out;
}

fs::path temp_file(const std::string& name) {
    return fs::temp_directory_path() / ("lcm_acceptance_" + std::to_string(::getpid()) + "_" + name);
}

// ---------------------------------------------------------------------------

std::string criterion_gradients() {
    const auto start = std::chrono::steady_clock::now();
    Rng rng(11, "acc/ops");
    double worst = 0.0;
    bool all_ok = true;
    std::string first_bad;

    auto check = [&](const std::string& name, const std::function<Tensor()>& f,
                     const std::vector<std::pair<std::string, Tensor>>& params) {
        auto report = finite_difference_check(f, params, 1e-5, 1e-4);
        worst = std::max(worst, report.worst);
        if (!report.all_ok && first_bad.empty()) first_bad = name;
        all_ok = all_ok && report.all_ok;
        Tape::active().clear();
    };

    // Fixed projection weights keep each checked function deterministic
    // across the repeated evaluations of the finite-difference probe.
    auto weigh = [&](std::vector<std::size_t> shape) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return Tensor::from_values(std::move(shape), rng.normal_vec(n));
    };

    {
        Tensor a = random_tensor({3, 4}, rng, true), b = random_tensor({3, 4}, rng, true);
        Tensor w = weigh({3, 4}), w26 = weigh({2, 6}), w64 = weigh({6, 4}), w38 = weigh({3, 8});
        Tensor w23 = weigh({2, 4}), w43 = weigh({4, 3});
        check("add", [&] { return sum(mul(add(a, b), w)); }, {{"a", a}, {"b", b}});
        check("sub", [&] { return sum(mul(sub(a, b), w)); }, {{"a", a}, {"b", b}});
        check("mul", [&] { return sum(mul(mul(a, b), w)); }, {{"a", a}, {"b", b}});
        check("scale", [&] { return sum(mul(scale(a, 1.7), w)); }, {{"a", a}});
        check("transpose", [&] { return sum(mul(transpose(a), w43)); }, {{"a", a}});
        check("reshape", [&] { return sum(mul(reshape(a, {2, 6}), w26)); }, {{"a", a}});
        check("sum", [&] { return sum(a); }, {{"a", a}});
        check("mean", [&] { return mean(a); }, {{"a", a}});
        check("slice_rows", [&] { return sum(mul(slice_rows(a, 1, 3), w23)); }, {{"a", a}});
        check("softmax_rows", [&] { return sum(mul(softmax(a, 1), w)); }, {{"a", a}});
        check("softmax_cols", [&] { return sum(mul(softmax(a, 0), w)); }, {{"a", a}});
        check("gelu", [&] { return sum(mul(gelu(a), w)); }, {{"a", a}});
        check("concat_rows", [&] { return sum(mul(concat({a, b}, 0), w64)); },
              {{"a", a}, {"b", b}});
        check("concat_cols", [&] { return sum(mul(concat({a, b}, 1), w38)); },
              {{"a", a}, {"b", b}});
    }
    {
        Tensor a = random_tensor({3, 5}, rng, true), b = random_tensor({5, 2}, rng, true);
        Tensor w = weigh({3, 2});
        check("matmul", [&] { return sum(mul(matmul(a, b), w)); }, {{"a", a}, {"b", b}});
    }
    {
        // Keep ReLU inputs away from the kink.
        Tensor a = random_tensor({4, 4}, rng, true);
        for (auto& v : a.raw_data()) v += v >= 0.0 ? 0.25 : -0.25;
        Tensor w = weigh({4, 4});
        check("relu", [&] { return sum(mul(relu(a), w)); }, {{"a", a}});
    }
    {
        Tensor x = random_tensor({3, 5}, rng, true);
        Tensor gain = random_tensor({5}, rng, true), bias = random_tensor({5}, rng, true);
        Tensor w = weigh({3, 5});
        check("layer_norm", [&] { return sum(mul(layer_norm(x, gain, bias), w)); },
              {{"x", x}, {"gain", gain}, {"bias", bias}});
        Tensor rb = random_tensor({5}, rng, true);
        check("add_row_broadcast", [&] { return sum(mul(add_row_broadcast(x, rb), w)); },
              {{"x", x}, {"bias", rb}});
    }
    {
        Tensor logits = random_tensor({4}, rng, true);
        check("cross_entropy", [&] { return cross_entropy_with_logits(logits, 2); },
              {{"logits", logits}});
        Tensor pred = random_tensor({3}, rng, true);
        Tensor target = random_tensor({3}, rng);
        check("mse", [&] { return mse(pred, target); }, {{"pred", pred}});
    }

    // Full model: five tokens, four regions, eight-wide embeddings, two layers.
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.dim = 8;
    cfg.regions = 4;
    cfg.schema = PhenotypeSchema({{"sex", TaskKind::kCategorical, 2, {}},
                                  {"state", TaskKind::kCategorical, 2, {}},
                                  {"age", TaskKind::kContinuous, 1, {}}});
    expect(cfg.schema.token_count() == 5, "expected a five-token schema");
    LcmModel model(cfg, 71);
    Rng frng(72, "acc/fdmodel");
    Tensor fc = random_fc(cfg.regions, frng);
    std::vector<std::vector<double>> layer_weights;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        layer_weights.push_back(frng.normal_vec(cfg.schema.token_count()));
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
    std::size_t param_count = 0;
    for (const auto& p : model.parameters()) {
        named.emplace_back(p.name, p.tensor);
        param_count += p.tensor.size();
    }
    auto report = finite_difference_check(f, named, 1e-5, 1e-4);
    worst = std::max(worst, report.worst);
    if (!report.all_ok && first_bad.empty()) first_bad = "full model";
    all_ok = all_ok && report.all_ok;
    Tape::active().clear();

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    expect(all_ok, "gradient mismatch in " + first_bad + ", worst rel err " +
                       fmt("%.2e", worst));
    expect(secs < 60.0, "gradient battery took " + fmt("%.1f", secs) + "s, budget is 60s");
    return std::to_string(named.size()) + " model tensors / " + std::to_string(param_count) +
           " parameters, worst rel err " + fmt("%.1e", worst) + ", " + fmt("%.1f", secs) + "s";
}

std::string criterion_attention_oracles() {
    double worst_self = 0.0, worst_cross = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(1000 + seed, "acc/self");
        const std::size_t p = 2 + seed % 5, d = 4 + 2 * (seed % 3);
        Tensor x = random_tensor({p, d}, rng);
        SelfAttentionParams sp;
        sp.query = {random_tensor({d, d}, rng)};
        sp.key = {random_tensor({d, d}, rng)};
        sp.value = {random_tensor({d, d}, rng)};
        sp.merge = identity(d);
        Tensor out = self_attention_core(x, sp);
        auto oracle = self_attention_oracle(x, sp.query[0], sp.key[0], sp.value[0]);
        for (std::size_t i = 0; i < p * d; ++i) {
            worst_self = std::max(worst_self, std::abs(out.data()[i] - oracle[i]));
        }
        Tape::active().clear();
    }
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(2000 + seed, "acc/cross");
        const std::size_t p = 2 + seed % 4, d = 4 + 2 * (seed % 2), n = 3 + seed % 5;
        Tensor x = random_tensor({p, d}, rng);
        Tensor fc = random_fc(n, rng);
        CrossAttentionParams cp;
        cp.key = {random_tensor({n, d}, rng)};
        cp.value = {random_tensor({n, d}, rng)};
        cp.query = {random_tensor({d, d}, rng)};
        cp.merge = identity(d);
        Tensor out = cross_attention_core(x, fc, cp);
        auto oracle = cross_attention_oracle(x, fc, cp.key[0], cp.query[0], cp.value[0]);
        for (std::size_t i = 0; i < p * d; ++i) {
            worst_cross = std::max(worst_cross, std::abs(out.data()[i] - oracle[i]));
        }
        Tape::active().clear();
    }
    expect(worst_self <= 1e-12,
           "token attention deviates from the oracle by " + fmt("%.2e", worst_self));
    expect(worst_cross <= 1e-12,
           "region attention deviates from the oracle by " + fmt("%.2e", worst_cross));
    return "20 seeded instances each, max |diff| " + fmt("%.1e", worst_self) + " / " +
           fmt("%.1e", worst_cross);
}

std::string criterion_connectivity() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(3000 + seed, "acc/fc");
        const std::size_t n = 4 + seed % 6, t = 12 + seed % 20;
        Tensor bold = random_tensor({n, t}, rng);
        Tensor fc = compute_fc(bold);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double mi = 0.0, mj = 0.0;
                for (std::size_t s = 0; s < t; ++s) {
                    mi += bold.at(i, s);
                    mj += bold.at(j, s);
                }
                mi /= double(t);
                mj /= double(t);
                double num = 0.0, di = 0.0, dj = 0.0;
                for (std::size_t s = 0; s < t; ++s) {
                    num += (bold.at(i, s) - mi) * (bold.at(j, s) - mj);
                    di += (bold.at(i, s) - mi) * (bold.at(i, s) - mi);
                    dj += (bold.at(j, s) - mj) * (bold.at(j, s) - mj);
                }
                const double expect_v = i == j ? 1.0 : num / std::sqrt(di * dj);
                worst = std::max(worst, std::abs(fc.at(i, j) - expect_v));
            }
        }
    }
    expect(worst <= 1e-12, "correlation deviates from the two-loop formula by " +
                               fmt("%.2e", worst));

    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(4000 + seed, "acc/fcinv");
        const std::size_t n = 4 + seed % 9, t = 16 + seed % 25;
        Tensor fc = compute_fc(random_tensor({n, t}, rng));
        for (std::size_t i = 0; i < n; ++i) {
            expect(fc.at(i, i) == 1.0, "diagonal is not exactly one");
            for (std::size_t j = 0; j < n; ++j) {
                expect(fc.at(i, j) == fc.at(j, i), "matrix is not exactly symmetric");
                expect(std::abs(fc.at(i, j)) <= 1.0 + 1e-12, "correlation outside [-1, 1]");
            }
        }
    }

    double worst_affine = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(5000 + seed, "acc/fcaff");
        const std::size_t n = 5, t = 24;
        Tensor bold = random_tensor({n, t}, rng);
        Tensor warped = Tensor::zeros({n, t});
        for (std::size_t i = 0; i < n; ++i) {
            const double a = 0.5 + 1.5 * rng.uniform(), b = rng.normal(0.0, 3.0);
            for (std::size_t s = 0; s < t; ++s) {
                warped.raw_data()[i * t + s] = a * bold.at(i, s) + b;
            }
        }
        Tensor fc = compute_fc(bold), fc2 = compute_fc(warped);
        for (std::size_t i = 0; i < n * n; ++i) {
            worst_affine = std::max(worst_affine, std::abs(fc.data()[i] - fc2.data()[i]));
        }
    }
    expect(worst_affine <= 1e-10,
           "per-region affine rescaling shifts the matrix by " + fmt("%.2e", worst_affine));
    return "oracle max |diff| " + fmt("%.1e", worst) + ", invariants on 100 scans, affine drift " +
           fmt("%.1e", worst_affine);
}

PhenotypeSchema random_schema(Rng& rng) {
    const std::size_t count = 1 + rng.below(5);
    std::vector<TaskSpec> tasks;
    for (std::size_t t = 0; t < count; ++t) {
        TaskSpec spec;
        spec.name = "t" + std::to_string(t);
        if (rng.uniform() < 0.5) {
            spec.kind = TaskKind::kCategorical;
            spec.class_count = 2 + rng.below(4);
        } else {
            spec.kind = TaskKind::kContinuous;
            spec.class_count = 1;
        }
        tasks.push_back(std::move(spec));
    }
    return PhenotypeSchema(tasks);
}

std::string criterion_multitask_loss() {
    Rng rng(17, "acc/schema");
    for (int trial = 0; trial < 50; ++trial) {
        PhenotypeSchema schema = random_schema(rng);
        std::size_t running = 0;
        for (std::size_t t = 0; t < schema.tasks().size(); ++t) {
            expect(schema.offsets()[t] == running, "offset is not the prefix sum");
            running += schema.tasks()[t].class_count;
        }
        expect(schema.offsets().back() == running, "token count differs from the prefix sum");

        Tensor readout = random_tensor({schema.token_count()}, rng);
        auto slices = LcmModel::slice_tasks(readout, schema);
        expect(slices.size() == schema.tasks().size(), "one slice per task");
        for (std::size_t t = 0; t < slices.size(); ++t) {
            expect(slices[t].size() == schema.tasks()[t].class_count, "slice width");
            for (std::size_t i = 0; i < slices[t].size(); ++i) {
                expect(slices[t].data()[i] == readout.data()[schema.offsets()[t] + i],
                       "slice content");
            }
        }
        Tape::active().clear();
    }

    double worst = 0.0;
    Rng lr(18, "acc/loss");
    for (int trial = 0; trial < 20; ++trial) {
        PhenotypeSchema schema = random_schema(lr);
        const std::size_t batch = 3;
        std::vector<std::vector<Tensor>> preds(batch);
        std::vector<LabelRow> labels(batch);
        bool any = false;
        for (std::size_t s = 0; s < batch; ++s) {
            for (std::size_t t = 0; t < schema.tasks().size(); ++t) {
                preds[s].push_back(
                    random_tensor({schema.tasks()[t].class_count}, lr));
                if (lr.uniform() < 0.7) {
                    const auto& task = schema.tasks()[t];
                    labels[s].push_back(task.kind == TaskKind::kCategorical
                                            ? double(lr.below(task.class_count))
                                            : lr.normal());
                    any = true;
                } else {
                    labels[s].push_back(std::nullopt);
                }
            }
        }
        if (!any) continue;

        double oracle = 0.0;
        for (std::size_t t = 0; t < schema.tasks().size(); ++t) {
            double sum_t = 0.0;
            std::size_t n = 0;
            for (std::size_t s = 0; s < batch; ++s) {
                if (!labels[s][t].has_value()) continue;
                const auto& task = schema.tasks()[t];
                std::vector<double> vals(preds[s][t].data().begin(), preds[s][t].data().end());
                if (task.kind == TaskKind::kCategorical) {
                    sum_t += ce_oracle(vals, static_cast<std::size_t>(*labels[s][t]));
                } else {
                    const double d = vals[0] - *labels[s][t];
                    sum_t += d * d;
                }
                ++n;
            }
            if (n > 0) oracle += sum_t / double(n);
        }

        std::vector<const LabelRow*> label_ptrs;
        for (const auto& row : labels) label_ptrs.push_back(&row);
        auto breakdown = multitask_loss(schema, preds, label_ptrs);
        worst = std::max(worst, std::abs(breakdown.total.value() - oracle));
        Tape::active().clear();
    }
    expect(worst <= 1e-12, "loss differs from the per-task sum by " + fmt("%.2e", worst));

    double worst_ce = 0.0;
    for (std::size_t classes = 2; classes <= 8; ++classes) {
        Tensor logits = Tensor::from_values({classes}, std::vector<double>(classes, 0.37));
        const double ce = cross_entropy_with_logits(logits, classes / 2).value();
        worst_ce = std::max(worst_ce, std::abs(ce - std::log(double(classes))));
        Tape::active().clear();
    }
    expect(worst_ce <= 1e-10, "uniform logits miss ln(classes) by " + fmt("%.2e", worst_ce));
    return "50 schemas, additivity max |diff| " + fmt("%.1e", worst) + ", uniform CE drift " +
           fmt("%.1e", worst_ce);
}

std::string criterion_supervision_schedule() {
    SynthConfig sc;
    sc.tasks = {{"sex", TaskKind::kCategorical, 2, {}}, {"state", TaskKind::kCategorical, 2, {}}};
    sc.subjects_per_class = 8;
    sc.regions = 8;
    sc.timepoints = 48;
    sc.effect = 2.0;
    sc.noise = 0.2;
    SampleSet data = synth_generate(sc, 505).samples;

    ModelConfig mc;
    mc.layers = 3;
    mc.heads = 2;
    mc.dim = 16;
    mc.regions = 8;
    mc.schema = data.schema;

    TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.batch_size = 8;
    tc.max_epochs = 6;
    tc.patience = 6;
    tc.seed = 505;

    auto run = [&](std::size_t momentum_epochs, bool last_only) {
        TrainConfig cfg = tc;
        cfg.momentum_epochs = momentum_epochs;
        cfg.supervise_last_only = last_only;
        LcmModel model(mc, 506);
        return train(model, data, data, cfg);
    };

    auto averaged_only = run(tc.max_epochs, false);
    for (const auto& epoch : averaged_only.history) {
        expect(epoch.stage == "momentum", "expected every epoch in the averaged stage");
        expect(epoch.selections.empty(), "averaged stage must not select layers");
    }
    expect(averaged_only.checkpoint.selection_histograms.empty(),
           "averaged-only run recorded selection histograms");

    auto adaptive_only = run(0, false);
    std::size_t batches_per_epoch = (data.samples.size() + tc.batch_size - 1) / tc.batch_size;
    for (const auto& epoch : adaptive_only.history) {
        expect(epoch.stage == "adaptive", "expected every epoch in the adaptive stage");
        expect(!epoch.selections.empty(), "adaptive epochs must record selections");
    }
    for (const auto& [task, counts] : adaptive_only.checkpoint.selection_histograms) {
        std::size_t total = 0;
        for (auto c : counts) total += c;
        expect(total == batches_per_epoch, "histogram rows must sum to batches per epoch");
        expect(counts.size() == mc.layers, "one histogram bin per layer");
    }

    auto mixed = run(3, false);
    for (std::size_t e = 0; e < mixed.history.size(); ++e) {
        expect(mixed.history[e].stage == (e < 3 ? "momentum" : "adaptive"),
               "mixed run must switch stages at the configured epoch");
    }

    auto last_only = run(0, true);
    for (const auto& [task, counts] : last_only.checkpoint.selection_histograms) {
        for (std::size_t l = 0; l + 1 < counts.size(); ++l) {
            expect(counts[l] == 0, "last-layer-only run selected an earlier layer");
        }
        expect(counts.back() == batches_per_epoch, "last layer must take every selection");
    }

    // Planted fixture: one layer predicts both tasks perfectly, every other
    // layer is confidently wrong; the adaptive stage must pick the planted
    // layer in every batch.
    PhenotypeSchema schema({{"state", TaskKind::kCategorical, 3, {}},
                            {"score", TaskKind::kContinuous, 1, {}}});
    const std::size_t layers = 4, planted = 2, batch = 5;
    Rng prng(507, "acc/planted");
    std::size_t hits = 0, total = 0;
    for (std::size_t b = 0; b < 40; ++b) {
        std::vector<std::vector<Tensor>> readouts(batch);
        std::vector<LabelRow> labels(batch);
        for (std::size_t s = 0; s < batch; ++s) {
            const std::size_t cls = prng.below(3);
            const double target = prng.normal();
            labels[s] = {double(cls), target};
            for (std::size_t l = 0; l < layers; ++l) {
                std::vector<double> row(schema.token_count(), 0.0);
                for (std::size_t c = 0; c < 3; ++c) {
                    const std::size_t good = l == planted ? cls : (cls + 1) % 3;
                    row[c] = c == good ? 8.0 : -8.0;
                }
                row[3] = l == planted ? target : target + 2.0;
                readouts[s].push_back(Tensor::from_values({schema.token_count()}, row));
            }
        }
        std::vector<const LabelRow*> label_ptrs;
        for (const auto& row : labels) label_ptrs.push_back(&row);
        auto step = stage2_loss(schema, readouts, label_ptrs, 0, b);
        expect(step.selections.size() == 2, "one selection per task per batch");
        for (const auto& sel : step.selections) {
            ++total;
            if (sel.layer == planted) ++hits;
        }
        Tape::active().clear();
    }
    expect(hits == total, "planted layer chosen in " + std::to_string(hits) + "/" +
                              std::to_string(total) + " selections");
    return "averaged/adaptive/mixed/last-only all reachable; planted layer chosen in " +
           std::to_string(hits) + "/" + std::to_string(total) + " batch selections";
}

std::string criterion_overfit() {
    const auto start = std::chrono::steady_clock::now();
    SynthConfig sc;
    sc.tasks = {{"sex", TaskKind::kCategorical, 2, {}}, {"state", TaskKind::kCategorical, 2, {}}};
    sc.subjects_per_class = 32;  // 64 subjects, one scan each
    sc.regions = 16;
    sc.timepoints = 96;
    sc.effect = 2.0;
    sc.noise = 0.2;
    SampleSet data = synth_generate(sc, 606).samples;
    expect(data.samples.size() == 64, "expected 64 training samples");

    ModelConfig mc;
    mc.layers = 4;
    mc.heads = 4;
    mc.dim = 32;
    mc.regions = 16;
    mc.schema = data.schema;

    TrainConfig tc;
    tc.learning_rate = 3e-3;
    tc.batch_size = 16;
    tc.max_epochs = 500;
    tc.momentum_epochs = 5;
    tc.patience = 75;
    tc.seed = 606;

    LcmModel model(mc, 606);
    auto result = train(model, data, data, tc);
    auto report = evaluate(model, result.checkpoint, data);

    double acc_sex = 0.0, acc_state = 0.0;
    for (const auto& t : report.tasks) {
        if (t.task == "sex") acc_sex = t.accuracy;
        if (t.task == "state") acc_state = t.accuracy;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    expect(result.epochs_run <= 500, "epoch budget exceeded");
    expect(acc_sex >= 0.99 && acc_state >= 0.99,
           "training accuracy " + fmt("%.3f", acc_sex) + " / " + fmt("%.3f", acc_state) +
               " after " + std::to_string(result.epochs_run) + " epochs");
    expect(secs < 300.0, "took " + fmt("%.0f", secs) + "s, budget is 300s");
    return "both tasks at " + fmt("%.3f", acc_sex) + " / " + fmt("%.3f", acc_state) + " in " +
           std::to_string(result.epochs_run) + " epochs, " + fmt("%.0f", secs) + "s";
}

std::string criterion_depth_trend() {
    SynthConfig sc;
    sc.tasks = {{"sex", TaskKind::kCategorical, 2, {}},
                {"state", TaskKind::kCategorical, 2, {}},
                {"age", TaskKind::kContinuous, 1, {}}};
    sc.subjects_per_class = 24;
    sc.regions = 16;
    sc.timepoints = 96;
    sc.effect = 1.5;
    sc.noise = 0.25;
    SampleSet data = synth_generate(sc, 707).samples;

    ScalingStudyConfig cfg;
    cfg.depths = {2, 4, 8};
    cfg.seeds = {1, 2, 3};
    cfg.base.heads = 4;
    cfg.base.dim = 32;
    cfg.base.regions = 16;
    cfg.base.schema = data.schema;
    cfg.train.learning_rate = 1e-3;
    cfg.train.batch_size = 8;
    cfg.train.max_epochs = 50;
    cfg.train.momentum_epochs = 5;
    cfg.train.patience = 50;
    cfg.include_mlp_baseline = true;
    cfg.mlp_layers = 2;

    const auto rows = scaling_study(cfg, data, data);
    expect(rows.size() == 4, "three depths plus the feed-forward arm");
    const double m2 = rows[0].median_final_loss, m4 = rows[1].median_final_loss,
                 m8 = rows[2].median_final_loss;
    std::string table = "medians L2/L4/L8 " + fmt("%.4f", m2) + "/" + fmt("%.4f", m4) + "/" +
                        fmt("%.4f", m8) + ", feed-forward " +
                        fmt("%.4f", rows[3].median_final_loss) + " @" +
                        std::to_string(rows[3].parameter_count) + " params";
    expect(m2 >= m4 && m4 >= m8, "median final loss is not non-increasing with depth: " + table);
    return table;
}

std::string criterion_transfer() {
    SynthConfig sc;
    sc.tasks = {{"A", TaskKind::kCategorical, 2, {}},
                {"B", TaskKind::kCategorical, 2, {}},
                {"C", TaskKind::kCategorical, 2, {}}};
    sc.subjects_per_class = 60;
    sc.regions = 12;
    sc.timepoints = 72;
    sc.scans_per_subject = 2;
    sc.effect = 2.0;
    sc.noise = 0.25;

    const PhenotypeSchema pre_schema({sc.tasks[0], sc.tasks[1]});
    const PhenotypeSchema down_schema({sc.tasks[2]});
    const std::vector<TaskSpec> new_tasks = {sc.tasks[2]};

    ModelConfig mc;
    mc.layers = 2;
    mc.heads = 2;
    mc.dim = 16;
    mc.regions = 12;
    mc.schema = pre_schema;

    double mean_pre = 0.0, mean_scratch = 0.0;
    std::string pairs;
    const std::size_t seeds = 5;
    for (std::uint64_t s = 0; s < seeds; ++s) {
        // One generative draw per seed so every task shares the same latent
        // structure; disjoint subject halves feed pretraining (labels A, B)
        // and the downstream problem (label C only).
        SampleSet full = synth_generate(sc, 300 + s).samples;
        const FoldSplit half = kfold_split(full, 2, 900 + s);
        SampleSet upstream = task_view(fold_subset(full, half, 0, false), {0, 1}, pre_schema);
        SampleSet downstream = task_view(fold_subset(full, half, 0, true), {2}, down_schema);

        TrainConfig pre_tc;
        pre_tc.learning_rate = 1e-3;
        pre_tc.batch_size = 16;
        pre_tc.max_epochs = 40;
        pre_tc.momentum_epochs = 5;
        pre_tc.patience = 40;
        pre_tc.seed = 300 + s;
        const FoldSplit pre_split = kfold_split(upstream, 4, 300 + s);
        LcmModel pre_model(mc, 300 + s);
        auto pre_result = train(pre_model, fold_subset(upstream, pre_split, 0, false),
                                fold_subset(upstream, pre_split, 0, true), pre_tc);

        // Held-out transfer: the pretrained tasks ride along unsupervised so
        // the backbone is only pulled by the new task's loss.
        FinetuneSpec spec;
        spec.new_tasks = new_tasks;
        spec.pseudo_labels = {{"A", {true, 0.0}}, {"B", {true, 0.0}}};
        spec.fewshot_ratio = 0.1;
        SampleSet lifted = assign_pseudo_labels(downstream, pre_schema, spec);
        const FoldSplit down_split = kfold_split(lifted, 2, 400 + s);
        const SampleSet test_set = fold_subset(lifted, down_split, 0, true);
        const SampleSet pool = fold_subset(lifted, down_split, 0, false);
        const SampleSet few = fewshot_subsample(pool, spec.fewshot_ratio, 400 + s,
                                                std::optional<std::string>("C"));

        TrainConfig ft_tc;
        ft_tc.learning_rate = 1e-3;
        ft_tc.batch_size = 8;
        ft_tc.max_epochs = 40;
        ft_tc.momentum_epochs = 3;
        ft_tc.patience = 40;
        ft_tc.seed = 500 + s;

        auto macro_f1_of_c = [&](LcmModel& model) {
            auto result = finetune(model, few, few, ft_tc);
            auto report = evaluate(model, result.checkpoint, test_set);
            for (const auto& t : report.tasks) {
                if (t.task == "C") return t.macro_f1;
            }
            throw Failure("held-out task missing from the report");
        };

        LcmModel warm = extend_from_checkpoint(pre_result.checkpoint, new_tasks, 600 + s);
        const double f1_pre = macro_f1_of_c(warm);

        ModelConfig scratch_mc = mc;
        scratch_mc.schema = pre_schema.extended(new_tasks);
        LcmModel cold(scratch_mc, 700 + s);
        const double f1_scratch = macro_f1_of_c(cold);

        mean_pre += f1_pre / double(seeds);
        mean_scratch += f1_scratch / double(seeds);
        pairs += (pairs.empty() ? "" : " ") + fmt("%.2f", f1_pre) + ">" + fmt("%.2f", f1_scratch);
    }
    expect(mean_pre + 1e-12 >= mean_scratch,
           "pretrained mean macro-F1 " + fmt("%.3f", mean_pre) + " < scratch " +
               fmt("%.3f", mean_scratch) + " (pairs " + pairs + ")");
    return "held-out macro-F1 mean " + fmt("%.3f", mean_pre) + " (pretrained) vs " +
           fmt("%.3f", mean_scratch) + " (scratch) over 5 paired seeds";
}

std::string criterion_extension_mechanics() {
    ModelConfig mc;
    mc.layers = 2;
    mc.heads = 2;
    mc.dim = 8;
    mc.regions = 5;
    mc.schema =
        PhenotypeSchema({{"sex", TaskKind::kCategorical, 2, {}}, {"age", TaskKind::kContinuous, 1, {}}});
    LcmModel model(mc, 909);
    Rng rng(910, "acc/ext");
    Tensor fc = random_fc(mc.regions, rng);
    const auto base_out = model.forward(fc);
    const std::size_t base_params = LcmModel::expected_parameter_count(mc);
    const std::size_t base_tokens = mc.schema.token_count();

    LcmModel same(mc, 909);
    same.extend_tokens({}, 911);
    const auto same_out = same.forward(fc);
    for (std::size_t l = 0; l < base_out.readouts.size(); ++l) {
        for (std::size_t i = 0; i < base_tokens; ++i) {
            expect(same_out.readouts[l].data()[i] == base_out.readouts[l].data()[i],
                   "empty extension changed an output bit");
        }
    }

    LcmModel wider(mc, 909);
    wider.extend_tokens({{"extra", TaskKind::kCategorical, 3, {}}}, 912);
    std::size_t wider_params = 0;
    for (const auto& p : wider.parameters()) wider_params += p.tensor.size();
    expect(wider_params == base_params + 3 * mc.dim,
           "extension added " + std::to_string(wider_params - base_params) +
               " parameters, expected " + std::to_string(3 * mc.dim));

    ForwardOptions masked;
    masked.self_attn_key_limit = base_tokens;
    const auto masked_out = wider.forward(fc, masked);
    double worst = 0.0;
    for (std::size_t l = 0; l < base_out.readouts.size(); ++l) {
        for (std::size_t i = 0; i < base_tokens; ++i) {
            worst = std::max(worst, std::abs(masked_out.readouts[l].data()[i] -
                                             base_out.readouts[l].data()[i]));
        }
    }
    expect(worst <= 1e-10,
           "masking the new tokens leaves residue " + fmt("%.2e", worst));
    return "identity on empty extension, +" + std::to_string(3 * mc.dim) +
           " params for 3 classes, masked drift " + fmt("%.1e", worst);
}

std::string criterion_determinism() {
    SynthConfig sc;
    sc.tasks = {{"sex", TaskKind::kCategorical, 2, {}}, {"age", TaskKind::kContinuous, 1, {}}};
    sc.subjects_per_class = 6;
    sc.regions = 6;
    sc.timepoints = 32;
    sc.effect = 1.5;
    sc.noise = 0.3;
    SampleSet data = synth_generate(sc, 1010).samples;

    ModelConfig mc;
    mc.layers = 2;
    mc.heads = 2;
    mc.dim = 8;
    mc.regions = 6;
    mc.schema = data.schema;

    TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.batch_size = 8;
    tc.max_epochs = 4;
    tc.momentum_epochs = 2;
    tc.patience = 4;
    tc.seed = 1010;

    auto run_once = [&](const fs::path& metrics_path) {
        LcmModel model(mc, 1010);
        auto result = train(model, data, data, tc);
        write_metrics_history(result.history, metrics_path);
        return checkpoint_to_json(result.checkpoint).dump();
    };
    const fs::path m1 = temp_file("metrics1.jsonl"), m2 = temp_file("metrics2.jsonl");
    const std::string ckpt1 = run_once(m1), ckpt2 = run_once(m2);
    const auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream buf;
        buf << in.rdbuf();
        return buf.str();
    };
    expect(slurp(m1) == slurp(m2), "metrics files differ between identical runs");
    expect(ckpt1 == ckpt2, "checkpoint JSON differs between identical runs");
    fs::remove(m1);
    fs::remove(m2);

    // Checkpoint file round-trip: bit-exact tensors, byte-identical re-dump.
    LcmModel model(mc, 1011);
    Checkpoint before = snapshot_model(model);
    before.target_scalers["age"] = {12.3456789012345678, 0.000123456789012345};
    before.selection_histograms["sex"] = {3, 1};
    const fs::path ckpt_path = temp_file("ckpt.json");
    save_checkpoint(before, ckpt_path);
    Checkpoint after = load_checkpoint(ckpt_path);
    fs::remove(ckpt_path);
    expect(after.tensors.size() == before.tensors.size(), "tensor count changed");
    for (std::size_t i = 0; i < before.tensors.size(); ++i) {
        expect(after.tensors[i].name == before.tensors[i].name, "tensor name changed");
        expect(after.tensors[i].values == before.tensors[i].values,
               "tensor values are not bit-exact after the round trip");
    }
    expect(checkpoint_to_json(after).dump() == checkpoint_to_json(before).dump(),
           "checkpoint re-serialization is not byte-identical");

    // Connectivity file round-trip.
    Rng rng(1012, "acc/fcfile");
    Tensor fc = compute_fc(random_tensor({7, 40}, rng));
    const fs::path fc_path = temp_file("fc.csv");
    write_fc_csv(fc, fc_path.string());
    Tensor fc2 = read_fc_csv(fc_path.string());
    fs::remove(fc_path);
    expect(fc2.shape() == fc.shape(), "matrix shape changed in the file round trip");
    for (std::size_t i = 0; i < fc.size(); ++i) {
        expect(fc.data()[i] == fc2.data()[i], "matrix value changed in the file round trip");
    }
    return "training reruns byte-identical; checkpoint and matrix files bit-exact";
}

std::string criterion_metric_oracles() {
    Rng rng(21, "acc/metrics");
    double worst = 0.0;
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t classes = 2 + rng.below(4);
        const std::size_t n = 4 + rng.below(60);
        std::vector<std::size_t> preds(n), labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            preds[i] = rng.below(classes);
            labels[i] = rng.below(classes);
        }
        std::size_t correct = 0;
        for (std::size_t i = 0; i < n; ++i) correct += preds[i] == labels[i] ? 1 : 0;
        expect(accuracy(preds, labels) == double(correct) / double(n),
               "accuracy differs from the counting oracle");
        worst = std::max(worst, std::abs(macro_f1(preds, labels, classes) -
                                         f1_oracle(preds, labels, classes)));
    }
    expect(worst <= 1e-12, "macro-F1 deviates from the counting oracle by " + fmt("%.2e", worst));

    // Degenerate all-zero predictor on a balanced binary problem: one class
    // scores F1 = 2/3, the other 0, so the macro average is exactly 1/3.
    const std::vector<std::size_t> preds{0, 0, 0, 0}, labels{0, 0, 1, 1};
    expect(accuracy(preds, labels) == 0.5, "degenerate accuracy is not exactly one half");
    expect(std::abs(macro_f1(preds, labels, 2) - 1.0 / 3.0) <= 1e-12,
           "degenerate macro-F1 is not one third");
    return "40 random instances, max |diff| " + fmt("%.1e", worst) +
           "; analytic one-third case exact";
}

}  // namespace

int main() {
    set_log_level(LogLevel::kError);
    struct Criterion {
        std::string name;
        std::function<std::string()> run;
    };
    const std::vector<Criterion> criteria = {
        {"finite-difference gradients for every op and the full model", criterion_gradients},
        {"attention cores match element-level oracles", criterion_attention_oracles},
        {"connectivity matches the correlation formula and its invariants",
         criterion_connectivity},
        {"multitask loss adds per-task losses over schema slices", criterion_multitask_loss},
        {"supervision schedule reachable and planted layer always selected",
         criterion_supervision_schedule},
        {"desk-scale overfit reaches 99% training accuracy on both tasks", criterion_overfit},
        {"median final training loss is non-increasing with depth", criterion_depth_trend},
        {"pretraining then fewshot finetuning beats training from scratch", criterion_transfer},
        {"token extension: identity, exact parameter delta, masked equivalence",
         criterion_extension_mechanics},
        {"bit-exact determinism and file round-trips", criterion_determinism},
        {"accuracy and macro-F1 match counting oracles", criterion_metric_oracles},
    };

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto start = std::chrono::steady_clock::now();
        bool ok = true;
        std::string detail;
        try {
            detail = criteria[i].run();
        } catch (const std::exception& e) {
            ok = false;
            detail = e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("%s %2zu/%zu %s [%s] (%.1fs)\n", ok ? "PASS" : "FAIL", i + 1, criteria.size(),
                    criteria[i].name.c_str(), detail.c_str(), secs);
        std::fflush(stdout);
        if (!ok) ++failed;
    }
    if (failed == 0) {
        std::printf("all %zu criteria passed\n", criteria.size());
        return 0;
    }
    std::printf("%d of %zu criteria failed\n", failed, criteria.size());
    return 1;
}
