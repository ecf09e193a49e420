#include "lcm/model.hpp"

#include <cmath>

#include "lcm/errors.hpp"
#include "lcm/rng.hpp"

namespace lcm {

void ModelConfig::validate() const {
    if (layers == 0) throw ConfigError("model: layers must be >= 1");
    if (heads == 0 || dim == 0 || dim % heads != 0) {
        throw ConfigError("model: dim " + std::to_string(dim) + " not divisible by heads " +
                          std::to_string(heads));
    }
    if (regions == 0) throw ConfigError("model: regions must be >= 1");
    if (ffn_factor == 0) throw ConfigError("model: ffn_factor must be >= 1");
    if (schema.task_count() == 0) throw ConfigError("model: empty schema");
}

nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{{"layers", layers},        {"heads", heads},
                          {"dim", dim},              {"regions", regions},
                          {"ffn_factor", ffn_factor}, {"schema", schema.to_json()}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.dim = j.at("dim").get<std::size_t>();
    c.regions = j.at("regions").get<std::size_t>();
    c.ffn_factor = j.value("ffn_factor", std::size_t{4});
    if (j.contains("schema")) c.schema = PhenotypeSchema::from_json(j.at("schema"));
    return c;
}

namespace {

Tensor init_weight(Rng& init, const std::string& name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    Rng rng = init.stream(name);
    return Tensor::from_values(std::move(shape), rng.normal_vec(n, 0.0, 0.02), true);
}

Tensor init_zeros(std::vector<std::size_t> shape) { return Tensor::zeros(std::move(shape), true); }

Tensor init_ones(std::vector<std::size_t> shape) {
    return Tensor::full(std::move(shape), 1.0, true);
}

Tensor merge_heads(const std::vector<Tensor>& heads, const Tensor& merge) {
    Tensor joined = heads.size() == 1 ? heads[0] : concat(heads, 1);
    return matmul(joined, merge);
}

}  // namespace

Tensor self_attention_core(const Tensor& x, const SelfAttentionParams& p,
                           std::optional<std::size_t> key_limit) {
    if (p.query.empty() || p.query.size() != p.key.size() || p.key.size() != p.value.size()) {
        throw ShapeError("self_attention: inconsistent head parameter lists");
    }
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(p.query[0].cols()));
    std::vector<Tensor> heads;
    heads.reserve(p.query.size());
    for (std::size_t h = 0; h < p.query.size(); ++h) {
        Tensor q = matmul(x, p.query[h]);
        Tensor k = matmul(x, p.key[h]);
        Tensor v = matmul(x, p.value[h]);
        if (key_limit) {
            k = slice_rows(k, 0, *key_limit);
            v = slice_rows(v, 0, *key_limit);
        }
        Tensor logits = scale(matmul(q, transpose(k)), inv_scale);
        Tensor weights = softmax(logits, 1);  // each query row sums to 1
        heads.push_back(matmul(weights, v));
    }
    return merge_heads(heads, p.merge);
}

Tensor cross_attention_core(const Tensor& x, const Tensor& fc, const CrossAttentionParams& p,
                            std::vector<Tensor>* head_weights) {
    if (p.key.empty() || p.key.size() != p.query.size() || p.query.size() != p.value.size()) {
        throw ShapeError("cross_attention: inconsistent head parameter lists");
    }
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(p.query[0].cols()));
    std::vector<Tensor> heads;
    heads.reserve(p.key.size());
    for (std::size_t h = 0; h < p.key.size(); ++h) {
        Tensor k = matmul(fc, p.key[h]);     // regions x head_dim
        Tensor q = matmul(x, p.query[h]);    // tokens x head_dim
        Tensor logits = scale(matmul(k, transpose(q)), inv_scale);  // regions x tokens
        Tensor weights = softmax(logits, 0);  // each token's column sums to 1
        Tensor v = matmul(fc, p.value[h]);
        heads.push_back(matmul(transpose(weights), v));  // tokens x head_dim
        if (head_weights) head_weights->push_back(transpose(weights));
    }
    return merge_heads(heads, p.merge);
}

LcmModel::LcmModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    const std::size_t d = config_.dim, n = config_.regions, h = config_.heads;
    const std::size_t hd = d / h, f = config_.ffn_factor;
    const std::size_t p = config_.schema.token_count();

    Rng init(seed, "init");
    tokens_ = init_weight(init, "tokens", {p, d});
    layers_.resize(config_.layers);
    for (std::size_t l = 0; l < config_.layers; ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        Layer& layer = layers_[l];
        layer.ln1_gain = init_ones({d});
        layer.ln1_bias = init_zeros({d});
        for (std::size_t i = 0; i < h; ++i) {
            const std::string hs = std::to_string(i);
            layer.self_attn.query.push_back(init_weight(init, prefix + "self.query" + hs, {d, hd}));
            layer.self_attn.key.push_back(init_weight(init, prefix + "self.key" + hs, {d, hd}));
            layer.self_attn.value.push_back(init_weight(init, prefix + "self.value" + hs, {d, hd}));
        }
        layer.self_attn.merge = init_weight(init, prefix + "self.merge", {d, d});
        layer.ln2_gain = init_ones({d});
        layer.ln2_bias = init_zeros({d});
        for (std::size_t i = 0; i < h; ++i) {
            const std::string hs = std::to_string(i);
            layer.cross_attn.key.push_back(init_weight(init, prefix + "cross.key" + hs, {n, hd}));
            layer.cross_attn.query.push_back(
                init_weight(init, prefix + "cross.query" + hs, {d, hd}));
            layer.cross_attn.value.push_back(
                init_weight(init, prefix + "cross.value" + hs, {n, hd}));
        }
        layer.cross_attn.merge = init_weight(init, prefix + "cross.merge", {d, d});
        layer.ln3_gain = init_ones({d});
        layer.ln3_bias = init_zeros({d});
        layer.ffn_w1 = init_weight(init, prefix + "ffn.w1", {d, f * d});
        layer.ffn_b1 = init_zeros({f * d});
        layer.ffn_w2 = init_weight(init, prefix + "ffn.w2", {f * d, d});
        layer.ffn_b2 = init_zeros({d});
    }
    readout_weight_ = init_weight(init, "readout.weight", {d, 1});
    readout_bias_ = init_zeros({1});
}

std::vector<NamedParam> LcmModel::parameters() const {
    std::vector<NamedParam> out;
    out.push_back({"tokens", tokens_});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        const Layer& layer = layers_[l];
        out.push_back({prefix + "ln1.gain", layer.ln1_gain});
        out.push_back({prefix + "ln1.bias", layer.ln1_bias});
        for (std::size_t h = 0; h < layer.self_attn.query.size(); ++h) {
            const std::string hs = std::to_string(h);
            out.push_back({prefix + "self.query" + hs, layer.self_attn.query[h]});
            out.push_back({prefix + "self.key" + hs, layer.self_attn.key[h]});
            out.push_back({prefix + "self.value" + hs, layer.self_attn.value[h]});
        }
        out.push_back({prefix + "self.merge", layer.self_attn.merge});
        out.push_back({prefix + "ln2.gain", layer.ln2_gain});
        out.push_back({prefix + "ln2.bias", layer.ln2_bias});
        for (std::size_t h = 0; h < layer.cross_attn.key.size(); ++h) {
            const std::string hs = std::to_string(h);
            out.push_back({prefix + "cross.key" + hs, layer.cross_attn.key[h]});
            out.push_back({prefix + "cross.query" + hs, layer.cross_attn.query[h]});
            out.push_back({prefix + "cross.value" + hs, layer.cross_attn.value[h]});
        }
        out.push_back({prefix + "cross.merge", layer.cross_attn.merge});
        out.push_back({prefix + "ln3.gain", layer.ln3_gain});
        out.push_back({prefix + "ln3.bias", layer.ln3_bias});
        out.push_back({prefix + "ffn.w1", layer.ffn_w1});
        out.push_back({prefix + "ffn.b1", layer.ffn_b1});
        out.push_back({prefix + "ffn.w2", layer.ffn_w2});
        out.push_back({prefix + "ffn.b2", layer.ffn_b2});
    }
    out.push_back({"readout.weight", readout_weight_});
    out.push_back({"readout.bias", readout_bias_});
    return out;
}

std::vector<Tensor> LcmModel::parameter_tensors() const {
    std::vector<Tensor> out;
    for (auto& p : parameters()) out.push_back(p.tensor);
    return out;
}

std::size_t LcmModel::parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) total += p.tensor.size();
    return total;
}

std::size_t LcmModel::expected_parameter_count(const ModelConfig& config) {
    const std::size_t d = config.dim, n = config.regions, f = config.ffn_factor;
    const std::size_t p = config.schema.token_count();
    const std::size_t per_layer = (6 + 2 * f) * d * d + 2 * n * d + (7 + f) * d;
    return p * d + config.layers * per_layer + d + 1;
}

Tensor LcmModel::apply_layer(const Layer& layer, const Tensor& x, const Tensor& fc,
                             const ForwardOptions& opts, Tensor* trace_out) const {
    Tensor x1 = add(x, self_attention_core(layer_norm(x, layer.ln1_gain, layer.ln1_bias),
                                           layer.self_attn, opts.self_attn_key_limit));

    std::vector<Tensor> head_weights;
    Tensor normed = layer_norm(x1, layer.ln2_gain, layer.ln2_bias);
    Tensor cross = cross_attention_core(normed, fc, layer.cross_attn,
                                        opts.trace_attention ? &head_weights : nullptr);
    Tensor x2 = add(x1, cross);
    if (opts.trace_attention && trace_out) {
        Tensor acc = head_weights[0];
        for (std::size_t h = 1; h < head_weights.size(); ++h) acc = add(acc, head_weights[h]);
        *trace_out = scale(acc, 1.0 / static_cast<double>(head_weights.size()));
    }

    Tensor normed3 = layer_norm(x2, layer.ln3_gain, layer.ln3_bias);
    Tensor hidden = gelu(add_row_broadcast(matmul(normed3, layer.ffn_w1), layer.ffn_b1));
    Tensor ffn = add_row_broadcast(matmul(hidden, layer.ffn_w2), layer.ffn_b2);
    return add(x2, ffn);
}

ForwardResult LcmModel::forward(const Tensor& fc, const ForwardOptions& opts) const {
    if (fc.rank() != 2 || fc.rows() != config_.regions || fc.cols() != config_.regions) {
        throw ShapeError("model: fc " + shape_string(fc.shape()) + " does not match " +
                         std::to_string(config_.regions) + " regions");
    }
    ForwardResult result;
    Tensor x = tokens_;
    const std::size_t p = config_.schema.token_count();
    for (const auto& layer : layers_) {
        Tensor trace;
        x = apply_layer(layer, x, fc, opts, &trace);
        if (opts.trace_attention) result.cross_attention.push_back(trace);
        Tensor readout = add_row_broadcast(matmul(x, readout_weight_), readout_bias_);
        result.readouts.push_back(reshape(readout, {p}));
    }
    return result;
}

std::vector<Tensor> LcmModel::slice_tasks(const Tensor& readout, const PhenotypeSchema& schema) {
    std::vector<Tensor> out;
    out.reserve(schema.task_count());
    for (std::size_t t = 0; t < schema.task_count(); ++t) {
        out.push_back(slice_rows(readout, schema.offset(t), schema.offset(t + 1)));
    }
    return out;
}

void LcmModel::extend_tokens(const std::vector<TaskSpec>& new_tasks, std::uint64_t seed) {
    PhenotypeSchema extended = config_.schema.extended(new_tasks);
    const std::size_t old_rows = config_.schema.token_count();
    const std::size_t new_rows = extended.token_count() - old_rows;
    if (new_rows == 0 && new_tasks.empty()) {
        return;  // empty extension keeps the model bit-identical
    }
    const std::size_t d = config_.dim;
    Rng rng(seed, "extend/tokens");
    std::vector<double> values(extended.token_count() * d);
    std::copy(tokens_.data().begin(), tokens_.data().end(), values.begin());
    std::vector<double> fresh = rng.normal_vec(new_rows * d, 0.0, 0.02);
    std::copy(fresh.begin(), fresh.end(), values.begin() + static_cast<std::ptrdiff_t>(old_rows * d));
    tokens_ = Tensor::from_values({extended.token_count(), d}, std::move(values), true);
    config_.schema = extended;
}

std::vector<Tensor> LcmModel::export_cross_attention(const Tensor& fc, std::size_t layer,
                                                     bool head_averaged) const {
    if (layer == 0 || layer > layers_.size()) {
        throw ConfigError("export_cross_attention: layer " + std::to_string(layer) + " of " +
                          std::to_string(layers_.size()));
    }
    NoGradScope no_grad;
    ForwardOptions opts;
    Tensor x = tokens_;
    for (std::size_t l = 0; l + 1 < layer; ++l) {
        x = apply_layer(layers_[l], x, fc, opts, nullptr);
    }
    const Layer& target = layers_[layer - 1];
    std::vector<Tensor> head_weights;
    Tensor x1 = add(x, self_attention_core(layer_norm(x, target.ln1_gain, target.ln1_bias),
                                           target.self_attn, std::nullopt));
    Tensor normed = layer_norm(x1, target.ln2_gain, target.ln2_bias);
    cross_attention_core(normed, fc, target.cross_attn, &head_weights);
    if (!head_averaged) return head_weights;
    Tensor acc = head_weights[0];
    for (std::size_t h = 1; h < head_weights.size(); ++h) acc = add(acc, head_weights[h]);
    return {scale(acc, 1.0 / static_cast<double>(head_weights.size()))};
}

}  // namespace lcm
