#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lcm/schema.hpp"
#include "lcm/tensor.hpp"

namespace lcm {

// Decoder-only connectome model: a learnable token table (one token per
// phenotype class, one per continuous task) refined by stacked layers of
// token self-attention, token-to-region cross-attention over the FC matrix,
// and a feed-forward block, all pre-norm residual. A single shared linear
// readout maps every layer's tokens to one logit per token.

struct ModelConfig {
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t dim = 32;        // token width; per-head width is dim/heads
    std::size_t regions = 16;
    std::size_t ffn_factor = 4;
    PhenotypeSchema schema;

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

struct SelfAttentionParams {
    std::vector<Tensor> query, key, value;  // per head, dim x head_dim
    Tensor merge;                           // dim x dim
};

struct CrossAttentionParams {
    std::vector<Tensor> key, value;  // per head, regions x head_dim (applied to FC)
    std::vector<Tensor> query;       // per head, dim x head_dim (applied to tokens)
    Tensor merge;
};

// Pre-residual attention cores. Each token's weights form a probability
// vector: over key tokens for self-attention, over regions for
// cross-attention.
Tensor self_attention_core(const Tensor& x, const SelfAttentionParams& p,
                           std::optional<std::size_t> key_limit = std::nullopt);
Tensor cross_attention_core(const Tensor& x, const Tensor& fc, const CrossAttentionParams& p,
                            std::vector<Tensor>* head_weights = nullptr);

struct ForwardOptions {
    // Restrict self-attention keys/values to the first n tokens. Queries
    // still cover all tokens, so rows below the limit reproduce the
    // unextended model's computation exactly.
    std::optional<std::size_t> self_attn_key_limit;
    bool trace_attention = false;
};

struct ForwardResult {
    std::vector<Tensor> readouts;          // per layer, 1-D length P
    std::vector<Tensor> cross_attention;   // per layer, P x regions, head-averaged
                                           // (only when trace_attention)
};

class LcmModel {
public:
    LcmModel(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    const PhenotypeSchema& schema() const { return config_.schema; }

    std::vector<NamedParam> parameters() const;
    std::vector<Tensor> parameter_tensors() const;
    std::size_t parameter_count() const;
    static std::size_t expected_parameter_count(const ModelConfig& config);

    ForwardResult forward(const Tensor& fc, const ForwardOptions& opts = {}) const;

    // Splits one P-vector readout into per-task predictions: class_count
    // logits for categorical tasks, a single scalar for continuous ones.
    static std::vector<Tensor> slice_tasks(const Tensor& readout, const PhenotypeSchema& schema);

    // Appends token rows for new tasks; every existing parameter keeps its
    // exact values.
    void extend_tokens(const std::vector<TaskSpec>& new_tasks, std::uint64_t seed);

    // Cross-attention weights at one layer (1-based), P x regions rows
    // summing to 1; per-head list when head_averaged is false.
    std::vector<Tensor> export_cross_attention(const Tensor& fc, std::size_t layer,
                                               bool head_averaged = true) const;

private:
    struct Layer {
        Tensor ln1_gain, ln1_bias;
        SelfAttentionParams self_attn;
        Tensor ln2_gain, ln2_bias;
        CrossAttentionParams cross_attn;
        Tensor ln3_gain, ln3_bias;
        Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };

    Tensor apply_layer(const Layer& layer, const Tensor& x, const Tensor& fc,
                       const ForwardOptions& opts, Tensor* trace_out) const;

    ModelConfig config_;
    Tensor tokens_;
    std::vector<Layer> layers_;
    Tensor readout_weight_, readout_bias_;
};

}  // namespace lcm
