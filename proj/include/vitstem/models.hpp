#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vitstem/ops.hpp"
#include "vitstem/tensor.hpp"

namespace vitstem {

enum class StemKind { patchify, conv, patchify_bn_relu, custom };
enum class StemNorm { bn, ln, none };

std::string to_string(StemKind k);
std::string to_string(StemNorm n);
StemKind stem_kind_from_string(const std::string& s);
StemNorm stem_norm_from_string(const std::string& s);

// Stem = sequence of convolutions ahead of the transformer encoder. `norm`
// (plus ReLU) follows each non-final layer; `final_norm` follows the last
// projection and is none everywhere except the patchify+BN ablation.
struct StemSpec {
    StemKind kind = StemKind::patchify;
    std::vector<std::int64_t> kernel_sizes;
    std::vector<std::int64_t> strides;
    std::vector<std::int64_t> paddings;
    std::vector<std::int64_t> channels;  // last entry must equal encoder hidden size
    StemNorm norm = StemNorm::bn;
    StemNorm final_norm = StemNorm::none;

    std::size_t layers() const { return kernel_sizes.size(); }
    bool layer_has_norm(std::size_t i) const {
        return (i + 1 < layers()) ? norm != StemNorm::none : final_norm != StemNorm::none;
    }
    StemNorm layer_norm_kind(std::size_t i) const {
        return (i + 1 < layers()) ? norm : final_norm;
    }
    // Spatial extent after each layer, starting from image_size.
    std::vector<std::int64_t> spatial_trace(std::int64_t image_size) const;
    void validate(std::int64_t image_size, std::int64_t patch, std::int64_t hidden) const;
};

struct EncoderSpec {
    std::int64_t hidden = 384;
    double mlp_mult = 3.0;
    std::int64_t heads = 6;
    std::int64_t blocks = 12;
    std::int64_t image_size = 224;
    std::int64_t patch = 16;
    std::int64_t classes = 1000;

    std::int64_t grid() const { return image_size / patch; }
    std::int64_t tokens() const { return grid() * grid() + 1; }  // + class token
    std::int64_t head_dim() const { return hidden / heads; }
    std::int64_t mlp_hidden() const;
    void validate() const;
};

struct ModelConfig {
    std::string name;
    StemSpec stem;
    EncoderSpec encoder;
    double init_sigma = 0.02;
    double norm_eps = 1e-5;
    double bn_momentum = 0.1;

    // Conv-stem families carry the one-block offset relative to their
    // patchify counterpart.
    bool conv_family() const {
        return stem.kind != StemKind::patchify && stem.kind != StemKind::patchify_bn_relu;
    }
    void validate() const;
};

const std::vector<std::string>& canonical_names();
ModelConfig canonical_config(const std::string& name);

// Nearest positive multiple of m.
std::int64_t round_to_multiple(double v, std::int64_t m);

// Shrinks (or stretches) a config. Width scales hidden size and, by default,
// the head count proportionally (at least 1); pass `heads` to pin it. Depth
// scales the patchify-equivalent block count, preserving the one-block
// conv-stem offset. Conv stems are rebuilt for the new patch size
// (log2(patch) stride-two 3x3 layers plus the final 1x1).
ModelConfig scaled_config(const ModelConfig& base, std::int64_t image_size,
                          std::int64_t patch_size, double width_factor, double depth_factor,
                          std::optional<std::int64_t> heads = std::nullopt);

enum class ParamClass { weight, norm_gain, bias };

std::string to_string(ParamClass c);

struct Param {
    std::string name;
    ParamClass cls;
    Tensor tensor;
};

enum class RunMode { train, eval };

class Model {
public:
    Model(const ModelConfig& config, std::uint64_t seed);
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return config_; }
    std::uint64_t seed() const { return seed_; }

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    std::int64_t param_count() const;
    void zero_grads();

    // images (B,3,H,W) with H = W = config image size -> logits (B,K).
    Tensor forward(const Tensor& images, RunMode mode);

private:
    struct StemLayer {
        Tensor w, b;
        std::int64_t stride = 1;
        std::int64_t pad = 0;
        StemNorm norm = StemNorm::none;
        Tensor norm_gain, norm_bias;
        RunningStats<float> running;
    };
    struct Block {
        Tensor ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
        Tensor ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };

    Tensor block_forward(const Block& blk, Tensor x) const;

    ModelConfig config_;
    std::uint64_t seed_ = 0;
    std::vector<StemLayer> stem_;
    Tensor cls_token_, pos_embed_;
    std::vector<Block> blocks_;
    Tensor final_ln_g_, final_ln_b_, head_w_, head_b_;
    std::vector<Param> params_;
};

inline Model build(const ModelConfig& config, std::uint64_t seed) { return Model(config, seed); }

}  // namespace vitstem
