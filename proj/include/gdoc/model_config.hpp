#pragma once

#include <string>

#include "gdoc/errors.hpp"

namespace gdoc {

// Desk-scale defaults throughout. Reference-scale values from the original
// training recipe are kept in comments next to each field.

struct VisionEncoderConfig {
    int image_height = 32;   // reference: 224
    int image_width = 32;    // reference: 224
    int channels = 1;        // reference: 3
    int patch_size = 8;      // reference: 16
    int hidden_dim = 64;     // reference: 768
    int num_layers = 2;
    int num_heads = 4;
    int ff_mult = 2;

    int num_patches() const { return (image_height / patch_size) * (image_width / patch_size); }
    int patch_dim() const { return patch_size * patch_size * channels; }

    void validate() const {
        if (image_height % patch_size != 0 || image_width % patch_size != 0)
            throw DataError("vision config: image dims must be divisible by patch size");
        if (hidden_dim % num_heads != 0)
            throw DataError("vision config: hidden_dim must be divisible by num_heads");
        if (num_layers < 0 || num_heads < 1 || hidden_dim < 1)
            throw DataError("vision config: bad layer/head/dim counts");
    }
};

struct LanguageEncoderConfig {
    int vocab_size = 64;
    int max_sequence_length = 32;  // reference: 256
    int hidden_dim = 64;           // reference: 768
    int num_layers = 2;
    int num_heads = 4;
    int ff_mult = 2;
    int pad_id = 0;
    int cls_id = 1;
    int sep_id = 2;

    void validate() const {
        if (hidden_dim % num_heads != 0)
            throw DataError("language config: hidden_dim must be divisible by num_heads");
        if (max_sequence_length < 3)
            throw DataError("language config: sequence length must fit [CLS] body [SEP]");
        if (pad_id >= vocab_size || cls_id >= vocab_size || sep_id >= vocab_size)
            throw DataError("language config: special token id outside vocabulary");
    }
};

struct ProjectionConfig {
    int hidden_dim = 64;  // MLP hidden width
    int output_dim = 32;  // projection space dimension
};

struct CmaeConfig {
    int hidden_dim = 64;  // d_f; must equal both encoder hidden dims
    int num_heads = 4;
    int num_layers = 2;
    int ff_mult = 2;
    bool shared_parameters = true;  // one weight set serves both branches

    int key_dim() const { return hidden_dim / num_heads; }

    void validate() const {
        if (hidden_dim % num_heads != 0)
            throw DataError("cmae config: hidden_dim must be divisible by num_heads");
    }
};

struct ModelConfig {
    VisionEncoderConfig vision;
    LanguageEncoderConfig language;
    ProjectionConfig projection;
    CmaeConfig cmae;
    bool with_cmae = true;           // false for the L2M-only setting
    bool with_cluster_heads = false; // true when the reorganize stage is on
    int num_clusters_vision = 16;    // set to the ground-truth category count
    int num_clusters_language = 16;
    uint64_t init_seed = 1;

    void validate() const {
        vision.validate();
        language.validate();
        if (with_cmae) {
            cmae.validate();
            if (cmae.hidden_dim != vision.hidden_dim || cmae.hidden_dim != language.hidden_dim)
                throw DataError("model config: fusion encoder dim must match both encoder dims");
        }
        if (with_cluster_heads && (num_clusters_vision < 2 || num_clusters_language < 2))
            throw DataError("model config: cluster heads need at least 2 clusters");
    }
};

}  // namespace gdoc
