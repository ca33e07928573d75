#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gdoc/errors.hpp"

namespace gdoc {

// One synthetic page: an image grid, a token body (before [CLS]/[SEP]
// framing) and a category label.
struct DocumentPair {
    std::vector<float> image;  // row-major h,w,c in [0,1]
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<int> tokens;
    int label = -1;
    std::string doc_id;
};

struct DatagenParams {
    uint64_t seed = 1;
    int num_categories = 16;
    int per_class = 100;
    float separability = 1.0f;  // 0 = identical class distributions, 1 = disjoint
    int image_height = 32;
    int image_width = 32;
    int channels = 1;
    int vocab_size = 64;
    int token_len_min = 32;
    int token_len_max = 48;
    float noise = 0.08f;
    float train_frac = 0.70f;
    float val_frac = 0.15f;

    void validate() const;
};

struct SplitInfo {
    std::string name;
    uint32_t count = 0;
    uint64_t images_digest = 0;
    uint64_t tokens_digest = 0;
    uint64_t labels_digest = 0;
};

struct CorpusManifest {
    int format_version = 1;
    int generator_version = 1;
    DatagenParams params;
    std::vector<SplitInfo> splits;

    const SplitInfo& split(const std::string& name) const;
};

// Writes manifest + {split}.images.bin / .tokens.bin / .labels.bin into
// out_dir. Deterministic given params.seed.
CorpusManifest generate_corpus(const DatagenParams& params, const std::string& out_dir);

CorpusManifest read_manifest(const std::string& dir);

// Verifies the split's file digests against the manifest before decoding.
std::vector<DocumentPair> load_corpus(const std::string& dir, const std::string& split);

// Deterministic per-document generation, exposed for tests.
DocumentPair synthesize_document(const DatagenParams& params, int category, int ordinal);

}  // namespace gdoc
