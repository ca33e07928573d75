#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "gdoc/embedder.hpp"
#include "gdoc/model.hpp"
#include "gdoc/rng.hpp"
#include "gdoc/trainer.hpp"

namespace gdoc {

// ---- prototype classification (pure math, certified in 64-bit) ---------------

// Per-class centroid of support embeddings. Labels must cover 0..way-1.
template <typename T>
std::vector<std::vector<T>> compute_prototypes(const std::vector<std::vector<T>>& embeddings,
                                               const std::vector<int>& labels, int way) {
    if (embeddings.size() != labels.size())
        throw ShapeError("compute_prototypes: embeddings/labels size mismatch");
    std::vector<std::vector<T>> protos(static_cast<size_t>(way));
    std::vector<int> counts(static_cast<size_t>(way), 0);
    for (size_t i = 0; i < embeddings.size(); ++i) {
        int k = labels[i];
        if (k < 0 || k >= way) throw DataError("compute_prototypes: label out of range");
        if (protos[static_cast<size_t>(k)].empty())
            protos[static_cast<size_t>(k)].assign(embeddings[i].size(), T(0));
        for (size_t j = 0; j < embeddings[i].size(); ++j)
            protos[static_cast<size_t>(k)][j] += embeddings[i][j];
        counts[static_cast<size_t>(k)]++;
    }
    for (int k = 0; k < way; ++k) {
        if (counts[static_cast<size_t>(k)] == 0)
            throw DataError("compute_prototypes: class " + std::to_string(k) +
                            " has no support samples");
        for (auto& v : protos[static_cast<size_t>(k)]) v /= static_cast<T>(counts[static_cast<size_t>(k)]);
    }
    return protos;
}

// Distribution over classes: softmax of negative (squared) Euclidean distance.
template <typename T>
std::vector<T> classify_query(const std::vector<T>& query,
                              const std::vector<std::vector<T>>& prototypes,
                              bool squared = true) {
    std::vector<T> neg_d(prototypes.size());
    for (size_t k = 0; k < prototypes.size(); ++k) {
        T d = T(0);
        for (size_t j = 0; j < query.size(); ++j) {
            T diff = query[j] - prototypes[k][j];
            d += diff * diff;
        }
        if (!squared) d = std::sqrt(d);
        neg_d[k] = -d;
    }
    T mx = neg_d[0];
    for (T v : neg_d) mx = std::max(mx, v);
    T den = T(0);
    std::vector<T> probs(neg_d.size());
    for (size_t k = 0; k < neg_d.size(); ++k) {
        probs[k] = std::exp(neg_d[k] - mx);
        den += probs[k];
    }
    for (auto& p : probs) p /= den;
    return probs;
}

// argmax with ties resolved toward the lowest class index
template <typename T>
int predicted_class(const std::vector<T>& probs) {
    int best = 0;
    for (size_t k = 1; k < probs.size(); ++k)
        if (probs[k] > probs[static_cast<size_t>(best)]) best = static_cast<int>(k);
    return best;
}

// ---- retrieval ----------------------------------------------------------------

// Index entries ranked by descending inner product with the query; ties break
// on lexically smaller doc_id. The query's own document is excluded.
std::vector<int> retrieve(const std::vector<std::vector<float>>& index_embeddings,
                          const std::vector<std::string>& doc_ids,
                          const std::vector<float>& query, int top_k,
                          const std::string& exclude_doc_id);

// 1 if any of the top K ranked labels matches the query label, per K.
std::vector<int> recall_hits(const std::vector<int>& ranked_labels, int query_label,
                             const std::vector<int>& ks);

struct RetrievalIndex {
    Modality modality = Modality::Vision;
    std::vector<std::vector<float>> embeddings;  // unit rows
    std::vector<int> labels;
    std::vector<std::string> doc_ids;
    uint64_t model_digest = 0;
};

uint64_t model_digest(const Model<float>& model);

RetrievalIndex build_index(const Model<float>& model, const std::vector<DocumentPair>& docs,
                           Modality modality, int threads = 1,
                           EmbeddingSpace space = EmbeddingSpace::Inference);

// Embedding export: "GEMB" | u64 count | u32 dim | u8 modality | u64 model
// digest | f32 rows | i32 labels | (u32 len + bytes) doc ids.
void write_embedding_file(const std::string& path, const RetrievalIndex& index);
RetrievalIndex read_embedding_file(const std::string& path);

struct RetrievalTable {
    std::vector<int> ks = {1, 5, 10};
    // direction name -> R@K values aligned with ks
    std::vector<std::pair<std::string, std::vector<double>>> rows;

    const std::vector<double>& at(const std::string& direction) const;
    std::string to_text() const;
};

RetrievalTable eval_retrieval(const Model<float>& model, const std::vector<DocumentPair>& docs,
                              const std::vector<int>& ks = {1, 5, 10}, int threads = 1,
                              EmbeddingSpace space = EmbeddingSpace::Inference);

// ---- episodic few-shot ----------------------------------------------------------

struct EpisodeSpec {
    int way = 5;
    int shot = 1;
    int query_per_class = 15;
};

struct Episode {
    std::vector<int> support;        // indices into the doc list
    std::vector<int> query;
    std::vector<int> support_label;  // relabeled 0..way-1
    std::vector<int> query_label;
    std::vector<int> classes;        // original class of each episode label
};

// Draws way classes and shot+query_per_class distinct documents per class.
// Support and query are disjoint by construction.
Episode sample_episode(const std::map<int, std::vector<int>>& class_pools,
                       const EpisodeSpec& spec, Rng& rng);

struct FewshotReport {
    int way = 0, shot = 0, query_per_class = 0, episodes = 0;
    double accuracy = 0, ci95 = 0;
    std::string modality;
};

std::string format_fewshot(const FewshotReport& r);

// Episode evaluation over precomputed per-document embeddings.
FewshotReport fewshot_on_embeddings(const std::vector<std::vector<float>>& embeddings,
                                    const std::vector<int>& labels,
                                    const std::vector<int>& candidate_classes,
                                    const EpisodeSpec& spec, int episodes, uint64_t seed);

// End to end: embeds the documents once with frozen weights, then evaluates.
FewshotReport run_fewshot_eval(const Model<float>& model, const std::vector<DocumentPair>& docs,
                               const std::vector<int>& candidate_classes, const EpisodeSpec& spec,
                               int episodes, uint64_t seed, Modality modality, int threads = 1);

// ---- meta fine-tuning ------------------------------------------------------------

struct MetaConfig {
    EpisodeSpec spec;
    int episodes = 60;
    double lr = 2e-4;
    uint64_t seed = 7;
    Modality modality = Modality::Multimodal;
};

// Episode loss d(f(q), c_y) + log sum_k d(f(q), c_k), averaged over the query
// set, evaluated without touching the weights.
double meta_episode_loss(const Model<float>& model, const std::vector<DocumentPair>& docs,
                         const Episode& episode, Modality modality);

struct MetaResult {
    std::vector<double> episode_losses;
};

// Episodic fine-tuning on the base classes; updates the model in place.
MetaResult meta_finetune(Model<float>& model, const std::vector<DocumentPair>& docs,
                         const std::vector<int>& base_classes, const MetaConfig& cfg);

// ---- linear probe ----------------------------------------------------------------

struct ProbeConfig {
    int steps = 300;
    double lr = 0.05;
    int batch = 64;
    uint64_t seed = 5;
};

double linear_probe(const std::vector<std::vector<float>>& train_embeddings,
                    const std::vector<int>& train_labels,
                    const std::vector<std::vector<float>>& eval_embeddings,
                    const std::vector<int>& eval_labels, int num_classes, const ProbeConfig& cfg);

}  // namespace gdoc
