#pragma once

#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include "gdoc/datagen.hpp"
#include "gdoc/model.hpp"
#include "gdoc/queue.hpp"

namespace gdoc {

// Worker cap from GDOC_THREADS (default 1). Results are bitwise identical for
// any worker count: each document's embedding is computed independently and
// written to its own slot.
inline int worker_count() {
    const char* env = std::getenv("GDOC_THREADS");
    if (!env) return 1;
    int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

template <typename Fn>
void parallel_for(size_t n, int threads, Fn&& fn) {
    if (threads <= 1 || n < 2) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    size_t chunk = (n + static_cast<size_t>(threads) - 1) / static_cast<size_t>(threads);
    for (int t = 0; t < threads; ++t) {
        size_t begin = static_cast<size_t>(t) * chunk;
        size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&fn, begin, end]() {
            for (size_t i = begin; i < end; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

struct CorpusEmbeddings {
    std::vector<std::vector<float>> z_vision;        // projection space
    std::vector<std::vector<float>> z_language;
    std::vector<std::vector<float>> fused_vision;    // fusion encoder outputs (may be empty)
    std::vector<std::vector<float>> fused_language;
    std::vector<std::vector<float>> uni_vision;      // single-modality inference outputs
    std::vector<std::vector<float>> uni_language;
    std::vector<int> labels;
    std::vector<std::string> doc_ids;

    size_t size() const { return labels.size(); }
};

inline std::vector<float> renormalized_mean(const std::vector<float>& a,
                                            const std::vector<float>& b) {
    std::vector<float> out(a.size());
    double nrm = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        out[i] = 0.5f * (a[i] + b[i]);
        nrm += static_cast<double>(out[i]) * out[i];
    }
    nrm = std::sqrt(nrm);
    if (nrm < 1e-12) throw NumericError("multimodal embedding degenerated to zero");
    for (auto& v : out) v = static_cast<float>(v / nrm);
    return out;
}

// Frozen-weights embedding of a document list. No gradients are recorded.
// want_fused adds the paired fusion outputs; want_uni adds the uni-modal
// inference embeddings (fusion encoder applied to one modality, or the
// normalized pooled backbone features when the model has no CMAE).
inline CorpusEmbeddings embed_corpus(const Model<float>& model,
                                     const std::vector<DocumentPair>& docs, bool want_fused,
                                     bool want_uni = false, int threads = 1) {
    CorpusEmbeddings out;
    size_t n = docs.size();
    bool has_cmae = model.config().with_cmae;
    want_fused = want_fused && has_cmae;
    out.z_vision.resize(n);
    out.z_language.resize(n);
    if (want_fused) {
        out.fused_vision.resize(n);
        out.fused_language.resize(n);
    }
    if (want_uni) {
        out.uni_vision.resize(n);
        out.uni_language.resize(n);
    }
    out.labels.resize(n);
    out.doc_ids.resize(n);
    parallel_for(n, threads, [&](size_t i) {
        Graph<float> g;
        auto b = model.bind_frozen(g);
        auto pe = model.embed_pair(g, b, docs[i].image, docs[i].tokens, want_fused);
        out.z_vision[i] = g.value(pe.z_vision).data;
        out.z_language[i] = g.value(pe.z_language).data;
        if (want_fused) {
            out.fused_vision[i] = g.value(pe.fused_vision).data;
            out.fused_language[i] = g.value(pe.fused_language).data;
        }
        if (want_uni) {
            if (has_cmae) {
                NodeId uv = model.cmae_single(g, b, pe.vision_seq, {}, true);
                NodeId ut = model.cmae_single(g, b, pe.language_seq, pe.language_mask, false);
                out.uni_vision[i] = g.value(uv).data;
                out.uni_language[i] = g.value(ut).data;
            } else {
                out.uni_vision[i] =
                    g.value(g.l2_normalize_rows(pe.vision_pooled)).data;
                out.uni_language[i] =
                    g.value(g.l2_normalize_rows(pe.language_pooled)).data;
            }
        }
        out.labels[i] = docs[i].label;
        out.doc_ids[i] = docs[i].doc_id;
    });
    return out;
}

enum class EmbeddingSpace { Inference, Projection };

// Modality view used by retrieval, the linear probe and the few-shot
// embedding function F. In the inference space, uni-modal views run the
// pretrained model on the single modality (backbones without a CMAE) and
// multimodal is the renormalized mean of the paired fusion outputs. The
// projection space exposes the contrastive-head embeddings instead.
inline std::vector<std::vector<float>> modality_view(
    const CorpusEmbeddings& e, Modality m, EmbeddingSpace space = EmbeddingSpace::Inference) {
    if (space == EmbeddingSpace::Projection) {
        switch (m) {
            case Modality::Vision:
                return e.z_vision;
            case Modality::Language:
                return e.z_language;
            case Modality::Multimodal: {
                std::vector<std::vector<float>> out(e.size());
                for (size_t i = 0; i < e.size(); ++i)
                    out[i] = renormalized_mean(e.z_vision[i], e.z_language[i]);
                return out;
            }
        }
        throw DataError("unknown modality");
    }
    bool has_fused = !e.fused_vision.empty();
    if (e.uni_vision.empty())
        throw DataError("modality_view: embeddings were extracted without the uni-modal pass");
    switch (m) {
        case Modality::Vision:
            return e.uni_vision;
        case Modality::Language:
            return e.uni_language;
        case Modality::Multimodal: {
            std::vector<std::vector<float>> out(e.size());
            const auto& v = has_fused ? e.fused_vision : e.uni_vision;
            const auto& t = has_fused ? e.fused_language : e.uni_language;
            for (size_t i = 0; i < e.size(); ++i) out[i] = renormalized_mean(v[i], t[i]);
            return out;
        }
    }
    throw DataError("unknown modality");
}

}  // namespace gdoc
