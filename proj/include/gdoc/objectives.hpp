#pragma once

#include <string>
#include <vector>

#include "gdoc/graph.hpp"
#include "gdoc/queue.hpp"

namespace gdoc {

enum class Setting { S1, S2, S3 };

inline Setting setting_from_string(const std::string& s) {
    if (s == "S1" || s == "s1") return Setting::S1;
    if (s == "S2" || s == "s2") return Setting::S2;
    if (s == "S3" || s == "s3") return Setting::S3;
    throw UsageError("unknown setting '" + s + "' (expected S1, S2 or S3)");
}

inline const char* setting_name(Setting s) {
    switch (s) {
        case Setting::S1: return "S1";
        case Setting::S2: return "S2";
        case Setting::S3: return "S3";
    }
    return "?";
}

struct LossFlags {
    bool l2m = false;
    bool l2u = false;
    bool l2r = false;

    static LossFlags from(Setting s) {
        switch (s) {
            case Setting::S1: return {true, false, false};
            case Setting::S2: return {true, true, false};
            case Setting::S3: return {true, true, true};
        }
        return {};
    }
};

enum class L2uTargets { Hard, Soft };

// Mining objective options. The denominator follows the printed form (anchor
// similarities); nn_in_denominator switches to the neighbor-anchored variant.
template <typename T>
struct L2mOptions {
    T temperature = T(0.07);
    bool nn_in_denominator = false;
};

template <typename T>
struct L2mResult {
    ad::NodeId loss = -1;
    bool used_fallback = false;  // queue was empty, NN(x) = x substituted
};

namespace detail {

// Rows of nearest-neighbor embeddings for a batch, detached from the graph.
// Empty queue falls back to the anchor row itself.
template <typename T>
ad::Tensor<T> neighbor_rows(const ad::Tensor<T>& anchors, const SupportQueue<T>& queue,
                            bool* fallback) {
    ad::Tensor<T> out(anchors.rows, anchors.cols);
    for (int i = 0; i < anchors.rows; ++i) {
        std::vector<T> query(anchors.data.begin() + static_cast<size_t>(i) * anchors.cols,
                             anchors.data.begin() + static_cast<size_t>(i + 1) * anchors.cols);
        if (queue.empty()) {
            *fallback = true;
            for (int j = 0; j < anchors.cols; ++j) out.at(i, j) = query[static_cast<size_t>(j)];
        } else {
            const auto& nn = queue.nearest_neighbor(query);
            for (int j = 0; j < anchors.cols; ++j) out.at(i, j) = nn.values[static_cast<size_t>(j)];
        }
    }
    return out;
}

// (1/M) sum_i [ logsumexp_k(<anchor_i, targets_k>/tau) - <numerator_i, positives_i>/tau ]
template <typename T>
ad::NodeId nn_contrastive_term(ad::Graph<T>& g, ad::NodeId anchors, ad::NodeId positives,
                               ad::NodeId numerators, ad::NodeId targets, T tau) {
    int m = g.value(anchors).rows;
    ad::NodeId sims = g.scale(g.matmul(anchors, g.transpose(targets)), T(1) / tau);
    ad::NodeId lse = g.row_logsumexp(sims);
    ad::NodeId num = g.scale(g.row_sum(g.mul(numerators, positives)), T(1) / tau);
    return g.scale(g.sum_all(g.sub(lse, num)), T(1) / static_cast<T>(m));
}

template <typename T>
void check_batch(const ad::Graph<T>& g, ad::NodeId zv, ad::NodeId zt) {
    const auto& tv = g.value(zv);
    const auto& tt = g.value(zt);
    if (tv.rows != tt.rows || tv.cols != tt.cols)
        throw ShapeError("contrastive batch: vision " + tv.shape_str() + " vs language " +
                         tt.shape_str());
    if (tv.rows < 1) throw DataError("contrastive batch: empty");
}

}  // namespace detail

// Inter-modal mining loss. Term one scores the vision nearest neighbor
// against the paired text over a denominator of anchor-text similarities;
// term two is the mirror image.
template <typename T>
L2mResult<T> l2m_inter(ad::Graph<T>& g, ad::NodeId z_vision, ad::NodeId z_language,
                       const SupportQueue<T>& queue_v, const SupportQueue<T>& queue_t,
                       const L2mOptions<T>& opt = {}) {
    detail::check_batch(g, z_vision, z_language);
    L2mResult<T> res;
    ad::NodeId nn_v = g.constant(detail::neighbor_rows(g.value(z_vision), queue_v,
                                                       &res.used_fallback));
    ad::NodeId nn_t = g.constant(detail::neighbor_rows(g.value(z_language), queue_t,
                                                       &res.used_fallback));
    ad::NodeId anchor_v = opt.nn_in_denominator ? nn_v : z_vision;
    ad::NodeId anchor_t = opt.nn_in_denominator ? nn_t : z_language;
    ad::NodeId term1 =
        detail::nn_contrastive_term(g, anchor_v, z_language, nn_v, z_language, opt.temperature);
    ad::NodeId term2 =
        detail::nn_contrastive_term(g, anchor_t, z_vision, nn_t, z_vision, opt.temperature);
    res.loss = g.add(term1, term2);
    return res;
}

// Intra-modal mining loss: neighbor scored against the anchor's own modality.
template <typename T>
L2mResult<T> l2m_intra(ad::Graph<T>& g, ad::NodeId z_vision, ad::NodeId z_language,
                       const SupportQueue<T>& queue_v, const SupportQueue<T>& queue_t,
                       const L2mOptions<T>& opt = {}) {
    detail::check_batch(g, z_vision, z_language);
    L2mResult<T> res;
    ad::NodeId nn_v = g.constant(detail::neighbor_rows(g.value(z_vision), queue_v,
                                                       &res.used_fallback));
    ad::NodeId nn_t = g.constant(detail::neighbor_rows(g.value(z_language), queue_t,
                                                       &res.used_fallback));
    ad::NodeId anchor_v = opt.nn_in_denominator ? nn_v : z_vision;
    ad::NodeId anchor_t = opt.nn_in_denominator ? nn_t : z_language;
    ad::NodeId term1 =
        detail::nn_contrastive_term(g, anchor_v, z_vision, nn_v, z_vision, opt.temperature);
    ad::NodeId term2 =
        detail::nn_contrastive_term(g, anchor_t, z_language, nn_t, z_language, opt.temperature);
    res.loss = g.add(term1, term2);
    return res;
}

// Averaged within-modality similarities, the raw material for soft targets.
template <typename T>
ad::Tensor<T> l2u_average_similarities(const ad::Tensor<T>& fv, const ad::Tensor<T>& ft) {
    int m = fv.rows;
    ad::Tensor<T> avg(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) {
            T sv = T(0), st = T(0);
            for (int c = 0; c < fv.cols; ++c) {
                sv += fv.at(i, c) * fv.at(j, c);
                st += ft.at(i, c) * ft.at(j, c);
            }
            avg.at(i, j) = (sv + st) / T(2);
        }
    return avg;
}

// Pairwise matching loss over the batch similarity matrix, both directions.
// Hard targets treat the diagonal as the unified pair; soft targets are the
// row-softmaxed average of within-modality similarities, detached from the
// graph. `soft_targets_at` pins the similarities at an external point (the
// finite-difference certification path needs the targets held fixed).
template <typename T>
ad::NodeId l2u_loss(ad::Graph<T>& g, ad::NodeId fused_vision, ad::NodeId fused_language,
                    L2uTargets mode = L2uTargets::Hard,
                    const ad::Tensor<T>* soft_targets_at = nullptr) {
    detail::check_batch(g, fused_vision, fused_language);
    int m = g.value(fused_vision).rows;
    if (m < 2) throw DataError("l2u_loss: batch of " + std::to_string(m) +
                               " cannot form a contrast (need M >= 2)");
    ad::NodeId sims = g.matmul(fused_vision, g.transpose(fused_language));  // <v_i, t_j>
    ad::NodeId p_v2t = g.row_softmax(sims, T(1));
    ad::NodeId p_t2v = g.row_softmax(g.transpose(sims), T(1));
    if (mode == L2uTargets::Hard) {
        ad::NodeId log_v = g.log_clamped(g.take_diag(p_v2t), T(1e-12));
        ad::NodeId log_t = g.log_clamped(g.take_diag(p_t2v), T(1e-12));
        return g.scale(g.sum_all(g.add(log_v, log_t)), T(-1) / static_cast<T>(m));
    }
    ad::Tensor<T> avg = soft_targets_at
                            ? *soft_targets_at
                            : l2u_average_similarities(g.value(fused_vision),
                                                       g.value(fused_language));
    ad::NodeId targets = g.row_softmax(g.constant(std::move(avg)), T(1));
    return g.add(ad::cross_entropy(g, p_v2t, targets), ad::cross_entropy(g, p_t2v, targets));
}

template <typename T>
struct L2rResult {
    ad::NodeId loss = -1;
    ad::NodeId consistency = -1;  // neighbor agreement term
    ad::NodeId entropy = -1;      // cluster balance term
};

// Clustering loss for one modality. `neighbor_assignments[i]` holds the soft
// assignments of sample i's mined neighbors, one row per neighbor. The
// entropy term is the printed form +lambda * sum_c phi_c log phi_c, which
// drives the batch-mean assignment toward uniform when minimized;
// entropy_sign = -1 flips it.
template <typename T>
L2rResult<T> l2r_loss(ad::Graph<T>& g, ad::NodeId anchor_assignments,
                      const std::vector<ad::NodeId>& neighbor_assignments, T lambda,
                      int entropy_sign = 1) {
    const auto& anchors = g.value(anchor_assignments);
    int m = anchors.rows;
    int c = anchors.cols;
    if (static_cast<int>(neighbor_assignments.size()) != m)
        throw ShapeError("l2r_loss: " + std::to_string(neighbor_assignments.size()) +
                         " neighbor sets for " + std::to_string(m) + " anchors");
    auto check_rows = [&](const ad::Tensor<T>& t, const char* what) {
        if (t.cols != c) throw ShapeError(std::string("l2r_loss: ") + what + " has " +
                                          std::to_string(t.cols) + " clusters, expected " +
                                          std::to_string(c));
        for (int i = 0; i < t.rows; ++i) {
            double s = 0;
            for (int j = 0; j < c; ++j) {
                if (t.at(i, j) < T(-1e-6))
                    throw NumericError("l2r_loss: negative assignment probability");
                s += static_cast<double>(t.at(i, j));
            }
            if (std::abs(s - 1.0) > 1e-4)
                throw NumericError(std::string("l2r_loss: ") + what + " row " +
                                   std::to_string(i) + " sums to " + std::to_string(s));
        }
    };
    check_rows(anchors, "anchor");
    for (auto nid : neighbor_assignments) check_rows(g.value(nid), "neighbor");
    if (entropy_sign != 1 && entropy_sign != -1)
        throw UsageError("l2r_loss: entropy_sign must be +1 or -1");

    std::vector<ad::NodeId> per_sample;
    per_sample.reserve(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        ad::NodeId anchor_row = g.slice_rows(anchor_assignments, i, 1);
        ad::NodeId prods = g.matmul(anchor_row, g.transpose(neighbor_assignments[i]));
        per_sample.push_back(g.sum_all(g.log_clamped(prods, T(1e-12))));
    }
    L2rResult<T> res;
    res.consistency =
        g.scale(g.sum_all(g.concat_cols(per_sample)), T(-1) / static_cast<T>(m));
    ad::NodeId mean_assign = g.col_mean(anchor_assignments);
    ad::NodeId neg_entropy = g.sum_all(g.mul(mean_assign, g.log_clamped(mean_assign, T(1e-12))));
    res.entropy = g.scale(neg_entropy, static_cast<T>(entropy_sign) * lambda);
    res.loss = g.add(res.consistency, res.entropy);
    return res;
}

// Sum of the enabled pretext terms. Individual terms are -1 when disabled.
template <typename T>
ad::NodeId total_loss(ad::Graph<T>& g, const LossFlags& flags, ad::NodeId l2m_inter_term,
                      ad::NodeId l2m_intra_term, ad::NodeId l2u_term, ad::NodeId l2r_vision_term,
                      ad::NodeId l2r_language_term) {
    if (!flags.l2m && !flags.l2u && !flags.l2r)
        throw UsageError("total_loss: no objectives enabled");
    std::vector<ad::NodeId> terms;
    if (flags.l2m) {
        if (l2m_inter_term < 0 || l2m_intra_term < 0)
            throw DataError("total_loss: mining terms missing");
        terms.push_back(l2m_inter_term);
        terms.push_back(l2m_intra_term);
    }
    if (flags.l2u) {
        if (l2u_term < 0) throw DataError("total_loss: unify term missing");
        terms.push_back(l2u_term);
    }
    if (flags.l2r) {
        if (l2r_vision_term < 0 || l2r_language_term < 0)
            throw DataError("total_loss: reorganize terms missing (neighbor tables not mined?)");
        terms.push_back(l2r_vision_term);
        terms.push_back(l2r_language_term);
    }
    ad::NodeId total = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) total = g.add(total, terms[i]);
    return total;
}

}  // namespace gdoc
