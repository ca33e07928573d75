#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gdoc/errors.hpp"

namespace gdoc {

enum class Modality : uint8_t { Vision = 0, Language = 1, Multimodal = 2 };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::Vision: return "vision";
        case Modality::Language: return "language";
        case Modality::Multimodal: return "multimodal";
    }
    return "?";
}

// One L2-normalized embedding in projection space. Labels ride along for
// diagnostics only; nothing in neighbor selection reads them.
template <typename T>
struct EmbeddingRecord {
    std::vector<T> values;
    Modality modality = Modality::Vision;
    int label = -1;
    uint64_t sequence = 0;  // global enqueue counter, for FIFO bookkeeping
};

template <typename T>
inline T dot(const std::vector<T>& a, const std::vector<T>& b) {
    T s = T(0);
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

template <typename T>
inline T squared_distance(const std::vector<T>& a, const std::vector<T>& b) {
    T s = T(0);
    for (size_t i = 0; i < a.size(); ++i) {
        T d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

template <typename T>
inline bool is_unit_norm(const std::vector<T>& v, double tol = 1e-4) {
    double s = 0;
    for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
    return std::abs(std::sqrt(s) - 1.0) <= tol;
}

// Fixed-capacity FIFO of past embeddings for one modality. Entries are plain
// detached values; no gradient ever reaches queued history.
template <typename T>
class SupportQueue {
  public:
    SupportQueue(size_t capacity, Modality modality)
        : capacity_(capacity), modality_(modality) {
        if (capacity == 0) throw DataError("support queue: capacity must be positive");
    }

    size_t capacity() const { return capacity_; }
    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    Modality modality() const { return modality_; }
    uint64_t total_enqueued() const { return next_sequence_; }

    const EmbeddingRecord<T>& entry(size_t i) const { return entries_[i]; }
    const std::vector<EmbeddingRecord<T>>& entries() const { return entries_; }

    void enqueue(std::vector<T> values, int label = -1) {
        if (!is_unit_norm(values))
            throw NumericError("support queue: rejected non-normalized embedding");
        EmbeddingRecord<T> rec;
        rec.values = std::move(values);
        rec.modality = modality_;
        rec.label = label;
        rec.sequence = next_sequence_++;
        entries_.push_back(std::move(rec));
        if (entries_.size() > capacity_) entries_.erase(entries_.begin());
    }

    void enqueue_batch(const std::vector<std::vector<T>>& batch,
                       const std::vector<int>& labels = {}) {
        for (size_t i = 0; i < batch.size(); ++i)
            enqueue(batch[i], labels.empty() ? -1 : labels[i]);
    }

    // Used by checkpoint restore; bypasses normalization drift from the f32
    // round-trip by accepting entries verbatim.
    void restore(std::vector<EmbeddingRecord<T>> entries, uint64_t next_sequence) {
        if (entries.size() > capacity_)
            throw DataError("support queue: restored size exceeds capacity");
        entries_ = std::move(entries);
        next_sequence_ = next_sequence;
    }

    // argmin over entries of ||query - entry||_2. For unit vectors this equals
    // argmax of the inner product; both are computed and must agree. The two
    // formulas round differently, so candidates whose scores sit within the
    // tie tolerance count as tied and resolve to the lowest (oldest) index;
    // disagreement beyond that is a real inconsistency.
    const EmbeddingRecord<T>& nearest_neighbor(const std::vector<T>& query) const {
        if (entries_.empty())
            throw DataError("support queue (" + std::string(modality_name(modality_)) +
                            "): nearest_neighbor on empty support set");
        auto dist_of = [&](size_t i) {
            double s = 0;
            for (size_t j = 0; j < query.size(); ++j) {
                double d = static_cast<double>(query[j]) -
                           static_cast<double>(entries_[i].values[j]);
                s += d * d;
            }
            return s;
        };
        auto dot_of = [&](size_t i) {
            double s = 0;
            for (size_t j = 0; j < query.size(); ++j)
                s += static_cast<double>(query[j]) * static_cast<double>(entries_[i].values[j]);
            return s;
        };
        size_t best_dist = 0, best_dot = 0;
        double dist = dist_of(0);
        double dp = dot_of(0);
        for (size_t i = 1; i < entries_.size(); ++i) {
            double d = dist_of(i);
            if (d < dist) {
                dist = d;
                best_dist = i;
            }
            double p = dot_of(i);
            if (p > dp) {
                dp = p;
                best_dot = i;
            }
        }
        if (best_dist != best_dot) {
            if (std::abs(dot_of(best_dist) - dp) <= 1e-6)
                return entries_[std::min(best_dist, best_dot)];
            throw NumericError("support queue: argmin-L2 and argmax-dot disagree (" +
                               std::to_string(best_dist) + " vs " + std::to_string(best_dot) +
                               ")");
        }
        return entries_[best_dist];
    }

  private:
    size_t capacity_;
    Modality modality_;
    std::vector<EmbeddingRecord<T>> entries_;
    uint64_t next_sequence_ = 0;
};

// K nearest entries of `index` to `query` by ascending L2 distance, ties by
// index. `exclude` drops one position (a query mining over a corpus that
// contains itself).
template <typename T>
std::vector<int> k_nearest_neighbors(const std::vector<std::vector<T>>& index,
                                     const std::vector<T>& query, int k, int exclude = -1) {
    int available = static_cast<int>(index.size()) - (exclude >= 0 ? 1 : 0);
    if (k < 1 || k > available)
        throw DataError("k_nearest_neighbors: K=" + std::to_string(k) + " with " +
                        std::to_string(available) + " candidates");
    std::vector<std::pair<T, int>> order;
    order.reserve(index.size());
    for (int i = 0; i < static_cast<int>(index.size()); ++i) {
        if (i == exclude) continue;
        order.emplace_back(squared_distance(query, index[i]), i);
    }
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;
    });
    std::vector<int> out;
    out.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) out.push_back(order[i].second);
    return out;
}

}  // namespace gdoc
