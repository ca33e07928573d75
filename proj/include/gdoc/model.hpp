#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "gdoc/graph.hpp"
#include "gdoc/model_config.hpp"
#include "gdoc/rng.hpp"

namespace gdoc {

using ad::Graph;
using ad::NodeId;
using ad::Tensor;

// Ordered named parameter store. Iteration order is construction order and is
// part of the checkpoint / optimizer-state contract.
template <typename T>
class Params {
  public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) throw DataError("duplicate parameter " + name);
        index_[name] = items_.size();
        t.requires_grad = true;
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("unknown parameter " + name);
        return items_[it->second].second;
    }
    const Tensor<T>& at(const std::string& name) const {
        return const_cast<Params*>(this)->at(name);
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    size_t count() const { return items_.size(); }
    std::pair<std::string, Tensor<T>>& item(size_t i) { return items_[i]; }
    const std::pair<std::string, Tensor<T>>& item(size_t i) const { return items_[i]; }

    size_t total_scalars() const {
        size_t n = 0;
        for (const auto& [k, v] : items_) n += v.numel();
        return n;
    }

  private:
    std::vector<std::pair<std::string, Tensor<T>>> items_;
    std::unordered_map<std::string, size_t> index_;
};

// Fixed sinusoidal position table, [positions × dim].
template <typename T>
Tensor<T> sinusoidal_positions(int positions, int dim) {
    Tensor<T> pe(positions, dim);
    for (int p = 0; p < positions; ++p) {
        for (int j = 0; j < dim; ++j) {
            double rate = std::pow(10000.0, -2.0 * (j / 2) / static_cast<double>(dim));
            double angle = p * rate;
            pe.at(p, j) = static_cast<T>((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    }
    return pe;
}

// Flattens an H×W×C grid (row-major h,w,c) into [num_patches × P*P*C], patches
// in row-major grid order.
template <typename T>
Tensor<T> patchify(const std::vector<T>& image, const VisionEncoderConfig& cfg) {
    if (image.size() != static_cast<size_t>(cfg.image_height) * cfg.image_width * cfg.channels)
        throw ShapeError("patchify: image has " + std::to_string(image.size()) +
                         " values, config expects " +
                         std::to_string(cfg.image_height * cfg.image_width * cfg.channels));
    int grid_h = cfg.image_height / cfg.patch_size;
    int grid_w = cfg.image_width / cfg.patch_size;
    Tensor<T> out(grid_h * grid_w, cfg.patch_dim());
    for (int gy = 0; gy < grid_h; ++gy)
        for (int gx = 0; gx < grid_w; ++gx) {
            int row = gy * grid_w + gx;
            int k = 0;
            for (int py = 0; py < cfg.patch_size; ++py)
                for (int px = 0; px < cfg.patch_size; ++px)
                    for (int c = 0; c < cfg.channels; ++c) {
                        int y = gy * cfg.patch_size + py;
                        int x = gx * cfg.patch_size + px;
                        out.at(row, k++) =
                            image[(static_cast<size_t>(y) * cfg.image_width + x) * cfg.channels +
                                  c];
                    }
        }
    return out;
}

// [CLS] + body (truncated) + [SEP], padded to max_sequence_length.
struct FramedTokens {
    std::vector<int> ids;
    int valid_len = 0;  // positions < valid_len are real, the rest padding
};

inline FramedTokens frame_tokens(const std::vector<int>& body, const LanguageEncoderConfig& cfg) {
    int n = cfg.max_sequence_length;
    int body_len = std::min(static_cast<int>(body.size()), n - 2);
    FramedTokens f;
    f.ids.assign(static_cast<size_t>(n), cfg.pad_id);
    f.ids[0] = cfg.cls_id;
    for (int i = 0; i < body_len; ++i) {
        int id = body[i];
        if (id < 0 || id >= cfg.vocab_size)
            throw DataError("frame_tokens: token id " + std::to_string(id) +
                            " outside vocabulary of size " + std::to_string(cfg.vocab_size));
        f.ids[static_cast<size_t>(i) + 1] = id;
    }
    f.ids[static_cast<size_t>(body_len) + 1] = cfg.sep_id;
    f.valid_len = body_len + 2;
    return f;
}

template <typename T>
struct PairEmbedding {
    NodeId vision_seq = -1;
    NodeId language_seq = -1;
    NodeId vision_pooled = -1;    // mean over patch positions
    NodeId language_pooled = -1;  // [CLS] position
    NodeId z_vision = -1;         // projection head output, unit norm
    NodeId z_language = -1;
    NodeId fused_vision = -1;     // fusion encoder output, unit norm (-1 without CMAE)
    NodeId fused_language = -1;
    std::vector<T> language_mask;  // 1 for real positions, 0 for padding
};

template <typename T>
class Model {
  public:
    explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        init_params();
    }

    const ModelConfig& config() const { return cfg_; }
    Params<T>& params() { return params_; }
    const Params<T>& params() const { return params_; }

    // Registers every parameter as a graph leaf, in parameter-store order.
    struct Bound {
        Graph<T>* g = nullptr;
        const Model* model = nullptr;
        std::vector<NodeId> ids;
        NodeId operator()(const std::string& name) const {
            return ids[model->param_index(name)];
        }
    };

    Bound bind(Graph<T>& g) const {
        Bound b;
        b.g = &g;
        b.model = this;
        b.ids.reserve(params_.count());
        for (size_t i = 0; i < params_.count(); ++i) b.ids.push_back(g.leaf(params_.item(i).second));
        return b;
    }

    // Read-only binding: parameters enter the graph as constants, so forward
    // passes record no gradient work. Evaluation and mining use this.
    Bound bind_frozen(Graph<T>& g) const {
        Bound b;
        b.g = &g;
        b.model = this;
        b.ids.reserve(params_.count());
        for (size_t i = 0; i < params_.count(); ++i) {
            Tensor<T> t = params_.item(i).second;
            t.requires_grad = false;
            b.ids.push_back(g.leaf(t));
        }
        return b;
    }

    // Binding over externally created leaves (gradient certification path).
    Bound bind_with(Graph<T>& g, std::vector<NodeId> ids) const {
        if (ids.size() != params_.count())
            throw ShapeError("bind_with: expected " + std::to_string(params_.count()) +
                             " leaves, got " + std::to_string(ids.size()));
        Bound b;
        b.g = &g;
        b.model = this;
        b.ids = std::move(ids);
        return b;
    }

    size_t param_index(const std::string& name) const {
        auto it = param_index_.find(name);
        if (it == param_index_.end()) throw DataError("unknown parameter " + name);
        return it->second;
    }

    // After backward(), pulls leaf gradients back into params().grad.
    void collect_grads(const Graph<T>& g, const Bound& b) {
        for (size_t i = 0; i < params_.count(); ++i) {
            const auto& gr = g.grad(b.ids[i]);
            auto& t = params_.item(i).second;
            t.grad.assign(t.numel(), T(0));
            if (!gr.empty()) t.grad = gr;
        }
    }

    // ---- encoders -----------------------------------------------------------

    // Returns {sequence [N×d], pooled [1×d]}.
    std::pair<NodeId, NodeId> encode_vision(Graph<T>& g, const Bound& b,
                                            const Tensor<T>& patches) const {
        const auto& vc = cfg_.vision;
        if (patches.rows != vc.num_patches() || patches.cols != vc.patch_dim())
            throw ShapeError("encode_vision: got " + patches.shape_str() + ", config expects " +
                             std::to_string(vc.num_patches()) + "x" +
                             std::to_string(vc.patch_dim()));
        NodeId x = ad::linear(g, g.constant(patches), b("visn.patch.w"), b("visn.patch.b"));
        x = g.add(x, g.constant(sinusoidal_positions<T>(vc.num_patches(), vc.hidden_dim)));
        for (int l = 0; l < vc.num_layers; ++l)
            x = encoder_block(g, b, "visn.blocks." + std::to_string(l), x, vc.num_heads, {});
        return {x, g.mean_pool(x)};
    }

    // Returns {sequence [n×d], pooled [1×d] at the [CLS] position}.
    std::pair<NodeId, NodeId> encode_language(Graph<T>& g, const Bound& b,
                                              const FramedTokens& framed) const {
        const auto& lc = cfg_.language;
        if (static_cast<int>(framed.ids.size()) != lc.max_sequence_length)
            throw ShapeError("encode_language: sequence must be framed to length " +
                             std::to_string(lc.max_sequence_length));
        std::vector<T> mask(framed.ids.size(), T(0));
        for (int i = 0; i < framed.valid_len; ++i) mask[static_cast<size_t>(i)] = T(1);
        NodeId x = g.embedding_lookup(b("lang.embed"), framed.ids);
        x = g.add(x, g.constant(sinusoidal_positions<T>(lc.max_sequence_length, lc.hidden_dim)));
        for (int l = 0; l < lc.num_layers; ++l)
            x = encoder_block(g, b, "lang.blocks." + std::to_string(l), x, lc.num_heads, mask);
        return {x, g.slice_rows(x, 0, 1)};
    }

    // Multi-head attention with queries from one sequence and keys/values from
    // another; kv_mask zeros out padded key positions. Equal arguments give
    // plain self-attention.
    NodeId cross_attention(Graph<T>& g, const Bound& b, const std::string& prefix,
                           NodeId queries_from, NodeId keys_values_from, int num_heads,
                           const std::vector<T>& kv_mask) const {
        if (g.value(queries_from).cols != g.value(keys_values_from).cols)
            throw ShapeError("cross_attention: dim mismatch, " +
                             g.value(queries_from).shape_str() + " vs " +
                             g.value(keys_values_from).shape_str());
        const int q_rows = g.value(queries_from).rows;
        const int kv_rows = g.value(keys_values_from).rows;
        int d = g.value(queries_from).cols;
        int dk = d / num_heads;
        NodeId q = ad::linear(g, queries_from, b(prefix + ".wq"), b(prefix + ".bq"));
        NodeId k = ad::linear(g, keys_values_from, b(prefix + ".wk"), b(prefix + ".bk"));
        NodeId v = ad::linear(g, keys_values_from, b(prefix + ".wv"), b(prefix + ".bv"));
        NodeId mask_bias = -1;
        if (!kv_mask.empty()) {
            Tensor<T> bias(q_rows, kv_rows);
            for (int i = 0; i < q_rows; ++i)
                for (int j = 0; j < kv_rows; ++j)
                    bias.at(i, j) = kv_mask[static_cast<size_t>(j)] > T(0) ? T(0) : T(-1e9);
            mask_bias = g.constant(std::move(bias));
        }
        std::vector<NodeId> heads;
        heads.reserve(static_cast<size_t>(num_heads));
        for (int h = 0; h < num_heads; ++h) {
            NodeId qh = g.slice_cols(q, h * dk, dk);
            NodeId kh = g.slice_cols(k, h * dk, dk);
            NodeId vh = g.slice_cols(v, h * dk, dk);
            NodeId scores = g.scale(g.matmul(qh, g.transpose(kh)),
                                    T(1) / static_cast<T>(std::sqrt(static_cast<double>(dk))));
            if (mask_bias >= 0) scores = g.add(scores, mask_bias);
            NodeId attn = g.row_softmax(scores, T(1));
            heads.push_back(g.matmul(attn, vh));
        }
        NodeId cat = num_heads == 1 ? heads[0] : g.concat_cols(heads);
        return ad::linear(g, cat, b(prefix + ".wo"), b(prefix + ".bo"));
    }

    NodeId self_attention(Graph<T>& g, const Bound& b, const std::string& prefix, NodeId x,
                          int num_heads, const std::vector<T>& mask) const {
        return cross_attention(g, b, prefix, x, x, num_heads, mask);
    }

    // ---- fusion encoder -----------------------------------------------------

    // Per layer: cross-attention updates each branch from the other, then
    // per-branch self-attention and feed-forward, every sub-layer wrapped in
    // residual + layer norm. Outputs are mean-pooled and L2-normalized.
    std::pair<NodeId, NodeId> cmae_forward(Graph<T>& g, const Bound& b, NodeId vision_seq,
                                           NodeId language_seq,
                                           const std::vector<T>& language_mask) const {
        if (!cfg_.with_cmae) throw DataError("cmae_forward: model built without fusion encoder");
        const auto& cc = cfg_.cmae;
        NodeId v = vision_seq;
        NodeId t = language_seq;
        for (int l = 0; l < cc.num_layers; ++l) {
            std::string pv = cmae_prefix(l, /*vision=*/true);
            std::string pt = cmae_prefix(l, /*vision=*/false);
            NodeId ca_t = cross_attention(g, b, pt + ".cross", t, v, cc.num_heads, {});
            NodeId ca_v = cross_attention(g, b, pv + ".cross", v, t, cc.num_heads, language_mask);
            t = g.layer_norm(g.add(t, ca_t), b(pt + ".ln_cross.g"), b(pt + ".ln_cross.b"));
            v = g.layer_norm(g.add(v, ca_v), b(pv + ".ln_cross.g"), b(pv + ".ln_cross.b"));
            NodeId sa_t = self_attention(g, b, pt + ".self", t, cc.num_heads, language_mask);
            NodeId sa_v = self_attention(g, b, pv + ".self", v, cc.num_heads, {});
            t = g.layer_norm(g.add(t, sa_t), b(pt + ".ln_self.g"), b(pt + ".ln_self.b"));
            v = g.layer_norm(g.add(v, sa_v), b(pv + ".ln_self.g"), b(pv + ".ln_self.b"));
            t = g.layer_norm(g.add(t, feed_forward(g, b, pt + ".ff", t)), b(pt + ".ln_ff.g"),
                             b(pt + ".ln_ff.b"));
            v = g.layer_norm(g.add(v, feed_forward(g, b, pv + ".ff", v)), b(pv + ".ln_ff.g"),
                             b(pv + ".ln_ff.b"));
        }
        NodeId fused_v = g.l2_normalize_rows(g.mean_pool(v));
        NodeId fused_t = g.l2_normalize_rows(
            language_mask.empty() ? g.mean_pool(t) : g.mean_rows(t, language_mask));
        return {fused_v, fused_t};
    }

    // Single-modality pass through the fusion encoder: the branch attends to
    // itself wherever it would attend to the partner modality. This is the
    // uni-modal inference path of a model pretrained with the CMAE.
    NodeId cmae_single(Graph<T>& g, const Bound& b, NodeId seq, const std::vector<T>& mask,
                       bool vision_branch) const {
        if (!cfg_.with_cmae) throw DataError("cmae_single: model built without fusion encoder");
        const auto& cc = cfg_.cmae;
        NodeId x = seq;
        for (int l = 0; l < cc.num_layers; ++l) {
            std::string p = cmae_prefix(l, vision_branch);
            NodeId ca = cross_attention(g, b, p + ".cross", x, x, cc.num_heads, mask);
            x = g.layer_norm(g.add(x, ca), b(p + ".ln_cross.g"), b(p + ".ln_cross.b"));
            NodeId sa = self_attention(g, b, p + ".self", x, cc.num_heads, mask);
            x = g.layer_norm(g.add(x, sa), b(p + ".ln_self.g"), b(p + ".ln_self.b"));
            x = g.layer_norm(g.add(x, feed_forward(g, b, p + ".ff", x)), b(p + ".ln_ff.g"),
                             b(p + ".ln_ff.b"));
        }
        return g.l2_normalize_rows(mask.empty() ? g.mean_pool(x) : g.mean_rows(x, mask));
    }

    // ---- projection + pair embedding ----------------------------------------

    NodeId projection_head(Graph<T>& g, const Bound& b, const std::string& prefix,
                           NodeId pooled) const {
        NodeId h = g.gelu(ad::linear(g, pooled, b(prefix + ".w1"), b(prefix + ".b1")));
        return g.l2_normalize_rows(ad::linear(g, h, b(prefix + ".w2"), b(prefix + ".b2")));
    }

    PairEmbedding<T> embed_pair(Graph<T>& g, const Bound& b, const std::vector<T>& image_hwc,
                                const std::vector<int>& body_tokens, bool use_cmae) const {
        if (use_cmae && !cfg_.with_cmae)
            throw DataError("embed_pair: fusion embedding requested but model has no CMAE");
        PairEmbedding<T> out;
        auto [vseq, vpool] = encode_vision(g, b, patchify(image_hwc, cfg_.vision));
        FramedTokens framed = frame_tokens(body_tokens, cfg_.language);
        auto [tseq, tpool] = encode_language(g, b, framed);
        out.vision_seq = vseq;
        out.language_seq = tseq;
        out.vision_pooled = vpool;
        out.language_pooled = tpool;
        out.language_mask.assign(framed.ids.size(), T(0));
        for (int i = 0; i < framed.valid_len; ++i) out.language_mask[static_cast<size_t>(i)] = T(1);
        out.z_vision = projection_head(g, b, "proj.visn", vpool);
        out.z_language = projection_head(g, b, "proj.lang", tpool);
        if (use_cmae) {
            auto [fv, ft] = cmae_forward(g, b, vseq, tseq, out.language_mask);
            out.fused_vision = fv;
            out.fused_language = ft;
        }
        return out;
    }

    // Soft cluster assignment rows for a batch of embeddings [M×d].
    NodeId cluster_assign(Graph<T>& g, const Bound& b, NodeId embeddings, bool vision) const {
        if (!cfg_.with_cluster_heads)
            throw DataError("cluster_assign: model built without cluster heads");
        std::string p = vision ? "cluster.visn" : "cluster.lang";
        return g.row_softmax(ad::linear(g, embeddings, b(p + ".w"), b(p + ".b")), T(1));
    }

    template <typename U>
    Model<U> cast() const {
        Model<U> out(cfg_);
        for (size_t i = 0; i < params_.count(); ++i) {
            const auto& [name, t] = params_.item(i);
            out.params().at(name) = t.template cast<U>();
            out.params().at(name).requires_grad = true;
        }
        return out;
    }

  private:
    ModelConfig cfg_;
    Params<T> params_;
    std::unordered_map<std::string, size_t> param_index_;

    std::string cmae_prefix(int layer, bool vision) const {
        std::string base = "cmae.blocks." + std::to_string(layer);
        if (cfg_.cmae.shared_parameters) return base;
        return base + (vision ? ".v" : ".t");
    }

    NodeId feed_forward(Graph<T>& g, const Bound& b, const std::string& prefix, NodeId x) const {
        NodeId h = g.gelu(ad::linear(g, x, b(prefix + ".w1"), b(prefix + ".b1")));
        return ad::linear(g, h, b(prefix + ".w2"), b(prefix + ".b2"));
    }

    NodeId encoder_block(Graph<T>& g, const Bound& b, const std::string& prefix, NodeId x,
                         int num_heads, const std::vector<T>& mask) const {
        NodeId a = self_attention(g, b, prefix + ".attn", x, num_heads, mask);
        x = g.layer_norm(g.add(x, a), b(prefix + ".ln1.g"), b(prefix + ".ln1.b"));
        NodeId f = feed_forward(g, b, prefix + ".ff", x);
        return g.layer_norm(g.add(x, f), b(prefix + ".ln2.g"), b(prefix + ".ln2.b"));
    }

    void add_matrix(Rng& rng, const std::string& name, int rows, int cols) {
        T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rows)));
        params_.add(name, Tensor<T>::randn(rows, cols, rng, scale));
    }

    void add_bias(const std::string& name, int cols) {
        params_.add(name, Tensor<T>::zeros(1, cols));
    }

    void add_attention(Rng& rng, const std::string& prefix, int d) {
        for (const char* w : {".wq", ".wk", ".wv", ".wo"}) add_matrix(rng, prefix + w, d, d);
        for (const char* bn : {".bq", ".bk", ".bv", ".bo"}) add_bias(prefix + bn, d);
    }

    void add_layer_norm(const std::string& prefix, int d) {
        params_.add(prefix + ".g", Tensor<T>::full(1, d, T(1)));
        params_.add(prefix + ".b", Tensor<T>::zeros(1, d));
    }

    void add_feed_forward(Rng& rng, const std::string& prefix, int d, int mult) {
        add_matrix(rng, prefix + ".w1", d, d * mult);
        add_bias(prefix + ".b1", d * mult);
        add_matrix(rng, prefix + ".w2", d * mult, d);
        add_bias(prefix + ".b2", d);
    }

    void add_encoder_block(Rng& rng, const std::string& prefix, int d, int mult) {
        add_attention(rng, prefix + ".attn", d);
        add_layer_norm(prefix + ".ln1", d);
        add_feed_forward(rng, prefix + ".ff", d, mult);
        add_layer_norm(prefix + ".ln2", d);
    }

    void add_cmae_block(Rng& rng, const std::string& prefix, int d, int mult) {
        add_attention(rng, prefix + ".cross", d);
        add_layer_norm(prefix + ".ln_cross", d);
        add_attention(rng, prefix + ".self", d);
        add_layer_norm(prefix + ".ln_self", d);
        add_feed_forward(rng, prefix + ".ff", d, mult);
        add_layer_norm(prefix + ".ln_ff", d);
    }

    void init_params() {
        Rng rng(cfg_.init_seed);
        const auto& vc = cfg_.vision;
        add_matrix(rng, "visn.patch.w", vc.patch_dim(), vc.hidden_dim);
        add_bias("visn.patch.b", vc.hidden_dim);
        for (int l = 0; l < vc.num_layers; ++l)
            add_encoder_block(rng, "visn.blocks." + std::to_string(l), vc.hidden_dim, vc.ff_mult);

        const auto& lc = cfg_.language;
        add_matrix(rng, "lang.embed", lc.vocab_size, lc.hidden_dim);
        for (int l = 0; l < lc.num_layers; ++l)
            add_encoder_block(rng, "lang.blocks." + std::to_string(l), lc.hidden_dim, lc.ff_mult);

        add_matrix(rng, "proj.visn.w1", vc.hidden_dim, cfg_.projection.hidden_dim);
        add_bias("proj.visn.b1", cfg_.projection.hidden_dim);
        add_matrix(rng, "proj.visn.w2", cfg_.projection.hidden_dim, cfg_.projection.output_dim);
        add_bias("proj.visn.b2", cfg_.projection.output_dim);
        add_matrix(rng, "proj.lang.w1", lc.hidden_dim, cfg_.projection.hidden_dim);
        add_bias("proj.lang.b1", cfg_.projection.hidden_dim);
        add_matrix(rng, "proj.lang.w2", cfg_.projection.hidden_dim, cfg_.projection.output_dim);
        add_bias("proj.lang.b2", cfg_.projection.output_dim);

        if (cfg_.with_cmae) {
            const auto& cc = cfg_.cmae;
            for (int l = 0; l < cc.num_layers; ++l) {
                if (cc.shared_parameters) {
                    add_cmae_block(rng, "cmae.blocks." + std::to_string(l), cc.hidden_dim,
                                   cc.ff_mult);
                } else {
                    add_cmae_block(rng, "cmae.blocks." + std::to_string(l) + ".v", cc.hidden_dim,
                                   cc.ff_mult);
                    add_cmae_block(rng, "cmae.blocks." + std::to_string(l) + ".t", cc.hidden_dim,
                                   cc.ff_mult);
                }
            }
        }
        if (cfg_.with_cluster_heads) {
            int d = cfg_.with_cmae ? cfg_.cmae.hidden_dim : cfg_.projection.output_dim;
            add_matrix(rng, "cluster.visn.w", d, cfg_.num_clusters_vision);
            add_bias("cluster.visn.b", cfg_.num_clusters_vision);
            add_matrix(rng, "cluster.lang.w", d, cfg_.num_clusters_language);
            add_bias("cluster.lang.b", cfg_.num_clusters_language);
        }
        for (size_t i = 0; i < params_.count(); ++i) param_index_[params_.item(i).first] = i;
    }

    template <typename U>
    friend class Model;
};

}  // namespace gdoc
