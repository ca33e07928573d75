#include "gdoc/evaluation.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace gdoc {

// ---- retrieval ----------------------------------------------------------------

std::vector<int> retrieve(const std::vector<std::vector<float>>& index_embeddings,
                          const std::vector<std::string>& doc_ids,
                          const std::vector<float>& query, int top_k,
                          const std::string& exclude_doc_id) {
    if (index_embeddings.size() != doc_ids.size())
        throw ShapeError("retrieve: index embeddings/doc_ids size mismatch");
    if (!is_unit_norm(query))
        throw NumericError("retrieve: query embedding is not unit norm");
    std::vector<int> candidates;
    candidates.reserve(index_embeddings.size());
    for (size_t i = 0; i < index_embeddings.size(); ++i)
        if (doc_ids[i] != exclude_doc_id) candidates.push_back(static_cast<int>(i));
    if (top_k < 1 || top_k > static_cast<int>(candidates.size()))
        throw DataError("retrieve: top_k=" + std::to_string(top_k) + " with " +
                        std::to_string(candidates.size()) + " indexed documents");
    std::vector<float> scores(index_embeddings.size());
    for (int i : candidates)
        scores[static_cast<size_t>(i)] = dot(index_embeddings[static_cast<size_t>(i)], query);
    std::sort(candidates.begin(), candidates.end(), [&](int a, int b) {
        float sa = scores[static_cast<size_t>(a)], sb = scores[static_cast<size_t>(b)];
        if (sa != sb) return sa > sb;
        return doc_ids[static_cast<size_t>(a)] < doc_ids[static_cast<size_t>(b)];
    });
    candidates.resize(static_cast<size_t>(top_k));
    return candidates;
}

std::vector<int> recall_hits(const std::vector<int>& ranked_labels, int query_label,
                             const std::vector<int>& ks) {
    if (ranked_labels.empty()) throw DataError("recall: empty ranking");
    std::vector<int> hits;
    hits.reserve(ks.size());
    for (int k : ks) {
        int limit = std::min<int>(k, static_cast<int>(ranked_labels.size()));
        int hit = 0;
        for (int i = 0; i < limit; ++i)
            if (ranked_labels[static_cast<size_t>(i)] == query_label) {
                hit = 1;
                break;
            }
        hits.push_back(hit);
    }
    return hits;
}

uint64_t model_digest(const Model<float>& model) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < model.params().count(); ++i) {
        const auto& [name, t] = model.params().item(i);
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(t.data.data(), t.data.size() * sizeof(float), h);
    }
    return h;
}

RetrievalIndex build_index(const Model<float>& model, const std::vector<DocumentPair>& docs,
                           Modality modality, int threads, EmbeddingSpace space) {
    if (docs.empty()) throw DataError("build_index: empty document list");
    CorpusEmbeddings emb = embed_corpus(model, docs, model.config().with_cmae,
                                        /*want_uni=*/true, threads);
    RetrievalIndex index;
    index.modality = modality;
    index.embeddings = modality_view(emb, modality, space);
    index.labels = emb.labels;
    index.doc_ids = emb.doc_ids;
    index.model_digest = model_digest(model);
    return index;
}

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw DataError(std::string("embedding file: truncated ") + what);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void write_embedding_file(const std::string& path, const RetrievalIndex& index) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os.write("GEMB", 4);
    uint64_t count = index.embeddings.size();
    put_u32(os, static_cast<uint32_t>(count & 0xffffffffULL));
    put_u32(os, static_cast<uint32_t>(count >> 32));
    uint32_t dim = count ? static_cast<uint32_t>(index.embeddings[0].size()) : 0;
    put_u32(os, dim);
    char mod = static_cast<char>(index.modality);
    os.write(&mod, 1);
    put_u32(os, static_cast<uint32_t>(index.model_digest & 0xffffffffULL));
    put_u32(os, static_cast<uint32_t>(index.model_digest >> 32));
    for (const auto& row : index.embeddings)
        for (float v : row) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(os, bits);
        }
    for (int label : index.labels) put_u32(os, static_cast<uint32_t>(label));
    for (const auto& id : index.doc_ids) {
        put_u32(os, static_cast<uint32_t>(id.size()));
        os.write(id.data(), static_cast<std::streamsize>(id.size()));
    }
    if (!os) throw DataError("write failed for " + path);
}

RetrievalIndex read_embedding_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open embedding file " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "GEMB", 4) != 0)
        throw DataError(path + " is not an embedding export (bad magic)");
    RetrievalIndex index;
    uint64_t count = get_u32(is, "count");
    count |= static_cast<uint64_t>(get_u32(is, "count")) << 32;
    uint32_t dim = get_u32(is, "dim");
    char mod;
    if (!is.read(&mod, 1)) throw DataError("embedding file: truncated modality");
    index.modality = static_cast<Modality>(mod);
    index.model_digest = get_u32(is, "digest");
    index.model_digest |= static_cast<uint64_t>(get_u32(is, "digest")) << 32;
    index.embeddings.assign(count, std::vector<float>(dim));
    for (auto& row : index.embeddings)
        for (auto& v : row) {
            uint32_t bits = get_u32(is, "embedding row");
            std::memcpy(&v, &bits, 4);
        }
    index.labels.resize(count);
    for (auto& label : index.labels) label = static_cast<int>(get_u32(is, "label"));
    index.doc_ids.resize(count);
    for (auto& id : index.doc_ids) {
        uint32_t len = get_u32(is, "doc id");
        id.resize(len);
        if (!is.read(id.data(), len)) throw DataError("embedding file: truncated doc id");
    }
    return index;
}

const std::vector<double>& RetrievalTable::at(const std::string& direction) const {
    for (const auto& [name, values] : rows)
        if (name == direction) return values;
    throw DataError("retrieval table has no direction '" + direction + "'");
}

std::string RetrievalTable::to_text() const {
    std::ostringstream os;
    os << "direction";
    for (int k : ks) os << " R@" << k;
    os << "\n";
    for (const auto& [name, values] : rows) {
        os << name;
        char buf[32];
        for (double v : values) {
            std::snprintf(buf, sizeof(buf), " %.6f", v);
            os << buf;
        }
        os << "\n";
    }
    return os.str();
}

RetrievalTable eval_retrieval(const Model<float>& model, const std::vector<DocumentPair>& docs,
                              const std::vector<int>& ks, int threads, EmbeddingSpace space) {
    CorpusEmbeddings emb =
        embed_corpus(model, docs, model.config().with_cmae, /*want_uni=*/true, threads);
    auto vision = modality_view(emb, Modality::Vision, space);
    auto language = modality_view(emb, Modality::Language, space);
    auto multimodal = modality_view(emb, Modality::Multimodal, space);

    RetrievalTable table;
    table.ks = ks;
    // every query excludes its own document, so at most size-1 candidates
    int max_k = std::min<int>(*std::max_element(ks.begin(), ks.end()),
                              static_cast<int>(docs.size()) - 1);
    if (max_k < 1) throw DataError("eval_retrieval: need at least two documents");
    auto run_direction = [&](const std::string& name,
                             const std::vector<std::vector<float>>& queries,
                             const std::vector<std::vector<float>>& index_emb) {
        std::vector<double> totals(ks.size(), 0.0);
        for (size_t q = 0; q < queries.size(); ++q) {
            auto ranked = retrieve(index_emb, emb.doc_ids, queries[q], max_k, emb.doc_ids[q]);
            std::vector<int> ranked_labels;
            ranked_labels.reserve(ranked.size());
            for (int idx : ranked) ranked_labels.push_back(emb.labels[static_cast<size_t>(idx)]);
            auto hits = recall_hits(ranked_labels, emb.labels[q], ks);
            for (size_t i = 0; i < ks.size(); ++i) totals[i] += hits[i];
        }
        for (auto& v : totals) v /= static_cast<double>(queries.size());
        table.rows.emplace_back(name, std::move(totals));
    };
    run_direction("vision->vision", vision, vision);
    run_direction("language->language", language, language);
    run_direction("vision->language", vision, language);
    run_direction("language->vision", language, vision);
    run_direction("multimodal->multimodal", multimodal, multimodal);
    return table;
}

// ---- episodic few-shot ------------------------------------------------------------

Episode sample_episode(const std::map<int, std::vector<int>>& class_pools,
                       const EpisodeSpec& spec, Rng& rng) {
    if (static_cast<int>(class_pools.size()) < spec.way)
        throw DataError("episode: " + std::to_string(class_pools.size()) +
                        " classes available for " + std::to_string(spec.way) + "-way task");
    std::vector<int> classes;
    for (const auto& [cls, pool] : class_pools) classes.push_back(cls);
    rng.shuffle(classes);
    classes.resize(static_cast<size_t>(spec.way));

    Episode ep;
    ep.classes = classes;
    int need = spec.shot + spec.query_per_class;
    for (int k = 0; k < spec.way; ++k) {
        const auto& pool = class_pools.at(classes[static_cast<size_t>(k)]);
        if (static_cast<int>(pool.size()) < need)
            throw DataError("episode: class " + std::to_string(classes[static_cast<size_t>(k)]) +
                            " has " + std::to_string(pool.size()) + " docs, needs " +
                            std::to_string(need));
        std::vector<int> picks = pool;
        rng.shuffle(picks);
        for (int s = 0; s < spec.shot; ++s) {
            ep.support.push_back(picks[static_cast<size_t>(s)]);
            ep.support_label.push_back(k);
        }
        for (int q = 0; q < spec.query_per_class; ++q) {
            ep.query.push_back(picks[static_cast<size_t>(spec.shot + q)]);
            ep.query_label.push_back(k);
        }
    }
    return ep;
}

std::string format_fewshot(const FewshotReport& r) {
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "modality=%s way=%d shot=%d query=%d episodes=%d accuracy=%.6f ci95=%.6f",
                  r.modality.c_str(), r.way, r.shot, r.query_per_class, r.episodes, r.accuracy,
                  r.ci95);
    return buf;
}

FewshotReport fewshot_on_embeddings(const std::vector<std::vector<float>>& embeddings,
                                    const std::vector<int>& labels,
                                    const std::vector<int>& candidate_classes,
                                    const EpisodeSpec& spec, int episodes, uint64_t seed) {
    std::map<int, std::vector<int>> pools;
    std::set<int> allowed(candidate_classes.begin(), candidate_classes.end());
    for (size_t i = 0; i < labels.size(); ++i)
        if (allowed.count(labels[i])) pools[labels[i]].push_back(static_cast<int>(i));

    Rng rng(seed);
    std::vector<double> per_episode;
    per_episode.reserve(static_cast<size_t>(episodes));
    for (int e = 0; e < episodes; ++e) {
        Episode ep = sample_episode(pools, spec, rng);
        // support and query never share a document
        std::set<int> sup(ep.support.begin(), ep.support.end());
        for (int q : ep.query)
            if (sup.count(q)) throw DataError("episode leaked a document between support/query");
        std::vector<std::vector<float>> support_emb;
        for (int idx : ep.support) support_emb.push_back(embeddings[static_cast<size_t>(idx)]);
        auto protos = compute_prototypes(support_emb, ep.support_label, spec.way);
        int correct = 0;
        for (size_t q = 0; q < ep.query.size(); ++q) {
            auto probs = classify_query(embeddings[static_cast<size_t>(ep.query[q])], protos);
            if (predicted_class(probs) == ep.query_label[q]) correct++;
        }
        per_episode.push_back(static_cast<double>(correct) / static_cast<double>(ep.query.size()));
    }
    FewshotReport report;
    report.way = spec.way;
    report.shot = spec.shot;
    report.query_per_class = spec.query_per_class;
    report.episodes = episodes;
    double mean = std::accumulate(per_episode.begin(), per_episode.end(), 0.0) /
                  static_cast<double>(episodes);
    double var = 0;
    for (double a : per_episode) var += (a - mean) * (a - mean);
    var /= std::max(1, episodes - 1);
    report.accuracy = mean;
    report.ci95 = 1.96 * std::sqrt(var / std::max(1, episodes));
    return report;
}

FewshotReport run_fewshot_eval(const Model<float>& model, const std::vector<DocumentPair>& docs,
                               const std::vector<int>& candidate_classes, const EpisodeSpec& spec,
                               int episodes, uint64_t seed, Modality modality, int threads) {
    CorpusEmbeddings emb =
        embed_corpus(model, docs, model.config().with_cmae, /*want_uni=*/true, threads);
    auto view = modality_view(emb, modality);
    FewshotReport report =
        fewshot_on_embeddings(view, emb.labels, candidate_classes, spec, episodes, seed);
    report.modality = modality_name(modality);
    return report;
}

// ---- meta fine-tuning ----------------------------------------------------------

namespace {

// F(v,t) under the chosen modality, as a graph node. Matches the inference
// space of modality_view.
NodeId embedding_node(const Model<float>& model, Graph<float>& g,
                      const Model<float>::Bound& bound, const DocumentPair& doc,
                      Modality modality) {
    bool use_cmae = model.config().with_cmae;
    auto pe = model.embed_pair(g, bound, doc.image, doc.tokens, use_cmae);
    switch (modality) {
        case Modality::Vision:
            return use_cmae ? model.cmae_single(g, bound, pe.vision_seq, {}, true)
                            : g.l2_normalize_rows(pe.vision_pooled);
        case Modality::Language:
            return use_cmae
                       ? model.cmae_single(g, bound, pe.language_seq, pe.language_mask, false)
                       : g.l2_normalize_rows(pe.language_pooled);
        case Modality::Multimodal: {
            NodeId zv = use_cmae ? pe.fused_vision
                                 : g.l2_normalize_rows(pe.vision_pooled);
            NodeId zt = use_cmae ? pe.fused_language
                                 : g.l2_normalize_rows(pe.language_pooled);
            return g.l2_normalize_rows(g.scale(g.add(zv, zt), 0.5f));
        }
    }
    throw DataError("unknown modality");
}

// d(f(q), c_y) + log sum_k d(f(q), c_k) averaged over the query set
NodeId meta_loss_node(const Model<float>& model, Graph<float>& g,
                      const Model<float>::Bound& bound, const std::vector<DocumentPair>& docs,
                      const Episode& ep, Modality modality) {
    int way = static_cast<int>(ep.classes.size());
    std::vector<std::vector<NodeId>> class_support(static_cast<size_t>(way));
    for (size_t s = 0; s < ep.support.size(); ++s)
        class_support[static_cast<size_t>(ep.support_label[s])].push_back(
            embedding_node(model, g, bound, docs[static_cast<size_t>(ep.support[s])], modality));
    std::vector<NodeId> prototypes;
    for (int k = 0; k < way; ++k) {
        auto& rows = class_support[static_cast<size_t>(k)];
        prototypes.push_back(rows.size() == 1 ? rows[0] : g.mean_pool(g.concat_rows(rows)));
    }
    std::vector<NodeId> query_losses;
    for (size_t q = 0; q < ep.query.size(); ++q) {
        NodeId fq = embedding_node(model, g, bound, docs[static_cast<size_t>(ep.query[q])],
                                   modality);
        std::vector<NodeId> dists;
        for (int k = 0; k < way; ++k) {
            NodeId diff = g.sub(fq, prototypes[static_cast<size_t>(k)]);
            dists.push_back(g.sum_all(g.mul(diff, diff)));
        }
        NodeId d_sum = dists[0];
        for (int k = 1; k < way; ++k) d_sum = g.add(d_sum, dists[static_cast<size_t>(k)]);
        NodeId loss_q = g.add(dists[static_cast<size_t>(ep.query_label[q])],
                              g.log_clamped(d_sum, 1e-12f));
        query_losses.push_back(loss_q);
    }
    NodeId total = query_losses[0];
    for (size_t q = 1; q < query_losses.size(); ++q) total = g.add(total, query_losses[q]);
    return g.scale(total, 1.0f / static_cast<float>(query_losses.size()));
}

}  // namespace

double meta_episode_loss(const Model<float>& model, const std::vector<DocumentPair>& docs,
                         const Episode& ep, Modality modality) {
    Graph<float> g;
    auto bound = model.bind_frozen(g);
    return static_cast<double>(g.scalar(meta_loss_node(model, g, bound, docs, ep, modality)));
}

MetaResult meta_finetune(Model<float>& model, const std::vector<DocumentPair>& docs,
                         const std::vector<int>& base_classes, const MetaConfig& cfg) {
    std::map<int, std::vector<int>> pools;
    std::set<int> allowed(base_classes.begin(), base_classes.end());
    for (size_t i = 0; i < docs.size(); ++i)
        if (allowed.count(docs[i].label)) pools[docs[i].label].push_back(static_cast<int>(i));
    if (static_cast<int>(pools.size()) < cfg.spec.way)
        throw DataError("meta_finetune: base split has " + std::to_string(pools.size()) +
                        " classes for a " + std::to_string(cfg.spec.way) + "-way task");

    AdamW opt;
    opt.init(model.params());
    Rng rng(cfg.seed);
    MetaResult result;
    for (int e = 0; e < cfg.episodes; ++e) {
        Episode ep = sample_episode(pools, cfg.spec, rng);
        Graph<float> g;
        auto bound = model.bind(g);
        NodeId loss = meta_loss_node(model, g, bound, docs, ep, cfg.modality);
        result.episode_losses.push_back(static_cast<double>(g.scalar(loss)));
        g.backward(loss);
        model.collect_grads(g, bound);
        opt.step(model.params(), cfg.lr, 0.0, 5.0);
    }
    return result;
}

// ---- linear probe ----------------------------------------------------------------

double linear_probe(const std::vector<std::vector<float>>& train_embeddings,
                    const std::vector<int>& train_labels,
                    const std::vector<std::vector<float>>& eval_embeddings,
                    const std::vector<int>& eval_labels, int num_classes,
                    const ProbeConfig& cfg) {
    if (train_embeddings.empty() || eval_embeddings.empty())
        throw DataError("linear_probe: empty embedding set");
    std::set<int> distinct(train_labels.begin(), train_labels.end());
    if (distinct.size() < 2) throw DataError("linear_probe: degenerate single-class split");
    int dim = static_cast<int>(train_embeddings[0].size());

    Rng rng(cfg.seed);
    Params<float> params;
    params.add("probe.w", Tensor<float>::randn(dim, num_classes, rng,
                                               1.0f / std::sqrt(static_cast<float>(dim))));
    params.add("probe.b", Tensor<float>::zeros(1, num_classes));
    AdamW opt;
    opt.init(params);

    size_t n = train_embeddings.size();
    for (int step = 0; step < cfg.steps; ++step) {
        int bsz = std::min<int>(cfg.batch, static_cast<int>(n));
        Tensor<float> x(bsz, dim);
        Tensor<float> targets(bsz, num_classes);
        for (int i = 0; i < bsz; ++i) {
            size_t pick = static_cast<size_t>(rng.below(n));
            for (int j = 0; j < dim; ++j) x.at(i, j) = train_embeddings[pick][static_cast<size_t>(j)];
            targets.at(i, train_labels[pick]) = 1.0f;
        }
        Graph<float> g;
        NodeId w = g.leaf(params.at("probe.w"));
        NodeId b = g.leaf(params.at("probe.b"));
        NodeId probs = g.row_softmax(ad::linear(g, g.constant(x), w, b), 1.0f);
        NodeId loss = ad::cross_entropy(g, probs, g.constant(targets));
        g.backward(loss);
        params.at("probe.w").grad = g.grad(w);
        params.at("probe.b").grad = g.grad(b);
        opt.step(params, cfg.lr, 0.0, 0.0);
    }

    const auto& w = params.at("probe.w");
    const auto& b = params.at("probe.b");
    int correct = 0;
    for (size_t i = 0; i < eval_embeddings.size(); ++i) {
        int best = 0;
        double best_score = -1e300;
        for (int c = 0; c < num_classes; ++c) {
            double s = b.at(0, c);
            for (int j = 0; j < dim; ++j) s += eval_embeddings[i][static_cast<size_t>(j)] * w.at(j, c);
            if (s > best_score) {
                best_score = s;
                best = c;
            }
        }
        if (best == eval_labels[i]) correct++;
    }
    return static_cast<double>(correct) / static_cast<double>(eval_embeddings.size());
}

}  // namespace gdoc
