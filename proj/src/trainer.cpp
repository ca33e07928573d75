#include "gdoc/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "gdoc/embedder.hpp"

namespace gdoc {

EmbeddingSource source_from_string(const std::string& s) {
    if (s == "proj" || s == "projection") return EmbeddingSource::Projection;
    if (s == "cmae" || s == "fused") return EmbeddingSource::Fused;
    throw UsageError("unknown embedding source '" + s + "' (expected proj or cmae)");
}

TrainConfig TrainConfig::from(const RunConfig& rc) {
    TrainConfig c;
    c.setting = setting_from_string(rc.get_string("setting"));
    c.batch_size = rc.get_int("batch_size");
    c.total_steps = rc.get_int("total_steps");
    c.warmup_fraction = rc.get_double("warmup_fraction");
    c.peak_lr = rc.get_double("peak_lr");
    c.final_lr = rc.get_double("final_lr");
    c.weight_decay = rc.get_double("weight_decay");
    c.temperature = rc.get_double("temperature");
    c.queue_capacity = rc.get_int("queue_capacity");
    c.k_mine = rc.get_int("k_mine");
    c.lambda_entropy = rc.get_double("lambda");
    c.entropy_sign = rc.get_int("entropy_sign");
    c.stage2_start_step = rc.get_int("stage2_start_step");
    c.seed = rc.get_u64("seed");
    c.deterministic = rc.get_bool("deterministic");
    c.grad_clip = rc.get_double("grad_clip");
    c.checkpoint_interval = rc.get_int("checkpoint_interval");
    c.nn_in_denominator = rc.get_bool("nn_in_denominator");
    std::string targets = rc.get_string("l2u_targets");
    if (targets == "hard") c.l2u_targets = L2uTargets::Hard;
    else if (targets == "soft") c.l2u_targets = L2uTargets::Soft;
    else throw UsageError("l2u_targets must be hard or soft, got '" + targets + "'");
    c.freeze_backbones_stage2 = rc.get_bool("freeze_backbones_stage2");
    c.l2m_source = source_from_string(rc.get_string("l2m_source"));
    c.l2u_source = source_from_string(rc.get_string("l2u_source"));
    c.l2r_source = source_from_string(rc.get_string("l2r_source"));
    c.neighbor_refresh_interval = rc.get_int("neighbor_refresh_interval");
    c.validate();
    return c;
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw UsageError("batch_size must be positive");
    if (total_steps < 1) throw UsageError("total_steps must be positive");
    if (warmup_fraction <= 0.0 || warmup_fraction >= 1.0)
        throw UsageError("warmup_fraction must lie in (0,1)");
    if (temperature <= 0.0) throw UsageError("temperature must be positive");
    if (setting == Setting::S3 && stage2_start_step >= total_steps)
        throw UsageError("stage2_start_step must precede total_steps for setting S3");
    if (setting == Setting::S1 &&
        (l2m_source == EmbeddingSource::Fused))
        throw UsageError("setting S1 has no fusion encoder; l2m_source must be proj");
}

double lr_at(int step, const TrainConfig& cfg) {
    if (step < 0 || step >= cfg.total_steps)
        throw UsageError("lr_at: step " + std::to_string(step) + " outside schedule");
    int warmup_steps =
        std::max(1, static_cast<int>(std::lround(cfg.warmup_fraction * cfg.total_steps)));
    if (step < warmup_steps)
        return cfg.peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (cfg.total_steps == warmup_steps) return cfg.peak_lr;
    double progress = static_cast<double>(step - warmup_steps) /
                      static_cast<double>(cfg.total_steps - warmup_steps);
    return cfg.peak_lr + (cfg.final_lr - cfg.peak_lr) * progress;
}

// ---- AdamW --------------------------------------------------------------------

void AdamW::init(const Params<float>& params) {
    t_ = 0;
    consecutive_nonfinite_ = 0;
    m_.clear();
    v_.clear();
    names_.clear();
    for (size_t i = 0; i < params.count(); ++i) {
        const auto& [name, tensor] = params.item(i);
        m_.emplace_back(tensor.numel(), 0.0f);
        v_.emplace_back(tensor.numel(), 0.0f);
        names_.push_back(name);
    }
}

bool AdamW::step(Params<float>& params, double lr, double weight_decay, double grad_clip) {
    if (m_.size() != params.count()) throw DataError("optimizer not initialized for this model");

    double norm_sq = 0.0;
    bool finite = true;
    for (size_t i = 0; i < params.count(); ++i) {
        const auto& g = params.item(i).second.grad;
        for (float gv : g) {
            if (!std::isfinite(gv)) finite = false;
            norm_sq += static_cast<double>(gv) * gv;
        }
    }
    if (!finite || !std::isfinite(norm_sq)) {
        if (++consecutive_nonfinite_ >= 3)
            throw NumericError("optimizer: non-finite gradients on 3 consecutive steps");
        return false;
    }
    consecutive_nonfinite_ = 0;

    double scale = 1.0;
    double norm = std::sqrt(norm_sq);
    if (grad_clip > 0.0 && norm > grad_clip) scale = grad_clip / norm;

    ++t_;
    double bias1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    double bias2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.count(); ++i) {
        auto& tensor = params.item(i).second;
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t k = 0; k < tensor.data.size(); ++k) {
            double g = static_cast<double>(tensor.grad.empty() ? 0.0f : tensor.grad[k]) * scale;
            m[k] = static_cast<float>(beta1 * m[k] + (1.0 - beta1) * g);
            v[k] = static_cast<float>(beta2 * v[k] + (1.0 - beta2) * g * g);
            double mhat = m[k] / bias1;
            double vhat = v[k] / bias2;
            double update = mhat / (std::sqrt(vhat) + eps) + weight_decay * tensor.data[k];
            tensor.data[k] = static_cast<float>(tensor.data[k] - lr * update);
        }
    }
    return true;
}

void AdamW::save(CheckpointFile& file) const {
    ParamBlock meta{"opt.meta", {2},
                    {static_cast<float>(t_), static_cast<float>(consecutive_nonfinite_)}};
    file.blocks.push_back(std::move(meta));
    for (size_t i = 0; i < names_.size(); ++i) {
        ParamBlock mb{"opt.m." + names_[i], {static_cast<uint32_t>(m_[i].size())}, m_[i]};
        ParamBlock vb{"opt.v." + names_[i], {static_cast<uint32_t>(v_[i].size())}, v_[i]};
        file.blocks.push_back(std::move(mb));
        file.blocks.push_back(std::move(vb));
    }
}

void AdamW::load(const CheckpointFile& file, const Params<float>& params) {
    init(params);
    const ParamBlock& meta = file.require("opt.meta");
    t_ = static_cast<int64_t>(meta.data[0]);
    consecutive_nonfinite_ = static_cast<int>(meta.data[1]);
    for (size_t i = 0; i < names_.size(); ++i) {
        const ParamBlock& mb = file.require("opt.m." + names_[i]);
        const ParamBlock& vb = file.require("opt.v." + names_[i]);
        if (mb.data.size() != m_[i].size() || vb.data.size() != v_[i].size())
            throw DataError("optimizer blocks for " + names_[i] + " have mismatched sizes");
        m_[i] = mb.data;
        v_[i] = vb.data;
    }
}

// ---- metrics --------------------------------------------------------------------

std::string format_metrics(const StepMetrics& m) {
    char buf[320];
    std::snprintf(buf, sizeof(buf),
                  "step=%d loss_total=%.9g loss_l2m_inter=%.9g loss_l2m_intra=%.9g "
                  "loss_l2u=%.9g loss_l2r_v=%.9g loss_l2r_t=%.9g lr=%.9g",
                  m.step, m.loss_total, m.l2m_inter, m.l2m_intra, m.l2u, m.l2r_v, m.l2r_t, m.lr);
    return buf;
}

// ---- trainer --------------------------------------------------------------------

namespace {

void pack_u64(std::vector<float>& out, uint64_t v) {
    uint32_t lo = static_cast<uint32_t>(v & 0xffffffffULL);
    uint32_t hi = static_cast<uint32_t>(v >> 32);
    float flo, fhi;
    std::memcpy(&flo, &lo, 4);
    std::memcpy(&fhi, &hi, 4);
    out.push_back(flo);
    out.push_back(fhi);
}

uint64_t unpack_u64(const float* p) {
    uint32_t lo, hi;
    std::memcpy(&lo, p, 4);
    std::memcpy(&hi, p + 1, 4);
    return static_cast<uint64_t>(lo) | (static_cast<uint64_t>(hi) << 32);
}

void save_queue(CheckpointFile& file, const SupportQueue<float>& q, const std::string& name) {
    size_t n = q.size();
    size_t dim = n ? q.entry(0).values.size() : 0;
    ParamBlock values{name + ".values",
                      {static_cast<uint32_t>(n), static_cast<uint32_t>(dim)},
                      {}};
    ParamBlock labels{name + ".labels", {static_cast<uint32_t>(n)}, {}};
    ParamBlock meta{name + ".meta", {2}, {}};
    for (size_t i = 0; i < n; ++i) {
        const auto& e = q.entry(i);
        values.data.insert(values.data.end(), e.values.begin(), e.values.end());
        labels.data.push_back(static_cast<float>(e.label));
    }
    pack_u64(meta.data, q.total_enqueued());
    file.blocks.push_back(std::move(values));
    file.blocks.push_back(std::move(labels));
    file.blocks.push_back(std::move(meta));
}

void load_queue(const CheckpointFile& file, SupportQueue<float>& q, const std::string& name) {
    const ParamBlock& values = file.require(name + ".values");
    const ParamBlock& labels = file.require(name + ".labels");
    const ParamBlock& meta = file.require(name + ".meta");
    size_t n = values.dims[0];
    size_t dim = values.dims.size() > 1 ? values.dims[1] : 0;
    std::vector<EmbeddingRecord<float>> entries;
    uint64_t next_seq = unpack_u64(meta.data.data());
    for (size_t i = 0; i < n; ++i) {
        EmbeddingRecord<float> rec;
        rec.values.assign(values.data.begin() + static_cast<std::ptrdiff_t>(i * dim),
                          values.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
        rec.label = static_cast<int>(labels.data[i]);
        rec.modality = q.modality();
        rec.sequence = next_seq - n + i;
        entries.push_back(std::move(rec));
    }
    q.restore(std::move(entries), next_seq);
}

void save_neighbor_table(CheckpointFile& file, const std::vector<std::vector<int>>& table,
                         const std::string& name) {
    if (table.empty()) return;
    ParamBlock b{name,
                 {static_cast<uint32_t>(table.size()), static_cast<uint32_t>(table[0].size())},
                 {}};
    for (const auto& row : table)
        for (int idx : row) b.data.push_back(static_cast<float>(idx));
    file.blocks.push_back(std::move(b));
}

std::vector<std::vector<int>> load_neighbor_table(const CheckpointFile& file,
                                                  const std::string& name) {
    const ParamBlock* b = file.find(name);
    if (!b) return {};
    std::vector<std::vector<int>> table(b->dims[0], std::vector<int>(b->dims[1]));
    size_t k = 0;
    for (auto& row : table)
        for (auto& idx : row) idx = static_cast<int>(b->data[k++]);
    return table;
}

}  // namespace

Trainer::Trainer(const RunConfig& rc, const std::string& corpus_dir, const std::string& out_dir)
    : run_cfg_(rc), out_dir_(out_dir) {
    CorpusManifest manifest = read_manifest(corpus_dir);
    run_cfg_.sync_with_manifest(manifest);
    cfg_ = TrainConfig::from(run_cfg_);
    docs_ = load_corpus(corpus_dir, "train");
    if (static_cast<int>(docs_.size()) < cfg_.batch_size)
        throw DataError("corpus train split (" + std::to_string(docs_.size()) +
                        " docs) smaller than one batch of " + std::to_string(cfg_.batch_size));
    if (cfg_.setting == Setting::S3 && cfg_.k_mine >= static_cast<int>(docs_.size()))
        throw DataError("k_mine=" + std::to_string(cfg_.k_mine) +
                        " must be smaller than the corpus (" + std::to_string(docs_.size()) + ")");
    model_ = std::make_unique<Model<float>>(run_cfg_.model_config());
    queue_v_ = std::make_unique<SupportQueue<float>>(static_cast<size_t>(cfg_.queue_capacity),
                                                     Modality::Vision);
    queue_t_ = std::make_unique<SupportQueue<float>>(static_cast<size_t>(cfg_.queue_capacity),
                                                     Modality::Language);
    opt_.init(model_->params());
    std::filesystem::create_directories(out_dir_);
}

void Trainer::resume_from(const std::string& checkpoint_path) {
    CheckpointFile file = read_checkpoint(checkpoint_path);
    if (file.config_digest != run_cfg_.digest())
        throw DataError("checkpoint was written under a different resolved config (digest " +
                        std::to_string(file.config_digest) + " vs " +
                        std::to_string(run_cfg_.digest()) + ")");
    load_param_blocks(file, model_->params());
    opt_.load(file, model_->params());
    load_queue(file, *queue_v_, "queue.vision");
    load_queue(file, *queue_t_, "queue.language");
    const ParamBlock& meta = file.require("trainer.meta");
    start_step_ = static_cast<int>(meta.data[0]);
    neighbors_mined_ = meta.data[1] > 0.5f;
    if (neighbors_mined_) {
        neighbors_v_ = load_neighbor_table(file, "miner.vision");
        neighbors_t_ = load_neighbor_table(file, "miner.language");
    }
    log("# resumed from " + checkpoint_path + " at step " + std::to_string(start_step_));
}

void Trainer::write_checkpoint_file(const std::string& path, int next_step) const {
    CheckpointFile file;
    file.config_digest = run_cfg_.digest();
    append_param_blocks(file, model_->params());
    opt_.save(file);
    save_queue(file, *queue_v_, "queue.vision");
    save_queue(file, *queue_t_, "queue.language");
    ParamBlock meta{"trainer.meta", {2}, {static_cast<float>(next_step),
                                          neighbors_mined_ ? 1.0f : 0.0f}};
    file.blocks.push_back(std::move(meta));
    if (neighbors_mined_) {
        save_neighbor_table(file, neighbors_v_, "miner.vision");
        save_neighbor_table(file, neighbors_t_, "miner.language");
    }
    write_checkpoint(path, file);
}

std::vector<int> Trainer::epoch_permutation(int epoch) const {
    std::vector<int> perm(docs_.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    Rng rng(cfg_.seed);
    Rng epoch_rng = rng.fork(static_cast<uint64_t>(epoch) + 1);
    epoch_rng.shuffle(perm);
    return perm;
}

std::vector<int> Trainer::batch_indices(int step) const {
    // pure function of the step: resume-safe
    std::vector<int> out;
    out.reserve(static_cast<size_t>(cfg_.batch_size));
    int64_t cursor = static_cast<int64_t>(step) * cfg_.batch_size;
    int n = static_cast<int>(docs_.size());
    int cached_epoch = -1;
    std::vector<int> perm;
    for (int i = 0; i < cfg_.batch_size; ++i) {
        int64_t pos = cursor + i;
        int epoch = static_cast<int>(pos / n);
        if (epoch != cached_epoch) {
            perm = epoch_permutation(epoch);
            cached_epoch = epoch;
        }
        out.push_back(perm[static_cast<size_t>(pos % n)]);
    }
    return out;
}

void Trainer::mine_neighbors(int step) {
    if (step == 0)
        log("# warning: stage-2 neighbors mined from untrained features (stage2_start_step=0)");
    bool use_fused = cfg_.l2r_source == EmbeddingSource::Fused && model_->config().with_cmae;
    CorpusEmbeddings emb = embed_corpus(*model_, docs_, model_->config().with_cmae,
                                        /*want_uni=*/false,
                                        cfg_.deterministic ? 1 : worker_count());
    const auto& ev = use_fused ? emb.fused_vision : emb.z_vision;
    const auto& et = use_fused ? emb.fused_language : emb.z_language;
    neighbors_v_.assign(docs_.size(), {});
    neighbors_t_.assign(docs_.size(), {});
    for (size_t i = 0; i < docs_.size(); ++i) {
        neighbors_v_[i] = k_nearest_neighbors(ev, ev[i], cfg_.k_mine, static_cast<int>(i));
        neighbors_t_[i] = k_nearest_neighbors(et, et[i], cfg_.k_mine, static_cast<int>(i));
    }
    neighbors_mined_ = true;
    log("# stage 2: mined " + std::to_string(cfg_.k_mine) + " neighbors per document at step " +
        std::to_string(step));
}

void Trainer::log(const std::string& line) { pending_log_.push_back(line); }

StepMetrics Trainer::train_step(int step) {
    LossFlags flags = LossFlags::from(cfg_.setting);
    bool stage2 = flags.l2r && step >= cfg_.stage2_start_step;
    bool want_fused = model_->config().with_cmae;

    std::vector<int> batch = batch_indices(step);

    Graph<float> g;
    auto bound = model_->bind(g);

    std::vector<NodeId> zs_v, zs_t, fused_v, fused_t;
    for (int idx : batch) {
        auto pe = model_->embed_pair(g, bound, docs_[static_cast<size_t>(idx)].image,
                                     docs_[static_cast<size_t>(idx)].tokens, want_fused);
        zs_v.push_back(pe.z_vision);
        zs_t.push_back(pe.z_language);
        if (want_fused) {
            fused_v.push_back(pe.fused_vision);
            fused_t.push_back(pe.fused_language);
        }
    }
    NodeId proj_v = g.concat_rows(zs_v);
    NodeId proj_t = g.concat_rows(zs_t);
    NodeId fus_v = want_fused ? g.concat_rows(fused_v) : -1;
    NodeId fus_t = want_fused ? g.concat_rows(fused_t) : -1;

    auto rows_for = [&](EmbeddingSource src, bool vision) {
        if (src == EmbeddingSource::Fused && want_fused) return vision ? fus_v : fus_t;
        return vision ? proj_v : proj_t;
    };

    StepMetrics m;
    m.step = step;
    m.lr = lr_at(step, cfg_);

    L2mOptions<float> l2m_opt;
    l2m_opt.temperature = static_cast<float>(cfg_.temperature);
    l2m_opt.nn_in_denominator = cfg_.nn_in_denominator;
    NodeId zv_l2m = rows_for(cfg_.l2m_source, true);
    NodeId zt_l2m = rows_for(cfg_.l2m_source, false);
    auto inter = l2m_inter(g, zv_l2m, zt_l2m, *queue_v_, *queue_t_, l2m_opt);
    auto intra = l2m_intra(g, zv_l2m, zt_l2m, *queue_v_, *queue_t_, l2m_opt);
    if (inter.used_fallback && step == 0)
        log("# warning: empty support queue, NN(x)=x fallback in use during warm start");

    NodeId unify = -1;
    if (flags.l2u)
        unify = l2u_loss(g, rows_for(cfg_.l2u_source, true), rows_for(cfg_.l2u_source, false),
                         cfg_.l2u_targets);

    NodeId l2r_v_node = -1, l2r_t_node = -1;
    if (stage2) {
        if (!neighbors_mined_)
            throw DataError("stage 2 requested before neighbor tables were mined");
        // anchor assignments; backbones optionally frozen for this loss
        auto anchors_for = [&](bool vision) {
            NodeId rows = rows_for(cfg_.l2r_source, vision);
            if (cfg_.freeze_backbones_stage2) return g.constant(g.value(rows));
            return rows;
        };
        // neighbor embeddings, always computed without gradient tracking
        std::set<int> needed;
        for (int idx : batch) {
            for (int nb : neighbors_v_[static_cast<size_t>(idx)]) needed.insert(nb);
            for (int nb : neighbors_t_[static_cast<size_t>(idx)]) needed.insert(nb);
        }
        std::map<int, std::pair<std::vector<float>, std::vector<float>>> nb_emb;
        for (int nb : needed) {
            Graph<float> gf;
            auto fb = model_->bind_frozen(gf);
            auto pe = model_->embed_pair(gf, fb, docs_[static_cast<size_t>(nb)].image,
                                         docs_[static_cast<size_t>(nb)].tokens, want_fused);
            bool fused_src = cfg_.l2r_source == EmbeddingSource::Fused && want_fused;
            nb_emb[nb] = {gf.value(fused_src ? pe.fused_vision : pe.z_vision).data,
                          gf.value(fused_src ? pe.fused_language : pe.z_language).data};
        }
        auto neighbor_assignments = [&](bool vision) {
            std::vector<NodeId> per_sample;
            for (int idx : batch) {
                const auto& table = vision ? neighbors_v_ : neighbors_t_;
                const auto& nbs = table[static_cast<size_t>(idx)];
                int dim = static_cast<int>(vision ? nb_emb[nbs[0]].first.size()
                                                  : nb_emb[nbs[0]].second.size());
                Tensor<float> rows(static_cast<int>(nbs.size()), dim);
                for (size_t r = 0; r < nbs.size(); ++r) {
                    const auto& e = vision ? nb_emb[nbs[r]].first : nb_emb[nbs[r]].second;
                    for (int c = 0; c < dim; ++c) rows.at(static_cast<int>(r), c) = e[static_cast<size_t>(c)];
                }
                per_sample.push_back(
                    model_->cluster_assign(g, bound, g.constant(std::move(rows)), vision));
            }
            return per_sample;
        };
        NodeId assign_v = model_->cluster_assign(g, bound, anchors_for(true), true);
        NodeId assign_t = model_->cluster_assign(g, bound, anchors_for(false), false);
        auto res_v = l2r_loss(g, assign_v, neighbor_assignments(true),
                              static_cast<float>(cfg_.lambda_entropy), cfg_.entropy_sign);
        auto res_t = l2r_loss(g, assign_t, neighbor_assignments(false),
                              static_cast<float>(cfg_.lambda_entropy), cfg_.entropy_sign);
        l2r_v_node = res_v.loss;
        l2r_t_node = res_t.loss;
    }

    LossFlags step_flags = flags;
    step_flags.l2r = stage2;
    NodeId total = total_loss(g, step_flags, inter.loss, intra.loss, unify, l2r_v_node,
                              l2r_t_node);

    m.l2m_inter = g.scalar(inter.loss);
    m.l2m_intra = g.scalar(intra.loss);
    if (unify >= 0) m.l2u = g.scalar(unify);
    if (l2r_v_node >= 0) m.l2r_v = g.scalar(l2r_v_node);
    if (l2r_t_node >= 0) m.l2r_t = g.scalar(l2r_t_node);
    m.loss_total = g.scalar(total);
    if (!std::isfinite(m.loss_total))
        throw NumericError("training step " + std::to_string(step) + ": non-finite loss");

    g.backward(total);
    model_->collect_grads(g, bound);
    bool applied = opt_.step(model_->params(), m.lr, cfg_.weight_decay, cfg_.grad_clip);
    if (!applied)
        log("# step " + std::to_string(step) + " aborted: non-finite gradients (" +
            std::to_string(opt_.consecutive_failures()) + "/3)");

    // feed the queues with detached mining-space embeddings
    const auto& qv_rows = g.value(zv_l2m);
    const auto& qt_rows = g.value(zt_l2m);
    for (int i = 0; i < qv_rows.rows; ++i) {
        std::vector<float> row_v(qv_rows.data.begin() + static_cast<size_t>(i) * qv_rows.cols,
                                 qv_rows.data.begin() + static_cast<size_t>(i + 1) * qv_rows.cols);
        std::vector<float> row_t(qt_rows.data.begin() + static_cast<size_t>(i) * qt_rows.cols,
                                 qt_rows.data.begin() + static_cast<size_t>(i + 1) * qt_rows.cols);
        int label = docs_[static_cast<size_t>(batch[static_cast<size_t>(i)])].label;
        queue_v_->enqueue(std::move(row_v), label);
        queue_t_->enqueue(std::move(row_t), label);
    }
    return m;
}

TrainResult Trainer::run() {
    TrainResult result;
    result.metrics_path = out_dir_ + "/metrics.txt";
    std::ofstream metrics(result.metrics_path,
                          start_step_ > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw DataError("cannot open " + result.metrics_path);

    LossFlags flags = LossFlags::from(cfg_.setting);
    for (int step = start_step_; step < cfg_.total_steps; ++step) {
        if (flags.l2r) {
            bool due_first = step == cfg_.stage2_start_step && !neighbors_mined_;
            bool due_refresh = neighbors_mined_ && cfg_.neighbor_refresh_interval > 0 &&
                               step > cfg_.stage2_start_step &&
                               (step - cfg_.stage2_start_step) % cfg_.neighbor_refresh_interval == 0;
            if (due_first || due_refresh) mine_neighbors(step);
        }
        StepMetrics m = train_step(step);
        result.history.push_back(m);
        for (const auto& line : pending_log_) metrics << line << "\n";
        pending_log_.clear();
        metrics << format_metrics(m) << "\n";
        if (cfg_.checkpoint_interval > 0 && (step + 1) % cfg_.checkpoint_interval == 0 &&
            step + 1 < cfg_.total_steps) {
            write_checkpoint_file(out_dir_ + "/checkpoint_step" + std::to_string(step + 1) +
                                      ".gdoc",
                                  step + 1);
        }
    }
    metrics.flush();
    result.checkpoint_path = out_dir_ + "/checkpoint_final.gdoc";
    write_checkpoint_file(result.checkpoint_path, cfg_.total_steps);
    return result;
}

}  // namespace gdoc
