#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "gdoc/gradcheck.hpp"
#include "gdoc/model.hpp"
#include "gdoc/objectives.hpp"
#include "gdoc/queue.hpp"

namespace gdoc {

// 64-bit finite-difference certification of every loss and of the combined
// objective routed through embed_pair, at tiny dimensions.

struct GradcertCheck {
    std::string name;
    double max_rel_err = 0;
    double tolerance = 0;
    bool pass = false;
};

struct GradcertReport {
    std::vector<GradcertCheck> checks;
    double seconds = 0;
    bool all_pass() const {
        for (const auto& c : checks)
            if (!c.pass) return false;
        return !checks.empty();
    }
};

namespace gradcert_detail {

inline ad::Tensor<double> unit_rows(int m, int d, Rng& rng) {
    ad::Tensor<double> t(m, d);
    for (int i = 0; i < m; ++i) {
        double nrm = 0;
        for (int j = 0; j < d; ++j) {
            t.at(i, j) = rng.normal();
            nrm += t.at(i, j) * t.at(i, j);
        }
        nrm = std::sqrt(nrm);
        for (int j = 0; j < d; ++j) t.at(i, j) /= nrm;
    }
    return t;
}

inline void fill_queue(SupportQueue<double>& q, int count, int d, Rng& rng) {
    for (int i = 0; i < count; ++i) q.enqueue(unit_rows(1, d, rng).data);
}

inline ModelConfig cert_model_config(Setting setting, int dim) {
    ModelConfig cfg;
    cfg.vision = {8, 8, 1, 4, dim, 1, 2, 1};
    cfg.language = {16, 6, dim, 1, 2, 1, 0, 1, 2};
    cfg.projection = {dim, 6};
    cfg.cmae = {dim, 2, 1, 1, true};
    cfg.with_cmae = setting != Setting::S1;
    cfg.with_cluster_heads = setting == Setting::S3;
    cfg.num_clusters_vision = 3;
    cfg.num_clusters_language = 3;
    cfg.init_seed = 2024;
    return cfg;
}

}  // namespace gradcert_detail

inline GradcertReport run_gradient_certification(Setting setting, int dim = 8,
                                                 double tolerance = 1e-4) {
    using namespace gradcert_detail;
    if (dim < 4 || dim % 2 != 0) throw UsageError("gradcheck dim must be an even number >= 4");
    auto clock_start = std::chrono::steady_clock::now();
    GradcertReport report;
    auto record = [&](const std::string& name, const ad::GradcheckReport& r) {
        report.checks.push_back({name, r.max_rel_err, r.tolerance, r.pass});
    };

    const int m = 4;
    Rng rng(314159);
    SupportQueue<double> qv(64, Modality::Vision), qt(64, Modality::Language);
    fill_queue(qv, 24, 6, rng);
    fill_queue(qt, 24, 6, rng);
    ad::Tensor<double> raw_v = ad::Tensor<double>::randn(m, 6, rng);
    ad::Tensor<double> raw_t = ad::Tensor<double>::randn(m, 6, rng);
    raw_v.requires_grad = true;
    raw_t.requires_grad = true;
    L2mOptions<double> opt;
    opt.temperature = 0.07;

    record("l2m_inter", ad::gradcheck(
        [&](ad::Graph<double>& g, const std::vector<ad::NodeId>& ids) {
            return l2m_inter(g, g.l2_normalize_rows(ids[0]), g.l2_normalize_rows(ids[1]), qv, qt,
                             opt).loss;
        },
        {raw_v, raw_t}, 1e-5, tolerance));

    record("l2m_intra", ad::gradcheck(
        [&](ad::Graph<double>& g, const std::vector<ad::NodeId>& ids) {
            return l2m_intra(g, g.l2_normalize_rows(ids[0]), g.l2_normalize_rows(ids[1]), qv, qt,
                             opt).loss;
        },
        {raw_v, raw_t}, 1e-5, tolerance));

    ad::Tensor<double> soft_targets;
    {
        ad::Graph<double> g0;
        soft_targets = l2u_average_similarities(
            g0.value(g0.l2_normalize_rows(g0.constant(raw_v))),
            g0.value(g0.l2_normalize_rows(g0.constant(raw_t))));
    }
    record("l2u_hard", ad::gradcheck(
        [&](ad::Graph<double>& g, const std::vector<ad::NodeId>& ids) {
            return l2u_loss(g, g.l2_normalize_rows(ids[0]), g.l2_normalize_rows(ids[1]),
                            L2uTargets::Hard);
        },
        {raw_v, raw_t}, 1e-5, tolerance));
    record("l2u_soft", ad::gradcheck(
        [&](ad::Graph<double>& g, const std::vector<ad::NodeId>& ids) {
            return l2u_loss(g, g.l2_normalize_rows(ids[0]), g.l2_normalize_rows(ids[1]),
                            L2uTargets::Soft, &soft_targets);
        },
        {raw_v, raw_t}, 1e-5, tolerance));

    {
        ad::Tensor<double> head = ad::Tensor<double>::randn(6, 3, rng);
        head.requires_grad = true;
        record("l2r", ad::gradcheck(
            [&](ad::Graph<double>& g, const std::vector<ad::NodeId>& ids) {
                ad::NodeId assign = g.row_softmax(g.matmul(ids[0], ids[1]), 1.0);
                std::vector<ad::NodeId> neighbors;
                for (int i = 0; i < m; ++i)
                    neighbors.push_back(g.concat_rows({g.slice_rows(assign, (i + 1) % m, 1),
                                                       g.slice_rows(assign, (i + 2) % m, 1)}));
                return l2r_loss(g, assign, neighbors, 2.0, 1).loss;
            },
            {raw_v, head}, 1e-5, tolerance));
    }

    // the combined objective, end to end through embed_pair
    {
        Model<double> model(cert_model_config(setting, dim));
        LossFlags flags = LossFlags::from(setting);
        SupportQueue<double> pqv(64, Modality::Vision), pqt(64, Modality::Language);
        fill_queue(pqv, 24, 6, rng);
        fill_queue(pqt, 24, 6, rng);

        struct Sample {
            std::vector<double> image;
            std::vector<int> tokens;
        };
        std::vector<Sample> batch;
        for (int i = 0; i < m; ++i) {
            Sample s;
            s.image.resize(64);
            for (auto& px : s.image) px = rng.uniform_double();
            int len = 2 + static_cast<int>(rng.below(4));
            for (int k = 0; k < len; ++k)
                s.tokens.push_back(3 + static_cast<int>(rng.below(13)));
            batch.push_back(std::move(s));
        }

        std::vector<ad::Tensor<double>> leaves;
        for (size_t i = 0; i < model.params().count(); ++i)
            leaves.push_back(model.params().item(i).second);

        ad::Tensor<double> fixed_soft;
        bool use_soft_pin = false;
        auto build_total = [&](ad::Graph<double>& g, const std::vector<ad::NodeId>& ids) {
            auto bound = model.bind_with(g, ids);
            std::vector<ad::NodeId> zv, zt, fv, ft;
            for (const auto& s : batch) {
                auto pe = model.embed_pair(g, bound, s.image, s.tokens, flags.l2u || flags.l2r);
                zv.push_back(pe.z_vision);
                zt.push_back(pe.z_language);
                if (pe.fused_vision >= 0) {
                    fv.push_back(pe.fused_vision);
                    ft.push_back(pe.fused_language);
                }
            }
            ad::NodeId proj_v = g.concat_rows(zv);
            ad::NodeId proj_t = g.concat_rows(zt);
            auto inter = l2m_inter(g, proj_v, proj_t, pqv, pqt, opt);
            auto intra = l2m_intra(g, proj_v, proj_t, pqv, pqt, opt);
            ad::NodeId unify = -1, l2r_v = -1, l2r_t = -1;
            if (flags.l2u)
                unify = l2u_loss(g, g.concat_rows(fv), g.concat_rows(ft), L2uTargets::Soft,
                                 use_soft_pin ? &fixed_soft : nullptr);
            if (flags.l2r) {
                ad::NodeId assign_v = model.cluster_assign(g, bound, g.concat_rows(fv), true);
                ad::NodeId assign_t = model.cluster_assign(g, bound, g.concat_rows(ft), false);
                auto in_batch_neighbors = [&](ad::NodeId assign) {
                    std::vector<ad::NodeId> nb;
                    for (int i = 0; i < m; ++i)
                        nb.push_back(g.concat_rows({g.slice_rows(assign, (i + 1) % m, 1),
                                                    g.slice_rows(assign, (i + 2) % m, 1)}));
                    return nb;
                };
                l2r_v = l2r_loss(g, assign_v, in_batch_neighbors(assign_v), 2.0, 1).loss;
                l2r_t = l2r_loss(g, assign_t, in_batch_neighbors(assign_t), 2.0, 1).loss;
            }
            return total_loss(g, flags, inter.loss, intra.loss, unify, l2r_v, l2r_t);
        };
        if (flags.l2u) {
            // pin the detached soft targets at the base point
            ad::Graph<double> g0;
            std::vector<ad::NodeId> ids0;
            for (const auto& t : leaves) ids0.push_back(g0.leaf(t));
            auto bound0 = model.bind_with(g0, ids0);
            std::vector<ad::NodeId> fv0, ft0;
            for (const auto& s : batch) {
                auto pe = model.embed_pair(g0, bound0, s.image, s.tokens, true);
                fv0.push_back(pe.fused_vision);
                ft0.push_back(pe.fused_language);
            }
            fixed_soft = l2u_average_similarities(g0.value(g0.concat_rows(fv0)),
                                                  g0.value(g0.concat_rows(ft0)));
            use_soft_pin = true;
        }
        record("total_" + std::string(setting_name(setting)) + "_through_embed_pair",
               ad::gradcheck(build_total, leaves, 1e-5, tolerance));
    }

    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
    return report;
}

}  // namespace gdoc
