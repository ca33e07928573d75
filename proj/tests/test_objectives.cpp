#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gdoc/gradcheck.hpp"
#include "gdoc/objectives.hpp"
#include "gdoc/rng.hpp"
#include "oracles.hpp"

using namespace gdoc;
using ad::Graph;
using ad::NodeId;
using ad::Tensor;

namespace {

Tensor<double> unit_rows(int m, int d, Rng& rng) {
    Tensor<double> t(m, d);
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

oracle::Mat to_mat(const Tensor<double>& t) {
    oracle::Mat m(static_cast<size_t>(t.rows), oracle::Vec(static_cast<size_t>(t.cols)));
    for (int i = 0; i < t.rows; ++i)
        for (int j = 0; j < t.cols; ++j) m[static_cast<size_t>(i)][static_cast<size_t>(j)] = t.at(i, j);
    return m;
}

void fill_queue(SupportQueue<double>& q, int count, int d, Rng& rng) {
    for (int i = 0; i < count; ++i) {
        auto t = unit_rows(1, d, rng);
        q.enqueue(t.data);
    }
}

oracle::Mat queue_mat(const SupportQueue<double>& q) {
    oracle::Mat m;
    for (size_t i = 0; i < q.size(); ++i) m.push_back(q.entry(i).values);
    return m;
}

double rel_diff(double a, double b) {
    return std::abs(a - b) / std::max({1e-12, std::abs(a), std::abs(b)});
}

}  // namespace

TEST_CASE("l2m closed forms in fallback mode") {
    // orthonormal batch, tau = 1, M = 2, empty queues
    Tensor<double> z = Tensor<double>::from_rows(2, 2, {1, 0, 0, 1});
    SupportQueue<double> qv(8, Modality::Vision), qt(8, Modality::Language);
    Graph<double> g;
    NodeId zv = g.constant(z), zt = g.constant(z);
    L2mOptions<double> opt;
    opt.temperature = 1.0;

    auto inter = l2m_inter(g, zv, zt, qv, qt, opt);
    CHECK(inter.used_fallback);
    double expected_term = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(g.scalar(inter.loss) == doctest::Approx(2.0 * expected_term).epsilon(1e-12));

    auto intra = l2m_intra(g, zv, zt, qv, qt, opt);
    CHECK(g.scalar(intra.loss) == doctest::Approx(2.0 * expected_term).epsilon(1e-12));
}

TEST_CASE("l2m single-sample batches collapse to zero in fallback mode") {
    Tensor<double> z = Tensor<double>::from_rows(1, 3, {0.6, 0.8, 0.0});
    SupportQueue<double> qv(8, Modality::Vision), qt(8, Modality::Language);
    Graph<double> g;
    NodeId zv = g.constant(z), zt = g.constant(z);
    L2mOptions<double> opt;
    opt.temperature = 1.0;
    CHECK(g.scalar(l2m_inter(g, zv, zt, qv, qt, opt).loss) == doctest::Approx(0.0));
    CHECK(g.scalar(l2m_intra(g, zv, zt, qv, qt, opt).loss) == doctest::Approx(0.0));
}

TEST_CASE("l2m matches the brute-force oracle on random fixtures") {
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        Rng rng(seed);
        int m = 4, d = 8;
        SupportQueue<double> qv(64, Modality::Vision), qt(64, Modality::Language);
        fill_queue(qv, 32, d, rng);
        fill_queue(qt, 32, d, rng);
        Tensor<double> zv_t = unit_rows(m, d, rng);
        Tensor<double> zt_t = unit_rows(m, d, rng);

        Graph<double> g;
        NodeId zv = g.constant(zv_t), zt = g.constant(zt_t);
        L2mOptions<double> opt;
        opt.temperature = 0.07;
        double inter = g.scalar(l2m_inter(g, zv, zt, qv, qt, opt).loss);
        double intra = g.scalar(l2m_intra(g, zv, zt, qv, qt, opt).loss);

        double oracle_inter =
            oracle::l2m_inter(to_mat(zv_t), to_mat(zt_t), queue_mat(qv), queue_mat(qt), 0.07);
        double oracle_intra =
            oracle::l2m_intra(to_mat(zv_t), to_mat(zt_t), queue_mat(qv), queue_mat(qt), 0.07);
        CAPTURE(seed);
        CHECK(rel_diff(inter, oracle_inter) <= 1e-10);
        CHECK(rel_diff(intra, oracle_intra) <= 1e-10);
    }
}

TEST_CASE("l2u hard closed form on an orthonormal batch") {
    Tensor<double> z = Tensor<double>::from_rows(2, 2, {1, 0, 0, 1});
    Graph<double> g;
    NodeId zv = g.constant(z), zt = g.constant(z);
    NodeId loss = l2u_loss(g, zv, zt, L2uTargets::Hard);
    double expected = 2.0 * std::log(1.0 + std::exp(-1.0));
    CHECK(g.scalar(loss) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("l2u hard loss decreases monotonically in the diagonal margin") {
    double prev = 1e300;
    for (double theta = 0.2; theta < 3.1415; theta += 0.2) {
        Tensor<double> zv = Tensor<double>::from_rows(2, 2, {1, 0, std::cos(theta), std::sin(theta)});
        Graph<double> g;
        NodeId a = g.constant(zv), b = g.constant(zv);
        double loss = g.scalar(l2u_loss(g, a, b, L2uTargets::Hard));
        CHECK(loss < prev);
        prev = loss;
    }
}

TEST_CASE("l2u refuses batches smaller than two") {
    Graph<double> g;
    Rng rng(5);
    NodeId zv = g.constant(unit_rows(1, 4, rng));
    NodeId zt = g.constant(unit_rows(1, 4, rng));
    CHECK_THROWS_AS(l2u_loss(g, zv, zt, L2uTargets::Hard), DataError);
}

TEST_CASE("l2u matches the brute-force oracle, hard and soft") {
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        Rng rng(seed * 31);
        int m = 4, d = 6;
        Tensor<double> zv_t = unit_rows(m, d, rng);
        Tensor<double> zt_t = unit_rows(m, d, rng);
        Graph<double> g;
        NodeId zv = g.constant(zv_t), zt = g.constant(zt_t);
        double hard = g.scalar(l2u_loss(g, zv, zt, L2uTargets::Hard));
        double soft = g.scalar(l2u_loss(g, zv, zt, L2uTargets::Soft));
        CAPTURE(seed);
        CHECK(rel_diff(hard, oracle::l2u_hard(to_mat(zv_t), to_mat(zt_t))) <= 1e-10);
        CHECK(rel_diff(soft, oracle::l2u_soft(to_mat(zv_t), to_mat(zt_t))) <= 1e-10);
    }
}

TEST_CASE("l2u hard loss is permutation equivariant") {
    Rng rng(17);
    for (int inst = 0; inst < 100; ++inst) {
        int m = 5, d = 8;
        Tensor<double> zv = unit_rows(m, d, rng);
        Tensor<double> zt = unit_rows(m, d, rng);
        std::vector<int> perm = {0, 1, 2, 3, 4};
        rng.shuffle(perm);
        Tensor<double> pv(m, d), pt(m, d);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j) {
                pv.at(i, j) = zv.at(perm[static_cast<size_t>(i)], j);
                pt.at(i, j) = zt.at(perm[static_cast<size_t>(i)], j);
            }
        Graph<double> g;
        double base = g.scalar(l2u_loss(g, g.constant(zv), g.constant(zt), L2uTargets::Hard));
        double permuted = g.scalar(l2u_loss(g, g.constant(pv), g.constant(pt), L2uTargets::Hard));
        CHECK(rel_diff(base, permuted) <= 1e-12);
    }
}

TEST_CASE("l2r uniform assignment entropy magnitude is lambda log C") {
    int m = 4, c = 3;
    double lambda = 2.0;
    Tensor<double> uniform = Tensor<double>::full(m, c, 1.0 / c);
    Graph<double> g;
    NodeId anchors = g.constant(uniform);
    std::vector<NodeId> neighbors(static_cast<size_t>(m), g.constant(Tensor<double>::full(2, c, 1.0 / c)));
    auto res = l2r_loss(g, anchors, neighbors, lambda, 1);
    CHECK(std::abs(std::abs(g.scalar(res.entropy)) - lambda * std::log(static_cast<double>(c))) <=
          1e-10);
    // printed sign: minimized at uniform, so the value is -lambda log C
    CHECK(g.scalar(res.entropy) == doctest::Approx(-lambda * std::log(3.0)).epsilon(1e-12));
    auto flipped = l2r_loss(g, anchors, neighbors, lambda, -1);
    CHECK(g.scalar(flipped.entropy) == doctest::Approx(lambda * std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("l2r consistency vanishes when anchor and neighbors share a one-hot") {
    int m = 3, c = 4;
    Tensor<double> anchor(m, c);
    for (int i = 0; i < m; ++i) anchor.at(i, 1) = 1.0;
    Tensor<double> nb(2, c);
    nb.at(0, 1) = 1.0;
    nb.at(1, 1) = 1.0;
    Graph<double> g;
    std::vector<NodeId> neighbors(static_cast<size_t>(m), g.constant(nb));
    auto res = l2r_loss(g, g.constant(anchor), neighbors, 2.0, 1);
    CHECK(g.scalar(res.consistency) == doctest::Approx(0.0));
}

TEST_CASE("l2r matches the brute-force oracle on random fixtures") {
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        Rng rng(seed * 7 + 1);
        int m = 4, c = 3, k = 2;
        auto random_distribution_rows = [&](int rows) {
            Tensor<double> t(rows, c);
            for (int i = 0; i < rows; ++i) {
                double mx = -1e300;
                std::vector<double> logits(static_cast<size_t>(c));
                for (int j = 0; j < c; ++j) {
                    logits[static_cast<size_t>(j)] = rng.normal();
                    mx = std::max(mx, logits[static_cast<size_t>(j)]);
                }
                double den = 0;
                for (int j = 0; j < c; ++j) den += std::exp(logits[static_cast<size_t>(j)] - mx);
                for (int j = 0; j < c; ++j)
                    t.at(i, j) = std::exp(logits[static_cast<size_t>(j)] - mx) / den;
            }
            return t;
        };
        Tensor<double> anchors = random_distribution_rows(m);
        Graph<double> g;
        std::vector<NodeId> neighbor_ids;
        std::vector<oracle::Mat> neighbor_mats;
        for (int i = 0; i < m; ++i) {
            Tensor<double> nb = random_distribution_rows(k);
            neighbor_ids.push_back(g.constant(nb));
            neighbor_mats.push_back(to_mat(nb));
        }
        auto res = l2r_loss(g, g.constant(anchors), neighbor_ids, 2.0, 1);
        auto expect = oracle::l2r(to_mat(anchors), neighbor_mats, 2.0, 1);
        CAPTURE(seed);
        CHECK(rel_diff(g.scalar(res.loss), expect.total) <= 1e-10);
        CHECK(rel_diff(g.scalar(res.consistency), expect.consistency) <= 1e-10);
    }
}

TEST_CASE("l2r consistency is symmetric for symmetric neighbor tables") {
    Rng rng(97);
    int m = 4, c = 3;
    // symmetric relation: i ~ i^1 (pairs 0-1, 2-3)
    auto soft_rows = [&](int rows) {
        Tensor<double> t(rows, c);
        for (int i = 0; i < rows; ++i) {
            double den = 0;
            for (int j = 0; j < c; ++j) {
                t.at(i, j) = std::exp(rng.normal());
                den += t.at(i, j);
            }
            for (int j = 0; j < c; ++j) t.at(i, j) /= den;
        }
        return t;
    };
    Tensor<double> assign = soft_rows(m);
    auto row_of = [&](int i) {
        Tensor<double> r(1, c);
        for (int j = 0; j < c; ++j) r.at(0, j) = assign.at(i, j);
        return r;
    };
    Graph<double> g;
    std::vector<NodeId> forward_nb = {g.constant(row_of(1)), g.constant(row_of(0)),
                                      g.constant(row_of(3)), g.constant(row_of(2))};
    auto res = l2r_loss(g, g.constant(assign), forward_nb, 0.0, 1);
    // exchanging anchor and neighbor roles re-pairs (i,k) as (k,i): same sum
    Tensor<double> swapped(m, c);
    std::vector<int> role = {1, 0, 3, 2};
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) swapped.at(i, j) = assign.at(role[static_cast<size_t>(i)], j);
    std::vector<NodeId> swapped_nb = {g.constant(row_of(0)), g.constant(row_of(1)),
                                      g.constant(row_of(2)), g.constant(row_of(3))};
    auto res2 = l2r_loss(g, g.constant(swapped), swapped_nb, 0.0, 1);
    CHECK(g.scalar(res.consistency) == doctest::Approx(g.scalar(res2.consistency)).epsilon(1e-12));
}

TEST_CASE("l2r validates distribution rows") {
    Graph<double> g;
    Tensor<double> bad = Tensor<double>::from_rows(1, 3, {0.5, 0.2, 0.2});
    std::vector<NodeId> nb = {g.constant(Tensor<double>::from_rows(1, 3, {0.4, 0.3, 0.3}))};
    CHECK_THROWS_AS(l2r_loss(g, g.constant(bad), nb, 1.0, 1), NumericError);
}

TEST_CASE("total loss sums exactly the enabled terms") {
    Rng rng(11);
    int m = 4, d = 6;
    SupportQueue<double> qv(32, Modality::Vision), qt(32, Modality::Language);
    fill_queue(qv, 16, d, rng);
    fill_queue(qt, 16, d, rng);
    Graph<double> g;
    NodeId zv = g.constant(unit_rows(m, d, rng));
    NodeId zt = g.constant(unit_rows(m, d, rng));
    L2mOptions<double> opt;
    auto inter = l2m_inter(g, zv, zt, qv, qt, opt);
    auto intra = l2m_intra(g, zv, zt, qv, qt, opt);
    NodeId unify = l2u_loss(g, zv, zt, L2uTargets::Hard);

    NodeId s1 = total_loss(g, LossFlags::from(Setting::S1), inter.loss, intra.loss, -1, -1, -1);
    CHECK(g.scalar(s1) == doctest::Approx(g.scalar(inter.loss) + g.scalar(intra.loss)));

    NodeId s2 = total_loss(g, LossFlags::from(Setting::S2), inter.loss, intra.loss, unify, -1, -1);
    CHECK(g.scalar(s2) ==
          doctest::Approx(g.scalar(inter.loss) + g.scalar(intra.loss) + g.scalar(unify)));

    CHECK_THROWS_AS(total_loss(g, LossFlags{}, inter.loss, intra.loss, -1, -1, -1), UsageError);
    CHECK_THROWS_AS(total_loss(g, LossFlags::from(Setting::S3), inter.loss, intra.loss, unify,
                               -1, -1),
                    DataError);
}

TEST_CASE("losses stay finite across temperatures and batch sizes") {
    Rng rng(23);
    for (int m : {2, 8, 64}) {
        for (double tau : {0.01, 0.07, 1.0}) {
            SupportQueue<double> qv(128, Modality::Vision), qt(128, Modality::Language);
            fill_queue(qv, 64, 8, rng);
            fill_queue(qt, 64, 8, rng);
            Graph<double> g;
            NodeId zv = g.constant(unit_rows(m, 8, rng));
            NodeId zt = g.constant(unit_rows(m, 8, rng));
            L2mOptions<double> opt;
            opt.temperature = tau;
            CHECK(std::isfinite(g.scalar(l2m_inter(g, zv, zt, qv, qt, opt).loss)));
            CHECK(std::isfinite(g.scalar(l2m_intra(g, zv, zt, qv, qt, opt).loss)));
            CHECK(std::isfinite(g.scalar(l2u_loss(g, zv, zt, L2uTargets::Hard))));
            CHECK(std::isfinite(g.scalar(l2u_loss(g, zv, zt, L2uTargets::Soft))));
        }
    }
}

TEST_CASE("gradient certification of each loss at tiny dimensions") {
    Rng rng(29);
    int m = 4, d = 6;
    SupportQueue<double> qv(32, Modality::Vision), qt(32, Modality::Language);
    fill_queue(qv, 16, d, rng);
    fill_queue(qt, 16, d, rng);

    Tensor<double> raw_v = Tensor<double>::randn(m, d, rng);
    Tensor<double> raw_t = Tensor<double>::randn(m, d, rng);
    raw_v.requires_grad = true;
    raw_t.requires_grad = true;

    SUBCASE("l2m inter and intra") {
        auto report = ad::gradcheck(
            [&](Graph<double>& g, const std::vector<NodeId>& ids) {
                NodeId zv = g.l2_normalize_rows(ids[0]);
                NodeId zt = g.l2_normalize_rows(ids[1]);
                L2mOptions<double> opt;
                opt.temperature = 0.07;
                return g.add(l2m_inter(g, zv, zt, qv, qt, opt).loss,
                             l2m_intra(g, zv, zt, qv, qt, opt).loss);
            },
            {raw_v, raw_t}, 1e-5, 1e-4);
        CHECK(report.pass);
    }
    SUBCASE("l2u hard and soft") {
        // soft targets are detached: pin them at the base point so the finite
        // differences probe the same function the reverse sweep differentiates
        Tensor<double> targets_at_base;
        {
            Graph<double> g0;
            NodeId zv = g0.l2_normalize_rows(g0.constant(raw_v));
            NodeId zt = g0.l2_normalize_rows(g0.constant(raw_t));
            targets_at_base = l2u_average_similarities(g0.value(zv), g0.value(zt));
        }
        for (auto mode : {L2uTargets::Hard, L2uTargets::Soft}) {
            auto report = ad::gradcheck(
                [&](Graph<double>& g, const std::vector<NodeId>& ids) {
                    NodeId zv = g.l2_normalize_rows(ids[0]);
                    NodeId zt = g.l2_normalize_rows(ids[1]);
                    return l2u_loss(g, zv, zt, mode,
                                    mode == L2uTargets::Soft ? &targets_at_base : nullptr);
                },
                {raw_v, raw_t}, 1e-5, 1e-4);
            CHECK(report.pass);
        }
    }
    SUBCASE("l2r through a soft assignment head") {
        int c = 3;
        Tensor<double> head = Tensor<double>::randn(d, c, rng);
        head.requires_grad = true;
        auto report = ad::gradcheck(
            [&](Graph<double>& g, const std::vector<NodeId>& ids) {
                NodeId assign = g.row_softmax(g.matmul(ids[0], ids[1]), 1.0);
                std::vector<NodeId> neighbors;
                for (int i = 0; i < m; ++i) {
                    // neighbors drawn from the batch itself: fully differentiable
                    NodeId a = g.slice_rows(assign, (i + 1) % m, 1);
                    NodeId b = g.slice_rows(assign, (i + 2) % m, 1);
                    neighbors.push_back(g.concat_rows({a, b}));
                }
                return l2r_loss(g, assign, neighbors, 2.0, 1).loss;
            },
            {raw_v, head}, 1e-5, 1e-4);
        CHECK(report.pass);
    }
}
