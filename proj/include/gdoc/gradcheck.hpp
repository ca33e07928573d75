#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "gdoc/graph.hpp"

namespace gdoc::ad {

struct GradcheckReport {
    bool pass = false;
    double max_rel_err = 0.0;
    std::vector<double> per_leaf_err;  // max relative error per checked leaf
    double tolerance = 0.0;
};

// Central finite differences against one reverse sweep, in 64-bit. Relative
// error uses a denominator floored at 1e-3 so near-zero gradients are compared
// absolutely. Only leaves with requires_grad are checked.
using GradcheckFn = std::function<NodeId(Graph<double>&, const std::vector<NodeId>&)>;

inline GradcheckReport gradcheck(const GradcheckFn& build, std::vector<Tensor<double>> leaves,
                                 double step = 1e-5, double tolerance = 1e-5) {
    auto eval = [&](const std::vector<Tensor<double>>& ls) {
        Graph<double> g;
        std::vector<NodeId> ids;
        ids.reserve(ls.size());
        for (const auto& t : ls) ids.push_back(g.leaf(t));
        NodeId out = build(g, ids);
        return g.scalar(out);
    };

    // analytic pass
    Graph<double> g;
    std::vector<NodeId> ids;
    for (const auto& t : leaves) ids.push_back(g.leaf(t));
    NodeId out = build(g, ids);
    if (g.value(out).numel() != 1)
        throw ShapeError("gradcheck: function output must be scalar, got " +
                         g.value(out).shape_str());
    g.backward(out);

    GradcheckReport report;
    report.tolerance = tolerance;
    for (size_t li = 0; li < leaves.size(); ++li) {
        if (!leaves[li].requires_grad) continue;
        const auto& analytic = g.grad(ids[li]);
        double leaf_err = 0.0;
        for (size_t e = 0; e < leaves[li].numel(); ++e) {
            double keep = leaves[li].data[e];
            leaves[li].data[e] = keep + step;
            double up = eval(leaves);
            leaves[li].data[e] = keep - step;
            double down = eval(leaves);
            leaves[li].data[e] = keep;
            double numeric = (up - down) / (2.0 * step);
            double a = analytic.empty() ? 0.0 : analytic[e];
            double denom = std::max({1e-3, std::abs(a), std::abs(numeric)});
            leaf_err = std::max(leaf_err, std::abs(a - numeric) / denom);
        }
        report.per_leaf_err.push_back(leaf_err);
        report.max_rel_err = std::max(report.max_rel_err, leaf_err);
    }
    report.pass = report.max_rel_err <= tolerance;
    return report;
}

}  // namespace gdoc::ad
