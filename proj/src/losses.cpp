// SPDX-License-Identifier: Apache-2.0

#include "evigrid/losses.hpp"

#include <string>

namespace evigrid::losses {

Var loss_sft(Var logprobs, std::span<const int> targets, std::span<const bool> mask) {
    const int n = logprobs.rows();
    if (static_cast<int>(targets.size()) != n || static_cast<int>(mask.size()) != n) {
        throw ArityMismatch("loss_sft: " + std::to_string(targets.size()) + " targets and " +
                            std::to_string(mask.size()) + " mask entries for " + std::to_string(n) + " rows");
    }
    std::vector<int> rows;
    std::vector<int> cols;
    for (int i = 0; i < n; ++i) {
        if (mask[static_cast<size_t>(i)]) {
            rows.push_back(i);
            cols.push_back(targets[static_cast<size_t>(i)]);
        }
    }
    if (rows.empty()) {
        throw EmptyMaskError("loss_sft with no masked positions");
    }
    Var picked = pick(gather_rows(logprobs, rows), cols);
    return scale(mean(picked), -1.0);
}

Var loss_gnd_single(Var sims, const Interval& gt) {
    const int t_count = sims.rows();
    if (sims.cols() != 1) {
        throw ShapeError("loss_gnd_single expects a T×1 similarity column");
    }
    if (!gt.valid_for(t_count)) {
        throw IntervalOutOfRange("grounding target [" + std::to_string(gt.start) + ", " + std::to_string(gt.end) +
                                 "] outside T=" + std::to_string(t_count));
    }
    // BCE(y, s) = -log s for y=1, -log(1-s) for y=0. Build the per-frame
    // "probability of the label" column and take its clamped log.
    Tensor sign(t_count, 1);
    Tensor offset(t_count, 1);
    for (int t = 0; t < t_count; ++t) {
        const bool fg = gt.contains(t);
        sign(t, 0) = fg ? 1.0 : -1.0;
        offset(t, 0) = fg ? 0.0 : 1.0;
    }
    Graph& g = *sims.graph;
    Var p_label = add(mul(sims, g.constant(sign)), g.constant(offset));
    return scale(mean(log_clamped(p_label, kBceEps, 1.0 - kBceEps)), -1.0);
}

Var loss_gnd(std::span<const Var> sims, std::span<const Interval> gts) {
    if (sims.size() != gts.size() || sims.empty()) {
        throw ArityMismatch("loss_gnd: " + std::to_string(sims.size()) + " profiles for " +
                            std::to_string(gts.size()) + " intervals (need an equal, nonzero count)");
    }
    std::vector<Var> parts;
    for (size_t i = 0; i < sims.size(); ++i) {
        parts.push_back(loss_gnd_single(sims[i], gts[i]));
    }
    return mean(concat_rows(parts));
}

Var loss_cons(std::span<const Var> stage1, std::span<const Var> stage2) {
    if (stage1.size() != stage2.size() || stage1.empty()) {
        throw ArityMismatch("loss_cons: " + std::to_string(stage1.size()) + " stage-1 vs " +
                            std::to_string(stage2.size()) + " stage-2 evidence features");
    }
    std::vector<Var> diffs;
    for (size_t k = 0; k < stage1.size(); ++k) {
        if (!stage1[k].value().same_shape(stage2[k].value())) {
            throw ShapeError("loss_cons: paired evidence features differ in shape");
        }
        diffs.push_back(abs(sub(stage1[k], stage2[k])));
    }
    // Mean over C then over K equals the mean over the stacked K×C block.
    return mean(concat_rows(diffs));
}

LossBreakdown loss_total(Var sft, Var gnd, Var cons, const LossWeights& w) {
    LossBreakdown out;
    std::vector<Var> terms;
    if (sft.valid()) {
        out.sft = sft.item();
        terms.push_back(w.sft == 1.0 ? sft : scale(sft, w.sft));
    }
    if (gnd.valid()) {
        out.gnd = gnd.item();
        terms.push_back(w.gnd == 1.0 ? gnd : scale(gnd, w.gnd));
    }
    if (cons.valid()) {
        out.cons = cons.item();
        terms.push_back(w.cons == 1.0 ? cons : scale(cons, w.cons));
    }
    if (terms.empty()) {
        throw ArityMismatch("loss_total with no components");
    }
    out.total_var = sum(concat_rows(terms));
    out.total = out.total_var.item();
    return out;
}

}  // namespace evigrid::losses
