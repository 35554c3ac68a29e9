#include "nflr/roc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "nflr/error.hpp"
#include "nflr/rng.hpp"

namespace nflr {

namespace {

struct ClassCounts {
    std::size_t pos = 0;
    std::size_t neg = 0;
};

ClassCounts check_inputs(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw Error(ErrorKind::validation, "scores and labels differ in length");
    ClassCounts c;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw Error(ErrorKind::validation, "labels must be 0 or 1");
        if (std::isnan(scores[i])) throw Error(ErrorKind::validation, "NaN score at index " + std::to_string(i));
        (labels[i] ? c.pos : c.neg) += 1;
    }
    if (c.pos == 0 || c.neg == 0) {
        throw Error(ErrorKind::undefined_statistic, "both classes are required (positives " + std::to_string(c.pos) +
                                                        ", negatives " + std::to_string(c.neg) + ")");
    }
    return c;
}

std::vector<std::size_t> order_descending(std::span<const double> scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

// Placement value of one pair: 1 if pos ranks above neg, 1/2 on ties.
double psi(double pos, double neg) {
    if (pos > neg) return 1.0;
    if (pos == neg) return 0.5;
    return 0.0;
}

}  // namespace

Fold SplitAssignment::of(const std::string& subject) const {
    auto it = fold.find(subject);
    if (it == fold.end()) throw Error(ErrorKind::validation, "subject " + subject + " is not in the split");
    return it->second;
}

std::size_t SplitAssignment::count(Fold f) const {
    return static_cast<std::size_t>(
        std::count_if(fold.begin(), fold.end(), [f](const auto& kv) { return kv.second == f; }));
}

SplitAssignment subject_split(std::span<const SubjectRef> subjects, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorKind::config, "split fraction must lie in (0, 1]");
    std::map<int, std::set<std::string>> strata;
    std::map<std::string, int> seen;
    for (const auto& s : subjects) {
        auto [it, inserted] = seen.emplace(s.id, s.group);
        if (!inserted && it->second != s.group) {
            throw Error(ErrorKind::validation, "subject " + s.id + " appears in two groups");
        }
        strata[s.group].insert(s.id);
    }
    SplitAssignment out;
    out.fraction = fraction;
    out.seed = seed;
    for (const auto& [group, ids] : strata) {
        if (ids.size() < 2) {
            throw Error(ErrorKind::config, "group " + std::to_string(group) + " has fewer than 2 subjects");
        }
        std::vector<std::string> order(ids.begin(), ids.end());
        Rng rng(derive_seed(seed, {0x5b117ULL, static_cast<std::uint64_t>(group)}));
        rng.shuffle(order);
        const auto n_train = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(order.size()) - 1e-9));
        for (std::size_t i = 0; i < order.size(); ++i) out.fold[order[i]] = i < n_train ? Fold::train : Fold::test;
    }
    return out;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
    const auto counts = check_inputs(scores, labels);
    const auto idx = order_descending(scores);
    // Twice the Mann-Whitney U, accumulated in integers so the result is exact.
    std::uint64_t u2 = 0;
    std::uint64_t neg_below = counts.neg;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        std::uint64_t pos_tied = 0, neg_tied = 0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? pos_tied : neg_tied) += 1;
            ++j;
        }
        neg_below -= neg_tied;
        u2 += pos_tied * (2 * neg_below + neg_tied);
        i = j;
    }
    return static_cast<double>(u2) / (2.0 * static_cast<double>(counts.pos) * static_cast<double>(counts.neg));
}

RocResult roc_curve(std::span<const double> scores, std::span<const int> labels) {
    const auto counts = check_inputs(scores, labels);
    const auto idx = order_descending(scores);
    RocResult roc;
    roc.thresholds.push_back(std::numeric_limits<double>::infinity());
    roc.fpr.push_back(0.0);
    roc.tpr.push_back(0.0);
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < idx.size();) {
        const double t = scores[idx[i]];
        while (i < idx.size() && scores[idx[i]] == t) {
            (labels[idx[i]] ? tp : fp) += 1;
            ++i;
        }
        roc.thresholds.push_back(t);
        roc.fpr.push_back(static_cast<double>(fp) / static_cast<double>(counts.neg));
        roc.tpr.push_back(static_cast<double>(tp) / static_cast<double>(counts.pos));
    }
    roc.auc = auc(scores, labels);
    return roc;
}

SensitivityResult sensitivity_at_specificity(std::span<const double> scores, std::span<const int> labels,
                                             double target_specificity) {
    if (!(target_specificity >= 0.0 && target_specificity <= 1.0)) {
        throw Error(ErrorKind::config, "target specificity must lie in [0, 1]");
    }
    const auto counts = check_inputs(scores, labels);
    const auto idx = order_descending(scores);
    const double n_neg = static_cast<double>(counts.neg);
    // Specificity compared in counts to avoid round-off at exact boundaries.
    const double min_true_neg = target_specificity * n_neg - 1e-9 * n_neg;

    SensitivityResult best;
    best.threshold = std::numeric_limits<double>::infinity();
    best.degenerate = true;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < idx.size();) {
        const double t = scores[idx[i]];
        while (i < idx.size() && scores[idx[i]] == t) {
            (labels[idx[i]] ? tp : fp) += 1;
            ++i;
        }
        if (static_cast<double>(counts.neg - fp) < min_true_neg) break;  // fp only grows
        const double sens = static_cast<double>(tp) / static_cast<double>(counts.pos);
        if (sens > best.sensitivity || (best.degenerate && tp > 0)) {
            best.sensitivity = sens;
            best.threshold = t;
            best.degenerate = false;
        }
    }
    return best;
}

Confusion confusion_at_threshold(std::span<const double> scores, std::span<const int> labels, double threshold) {
    if (scores.size() != labels.size()) throw Error(ErrorKind::validation, "scores and labels differ in length");
    Confusion c;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted = scores[i] >= threshold;
        if (labels[i]) {
            (predicted ? c.tp : c.fn) += 1;
        } else {
            (predicted ? c.fp : c.tn) += 1;
        }
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const auto ratio = [nan](std::size_t a, std::size_t b) {
        return b == 0 ? nan : static_cast<double>(a) / static_cast<double>(b);
    };
    c.accuracy = ratio(c.tp + c.tn, scores.size());
    c.sensitivity = ratio(c.tp, c.tp + c.fn);
    c.specificity = ratio(c.tn, c.tn + c.fp);
    return c;
}

double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

ComparisonResult delong_test(std::span<const double> scores_a, std::span<const double> scores_b,
                             std::span<const int> labels) {
    if (scores_a.size() != scores_b.size()) {
        throw Error(ErrorKind::validation, "paired score vectors differ in length");
    }
    check_inputs(scores_a, labels);
    check_inputs(scores_b, labels);
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
    const std::size_t m = pos.size(), n = neg.size();

    // Placement values: v10 per positive, v01 per negative, for both tests.
    std::vector<double> v10a(m, 0.0), v10b(m, 0.0), v01a(n, 0.0), v01b(n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double pa = psi(scores_a[pos[i]], scores_a[neg[j]]);
            const double pb = psi(scores_b[pos[i]], scores_b[neg[j]]);
            v10a[i] += pa;
            v10b[i] += pb;
            v01a[j] += pa;
            v01b[j] += pb;
        }
    }
    for (auto& v : v10a) v /= static_cast<double>(n);
    for (auto& v : v10b) v /= static_cast<double>(n);
    for (auto& v : v01a) v /= static_cast<double>(m);
    for (auto& v : v01b) v /= static_cast<double>(m);

    ComparisonResult r;
    r.auc_a = auc(scores_a, labels);
    r.auc_b = auc(scores_b, labels);
    r.difference = r.auc_a - r.auc_b;

    // Sample covariance of the difference of placement values.
    auto diff_variance = [](const std::vector<double>& a, const std::vector<double>& b) {
        const std::size_t k = a.size();
        if (k < 2) return 0.0;
        double mean = 0.0;
        for (std::size_t i = 0; i < k; ++i) mean += a[i] - b[i];
        mean /= static_cast<double>(k);
        double ss = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            const double d = a[i] - b[i] - mean;
            ss += d * d;
        }
        return ss / static_cast<double>(k - 1);
    };
    r.variance = diff_variance(v10a, v10b) / static_cast<double>(m) + diff_variance(v01a, v01b) / static_cast<double>(n);
    if (r.variance < 1e-15) {
        r.z = 0.0;
        r.p_value = 1.0;
    } else {
        r.z = r.difference / std::sqrt(r.variance);
        r.p_value = normal_two_sided_p(r.z);
    }
    return r;
}

std::string roc_to_csv(const RocResult& roc, std::uint64_t split_seed, const std::string& unit) {
    std::ostringstream os;
    os.precision(17);
    os << "threshold,fpr,tpr,split_seed,unit\n";
    for (std::size_t i = 0; i < roc.fpr.size(); ++i) {
        os << (std::isinf(roc.thresholds[i]) ? std::string("inf") : [&] {
            std::ostringstream t;
            t.precision(17);
            t << roc.thresholds[i];
            return t.str();
        }()) << ',' << roc.fpr[i] << ',' << roc.tpr[i] << ',' << split_seed << ',' << unit << '\n';
    }
    return os.str();
}

}  // namespace nflr
