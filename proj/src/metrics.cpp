#include "hbert/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "hbert/errors.hpp"

namespace hbert {

std::optional<double> auc(std::span<const std::uint8_t> labels, std::span<const double> scores) {
    if (labels.size() != scores.size()) throw ShapeMismatch("auc: length mismatch");
    const std::size_t n = labels.size();
    std::size_t n_pos = 0;
    for (auto l : labels) n_pos += l ? 1 : 0;
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Average ranks across tie groups give ties exactly half weight.
    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]]) pos_rank_sum += avg_rank;
        }
        i = j;
    }
    const double u = pos_rank_sum - 0.5 * static_cast<double>(n_pos) *
                                        static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::optional<double> aps(std::span<const std::uint8_t> labels, std::span<const double> scores) {
    if (labels.size() != scores.size()) throw ShapeMismatch("aps: length mismatch");
    const std::size_t n = labels.size();
    std::size_t n_pos = 0;
    for (auto l : labels) n_pos += l ? 1 : 0;
    if (n_pos == 0) return std::nullopt;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    double ap = 0.0;
    double tp = 0.0, fp = 0.0, prev_recall = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]]) {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        const double recall = tp / static_cast<double>(n_pos);
        const double precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return ap;
}

TaskScores aggregate_scores(std::vector<TaskScore> per_task) {
    TaskScores out;
    out.per_task = std::move(per_task);
    double auc_sum = 0.0, aps_sum = 0.0;
    std::size_t defined = 0;
    for (const TaskScore& task : out.per_task) {
        if (task.defined()) {
            ++defined;
            auc_sum += *task.auc;
            aps_sum += *task.aps;
        } else {
            out.undefined_tasks.push_back(task.task_id);
        }
    }
    if (defined == 0) throw NoDefinedTasks("aggregate_scores: every task is single-class");
    out.mean_auc = auc_sum / static_cast<double>(defined);
    out.mean_aps = aps_sum / static_cast<double>(defined);
    return out;
}

std::vector<TaskScore> score_tasks(const std::vector<std::vector<double>>& scores,
                                   const std::vector<std::vector<std::uint8_t>>& labels,
                                   std::size_t n_tasks) {
    if (scores.size() != labels.size()) throw ShapeMismatch("score_tasks: row count mismatch");
    std::vector<TaskScore> out;
    out.reserve(n_tasks);
    std::vector<double> task_scores(scores.size());
    std::vector<std::uint8_t> task_labels(scores.size());
    for (std::size_t t = 0; t < n_tasks; ++t) {
        for (std::size_t i = 0; i < scores.size(); ++i) {
            task_scores[i] = scores[i][t];
            task_labels[i] = labels[i][t];
        }
        TaskScore score;
        score.task_id = t;
        for (auto l : task_labels) score.n_pos += l ? 1 : 0;
        score.n_neg = task_labels.size() - score.n_pos;
        if (score.defined()) {
            score.auc = auc(task_labels, task_scores);
            score.aps = aps(task_labels, task_scores);
        }
        out.push_back(std::move(score));
    }
    return out;
}

std::vector<EmbeddingRow> patient_embeddings(
    const std::map<std::int64_t, std::vector<std::vector<double>>>& visits_by_patient) {
    std::vector<EmbeddingRow> rows;
    rows.reserve(visits_by_patient.size());
    for (const auto& [pid, visit_vecs] : visits_by_patient) {
        if (visit_vecs.empty()) throw NoVisits("patient " + std::to_string(pid) + " has no visits");
        EmbeddingRow row;
        row.patient_id = pid;
        row.vec.assign(visit_vecs.front().size(), 0.0);
        for (const auto& v : visit_vecs) {
            if (v.size() != row.vec.size()) throw ShapeMismatch("patient_embeddings: width mismatch");
            for (std::size_t j = 0; j < v.size(); ++j) row.vec[j] += v[j];
        }
        const double inv = 1.0 / static_cast<double>(visit_vecs.size());
        for (double& x : row.vec) x *= inv;
        rows.push_back(std::move(row));
    }
    return rows;
}

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Deterministic
// sweep order; plenty for d <= a few hundred.
void jacobi_eigen(std::vector<double>& a, std::size_t n, std::vector<double>& eigvals,
                  std::vector<double>& eigvecs) {
    eigvecs.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) eigvecs[i * n + i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                const double app = a[p * n + p], aqq = a[q * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = eigvecs[k * n + p], vkq = eigvecs[k * n + q];
                    eigvecs[k * n + p] = c * vkp - s * vkq;
                    eigvecs[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    eigvals.resize(n);
    for (std::size_t i = 0; i < n; ++i) eigvals[i] = a[i * n + i];
}

}  // namespace

Pca2 pca_top2(const std::vector<std::vector<double>>& rows) {
    const std::size_t n = rows.size();
    if (n < 2) throw DegenerateData("pca_top2: need at least 2 rows");
    const std::size_t d = rows.front().size();
    for (const auto& r : rows) {
        if (r.size() != d) throw ShapeMismatch("pca_top2: ragged input");
    }

    std::vector<double> mean(d, 0.0);
    for (const auto& r : rows)
        for (std::size_t j = 0; j < d; ++j) mean[j] += r[j];
    for (double& m : mean) m /= static_cast<double>(n);

    std::vector<double> cov(d * d, 0.0);
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < d; ++i) {
            const double xi = r[i] - mean[i];
            for (std::size_t j = i; j < d; ++j) {
                cov[i * d + j] += xi * (r[j] - mean[j]);
            }
        }
    }
    const double norm = 1.0 / static_cast<double>(n - 1);
    double total_var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i; j < d; ++j) {
            cov[i * d + j] *= norm;
            cov[j * d + i] = cov[i * d + j];
        }
        total_var += cov[i * d + i];
    }
    if (total_var <= 1e-12) throw DegenerateData("pca_top2: zero variance");

    std::vector<double> eigvals, eigvecs;
    jacobi_eigen(cov, d, eigvals, eigvecs);
    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return eigvals[a] > eigvals[b]; });

    Pca2 out;
    std::array<std::vector<double>, 2> comps;
    for (std::size_t c = 0; c < 2; ++c) {
        comps[c].resize(d);
        const std::size_t col = order[c];
        for (std::size_t j = 0; j < d; ++j) comps[c][j] = eigvecs[j * d + col];
        // Largest-magnitude loading points in the positive direction.
        std::size_t arg = 0;
        for (std::size_t j = 1; j < d; ++j) {
            if (std::abs(comps[c][j]) > std::abs(comps[c][arg])) arg = j;
        }
        if (comps[c][arg] < 0.0) {
            for (double& v : comps[c]) v = -v;
        }
        out.explained_variance_ratio[c] = std::max(0.0, eigvals[col]) / total_var;
    }

    out.projections.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < 2; ++c) {
            double proj = 0.0;
            for (std::size_t j = 0; j < d; ++j) proj += (rows[i][j] - mean[j]) * comps[c][j];
            out.projections[i][c] = proj;
        }
    }
    return out;
}

double cohort_separation(const std::vector<std::array<double, 2>>& projections,
                         const std::vector<std::size_t>& group_a,
                         const std::vector<std::size_t>& group_b) {
    if (group_a.empty() || group_b.empty()) throw EmptyGroup("cohort_separation: empty group");
    auto centroid = [&](const std::vector<std::size_t>& group) {
        std::array<double, 2> c{0.0, 0.0};
        for (std::size_t i : group) {
            c[0] += projections.at(i)[0];
            c[1] += projections.at(i)[1];
        }
        c[0] /= static_cast<double>(group.size());
        c[1] /= static_cast<double>(group.size());
        return c;
    };
    // Per-coordinate RMS deviation from the group centroid.
    auto spread = [&](const std::vector<std::size_t>& group, const std::array<double, 2>& c) {
        double acc = 0.0;
        for (std::size_t i : group) {
            const double dx = projections[i][0] - c[0];
            const double dy = projections[i][1] - c[1];
            acc += dx * dx + dy * dy;
        }
        return std::sqrt(acc / (2.0 * static_cast<double>(group.size())));
    };
    const auto ca = centroid(group_a), cb = centroid(group_b);
    const double dist = std::hypot(ca[0] - cb[0], ca[1] - cb[1]);
    const double denom = 0.5 * (spread(group_a, ca) + spread(group_b, cb));
    if (denom == 0.0) {
        return dist == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    }
    return dist / denom;
}

}  // namespace hbert
