#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hbert {

// Probability that a random positive outranks a random negative, ties at
// half weight (rank-sum form). Empty optional when only one class present.
std::optional<double> auc(std::span<const std::uint8_t> labels, std::span<const double> scores);

// Average precision over descending-score thresholds; a tie group advances
// the threshold once. Empty optional when there are no positives.
std::optional<double> aps(std::span<const std::uint8_t> labels, std::span<const double> scores);

struct TaskScore {
    std::size_t task_id = 0;
    std::size_t n_pos = 0;
    std::size_t n_neg = 0;
    std::optional<double> auc;
    std::optional<double> aps;

    // A task is scoreable only when both classes appear.
    bool defined() const { return n_pos > 0 && n_neg > 0; }
};

struct TaskScores {
    std::vector<TaskScore> per_task;
    double mean_auc = 0.0;
    double mean_aps = 0.0;
    std::vector<std::size_t> undefined_tasks;
};

// Unweighted means over defined tasks; single-class tasks are listed and
// excluded. Throws NoDefinedTasks when nothing is scoreable.
TaskScores aggregate_scores(std::vector<TaskScore> per_task);

// Per-task scoring of a visit-level score matrix [n_visits, n_tasks].
std::vector<TaskScore> score_tasks(const std::vector<std::vector<double>>& scores,
                                   const std::vector<std::vector<std::uint8_t>>& labels,
                                   std::size_t n_tasks);

struct EmbeddingRow {
    std::int64_t patient_id = 0;
    std::vector<double> vec;
};

// Componentwise mean of each patient's visit embeddings.
std::vector<EmbeddingRow> patient_embeddings(
    const std::map<std::int64_t, std::vector<std::vector<double>>>& visits_by_patient);

struct Pca2 {
    std::vector<std::array<double, 2>> projections;     // one row per input row
    std::array<double, 2> explained_variance_ratio{};   // of total variance
};

// Column-center, eigendecompose the covariance, project onto the top two
// components. Sign convention: each component's largest-magnitude loading is
// positive. Throws DegenerateData when the data carries no variance.
Pca2 pca_top2(const std::vector<std::vector<double>>& rows);

// Centroid distance over the mean per-coordinate RMS within-group spread.
// Zero when the groups coincide; dimensionless and invariant under global
// rotation, translation and positive scaling.
double cohort_separation(const std::vector<std::array<double, 2>>& projections,
                         const std::vector<std::size_t>& group_a,
                         const std::vector<std::size_t>& group_b);

}  // namespace hbert
