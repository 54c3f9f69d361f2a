#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hbert/checkpoint.hpp"
#include "hbert/metrics.hpp"
#include "hbert/model.hpp"
#include "hbert/synthdata.hpp"
#include "hbert/train.hpp"

namespace hbert {

// ---- generation spec (declarative fixture config) ----

struct GenerationSpec {
    std::size_t n_patients = 0;
    GenPolicy policy;
    CodeSystem dx_system, rx_system;
    std::string dx_hierarchy_path, rx_hierarchy_path;  // resolved absolute
    PhenotypeSpec background;
    std::vector<PhenotypeSpec> phenotypes;
    std::vector<CohortRule> cohorts;
};

GenerationSpec load_generation_spec(const std::string& path);

// ---- on-disk dataset ----

struct DatasetPaths {
    std::string root;
    std::string meta() const { return root + "/meta.json"; }
    std::string visits() const { return root + "/visits.jsonl"; }
    std::string vocab() const { return root + "/vocab.tsv"; }
    std::string tasks() const { return root + "/tasks.tsv"; }
    std::string dx_hierarchy() const { return root + "/ontology/dx.tsv"; }
    std::string rx_hierarchy() const { return root + "/ontology/rx.tsv"; }
    std::string split(const std::string& name) const { return root + "/splits/" + name + ".txt"; }
    std::string summary() const { return root + "/summary.json"; }
};

struct Dataset {
    HierarchyTree dx_tree, rx_tree;
    Vocabulary vocab;
    std::vector<std::string> task_names;
    std::size_t n_chapters = 0;
    std::vector<std::string> cohort_names;
    std::vector<VisitRecord> visits;                       // labels pushed down
    std::map<std::string, std::vector<std::int64_t>> splits;  // train/valid/test

    std::size_t n_tasks() const { return task_names.size(); }
    std::vector<VisitRecord> split_visits(const std::string& split) const;
};

Dataset load_dataset(const std::string& data_dir);

// ---- commands ----

struct GenDataSummary {
    std::size_t n_patients = 0;
    std::size_t n_events = 0;
    std::size_t n_visits_kept = 0;
    std::size_t n_visits_dropped = 0;
    std::map<std::string, std::size_t> cohort_counts;   // patients per cohort
    std::map<std::string, std::size_t> chapter_counts;  // patients per chapter task
    std::map<std::string, std::size_t> split_sizes;
};

GenDataSummary cmd_gen_data(const std::string& spec_path, const std::string& out_dir,
                            std::uint64_t seed);

struct TrainOverrides {
    std::optional<double> learning_rate;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> batch_size;
    std::optional<double> hidden_dropout;
    std::optional<double> attn_dropout;
    std::optional<bool> gat_residual;
};

struct TrainOutcome {
    std::string checkpoint_path;
    std::string runlog_path;
    TrainResult result;
    std::size_t trainable_params = 0;
};

// Pretraining initializes fresh weights; fine-tuning starts from the
// pretraining checkpoint of the same variant (default location under
// out_dir, or an explicit path), drops the masked-token head and adds a
// fresh task head.
TrainOutcome cmd_train(Variant variant, Phase phase, const std::string& data_dir,
                       const std::string& out_dir, std::uint64_t seed,
                       const TrainOverrides& overrides = {},
                       const std::string& init_checkpoint = "");

struct EvalOutcome {
    TaskScores scores;
    std::string metrics_path;
};

EvalOutcome cmd_evaluate(const std::string& checkpoint_path, const std::string& data_dir,
                         const std::string& out_csv, const std::string& split = "test");

struct EmbedOutcome {
    std::string embeddings_path;
    std::string pca_path;
    std::string summary_path;
    std::array<double, 2> explained_variance_ratio{};
    // separation keyed "A|B" for every cohort pair with members present
    std::map<std::string, double> separations;
    std::size_t n_patients = 0;
};

EmbedOutcome cmd_embed(const std::string& checkpoint_path, const std::string& data_dir,
                       const std::string& out_dir, const std::string& split = "test");

struct CompareRow {
    Variant variant = Variant::kHb;
    double mean_auc = 0.0;
    double mean_aps = 0.0;
    std::size_t trainable_params = 0;
    std::map<std::string, double> separations;
};

struct CompareOutcome {
    std::vector<CompareRow> rows;  // ordered by mean AUC, descending
    std::string table_path;
};

// Trains and evaluates every variant with the same budget and seed.
CompareOutcome cmd_compare(const std::vector<Variant>& variants, const std::string& data_dir,
                           const std::string& out_dir, std::uint64_t seed,
                           const TrainOverrides& pretrain_overrides = {},
                           const TrainOverrides& finetune_overrides = {});

// Formats doubles for CSV output (%.10g); empty optional -> empty field.
std::string csv_double(double v);
std::string csv_double(const std::optional<double>& v);

std::uint64_t file_digest(const std::string& path);

}  // namespace hbert
