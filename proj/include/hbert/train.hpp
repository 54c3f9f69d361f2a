#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hbert/metrics.hpp"
#include "hbert/model.hpp"
#include "hbert/synthdata.hpp"

namespace hbert {

enum class Phase { kPretrain, kFinetune };
const char* phase_name(Phase p);

struct TrainConfig {
    double learning_rate = 1e-5;
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    Phase phase = Phase::kPretrain;

    void validate() const;
};

// Adam with bias correction; moment buffers keyed by parameter name.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
};

// One update over every parameter; requires grads populated by backward().
void adam_step(Parameters& params, AdamState& state, double learning_rate);

// A visit tokenized for one input mode, labels attached.
struct TokenizedVisit {
    std::int64_t patient_id = 0;
    std::int32_t date = 0;
    std::vector<int> ids;
    std::vector<std::pair<int, int>> edges;
    std::vector<double> labels;
};

struct TokenizedDataset {
    std::vector<TokenizedVisit> visits;
    std::size_t n_tasks = 0;
    std::size_t vocab_size = 0;

    bool empty() const { return visits.empty(); }
};

TokenizedDataset tokenize_visits(const std::vector<VisitRecord>& visits,
                                 const HierarchyTree& dx_tree, const HierarchyTree& rx_tree,
                                 const Vocabulary& vocab, TokenMode mode, std::size_t n_tasks);

// Pads the selected visits into one batch; edge lists kept only when the
// model runs graph attention over them.
VisitBatch make_batch(const TokenizedDataset& data, const std::vector<std::size_t>& indices,
                      bool with_edges);

struct EpochLog {
    std::size_t epoch = 0;
    Phase phase = Phase::kPretrain;
    double loss = 0.0;
    std::optional<double> mean_auc;
    std::optional<double> mean_aps;
};

struct TrainResult {
    std::vector<EpochLog> log;
};

// Masked-token pretraining; epoch loss is the masked-position mean.
TrainResult pretrain(Parameters& params, const TokenizedDataset& train, const ModelConfig& config,
                     const TrainConfig& tconfig);

// Joint per-task binary objective over pushed-down visit labels; tracks the
// validation AUC/APS means each epoch and keeps the final-epoch weights.
TrainResult finetune(Parameters& params, const TokenizedDataset& train,
                     const TokenizedDataset& valid, const ModelConfig& config,
                     const TrainConfig& tconfig);

// Eval-mode per-visit task scores (sigmoid domain logits, left raw).
std::vector<std::vector<double>> predict_task_scores(Parameters& params,
                                                     const ModelConfig& config,
                                                     const TokenizedDataset& data,
                                                     std::size_t batch_size = 64);

// Eval-mode visit embeddings, one row per visit.
std::vector<std::vector<double>> compute_visit_embeddings(Parameters& params,
                                                          const ModelConfig& config,
                                                          const TokenizedDataset& data,
                                                          std::size_t batch_size = 64);

// AUC/APS means over a dataset's tasks (validation helper).
TaskScores evaluate_tasks(Parameters& params, const ModelConfig& config,
                          const TokenizedDataset& data);

}  // namespace hbert
