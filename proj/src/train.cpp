#include "hbert/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hbert/errors.hpp"

namespace hbert {

const char* phase_name(Phase p) { return p == Phase::kPretrain ? "pretrain" : "finetune"; }

void TrainConfig::validate() const {
    if (learning_rate <= 0.0) throw DataError("train config: learning rate must be > 0");
    if (epochs < 1) throw DataError("train config: epochs must be >= 1");
    if (batch_size < 1) throw DataError("train config: batch size must be >= 1");
}

void adam_step(Parameters& params, AdamState& state, double learning_rate) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (auto& [name, tensor] : params.map()) {
        auto& grad = tensor.node()->grad;
        if (grad.size() != tensor.size()) {
            throw MissingGrad("adam_step: no gradient for " + name);
        }
        auto& [m, v] = state.moments[name];
        if (m.size() != tensor.size()) {
            m.assign(tensor.size(), 0.0);
            v.assign(tensor.size(), 0.0);
        }
        auto& data = tensor.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            data[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

TokenizedDataset tokenize_visits(const std::vector<VisitRecord>& visits,
                                 const HierarchyTree& dx_tree, const HierarchyTree& rx_tree,
                                 const Vocabulary& vocab, TokenMode mode, std::size_t n_tasks) {
    TokenizedDataset data;
    data.n_tasks = n_tasks;
    data.vocab_size = vocab.size();
    data.visits.reserve(visits.size());
    for (const VisitRecord& visit : visits) {
        std::vector<CodeRef> codes;
        codes.reserve(visit.dx_codes.size() + visit.rx_codes.size());
        for (const auto& c : visit.dx_codes) codes.push_back({SystemId::kDiagnosis, c});
        for (const auto& c : visit.rx_codes) codes.push_back({SystemId::kPrescription, c});
        VisitTokens tokens = visit_token_set(codes, dx_tree, rx_tree, vocab, mode);

        TokenizedVisit tv;
        tv.patient_id = visit.patient_id;
        tv.date = visit.date;
        tv.ids = std::move(tokens.ids);
        tv.edges = std::move(tokens.edges);
        tv.labels.reserve(n_tasks);
        if (visit.labels.size() != n_tasks) {
            throw TaskCountMismatch("visit labels: " + std::to_string(visit.labels.size()) +
                                    " bits for " + std::to_string(n_tasks) + " tasks");
        }
        for (auto bit : visit.labels) tv.labels.push_back(bit ? 1.0 : 0.0);
        data.visits.push_back(std::move(tv));
    }
    return data;
}

VisitBatch make_batch(const TokenizedDataset& data, const std::vector<std::size_t>& indices,
                      bool with_edges) {
    VisitBatch batch;
    batch.batch = indices.size();
    batch.n_tasks = data.n_tasks;
    std::size_t max_len = 1;
    for (std::size_t idx : indices) {
        max_len = std::max(max_len, data.visits[idx].ids.size());
    }
    batch.seq_len = max_len;
    batch.token_ids.assign(batch.batch * max_len, Vocabulary::kPad);
    batch.pad_mask.assign(batch.batch * max_len, 0);
    batch.lengths.resize(batch.batch);
    batch.labels.assign(batch.batch * data.n_tasks, 0.0);
    if (with_edges) batch.edges.resize(batch.batch);
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const TokenizedVisit& tv = data.visits[indices[b]];
        batch.lengths[b] = tv.ids.size();
        for (std::size_t i = 0; i < tv.ids.size(); ++i) {
            batch.token_ids[b * max_len + i] = tv.ids[i];
            batch.pad_mask[b * max_len + i] = 1;
        }
        if (with_edges) batch.edges[b] = tv.edges;
        for (std::size_t t = 0; t < tv.labels.size(); ++t) {
            batch.labels[b * data.n_tasks + t] = tv.labels[t];
        }
    }
    return batch;
}

namespace {

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

}  // namespace

TrainResult pretrain(Parameters& params, const TokenizedDataset& train, const ModelConfig& config,
                     const TrainConfig& tconfig) {
    tconfig.validate();
    if (train.empty()) throw EmptyDataset("pretrain: no visits");
    AdamState adam;
    TrainResult result;
    const bool with_edges = config.use_gat();
    for (std::size_t epoch = 0; epoch < tconfig.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(tconfig.seed, "shuffle.pretrain", epoch));
        const auto batches = epoch_batches(train.visits.size(), tconfig.batch_size, shuffle_rng);
        double loss_sum = 0.0;
        std::size_t masked_total = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            VisitBatch batch = make_batch(train, batches[bi], with_edges);
            Rng mask_rng(derive_seed(tconfig.seed, "mask", epoch, bi));
            Rng drop_rng(derive_seed(tconfig.seed, "dropout.pretrain", epoch, bi));
            MlmCorruption corruption =
                mlm_corrupt(batch.token_ids, batch.pad_mask, config.vocab_size, mask_rng);
            std::size_t masked = 0;
            for (auto m : corruption.loss_mask) masked += m ? 1 : 0;
            if (masked == 0) continue;  // nothing to learn from this batch

            batch.token_ids = corruption.corrupted_ids;
            Tensor hidden = encode_visit(batch, config, params, /*training=*/true, drop_rng);
            Tensor logits = mlm_logits(hidden, params);
            Tensor loss = masked_cross_entropy(logits, corruption.original_ids,
                                               corruption.loss_mask);
            loss_sum += loss.item() * static_cast<double>(masked);
            masked_total += masked;
            backward(loss);
            adam_step(params, adam, tconfig.learning_rate);
            for (auto& [name, t] : params.map()) t.zero_grad();
        }
        EpochLog log;
        log.epoch = epoch;
        log.phase = Phase::kPretrain;
        log.loss = masked_total ? loss_sum / static_cast<double>(masked_total) : 0.0;
        result.log.push_back(log);
    }
    return result;
}

TrainResult finetune(Parameters& params, const TokenizedDataset& train,
                     const TokenizedDataset& valid, const ModelConfig& config,
                     const TrainConfig& tconfig) {
    tconfig.validate();
    if (train.empty()) throw EmptyDataset("finetune: no visits");
    if (train.n_tasks != config.n_tasks) {
        throw TaskCountMismatch("finetune: dataset has " + std::to_string(train.n_tasks) +
                                " tasks, model expects " + std::to_string(config.n_tasks));
    }
    AdamState adam;
    TrainResult result;
    const bool with_edges = config.use_gat();
    for (std::size_t epoch = 0; epoch < tconfig.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(tconfig.seed, "shuffle.finetune", epoch));
        const auto batches = epoch_batches(train.visits.size(), tconfig.batch_size, shuffle_rng);
        double loss_sum = 0.0;
        std::size_t example_total = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            VisitBatch batch = make_batch(train, batches[bi], with_edges);
            Rng drop_rng(derive_seed(tconfig.seed, "dropout.finetune", epoch, bi));
            Tensor hidden = encode_visit(batch, config, params, /*training=*/true, drop_rng);
            Tensor pooled = visit_embedding(hidden, batch);
            Tensor logits = task_logits(pooled, params);
            Tensor targets = Tensor::from_data({batch.batch, batch.n_tasks}, batch.labels);
            Tensor loss = bce_with_logits(logits, targets);
            loss_sum += loss.item() * static_cast<double>(batch.batch);
            example_total += batch.batch;
            backward(loss);
            adam_step(params, adam, tconfig.learning_rate);
            for (auto& [name, t] : params.map()) t.zero_grad();
        }
        EpochLog log;
        log.epoch = epoch;
        log.phase = Phase::kFinetune;
        log.loss = loss_sum / static_cast<double>(example_total);
        if (!valid.empty()) {
            const TaskScores scores = evaluate_tasks(params, config, valid);
            log.mean_auc = scores.mean_auc;
            log.mean_aps = scores.mean_aps;
        }
        result.log.push_back(log);
    }
    return result;
}

std::vector<std::vector<double>> predict_task_scores(Parameters& params,
                                                     const ModelConfig& config,
                                                     const TokenizedDataset& data,
                                                     std::size_t batch_size) {
    NoGradGuard no_grad;
    Rng unused_rng(0);
    std::vector<std::vector<double>> out;
    out.reserve(data.visits.size());
    const bool with_edges = config.use_gat();
    for (std::size_t start = 0; start < data.visits.size(); start += batch_size) {
        const std::size_t end = std::min(data.visits.size(), start + batch_size);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        VisitBatch batch = make_batch(data, idx, with_edges);
        Tensor hidden = encode_visit(batch, config, params, /*training=*/false, unused_rng);
        Tensor pooled = visit_embedding(hidden, batch);
        Tensor logits = task_logits(pooled, params);
        for (std::size_t b = 0; b < batch.batch; ++b) {
            out.emplace_back(logits.data().begin() + b * data.n_tasks,
                             logits.data().begin() + (b + 1) * data.n_tasks);
        }
    }
    return out;
}

std::vector<std::vector<double>> compute_visit_embeddings(Parameters& params,
                                                          const ModelConfig& config,
                                                          const TokenizedDataset& data,
                                                          std::size_t batch_size) {
    NoGradGuard no_grad;
    Rng unused_rng(0);
    std::vector<std::vector<double>> out;
    out.reserve(data.visits.size());
    const bool with_edges = config.use_gat();
    for (std::size_t start = 0; start < data.visits.size(); start += batch_size) {
        const std::size_t end = std::min(data.visits.size(), start + batch_size);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        VisitBatch batch = make_batch(data, idx, with_edges);
        Tensor hidden = encode_visit(batch, config, params, /*training=*/false, unused_rng);
        Tensor pooled = visit_embedding(hidden, batch);
        const std::size_t d = config.d_model;
        for (std::size_t b = 0; b < batch.batch; ++b) {
            out.emplace_back(pooled.data().begin() + b * d, pooled.data().begin() + (b + 1) * d);
        }
    }
    return out;
}

TaskScores evaluate_tasks(Parameters& params, const ModelConfig& config,
                          const TokenizedDataset& data) {
    const auto scores = predict_task_scores(params, config, data);
    std::vector<std::vector<std::uint8_t>> labels;
    labels.reserve(data.visits.size());
    for (const auto& visit : data.visits) {
        std::vector<std::uint8_t> bits;
        bits.reserve(visit.labels.size());
        for (double l : visit.labels) bits.push_back(l > 0.5 ? 1 : 0);
        labels.push_back(std::move(bits));
    }
    return aggregate_scores(score_tasks(scores, labels, data.n_tasks));
}

}  // namespace hbert
