#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hbert/ontology.hpp"
#include "hbert/tensor.hpp"

namespace hbert {

enum class Variant { kHb, kBerto, kLeafo, kLeafo6 };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

// HB and BERTO ingest full semantic decompositions; the LEAFO family ingests
// truncated leaf tokens only.
TokenMode token_mode_for(Variant v);

struct ModelConfig {
    Variant variant = Variant::kHb;
    std::size_t d_model = 64;
    std::size_t n_blocks = 4;  // 6 for LEAFO6
    std::size_t n_heads = 8;
    std::size_t ffn_hidden = 128;
    double hidden_dropout = 0.4;
    double attn_dropout = 0.1;
    std::size_t gat_heads = 8;
    bool gat_residual = false;  // replace embeddings with GAT output by default
    std::size_t n_tasks = 0;
    std::size_t vocab_size = 0;
    std::size_t max_seq_len = 64;

    bool use_gat() const { return variant == Variant::kHb; }
    void validate() const;

    static ModelConfig make(Variant v, std::size_t n_tasks, std::size_t vocab_size);
};

// Named parameter tensors with deterministic (sorted) iteration order.
class Parameters {
public:
    Tensor& add(const std::string& name, Tensor t);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const { return tensors_.count(name) != 0; }
    void erase_prefix(const std::string& prefix);
    std::map<std::string, Tensor>& map() { return tensors_; }
    const std::map<std::string, Tensor>& map() const { return tensors_; }
    std::size_t scalar_count() const;

private:
    std::map<std::string, Tensor> tensors_;
};

// Fresh parameters: matrices ~ U(-0.02, 0.02), biases zero, layer-norm
// gain one. Each tensor draws from its own name-derived stream.
Parameters init_model_params(const ModelConfig& config, std::uint64_t seed, bool with_mlm_head,
                             bool with_task_head);
void init_param_tensor(Tensor& t, const std::string& name, std::uint64_t seed);

// Padded batch of visits. Real tokens come first in every row.
struct VisitBatch {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    std::size_t n_tasks = 0;
    std::vector<int> token_ids;                            // batch * seq_len
    Mask pad_mask;                                         // 1 = real token
    std::vector<std::size_t> lengths;                      // real tokens per example
    std::vector<std::vector<std::pair<int, int>>> edges;   // per example; empty unless GAT
    std::vector<double> labels;                            // batch * n_tasks
};

struct GatProbe {
    // Per head: dense [L, L] attention matrix (off-graph entries zero).
    std::vector<std::vector<double>> head_alpha;
};

// One layer of multi-head graph attention over the visit subgraph.
// Per head: e_ij = a_h . lrelu(Wsrc_h x_i + Wdst_h x_j) for j in N(i),
// alpha = softmax over the neighborhood, out_i = sum_j alpha_ij Wdst_h x_j,
// heads averaged. Edges must include self-loops.
Tensor gat_forward(const Tensor& h, const std::vector<std::pair<int, int>>& edges,
                   const ModelConfig& config, Parameters& params, bool training, Rng& rng,
                   GatProbe* probe = nullptr);

// Probes whether the scorer's rankings can depend on the query, which holds
// when the nonlinearity is applied before the attention-vector dot product.
// Uses a fixed probe head (identity transforms, all-ones attention vector)
// over the given features and edges. Returns true if two queries rank a
// shared neighbor pair in strictly opposite orders, or vacuously when no
// query pair shares two neighbors; a scorer whose nonlinearity sits outside
// the dot product can never produce opposite rankings.
bool attention_order_check(const Tensor& x, const std::vector<std::pair<int, int>>& edges);

struct EncodeProbe {
    AttnProbe last_block_attention;  // transformer attention of the final block
};

// Embedding lookup, optional graph attention (HB), then the transformer
// stack. No position signal anywhere: a visit is an unordered set.
// Returns hidden states [batch*seq_len, d_model].
Tensor encode_visit(const VisitBatch& batch, const ModelConfig& config, Parameters& params,
                    bool training, Rng& rng, EncodeProbe* probe = nullptr);

// Mean over unmasked final hidden states, per example -> [batch, d_model].
Tensor visit_embedding(const Tensor& hidden, const VisitBatch& batch);

struct MlmCorruption {
    std::vector<int> corrupted_ids;
    Mask loss_mask;
    std::vector<int> original_ids;
};

// BERT-style corruption: each non-special position is selected with
// p = 0.15; of the selected, 80% become [MASK], 10% a random non-special
// token, 10% stay unchanged. PAD/MASK/UNK positions are never selected.
MlmCorruption mlm_corrupt(std::span<const int> token_ids, std::span<const std::uint8_t> pad_mask,
                          std::size_t vocab_size, Rng& rng);

Tensor mlm_logits(const Tensor& hidden, Parameters& params);       // [n, vocab]
Tensor task_logits(const Tensor& visit_emb, Parameters& params);   // [batch, n_tasks]

}  // namespace hbert
