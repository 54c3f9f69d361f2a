#include "hbert/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "hbert/errors.hpp"

namespace hbert {

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::kHb: return "HB";
        case Variant::kBerto: return "BERTO";
        case Variant::kLeafo: return "LEAFO";
        case Variant::kLeafo6: return "LEAFO6";
    }
    return "?";
}

Variant variant_from_name(const std::string& name) {
    if (name == "HB") return Variant::kHb;
    if (name == "BERTO") return Variant::kBerto;
    if (name == "LEAFO") return Variant::kLeafo;
    if (name == "LEAFO6") return Variant::kLeafo6;
    throw UsageError("unknown variant: " + name + " (expected HB, BERTO, LEAFO or LEAFO6)");
}

TokenMode token_mode_for(Variant v) {
    return (v == Variant::kHb || v == Variant::kBerto) ? TokenMode::kDecomposed
                                                       : TokenMode::kLeafOnly;
}

void ModelConfig::validate() const {
    if (d_model == 0 || d_model % n_heads != 0) {
        throw ShapeMismatch("model config: d_model must be divisible by n_heads");
    }
    if (vocab_size <= Vocabulary::kNumSpecials) {
        throw ShapeMismatch("model config: vocabulary too small");
    }
    if (variant == Variant::kLeafo6 && n_blocks != 6) {
        throw ShapeMismatch("model config: LEAFO6 uses 6 transformer blocks");
    }
}

ModelConfig ModelConfig::make(Variant v, std::size_t n_tasks, std::size_t vocab_size) {
    ModelConfig cfg;
    cfg.variant = v;
    cfg.n_blocks = v == Variant::kLeafo6 ? 6 : 4;
    cfg.n_tasks = n_tasks;
    cfg.vocab_size = vocab_size;
    return cfg;
}

Tensor& Parameters::add(const std::string& name, Tensor t) {
    auto [it, inserted] = tensors_.emplace(name, std::move(t));
    if (!inserted) throw DataError("duplicate parameter: " + name);
    return it->second;
}

Tensor& Parameters::at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw DataError("missing parameter: " + name);
    return it->second;
}

const Tensor& Parameters::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw DataError("missing parameter: " + name);
    return it->second;
}

void Parameters::erase_prefix(const std::string& prefix) {
    for (auto it = tensors_.begin(); it != tensors_.end();) {
        if (it->first.rfind(prefix, 0) == 0) {
            it = tensors_.erase(it);
        } else {
            ++it;
        }
    }
}

std::size_t Parameters::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors_) n += t.size();
    return n;
}

void init_param_tensor(Tensor& t, const std::string& name, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "init", fnv1a(name)));
    const bool is_matrix = t.shape().size() == 2;
    const bool is_gain = name.find(".gain") != std::string::npos;
    auto& data = t.data();
    for (double& v : data) {
        if (is_matrix) {
            v = rng.uniform(-0.02, 0.02);
        } else {
            v = is_gain ? 1.0 : 0.0;
        }
    }
}

Parameters init_model_params(const ModelConfig& config, std::uint64_t seed, bool with_mlm_head,
                             bool with_task_head) {
    config.validate();
    Parameters params;
    const std::size_t d = config.d_model;

    auto param = [&](const std::string& name, Shape shape) {
        Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
        init_param_tensor(t, name, seed);
        params.add(name, std::move(t));
    };

    param("embedding.table", {config.vocab_size, d});
    if (config.use_gat()) {
        for (std::size_t h = 0; h < config.gat_heads; ++h) {
            const std::string base = "gat.head" + std::to_string(h);
            param(base + ".w_src", {d, d});
            param(base + ".w_dst", {d, d});
            param(base + ".attn", {d});
        }
    }
    for (std::size_t b = 0; b < config.n_blocks; ++b) {
        const std::string base = "block" + std::to_string(b);
        for (const char* m : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"}) {
            param(base + m, {d, d});
        }
        for (const char* v : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"}) {
            param(base + v, {d});
        }
        param(base + ".ln1.gain", {d});
        param(base + ".ln1.bias", {d});
        param(base + ".ln2.gain", {d});
        param(base + ".ln2.bias", {d});
        param(base + ".ffn.w1", {d, config.ffn_hidden});
        param(base + ".ffn.b1", {config.ffn_hidden});
        param(base + ".ffn.w2", {config.ffn_hidden, d});
        param(base + ".ffn.b2", {d});
    }
    if (with_mlm_head) {
        param("mlm.w", {d, config.vocab_size});
        param("mlm.b", {config.vocab_size});
    }
    if (with_task_head) {
        param("task.w", {d, config.n_tasks});
        param("task.b", {config.n_tasks});
    }
    return params;
}

namespace {

// Dense adjacency mask from the (undirected pairs + self loops) edge list.
Mask adjacency_mask(const std::vector<std::pair<int, int>>& edges, std::size_t n) {
    Mask adj(n * n, 0);
    for (const auto& [a, b] : edges) {
        if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= n ||
            static_cast<std::size_t>(b) >= n) {
            throw ShapeMismatch("edge endpoint outside visit");
        }
        adj[static_cast<std::size_t>(a) * n + b] = 1;
        adj[static_cast<std::size_t>(b) * n + a] = 1;
    }
    for (std::size_t i = 0; i < n; ++i) {
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) any = any || adj[i * n + j];
        if (!any) throw IsolatedNode("node " + std::to_string(i) + " has no edges");
    }
    return adj;
}

}  // namespace

Tensor gat_forward(const Tensor& h, const std::vector<std::pair<int, int>>& edges,
                   const ModelConfig& config, Parameters& params, bool training, Rng& rng,
                   GatProbe* probe) {
    if (h.shape().size() != 2 || h.dim(1) != config.d_model) {
        throw ShapeMismatch("gat_forward: expected [L, d_model] input");
    }
    const std::size_t n = h.dim(0);
    const Mask adj = adjacency_mask(edges, n);
    if (probe) probe->head_alpha.clear();

    Tensor combined;
    for (std::size_t head = 0; head < config.gat_heads; ++head) {
        const std::string base = "gat.head" + std::to_string(head);
        Tensor src = matmul(h, params.at(base + ".w_src"));
        Tensor dst = matmul(h, params.at(base + ".w_dst"));
        Tensor scores = gat_scores(src, dst, params.at(base + ".attn"));
        Tensor alpha = softmax_rows(scores, &adj);
        if (probe) probe->head_alpha.push_back(alpha.data());
        alpha = dropout(alpha, config.attn_dropout, rng, training);
        Tensor out = matmul(alpha, dst);
        combined = head == 0 ? out : add(combined, out);
    }
    Tensor averaged = scale(combined, 1.0 / static_cast<double>(config.gat_heads));
    return config.gat_residual ? add(averaged, h) : averaged;
}

bool attention_order_check(const Tensor& x, const std::vector<std::pair<int, int>>& edges) {
    if (x.shape().size() != 2) throw ShapeMismatch("attention_order_check: expected 2-d features");
    const std::size_t n = x.dim(0), d = x.dim(1);
    const Mask adj = adjacency_mask(edges, n);

    // Probe head: Wsrc = Wdst = I, a = ones. Score(i, j) = sum_d lrelu(x_i + x_j).
    auto score = [&](std::size_t i, std::size_t j) {
        double e = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double t = x.data()[i * d + c] + x.data()[j * d + c];
            e += t >= 0.0 ? t : 0.2 * t;
        }
        return e;
    };

    bool comparable_pair_seen = false;
    for (std::size_t i1 = 0; i1 < n; ++i1) {
        for (std::size_t i2 = i1 + 1; i2 < n; ++i2) {
            for (std::size_t j = 0; j < n; ++j) {
                if (!adj[i1 * n + j] || !adj[i2 * n + j]) continue;
                for (std::size_t k = j + 1; k < n; ++k) {
                    if (!adj[i1 * n + k] || !adj[i2 * n + k]) continue;
                    comparable_pair_seen = true;
                    const double d1 = score(i1, j) - score(i1, k);
                    const double d2 = score(i2, j) - score(i2, k);
                    if (d1 * d2 < 0.0) return true;  // strictly opposite rankings
                }
            }
        }
    }
    // No opportunity to compare means no evidence of static attention.
    return !comparable_pair_seen;
}

namespace {

Tensor linear(const Tensor& x, Parameters& params, const std::string& w, const std::string& b) {
    return add_rowvec(matmul(x, params.at(w)), params.at(b));
}

}  // namespace

Tensor encode_visit(const VisitBatch& batch, const ModelConfig& config, Parameters& params,
                    bool training, Rng& rng, EncodeProbe* probe) {
    config.validate();
    const std::size_t B = batch.batch, L = batch.seq_len;
    if (batch.token_ids.size() != B * L || batch.pad_mask.size() != B * L ||
        batch.lengths.size() != B) {
        throw ShapeMismatch("encode_visit: inconsistent batch layout");
    }
    if (L > config.max_seq_len) throw ShapeMismatch("encode_visit: sequence too long");

    Tensor x = embedding_lookup(params.at("embedding.table"), batch.token_ids);
    x = dropout(x, config.hidden_dropout, rng, training);

    if (config.use_gat()) {
        if (batch.edges.size() != B) throw ShapeMismatch("encode_visit: edges per example");
        std::vector<Tensor> parts;
        parts.reserve(2 * B);
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t len = batch.lengths[b];
            if (len == 0) throw EmptyVisit("encode_visit: empty example");
            Tensor ex = slice_rows(x, b * L, b * L + len);
            Tensor mixed = gat_forward(ex, batch.edges[b], config, params, training, rng);
            parts.push_back(std::move(mixed));
            if (len < L) parts.push_back(slice_rows(x, b * L + len, (b + 1) * L));
        }
        x = concat_rows(parts);
    }

    for (std::size_t blk = 0; blk < config.n_blocks; ++blk) {
        const std::string base = "block" + std::to_string(blk);
        Tensor q = linear(x, params, base + ".attn.wq", base + ".attn.bq");
        Tensor k = linear(x, params, base + ".attn.wk", base + ".attn.bk");
        Tensor v = linear(x, params, base + ".attn.wv", base + ".attn.bv");
        AttnProbe* attn_probe =
            (probe && blk + 1 == config.n_blocks) ? &probe->last_block_attention : nullptr;
        Tensor ctx = attention_context(q, k, v, B, L, config.n_heads, batch.pad_mask,
                                       config.attn_dropout, &rng, training, attn_probe);
        Tensor attn_out = linear(ctx, params, base + ".attn.wo", base + ".attn.bo");
        attn_out = dropout(attn_out, config.hidden_dropout, rng, training);
        x = layer_norm(add(x, attn_out), params.at(base + ".ln1.gain"),
                       params.at(base + ".ln1.bias"));

        Tensor ff = gelu(linear(x, params, base + ".ffn.w1", base + ".ffn.b1"));
        ff = linear(ff, params, base + ".ffn.w2", base + ".ffn.b2");
        ff = dropout(ff, config.hidden_dropout, rng, training);
        x = layer_norm(add(x, ff), params.at(base + ".ln2.gain"), params.at(base + ".ln2.bias"));
    }
    return x;
}

Tensor visit_embedding(const Tensor& hidden, const VisitBatch& batch) {
    const std::size_t B = batch.batch, L = batch.seq_len;
    if (hidden.shape().size() != 2 || hidden.dim(0) != B * L) {
        throw ShapeMismatch("visit_embedding: hidden layout mismatch");
    }
    std::vector<Tensor> rows;
    rows.reserve(B);
    for (std::size_t b = 0; b < B; ++b) {
        if (batch.lengths[b] == 0) throw EmptyVisit("visit_embedding: empty example");
        Tensor ex = slice_rows(hidden, b * L, (b + 1) * L);
        Mask row_mask(batch.pad_mask.begin() + b * L, batch.pad_mask.begin() + (b + 1) * L);
        rows.push_back(mean_pool(ex, row_mask));
    }
    return concat_rows(rows);
}

MlmCorruption mlm_corrupt(std::span<const int> token_ids, std::span<const std::uint8_t> pad_mask,
                          std::size_t vocab_size, Rng& rng) {
    if (token_ids.size() != pad_mask.size()) {
        throw ShapeMismatch("mlm_corrupt: mask length mismatch");
    }
    if (vocab_size <= Vocabulary::kNumSpecials) {
        throw ShapeMismatch("mlm_corrupt: vocabulary has no maskable tokens");
    }
    MlmCorruption out;
    out.original_ids.assign(token_ids.begin(), token_ids.end());
    out.corrupted_ids = out.original_ids;
    out.loss_mask.assign(token_ids.size(), 0);
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        const int id = token_ids[i];
        if (!pad_mask[i] || id < static_cast<int>(Vocabulary::kNumSpecials)) continue;
        if (rng.uniform() >= 0.15) continue;
        out.loss_mask[i] = 1;
        const double branch = rng.uniform();
        if (branch < 0.8) {
            out.corrupted_ids[i] = Vocabulary::kMask;
        } else if (branch < 0.9) {
            out.corrupted_ids[i] = static_cast<int>(
                Vocabulary::kNumSpecials +
                rng.uniform_index(vocab_size - Vocabulary::kNumSpecials));
        }  // else: left as is
    }
    return out;
}

Tensor mlm_logits(const Tensor& hidden, Parameters& params) {
    return add_rowvec(matmul(hidden, params.at("mlm.w")), params.at("mlm.b"));
}

Tensor task_logits(const Tensor& visit_emb, Parameters& params) {
    return add_rowvec(matmul(visit_emb, params.at("task.w")), params.at("task.b"));
}

}  // namespace hbert
