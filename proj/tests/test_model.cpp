#include <cmath>
#include <numeric>

#include "doctest.h"
#include "hbert/errors.hpp"
#include "hbert/model.hpp"
#include "test_helpers.hpp"

using namespace hbert;
using test_util::check_gradients;
using test_util::random_tensor;

namespace {

ModelConfig tiny_config(Variant v, std::size_t vocab = 12, std::size_t tasks = 3) {
    ModelConfig cfg = ModelConfig::make(v, tasks, vocab);
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.gat_heads = 2;
    cfg.n_blocks = v == Variant::kLeafo6 ? 6 : 2;
    cfg.ffn_hidden = 16;
    cfg.hidden_dropout = 0.0;
    cfg.attn_dropout = 0.0;
    if (v == Variant::kLeafo6) cfg.n_blocks = 6;
    return cfg;
}

std::vector<std::pair<int, int>> chain_edges(int n) {
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
    for (int i = 0; i < n; ++i) edges.emplace_back(i, i);
    return edges;
}

// Dense reference for one graph-attention pass, written with raw loops.
std::vector<double> dense_gat_oracle(const Tensor& h, const std::vector<std::pair<int, int>>& edges,
                                     const ModelConfig& cfg, Parameters& params) {
    const std::size_t n = h.dim(0), d = h.dim(1);
    std::vector<std::uint8_t> adj(n * n, 0);
    for (auto [a, b] : edges) {
        adj[a * n + b] = 1;
        adj[b * n + a] = 1;
    }
    std::vector<double> out(n * d, 0.0);
    for (std::size_t head = 0; head < cfg.gat_heads; ++head) {
        const std::string base = "gat.head" + std::to_string(head);
        const auto& wsrc = params.at(base + ".w_src").data();
        const auto& wdst = params.at(base + ".w_dst").data();
        const auto& attn = params.at(base + ".attn").data();
        std::vector<double> src(n * d, 0.0), dst(n * d, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                for (std::size_t k = 0; k < d; ++k) {
                    src[i * d + j] += h.data()[i * d + k] * wsrc[k * d + j];
                    dst[i * d + j] += h.data()[i * d + k] * wdst[k * d + j];
                }
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> scores(n, 0.0);
            double mx = -1e300;
            for (std::size_t j = 0; j < n; ++j) {
                if (!adj[i * n + j]) continue;
                double e = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    const double t = src[i * d + c] + dst[j * d + c];
                    e += attn[c] * (t >= 0.0 ? t : 0.2 * t);
                }
                scores[j] = e;
                mx = std::max(mx, e);
            }
            double denom = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (adj[i * n + j]) denom += std::exp(scores[j] - mx);
            }
            for (std::size_t j = 0; j < n; ++j) {
                if (!adj[i * n + j]) continue;
                const double alpha = std::exp(scores[j] - mx) / denom;
                for (std::size_t c = 0; c < d; ++c) {
                    out[i * d + c] += alpha * dst[j * d + c] / static_cast<double>(cfg.gat_heads);
                }
            }
        }
    }
    return out;
}

VisitBatch single_visit_batch(const std::vector<int>& ids,
                              const std::vector<std::pair<int, int>>& edges,
                              std::size_t n_tasks) {
    VisitBatch batch;
    batch.batch = 1;
    batch.seq_len = ids.size();
    batch.n_tasks = n_tasks;
    batch.token_ids = ids;
    batch.pad_mask.assign(ids.size(), 1);
    batch.lengths = {ids.size()};
    batch.edges = {edges};
    batch.labels.assign(n_tasks, 0.0);
    return batch;
}

}  // namespace

TEST_CASE("gat_forward on a single self-looped node averages the value transforms") {
    ModelConfig cfg = tiny_config(Variant::kHb);
    Parameters params = init_model_params(cfg, 1, false, false);
    Rng rng(40), drng(41);
    Tensor h = random_tensor({1, cfg.d_model}, rng);
    Tensor out = gat_forward(h, {{0, 0}}, cfg, params, false, drng);
    std::vector<double> want(cfg.d_model, 0.0);
    for (std::size_t head = 0; head < cfg.gat_heads; ++head) {
        const auto& w = params.at("gat.head" + std::to_string(head) + ".w_dst").data();
        for (std::size_t j = 0; j < cfg.d_model; ++j) {
            for (std::size_t k = 0; k < cfg.d_model; ++k) {
                want[j] += h.data()[k] * w[k * cfg.d_model + j] /
                           static_cast<double>(cfg.gat_heads);
            }
        }
    }
    for (std::size_t j = 0; j < cfg.d_model; ++j) {
        CHECK(out.data()[j] == doctest::Approx(want[j]).epsilon(1e-12));
    }
}

TEST_CASE("gat_forward is local: disconnected components do not interact") {
    ModelConfig cfg = tiny_config(Variant::kHb);
    Parameters params = init_model_params(cfg, 2, false, false);
    Rng rng(42);
    Tensor h = random_tensor({4, cfg.d_model}, rng);
    // Components {0,1} and {2,3}.
    std::vector<std::pair<int, int>> edges = {{0, 1}, {2, 3}, {0, 0}, {1, 1}, {2, 2}, {3, 3}};
    Rng d1(1);
    Tensor base = gat_forward(h, edges, cfg, params, false, d1);

    Tensor bumped = Tensor::from_data(h.shape(), h.data());
    bumped.data()[0] += 0.5;  // perturb component A only
    Rng d2(1);
    Tensor moved = gat_forward(bumped, edges, cfg, params, false, d2);
    for (std::size_t i = 2 * cfg.d_model; i < 4 * cfg.d_model; ++i) {
        CHECK(base.data()[i] == moved.data()[i]);  // component B untouched
    }
    bool changed = false;
    for (std::size_t i = 0; i < 2 * cfg.d_model; ++i) {
        changed = changed || base.data()[i] != moved.data()[i];
    }
    CHECK(changed);
}

TEST_CASE("gat_forward matches the dense masked-softmax oracle on a chain") {
    ModelConfig cfg = tiny_config(Variant::kHb);
    Parameters params = init_model_params(cfg, 3, false, false);
    Rng rng(43), drng(44);
    Tensor h = random_tensor({4, cfg.d_model}, rng);
    Tensor out = gat_forward(h, chain_edges(4), cfg, params, false, drng);
    const auto want = dense_gat_oracle(h, chain_edges(4), cfg, params);
    for (std::size_t i = 0; i < want.size(); ++i) {
        CHECK(std::abs(out.data()[i] - want[i]) < 1e-10);
    }
}

TEST_CASE("gat attention rows sum to one over each neighborhood") {
    ModelConfig cfg = tiny_config(Variant::kHb);
    Parameters params = init_model_params(cfg, 4, false, false);
    Rng rng(45), drng(46);
    Tensor h = random_tensor({5, cfg.d_model}, rng);
    auto edges = chain_edges(5);
    GatProbe probe;
    gat_forward(h, edges, cfg, params, false, drng, &probe);
    REQUIRE(probe.head_alpha.size() == cfg.gat_heads);
    for (const auto& alpha : probe.head_alpha) {
        for (std::size_t i = 0; i < 5; ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < 5; ++j) total += alpha[i * 5 + j];
            CHECK(std::abs(total - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("gat_forward rejects isolated nodes") {
    ModelConfig cfg = tiny_config(Variant::kHb);
    Parameters params = init_model_params(cfg, 5, false, false);
    Rng rng(47), drng(48);
    Tensor h = random_tensor({3, cfg.d_model}, rng);
    // Node 2 has no edge at all.
    CHECK_THROWS_AS(gat_forward(h, {{0, 1}, {0, 0}, {1, 1}}, cfg, params, false, drng),
                    IsolatedNode);
}

TEST_CASE("gat_forward gradient flows through scores and messages") {
    ModelConfig cfg = tiny_config(Variant::kHb);
    Parameters params = init_model_params(cfg, 6, false, false);
    Rng rng(49);
    Tensor h = random_tensor({4, cfg.d_model}, rng, -1, 1, true);
    Tensor w = random_tensor({4, cfg.d_model}, rng);
    auto edges = chain_edges(4);
    std::vector<Tensor> inputs = {h, params.at("gat.head0.w_src"), params.at("gat.head0.w_dst"),
                                  params.at("gat.head0.attn")};
    auto loss = [&] {
        Rng drng(50);
        return sum(mul(gat_forward(h, edges, cfg, params, false, drng), w));
    };
    auto res = check_gradients(loss, inputs, 14);
    CHECK_MESSAGE(res.ok, res.detail);
}

TEST_CASE("attention_order_check detects query-dependent rankings") {
    // Two queries (rows 0, 1) sharing three neighbors (rows 2, 3, 4).
    Tensor x = Tensor::zeros({5, 2});
    x.data() = {4.0, 0.0,   // query A
                0.0, 4.0,   // query B
                1.0, -2.0,  // neighbor with mass on the first axis
                -2.0, 1.0,  // neighbor with mass on the second axis
                0.0, 0.0};
    std::vector<std::pair<int, int>> edges = {{0, 2}, {0, 3}, {0, 4}, {1, 2}, {1, 3}, {1, 4},
                                              {0, 0}, {1, 1}, {2, 2}, {3, 3}, {4, 4}};
    CHECK(attention_order_check(x, edges));

    // Static-scorer oracle: with the nonlinearity outside the pairwise sum,
    // score(i, j) = lrelu(u_i) + lrelu(w_j) and every query ranks neighbors
    // by w_j alone, so opposite rankings are impossible.
    auto static_score = [&](int i, int j) {
        auto part = [&](int row) {
            double s = 0.0;
            for (int c = 0; c < 2; ++c) s += x.data()[row * 2 + c];
            return s >= 0.0 ? s : 0.2 * s;
        };
        return part(i) + part(j);
    };
    for (int j : {2, 3, 4}) {
        for (int k : {2, 3, 4}) {
            const double d0 = static_score(0, j) - static_score(0, k);
            const double d1 = static_score(1, j) - static_score(1, k);
            CHECK(d0 * d1 >= 0.0);  // rankings agree for every query pair
        }
    }
}

TEST_CASE("attention_order_check edge cases") {
    // Identical neighbor features: scores tie, no query dependence to find.
    Tensor same = Tensor::full({4, 3}, 0.5);
    std::vector<std::pair<int, int>> edges = {{0, 2}, {0, 3}, {1, 2}, {1, 3},
                                              {0, 0}, {1, 1}, {2, 2}, {3, 3}};
    CHECK_FALSE(attention_order_check(same, edges));

    // A single neighbor per query leaves nothing to rank: vacuously true.
    Tensor two = Tensor::full({2, 3}, 0.25);
    CHECK(attention_order_check(two, {{0, 0}, {1, 1}}));
}

TEST_CASE("identical neighbor features give uniform attention") {
    ModelConfig cfg = tiny_config(Variant::kHb);
    Parameters params = init_model_params(cfg, 7, false, false);
    Tensor h = Tensor::full({4, cfg.d_model}, 0.3);
    std::vector<std::pair<int, int>> edges = chain_edges(4);
    GatProbe probe;
    Rng drng(51);
    gat_forward(h, edges, cfg, params, false, drng, &probe);
    for (const auto& alpha : probe.head_alpha) {
        for (std::size_t i = 0; i < 4; ++i) {
            std::size_t degree = 0;
            for (std::size_t j = 0; j < 4; ++j) degree += alpha[i * 4 + j] > 0.0 ? 1 : 0;
            for (std::size_t j = 0; j < 4; ++j) {
                if (alpha[i * 4 + j] > 0.0) {
                    CHECK(alpha[i * 4 + j] ==
                          doctest::Approx(1.0 / static_cast<double>(degree)).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("encode_visit output shape is [batch*seq, d_model] for every variant") {
    for (Variant v : {Variant::kHb, Variant::kBerto, Variant::kLeafo, Variant::kLeafo6}) {
        ModelConfig cfg = tiny_config(v);
        Parameters params = init_model_params(cfg, 8, false, false);
        VisitBatch batch = single_visit_batch({3, 4, 5}, chain_edges(3), cfg.n_tasks);
        if (!cfg.use_gat()) batch.edges.clear(), batch.edges.resize(1);
        Rng drng(52);
        Tensor out = encode_visit(batch, cfg, params, false, drng);
        CHECK(out.shape() == Shape{3, cfg.d_model});
    }
}

TEST_CASE("encode_visit is permutation-equivariant") {
    ModelConfig cfg = tiny_config(Variant::kHb);
    Parameters params = init_model_params(cfg, 9, false, false);
    const std::vector<int> ids = {3, 4, 5, 6};
    const auto edges = chain_edges(4);
    Rng d1(1);
    Tensor base = encode_visit(single_visit_batch(ids, edges, cfg.n_tasks), cfg, params, false, d1);

    // Reverse the tokens and relabel the edges accordingly.
    const std::vector<int> perm = {3, 2, 1, 0};
    std::vector<int> perm_ids(4);
    for (int i = 0; i < 4; ++i) perm_ids[perm[i]] = ids[i];
    std::vector<std::pair<int, int>> perm_edges;
    for (auto [a, b] : edges) perm_edges.emplace_back(perm[a], perm[b]);
    Rng d2(1);
    Tensor moved =
        encode_visit(single_visit_batch(perm_ids, perm_edges, cfg.n_tasks), cfg, params, false, d2);

    for (int i = 0; i < 4; ++i) {
        for (std::size_t c = 0; c < cfg.d_model; ++c) {
            CHECK(base.data()[i * cfg.d_model + c] ==
                  doctest::Approx(moved.data()[perm[i] * cfg.d_model + c]).epsilon(1e-12));
        }
    }
}

TEST_CASE("HB with a passthrough graph layer reproduces BERTO") {
    ModelConfig hb = tiny_config(Variant::kHb);
    ModelConfig berto = tiny_config(Variant::kBerto);
    // Name-keyed init streams make the shared tensors identical.
    Parameters hb_params = init_model_params(hb, 123, false, false);
    Parameters berto_params = init_model_params(berto, 123, false, false);
    // Passthrough: self-loops only, message transform = identity.
    for (std::size_t head = 0; head < hb.gat_heads; ++head) {
        auto& w = hb_params.at("gat.head" + std::to_string(head) + ".w_dst");
        std::fill(w.data().begin(), w.data().end(), 0.0);
        for (std::size_t i = 0; i < hb.d_model; ++i) w.data()[i * hb.d_model + i] = 1.0;
    }
    std::vector<std::pair<int, int>> self_loops = {{0, 0}, {1, 1}, {2, 2}};
    VisitBatch batch = single_visit_batch({4, 6, 8}, self_loops, hb.n_tasks);
    Rng d1(1), d2(1);
    Tensor hb_out = encode_visit(batch, hb, hb_params, false, d1);
    VisitBatch plain = batch;
    plain.edges.assign(1, {});
    Tensor berto_out = encode_visit(plain, berto, berto_params, false, d2);
    REQUIRE(hb_out.size() == berto_out.size());
    for (std::size_t i = 0; i < hb_out.size(); ++i) {
        CHECK(std::abs(hb_out.data()[i] - berto_out.data()[i]) < 1e-10);
    }
}

TEST_CASE("transformer attention never touches PAD and eval mode is deterministic") {
    ModelConfig cfg = tiny_config(Variant::kBerto);
    Parameters params = init_model_params(cfg, 10, false, false);
    VisitBatch batch;
    batch.batch = 2;
    batch.seq_len = 4;
    batch.n_tasks = cfg.n_tasks;
    batch.token_ids = {3, 4, 5, 0, 6, 7, 0, 0};
    batch.pad_mask = {1, 1, 1, 0, 1, 1, 0, 0};
    batch.lengths = {3, 2};
    batch.labels.assign(2 * cfg.n_tasks, 0.0);

    EncodeProbe probe;
    Rng d1(1);
    Tensor a = encode_visit(batch, cfg, params, false, d1, &probe);
    Rng d2(9);  // eval mode ignores the dropout stream
    Tensor b = encode_visit(batch, cfg, params, false, d2);
    CHECK(a.data() == b.data());

    const auto& attn = probe.last_block_attention;
    REQUIRE(attn.alpha.size() == 2 * cfg.n_heads * 4 * 4);
    for (std::size_t bi = 0; bi < 2; ++bi) {
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            for (std::size_t q = 0; q < 4; ++q) {
                for (std::size_t k = 0; k < 4; ++k) {
                    if (!batch.pad_mask[bi * 4 + k]) {
                        CHECK(probe.last_block_attention.at(bi, h, q, k) == 0.0);
                    }
                }
            }
        }
    }
}

TEST_CASE("visit_embedding is the masked mean of hidden rows") {
    Rng rng(53);
    VisitBatch batch;
    batch.batch = 2;
    batch.seq_len = 3;
    batch.n_tasks = 1;
    batch.token_ids = {3, 4, 5, 6, 0, 0};
    batch.pad_mask = {1, 1, 1, 1, 0, 0};
    batch.lengths = {3, 1};
    batch.labels = {0.0, 0.0};
    Tensor hidden = random_tensor({6, 4}, rng);
    Tensor pooled = visit_embedding(hidden, batch);
    REQUIRE(pooled.shape() == Shape{2, 4});
    for (std::size_t c = 0; c < 4; ++c) {
        const double want0 =
            (hidden.data()[0 * 4 + c] + hidden.data()[1 * 4 + c] + hidden.data()[2 * 4 + c]) / 3.0;
        CHECK(std::abs(pooled.data()[c] - want0) < 1e-12);
        // Single-token example: embedding equals that token's hidden state.
        CHECK(pooled.data()[4 + c] == hidden.data()[3 * 4 + c]);
    }

    // Duplicated rows pool to the same embedding as the single row.
    VisitBatch dup;
    dup.batch = 1;
    dup.seq_len = 2;
    dup.n_tasks = 1;
    dup.token_ids = {3, 3};
    dup.pad_mask = {1, 1};
    dup.lengths = {2};
    dup.labels = {0.0};
    Tensor row = random_tensor({1, 4}, rng);
    Tensor twice = Tensor::zeros({2, 4});
    for (int r = 0; r < 2; ++r) {
        for (std::size_t c = 0; c < 4; ++c) twice.data()[r * 4 + c] = row.data()[c];
    }
    Tensor same = visit_embedding(twice, dup);
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(same.data()[c] == doctest::Approx(row.data()[c]).epsilon(1e-12));
    }
}

TEST_CASE("mlm_corrupt skips specials and is reproducible") {
    std::vector<int> all_pad(32, Vocabulary::kPad);
    Mask pad_mask(32, 0);
    Rng rng(54);
    MlmCorruption none = mlm_corrupt(all_pad, pad_mask, 20, rng);
    for (auto m : none.loss_mask) CHECK(m == 0);
    CHECK(none.corrupted_ids == all_pad);

    std::vector<int> ids(2000);
    Mask mask(2000, 1);
    Rng fill(55);
    for (auto& id : ids) id = 3 + static_cast<int>(fill.uniform_index(17));
    Rng c1(777), c2(777);
    MlmCorruption a = mlm_corrupt(ids, mask, 20, c1);
    MlmCorruption b = mlm_corrupt(ids, mask, 20, c2);
    CHECK(a.corrupted_ids == b.corrupted_ids);
    CHECK(a.loss_mask == b.loss_mask);
    CHECK(a.original_ids == ids);

    // Corrupted ids never become PAD or land outside the vocabulary.
    std::size_t masked = 0, changed = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        CHECK(a.corrupted_ids[i] >= 0);
        CHECK(a.corrupted_ids[i] < 20);
        CHECK(a.corrupted_ids[i] != Vocabulary::kPad);
        if (a.loss_mask[i]) ++masked;
        if (!a.loss_mask[i]) CHECK(a.corrupted_ids[i] == ids[i]);
        if (a.loss_mask[i] && a.corrupted_ids[i] == Vocabulary::kMask) ++changed;
    }
    CHECK(masked > 200);  // ~300 expected of 2000
    CHECK(changed > masked / 2);  // ~80% of selected become [MASK]
}

TEST_CASE("head shapes, zero weights and parameter counts") {
    ModelConfig cfg = tiny_config(Variant::kBerto, 12, 5);
    Parameters params = init_model_params(cfg, 11, true, true);
    Rng rng(56), drng(57);
    VisitBatch batch = single_visit_batch({3, 4}, {}, cfg.n_tasks);
    batch.edges.clear();
    batch.edges.resize(1);
    Tensor hidden = encode_visit(batch, cfg, params, false, drng);
    Tensor mlm = mlm_logits(hidden, params);
    CHECK(mlm.shape() == Shape{2, 12});
    Tensor pooled = visit_embedding(hidden, batch);
    Tensor tasks = task_logits(pooled, params);
    CHECK(tasks.shape() == Shape{1, 5});

    std::fill(params.at("task.w").data().begin(), params.at("task.w").data().end(), 0.0);
    std::fill(params.at("task.b").data().begin(), params.at("task.b").data().end(), 0.0);
    Tensor zeroed = task_logits(pooled, params);
    for (double v : zeroed.data()) CHECK(v == 0.0);

    // Trainable-parameter ordering across the configurations (shared vocab).
    auto count = [](Variant v) {
        ModelConfig c = ModelConfig::make(v, 9, 40);
        return init_model_params(c, 1, false, true).scalar_count();
    };
    CHECK(count(Variant::kHb) > count(Variant::kBerto));
    CHECK(count(Variant::kLeafo6) > count(Variant::kLeafo));
    CHECK(count(Variant::kBerto) == count(Variant::kLeafo));
}

TEST_CASE("gradient reaches both heads through the full composite") {
    ModelConfig cfg = tiny_config(Variant::kHb, 10, 2);
    Parameters params = init_model_params(cfg, 12, true, true);
    VisitBatch batch = single_visit_batch({3, 4, 5}, chain_edges(3), cfg.n_tasks);
    batch.labels = {1.0, 0.0};
    std::vector<Tensor> inputs = {params.at("embedding.table"), params.at("gat.head0.w_dst"),
                                  params.at("block0.attn.wq"), params.at("block0.ffn.w1"),
                                  params.at("mlm.w"), params.at("task.w")};
    auto loss = [&] {
        Rng drng(58);
        Tensor hidden = encode_visit(batch, cfg, params, false, drng);
        Tensor mlm = mlm_logits(hidden, params);
        Mask loss_mask = {1, 0, 1};
        Tensor lm_loss = masked_cross_entropy(mlm, batch.token_ids, loss_mask);
        Tensor pooled = visit_embedding(hidden, batch);
        Tensor logits = task_logits(pooled, params);
        Tensor targets = Tensor::from_data({1, 2}, batch.labels);
        return add(lm_loss, bce_with_logits(logits, targets));
    };
    auto res = check_gradients(loss, inputs, 12);
    CHECK_MESSAGE(res.ok, res.detail);
}
