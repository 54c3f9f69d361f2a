#include "hbert/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "hbert/errors.hpp"

namespace hbert {

namespace {

constexpr char kMagic[8] = {'H', 'B', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void write_pod(std::ostream& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw CheckpointCorrupt("checkpoint: truncated file");
    return value;
}

}  // namespace

nlohmann::json config_to_json(const ModelConfig& config) {
    return {
        {"variant", variant_name(config.variant)},
        {"d_model", config.d_model},
        {"n_blocks", config.n_blocks},
        {"n_heads", config.n_heads},
        {"ffn_hidden", config.ffn_hidden},
        {"hidden_dropout", config.hidden_dropout},
        {"attn_dropout", config.attn_dropout},
        {"gat_heads", config.gat_heads},
        {"gat_residual", config.gat_residual},
        {"n_tasks", config.n_tasks},
        {"vocab_size", config.vocab_size},
        {"max_seq_len", config.max_seq_len},
    };
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig config;
    config.variant = variant_from_name(j.at("variant").get<std::string>());
    config.d_model = j.at("d_model").get<std::size_t>();
    config.n_blocks = j.at("n_blocks").get<std::size_t>();
    config.n_heads = j.at("n_heads").get<std::size_t>();
    config.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
    config.hidden_dropout = j.at("hidden_dropout").get<double>();
    config.attn_dropout = j.at("attn_dropout").get<double>();
    config.gat_heads = j.at("gat_heads").get<std::size_t>();
    config.gat_residual = j.at("gat_residual").get<bool>();
    config.n_tasks = j.at("n_tasks").get<std::size_t>();
    config.vocab_size = j.at("vocab_size").get<std::size_t>();
    config.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    return config;
}

void save_checkpoint(const std::string& path, const nlohmann::json& manifest,
                     const Parameters& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write(kMagic, sizeof(kMagic));
    const std::string manifest_text = manifest.dump();
    write_pod<std::uint64_t>(out, manifest_text.size());
    out.write(manifest_text.data(), static_cast<std::streamsize>(manifest_text.size()));
    write_pod<std::uint64_t>(out, params.map().size());
    for (const auto& [name, tensor] : params.map()) {
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.shape().size()));
        for (std::size_t d : tensor.shape()) write_pod<std::uint64_t>(out, d);
        out.write(reinterpret_cast<const char*>(tensor.data().data()),
                  static_cast<std::streamsize>(tensor.size() * sizeof(double)));
    }
    if (!out) throw DataError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingCheckpoint("checkpoint not found: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw CheckpointCorrupt("checkpoint: bad magic in " + path);
    }
    const auto manifest_len = read_pod<std::uint64_t>(in);
    std::string manifest_text(manifest_len, '\0');
    in.read(manifest_text.data(), static_cast<std::streamsize>(manifest_len));
    if (!in) throw CheckpointCorrupt("checkpoint: truncated manifest in " + path);

    Checkpoint ckpt;
    try {
        ckpt.manifest = nlohmann::json::parse(manifest_text);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointCorrupt(std::string("checkpoint: manifest parse error: ") + e.what());
    }
    const auto n_tensors = read_pod<std::uint64_t>(in);
    for (std::uint64_t t = 0; t < n_tensors; ++t) {
        const auto name_len = read_pod<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto ndim = read_pod<std::uint32_t>(in);
        Shape shape(ndim);
        std::size_t numel = 1;
        for (auto& d : shape) {
            d = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
            numel *= d;
        }
        std::vector<double> values(numel);
        in.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(numel * sizeof(double)));
        if (!in) throw CheckpointCorrupt("checkpoint: truncated tensor '" + name + "'");
        ckpt.params.add(name, Tensor::from_data(std::move(shape), std::move(values),
                                                /*requires_grad=*/true));
    }
    return ckpt;
}

}  // namespace hbert
