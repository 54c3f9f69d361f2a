#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "hbert/errors.hpp"
#include "hbert/pipeline.hpp"
#include "hbert/rng.hpp"

using namespace hbert;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE_MESSAGE(bool(in), path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// The bundled fixture, shrunk to unit-test size.
std::string small_spec_path(const std::string& tag, std::size_t n_patients = 80) {
    const std::string fixture = std::string(HBERT_SOURCE_DIR) + "/data/fixture.json";
    nlohmann::json spec = nlohmann::json::parse(slurp(fixture));
    spec["n_patients"] = n_patients;
    spec["dx_hierarchy"] = std::string(HBERT_SOURCE_DIR) + "/data/dx_hierarchy.tsv";
    spec["rx_hierarchy"] = std::string(HBERT_SOURCE_DIR) + "/data/rx_hierarchy.tsv";
    const std::string path =
        (fs::temp_directory_path() / ("hbert_spec_" + tag + ".json")).string();
    std::ofstream out(path);
    out << spec.dump(2);
    return path;
}

std::string work_dir(const std::string& tag) {
    const std::string dir = (fs::temp_directory_path() / ("hbert_pipe_" + tag)).string();
    fs::remove_all(dir);
    return dir;
}

}  // namespace

TEST_CASE("gen-data summary counts match an independent recount of the files") {
    const std::string spec = small_spec_path("recount", 120);
    const std::string dir = work_dir("recount");
    const GenDataSummary summary = cmd_gen_data(spec, dir, 7);

    // Recount visits and label bits straight from the emitted files.
    DatasetPaths paths{dir};
    const nlohmann::json meta = nlohmann::json::parse(slurp(paths.meta()));
    const auto task_names = meta.at("task_names").get<std::vector<std::string>>();
    const std::size_t n_chapters = meta.at("n_chapters").get<std::size_t>();

    std::istringstream visits_in(slurp(paths.visits()));
    std::string line;
    std::size_t n_visits = 0;
    std::map<std::string, std::set<std::int64_t>> patients_with_bit;
    std::set<std::int64_t> patients;
    while (std::getline(visits_in, line)) {
        if (line.empty()) continue;
        ++n_visits;
        const nlohmann::json row = nlohmann::json::parse(line);
        patients.insert(row.at("patient_id").get<std::int64_t>());
        CHECK(!row.at("dx").empty());
        CHECK(!row.at("rx").empty());
        for (const auto& bit : row.at("labels")) {
            patients_with_bit[task_names.at(bit.get<std::size_t>())].insert(
                row.at("patient_id").get<std::int64_t>());
        }
    }
    CHECK(n_visits == summary.n_visits_kept);
    for (const auto& [name, count] : summary.cohort_counts) {
        CHECK(patients_with_bit[name].size() == count);
    }
    for (const auto& [name, count] : summary.chapter_counts) {
        CHECK(patients_with_bit[name].size() == count);
    }
    CHECK(task_names.size() == n_chapters + summary.cohort_counts.size());

    // Split files partition exactly the patients present in the visits file.
    std::set<std::int64_t> in_splits;
    std::size_t total = 0;
    for (const char* split : {"train", "valid", "test"}) {
        std::istringstream ids(slurp(paths.split(split)));
        std::string id;
        while (std::getline(ids, id)) {
            if (id.empty()) continue;
            CHECK(in_splits.insert(std::stoll(id)).second);  // no overlap
            ++total;
        }
    }
    CHECK(in_splits == patients);
    CHECK(total == patients.size());
    CHECK(summary.split_sizes.at("valid") == patients.size() / 10);
    CHECK(summary.split_sizes.at("test") == patients.size() / 5);
}

TEST_CASE("gen-data is deterministic across reruns") {
    const std::string spec = small_spec_path("determinism", 60);
    const std::string d1 = work_dir("det1");
    const std::string d2 = work_dir("det2");
    cmd_gen_data(spec, d1, 99);
    cmd_gen_data(spec, d2, 99);
    for (const char* rel : {"/visits.jsonl", "/vocab.tsv", "/tasks.tsv", "/splits/train.txt",
                            "/splits/valid.txt", "/splits/test.txt", "/meta.json"}) {
        CHECK(file_digest(d1 + rel) == file_digest(d2 + rel));
    }

    const std::string d3 = work_dir("det3");
    cmd_gen_data(spec, d3, 100);  // a different seed must change the data
    CHECK(file_digest(d1 + "/visits.jsonl") != file_digest(d3 + "/visits.jsonl"));
}

TEST_CASE("gen-data rejects an empty phenotype list") {
    const std::string fixture = std::string(HBERT_SOURCE_DIR) + "/data/fixture.json";
    nlohmann::json spec = nlohmann::json::parse(slurp(fixture));
    spec["phenotypes"] = nlohmann::json::array();
    const std::string path = (fs::temp_directory_path() / "hbert_spec_empty.json").string();
    std::ofstream(path) << spec.dump();
    CHECK_THROWS_AS(cmd_gen_data(path, work_dir("empty"), 1), InvalidSpec);
}

TEST_CASE("train, evaluate and embed run end to end") {
    const std::string spec = small_spec_path("endtoend", 100);
    const std::string data = work_dir("e2e_data");
    cmd_gen_data(spec, data, 13);
    const std::string out = work_dir("e2e_out");

    TrainOverrides fast;
    fast.epochs = 2;
    fast.learning_rate = 1e-3;
    fast.batch_size = 16;

    // Fine-tuning without a pretraining checkpoint must fail cleanly.
    CHECK_THROWS_AS(cmd_train(Variant::kLeafo, Phase::kFinetune, data, out, 5, fast),
                    MissingCheckpoint);

    const TrainOutcome pre = cmd_train(Variant::kLeafo, Phase::kPretrain, data, out, 5, fast);
    CHECK(fs::exists(pre.checkpoint_path));
    CHECK(pre.result.log.size() == 2);

    // Epoch-count override reflects in the run log shape.
    {
        std::istringstream log(slurp(pre.runlog_path));
        std::string line;
        std::size_t rows = 0;
        std::getline(log, line);
        CHECK(line == "epoch,phase,loss,mean_auc,mean_aps");
        while (std::getline(log, line)) rows += line.empty() ? 0 : 1;
        CHECK(rows == 2);
    }

    const TrainOutcome fine = cmd_train(Variant::kLeafo, Phase::kFinetune, data, out, 5, fast);
    CHECK(fine.result.log.size() == 2);
    CHECK(fine.result.log.back().mean_auc.has_value());

    // A checkpoint from another variant is not a valid starting point.
    CHECK_THROWS_AS(cmd_train(Variant::kBerto, Phase::kFinetune, data, out, 5, fast,
                              pre.checkpoint_path),
                    VariantMismatch);

    const EvalOutcome eval1 =
        cmd_evaluate(fine.checkpoint_path, data, out + "/metrics.csv", "test");
    {
        std::istringstream csv(slurp(eval1.metrics_path));
        std::string line;
        std::getline(csv, line);
        CHECK(line == "task_id,n_pos,n_neg,auc,aps");
        std::size_t rows = 0;
        std::string last;
        while (std::getline(csv, line)) {
            if (!line.empty()) {
                ++rows;
                last = line;
            }
        }
        CHECK(rows == eval1.scores.per_task.size() + 1);  // per task + mean footer
        CHECK(last.rfind("mean,", 0) == 0);
    }

    // Rerunning evaluation reproduces the file byte for byte.
    cmd_evaluate(fine.checkpoint_path, data, out + "/metrics2.csv", "test");
    CHECK(file_digest(out + "/metrics.csv") == file_digest(out + "/metrics2.csv"));

    // Evaluating a pretraining checkpoint (no task head) fails cleanly.
    CHECK_THROWS_AS(cmd_evaluate(pre.checkpoint_path, data, out + "/m3.csv", "test"),
                    CheckpointCorrupt);

    const EmbedOutcome emb = cmd_embed(fine.checkpoint_path, data, out + "/embed", "test");
    const Dataset ds = load_dataset(data);
    std::set<std::int64_t> test_patients_with_visits;
    for (const auto& v : ds.split_visits("test")) test_patients_with_visits.insert(v.patient_id);
    CHECK(emb.n_patients == test_patients_with_visits.size());
    {
        std::istringstream csv(slurp(emb.pca_path));
        std::string line;
        std::getline(csv, line);
        CHECK(line == "patient_id,pc1,pc2,cohort_tag");
        std::size_t rows = 0;
        while (std::getline(csv, line)) rows += line.empty() ? 0 : 1;
        CHECK(rows == emb.n_patients);
    }
}

TEST_CASE("dataset loader validates directory contents") {
    CHECK_THROWS_AS(load_dataset("/nonexistent/dataset"), DataError);
}
