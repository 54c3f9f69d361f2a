#include "hbert/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "hbert/errors.hpp"
#include "hbert/rng.hpp"

namespace fs = std::filesystem;

namespace hbert {

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write: " + path);
    out << content;
    if (!out) throw DataError("failed writing: " + path);
}

nlohmann::json parse_json_file(const std::string& path) {
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw InvalidSpec(path + ": " + e.what());
    }
}

std::vector<std::pair<std::string, double>> parse_emission(const nlohmann::json& j,
                                                           const std::string& who) {
    if (!j.is_object()) throw InvalidSpec(who + ": emission must be an object");
    std::vector<std::pair<std::string, double>> out;
    for (const auto& [code, weight] : j.items()) {
        out.emplace_back(code, weight.get<double>());
    }
    return out;
}

PhenotypeSpec parse_phenotype(const nlohmann::json& j) {
    PhenotypeSpec spec;
    spec.name = j.at("name").get<std::string>();
    spec.prevalence = j.at("prevalence").get<double>();
    spec.visit_rate = j.at("visit_rate").get<double>();
    spec.dx_emission = parse_emission(j.at("dx_emission"), spec.name);
    spec.rx_emission = parse_emission(j.at("rx_emission"), spec.name);
    spec.validate();
    return spec;
}

CohortRule parse_cohort(const nlohmann::json& j) {
    CohortRule rule;
    rule.name = j.at("name").get<std::string>();
    for (const auto& c : j.at("inclusive_dx")) rule.inclusive_dx.insert(c.get<std::string>());
    rule.dx_min_count = j.value("dx_min_count", std::size_t{1});
    for (const auto& c : j.at("inclusive_rx")) rule.inclusive_rx.insert(c.get<std::string>());
    rule.rx_min_count = j.value("rx_min_count", std::size_t{1});
    if (j.contains("exclusive_rx")) {
        for (const auto& c : j.at("exclusive_rx")) rule.exclusive_rx.insert(c.get<std::string>());
    }
    rule.validate();
    return rule;
}

void check_emission_codes(const PhenotypeSpec& spec, const HierarchyTree& dx,
                          const HierarchyTree& rx) {
    for (const auto& [code, w] : spec.dx_emission) {
        if (!dx.contains(code)) {
            throw InvalidSpec("phenotype " + spec.name + ": unknown diagnosis code " + code);
        }
    }
    for (const auto& [code, w] : spec.rx_emission) {
        if (!rx.contains(code)) {
            throw InvalidSpec("phenotype " + spec.name + ": unknown prescription code " + code);
        }
    }
}

std::string hex64(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_run_manifest(const std::string& out_dir, nlohmann::json manifest) {
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    manifest["wall_clock_unix_ms"] =
        std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
    write_file(out_dir + "/run_manifest.json", manifest.dump(2) + "\n");
}

}  // namespace

std::string csv_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string csv_double(const std::optional<double>& v) {
    return v ? csv_double(*v) : std::string();
}

std::uint64_t file_digest(const std::string& path) { return fnv1a(read_file(path)); }

GenerationSpec load_generation_spec(const std::string& path) {
    const nlohmann::json j = parse_json_file(path);
    const fs::path base = fs::absolute(fs::path(path)).parent_path();

    GenerationSpec spec;
    spec.n_patients = j.at("n_patients").get<std::size_t>();
    if (spec.n_patients < 1) throw InvalidSpec("n_patients must be >= 1");
    if (j.contains("generation")) {
        const auto& g = j.at("generation");
        spec.policy.days = g.value("days", spec.policy.days);
        spec.policy.dx_per_visit_mean = g.value("dx_per_visit_mean", spec.policy.dx_per_visit_mean);
        spec.policy.rx_per_visit_mean = g.value("rx_per_visit_mean", spec.policy.rx_per_visit_mean);
    }
    spec.dx_system = {SystemId::kDiagnosis, j.at("dx_root").get<std::string>(),
                      j.at("dx_max_depth").get<std::size_t>()};
    spec.rx_system = {SystemId::kPrescription, j.at("rx_root").get<std::string>(),
                      j.at("rx_max_depth").get<std::size_t>()};
    spec.dx_hierarchy_path = (base / j.at("dx_hierarchy").get<std::string>()).string();
    spec.rx_hierarchy_path = (base / j.at("rx_hierarchy").get<std::string>()).string();

    if (!j.contains("phenotypes") || j.at("phenotypes").empty()) {
        throw InvalidSpec("spec declares no phenotypes");
    }
    spec.background = parse_phenotype(j.at("background"));
    for (const auto& p : j.at("phenotypes")) spec.phenotypes.push_back(parse_phenotype(p));
    if (j.contains("cohorts")) {
        for (const auto& c : j.at("cohorts")) spec.cohorts.push_back(parse_cohort(c));
    }
    return spec;
}

GenDataSummary cmd_gen_data(const std::string& spec_path, const std::string& out_dir,
                            std::uint64_t seed) {
    const GenerationSpec spec = load_generation_spec(spec_path);
    const HierarchyTree dx_tree = HierarchyTree::parse_file(spec.dx_hierarchy_path, spec.dx_system);
    const HierarchyTree rx_tree = HierarchyTree::parse_file(spec.rx_hierarchy_path, spec.rx_system);
    check_emission_codes(spec.background, dx_tree, rx_tree);
    for (const auto& p : spec.phenotypes) check_emission_codes(p, dx_tree, rx_tree);
    for (const auto& rule : spec.cohorts) {
        for (const auto& c : rule.inclusive_dx) {
            if (!dx_tree.contains(c)) throw InvalidSpec("cohort " + rule.name + ": unknown dx " + c);
        }
        for (const auto& c : rule.inclusive_rx) {
            if (!rx_tree.contains(c)) throw InvalidSpec("cohort " + rule.name + ": unknown rx " + c);
        }
        for (const auto& c : rule.exclusive_rx) {
            if (!rx_tree.contains(c)) throw InvalidSpec("cohort " + rule.name + ": unknown rx " + c);
        }
    }

    const auto events = generate_population(spec.phenotypes, spec.background, spec.n_patients,
                                            derive_seed(seed, "data"), spec.policy);
    auto visits = group_and_filter_visits(events);

    // Count visits that the dx-and-rx filter dropped.
    std::set<std::pair<std::int64_t, std::int32_t>> days_seen;
    for (const auto& e : events) days_seen.insert({e.patient_id, e.date});
    GenDataSummary summary;
    summary.n_patients = spec.n_patients;
    summary.n_events = events.size();
    summary.n_visits_kept = visits.size();
    summary.n_visits_dropped = days_seen.size() - visits.size();

    const LabelSpace labels = build_patient_labels(visits, dx_tree, spec.cohorts);
    push_down_labels(labels.patient_labels, visits);

    for (std::size_t t = 0; t < labels.task_names.size(); ++t) {
        std::size_t count = 0;
        for (const auto& [pid, bits] : labels.patient_labels) count += bits[t] ? 1 : 0;
        if (t < labels.n_chapters) {
            summary.chapter_counts[labels.task_names[t]] = count;
        } else {
            summary.cohort_counts[labels.task_names[t]] = count;
        }
    }

    // Only patients with at least one surviving visit enter the dataset.
    std::vector<std::int64_t> patient_ids;
    for (const auto& [pid, bits] : labels.patient_labels) patient_ids.push_back(pid);
    const SplitResult split = split_patients(patient_ids, derive_seed(seed, "split-stage"));
    summary.split_sizes["train"] = split.train.size();
    summary.split_sizes["valid"] = split.valid.size();
    summary.split_sizes["test"] = split.test.size();

    const Vocabulary vocab = Vocabulary::build({&dx_tree, &rx_tree});

    // ---- write the dataset directory ----
    DatasetPaths paths{out_dir};
    fs::create_directories(out_dir);
    write_file(paths.dx_hierarchy(), read_file(spec.dx_hierarchy_path));
    write_file(paths.rx_hierarchy(), read_file(spec.rx_hierarchy_path));
    {
        std::ostringstream os;
        vocab.export_tsv(os);
        write_file(paths.vocab(), os.str());
    }
    {
        std::ostringstream os;
        for (std::size_t t = 0; t < labels.task_names.size(); ++t) {
            os << t << '\t' << labels.task_names[t] << '\n';
        }
        write_file(paths.tasks(), os.str());
    }
    {
        std::ostringstream os;
        for (const VisitRecord& v : visits) {
            nlohmann::json row;
            row["patient_id"] = v.patient_id;
            row["date"] = v.date;
            row["dx"] = std::vector<std::string>(v.dx_codes.begin(), v.dx_codes.end());
            row["rx"] = std::vector<std::string>(v.rx_codes.begin(), v.rx_codes.end());
            std::vector<std::size_t> set_bits;
            for (std::size_t t = 0; t < v.labels.size(); ++t) {
                if (v.labels[t]) set_bits.push_back(t);
            }
            row["labels"] = set_bits;
            os << row.dump() << '\n';
        }
        write_file(paths.visits(), os.str());
    }
    for (const auto& [name, ids] :
         {std::pair{std::string("train"), &split.train}, {std::string("valid"), &split.valid},
          {std::string("test"), &split.test}}) {
        std::ostringstream os;
        for (auto id : *ids) os << id << '\n';
        write_file(paths.split(name), os.str());
    }

    nlohmann::json meta;
    meta["format"] = "hbert-dataset-v1";
    meta["seed"] = seed;
    meta["n_patients"] = spec.n_patients;
    meta["n_tasks"] = labels.task_names.size();
    meta["n_chapters"] = labels.n_chapters;
    meta["task_names"] = labels.task_names;
    std::vector<std::string> cohort_names(labels.task_names.begin() + labels.n_chapters,
                                          labels.task_names.end());
    meta["cohort_names"] = cohort_names;
    meta["dx"] = {{"root", dx_tree.system().root_token}, {"max_depth", dx_tree.system().max_depth}};
    meta["rx"] = {{"root", rx_tree.system().root_token}, {"max_depth", rx_tree.system().max_depth}};
    meta["vocab_hash"] = hex64(vocab.content_hash());
    write_file(paths.meta(), meta.dump(2) + "\n");

    nlohmann::json sum;
    sum["n_patients"] = summary.n_patients;
    sum["n_events"] = summary.n_events;
    sum["n_visits_kept"] = summary.n_visits_kept;
    sum["n_visits_dropped"] = summary.n_visits_dropped;
    sum["cohort_patient_counts"] = summary.cohort_counts;
    sum["chapter_patient_counts"] = summary.chapter_counts;
    sum["split_sizes"] = summary.split_sizes;
    write_file(paths.summary(), sum.dump(2) + "\n");

    write_run_manifest(out_dir, {{"command", "gen-data"},
                                 {"seed", seed},
                                 {"spec", spec_path},
                                 {"spec_digest", hex64(file_digest(spec_path))},
                                 {"outputs",
                                  {paths.meta(), paths.visits(), paths.vocab(), paths.tasks(),
                                   paths.split("train"), paths.split("valid"), paths.split("test"),
                                   paths.summary()}}});
    return summary;
}

std::vector<VisitRecord> Dataset::split_visits(const std::string& split) const {
    auto it = splits.find(split);
    if (it == splits.end()) throw DataError("unknown split: " + split);
    std::set<std::int64_t> members(it->second.begin(), it->second.end());
    std::vector<VisitRecord> out;
    for (const VisitRecord& v : visits) {
        if (members.count(v.patient_id)) out.push_back(v);
    }
    return out;
}

Dataset load_dataset(const std::string& data_dir) {
    DatasetPaths paths{data_dir};
    const nlohmann::json meta = parse_json_file(paths.meta());
    if (meta.value("format", "") != "hbert-dataset-v1") {
        throw DataError(data_dir + ": not a dataset directory");
    }

    Dataset ds;
    ds.dx_tree = HierarchyTree::parse_file(
        paths.dx_hierarchy(),
        {SystemId::kDiagnosis, meta.at("dx").at("root").get<std::string>(),
         meta.at("dx").at("max_depth").get<std::size_t>()});
    ds.rx_tree = HierarchyTree::parse_file(
        paths.rx_hierarchy(),
        {SystemId::kPrescription, meta.at("rx").at("root").get<std::string>(),
         meta.at("rx").at("max_depth").get<std::size_t>()});
    ds.vocab = Vocabulary::build({&ds.dx_tree, &ds.rx_tree});
    if (hex64(ds.vocab.content_hash()) != meta.at("vocab_hash").get<std::string>()) {
        throw DataError(data_dir + ": vocabulary does not match its recorded hash");
    }
    ds.task_names = meta.at("task_names").get<std::vector<std::string>>();
    ds.n_chapters = meta.at("n_chapters").get<std::size_t>();
    ds.cohort_names = meta.at("cohort_names").get<std::vector<std::string>>();

    std::ifstream in(paths.visits());
    if (!in) throw DataError("cannot open: " + paths.visits());
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json row;
        try {
            row = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(paths.visits() + ": " + e.what());
        }
        VisitRecord v;
        v.patient_id = row.at("patient_id").get<std::int64_t>();
        v.date = row.at("date").get<std::int32_t>();
        for (const auto& c : row.at("dx")) v.dx_codes.insert(c.get<std::string>());
        for (const auto& c : row.at("rx")) v.rx_codes.insert(c.get<std::string>());
        v.labels.assign(ds.task_names.size(), 0);
        for (const auto& bit : row.at("labels")) {
            v.labels.at(bit.get<std::size_t>()) = 1;
        }
        ds.visits.push_back(std::move(v));
    }

    for (const char* split : {"train", "valid", "test"}) {
        std::ifstream split_in(paths.split(split));
        if (!split_in) throw DataError("cannot open: " + paths.split(split));
        std::vector<std::int64_t> ids;
        std::string id_line;
        while (std::getline(split_in, id_line)) {
            if (!id_line.empty()) ids.push_back(std::stoll(id_line));
        }
        ds.splits[split] = std::move(ids);
    }
    return ds;
}

namespace {

ModelConfig build_config(Variant variant, const Dataset& ds, const TrainOverrides& overrides) {
    ModelConfig config = ModelConfig::make(variant, ds.n_tasks(), ds.vocab.size());
    if (overrides.hidden_dropout) config.hidden_dropout = *overrides.hidden_dropout;
    if (overrides.attn_dropout) config.attn_dropout = *overrides.attn_dropout;
    if (overrides.gat_residual) config.gat_residual = *overrides.gat_residual;
    return config;
}

TrainConfig build_train_config(Phase phase, std::uint64_t seed, const TrainOverrides& overrides) {
    TrainConfig tc;
    tc.phase = phase;
    tc.seed = seed;
    if (overrides.learning_rate) tc.learning_rate = *overrides.learning_rate;
    if (overrides.epochs) tc.epochs = *overrides.epochs;
    if (overrides.batch_size) tc.batch_size = *overrides.batch_size;
    return tc;
}

void write_runlog(const std::string& path, const std::vector<EpochLog>& log) {
    std::ostringstream os;
    os << "epoch,phase,loss,mean_auc,mean_aps\n";
    for (const EpochLog& row : log) {
        os << row.epoch << ',' << phase_name(row.phase) << ',' << csv_double(row.loss) << ','
           << csv_double(row.mean_auc) << ',' << csv_double(row.mean_aps) << '\n';
    }
    write_file(path, os.str());
}

}  // namespace

TrainOutcome cmd_train(Variant variant, Phase phase, const std::string& data_dir,
                       const std::string& out_dir, std::uint64_t seed,
                       const TrainOverrides& overrides, const std::string& init_checkpoint) {
    const Dataset ds = load_dataset(data_dir);
    const ModelConfig config = build_config(variant, ds, overrides);
    const TrainConfig tconfig = build_train_config(phase, seed, overrides);
    const TokenMode mode = token_mode_for(variant);

    const std::string variant_dir = out_dir + "/" + variant_name(variant);
    fs::create_directories(variant_dir);

    const TokenizedDataset train = tokenize_visits(ds.split_visits("train"), ds.dx_tree,
                                                   ds.rx_tree, ds.vocab, mode, ds.n_tasks());

    TrainOutcome outcome;
    Parameters params;
    if (phase == Phase::kPretrain) {
        params = init_model_params(config, derive_seed(seed, "init", fnv1a(variant_name(variant))),
                                   /*with_mlm_head=*/true, /*with_task_head=*/false);
        outcome.result = pretrain(params, train, config, tconfig);
        outcome.checkpoint_path = variant_dir + "/pretrain.ckpt";
        outcome.runlog_path = variant_dir + "/pretrain_runlog.csv";
    } else {
        const std::string ckpt_path =
            init_checkpoint.empty() ? variant_dir + "/pretrain.ckpt" : init_checkpoint;
        if (!fs::exists(ckpt_path)) {
            throw MissingCheckpoint("no pretraining checkpoint at " + ckpt_path);
        }
        Checkpoint ckpt = load_checkpoint(ckpt_path);
        const ModelConfig ckpt_config = config_from_json(ckpt.manifest.at("config"));
        if (ckpt_config.variant != variant) {
            throw VariantMismatch(std::string("checkpoint variant ") +
                                  variant_name(ckpt_config.variant) + " requested " +
                                  variant_name(variant));
        }
        if (ckpt.manifest.at("vocab_hash").get<std::string>() != hex64(ds.vocab.content_hash())) {
            throw VariantMismatch("checkpoint vocabulary does not match the dataset");
        }
        params = std::move(ckpt.params);
        params.erase_prefix("mlm.");
        // Fresh task head on top of the pretrained encoder.
        Tensor tw = Tensor::zeros({config.d_model, config.n_tasks}, true);
        init_param_tensor(tw, "task.w", derive_seed(seed, "init", fnv1a(variant_name(variant))));
        params.add("task.w", std::move(tw));
        Tensor tb = Tensor::zeros({config.n_tasks}, true);
        init_param_tensor(tb, "task.b", derive_seed(seed, "init", fnv1a(variant_name(variant))));
        params.add("task.b", std::move(tb));

        const TokenizedDataset valid = tokenize_visits(ds.split_visits("valid"), ds.dx_tree,
                                                       ds.rx_tree, ds.vocab, mode, ds.n_tasks());
        outcome.result = finetune(params, train, valid, config, tconfig);
        outcome.checkpoint_path = variant_dir + "/finetune.ckpt";
        outcome.runlog_path = variant_dir + "/finetune_runlog.csv";
    }

    outcome.trainable_params = params.scalar_count();
    nlohmann::json manifest;
    manifest["format"] = "hbert-checkpoint-v1";
    manifest["phase"] = phase_name(phase);
    manifest["seed"] = seed;
    manifest["config"] = config_to_json(config);
    manifest["task_names"] = ds.task_names;
    manifest["vocab_hash"] = hex64(ds.vocab.content_hash());
    save_checkpoint(outcome.checkpoint_path, manifest, params);
    write_runlog(outcome.runlog_path, outcome.result.log);
    write_run_manifest(variant_dir, {{"command", "train"},
                                     {"variant", variant_name(variant)},
                                     {"phase", phase_name(phase)},
                                     {"seed", seed},
                                     {"data_dir", data_dir},
                                     {"outputs", {outcome.checkpoint_path, outcome.runlog_path}}});
    return outcome;
}

namespace {

struct LoadedCheckpoint {
    ModelConfig config;
    Parameters params;
    std::vector<std::string> task_names;
};

LoadedCheckpoint load_for_eval(const std::string& checkpoint_path, const Dataset& ds) {
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    LoadedCheckpoint out;
    try {
        out.config = config_from_json(ckpt.manifest.at("config"));
        out.task_names = ckpt.manifest.at("task_names").get<std::vector<std::string>>();
        if (ckpt.manifest.at("vocab_hash").get<std::string>() != hex64(ds.vocab.content_hash())) {
            throw CheckpointCorrupt("checkpoint vocabulary does not match the dataset");
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointCorrupt(std::string("checkpoint manifest: ") + e.what());
    }
    if (out.task_names != ds.task_names) {
        throw TaskCountMismatch("checkpoint task list does not match the dataset");
    }
    out.params = std::move(ckpt.params);
    return out;
}

}  // namespace

EvalOutcome cmd_evaluate(const std::string& checkpoint_path, const std::string& data_dir,
                         const std::string& out_csv, const std::string& split) {
    const Dataset ds = load_dataset(data_dir);
    LoadedCheckpoint loaded = load_for_eval(checkpoint_path, ds);
    if (!loaded.params.has("task.w")) {
        throw CheckpointCorrupt("checkpoint has no task head; evaluate needs a fine-tuned model");
    }
    const TokenizedDataset data =
        tokenize_visits(ds.split_visits(split), ds.dx_tree, ds.rx_tree, ds.vocab,
                        token_mode_for(loaded.config.variant), ds.n_tasks());
    if (data.empty()) throw EmptyDataset("evaluate: split '" + split + "' has no visits");

    EvalOutcome outcome;
    outcome.scores = evaluate_tasks(loaded.params, loaded.config, data);
    outcome.metrics_path = out_csv;

    std::ostringstream os;
    os << "task_id,n_pos,n_neg,auc,aps\n";
    for (const TaskScore& t : outcome.scores.per_task) {
        os << t.task_id << ',' << t.n_pos << ',' << t.n_neg << ',' << csv_double(t.auc) << ','
           << csv_double(t.aps) << '\n';
    }
    os << "mean,,," << csv_double(outcome.scores.mean_auc) << ','
       << csv_double(outcome.scores.mean_aps) << '\n';
    write_file(out_csv, os.str());
    return outcome;
}

EmbedOutcome cmd_embed(const std::string& checkpoint_path, const std::string& data_dir,
                       const std::string& out_dir, const std::string& split) {
    const Dataset ds = load_dataset(data_dir);
    LoadedCheckpoint loaded = load_for_eval(checkpoint_path, ds);
    const TokenizedDataset data =
        tokenize_visits(ds.split_visits(split), ds.dx_tree, ds.rx_tree, ds.vocab,
                        token_mode_for(loaded.config.variant), ds.n_tasks());
    if (data.empty()) throw EmptyDataset("embed: split '" + split + "' has no visits");

    const auto visit_vecs = compute_visit_embeddings(loaded.params, loaded.config, data);
    std::map<std::int64_t, std::vector<std::vector<double>>> by_patient;
    for (std::size_t i = 0; i < data.visits.size(); ++i) {
        by_patient[data.visits[i].patient_id].push_back(visit_vecs[i]);
    }
    const auto rows = patient_embeddings(by_patient);

    std::vector<std::vector<double>> matrix;
    matrix.reserve(rows.size());
    for (const auto& r : rows) matrix.push_back(r.vec);
    const Pca2 pca = pca_top2(matrix);

    // Cohort membership from the pushed-down label bits.
    std::map<std::int64_t, std::string> tags;
    std::map<std::string, std::vector<std::size_t>> cohort_members;
    {
        std::map<std::int64_t, const VisitRecord*> one_visit;
        for (const auto& v : ds.split_visits(split)) one_visit[v.patient_id] = nullptr;
        std::map<std::int64_t, std::vector<std::uint8_t>> label_of;
        for (const auto& v : ds.visits) {
            if (one_visit.count(v.patient_id)) label_of[v.patient_id] = v.labels;
        }
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& bits = label_of.at(rows[i].patient_id);
            std::string tag;
            for (std::size_t c = 0; c < ds.cohort_names.size(); ++c) {
                if (bits.at(ds.n_chapters + c)) {
                    if (!tag.empty()) tag += "+";
                    tag += ds.cohort_names[c];
                    cohort_members[ds.cohort_names[c]].push_back(i);
                }
            }
            tags[rows[i].patient_id] = tag.empty() ? "none" : tag;
        }
    }

    EmbedOutcome outcome;
    outcome.n_patients = rows.size();
    outcome.explained_variance_ratio = pca.explained_variance_ratio;
    for (auto a = cohort_members.begin(); a != cohort_members.end(); ++a) {
        for (auto b = std::next(a); b != cohort_members.end(); ++b) {
            outcome.separations[a->first + "|" + b->first] =
                cohort_separation(pca.projections, a->second, b->second);
        }
    }

    fs::create_directories(out_dir);
    {
        std::ostringstream os;
        os << "patient_id";
        for (std::size_t j = 0; j < loaded.config.d_model; ++j) os << ",c" << j;
        os << '\n';
        for (const auto& r : rows) {
            os << r.patient_id;
            for (double v : r.vec) os << ',' << csv_double(v);
            os << '\n';
        }
        outcome.embeddings_path = out_dir + "/embeddings.csv";
        write_file(outcome.embeddings_path, os.str());
    }
    {
        std::ostringstream os;
        os << "patient_id,pc1,pc2,cohort_tag\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
            os << rows[i].patient_id << ',' << csv_double(pca.projections[i][0]) << ','
               << csv_double(pca.projections[i][1]) << ',' << tags.at(rows[i].patient_id) << '\n';
        }
        outcome.pca_path = out_dir + "/pca.csv";
        write_file(outcome.pca_path, os.str());
    }
    {
        nlohmann::json sum;
        sum["split"] = split;
        sum["n_patients"] = outcome.n_patients;
        sum["explained_variance_ratio"] = {pca.explained_variance_ratio[0],
                                           pca.explained_variance_ratio[1]};
        sum["cohort_separation"] = outcome.separations;
        outcome.summary_path = out_dir + "/embed_summary.json";
        write_file(outcome.summary_path, sum.dump(2) + "\n");
    }
    write_run_manifest(out_dir, {{"command", "embed"},
                                 {"checkpoint", checkpoint_path},
                                 {"data_dir", data_dir},
                                 {"split", split},
                                 {"outputs",
                                  {outcome.embeddings_path, outcome.pca_path,
                                   outcome.summary_path}}});
    return outcome;
}

CompareOutcome cmd_compare(const std::vector<Variant>& variants, const std::string& data_dir,
                           const std::string& out_dir, std::uint64_t seed,
                           const TrainOverrides& pretrain_overrides,
                           const TrainOverrides& finetune_overrides) {
    CompareOutcome outcome;
    for (Variant variant : variants) {
        const std::string variant_dir = out_dir + "/" + variant_name(variant);
        cmd_train(variant, Phase::kPretrain, data_dir, out_dir, seed, pretrain_overrides);
        const TrainOutcome ft =
            cmd_train(variant, Phase::kFinetune, data_dir, out_dir, seed, finetune_overrides);
        const EvalOutcome eval = cmd_evaluate(ft.checkpoint_path, data_dir,
                                              variant_dir + "/metrics.csv", "test");
        const EmbedOutcome emb = cmd_embed(ft.checkpoint_path, data_dir, variant_dir, "test");

        CompareRow row;
        row.variant = variant;
        row.mean_auc = eval.scores.mean_auc;
        row.mean_aps = eval.scores.mean_aps;
        row.trainable_params = ft.trainable_params;
        row.separations = emb.separations;
        outcome.rows.push_back(std::move(row));
    }
    std::sort(outcome.rows.begin(), outcome.rows.end(),
              [](const CompareRow& a, const CompareRow& b) { return a.mean_auc > b.mean_auc; });

    std::set<std::string> pair_names;
    for (const auto& row : outcome.rows) {
        for (const auto& [pair, sep] : row.separations) pair_names.insert(pair);
    }
    std::ostringstream os;
    os << "variant,mean_auc,mean_aps,trainable_params";
    for (const auto& pair : pair_names) os << ",sep " << pair;
    os << '\n';
    for (const auto& row : outcome.rows) {
        os << variant_name(row.variant) << ',' << csv_double(row.mean_auc) << ','
           << csv_double(row.mean_aps) << ',' << row.trainable_params;
        for (const auto& pair : pair_names) {
            auto it = row.separations.find(pair);
            os << ',' << (it == row.separations.end() ? std::string() : csv_double(it->second));
        }
        os << '\n';
    }
    outcome.table_path = out_dir + "/compare.csv";
    write_file(outcome.table_path, os.str());
    write_run_manifest(out_dir, {{"command", "compare"},
                                 {"seed", seed},
                                 {"data_dir", data_dir},
                                 {"outputs", {outcome.table_path}}});
    return outcome;
}

}  // namespace hbert
