#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hbert/errors.hpp"
#include "hbert/pipeline.hpp"

namespace {

using namespace hbert;

void add_train_overrides(CLI::App* cmd, TrainOverrides& ov) {
    cmd->add_option("--lr", [&ov](const CLI::results_t& r) {
        ov.learning_rate = std::stod(r[0]);
        return true;
    }, "Learning rate (default 1e-5)");
    cmd->add_option("--epochs", [&ov](const CLI::results_t& r) {
        ov.epochs = std::stoul(r[0]);
        return true;
    }, "Training epochs (default 20)");
    cmd->add_option("--batch-size", [&ov](const CLI::results_t& r) {
        ov.batch_size = std::stoul(r[0]);
        return true;
    }, "Batch size (default 32)");
    cmd->add_option("--hidden-dropout", [&ov](const CLI::results_t& r) {
        ov.hidden_dropout = std::stod(r[0]);
        return true;
    }, "Transformer hidden dropout (default 0.4)");
    cmd->add_option("--attn-dropout", [&ov](const CLI::results_t& r) {
        ov.attn_dropout = std::stod(r[0]);
        return true;
    }, "Attention dropout (default 0.1)");
    cmd->add_flag("--gat-residual", [&ov](std::int64_t) {
        ov.gat_residual = true;
    }, "Add graph-attention output to embeddings instead of replacing them");
}

int run(int argc, char** argv) {
    CLI::App app{"hbert: hierarchical-code visit modeling pipeline"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Read defaults from a key=value config file");

    std::string spec_path, data_dir, out_path, checkpoint, split = "test", init_from;
    std::string variant_str = "HB", phase_str = "pretrain", variants_csv = "HB,BERTO,LEAFO,LEAFO6";
    std::uint64_t seed = 7;
    TrainOverrides overrides, pretrain_ov, finetune_ov;

    auto* gen = app.add_subcommand("gen-data", "Generate a labeled synthetic population");
    gen->add_option("--spec", spec_path, "Generation spec (JSON)")->required();
    gen->add_option("--out", out_path, "Output dataset directory")->required();
    gen->add_option("--seed", seed, "Master seed");

    auto* train = app.add_subcommand("train", "Pretrain or fine-tune one configuration");
    train->add_option("--variant", variant_str, "HB, BERTO, LEAFO or LEAFO6")->required();
    train->add_option("--phase", phase_str, "pretrain or finetune")->required();
    train->add_option("--data", data_dir, "Dataset directory")->required();
    train->add_option("--out", out_path, "Output directory")->required();
    train->add_option("--seed", seed, "Master seed");
    train->add_option("--init-from", init_from, "Checkpoint to fine-tune from");
    add_train_overrides(train, overrides);

    auto* eval = app.add_subcommand("evaluate", "Per-task AUC/APS on a split");
    eval->add_option("--checkpoint", checkpoint, "Fine-tuned checkpoint")->required();
    eval->add_option("--data", data_dir, "Dataset directory")->required();
    eval->add_option("--out", out_path, "Metrics CSV path")->required();
    eval->add_option("--split", split, "train, valid or test (default test)");

    auto* embed = app.add_subcommand("embed", "Patient embeddings, PCA and cohort separation");
    embed->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
    embed->add_option("--data", data_dir, "Dataset directory")->required();
    embed->add_option("--out", out_path, "Output directory")->required();
    embed->add_option("--split", split, "train, valid or test (default test)");

    auto* compare = app.add_subcommand("compare", "Train and evaluate all configurations");
    compare->add_option("--data", data_dir, "Dataset directory")->required();
    compare->add_option("--out", out_path, "Output directory")->required();
    compare->add_option("--seed", seed, "Master seed");
    compare->add_option("--variants", variants_csv, "Comma-separated variant list");
    auto* pre_group = compare->add_option_group("pretraining budget");
    pre_group->add_option("--pretrain-epochs", [&pretrain_ov](const CLI::results_t& r) {
        pretrain_ov.epochs = std::stoul(r[0]);
        return true;
    }, "Pretraining epochs for every variant");
    auto* ft_group = compare->add_option_group("fine-tuning budget");
    ft_group->add_option("--finetune-epochs", [&finetune_ov](const CLI::results_t& r) {
        finetune_ov.epochs = std::stoul(r[0]);
        return true;
    }, "Fine-tuning epochs for every variant");
    compare->add_option("--lr", [&pretrain_ov, &finetune_ov](const CLI::results_t& r) {
        pretrain_ov.learning_rate = finetune_ov.learning_rate = std::stod(r[0]);
        return true;
    }, "Learning rate for both phases");
    compare->add_option("--batch-size", [&pretrain_ov, &finetune_ov](const CLI::results_t& r) {
        pretrain_ov.batch_size = finetune_ov.batch_size = std::stoul(r[0]);
        return true;
    }, "Batch size for both phases");
    compare->add_option("--hidden-dropout", [&pretrain_ov, &finetune_ov](const CLI::results_t& r) {
        pretrain_ov.hidden_dropout = finetune_ov.hidden_dropout = std::stod(r[0]);
        return true;
    }, "Transformer hidden dropout for both phases");

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        const GenDataSummary s = cmd_gen_data(spec_path, out_path, seed);
        std::printf("patients            %zu\n", s.n_patients);
        std::printf("events              %zu\n", s.n_events);
        std::printf("visits kept         %zu\n", s.n_visits_kept);
        std::printf("visits dropped      %zu\n", s.n_visits_dropped);
        for (const auto& [name, n] : s.split_sizes) {
            std::printf("split %-13s %zu\n", name.c_str(), n);
        }
        std::printf("cohort patient counts\n");
        for (const auto& [name, n] : s.cohort_counts) {
            std::printf("  %-18s %zu\n", name.c_str(), n);
        }
        std::printf("chapter patient counts\n");
        for (const auto& [name, n] : s.chapter_counts) {
            std::printf("  %-18s %zu\n", name.c_str(), n);
        }
    } else if (train->parsed()) {
        const Variant v = variant_from_name(variant_str);
        Phase phase;
        if (phase_str == "pretrain") {
            phase = Phase::kPretrain;
        } else if (phase_str == "finetune") {
            phase = Phase::kFinetune;
        } else {
            throw UsageError("--phase must be pretrain or finetune");
        }
        const TrainOutcome out = cmd_train(v, phase, data_dir, out_path, seed, overrides, init_from);
        std::printf("checkpoint          %s\n", out.checkpoint_path.c_str());
        std::printf("runlog              %s\n", out.runlog_path.c_str());
        std::printf("trainable params    %zu\n", out.trainable_params);
        if (!out.result.log.empty()) {
            const EpochLog& last = out.result.log.back();
            std::printf("final loss          %.6f\n", last.loss);
            if (last.mean_auc) std::printf("final valid mAUC    %.4f\n", *last.mean_auc);
        }
    } else if (eval->parsed()) {
        const EvalOutcome out = cmd_evaluate(checkpoint, data_dir, out_path, split);
        std::printf("metrics             %s\n", out.metrics_path.c_str());
        std::printf("mean AUC            %.4f\n", out.scores.mean_auc);
        std::printf("mean APS            %.4f\n", out.scores.mean_aps);
        if (!out.scores.undefined_tasks.empty()) {
            std::printf("undefined tasks     %zu (excluded from means)\n",
                        out.scores.undefined_tasks.size());
        }
    } else if (embed->parsed()) {
        const EmbedOutcome out = cmd_embed(checkpoint, data_dir, out_path, split);
        std::printf("patients            %zu\n", out.n_patients);
        std::printf("explained variance  %.4f %.4f\n", out.explained_variance_ratio[0],
                    out.explained_variance_ratio[1]);
        for (const auto& [pair, sep] : out.separations) {
            std::printf("separation %-9s %.4f\n", pair.c_str(), sep);
        }
    } else if (compare->parsed()) {
        std::vector<Variant> variants;
        std::size_t start = 0;
        while (start <= variants_csv.size()) {
            const std::size_t comma = variants_csv.find(',', start);
            const std::string name = variants_csv.substr(
                start, comma == std::string::npos ? std::string::npos : comma - start);
            if (!name.empty()) variants.push_back(variant_from_name(name));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (variants.empty()) throw UsageError("--variants lists no configurations");
        const CompareOutcome out =
            cmd_compare(variants, data_dir, out_path, seed, pretrain_ov, finetune_ov);
        std::printf("%-8s %-10s %-10s %-16s\n", "variant", "mean_auc", "mean_aps", "params");
        for (const CompareRow& row : out.rows) {
            std::printf("%-8s %-10.4f %-10.4f %-16zu\n", variant_name(row.variant), row.mean_auc,
                        row.mean_aps, row.trainable_params);
        }
        std::printf("table               %s\n", out.table_path.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
