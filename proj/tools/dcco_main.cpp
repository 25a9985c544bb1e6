#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dcco/dataset.hpp"
#include "dcco/experiment.hpp"
#include "dcco/probe.hpp"
#include "dcco/serialize.hpp"

namespace fs = std::filesystem;
using namespace dcco;

namespace {

// Exit codes are part of the interface: scripts branch on them.
constexpr int kOk = 0;
constexpr int kNumericFailure = 1;
constexpr int kConfigError = 2;
constexpr int kIoError = 3;

std::string slurp(const fs::path& path) {
    const auto bytes = read_file(path);
    return {bytes.begin(), bytes.end()};
}

// Options shared by every subcommand that needs a full experiment config.
struct ConfigSource {
    std::string config_path;
    std::string preset_name;

    void attach(CLI::App* cmd) {
        auto* file = cmd->add_option("-c,--config", config_path,
                                     "experiment config (JSON file)")
                         ->check(CLI::ExistingFile);
        cmd->add_option("-p,--preset", preset_name, "named built-in config")
            ->excludes(file);
    }

    ExperimentConfig load() const {
        if (!config_path.empty()) return ExperimentConfig::from_json(slurp(config_path));
        if (!preset_name.empty()) return preset(preset_name);
        throw InvalidConfig("either --config or --preset is required");
    }

    // A stable per-config name so runs land in predictable directories.
    std::string run_name() const {
        if (!preset_name.empty()) return preset_name;
        return fs::path(config_path).stem().string();
    }
};

// Precedence: explicit flag > config file > $DCCO_OUTPUT_ROOT/<run name>.
std::string resolve_output_dir(const std::string& flag_value, const std::string& config_value,
                               const std::string& run_name) {
    if (!flag_value.empty()) return flag_value;
    if (!config_value.empty()) return config_value;
    if (const char* root = std::getenv("DCCO_OUTPUT_ROOT"); root && *root) {
        return (fs::path(root) / run_name).string();
    }
    throw InvalidConfig(
        "no output directory: pass --output, set output_dir in the config, "
        "or set DCCO_OUTPUT_ROOT");
}

int run_pretrain(const ConfigSource& source, const CLI::App& cmd, std::string output_flag,
                 const std::string& method_flag, int rounds_flag, std::uint64_t seed_flag,
                 int workers_flag, int clients_flag, int local_steps_flag, double server_lr_flag,
                 const std::string& server_opt_flag, double lambda_flag, double temperature_flag,
                 const std::string& dataset_flag, bool resume, bool no_finetune) {
    ExperimentConfig config = source.load();

    // Flags override the file; only flags the user actually passed count.
    if (cmd.count("--method")) config.method = pretrain_method_from_name(method_flag);
    if (cmd.count("--rounds")) config.rounds = rounds_flag;
    if (cmd.count("--seed")) config.seed = seed_flag;
    if (cmd.count("--workers")) config.round.workers = workers_flag;
    if (cmd.count("--clients-per-round")) config.round.clients_per_round = clients_flag;
    if (cmd.count("--local-steps")) config.round.local_steps = local_steps_flag;
    if (cmd.count("--server-lr")) config.server.lr = server_lr_flag;
    if (cmd.count("--server-optimizer"))
        config.server.optimizer = optimizer_from_name(server_opt_flag);
    if (cmd.count("--lambda")) config.round.lambda = lambda_flag;
    if (cmd.count("--temperature")) config.round.temperature = temperature_flag;
    if (cmd.count("--dataset")) config.dataset_path = dataset_flag;
    if (no_finetune) config.final_finetune = false;
    config.output_dir = resolve_output_dir(output_flag, config.output_dir, source.run_name());

    config.validate();
    const ExperimentResult result = run_experiment(config, resume);

    bool finite = true;
    for (const auto& record : result.metrics) finite = finite && std::isfinite(record.loss);

    std::cout << "pretrained " << pretrain_method_name(config.method) << " for "
              << config.rounds << " rounds -> " << config.output_dir << "\n";
    std::cout << "final loss: " << result.metrics.back().loss << "\n";
    std::cout << "linear probe accuracy: " << result.final_linear.accuracy << "\n";
    if (result.final_finetune) {
        std::cout << "finetune accuracy: " << result.final_finetune->accuracy << "\n";
        std::cout << "scratch accuracy: " << result.final_scratch->accuracy << "\n";
    }
    if (!finite) {
        std::cerr << "error: non-finite training loss; see metrics.jsonl\n";
        return kNumericFailure;
    }
    return kOk;
}

int run_probe(const ConfigSource& source, const CLI::App& cmd, const std::string& checkpoint_path,
              const std::string& protocol_flag, double fraction_flag, int steps_flag,
              double lr_flag, std::uint64_t seed_flag, const std::string& out_path) {
    ExperimentConfig config = source.load();
    ProbeConfig probe = config.probe;
    if (cmd.count("--protocol")) probe.protocol = probe_protocol_from_name(protocol_flag);
    if (cmd.count("--labeled-fraction")) probe.labeled_fraction = fraction_flag;
    if (cmd.count("--steps")) probe.steps = steps_flag;
    if (cmd.count("--lr")) probe.lr = lr_flag;
    if (cmd.count("--probe-seed")) probe.seed = seed_flag;
    probe.validate();

    // Reconstruct the exact train/test split the pretraining run used, so the
    // probe never sees held-out rows in its labeled pool.
    const Dataset full = config.dataset_path.empty() ? synthetic_dataset(config.dataset)
                                                     : load_dataset(config.dataset_path);
    const DatasetSplit split = split_dataset(full, config.test_fraction, config.seed);

    const Checkpoint checkpoint = load_checkpoint(checkpoint_path);
    EvalReport report;
    switch (probe.protocol) {
        case ProbeProtocol::kLinear:
            report = linear_eval(config.encoder, checkpoint.model, split.train, split.test, probe);
            break;
        case ProbeProtocol::kFinetune:
            report = finetune(config.encoder, checkpoint.model, split.train, split.test, probe);
            break;
        case ProbeProtocol::kScratch:
            report = scratch_baseline(config.encoder, split.train, split.test, probe);
            break;
    }

    const std::string text = report.to_json();
    std::cout << text << "\n";
    if (!out_path.empty()) {
        write_file_atomic(out_path, std::vector<std::uint8_t>(text.begin(), text.end()));
    }
    return std::isfinite(report.accuracy) ? kOk : kNumericFailure;
}

int run_partition_inspect(const ConfigSource& source, bool as_json) {
    const ExperimentConfig config = source.load();
    config.validate();

    const Dataset full = config.dataset_path.empty() ? synthetic_dataset(config.dataset)
                                                     : load_dataset(config.dataset_path);
    const DatasetSplit split = split_dataset(full, config.test_fraction, config.seed);
    PartitionLog log;
    const std::vector<ClientDataset> clients =
        dirichlet_partition(split.train, config.partition, &log);

    const std::vector<double> prior = class_prior(split.train);
    int single_class = 0;
    int tv_clients = 0;
    double tv_max = 0.0;
    double tv_sum = 0.0;
    for (const auto& client : clients) {
        std::vector<double> hist(prior.size(), 0.0);
        for (const int label : client.labels) hist[static_cast<std::size_t>(label)] += 1.0;
        int present = 0;
        for (const double count : hist) present += count > 0.0;
        single_class += present == 1;

        // total variation against the pool, only meaningful with enough samples
        if (client.size() >= 16) {
            double tv = 0.0;
            for (std::size_t c = 0; c < hist.size(); ++c) {
                tv += std::abs(hist[c] / static_cast<double>(client.size()) - prior[c]);
            }
            tv *= 0.5;
            tv_max = std::max(tv_max, tv);
            tv_sum += tv;
            ++tv_clients;
        }
    }

    nlohmann::json summary;
    summary["alpha"] = config.partition.alpha;
    summary["classes"] = split.train.num_classes;
    summary["clients"] = static_cast<int>(clients.size());
    summary["samples_per_client"] = config.partition.samples_per_client;
    summary["pool_size"] = static_cast<std::int64_t>(split.train.size());
    summary["single_class_fraction"] =
        static_cast<double>(single_class) / static_cast<double>(clients.size());
    summary["fallback_events"] = log.fallback_events;
    summary["tv_clients"] = tv_clients;  // clients large enough to score
    if (tv_clients > 0) {
        summary["tv_max"] = tv_max;
        summary["tv_mean"] = tv_sum / static_cast<double>(tv_clients);
    }

    if (as_json) {
        std::cout << summary.dump(2) << "\n";
    } else {
        std::cout << clients.size() << " clients x " << config.partition.samples_per_client
                  << " samples from a pool of " << split.train.size() << " ("
                  << split.train.num_classes << " classes, alpha " << config.partition.alpha
                  << ")\n";
        std::cout << "single-class clients: " << single_class << "/" << clients.size() << "\n";
        if (tv_clients > 0) {
            std::cout << "total variation vs pool (clients with >= 16 samples): max " << tv_max
                      << ", mean " << tv_sum / static_cast<double>(tv_clients) << " over "
                      << tv_clients << " clients\n";
        } else {
            std::cout << "no client has >= 16 samples; total variation not scored\n";
        }
        std::cout << "exhausted-class fallbacks during sampling: " << log.fallback_events
                  << "\n";
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale simulator for federated dual-encoder pretraining"};
    app.require_subcommand(1);

    // pretrain ---------------------------------------------------------------
    auto* pretrain = app.add_subcommand("pretrain", "run a pretraining experiment");
    ConfigSource pretrain_source;
    pretrain_source.attach(pretrain);
    std::string output_flag, method_flag, server_opt_flag, dataset_flag;
    int rounds_flag = 0, workers_flag = 1, clients_flag = 0, local_steps_flag = 1;
    std::uint64_t seed_flag = 0;
    double server_lr_flag = 0.0, lambda_flag = 0.0, temperature_flag = 0.0;
    bool resume = false, no_finetune = false;
    pretrain->add_option("-o,--output", output_flag, "output directory");
    pretrain->add_option("--method", method_flag, "pretraining method")
        ->check(CLI::IsMember(
            {"dcco", "fedavg_cco", "fedavg_contrastive", "centralized_cco"}));
    pretrain->add_option("--rounds", rounds_flag, "training rounds");
    pretrain->add_option("--seed", seed_flag, "experiment seed");
    pretrain->add_option("--workers", workers_flag, "client threads per round");
    pretrain->add_option("--clients-per-round", clients_flag, "sampled clients per round");
    pretrain->add_option("--local-steps", local_steps_flag, "gradient steps per client");
    pretrain->add_option("--server-lr", server_lr_flag, "server learning rate");
    pretrain->add_option("--server-optimizer", server_opt_flag, "server optimizer")
        ->check(CLI::IsMember({"sgd", "adam", "lars"}));
    pretrain->add_option("--lambda", lambda_flag, "off-diagonal loss weight");
    pretrain->add_option("--temperature", temperature_flag, "contrastive temperature");
    pretrain->add_option("--dataset", dataset_flag, "dataset file (overrides synthetic)")
        ->check(CLI::ExistingFile);
    pretrain->add_flag("--resume", resume, "continue from the latest checkpoint");
    pretrain->add_flag("--no-finetune", no_finetune, "skip the final finetune/scratch probes");

    // probe ------------------------------------------------------------------
    auto* probe_cmd = app.add_subcommand("probe", "evaluate a checkpoint");
    ConfigSource probe_source;
    probe_source.attach(probe_cmd);
    std::string checkpoint_path, protocol_flag, probe_out;
    double fraction_flag = 1.0, probe_lr_flag = 0.0;
    int steps_flag = 0;
    std::uint64_t probe_seed_flag = 0;
    probe_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file to evaluate")
        ->required()
        ->check(CLI::ExistingFile);
    probe_cmd->add_option("--protocol", protocol_flag, "evaluation protocol")
        ->check(CLI::IsMember({"linear", "finetune", "scratch"}));
    probe_cmd->add_option("--labeled-fraction", fraction_flag, "labeled fraction of the pool");
    probe_cmd->add_option("--steps", steps_flag, "classifier training steps");
    probe_cmd->add_option("--lr", probe_lr_flag, "classifier learning rate");
    probe_cmd->add_option("--probe-seed", probe_seed_flag, "probe seed");
    probe_cmd->add_option("--out", probe_out, "also write the report here");

    // verify-equivalence -----------------------------------------------------
    auto* verify = app.add_subcommand(
        "verify-equivalence",
        "compare federated rounds against centralized steps on the pooled batch");
    int trials = 100;
    std::uint64_t verify_seed = 1;
    double tolerance = 1e-8;
    verify->add_option("--trials", trials, "randomized trials");
    verify->add_option("--seed", verify_seed, "trial stream seed");
    verify->add_option("--tolerance", tolerance, "max allowed parameter deviation");

    // export-plot ------------------------------------------------------------
    auto* export_cmd = app.add_subcommand("export-plot", "convert a metrics stream to CSV");
    std::string metrics_path, csv_path;
    export_cmd->add_option("--metrics", metrics_path, "metrics.jsonl to read")
        ->required()
        ->check(CLI::ExistingFile);
    export_cmd->add_option("--out", csv_path, "CSV file to write")->required();

    // partition-inspect ------------------------------------------------------
    auto* inspect = app.add_subcommand("partition-inspect",
                                       "summarize the client partition a config produces");
    ConfigSource inspect_source;
    inspect_source.attach(inspect);
    bool inspect_json = false;
    inspect->add_flag("--json", inspect_json, "machine-readable output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help or the usage error
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (*pretrain) {
            return run_pretrain(pretrain_source, *pretrain, output_flag, method_flag,
                                rounds_flag, seed_flag, workers_flag, clients_flag,
                                local_steps_flag, server_lr_flag, server_opt_flag, lambda_flag,
                                temperature_flag, dataset_flag, resume, no_finetune);
        }
        if (*probe_cmd) {
            return run_probe(probe_source, *probe_cmd, checkpoint_path, protocol_flag,
                             fraction_flag, steps_flag, probe_lr_flag, probe_seed_flag,
                             probe_out);
        }
        if (*verify) {
            const EquivalenceReport report = verify_equivalence(trials, verify_seed, tolerance);
            std::cout << report.summary();
            return report.pass ? kOk : kNumericFailure;
        }
        if (*export_cmd) {
            export_plot_data(metrics_path, csv_path);
            std::cout << "wrote " << csv_path << "\n";
            return kOk;
        }
        if (*inspect) {
            return run_partition_inspect(inspect_source, inspect_json);
        }
    } catch (const InvalidConfig& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const ParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kIoError;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumericFailure;
    }
    return kOk;
}
