#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dcco/dataset.hpp"
#include "dcco/probe.hpp"
#include "dcco/protocol.hpp"

namespace dcco {

// Pretraining dispatch. The first three map onto federated rounds; the last
// trains on the pooled views of the sampled clients in one centralized step
// per round and serves as the upper-bound baseline.
enum class PretrainMethod : std::uint8_t {
    kDcco,
    kFedAvgCco,
    kFedAvgContrastive,
    kCentralizedCco,
};

const char* pretrain_method_name(PretrainMethod method);
PretrainMethod pretrain_method_from_name(const std::string& name);

struct ServerConfig {
    OptimizerKind optimizer = OptimizerKind::kAdam;
    double lr = 5e-3;
    bool cosine_decay = true;  // cosine over the configured rounds
};

// Everything one pretraining run needs. JSON is the on-disk form; every
// rejection names the offending field, and unknown fields are errors rather
// than silently ignored typos.
struct ExperimentConfig {
    SyntheticConfig dataset;   // generation spec, used when dataset_path is empty
    std::string dataset_path;  // optional file; overrides synthetic generation
    double test_fraction = 0.25;

    PartitionSpec partition;
    PretrainMethod method = PretrainMethod::kDcco;
    int rounds = 200;
    RoundConfig round;  // round.server_lr is driven by the schedule, not config

    EncoderConfig encoder;
    ServerConfig server;

    ProbeConfig probe;           // periodic and final linear evaluation
    bool final_finetune = true;  // also run finetune + scratch at the end
    int checkpoint_every = 0;    // rounds between checkpoints; 0 = rounds/20
    int probe_every = 0;         // rounds between probes; 0 = rounds/10

    std::uint64_t seed = 0;
    std::string output_dir;

    int checkpoint_cadence() const;
    int probe_cadence() const;

    void validate() const;
    std::string to_json() const;
    static ExperimentConfig from_json(const std::string& text);
};

// One line of the metrics stream. Deliberately free of wall-clock time so the
// file is byte-identical across reruns; timings live in a sidecar.
struct MetricsRecord {
    int round = 0;  // 1-based: "state after this many rounds"
    double loss = 0.0;
    double lr = 0.0;
    std::optional<double> probe_accuracy;

    std::string to_json_line() const;
    static MetricsRecord from_json_line(const std::string& line);
};

struct ExperimentResult {
    ModelParams model;
    std::vector<MetricsRecord> metrics;
    EvalReport final_linear;
    std::optional<EvalReport> final_finetune;
    std::optional<EvalReport> final_scratch;
};

// Runs pretraining with periodic checkpoints and probes, streaming metrics to
// <output_dir>/metrics.jsonl. With `resume`, picks up from the latest
// checkpoint and reproduces exactly what an uninterrupted run would have
// written.
ExperimentResult run_experiment(const ExperimentConfig& config, bool resume = false);

struct Checkpoint {
    std::uint32_t round = 0;
    ModelParams model;
    OptimizerState optimizer;
};
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct EquivalenceTrial {
    int clients = 0;                  // participants this trial
    int dim = 0;                      // correlation-loss width d
    std::vector<std::int64_t> counts;  // per-participant sample counts
    double max_deviation = 0.0;
};

struct EquivalenceReport {
    double tolerance = 0.0;
    double worst = 0.0;
    bool pass = true;
    std::vector<EquivalenceTrial> trials;

    std::string summary() const;  // one line per trial plus a verdict
};

// Randomized one-round-vs-one-centralized-step comparisons over varied client
// counts, per-client batch sizes, loss widths, and encoder shapes.
EquivalenceReport verify_equivalence(int trials, std::uint64_t seed, double tolerance);

// metrics.jsonl -> CSV with columns: round,loss,lr,probe_accuracy
void export_plot_data(const std::filesystem::path& metrics_path,
                      const std::filesystem::path& out_path);

// Ready-made configs mirroring the published result-table columns, scaled to
// the synthetic desk-size dataset.
std::vector<std::string> preset_names();
ExperimentConfig preset(const std::string& name);

}  // namespace dcco
