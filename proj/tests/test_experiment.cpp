#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "dcco/experiment.hpp"
#include "dcco/serialize.hpp"

using namespace dcco;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "dcco_experiments" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// small but complete: 4 classes, 128 samples; the 96-sample train split
// feeds 30 clients of 3 samples each
ExperimentConfig tiny_config(const fs::path& dir) {
    ExperimentConfig config;
    config.dataset.classes = 4;
    config.dataset.dim = 8;
    config.dataset.count = 128;
    config.dataset.seed = 5;
    config.test_fraction = 0.25;

    config.partition.num_clients = 30;
    config.partition.samples_per_client = 3;
    config.partition.alpha = 1000.0;
    config.partition.seed = 2;

    config.encoder.input_dim = 8;
    config.encoder.hidden_dims = {8};
    config.encoder.embed_dim = 8;
    config.encoder.projection_dims = {8, 4};
    config.encoder.groups = 2;

    config.round.clients_per_round = 4;
    config.rounds = 6;
    config.checkpoint_every = 2;
    config.probe_every = 3;

    config.probe.labeled_fraction = 0.5;
    config.probe.steps = 25;
    config.probe.lr = 0.05;

    config.seed = 7;
    config.output_dir = dir.string();
    return config;
}

std::string slurp(const fs::path& path) {
    const auto bytes = read_file(path);
    return {bytes.begin(), bytes.end()};
}

bool params_bitwise_equal(const ModelParams& a, const ModelParams& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, tensor] : a) {
        const auto it = b.find(name);
        if (it == b.end()) return false;
        if ((tensor.mat() - it->second.mat()).cwiseAbs().maxCoeff() != 0.0) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("experiment configs survive a JSON round-trip") {
    ExperimentConfig config = tiny_config("/tmp/unused");
    config.method = PretrainMethod::kFedAvgContrastive;
    config.server.optimizer = OptimizerKind::kLars;
    config.round.augment.flip_len = 2;

    const std::string text = config.to_json();
    const ExperimentConfig back = ExperimentConfig::from_json(text);
    CHECK(back.to_json() == text);
    CHECK(back.method == PretrainMethod::kFedAvgContrastive);
    CHECK(back.partition.num_clients == 30);
    CHECK(back.round.augment.flip_len == 2);
    CHECK(back.encoder.hidden_dims == std::vector<Index>{8});
}

TEST_CASE("config parsing rejects unknown and ill-typed fields by name") {
    CHECK_THROWS_AS(ExperimentConfig::from_json("not json at all"), ParseError);
    CHECK_THROWS_AS(ExperimentConfig::from_json("[1,2]"), ParseError);

    CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(R"({"roundz": 5})"),
                         doctest::Contains("roundz"), InvalidConfig);
    CHECK_THROWS_WITH_AS(
        ExperimentConfig::from_json(R"({"round": {"augment": {"sigma": 1.0}}})"),
        doctest::Contains("round.augment.sigma"), InvalidConfig);
    CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(R"({"rounds": "many"})"),
                         doctest::Contains("rounds"), InvalidConfig);
    CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(R"({"method": "gossip"})"),
                         doctest::Contains("gossip"), InvalidConfig);
}

TEST_CASE("config validation names the offending field") {
    ExperimentConfig config = tiny_config("/tmp/unused");

    SUBCASE("rounds") {
        config.rounds = 0;
        CHECK_THROWS_WITH_AS(config.validate(), doctest::Contains("rounds"), InvalidConfig);
    }
    SUBCASE("test fraction") {
        config.test_fraction = 1.0;
        CHECK_THROWS_WITH_AS(config.validate(), doctest::Contains("test_fraction"),
                             InvalidConfig);
    }
    SUBCASE("fedavg needs two samples per client") {
        config.method = PretrainMethod::kFedAvgCco;
        config.partition.samples_per_client = 1;
        config.partition.num_clients = 90;
        CHECK_THROWS_WITH_AS(config.validate(), doctest::Contains("samples_per_client"),
                             InvalidConfig);
        // the same partition is fine for DCCO
        config.method = PretrainMethod::kDcco;
        CHECK_NOTHROW(config.validate());
    }
    SUBCASE("round size vs population") {
        config.round.clients_per_round = 31;
        CHECK_THROWS_WITH_AS(config.validate(), doctest::Contains("clients_per_round"),
                             InvalidConfig);
    }
    SUBCASE("encoder width vs data width") {
        config.encoder.input_dim = 16;
        CHECK_THROWS_WITH_AS(config.validate(), doctest::Contains("input_dim"), InvalidConfig);
    }
}

TEST_CASE("presets parse, validate, and mirror the published table shapes") {
    for (const auto& name : preset_names()) {
        CAPTURE(name);
        const ExperimentConfig config = preset(name);
        CHECK_NOTHROW(config.validate());
        // every preset fills the 1500-sample train split as far as whole
        // clients allow
        const int used = config.partition.num_clients * config.partition.samples_per_client;
        CHECK(used <= 1500);
        CHECK(used > 1500 - config.partition.samples_per_client);
    }

    const ExperimentConfig one = preset("table1-noniid-1spc");
    CHECK(one.partition.samples_per_client == 1);
    CHECK(one.partition.alpha == 0.0);
    CHECK(one.round.clients_per_round == 64);
    CHECK(one.partition.num_clients == 1500);

    const ExperimentConfig iid = preset("table1-iid-8spc");
    CHECK(iid.partition.alpha == 1000.0);

    const ExperimentConfig derm = preset("table2-cpr32");
    CHECK(derm.server.optimizer == OptimizerKind::kLars);
    CHECK(derm.round.clients_per_round == 32);

    CHECK_THROWS_WITH_AS(preset("table3"), doctest::Contains("table1-noniid-1spc"),
                         InvalidConfig);

    // a preset flipped to a fedavg method keeps its parse-time guarantees
    ExperimentConfig flipped = preset("table1-noniid-1spc");
    flipped.method = PretrainMethod::kFedAvgCco;
    CHECK_THROWS_AS(flipped.validate(), InvalidConfig);
}

TEST_CASE("metrics records round-trip as JSON lines") {
    MetricsRecord record;
    record.round = 17;
    record.loss = 3.25;
    record.lr = 0.004999999999;
    const std::string line = record.to_json_line();
    CHECK(line.find('\n') == std::string::npos);

    const MetricsRecord back = MetricsRecord::from_json_line(line);
    CHECK(back.round == 17);
    CHECK(back.loss == record.loss);
    CHECK(back.lr == record.lr);
    CHECK_FALSE(back.probe_accuracy.has_value());

    record.probe_accuracy = 0.75;
    const MetricsRecord with_probe = MetricsRecord::from_json_line(record.to_json_line());
    CHECK(with_probe.probe_accuracy == 0.75);

    CHECK_THROWS_AS(MetricsRecord::from_json_line("{"), ParseError);
    CHECK_THROWS_AS(MetricsRecord::from_json_line(R"({"round": 1})"), ParseError);
}

TEST_CASE("checkpoints restore the model and optimizer bitwise") {
    EncoderConfig cfg;
    cfg.input_dim = 4;
    cfg.hidden_dims = {4};
    cfg.embed_dim = 4;
    cfg.projection_dims = {4, 2};
    cfg.groups = 2;

    Checkpoint checkpoint;
    checkpoint.round = 12;
    checkpoint.model = init_params(cfg, 3);
    checkpoint.optimizer.kind = OptimizerKind::kAdam;
    // run two updates so the moment maps are non-trivial
    NamedGrads grads;
    for (const auto& [name, tensor] : checkpoint.model) {
        grads.emplace(name, Tensor::ones(tensor.shape()));
    }
    apply(checkpoint.optimizer, checkpoint.model, grads, 0.01);
    apply(checkpoint.optimizer, checkpoint.model, grads, 0.01);

    const fs::path dir = fresh_dir("checkpoint");
    const fs::path path = dir / "round-000012.ckpt";
    save_checkpoint(path, checkpoint);
    const Checkpoint back = load_checkpoint(path);

    CHECK(back.round == 12);
    CHECK(back.optimizer.kind == OptimizerKind::kAdam);
    CHECK(back.optimizer.step == 2);
    CHECK(params_bitwise_equal(back.model, checkpoint.model));
    CHECK(params_bitwise_equal(back.optimizer.m, checkpoint.optimizer.m));
    CHECK(params_bitwise_equal(back.optimizer.v, checkpoint.optimizer.v));

    SUBCASE("corrupted files are named, not crashed on") {
        auto bytes = read_file(path);
        bytes[0] = 'X';
        write_file_atomic(path, bytes);
        CHECK_THROWS_AS(load_checkpoint(path), ParseError);

        write_file_atomic(path, std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 20));
        CHECK_THROWS_AS(load_checkpoint(path), ParseError);
    }
}

TEST_CASE("an experiment run lays down the full artifact set") {
    const fs::path dir = fresh_dir("smoke");
    const ExperimentConfig config = tiny_config(dir);
    const ExperimentResult result = run_experiment(config);

    CHECK(fs::exists(dir / "config.json"));
    CHECK(fs::exists(dir / "metrics.jsonl"));
    CHECK(fs::exists(dir / "timings.jsonl"));
    CHECK(fs::exists(dir / "checkpoints" / "round-000002.ckpt"));
    CHECK(fs::exists(dir / "checkpoints" / "round-000004.ckpt"));
    CHECK(fs::exists(dir / "checkpoints" / "round-000006.ckpt"));
    CHECK(fs::exists(dir / "probes" / "round-000003.json"));
    CHECK(fs::exists(dir / "probes" / "round-000006.json"));
    CHECK(fs::exists(dir / "probes" / "final-linear.json"));
    CHECK(fs::exists(dir / "probes" / "final-finetune.json"));
    CHECK(fs::exists(dir / "probes" / "final-scratch.json"));

    // the config echo reproduces the effective config
    CHECK(ExperimentConfig::from_json(slurp(dir / "config.json")).to_json() == config.to_json());

    REQUIRE(result.metrics.size() == 6);
    for (int i = 0; i < 6; ++i) {
        CHECK(result.metrics[static_cast<std::size_t>(i)].round == i + 1);
    }
    CHECK(result.metrics[2].probe_accuracy.has_value());
    CHECK(result.metrics[5].probe_accuracy.has_value());
    CHECK_FALSE(result.metrics[0].probe_accuracy.has_value());
    // cosine schedule: first round at base lr, decaying after
    CHECK(result.metrics[0].lr == 5e-3);
    CHECK(result.metrics[5].lr < 5e-3);

    CHECK(result.final_linear.accuracy >= 0.0);
    CHECK(result.final_linear.accuracy <= 1.0);
    REQUIRE(result.final_finetune.has_value());
    REQUIRE(result.final_scratch.has_value());

    // the stream on disk matches the in-memory records
    int lines = 0;
    std::istringstream in(slurp(dir / "metrics.jsonl"));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const MetricsRecord record = MetricsRecord::from_json_line(line);
        CHECK(record.round == ++lines);
    }
    CHECK(lines == 6);
}

TEST_CASE("identical configs give bitwise-identical metrics and parameters") {
    const fs::path dir_a = fresh_dir("det_a");
    const fs::path dir_b = fresh_dir("det_b");
    ExperimentConfig config_a = tiny_config(dir_a);
    config_a.rounds = 4;
    ExperimentConfig config_b = config_a;
    config_b.output_dir = dir_b.string();
    config_b.round.workers = 4;  // worker count must not matter

    const ExperimentResult a = run_experiment(config_a);
    const ExperimentResult b = run_experiment(config_b);

    CHECK(params_bitwise_equal(a.model, b.model));
    CHECK(slurp(dir_a / "metrics.jsonl") == slurp(dir_b / "metrics.jsonl"));
    CHECK(a.final_linear.to_json() == b.final_linear.to_json());
}

TEST_CASE("resume reproduces an uninterrupted run exactly") {
    const fs::path dir_a = fresh_dir("resume_full");
    const fs::path dir_b = fresh_dir("resume_cut");
    const ExperimentConfig config_a = tiny_config(dir_a);
    run_experiment(config_a);

    // simulate a crash after round 4's checkpoint: later artifacts lost,
    // metrics cut mid-append with a torn trailing line
    fs::copy(dir_a, dir_b, fs::copy_options::recursive);
    fs::remove(dir_b / "checkpoints" / "round-000006.ckpt");
    fs::remove(dir_b / "probes" / "round-000006.json");
    fs::remove(dir_b / "probes" / "final-linear.json");
    fs::remove(dir_b / "probes" / "final-finetune.json");
    fs::remove(dir_b / "probes" / "final-scratch.json");
    {
        std::istringstream in(slurp(dir_b / "metrics.jsonl"));
        std::string line, kept;
        for (int i = 0; i < 4 && std::getline(in, line); ++i) kept += line + "\n";
        kept += "{\"round\": 5, \"los";  // torn write
        std::ofstream out(dir_b / "metrics.jsonl", std::ios::trunc);
        out << kept;
    }

    ExperimentConfig config_b = config_a;
    config_b.output_dir = dir_b.string();
    const ExperimentResult resumed = run_experiment(config_b, /*resume=*/true);
    const ExperimentResult full = run_experiment(config_a);  // fresh rerun for comparison

    CHECK(params_bitwise_equal(resumed.model, full.model));
    CHECK(slurp(dir_a / "metrics.jsonl") == slurp(dir_b / "metrics.jsonl"));
    CHECK(slurp(dir_a / "probes" / "final-linear.json") ==
          slurp(dir_b / "probes" / "final-linear.json"));
    CHECK(slurp(dir_a / "checkpoints" / "round-000006.ckpt") ==
          slurp(dir_b / "checkpoints" / "round-000006.ckpt"));
    REQUIRE(resumed.metrics.size() == 6);
    CHECK(resumed.metrics[2].probe_accuracy.has_value());

    SUBCASE("resume with no checkpoint behaves like a fresh run") {
        const fs::path dir_c = fresh_dir("resume_fresh");
        ExperimentConfig config_c = config_a;
        config_c.output_dir = dir_c.string();
        run_experiment(config_c, /*resume=*/true);
        CHECK(slurp(dir_c / "metrics.jsonl") == slurp(dir_a / "metrics.jsonl"));
    }
}

TEST_CASE("every pretraining method drives the loop") {
    for (const PretrainMethod method :
         {PretrainMethod::kFedAvgCco, PretrainMethod::kFedAvgContrastive,
          PretrainMethod::kCentralizedCco}) {
        CAPTURE(pretrain_method_name(method));
        const fs::path dir =
            fresh_dir(std::string("method_") + pretrain_method_name(method));
        ExperimentConfig config = tiny_config(dir);
        config.method = method;
        config.rounds = 3;
        config.final_finetune = false;
        const ExperimentResult result = run_experiment(config);
        CHECK(result.metrics.size() == 3);
        for (const auto& record : result.metrics) {
            CHECK(std::isfinite(record.loss));
        }
    }
}

TEST_CASE("plot export mirrors the metrics stream") {
    const fs::path dir = fresh_dir("plot");
    const fs::path metrics = dir / "metrics.jsonl";
    const fs::path csv = dir / "plot.csv";

    SUBCASE("empty metrics give a header-only file") {
        write_file_atomic(metrics, std::vector<std::uint8_t>{});
        export_plot_data(metrics, csv);
        CHECK(slurp(csv) == "round,loss,lr,probe_accuracy\n");
    }
    SUBCASE("records round-trip with blank probe cells") {
        MetricsRecord r1{1, 2.5, 0.005, std::nullopt};
        MetricsRecord r2{2, 2.0, 0.004, 0.5};
        std::ofstream out(metrics);
        out << r1.to_json_line() << "\n" << r2.to_json_line() << "\n";
        out.close();
        export_plot_data(metrics, csv);
        const std::string text = slurp(csv);
        CHECK(text == "round,loss,lr,probe_accuracy\n1,2.5,0.005,\n2,2.0,0.004,0.5\n");
    }
    SUBCASE("corrupt lines are reported with their line number") {
        std::ofstream out(metrics);
        out << "{\"round\": 1, \"loss\": 1.0, \"lr\": 0.1}\nnot json\n";
        out.close();
        CHECK_THROWS_WITH_AS(export_plot_data(metrics, csv), doctest::Contains("line 2"),
                             ParseError);
    }
}

TEST_CASE("randomized equivalence trials stay under tolerance") {
    const EquivalenceReport report = verify_equivalence(10, 3, 1e-8);
    CHECK(report.trials.size() == 10);
    CHECK(report.pass);
    CHECK(report.worst <= 1e-8);
    for (const auto& trial : report.trials) {
        CHECK(trial.clients >= 2);
        CHECK_FALSE(trial.counts.empty());
        CHECK(trial.max_deviation <= 1e-8);
    }
    CHECK(report.summary().find("PASS") != std::string::npos);

    SUBCASE("an exact-zero tolerance is unattainable") {
        const EquivalenceReport strict = verify_equivalence(10, 3, 0.0);
        CHECK_FALSE(strict.pass);
        CHECK(strict.summary().find("FAIL") != std::string::npos);
    }
    SUBCASE("trial count is validated") {
        CHECK_THROWS_AS(verify_equivalence(0, 1, 1e-8), InvalidConfig);
    }
}
