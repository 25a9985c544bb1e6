#include "dcco/probe.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include <json.hpp>

#include "dcco/errors.hpp"
#include "dcco/graph.hpp"
#include "dcco/rng.hpp"

namespace dcco {

namespace {

constexpr std::uint64_t kSplitTag = 0x5411full;
constexpr std::uint64_t kSubsetTag = 0x5ab5e7ull;
constexpr std::uint64_t kClassifierTag = 0xc1a55ull;
constexpr std::uint64_t kScratchTag = 0x5c7a7cull;

Dataset gather_rows(const Dataset& source, const std::vector<std::size_t>& rows) {
    Dataset out;
    out.num_classes = source.num_classes;
    Matrix features(static_cast<Index>(rows.size()), source.features.cols());
    out.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        features.row(static_cast<Index>(i)) =
            source.features.mat().row(static_cast<Index>(rows[i]));
        out.labels.push_back(source.labels[rows[i]]);
    }
    out.features = Tensor::from_matrix(std::move(features));
    return out;
}

// Class-stratified row selection: every represented class keeps at least one
// sample, larger classes keep round(fraction * size).
std::vector<std::size_t> stratified_rows(const Dataset& data, double fraction, Rng& rng) {
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.num_classes));
    for (Index i = 0; i < data.size(); ++i) {
        by_class[static_cast<std::size_t>(data.labels[static_cast<std::size_t>(i)])].push_back(
            static_cast<std::size_t>(i));
    }
    std::vector<std::size_t> keep;
    for (auto& rows : by_class) {
        if (rows.empty()) continue;
        rng.shuffle(rows);
        const auto want = std::max<std::size_t>(
            1, static_cast<std::size_t>(
                   std::llround(fraction * static_cast<double>(rows.size()))));
        for (std::size_t i = 0; i < std::min(want, rows.size()); ++i) keep.push_back(rows[i]);
    }
    std::sort(keep.begin(), keep.end());
    return keep;
}

Tensor one_hot(const std::vector<int>& labels, int num_classes) {
    Matrix m = Matrix::Zero(static_cast<Index>(labels.size()), num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        m(static_cast<Index>(i), labels[i]) = 1.0;
    }
    return Tensor::from_matrix(std::move(m));
}

// Fan-in-scaled uniform init, matching the encoder layers' convention.
ModelParams init_classifier(Index feature_dim, int num_classes, std::uint64_t seed) {
    Rng rng(Rng::derive({seed, kClassifierTag}));
    const double bound = std::sqrt(6.0 / static_cast<double>(feature_dim));
    Matrix w(num_classes, feature_dim);
    for (Index r = 0; r < w.rows(); ++r) {
        for (Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
    }
    ModelParams params;
    params.emplace("classifier.weight", Tensor::from_matrix(std::move(w)));
    params.emplace("classifier.bias", Tensor::zeros({1, num_classes}));
    return params;
}

// Mean softmax cross-entropy with the usual stop-gradient max shift; the
// shift is exact (d loss / d shift == 0) so gradients stay textbook softmax.
Value softmax_xent(Graph& g, Value logits, const Tensor& onehot) {
    const Index n = onehot.rows();
    const Index c = onehot.cols();
    const Value shift = stop_gradient(max_axis(logits, 1));  // N x 1
    const Value shifted = logits - broadcast_to(shift, n, c);
    const Value lse = log(sum_axis(exp(shifted), 1)) + shift;           // N x 1
    const Value picked = sum_axis(logits * g.constant(onehot), 1);      // N x 1
    return sum_all(lse - picked) * (1.0 / static_cast<double>(n));
}

double top1_accuracy(const Matrix& logits, const std::vector<int>& labels) {
    Index correct = 0;
    for (Index i = 0; i < logits.rows(); ++i) {
        Index best = 0;
        logits.row(i).maxCoeff(&best);
        if (static_cast<int>(best) == labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

Matrix classifier_logits(const Tensor& features, const ModelParams& params) {
    const Matrix& w = params.at("classifier.weight").mat();
    const Matrix& b = params.at("classifier.bias").mat();
    return (features.mat() * w.transpose()).rowwise() + b.row(0);
}

struct TrainOutcome {
    ModelParams params;
    std::vector<double> losses;
};

// Full-batch softmax training. When `through_encoder` is true, `inputs` are
// raw samples pushed through the encoder trunk each step and every parameter
// in `params` (encoder and classifier alike) receives updates; otherwise
// `inputs` are fixed embeddings and `params` holds only the classifier.
TrainOutcome train_softmax(const EncoderConfig& cfg, ModelParams params, const Tensor& inputs,
                           const Tensor& onehot, const ProbeConfig& config,
                           bool through_encoder) {
    OptimizerState opt;
    opt.kind = config.optimizer;
    std::vector<double> losses;
    losses.reserve(static_cast<std::size_t>(config.steps));
    const Index n = inputs.rows();
    for (int step = 0; step < config.steps; ++step) {
        Graph g;
        BoundParams bound = bind_params(g, params);
        const Value batch = g.constant(inputs);
        const Value features = through_encoder ? encode(cfg, bound, batch).embedding : batch;
        const Value logits =
            matmul(features, transpose(bound.at("classifier.weight"))) +
            broadcast_to(bound.at("classifier.bias"), n, onehot.cols());
        const Value loss = softmax_xent(g, logits, onehot);
        GradientMap grads = g.backward(loss);
        losses.push_back(g.value(loss).mat()(0, 0));
        NamedGrads named;
        for (const auto& [name, value] : bound) named.emplace(name, grads.grad(value));
        apply(opt, params, named,
              cosine_lr(config.lr, static_cast<std::uint64_t>(step),
                        static_cast<std::uint64_t>(config.steps)));
    }
    return {std::move(params), std::move(losses)};
}

void check_probe_inputs(const EncoderConfig& cfg, const Dataset& labeled, const Dataset& test) {
    cfg.validate();
    labeled.validate();
    test.validate();
    if (labeled.dim() != cfg.input_dim || test.dim() != cfg.input_dim) {
        throw ShapeMismatch("probe data width " + std::to_string(labeled.dim()) + "/" +
                            std::to_string(test.dim()) + " does not match encoder input " +
                            std::to_string(cfg.input_dim));
    }
    if (labeled.num_classes != test.num_classes) {
        throw InvalidConfig("labeled pool has " + std::to_string(labeled.num_classes) +
                            " classes but the test split has " +
                            std::to_string(test.num_classes));
    }
}

EvalReport run_joint(const EncoderConfig& cfg, ModelParams encoder, const Dataset& labeled,
                     const Dataset& test, const ProbeConfig& config, const char* protocol) {
    check_probe_inputs(cfg, labeled, test);
    config.validate();

    Rng subset_rng(Rng::derive({config.seed, kSubsetTag}));
    const auto rows = stratified_rows(labeled, config.labeled_fraction, subset_rng);
    const Dataset subset = gather_rows(labeled, rows);

    const Index feature_dim = cfg.embedding_dim();
    ModelParams merged = std::move(encoder);
    for (auto& [name, tensor] : init_classifier(feature_dim, labeled.num_classes, config.seed)) {
        merged.emplace(name, std::move(tensor));
    }

    TrainOutcome outcome = train_softmax(cfg, std::move(merged), subset.features,
                                         one_hot(subset.labels, labeled.num_classes), config,
                                         /*through_encoder=*/true);

    ModelParams trained_encoder;
    ModelParams classifier;
    for (auto& [name, tensor] : outcome.params) {
        (name.starts_with("classifier.") ? classifier : trained_encoder)
            .emplace(name, std::move(tensor));
    }
    const Tensor test_embeddings = embed_once(cfg, trained_encoder, test.features);

    EvalReport report;
    report.protocol = protocol;
    report.accuracy = top1_accuracy(classifier_logits(test_embeddings, classifier), test.labels);
    report.feature_dim = feature_dim;
    report.labeled_count = static_cast<std::int64_t>(rows.size());
    report.test_count = test.size();
    report.labeled_fraction = config.labeled_fraction;
    report.steps = config.steps;
    report.seed = config.seed;
    report.loss_curve = std::move(outcome.losses);
    return report;
}

}  // namespace

const char* probe_protocol_name(ProbeProtocol protocol) {
    switch (protocol) {
        case ProbeProtocol::kLinear: return "linear";
        case ProbeProtocol::kFinetune: return "finetune";
        case ProbeProtocol::kScratch: return "scratch";
    }
    return "?";
}

ProbeProtocol probe_protocol_from_name(const std::string& name) {
    if (name == "linear") return ProbeProtocol::kLinear;
    if (name == "finetune") return ProbeProtocol::kFinetune;
    if (name == "scratch") return ProbeProtocol::kScratch;
    throw InvalidConfig("unknown probe protocol \"" + name +
                        "\" (expected linear | finetune | scratch)");
}

void ProbeConfig::validate() const {
    if (!(labeled_fraction > 0.0) || labeled_fraction > 1.0) {
        throw InvalidConfig("probe labeled_fraction must lie in (0, 1], got " +
                            std::to_string(labeled_fraction));
    }
    if (steps < 0) throw InvalidConfig("probe steps must be non-negative");
    if (!(lr > 0.0) || !std::isfinite(lr)) {
        throw InvalidConfig("probe lr must be positive and finite");
    }
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["protocol"] = protocol;
    j["accuracy"] = accuracy;
    j["feature_dim"] = feature_dim;
    j["labeled_count"] = labeled_count;
    j["test_count"] = test_count;
    j["labeled_fraction"] = labeled_fraction;
    j["steps"] = steps;
    j["seed"] = seed;
    j["loss_curve"] = loss_curve;
    return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("evaluation report is not valid JSON: ") + e.what());
    }
    try {
        EvalReport report;
        report.protocol = j.at("protocol").get<std::string>();
        report.accuracy = j.at("accuracy").get<double>();
        report.feature_dim = j.at("feature_dim").get<Index>();
        report.labeled_count = j.at("labeled_count").get<std::int64_t>();
        report.test_count = j.at("test_count").get<std::int64_t>();
        report.labeled_fraction = j.at("labeled_fraction").get<double>();
        report.steps = j.at("steps").get<int>();
        report.seed = j.at("seed").get<std::uint64_t>();
        report.loss_curve = j.at("loss_curve").get<std::vector<double>>();
        return report;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("evaluation report is missing fields: ") + e.what());
    }
}

DatasetSplit split_dataset(const Dataset& source, double test_fraction, std::uint64_t seed) {
    source.validate();
    if (!(test_fraction > 0.0) || !(test_fraction < 1.0)) {
        throw InvalidConfig("test_fraction must lie strictly in (0, 1), got " +
                            std::to_string(test_fraction));
    }
    std::vector<std::vector<std::size_t>> by_class(
        static_cast<std::size_t>(source.num_classes));
    for (Index i = 0; i < source.size(); ++i) {
        by_class[static_cast<std::size_t>(source.labels[static_cast<std::size_t>(i)])].push_back(
            static_cast<std::size_t>(i));
    }
    Rng rng(Rng::derive({seed, kSplitTag}));
    DatasetSplit split;
    for (auto& rows : by_class) {
        if (rows.empty()) continue;
        rng.shuffle(rows);
        // keep at least one sample per class on each side where possible
        std::size_t take = static_cast<std::size_t>(
            std::llround(test_fraction * static_cast<double>(rows.size())));
        take = std::clamp<std::size_t>(take, rows.size() > 1 ? 1 : 0, rows.size() - 1);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            (i < take ? split.test_rows : split.train_rows).push_back(rows[i]);
        }
    }
    std::sort(split.train_rows.begin(), split.train_rows.end());
    std::sort(split.test_rows.begin(), split.test_rows.end());
    split.train = gather_rows(source, split.train_rows);
    split.test = gather_rows(source, split.test_rows);
    return split;
}

EvalReport linear_eval(const EncoderConfig& cfg, const ModelParams& encoder,
                       const Dataset& labeled, const Dataset& test, const ProbeConfig& config) {
    check_probe_inputs(cfg, labeled, test);
    config.validate();

    Rng subset_rng(Rng::derive({config.seed, kSubsetTag}));
    const auto rows = stratified_rows(labeled, config.labeled_fraction, subset_rng);
    const Dataset subset = gather_rows(labeled, rows);

    // The encoder stays outside the training graph: embeddings are computed
    // once and treated as constants, so freezing is structural.
    const Tensor embeddings = embed_once(cfg, encoder, subset.features);
    ModelParams classifier = init_classifier(embeddings.cols(), labeled.num_classes, config.seed);
    TrainOutcome outcome = train_softmax(cfg, std::move(classifier), embeddings,
                                         one_hot(subset.labels, labeled.num_classes), config,
                                         /*through_encoder=*/false);

    const Tensor test_embeddings = embed_once(cfg, encoder, test.features);

    EvalReport report;
    report.protocol = probe_protocol_name(ProbeProtocol::kLinear);
    report.accuracy =
        top1_accuracy(classifier_logits(test_embeddings, outcome.params), test.labels);
    report.feature_dim = embeddings.cols();
    report.labeled_count = static_cast<std::int64_t>(rows.size());
    report.test_count = test.size();
    report.labeled_fraction = config.labeled_fraction;
    report.steps = config.steps;
    report.seed = config.seed;
    report.loss_curve = std::move(outcome.losses);
    return report;
}

EvalReport finetune(const EncoderConfig& cfg, const ModelParams& encoder, const Dataset& labeled,
                    const Dataset& test, const ProbeConfig& config) {
    return run_joint(cfg, encoder, labeled, test, config,
                     probe_protocol_name(ProbeProtocol::kFinetune));
}

EvalReport scratch_baseline(const EncoderConfig& cfg, const Dataset& labeled, const Dataset& test,
                            const ProbeConfig& config) {
    return run_joint(cfg, init_params(cfg, Rng::derive({config.seed, kScratchTag})), labeled,
                     test, config, probe_protocol_name(ProbeProtocol::kScratch));
}

}  // namespace dcco
