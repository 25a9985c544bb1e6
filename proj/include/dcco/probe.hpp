#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcco/dataset.hpp"
#include "dcco/encoder.hpp"
#include "dcco/optimizer.hpp"

namespace dcco {

enum class ProbeProtocol : std::uint8_t { kLinear, kFinetune, kScratch };

const char* probe_protocol_name(ProbeProtocol protocol);
ProbeProtocol probe_protocol_from_name(const std::string& name);

// One downstream evaluation run. `labeled_fraction` selects a class-stratified
// subset of the labeled pool; training is full-batch gradient steps with a
// cosine-decayed learning rate (desk-scale datasets are small enough that
// minibatching would only add noise).
struct ProbeConfig {
    ProbeProtocol protocol = ProbeProtocol::kLinear;
    double labeled_fraction = 1.0;  // (0, 1]
    int steps = 300;
    double lr = 0.05;
    OptimizerKind optimizer = OptimizerKind::kAdam;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EvalReport {
    std::string protocol;
    double accuracy = 0.0;       // top-1 on the held-out test split
    Index feature_dim = 0;       // classifier input width: the embedding, never
                                 // the projection output
    std::int64_t labeled_count = 0;
    std::int64_t test_count = 0;
    double labeled_fraction = 1.0;
    int steps = 0;
    std::uint64_t seed = 0;
    std::vector<double> loss_curve;  // training loss, one entry per step

    std::string to_json() const;
    static EvalReport from_json(const std::string& text);
};

// Disjoint, class-stratified train/test split. Source row ids of both sides
// are exposed so leak checks are structural, not probabilistic. A class with a
// single sample goes to the train side (a one-sample class cannot straddle).
struct DatasetSplit {
    Dataset train;
    Dataset test;
    std::vector<std::size_t> train_rows;
    std::vector<std::size_t> test_rows;
};
DatasetSplit split_dataset(const Dataset& source, double test_fraction, std::uint64_t seed);

// Trains a linear softmax classifier on frozen encoder embeddings. The
// projection head is not part of the feature path, and no gradient reaches
// the encoder (its parameters are never placed in the training graph).
EvalReport linear_eval(const EncoderConfig& cfg, const ModelParams& encoder,
                       const Dataset& labeled, const Dataset& test, const ProbeConfig& config);

// Jointly trains encoder and classifier starting from the given encoder.
EvalReport finetune(const EncoderConfig& cfg, const ModelParams& encoder, const Dataset& labeled,
                    const Dataset& test, const ProbeConfig& config);

// The supervised floor: same architecture and training loop as finetune, but
// from freshly initialized weights and the labeled subset only.
EvalReport scratch_baseline(const EncoderConfig& cfg, const Dataset& labeled, const Dataset& test,
                            const ProbeConfig& config);

}  // namespace dcco
