#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "dcco/dataset.hpp"
#include "dcco/encoder.hpp"
#include "dcco/optimizer.hpp"
#include "dcco/serialize.hpp"
#include "dcco/stats.hpp"

namespace dcco {

// --- message layer ----------------------------------------------------------
//
// Everything a client learns from the server, and everything the server
// learns from a client, travels inside a MessageFrame. The payload is the
// serialized form of exactly one of three types — model parameters
// (broadcast), encoding statistics (both statistics legs), or a weighted
// parameter delta (upload). No frame can carry a raw sample or a per-sample
// encoding; the schema has nowhere to put one.

enum class FrameKind : std::uint8_t {
    ModelBroadcast = 1,    // server -> client, model parameter bundle
    StatsUpload = 2,       // client -> server, encoding statistics
    AggStatsBroadcast = 3, // server -> client, aggregated statistics
    DeltaUpload = 4,       // client -> server, weighted parameter delta
};

const char* frame_kind_name(FrameKind kind);

struct MessageFrame {
    FrameKind kind = FrameKind::ModelBroadcast;
    std::uint32_t round_index = 0;
    std::int32_t client_id = -1;  // receiver for broadcasts, sender for uploads
    std::vector<std::uint8_t> payload;
};

std::vector<std::uint8_t> encode_frame(const MessageFrame& frame);
MessageFrame decode_frame(std::span<const std::uint8_t> data);

/// A client's one-step model update: new_local - broadcast, plus its sample
/// count, which acts as the aggregation weight.
struct ModelDelta {
    NamedTensors tensors;
    std::int64_t weight = 0;
};

std::vector<std::uint8_t> encode_delta(const ModelDelta& delta);
ModelDelta decode_delta(std::span<const std::uint8_t> data);

/// Ordered log of every frame exchanged in one or more rounds; can be saved
/// for protocol-level replay and audit tests.
struct Transcript {
    std::vector<MessageFrame> frames;

    std::size_t total_payload_bytes() const;
    void save(const std::filesystem::path& path) const;
    static Transcript load(const std::filesystem::path& path);
};

// --- round layer --------------------------------------------------------------

enum class Method {
    Dcco,               // statistics round-trip + stop-gradient combination
    FedAvgCco,          // local-statistics correlation loss, no extra round-trip
    FedAvgContrastive,  // within-client contrastive loss, no extra round-trip
};

const char* method_name(Method method);
Method method_from_name(const std::string& name);

struct RoundConfig {
    int clients_per_round = 8;
    int local_steps = 1;      // > 1 trades exact equivalence for extra progress
    double local_lr = 1.0;    // plain gradient descent on the client
    double server_lr = 1.0;
    double lambda = 20.0;     // off-diagonal weight of the correlation loss
    double eps = 1e-8;        // variance stabilizer of the correlation matrix
    double temperature = 0.1; // contrastive baseline only
    ViewConfig augment;
    int workers = 1;

    void validate() const;
};

struct ServerState {
    EncoderConfig encoder;
    ModelParams model;
    OptimizerState optimizer;  // consumes -delta as its gradient
    std::uint32_t round_index = 0;
    std::uint64_t seed = 0;
};

/// What happened in one round. wall_time_sec is the only non-deterministic
/// field; digest() covers everything else so determinism checks can compare
/// traces across runs and worker counts.
struct RoundTrace {
    std::uint32_t round_index = 0;
    std::vector<std::int32_t> sampled_clients;   // in sampling order
    std::vector<std::int64_t> client_counts;     // N_k, ascending client id
    std::uint64_t agg_stats_digest = 0;          // 0 when no statistics leg ran
    double mean_local_loss = 0.0;                // first local step, mean over clients
    std::size_t frames_sent = 0;
    std::size_t payload_bytes = 0;
    double wall_time_sec = 0.0;

    std::uint64_t digest() const;
};

/// Uniform sample of k distinct client ids, deterministic in (seed, round).
std::vector<std::int32_t> sample_clients(int pool_size, int k, std::uint32_t round_index,
                                         std::uint64_t seed);

/// Count-weighted average of aligned deltas, summed in ascending client order
/// by the caller's list; the result's weight is the total count.
ModelDelta aggregate_deltas(const std::vector<ModelDelta>& deltas);

// The training views a client derives for a round. Client-local randomness is
// seeded by (seed, round, client_id) only, so results cannot depend on worker
// scheduling — and oracle tests can regenerate the exact same views.
std::pair<Tensor, Tensor> client_views(const ClientDataset& client, const ViewConfig& cfg,
                                       std::uint32_t round_index, std::uint64_t seed);

/// One gradient-descent step on the stop-gradient-combined correlation loss.
/// The delta is new_params - params with weight N_k.
ModelDelta local_dcco_step(const EncoderConfig& cfg, const ModelParams& params,
                           const Tensor& view_f, const Tensor& view_g,
                           const EncodingStats& aggregated, double lr, double lambda,
                           double eps);

/// One plain large-batch correlation-loss step; the oracle the one-round
/// equivalence checks compare against.
ModelParams centralized_cco_step(const EncoderConfig& cfg, const ModelParams& params,
                                 const Tensor& view_f, const Tensor& view_g, double lr,
                                 double lambda, double eps);

// One federated round. Mutates the server state (model, optimizer, round
// counter) and returns the trace; when `transcript` is given, every frame of
// the round is appended to it. DCCO rounds exchange 4K frames in four phases
// (model down, stats up, aggregated stats down, deltas up); FedAvg rounds
// skip the statistics legs and exchange 2K.
RoundTrace run_dcco_round(ServerState& server, const std::vector<ClientDataset>& pool,
                          const RoundConfig& config, Transcript* transcript = nullptr);
RoundTrace run_fedavg_cco_round(ServerState& server, const std::vector<ClientDataset>& pool,
                                const RoundConfig& config, Transcript* transcript = nullptr);
RoundTrace run_fedavg_contrastive_round(ServerState& server,
                                        const std::vector<ClientDataset>& pool,
                                        const RoundConfig& config,
                                        Transcript* transcript = nullptr);

/// Dispatches to the matching run_*_round.
RoundTrace run_round(ServerState& server, const std::vector<ClientDataset>& pool,
                     const RoundConfig& config, Method method,
                     Transcript* transcript = nullptr);

}  // namespace dcco
