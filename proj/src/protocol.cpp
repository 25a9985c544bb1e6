#include "dcco/protocol.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <thread>

namespace dcco {

namespace {

constexpr char kTranscriptMagic[4] = {'D', 'T', 'R', 'X'};
constexpr std::uint8_t kTranscriptVersion = 1;
constexpr std::uint8_t kDeltaVersion = 1;

void write_frame(ByteWriter& w, const MessageFrame& frame) {
    w.u8(static_cast<std::uint8_t>(frame.kind));
    w.u32(frame.round_index);
    w.u32(static_cast<std::uint32_t>(frame.client_id));
    w.u32(static_cast<std::uint32_t>(frame.payload.size()));
    w.bytes(frame.payload);
}

MessageFrame read_frame(ByteReader& r) {
    MessageFrame frame;
    const std::uint8_t kind = r.u8();
    if (kind < 1 || kind > 4) {
        throw ParseError("unknown frame kind " + std::to_string(kind));
    }
    frame.kind = static_cast<FrameKind>(kind);
    frame.round_index = r.u32();
    frame.client_id = static_cast<std::int32_t>(r.u32());
    const std::uint32_t payload_size = r.u32();
    frame.payload = r.bytes(payload_size);
    return frame;
}

// Runs fn(0..n-1) across `workers` threads. Indices are claimed from a shared
// counter, and the lowest-index exception wins, so failures are reported
// identically no matter how the scheduler interleaves the work.
template <class Fn>
void parallel_over(std::size_t n, int workers, Fn&& fn) {
    const auto lanes = static_cast<std::size_t>(std::max(1, workers));
    if (n == 0) return;
    if (lanes <= 1 || n == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> threads;
    const std::size_t used = std::min(lanes, n);
    threads.reserve(used);
    for (std::size_t t = 0; t < used; ++t) {
        threads.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& thread : threads) thread.join();
    for (const auto& error : errors) {
        if (error) std::rethrow_exception(error);
    }
}

}  // namespace

const char* frame_kind_name(FrameKind kind) {
    switch (kind) {
        case FrameKind::ModelBroadcast: return "model_broadcast";
        case FrameKind::StatsUpload: return "stats_upload";
        case FrameKind::AggStatsBroadcast: return "agg_stats_broadcast";
        case FrameKind::DeltaUpload: return "delta_upload";
    }
    return "unknown";
}

std::vector<std::uint8_t> encode_frame(const MessageFrame& frame) {
    ByteWriter w;
    write_frame(w, frame);
    return w.take();
}

MessageFrame decode_frame(std::span<const std::uint8_t> data) {
    ByteReader r(data);
    MessageFrame frame = read_frame(r);
    r.expect_done("message frame");
    return frame;
}

std::vector<std::uint8_t> encode_delta(const ModelDelta& delta) {
    if (delta.weight < 1) {
        throw InvalidConfig("delta weight must be >= 1, got " + std::to_string(delta.weight));
    }
    ByteWriter w;
    w.u8(kDeltaVersion);
    w.u64(static_cast<std::uint64_t>(delta.weight));
    w.bytes(encode_named_tensors(delta.tensors));
    return w.take();
}

ModelDelta decode_delta(std::span<const std::uint8_t> data) {
    ByteReader r(data);
    const std::uint8_t version = r.u8();
    if (version != kDeltaVersion) {
        throw ParseError("unsupported delta payload version " + std::to_string(version));
    }
    ModelDelta delta;
    const std::uint64_t weight = r.u64();
    if (weight == 0) throw ParseError("delta payload has zero weight");
    delta.weight = static_cast<std::int64_t>(weight);
    delta.tensors = decode_named_tensors(data.subspan(r.offset()));
    return delta;
}

std::size_t Transcript::total_payload_bytes() const {
    std::size_t total = 0;
    for (const auto& frame : frames) total += frame.payload.size();
    return total;
}

void Transcript::save(const std::filesystem::path& path) const {
    ByteWriter w;
    w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kTranscriptMagic), 4));
    w.u8(kTranscriptVersion);
    w.u32(static_cast<std::uint32_t>(frames.size()));
    for (const auto& frame : frames) write_frame(w, frame);
    write_file_atomic(path, w.buffer());
}

Transcript Transcript::load(const std::filesystem::path& path) {
    const auto data = read_file(path);
    ByteReader r(data);
    const auto magic = r.bytes(4);
    if (std::memcmp(magic.data(), kTranscriptMagic, 4) != 0) {
        throw ParseError(path.string() + ": bad transcript magic (expected \"DTRX\")");
    }
    const std::uint8_t version = r.u8();
    if (version != kTranscriptVersion) {
        throw ParseError(path.string() + ": unsupported transcript version " +
                         std::to_string(version));
    }
    const std::uint32_t count = r.u32();
    Transcript out;
    out.frames.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) out.frames.push_back(read_frame(r));
    r.expect_done("transcript");
    return out;
}

const char* method_name(Method method) {
    switch (method) {
        case Method::Dcco: return "dcco";
        case Method::FedAvgCco: return "fedavg_cco";
        case Method::FedAvgContrastive: return "fedavg_contrastive";
    }
    return "unknown";
}

Method method_from_name(const std::string& name) {
    if (name == "dcco") return Method::Dcco;
    if (name == "fedavg_cco") return Method::FedAvgCco;
    if (name == "fedavg_contrastive") return Method::FedAvgContrastive;
    throw InvalidConfig("unknown method \"" + name +
                        "\" (want dcco, fedavg_cco, or fedavg_contrastive)");
}

void RoundConfig::validate() const {
    if (clients_per_round < 1) throw InvalidConfig("clients_per_round must be >= 1");
    if (local_steps < 1) throw InvalidConfig("local_steps must be >= 1");
    if (!(local_lr > 0.0) || !std::isfinite(local_lr)) {
        throw InvalidConfig("local_lr must be finite and > 0");
    }
    if (!(server_lr >= 0.0) || !std::isfinite(server_lr)) {
        throw InvalidConfig("server_lr must be finite and >= 0");
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw InvalidConfig("lambda must be finite and >= 0");
    }
    if (!(eps >= 0.0)) throw InvalidConfig("eps must be >= 0");
    if (!(temperature > 0.0)) throw InvalidConfig("temperature must be > 0");
    if (workers < 1) throw InvalidConfig("workers must be >= 1");
}

std::uint64_t RoundTrace::digest() const {
    ByteWriter w;
    w.u32(round_index);
    w.u32(static_cast<std::uint32_t>(sampled_clients.size()));
    for (std::int32_t id : sampled_clients) w.u32(static_cast<std::uint32_t>(id));
    w.u32(static_cast<std::uint32_t>(client_counts.size()));
    for (std::int64_t count : client_counts) w.u64(static_cast<std::uint64_t>(count));
    w.u64(agg_stats_digest);
    w.f64(mean_local_loss);
    w.u64(frames_sent);
    w.u64(payload_bytes);
    // wall_time_sec deliberately left out: it is measurement, not behavior
    return fnv1a64(w.buffer());
}

std::vector<std::int32_t> sample_clients(int pool_size, int k, std::uint32_t round_index,
                                         std::uint64_t seed) {
    if (pool_size < 1) throw InvalidConfig("client pool is empty");
    if (k < 1 || k > pool_size) {
        throw KTooLarge("cannot sample " + std::to_string(k) + " clients from a pool of " +
                        std::to_string(pool_size));
    }
    std::vector<std::int32_t> ids(static_cast<std::size_t>(pool_size));
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(Rng::derive({seed, round_index, 0xc11eull}));
    // partial Fisher-Yates: only the first k positions are needed
    for (int i = 0; i < k; ++i) {
        const auto j = i + static_cast<int>(rng.uniform_int(pool_size - i));
        std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
    }
    ids.resize(static_cast<std::size_t>(k));
    return ids;
}

ModelDelta aggregate_deltas(const std::vector<ModelDelta>& deltas) {
    if (deltas.empty()) throw EmptyList("aggregate_deltas needs at least one delta");
    std::int64_t total_weight = 0;
    for (const auto& delta : deltas) {
        if (delta.weight < 1) throw InvalidConfig("delta weight must be >= 1");
        total_weight += delta.weight;
        if (delta.tensors.size() != deltas.front().tensors.size()) {
            throw ShapeMismatch("deltas disagree on parameter count");
        }
    }

    ModelDelta out;
    out.weight = total_weight;
    for (const auto& [name, first] : deltas.front().tensors) {
        Matrix acc = Matrix::Zero(first.mat().rows(), first.mat().cols());
        for (const auto& delta : deltas) {
            const auto it = delta.tensors.find(name);
            if (it == delta.tensors.end()) {
                throw ShapeMismatch("delta is missing parameter \"" + name + "\"");
            }
            if (it->second.shape() != first.shape()) {
                throw ShapeMismatch("delta parameter \"" + name + "\" has shape " +
                                    it->second.shape_str() + ", expected " + first.shape_str());
            }
            acc += static_cast<double>(delta.weight) * it->second.mat();
        }
        acc /= static_cast<double>(total_weight);
        out.tensors.emplace(name, first.with_same_shape(std::move(acc)));
    }
    return out;
}

std::pair<Tensor, Tensor> client_views(const ClientDataset& client, const ViewConfig& cfg,
                                       std::uint32_t round_index, std::uint64_t seed) {
    Rng rng(Rng::derive({seed, round_index, static_cast<std::uint64_t>(client.client_id)}));
    Tensor v1 = augment_batch(client.features, cfg, rng);
    Tensor v2 = augment_batch(client.features, cfg, rng);
    return {std::move(v1), std::move(v2)};
}

namespace {

struct StepResult {
    NamedGrads grads;
    double loss = 0.0;
};

// One loss evaluation + backward pass on the chosen objective. `aggregated`
// is only consulted for the DCCO objective.
StepResult client_step(const EncoderConfig& ecfg, const ModelParams& params,
                       const Tensor& view_f, const Tensor& view_g, Method method,
                       const EncodingStats* aggregated, double lambda, double eps,
                       double temperature) {
    Graph g;
    BoundParams bound = bind_params(g, params);
    const Value b1 = g.constant(view_f);
    const Value b2 = g.constant(view_g);
    const Encoded ef = encode(ecfg, bound, b1);
    const Encoded eg = encode(ecfg, bound, b2);

    Value loss;
    switch (method) {
        case Method::Dcco: {
            const StatsNodes local = local_stats(ef.projection, eg.projection);
            const StatsNodes combined = combine_with_stop_gradient(local, *aggregated);
            loss = cco_loss(correlation_matrix(combined, eps), lambda);
            break;
        }
        case Method::FedAvgCco: {
            const StatsNodes local = local_stats(ef.projection, eg.projection);
            loss = cco_loss(correlation_matrix(local, eps), lambda);
            break;
        }
        case Method::FedAvgContrastive: {
            loss = ntxent_loss(ef.projection, eg.projection, temperature);
            break;
        }
    }

    GradientMap grads = g.backward(loss.id);
    StepResult out;
    out.loss = g.value(loss.id).scalar_value();
    for (const auto& [name, value] : bound) out.grads.emplace(name, grads.grad(value));
    return out;
}

// local_steps rounds of plain gradient descent against a frozen objective;
// returns (new - broadcast) weighted by the client's sample count.
ModelDelta client_train(const EncoderConfig& ecfg, const ModelParams& broadcast,
                        const Tensor& view_f, const Tensor& view_g, Method method,
                        const EncodingStats* aggregated, int local_steps, double local_lr,
                        double lambda, double eps, double temperature, double* first_loss) {
    // The delta is accumulated directly as the sum of -lr * grad steps rather
    // than recovered as (final - broadcast); the difference form would round
    // at parameter magnitude and break the exact linearity of delta in lr.
    ModelDelta delta;
    delta.weight = view_f.rows();
    for (const auto& [name, tensor] : broadcast) {
        delta.tensors.emplace(name, tensor.with_same_shape(Matrix::Zero(tensor.mat().rows(),
                                                                        tensor.mat().cols())));
    }
    ModelParams current = broadcast;
    for (int step = 0; step < local_steps; ++step) {
        const StepResult result = client_step(ecfg, current, view_f, view_g, method,
                                              aggregated, lambda, eps, temperature);
        if (step == 0 && first_loss) *first_loss = result.loss;
        for (auto& [name, acc] : delta.tensors) {
            acc = acc.with_same_shape(acc.mat() - local_lr * result.grads.at(name).mat());
            current.at(name) = acc.with_same_shape(broadcast.at(name).mat() + acc.mat());
        }
    }
    return delta;
}

}  // namespace

ModelDelta local_dcco_step(const EncoderConfig& cfg, const ModelParams& params,
                           const Tensor& view_f, const Tensor& view_g,
                           const EncodingStats& aggregated, double lr, double lambda,
                           double eps) {
    if (!(lr > 0.0)) throw InvalidConfig("local step needs lr > 0");
    return client_train(cfg, params, view_f, view_g, Method::Dcco, &aggregated,
                        /*local_steps=*/1, lr, lambda, eps, /*temperature=*/1.0, nullptr);
}

ModelParams centralized_cco_step(const EncoderConfig& cfg, const ModelParams& params,
                                 const Tensor& view_f, const Tensor& view_g, double lr,
                                 double lambda, double eps) {
    if (view_f.rows() < 2) {
        throw BatchTooSmall("centralized step needs a pooled batch of at least 2 samples");
    }
    Graph g;
    BoundParams bound = bind_params(g, params);
    const Encoded ef = encode(cfg, bound, g.constant(view_f));
    const Encoded eg = encode(cfg, bound, g.constant(view_g));
    const StatsNodes stats = local_stats(ef.projection, eg.projection);
    const Value loss = cco_loss(correlation_matrix(stats, eps), lambda);
    GradientMap grads = g.backward(loss.id);

    ModelParams out;
    for (const auto& [name, tensor] : params) {
        out.emplace(name, tensor.with_same_shape(tensor.mat() -
                                                 lr * grads.grad(bound.at(name)).mat()));
    }
    return out;
}

namespace {

RoundTrace run_round_impl(ServerState& server, const std::vector<ClientDataset>& pool,
                          const RoundConfig& config, Method method, Transcript* transcript) {
    const auto start = std::chrono::steady_clock::now();
    config.validate();
    server.encoder.validate();
    const std::uint32_t round = server.round_index;

    // The pool position is the client's protocol identity; a mismatch would
    // silently desynchronize sampling, rng streams, and frame addressing.
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (pool[i].client_id != static_cast<std::int32_t>(i)) {
            throw InvalidConfig("pool entry " + std::to_string(i) + " has client_id " +
                                std::to_string(pool[i].client_id));
        }
    }

    const auto sampled = sample_clients(static_cast<int>(pool.size()),
                                        config.clients_per_round, round, server.seed);

    // Clients with no data cannot contribute statistics or deltas; FedAvg
    // objectives additionally need two samples for a defined loss.
    struct Slot {
        std::int32_t client_id = -1;
        const ClientDataset* data = nullptr;
        // client-private state; never serialized
        ModelParams model;
        Tensor view_f, view_g;
        EncodingStats stats;
        ModelDelta delta;
        double first_loss = 0.0;
        std::size_t model_frame = 0, agg_frame = 0;
    };
    std::vector<Slot> slots;
    for (std::int32_t id : sampled) {
        const ClientDataset& client = pool[static_cast<std::size_t>(id)];
        if (method != Method::Dcco && client.size() < 2) {
            throw BatchTooSmall("client " + std::to_string(id) + " holds " +
                                std::to_string(client.size()) +
                                " samples; FedAvg objectives need at least 2");
        }
        if (client.size() < 1) continue;
        Slot slot;
        slot.client_id = id;
        slot.data = &client;
        slots.push_back(std::move(slot));
    }
    if (slots.empty()) {
        throw EmptyRound("round " + std::to_string(round) + ": no sampled client has data");
    }

    // Reductions and reported vectors run in ascending client id so results
    // are independent of sampling order and worker scheduling.
    std::vector<std::size_t> by_id(slots.size());
    std::iota(by_id.begin(), by_id.end(), 0u);
    std::sort(by_id.begin(), by_id.end(), [&](std::size_t a, std::size_t b) {
        return slots[a].client_id < slots[b].client_id;
    });

    std::vector<MessageFrame> frames;

    // phase 1: model broadcast (server -> every participant)
    const auto model_payload = encode_named_tensors(server.model);
    for (auto& slot : slots) {
        slot.model_frame = frames.size();
        frames.push_back({FrameKind::ModelBroadcast, round, slot.client_id, model_payload});
    }

    // client side A: decode the broadcast, derive views, compute statistics
    parallel_over(slots.size(), config.workers, [&](std::size_t i) {
        Slot& slot = slots[i];
        slot.model = decode_named_tensors(frames[slot.model_frame].payload);
        auto views = client_views(*slot.data, config.augment, round, server.seed);
        slot.view_f = std::move(views.first);
        slot.view_g = std::move(views.second);
        if (method == Method::Dcco) {
            const Tensor f = encode_once(server.encoder, slot.model, slot.view_f);
            const Tensor g = encode_once(server.encoder, slot.model, slot.view_g);
            slot.stats = local_stats_values(f, g);
        }
    });

    RoundTrace trace;
    trace.round_index = round;
    trace.sampled_clients = sampled;

    // phase 2 + 3 (DCCO only): statistics up, aggregated statistics down
    if (method == Method::Dcco) {
        std::vector<std::size_t> stats_frames(slots.size());
        for (std::size_t i = 0; i < slots.size(); ++i) {
            stats_frames[i] = frames.size();
            frames.push_back(
                {FrameKind::StatsUpload, round, slots[i].client_id, encode_stats(slots[i].stats)});
        }
        std::vector<EncodingStats> collected;
        collected.reserve(slots.size());
        for (std::size_t i : by_id) {
            collected.push_back(decode_stats(frames[stats_frames[i]].payload));
        }
        const EncodingStats aggregated = aggregate_stats(collected);
        trace.agg_stats_digest = digest_stats(aggregated);

        const auto agg_payload = encode_stats(aggregated);
        for (auto& slot : slots) {
            slot.agg_frame = frames.size();
            frames.push_back({FrameKind::AggStatsBroadcast, round, slot.client_id, agg_payload});
        }
    }

    // client side B: local training against the frame-decoded objective
    parallel_over(slots.size(), config.workers, [&](std::size_t i) {
        Slot& slot = slots[i];
        EncodingStats aggregated;
        if (method == Method::Dcco) {
            aggregated = decode_stats(frames[slot.agg_frame].payload);
        }
        slot.delta = client_train(server.encoder, slot.model, slot.view_f, slot.view_g, method,
                                  method == Method::Dcco ? &aggregated : nullptr,
                                  config.local_steps, config.local_lr, config.lambda,
                                  config.eps, config.temperature, &slot.first_loss);
    });

    // phase 4: delta upload, weighted aggregation, server optimizer step
    std::vector<std::size_t> delta_frames(slots.size());
    for (std::size_t i = 0; i < slots.size(); ++i) {
        delta_frames[i] = frames.size();
        frames.push_back(
            {FrameKind::DeltaUpload, round, slots[i].client_id, encode_delta(slots[i].delta)});
    }
    std::vector<ModelDelta> deltas;
    deltas.reserve(slots.size());
    for (std::size_t i : by_id) {
        deltas.push_back(decode_delta(frames[delta_frames[i]].payload));
    }
    const ModelDelta mean_delta = aggregate_deltas(deltas);

    NamedGrads server_grads;
    for (const auto& [name, tensor] : mean_delta.tensors) {
        server_grads.emplace(name, tensor.with_same_shape(-tensor.mat()));
    }
    apply(server.optimizer, server.model, server_grads, config.server_lr);

    trace.client_counts.reserve(slots.size());
    double loss_sum = 0.0;
    for (std::size_t i : by_id) {
        trace.client_counts.push_back(slots[i].delta.weight);
        loss_sum += slots[i].first_loss;
    }
    trace.mean_local_loss = loss_sum / static_cast<double>(slots.size());
    trace.frames_sent = frames.size();
    for (const auto& frame : frames) trace.payload_bytes += frame.payload.size();
    trace.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    if (transcript) {
        for (auto& frame : frames) transcript->frames.push_back(std::move(frame));
    }
    server.round_index += 1;
    return trace;
}

}  // namespace

RoundTrace run_dcco_round(ServerState& server, const std::vector<ClientDataset>& pool,
                          const RoundConfig& config, Transcript* transcript) {
    return run_round_impl(server, pool, config, Method::Dcco, transcript);
}

RoundTrace run_fedavg_cco_round(ServerState& server, const std::vector<ClientDataset>& pool,
                                const RoundConfig& config, Transcript* transcript) {
    return run_round_impl(server, pool, config, Method::FedAvgCco, transcript);
}

RoundTrace run_fedavg_contrastive_round(ServerState& server,
                                        const std::vector<ClientDataset>& pool,
                                        const RoundConfig& config, Transcript* transcript) {
    return run_round_impl(server, pool, config, Method::FedAvgContrastive, transcript);
}

RoundTrace run_round(ServerState& server, const std::vector<ClientDataset>& pool,
                     const RoundConfig& config, Method method, Transcript* transcript) {
    return run_round_impl(server, pool, config, method, transcript);
}

}  // namespace dcco
