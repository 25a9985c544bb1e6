#include "dcco/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>

#include "dcco/serialize.hpp"

namespace dcco {

namespace {

// Weighted categorical draw; entries with zero or negative weight are never
// selected. The trailing return guards against floating-point slack in the
// cumulative walk.
int draw_index(const std::vector<double>& weights, Rng& rng) {
    double total = 0.0;
    for (double w : weights) {
        if (w > 0.0) total += w;
    }
    if (total <= 0.0) throw InvalidConfig("categorical draw over zero total mass");
    const double u = rng.uniform() * total;
    double acc = 0.0;
    int last = -1;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i] <= 0.0) continue;
        last = static_cast<int>(i);
        acc += weights[i];
        if (u < acc) return last;
    }
    return last;
}

ClientDataset gather_client(const Dataset& dataset, int client_id,
                            std::vector<Eigen::Index> rows) {
    ClientDataset client;
    client.client_id = client_id;
    Matrix features(static_cast<Eigen::Index>(rows.size()), dataset.dim());
    client.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        features.row(static_cast<Eigen::Index>(i)) = dataset.features.mat().row(rows[i]);
        client.labels.push_back(dataset.labels[static_cast<std::size_t>(rows[i])]);
    }
    client.features = Tensor::from_matrix(std::move(features));
    client.source_rows = std::move(rows);
    return client;
}

}  // namespace

void Dataset::validate() const {
    if (features.rank() != 2) {
        throw InvalidConfig("dataset features must be rank 2, got shape " +
                            features.shape_str());
    }
    if (size() < 1) throw InvalidConfig("dataset is empty");
    if (static_cast<Eigen::Index>(labels.size()) != size()) {
        throw InvalidConfig("dataset has " + std::to_string(size()) + " rows but " +
                            std::to_string(labels.size()) + " labels");
    }
    if (num_classes < 1) throw InvalidConfig("dataset num_classes must be >= 1");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) {
            throw InvalidConfig("label " + std::to_string(labels[i]) + " at row " +
                                std::to_string(i) + " outside [0, " +
                                std::to_string(num_classes) + ")");
        }
    }
}

void PartitionSpec::validate(Eigen::Index dataset_size) const {
    if (num_clients < 1) throw InvalidConfig("partition needs num_clients >= 1");
    if (samples_per_client < 1) throw InvalidConfig("partition needs samples_per_client >= 1");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
        throw InvalidConfig("partition alpha must be finite and >= 0");
    }
    const long long wanted =
        static_cast<long long>(num_clients) * static_cast<long long>(samples_per_client);
    if (wanted > static_cast<long long>(dataset_size)) {
        throw InvalidConfig("partition wants " + std::to_string(wanted) +
                            " samples but dataset has " + std::to_string(dataset_size));
    }
}

std::vector<double> class_prior(const Dataset& dataset) {
    dataset.validate();
    std::vector<double> prior(static_cast<std::size_t>(dataset.num_classes), 0.0);
    for (int label : dataset.labels) prior[static_cast<std::size_t>(label)] += 1.0;
    const double total = static_cast<double>(dataset.size());
    for (double& p : prior) p /= total;
    return prior;
}

Dataset subset(const Dataset& dataset, std::span<const Eigen::Index> rows) {
    dataset.validate();
    if (rows.empty()) throw InvalidConfig("subset needs at least one row");
    for (Eigen::Index r : rows) {
        if (r < 0 || r >= dataset.size()) {
            throw InvalidConfig("subset row " + std::to_string(r) + " outside dataset of " +
                                std::to_string(dataset.size()) + " rows");
        }
    }
    Dataset out;
    Matrix features(static_cast<Eigen::Index>(rows.size()), dataset.dim());
    out.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        features.row(static_cast<Eigen::Index>(i)) = dataset.features.mat().row(rows[i]);
        out.labels.push_back(dataset.labels[static_cast<std::size_t>(rows[i])]);
    }
    out.features = Tensor::from_matrix(std::move(features));
    out.num_classes = dataset.num_classes;
    return out;
}

std::vector<ClientDataset> dirichlet_partition(const Dataset& dataset,
                                               const PartitionSpec& spec,
                                               PartitionLog* log) {
    dataset.validate();
    spec.validate(dataset.size());
    const auto n_classes = static_cast<std::size_t>(dataset.num_classes);
    const auto prior = class_prior(dataset);
    const auto quota = static_cast<std::size_t>(spec.samples_per_client);

    std::vector<std::vector<Eigen::Index>> pools(n_classes);
    for (Eigen::Index i = 0; i < dataset.size(); ++i) {
        pools[static_cast<std::size_t>(dataset.labels[static_cast<std::size_t>(i)])]
            .push_back(i);
    }
    Rng rng(Rng::derive({spec.seed, 0x9a47ull}));
    for (auto& pool : pools) rng.shuffle(pool);

    PartitionLog counters;
    std::vector<ClientDataset> clients;
    clients.reserve(static_cast<std::size_t>(spec.num_clients));

    for (int k = 0; k < spec.num_clients; ++k) {
        std::vector<Eigen::Index> rows;
        rows.reserve(quota);

        if (spec.alpha == 0.0) {
            // One-hot limit: the whole quota comes from a single class so the
            // client stays single-class even when its first pick is exhausted.
            auto c = static_cast<std::size_t>(draw_index(prior, rng));
            if (pools[c].size() < quota) {
                ++counters.fallback_events;
                std::size_t best = n_classes;
                for (std::size_t alt = 0; alt < n_classes; ++alt) {
                    if (pools[alt].size() < quota) continue;
                    if (best == n_classes || pools[alt].size() > pools[best].size()) best = alt;
                }
                if (best == n_classes) {
                    throw InsufficientSamples(
                        "no class has " + std::to_string(quota) +
                        " samples left for single-class client " + std::to_string(k));
                }
                c = best;
            }
            for (std::size_t s = 0; s < quota; ++s) {
                rows.push_back(pools[c].back());
                pools[c].pop_back();
            }
        } else {
            std::vector<double> concentration(n_classes);
            for (std::size_t c = 0; c < n_classes; ++c) concentration[c] = spec.alpha * prior[c];
            std::vector<double> p;
            try {
                p = rng.dirichlet(concentration);
            } catch (const Error&) {
                // Tiny alpha can underflow every gamma draw to zero; the
                // correct limit of Dirichlet(alpha -> 0) is a one-hot client.
                p.assign(n_classes, 0.0);
                p[static_cast<std::size_t>(draw_index(prior, rng))] = 1.0;
            }
            for (std::size_t s = 0; s < quota; ++s) {
                auto c = static_cast<std::size_t>(draw_index(p, rng));
                if (pools[c].empty()) {
                    ++counters.fallback_events;
                    std::vector<double> masked(n_classes, 0.0);
                    double mass = 0.0;
                    for (std::size_t alt = 0; alt < n_classes; ++alt) {
                        if (pools[alt].empty()) continue;
                        masked[alt] = p[alt];
                        mass += p[alt];
                    }
                    if (mass <= 0.0) {
                        // The client's whole support is spent: fall back to a
                        // uniform draw over whatever classes still have rows.
                        for (std::size_t alt = 0; alt < n_classes; ++alt) {
                            masked[alt] = pools[alt].empty() ? 0.0 : 1.0;
                        }
                    }
                    c = static_cast<std::size_t>(draw_index(masked, rng));
                }
                rows.push_back(pools[c].back());
                pools[c].pop_back();
            }
        }
        clients.push_back(gather_client(dataset, k, std::move(rows)));
    }

    if (log) *log = counters;
    return clients;
}

// --- augmentation -------------------------------------------------------------

void ViewConfig::validate(Eigen::Index dim) const {
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
        throw InvalidConfig("noise_sigma must be finite and >= 0");
    }
    if (!(mask_prob >= 0.0) || mask_prob > 1.0) {
        throw InvalidConfig("mask_prob must be in [0, 1]");
    }
    if (flip_len < 0 || flip_len > dim) {
        throw InvalidConfig("flip_len " + std::to_string(flip_len) +
                            " outside [0, " + std::to_string(dim) + "]");
    }
}

namespace {

void augment_row(Matrix& m, Eigen::Index row, const ViewConfig& cfg, Rng& rng) {
    const Eigen::Index d = m.cols();
    if (cfg.noise_sigma > 0.0) {
        for (Eigen::Index j = 0; j < d; ++j) m(row, j) += cfg.noise_sigma * rng.normal();
    }
    if (cfg.mask_prob > 0.0) {
        for (Eigen::Index j = 0; j < d; ++j) {
            if (rng.uniform() < cfg.mask_prob) m(row, j) = 0.0;
        }
    }
    if (cfg.flip_len > 0) {
        const auto start = static_cast<Eigen::Index>(rng.uniform_int(d - cfg.flip_len + 1));
        m.row(row).segment(start, cfg.flip_len) *= -1.0;
    }
}

}  // namespace

std::pair<Tensor, Tensor> make_views(const Tensor& sample, const ViewConfig& cfg,
                                     Rng& rng) {
    cfg.validate(sample.cols());
    Matrix a = sample.mat();
    Matrix b = sample.mat();
    for (Eigen::Index i = 0; i < a.rows(); ++i) augment_row(a, i, cfg, rng);
    for (Eigen::Index i = 0; i < b.rows(); ++i) augment_row(b, i, cfg, rng);
    return {sample.with_same_shape(std::move(a)), sample.with_same_shape(std::move(b))};
}

Tensor augment_batch(const Tensor& batch, const ViewConfig& cfg, Rng& rng) {
    if (batch.rank() != 2) {
        throw ShapeMismatch("augment_batch wants a rank-2 batch, got shape " +
                            batch.shape_str());
    }
    cfg.validate(batch.cols());
    Matrix out = batch.mat();
    for (Eigen::Index i = 0; i < out.rows(); ++i) augment_row(out, i, cfg, rng);
    return Tensor::from_matrix(std::move(out));
}

// --- synthetic source -----------------------------------------------------------

void SyntheticConfig::validate() const {
    if (classes < 1) throw InvalidConfig("synthetic data needs classes >= 1");
    if (dim < 1) throw InvalidConfig("synthetic data needs dim >= 1");
    if (count < 1) throw InvalidConfig("synthetic data needs count >= 1");
    if (classes > dim) {
        throw InvalidConfig("synthetic data needs classes <= dim for orthogonal means (" +
                            std::to_string(classes) + " > " + std::to_string(dim) + ")");
    }
    if (!(separation >= 0.0) || !std::isfinite(separation)) {
        throw InvalidConfig("separation must be finite and >= 0");
    }
    if (!(within_sigma >= 0.0) || !(spike_sigma >= 0.0)) {
        throw InvalidConfig("noise scales must be >= 0");
    }
}

Dataset synthetic_dataset(const SyntheticConfig& cfg) {
    cfg.validate();
    Rng rng(Rng::derive({cfg.seed, 0x5eedull}));

    // Class means: Gram-Schmidt over Gaussian draws gives orthonormal
    // directions; scaling by separation/sqrt(2) makes every pairwise mean
    // distance exactly `separation`.
    Matrix means(cfg.classes, cfg.dim);
    for (int c = 0; c < cfg.classes; ++c) {
        for (;;) {
            for (Eigen::Index j = 0; j < cfg.dim; ++j) means(c, j) = rng.normal();
            for (int prev = 0; prev < c; ++prev) {
                means.row(c) -= means.row(c).dot(means.row(prev)) * means.row(prev);
            }
            const double norm = means.row(c).norm();
            if (norm > 1e-6) {
                means.row(c) /= norm;
                break;
            }
        }
    }
    means *= cfg.separation / std::sqrt(2.0);

    // One unit "spike" direction per class; within-class samples get extra
    // variance along it, giving the class a correlated covariance.
    Matrix spikes(cfg.classes, cfg.dim);
    for (int c = 0; c < cfg.classes; ++c) {
        for (Eigen::Index j = 0; j < cfg.dim; ++j) spikes(c, j) = rng.normal();
        spikes.row(c) /= spikes.row(c).norm();
    }

    Dataset out;
    Matrix features(cfg.count, cfg.dim);
    out.labels.reserve(static_cast<std::size_t>(cfg.count));
    for (Eigen::Index i = 0; i < cfg.count; ++i) {
        const int c = static_cast<int>(i % cfg.classes);
        features.row(i) = means.row(c);
        for (Eigen::Index j = 0; j < cfg.dim; ++j) {
            features(i, j) += cfg.within_sigma * rng.normal();
        }
        features.row(i) += cfg.spike_sigma * rng.normal() * spikes.row(c);
        out.labels.push_back(c);
    }
    out.features = Tensor::from_matrix(std::move(features));
    out.num_classes = cfg.classes;
    out.validate();
    return out;
}

// --- files ------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
        const std::size_t comma = line.find(',', start);
        std::string cell = line.substr(start, comma == std::string::npos ? std::string::npos
                                                                         : comma - start);
        // trim surrounding whitespace
        const auto first = cell.find_first_not_of(" \t");
        const auto last = cell.find_last_not_of(" \t");
        cells.push_back(first == std::string::npos ? std::string()
                                                   : cell.substr(first, last - first + 1));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return cells;
}

double parse_double_cell(const std::string& cell, std::size_t line_no,
                         const std::string& column) {
    double value = 0.0;
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last || cell.empty()) {
        throw ParseError("line " + std::to_string(line_no) + ", column \"" + column +
                         "\": cannot parse \"" + cell + "\" as a number");
    }
    return value;
}

Dataset load_csv(const std::filesystem::path& path) {
    const auto raw = read_file(path);
    std::string text(raw.begin(), raw.end());

    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t nl = text.find('\n', start);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(start, nl - start);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
        start = nl + 1;
    }
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    if (lines.empty()) throw ParseError(path.string() + ": CSV file is empty");

    const auto header = split_csv_line(lines[0]);
    std::size_t label_col = header.size();
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == "label") label_col = i;
    }
    if (label_col == header.size()) {
        throw ParseError(path.string() + ": header has no \"label\" column");
    }
    if (header.size() < 2) {
        throw ParseError(path.string() + ": CSV needs at least one feature column");
    }
    if (lines.size() < 2) throw ParseError(path.string() + ": CSV has no data rows");

    const std::size_t n_rows = lines.size() - 1;
    const auto n_features = static_cast<Eigen::Index>(header.size() - 1);
    Dataset out;
    Matrix features(static_cast<Eigen::Index>(n_rows), n_features);
    out.labels.reserve(n_rows);

    int max_label = 0;
    for (std::size_t r = 0; r < n_rows; ++r) {
        const std::size_t line_no = r + 2;  // 1-based, after the header
        const auto cells = split_csv_line(lines[r + 1]);
        if (cells.size() != header.size()) {
            throw ParseError("line " + std::to_string(line_no) + " has " +
                             std::to_string(cells.size()) + " cells, expected " +
                             std::to_string(header.size()));
        }
        Eigen::Index feature_idx = 0;
        for (std::size_t c = 0; c < cells.size(); ++c) {
            const double value = parse_double_cell(cells[c], line_no, header[c]);
            if (c == label_col) {
                if (value < 0.0 || value != std::floor(value)) {
                    throw ParseError("line " + std::to_string(line_no) +
                                     ", column \"label\": \"" + cells[c] +
                                     "\" is not a non-negative integer");
                }
                const int label = static_cast<int>(value);
                max_label = std::max(max_label, label);
                out.labels.push_back(label);
            } else {
                features(static_cast<Eigen::Index>(r), feature_idx++) = value;
            }
        }
    }
    out.features = Tensor::from_matrix(std::move(features));
    out.num_classes = max_label + 1;
    out.validate();
    return out;
}

Dataset load_binary(const std::filesystem::path& path) {
    const auto file = decode_matrix(read_file(path));
    if (!file.labels) {
        throw ParseError(path.string() + ": matrix file carries no labels; datasets need them");
    }
    Dataset out;
    out.features = Tensor::from_matrix(file.values);
    out.labels.reserve(file.labels->size());
    int max_label = 0;
    for (std::uint32_t label : *file.labels) {
        if (label > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
            throw ParseError(path.string() + ": label " + std::to_string(label) +
                             " does not fit an int");
        }
        max_label = std::max(max_label, static_cast<int>(label));
        out.labels.push_back(static_cast<int>(label));
    }
    out.num_classes = max_label + 1;
    out.validate();
    return out;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
    switch (format) {
        case DatasetFormat::Binary: return load_binary(path);
        case DatasetFormat::Csv: return load_csv(path);
    }
    throw InvalidConfig("unknown dataset format");
}

Dataset load_dataset(const std::filesystem::path& path) {
    return load_dataset(path, path.extension() == ".csv" ? DatasetFormat::Csv
                                                         : DatasetFormat::Binary);
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
    dataset.validate();
    MatrixFile file;
    file.values = dataset.features.mat();
    std::vector<std::uint32_t> labels;
    labels.reserve(dataset.labels.size());
    for (int label : dataset.labels) labels.push_back(static_cast<std::uint32_t>(label));
    file.labels = std::move(labels);
    write_file_atomic(path, encode_matrix(file));
}

}  // namespace dcco
