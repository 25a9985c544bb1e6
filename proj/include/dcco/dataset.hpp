#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "dcco/errors.hpp"
#include "dcco/rng.hpp"
#include "dcco/tensor.hpp"

namespace dcco {

/// A labeled feature table. Labels are used only to build partitions and to
/// evaluate probes — the pretraining losses never see them.
struct Dataset {
    Tensor features;             // M x input_dim
    std::vector<int> labels;     // M entries in [0, num_classes)
    int num_classes = 0;

    Eigen::Index size() const { return features.rows(); }
    Eigen::Index dim() const { return features.cols(); }
    void validate() const;
};

/// Rows of a parent dataset assigned to one client. source_rows records the
/// parent row of each sample so tests can assert the partition is exact and
/// evaluation can exclude client-held rows.
struct ClientDataset {
    int client_id = -1;
    Tensor features;
    std::vector<int> labels;
    std::vector<Eigen::Index> source_rows;

    Eigen::Index size() const { return features.rows(); }
};

struct PartitionSpec {
    int num_clients = 0;
    int samples_per_client = 0;
    double alpha = 0.0;  // Dirichlet concentration; 0 selects the one-class limit
    std::uint64_t seed = 0;

    void validate(Eigen::Index dataset_size) const;
};

/// Counters surfaced by partitioning so experiments can report how often the
/// sampler had to redirect a draw away from an exhausted class pool.
struct PartitionLog {
    std::int64_t fallback_events = 0;
};

/// Splits a dataset across clients following a per-client class distribution
/// drawn from Dirichlet(alpha * prior), sampling without replacement from the
/// global pool. alpha = 0 is handled as the explicit one-hot limit: each
/// client draws a single class (proportionally to the prior) and takes all of
/// its samples from that class, so every alpha = 0 client is single-class.
/// When a draw lands on an exhausted class the sampler falls back to the
/// remaining classes and counts the event in `log`; InsufficientSamples is
/// thrown only when no class can honor the request (alpha = 0 needs a single
/// class with samples_per_client rows left).
std::vector<ClientDataset> dirichlet_partition(const Dataset& dataset,
                                               const PartitionSpec& spec,
                                               PartitionLog* log = nullptr);

/// Per-class sample fractions of the dataset (sums to 1).
std::vector<double> class_prior(const Dataset& dataset);

/// Gathers the given parent rows into a standalone dataset.
Dataset subset(const Dataset& dataset, std::span<const Eigen::Index> rows);

// --- augmentation ------------------------------------------------------------

/// Feature-space stand-in for an image augmentation pipeline: additive
/// Gaussian noise, independent coordinate masking, and a sign flip of one
/// contiguous coordinate block (flip_len = 0 disables the flip).
struct ViewConfig {
    double noise_sigma = 0.25;
    double mask_prob = 0.1;
    Eigen::Index flip_len = 0;

    void validate(Eigen::Index dim) const;
};

/// Two independently augmented copies of one sample (1 x d, never mutated).
std::pair<Tensor, Tensor> make_views(const Tensor& sample, const ViewConfig& cfg,
                                     Rng& rng);

/// Augments every row of a batch independently; two calls give two views.
Tensor augment_batch(const Tensor& batch, const ViewConfig& cfg, Rng& rng);

// --- sources -------------------------------------------------------------------

/// Gaussian class blobs: class means are scaled orthonormal directions whose
/// pairwise distance equals `separation` exactly; within-class samples add
/// isotropic noise plus a rank-one "spike" along a per-class direction, giving
/// each class a correlated covariance structure when spike_sigma > 0.
struct SyntheticConfig {
    int classes = 10;
    Eigen::Index dim = 64;
    Eigen::Index count = 2000;
    std::uint64_t seed = 0;
    double separation = 6.0;
    double within_sigma = 1.0;
    double spike_sigma = 1.0;

    void validate() const;
};

Dataset synthetic_dataset(const SyntheticConfig& cfg);

enum class DatasetFormat { Binary, Csv };

/// Binary files use the matrix container with labels required; CSV needs a
/// header row and a column named "label" (any position), all other columns
/// are features in file order. num_classes is recovered as max label + 1.
Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format);

/// Picks the format from the extension: ".csv" is CSV, anything else binary.
Dataset load_dataset(const std::filesystem::path& path);

/// Writes the binary form (round-trips bitwise through load_dataset).
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);

}  // namespace dcco
