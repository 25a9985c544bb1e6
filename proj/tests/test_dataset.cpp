#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "dcco/dataset.hpp"
#include "dcco/serialize.hpp"

using namespace dcco;

namespace {

// Half the L1 distance between a client's class histogram and the prior.
double tv_distance(const ClientDataset& client, const std::vector<double>& prior) {
    std::vector<double> hist(prior.size(), 0.0);
    for (int label : client.labels) hist[static_cast<std::size_t>(label)] += 1.0;
    for (double& h : hist) h /= static_cast<double>(client.size());
    double tv = 0.0;
    for (std::size_t c = 0; c < prior.size(); ++c) tv += std::abs(hist[c] - prior[c]);
    return 0.5 * tv;
}

bool single_class(const ClientDataset& client) {
    return std::all_of(client.labels.begin(), client.labels.end(),
                       [&](int l) { return l == client.labels.front(); });
}

double top_covariance_eigenvalue(const Dataset& data, int cls) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < data.size(); ++i) {
        if (data.labels[static_cast<std::size_t>(i)] == cls) rows.push_back(i);
    }
    const Dataset sub = subset(data, rows);
    const Matrix& x = sub.features.mat();
    const Matrix centered = x.rowwise() - x.colwise().mean();
    const Matrix cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
    return solver.eigenvalues().maxCoeff();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

}  // namespace

TEST_CASE("synthetic data places class means exactly `separation` apart") {
    SyntheticConfig cfg;
    cfg.classes = 5;
    cfg.dim = 16;
    cfg.count = 5;  // one noiseless sample per class IS the class mean
    cfg.within_sigma = 0.0;
    cfg.spike_sigma = 0.0;
    cfg.separation = 6.0;
    const Dataset data = synthetic_dataset(cfg);

    for (Eigen::Index a = 0; a < 5; ++a) {
        for (Eigen::Index b = a + 1; b < 5; ++b) {
            const double dist =
                (data.features.mat().row(a) - data.features.mat().row(b)).norm();
            CHECK(dist == doctest::Approx(6.0).epsilon(1e-9));
        }
    }
}

TEST_CASE("synthetic data is deterministic, balanced, and validated") {
    SyntheticConfig cfg;
    cfg.classes = 10;
    cfg.dim = 32;
    cfg.count = 205;
    cfg.seed = 3;
    const Dataset a = synthetic_dataset(cfg);
    const Dataset b = synthetic_dataset(cfg);

    CHECK(a.size() == 205);
    CHECK(a.dim() == 32);
    CHECK(a.num_classes == 10);
    CHECK((a.features.mat() - b.features.mat()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.labels == b.labels);

    // round-robin labels: counts differ by at most one
    std::vector<int> counts(10, 0);
    for (int label : a.labels) counts[static_cast<std::size_t>(label)]++;
    CHECK(*std::max_element(counts.begin(), counts.end()) -
              *std::min_element(counts.begin(), counts.end()) <=
          1);

    SyntheticConfig other = cfg;
    other.seed = 4;
    const Dataset c = synthetic_dataset(other);
    CHECK((a.features.mat() - c.features.mat()).cwiseAbs().maxCoeff() > 0.0);

    SyntheticConfig bad = cfg;
    bad.classes = 64;
    bad.dim = 8;
    CHECK_THROWS_AS(synthetic_dataset(bad), InvalidConfig);
}

TEST_CASE("spike noise adds a dominant covariance direction") {
    SyntheticConfig base;
    base.classes = 2;
    base.dim = 8;
    base.count = 1000;
    base.within_sigma = 0.5;
    base.spike_sigma = 0.0;
    base.seed = 11;
    const double isotropic = top_covariance_eigenvalue(synthetic_dataset(base), 0);

    SyntheticConfig spiked = base;
    spiked.spike_sigma = 3.0;
    const double dominated = top_covariance_eigenvalue(synthetic_dataset(spiked), 0);

    // isotropic top eigenvalue ~ 0.25; spike adds ~ 9 along one direction
    CHECK(dominated > 5.0 * isotropic);
}

TEST_CASE("partition is exact: disjoint clients covering the quota") {
    SyntheticConfig dcfg;
    dcfg.classes = 10;
    dcfg.dim = 16;
    dcfg.count = 400;
    const Dataset data = synthetic_dataset(dcfg);

    PartitionSpec spec;
    spec.num_clients = 20;
    spec.samples_per_client = 15;
    spec.alpha = 1000.0;
    spec.seed = 5;

    const auto clients = dirichlet_partition(data, spec);
    REQUIRE(clients.size() == 20);

    std::set<Eigen::Index> seen;
    for (const auto& client : clients) {
        CHECK(client.size() == 15);
        REQUIRE(client.source_rows.size() == 15);
        for (std::size_t i = 0; i < client.source_rows.size(); ++i) {
            const Eigen::Index row = client.source_rows[i];
            CHECK(seen.insert(row).second);  // no row lands in two clients
            CHECK(client.labels[i] == data.labels[static_cast<std::size_t>(row)]);
            CHECK((client.features.mat().row(static_cast<Eigen::Index>(i)) -
                   data.features.mat().row(row))
                      .cwiseAbs()
                      .maxCoeff() == 0.0);
        }
    }
    CHECK(seen.size() == 20u * 15u);

    SUBCASE("same spec twice gives the identical partition") {
        const auto again = dirichlet_partition(data, spec);
        for (std::size_t k = 0; k < clients.size(); ++k) {
            CHECK(again[k].source_rows == clients[k].source_rows);
        }
    }
    SUBCASE("a different seed moves samples") {
        PartitionSpec other = spec;
        other.seed = 6;
        const auto moved = dirichlet_partition(data, other);
        bool any_difference = false;
        for (std::size_t k = 0; k < clients.size(); ++k) {
            if (moved[k].source_rows != clients[k].source_rows) any_difference = true;
        }
        CHECK(any_difference);
    }
}

TEST_CASE("alpha 0 yields single-class clients with prior-like class usage") {
    SyntheticConfig dcfg;
    dcfg.classes = 10;
    dcfg.dim = 16;
    dcfg.count = 2000;
    const Dataset data = synthetic_dataset(dcfg);

    PartitionSpec spec;
    spec.num_clients = 100;
    spec.samples_per_client = 2;
    spec.alpha = 0.0;
    spec.seed = 9;

    const auto clients = dirichlet_partition(data, spec);
    std::vector<int> class_use(10, 0);
    for (const auto& client : clients) {
        REQUIRE(single_class(client));
        class_use[static_cast<std::size_t>(client.labels.front())]++;
    }
    // 100 clients over a uniform 10-class prior: expectation 10 per class,
    // multinomial sd ~ 3; bounds are ~4 sd wide.
    for (int used : class_use) {
        CHECK(used >= 1);
        CHECK(used <= 25);
    }
}

TEST_CASE("alpha 1000 keeps client histograms close to the global prior") {
    SyntheticConfig dcfg;
    dcfg.classes = 10;
    dcfg.dim = 16;
    dcfg.count = 2000;
    const Dataset data = synthetic_dataset(dcfg);
    const auto prior = class_prior(data);

    PartitionSpec spec;
    spec.num_clients = 10;
    spec.samples_per_client = 128;
    spec.alpha = 1000.0;
    spec.seed = 17;

    const auto clients = dirichlet_partition(data, spec);
    for (const auto& client : clients) {
        CAPTURE(client.client_id);
        CHECK(tv_distance(client, prior) <= 0.2);
    }
}

TEST_CASE("exhausted class pools fall back without breaking the partition") {
    // 6 samples of class 0 and 2 of class 1; four clients of two samples each
    // consume the whole dataset, so class 1 runs out for late draws.
    Matrix features(8, 2);
    for (Eigen::Index i = 0; i < 8; ++i) {
        features(i, 0) = static_cast<double>(i);
        features(i, 1) = -static_cast<double>(i);
    }
    Dataset data;
    data.features = Tensor::from_matrix(std::move(features));
    data.labels = {0, 0, 0, 0, 0, 0, 1, 1};
    data.num_classes = 2;

    PartitionSpec spec;
    spec.num_clients = 4;
    spec.samples_per_client = 2;

    SUBCASE("single-class clients survive fallback") {
        spec.alpha = 0.0;
        bool fallback_seen = false;
        for (std::uint64_t seed = 0; seed < 64 && !fallback_seen; ++seed) {
            spec.seed = seed;
            PartitionLog log;
            const auto clients = dirichlet_partition(data, spec, &log);
            if (log.fallback_events == 0) continue;
            fallback_seen = true;
            std::set<Eigen::Index> seen;
            for (const auto& client : clients) {
                CHECK(single_class(client));
                for (Eigen::Index row : client.source_rows) CHECK(seen.insert(row).second);
            }
            CHECK(seen.size() == 8);
        }
        CHECK(fallback_seen);
    }
    SUBCASE("dirichlet draws survive fallback") {
        spec.alpha = 1000.0;
        bool fallback_seen = false;
        for (std::uint64_t seed = 0; seed < 64 && !fallback_seen; ++seed) {
            spec.seed = seed;
            PartitionLog log;
            const auto clients = dirichlet_partition(data, spec, &log);
            if (log.fallback_events == 0) continue;
            fallback_seen = true;
            std::set<Eigen::Index> seen;
            for (const auto& client : clients) {
                for (Eigen::Index row : client.source_rows) CHECK(seen.insert(row).second);
            }
            CHECK(seen.size() == 8);
        }
        CHECK(fallback_seen);
    }
    SUBCASE("no single class can serve a full quota") {
        Dataset skewed;
        Matrix f(8, 1);
        f.setZero();
        skewed.features = Tensor::from_matrix(std::move(f));
        skewed.labels = {0, 0, 0, 0, 0, 0, 0, 1};
        skewed.num_classes = 2;
        spec.alpha = 0.0;
        spec.seed = 1;
        // clients 1-3 drain class 0 (class 1 never has 2 rows), client 4 finds
        // no class with 2 rows left
        CHECK_THROWS_AS(dirichlet_partition(skewed, spec), InsufficientSamples);
    }
}

TEST_CASE("partition spec validation") {
    SyntheticConfig dcfg;
    dcfg.classes = 2;
    dcfg.dim = 4;
    dcfg.count = 10;
    const Dataset data = synthetic_dataset(dcfg);

    PartitionSpec spec;
    spec.num_clients = 5;
    spec.samples_per_client = 2;
    spec.alpha = 1.0;
    CHECK_NOTHROW(dirichlet_partition(data, spec));

    PartitionSpec too_many = spec;
    too_many.num_clients = 6;
    CHECK_THROWS_AS(dirichlet_partition(data, too_many), InvalidConfig);

    PartitionSpec negative_alpha = spec;
    negative_alpha.alpha = -0.5;
    CHECK_THROWS_AS(dirichlet_partition(data, negative_alpha), InvalidConfig);

    PartitionSpec zero_quota = spec;
    zero_quota.samples_per_client = 0;
    CHECK_THROWS_AS(dirichlet_partition(data, zero_quota), InvalidConfig);
}

TEST_CASE("tiny alpha degrades gracefully to near-one-hot clients") {
    SyntheticConfig dcfg;
    dcfg.classes = 10;
    dcfg.dim = 16;
    dcfg.count = 2000;
    const Dataset data = synthetic_dataset(dcfg);

    PartitionSpec spec;
    spec.num_clients = 20;
    spec.samples_per_client = 4;
    spec.alpha = 1e-9;  // gamma draws underflow; the one-hot limit kicks in
    spec.seed = 2;
    const auto clients = dirichlet_partition(data, spec);
    std::set<Eigen::Index> seen;
    for (const auto& client : clients) {
        for (Eigen::Index row : client.source_rows) CHECK(seen.insert(row).second);
    }
    CHECK(seen.size() == 80);
}

TEST_CASE("identity augmentation returns the sample bitwise") {
    const Tensor sample({1, 6}, {1.5, -2.0, 0.0, 3.25, -0.5, 7.0});
    ViewConfig cfg;
    cfg.noise_sigma = 0.0;
    cfg.mask_prob = 0.0;
    cfg.flip_len = 0;
    Rng rng(4);
    const auto [a, b] = make_views(sample, cfg, rng);
    CHECK((a.mat() - sample.mat()).cwiseAbs().maxCoeff() == 0.0);
    CHECK((b.mat() - sample.mat()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("views are random but reproducible, and never mutate the source") {
    const Tensor sample({1, 16}, std::vector<double>(16, 1.0));
    const Matrix before = sample.mat();
    ViewConfig cfg;  // defaults enable noise and masking

    Rng rng1(10);
    const auto [a1, b1] = make_views(sample, cfg, rng1);
    Rng rng2(10);
    const auto [a2, b2] = make_views(sample, cfg, rng2);

    CHECK((sample.mat() - before).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a1.mat() - a2.mat()).cwiseAbs().maxCoeff() == 0.0);
    CHECK((b1.mat() - b2.mat()).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a1.mat() - b1.mat()).cwiseAbs().maxCoeff() > 0.0);  // independent draws

    Rng rng3(11);
    const auto [a3, b3] = make_views(sample, cfg, rng3);
    CHECK((a1.mat() - a3.mat()).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("masking and flipping behave as documented") {
    const Tensor sample({1, 8}, {1, 2, 3, 4, 5, 6, 7, 8});
    Rng rng(3);

    SUBCASE("mask probability one zeroes everything") {
        ViewConfig cfg;
        cfg.noise_sigma = 0.0;
        cfg.mask_prob = 1.0;
        cfg.flip_len = 0;
        const auto [a, b] = make_views(sample, cfg, rng);
        CHECK(a.mat().cwiseAbs().maxCoeff() == 0.0);
        CHECK(b.mat().cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("full-width flip negates the whole sample") {
        ViewConfig cfg;
        cfg.noise_sigma = 0.0;
        cfg.mask_prob = 0.0;
        cfg.flip_len = 8;
        const auto [a, b] = make_views(sample, cfg, rng);
        CHECK((a.mat() + sample.mat()).cwiseAbs().maxCoeff() == 0.0);
        CHECK((b.mat() + sample.mat()).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("partial flip negates one contiguous block") {
        ViewConfig cfg;
        cfg.noise_sigma = 0.0;
        cfg.mask_prob = 0.0;
        cfg.flip_len = 3;
        const auto [a, b] = make_views(sample, cfg, rng);
        int sign_changes = 0;
        Eigen::Index first = -1;
        for (Eigen::Index j = 0; j < 8; ++j) {
            if (a.mat()(0, j) < 0) {
                if (first < 0) first = j;
                ++sign_changes;
            }
        }
        CHECK(sign_changes == 3);
        // the flipped block is contiguous
        for (Eigen::Index j = first; j < first + 3; ++j) CHECK(a.mat()(0, j) < 0);
        (void)b;
    }
    SUBCASE("flip longer than the sample is rejected") {
        ViewConfig cfg;
        cfg.flip_len = 9;
        CHECK_THROWS_AS(make_views(sample, cfg, rng), InvalidConfig);
    }
    SUBCASE("negative noise is rejected") {
        ViewConfig cfg;
        cfg.noise_sigma = -1.0;
        CHECK_THROWS_AS(make_views(sample, cfg, rng), InvalidConfig);
    }
}

TEST_CASE("batch augmentation matches row-by-row augmentation") {
    SyntheticConfig dcfg;
    dcfg.classes = 2;
    dcfg.dim = 6;
    dcfg.count = 5;
    const Dataset data = synthetic_dataset(dcfg);
    ViewConfig cfg;
    cfg.flip_len = 2;

    Rng batch_rng(21);
    const Tensor batched = augment_batch(data.features, cfg, batch_rng);

    Rng row_rng(21);
    Matrix manual = data.features.mat();
    for (Eigen::Index i = 0; i < manual.rows(); ++i) {
        Tensor row = Tensor::from_matrix(manual.row(i));
        const Tensor augmented = augment_batch(row, cfg, row_rng);
        manual.row(i) = augmented.mat();
    }
    CHECK((batched.mat() - manual).cwiseAbs().maxCoeff() == 0.0);

    CHECK_THROWS_AS(augment_batch(Tensor::scalar(1.0), cfg, batch_rng), ShapeMismatch);
}

TEST_CASE("binary dataset files round-trip bitwise") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "dcco_dataset_test";
    fs::create_directories(dir);

    SyntheticConfig dcfg;
    dcfg.classes = 10;
    dcfg.dim = 64;
    dcfg.count = 2000;
    dcfg.seed = 0;
    const Dataset data = synthetic_dataset(dcfg);

    const fs::path path = dir / "toy.bin";
    save_dataset(path, data);
    const Dataset loaded = load_dataset(path);

    CHECK(loaded.num_classes == data.num_classes);
    CHECK(loaded.labels == data.labels);
    REQUIRE(loaded.size() == data.size());
    bool bitwise = true;
    for (Eigen::Index i = 0; i < data.features.mat().size(); ++i) {
        if (loaded.features.mat().data()[i] != data.features.mat().data()[i]) bitwise = false;
    }
    CHECK(bitwise);

    SUBCASE("a matrix file without labels is rejected as a dataset") {
        MatrixFile unlabeled{data.features.mat(), std::nullopt};
        const fs::path bare = dir / "unlabeled.bin";
        write_file_atomic(bare, encode_matrix(unlabeled));
        CHECK_THROWS_AS(load_dataset(bare), ParseError);
    }
    fs::remove_all(dir);
}

TEST_CASE("CSV loading honors the header and label column") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "dcco_csv_test";
    fs::create_directories(dir);
    const fs::path path = dir / "data.csv";

    SUBCASE("label column may sit anywhere") {
        write_text(path,
                   "x0,label,x1\r\n"
                   "1.5,0,-2.25\r\n"
                   "0.125,2,4\r\n");
        const Dataset data = load_dataset(path);
        CHECK(data.size() == 2);
        CHECK(data.dim() == 2);
        CHECK(data.num_classes == 3);
        CHECK(data.labels == std::vector<int>{0, 2});
        CHECK(data.features.mat()(0, 0) == 1.5);
        CHECK(data.features.mat()(0, 1) == -2.25);
        CHECK(data.features.mat()(1, 0) == 0.125);
        CHECK(data.features.mat()(1, 1) == 4.0);
    }
    SUBCASE("non-numeric cells name their line and column") {
        write_text(path,
                   "x0,x1,label\n"
                   "1,2,0\n"
                   "1,oops,1\n");
        try {
            load_dataset(path);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("line 3") != std::string::npos);
            CHECK(msg.find("\"x1\"") != std::string::npos);
            CHECK(msg.find("oops") != std::string::npos);
        }
    }
    SUBCASE("ragged rows are rejected") {
        write_text(path, "x0,label\n1,0\n1,2,3\n");
        CHECK_THROWS_AS(load_dataset(path), ParseError);
    }
    SUBCASE("missing label column") {
        write_text(path, "x0,x1\n1,2\n");
        CHECK_THROWS_AS(load_dataset(path), ParseError);
    }
    SUBCASE("fractional labels are rejected") {
        write_text(path, "x0,label\n1,0.5\n");
        CHECK_THROWS_AS(load_dataset(path), ParseError);
    }
    SUBCASE("negative labels are rejected") {
        write_text(path, "x0,label\n1,-1\n");
        CHECK_THROWS_AS(load_dataset(path), ParseError);
    }
    SUBCASE("header-only files are rejected") {
        write_text(path, "x0,label\n");
        CHECK_THROWS_AS(load_dataset(path), ParseError);
    }
    fs::remove_all(dir);
}

TEST_CASE("subset gathers rows and validates bounds") {
    SyntheticConfig dcfg;
    dcfg.classes = 3;
    dcfg.dim = 4;
    dcfg.count = 9;
    const Dataset data = synthetic_dataset(dcfg);

    const std::vector<Eigen::Index> rows = {7, 0, 4};
    const Dataset sub = subset(data, rows);
    CHECK(sub.size() == 3);
    CHECK(sub.num_classes == 3);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(sub.labels[i] == data.labels[static_cast<std::size_t>(rows[i])]);
        CHECK((sub.features.mat().row(static_cast<Eigen::Index>(i)) -
               data.features.mat().row(rows[i]))
                  .cwiseAbs()
                  .maxCoeff() == 0.0);
    }
    const std::vector<Eigen::Index> bad = {0, 9};
    CHECK_THROWS_AS(subset(data, bad), InvalidConfig);

    const auto prior = class_prior(data);
    double total = 0.0;
    for (double p : prior) total += p;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}
