#include "fedsac/data.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <numeric>

namespace fedsac {

Batch Dataset::gather(std::span<const std::size_t> indices) const {
    Batch b;
    b.inputs.resize(static_cast<Eigen::Index>(indices.size()), inputs.cols());
    b.labels.resize(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        b.inputs.row(static_cast<Eigen::Index>(i)) = inputs.row(static_cast<Eigen::Index>(indices[i]));
        b.labels[i] = labels.at(indices[i]);
    }
    return b;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Batch b = gather(indices);
    return {std::move(b.inputs), std::move(b.labels), num_classes};
}

namespace {

std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw FormatError("cannot open " + p.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::uint32_t be_u32(const std::string& bytes, std::size_t off, const std::filesystem::path& p) {
    if (bytes.size() < off + 4) throw IdxTruncated("truncated IDX header in " + p.string());
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[off + i]);
    return v;
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
    const std::string img = read_file(images_path);
    const std::string lab = read_file(labels_path);

    const auto img_magic = be_u32(img, 0, images_path);
    if (img_magic != 0x00000803)
        throw IdxBadMagic("bad image magic " + std::to_string(img_magic) + " in " + images_path.string());
    const auto lab_magic = be_u32(lab, 0, labels_path);
    if (lab_magic != 0x00000801)
        throw IdxBadMagic("bad label magic " + std::to_string(lab_magic) + " in " + labels_path.string());

    const std::size_t n_img = be_u32(img, 4, images_path);
    const std::size_t rows = be_u32(img, 8, images_path);
    const std::size_t cols = be_u32(img, 12, images_path);
    const std::size_t n_lab = be_u32(lab, 4, labels_path);
    if (n_img != n_lab)
        throw IdxCountMismatch("image count " + std::to_string(n_img) + " differs from label count " +
                               std::to_string(n_lab));
    const std::size_t dim = rows * cols;
    if (img.size() < 16 + n_img * dim) throw IdxTruncated("image file truncated: " + images_path.string());
    if (lab.size() < 8 + n_lab) throw IdxTruncated("label file truncated: " + labels_path.string());

    Dataset ds;
    ds.inputs.resize(static_cast<Eigen::Index>(n_img), static_cast<Eigen::Index>(dim));
    const auto* px = reinterpret_cast<const unsigned char*>(img.data() + 16);
    for (std::size_t i = 0; i < n_img * dim; ++i) ds.inputs.data()[i] = px[i] / 255.0;
    ds.labels.resize(n_lab);
    int max_label = 0;
    for (std::size_t i = 0; i < n_lab; ++i) {
        ds.labels[i] = static_cast<unsigned char>(lab[8 + i]);
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.num_classes = max_label + 1;
    return ds;
}

Dataset synth_dataset(int num_classes, int per_class, int feature_dim, double noise_sigma, std::uint64_t seed) {
    if (num_classes < 1 || per_class < 1 || feature_dim < 1)
        throw ConfigError("synth_dataset needs positive class, per-class and feature counts");
    Dataset ds;
    ds.num_classes = num_classes;
    const auto n = static_cast<Eigen::Index>(num_classes) * per_class;
    ds.inputs.resize(n, feature_dim);
    ds.labels.resize(static_cast<std::size_t>(n));
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::Index row = 0;
    for (int c = 0; c < num_classes; ++c) {
        Rng anchor_rng = make_rng(seed, "synth.anchor", static_cast<std::uint64_t>(c));
        std::uniform_real_distribution<double> u(0.0, 1.0);
        Vector anchor(feature_dim);
        for (int j = 0; j < feature_dim; ++j) anchor[j] = u(anchor_rng);
        Rng noise_rng = make_rng(seed, "synth.noise", static_cast<std::uint64_t>(c));
        for (int s = 0; s < per_class; ++s, ++row) {
            for (int j = 0; j < feature_dim; ++j)
                ds.inputs(row, j) = std::clamp(anchor[j] + noise_sigma * gauss(noise_rng), 0.0, 1.0);
            ds.labels[static_cast<std::size_t>(row)] = c;
        }
    }
    return ds;
}

Partition partition_iid(const Dataset& data, std::size_t clients, std::uint64_t seed) {
    const std::size_t n = data.size();
    if (clients == 0 || clients > n)
        throw ConfigError("cannot split " + std::to_string(n) + " samples across " + std::to_string(clients) +
                          " clients");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(seed, "partition.iid");
    std::shuffle(order.begin(), order.end(), rng);
    Partition p;
    p.mode = PartitionMode::iid;
    p.client_indices.resize(clients);
    const std::size_t base = n / clients, extra = n % clients;
    std::size_t pos = 0;
    for (std::size_t c = 0; c < clients; ++c) {
        const std::size_t len = base + (c < extra ? 1 : 0);
        p.client_indices[c].assign(order.begin() + static_cast<long>(pos), order.begin() + static_cast<long>(pos + len));
        pos += len;
    }
    return p;
}

Partition partition_noniid(const Dataset& data, std::size_t clients, std::size_t shards_per_client,
                           std::uint64_t seed) {
    const std::size_t n = data.size();
    const std::size_t shards = clients * shards_per_client;
    if (clients == 0 || shards_per_client == 0 || shards > n)
        throw ConfigError("infeasible shard count: " + std::to_string(shards) + " shards for " + std::to_string(n) +
                          " samples");
    Rng rng = make_rng(seed, "partition.noniid");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Shuffle first so ties within a label are broken by the seed.
    std::shuffle(order.begin(), order.end(), rng);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return data.labels[a] < data.labels[b]; });

    std::vector<std::pair<std::size_t, std::size_t>> bounds;
    const std::size_t base = n / shards, extra = n % shards;
    std::size_t pos = 0;
    for (std::size_t s = 0; s < shards; ++s) {
        const std::size_t len = base + (s < extra ? 1 : 0);
        bounds.emplace_back(pos, pos + len);
        pos += len;
    }
    std::vector<std::size_t> deal(shards);
    std::iota(deal.begin(), deal.end(), 0);
    std::shuffle(deal.begin(), deal.end(), rng);

    Partition p;
    p.mode = PartitionMode::noniid;
    p.client_indices.resize(clients);
    for (std::size_t c = 0; c < clients; ++c) {
        for (std::size_t j = 0; j < shards_per_client; ++j) {
            const auto [lo, hi] = bounds[deal[c * shards_per_client + j]];
            p.client_indices[c].insert(p.client_indices[c].end(), order.begin() + static_cast<long>(lo),
                                       order.begin() + static_cast<long>(hi));
        }
    }
    return p;
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& data, std::size_t holdout, std::uint64_t seed) {
    if (holdout >= data.size()) throw ConfigError("holdout larger than dataset");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(seed, "split.holdout");
    std::shuffle(order.begin(), order.end(), rng);
    std::span<const std::size_t> all(order);
    return {data.subset(all.subspan(holdout)), data.subset(all.first(holdout))};
}

double mean_label_tv_from_uniform(const Dataset& data, const Partition& partition) {
    const auto C = static_cast<std::size_t>(data.num_classes);
    double total = 0.0;
    for (const auto& idx : partition.client_indices) {
        std::vector<double> hist(C, 0.0);
        for (auto i : idx) hist[static_cast<std::size_t>(data.labels[i])] += 1.0;
        double tv = 0.0;
        for (double h : hist) tv += std::abs(h / static_cast<double>(idx.size()) - 1.0 / static_cast<double>(C));
        total += 0.5 * tv;
    }
    return total / static_cast<double>(partition.num_clients());
}

}  // namespace fedsac
