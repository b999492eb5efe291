#pragma once

#include "fedsac/common.hpp"
#include "fedsac/nncore.hpp"

#include <filesystem>
#include <vector>

namespace fedsac {

/// Inputs are normalized to [0, 1]; one sample per row.
struct Dataset {
    Matrix inputs;
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return labels.size(); }
    int feature_dim() const { return static_cast<int>(inputs.cols()); }

    Batch gather(std::span<const std::size_t> indices) const;
    Dataset subset(std::span<const std::size_t> indices) const;
};

struct IdxBadMagic : FormatError {
    using FormatError::FormatError;
};
struct IdxTruncated : FormatError {
    using FormatError::FormatError;
};
struct IdxCountMismatch : FormatError {
    using FormatError::FormatError;
};

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Pixel bytes are scaled by 1/255. num_classes is max label + 1.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Class c is a fixed anchor in [0,1]^feature_dim plus N(0, noise_sigma^2)
/// noise, clipped to [0, 1]. Anchors depend only on (seed, class).
Dataset synth_dataset(int num_classes, int per_class, int feature_dim, double noise_sigma, std::uint64_t seed);

enum class PartitionMode { iid, noniid };

struct Partition {
    std::vector<std::vector<std::size_t>> client_indices;
    PartitionMode mode = PartitionMode::iid;

    std::size_t num_clients() const { return client_indices.size(); }
};

/// Shuffle then split into `clients` shards whose sizes differ by at most one.
Partition partition_iid(const Dataset& data, std::size_t clients, std::uint64_t seed);

/// Label-sorted shard scheme: sort by label, cut into clients * shards_per_client
/// contiguous shards, deal shards_per_client random shards to each client. The
/// remainder (fewer than one shard of samples) is spread over the first shards.
Partition partition_noniid(const Dataset& data, std::size_t clients, std::size_t shards_per_client,
                           std::uint64_t seed);

/// Seeded split of `data` into a training part and `holdout` held-out samples.
std::pair<Dataset, Dataset> split_holdout(const Dataset& data, std::size_t holdout, std::uint64_t seed);

/// Mean over clients of the total-variation distance between the client's
/// label histogram and the uniform distribution over classes.
double mean_label_tv_from_uniform(const Dataset& data, const Partition& partition);

}  // namespace fedsac
