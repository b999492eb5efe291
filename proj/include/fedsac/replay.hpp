#pragma once

// Replay buffer that restricts each draw to the most recent c_k transitions
// (emphasizing recent experience) and samples inside that window in
// proportion to priority^nu (prioritized experience replay).

#include "fedsac/common.hpp"
#include "fedsac/simplex.hpp"

#include <deque>
#include <span>
#include <vector>

namespace fedsac {

struct Transition {
    Vector state;
    SimplexAction action;
    double reward = 0.0;
    Vector next_state;
    bool done = false;
    double priority = 1.0;
};

struct BufferConfig {
    std::size_t capacity = 100000;
    double eta = 0.996;
    std::size_t c_min = 2500;
    double nu1 = 0.6;
    double nu2 = 0.6;
    double epsilon = 1e-3;

    /// Throws ConfigError on out-of-range fields, including nu1 != nu2.
    void validate() const;
};

/// Window length for update `update_index` out of `total_updates`:
/// max(floor(capacity * eta^(update_index * 1000 / total_updates)), c_min),
/// clamped to the current buffer length.
std::size_t ere_window(const BufferConfig& cfg, std::size_t update_index, std::size_t total_updates,
                       std::size_t buffer_len);

/// 0.5 * (|td1| + |td2|) + epsilon.
double priority_from_td(double td1, double td2, double epsilon);

struct SampledBatch {
    std::vector<const Transition*> transitions;
    std::vector<double> is_weights;
    std::vector<std::uint64_t> indices;  // stable ids, see PrioritizedBuffer::push
};

class PrioritizedBuffer {
  public:
    explicit PrioritizedBuffer(BufferConfig cfg);

    /// New entries take the current maximum priority (1 when empty). Returns the
    /// entry's id; ids grow monotonically and are never reused.
    std::uint64_t push(Transition t);

    /// Draws with replacement from the c_k most recent entries, P(i) ∝ p_i^nu1.
    /// IS weights (1 / (|B'| P(i)))^nu2 are divided by the batch maximum.
    SampledBatch sample(std::size_t batch_size, std::size_t update_index, std::size_t total_updates, Rng& rng) const;
    /// Same, with an explicit window length.
    SampledBatch sample_window(std::size_t batch_size, std::size_t window, Rng& rng) const;

    /// Replaces priorities (floored at epsilon). Ids that were evicted are
    /// skipped and counted.
    void update_priorities(std::span<const std::uint64_t> ids, std::span<const double> priorities);

    std::size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }
    std::size_t skipped_updates() const { return skipped_; }
    double max_priority() const;
    const BufferConfig& config() const { return cfg_; }

    bool contains(std::uint64_t id) const { return id >= first_id_ && id < first_id_ + items_.size(); }
    const Transition& at(std::uint64_t id) const;
    /// Position 0 is the oldest retained entry.
    const Transition& at_position(std::size_t pos) const { return items_.at(pos); }
    std::uint64_t id_at_position(std::size_t pos) const { return first_id_ + pos; }

  private:
    BufferConfig cfg_;
    std::deque<Transition> items_;
    std::uint64_t first_id_ = 0;
    std::size_t skipped_ = 0;
};

}  // namespace fedsac
