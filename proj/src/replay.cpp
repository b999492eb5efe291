#include "fedsac/replay.hpp"

#include <algorithm>
#include <cmath>

namespace fedsac {

void BufferConfig::validate() const {
    if (capacity < 1) throw ConfigError("replay.capacity must be positive");
    if (!(eta > 0.0 && eta <= 1.0)) throw ConfigError("replay.eta must lie in (0, 1]");
    if (c_min < 1 || c_min > capacity) throw ConfigError("replay.c_min must lie in [1, replay.capacity]");
    if (nu1 < 0.0 || nu2 < 0.0) throw ConfigError("replay.nu1 / replay.nu2 must be non-negative");
    if (nu1 != nu2) throw ConfigError("replay.nu1 and replay.nu2 must be equal for P(i) to normalise");
    if (!(epsilon > 0.0)) throw ConfigError("replay.epsilon must be positive");
}

std::size_t ere_window(const BufferConfig& cfg, std::size_t update_index, std::size_t total_updates,
                       std::size_t buffer_len) {
    if (total_updates == 0) throw ConfigError("ere_window: total_updates must be positive");
    update_index = std::clamp<std::size_t>(update_index, 1, total_updates);
    const double exponent = static_cast<double>(update_index) * 1000.0 / static_cast<double>(total_updates);
    const double raw = std::floor(static_cast<double>(cfg.capacity) * std::pow(cfg.eta, exponent));
    const auto ck = std::max(static_cast<std::size_t>(raw), cfg.c_min);
    return std::min(ck, buffer_len);
}

double priority_from_td(double td1, double td2, double epsilon) {
    return 0.5 * (std::abs(td1) + std::abs(td2)) + epsilon;
}

PrioritizedBuffer::PrioritizedBuffer(BufferConfig cfg) : cfg_(cfg) { cfg_.validate(); }

double PrioritizedBuffer::max_priority() const {
    double m = 0.0;
    for (const auto& t : items_) m = std::max(m, t.priority);
    return items_.empty() ? 1.0 : m;
}

std::uint64_t PrioritizedBuffer::push(Transition t) {
    if (t.state.size() != t.next_state.size()) throw ShapeError("transition state and next_state lengths differ");
    t.priority = max_priority();
    items_.push_back(std::move(t));
    if (items_.size() > cfg_.capacity) {
        items_.pop_front();
        ++first_id_;
    }
    return first_id_ + items_.size() - 1;
}

const Transition& PrioritizedBuffer::at(std::uint64_t id) const {
    if (!contains(id)) throw std::out_of_range("replay id " + std::to_string(id) + " is not in the buffer");
    return items_[static_cast<std::size_t>(id - first_id_)];
}

SampledBatch PrioritizedBuffer::sample(std::size_t batch_size, std::size_t update_index, std::size_t total_updates,
                                       Rng& rng) const {
    return sample_window(batch_size, ere_window(cfg_, update_index, total_updates, items_.size()), rng);
}

SampledBatch PrioritizedBuffer::sample_window(std::size_t batch_size, std::size_t window, Rng& rng) const {
    if (items_.size() < batch_size || items_.empty())
        throw std::length_error("replay buffer holds " + std::to_string(items_.size()) + " items, need " +
                                std::to_string(batch_size));
    window = std::clamp<std::size_t>(window, 1, items_.size());
    const std::size_t first = items_.size() - window;

    std::vector<double> cumulative(window);
    double total = 0.0;
    for (std::size_t j = 0; j < window; ++j) {
        total += std::pow(items_[first + j].priority, cfg_.nu1);
        cumulative[j] = total;
    }

    SampledBatch out;
    out.transitions.reserve(batch_size);
    out.is_weights.reserve(batch_size);
    out.indices.reserve(batch_size);
    std::uniform_real_distribution<double> u(0.0, total);
    double max_w = 0.0;
    for (std::size_t b = 0; b < batch_size; ++b) {
        const double x = u(rng);
        auto it = std::upper_bound(cumulative.begin(), cumulative.end(), x);
        const auto j = std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), window - 1);
        const Transition& t = items_[first + j];
        const double p = std::pow(t.priority, cfg_.nu1) / total;
        const double w = std::pow(1.0 / (static_cast<double>(window) * p), cfg_.nu2);
        max_w = std::max(max_w, w);
        out.transitions.push_back(&t);
        out.is_weights.push_back(w);
        out.indices.push_back(first_id_ + first + j);
    }
    for (double& w : out.is_weights) w /= max_w;
    return out;
}

void PrioritizedBuffer::update_priorities(std::span<const std::uint64_t> ids, std::span<const double> priorities) {
    if (ids.size() != priorities.size()) throw ShapeError("update_priorities: id and priority counts differ");
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (!contains(ids[i])) {
            ++skipped_;
            continue;
        }
        const double p = std::isfinite(priorities[i]) ? priorities[i] : cfg_.epsilon;
        items_[static_cast<std::size_t>(ids[i] - first_id_)].priority = std::max(p, cfg_.epsilon);
    }
}

}  // namespace fedsac
