#include "raremem/memory.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace raremem {

void MemoryConfig::validate() const {
    if (memory_size < 1) throw std::invalid_argument("MemoryConfig: memory_size must be >= 1");
    if (key_size < 1) throw std::invalid_argument("MemoryConfig: key_size must be >= 1");
    if (k < 1 || k > memory_size)
        throw std::invalid_argument("MemoryConfig: k must be in [1, memory_size]");
    if (!(alpha > 0.0)) throw std::invalid_argument("MemoryConfig: alpha must be > 0");
    if (!(t > 0.0)) throw std::invalid_argument("MemoryConfig: t must be > 0");
    if (effective_jitter() > memory_size / 16)
        throw std::invalid_argument("MemoryConfig: jitter_bound must be <= memory_size/16");
}

std::vector<uint64_t> MemoryStore::ages() const {
    std::vector<uint64_t> out(last_touch.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = tick - last_touch[i];
    return out;
}

int64_t MemoryStore::value_count(uint32_t v) const {
    auto it = value_counts_.find(v);
    return it == value_counts_.end() ? 0 : it->second;
}

void MemoryStore::set_value(int64_t slot, uint32_t v) {
    const uint32_t old = values[slot];
    if (old == v) return;
    auto it = value_counts_.find(old);
    if (it != value_counts_.end() && --it->second == 0) value_counts_.erase(it);
    ++value_counts_[v];
    values[slot] = v;
}

void MemoryStore::rebuild_value_counts() {
    value_counts_.clear();
    for (uint32_t v : values) ++value_counts_[v];
}

void MemoryStore::touch_slot(int64_t slot) {
    const int32_t s = static_cast<int32_t>(slot);
    if (lru_tail_ == s) return;
    // unlink
    const int32_t prev = lru_prev_[s];
    const int32_t next = lru_next_[s];
    if (prev >= 0) lru_next_[prev] = next;
    if (next >= 0) lru_prev_[next] = prev;
    if (lru_head_ == s) lru_head_ = next;
    // append at tail (most recently touched)
    lru_prev_[s] = lru_tail_;
    lru_next_[s] = -1;
    if (lru_tail_ >= 0) lru_next_[lru_tail_] = s;
    lru_tail_ = s;
    if (lru_head_ < 0) lru_head_ = s;
}

void MemoryStore::rebuild_lru() {
    const int64_t n = config.memory_size;
    std::vector<int32_t> order(n);
    for (int64_t i = 0; i < n; ++i) order[i] = static_cast<int32_t>(i);
    // Oldest first; equal touch times (fresh stores) keep ascending index.
    std::stable_sort(order.begin(), order.end(), [this](int32_t a, int32_t b) {
        return last_touch[a] < last_touch[b];
    });
    lru_prev_.assign(n, -1);
    lru_next_.assign(n, -1);
    lru_head_ = order.empty() ? -1 : order.front();
    lru_tail_ = order.empty() ? -1 : order.back();
    for (int64_t i = 0; i < n; ++i) {
        if (i > 0) lru_prev_[order[i]] = order[i - 1];
        if (i + 1 < n) lru_next_[order[i]] = order[i + 1];
    }
}

bool MemoryStore::same_contents(const MemoryStore& other) const {
    return config.memory_size == other.config.memory_size &&
           config.key_size == other.config.key_size && config.k == other.config.k &&
           config.alpha == other.config.alpha && config.t == other.config.t &&
           config.effective_jitter() == other.config.effective_jitter() &&
           config.seed == other.config.seed && keys == other.keys &&
           values == other.values && tick == other.tick &&
           last_touch == other.last_touch && rng == other.rng;
}

MemoryStore new_memory(const MemoryConfig& config) {
    config.validate();
    MemoryStore store;
    store.config = config;
    store.rng = Rng(derive_seed(config.seed, 0x6d656d /* "mem" */));
    store.keys.resize(config.memory_size, config.key_size);
    for (int64_t i = 0; i < config.memory_size; ++i) {
        double norm = 0.0;
        do {
            norm = 0.0;
            for (int j = 0; j < config.key_size; ++j) {
                store.keys(i, j) = store.rng.gaussian();
                norm += store.keys(i, j) * store.keys(i, j);
            }
            norm = std::sqrt(norm);
        } while (norm < 1e-12);
        for (int j = 0; j < config.key_size; ++j)
            store.keys(i, j) = quantize_f32(store.keys(i, j) / norm);
    }
    store.values.assign(config.memory_size, kNoneValue);
    store.last_touch.assign(config.memory_size, 0);
    store.tick = 0;
    store.rebuild_value_counts();
    store.rebuild_lru();
    return store;
}

std::vector<double> softmax_confidences(const std::vector<double>& similarities, double t) {
    std::vector<double> out(similarities.size());
    if (similarities.empty()) return out;
    double best = similarities[0];
    for (double s : similarities) best = std::max(best, s);
    double sum = 0.0;
    for (size_t i = 0; i < similarities.size(); ++i) {
        out[i] = std::exp((similarities[i] - best) * t);
        sum += out[i];
    }
    for (double& c : out) c /= sum;
    return out;
}

QueryResult make_query_result(const MemoryStore& store, const std::vector<Neighbor>& ranked) {
    QueryResult result;
    result.indices.reserve(ranked.size());
    result.similarities.reserve(ranked.size());
    for (const Neighbor& nb : ranked) {
        result.indices.push_back(nb.index);
        result.similarities.push_back(nb.similarity);
    }
    result.confidences = softmax_confidences(result.similarities, store.config.t);
    result.predicted_value =
        result.indices.empty() ? kNoneValue : store.values[result.indices[0]];
    return result;
}

QueryResult query(const MemoryStore& store, const VecD& q, const NeighborBackend& backend) {
    if (q.size() != store.config.key_size)
        throw std::invalid_argument("query: dimension mismatch");
    const double norm = std::sqrt(dot_plain(q.data(), q.data(), store.config.key_size));
    if (std::abs(norm - 1.0) > 1e-4)
        throw std::invalid_argument("query: q must be unit norm (|q| = 1 +- 1e-4)");
    return make_query_result(store, backend.topk(store.keys, q, store.config.k, nullptr));
}

LossReport memory_loss(const MemoryStore& store, const VecD& q, uint32_t v,
                       const QueryResult& result) {
    LossReport report;
    report.grad_q = VecD::Zero(store.config.key_size);

    int64_t positive = -1;
    int64_t negative = -1;
    double positive_sim = 0.0;
    double negative_sim = 0.0;
    for (int64_t r = 0; r < result.size(); ++r) {
        const int32_t slot = result.indices[r];
        if (positive < 0 && store.values[slot] == v) {
            positive = slot;
            positive_sim = result.similarities[r];
        }
        // NONE counts as != v, so never-written slots act as negatives.
        if (negative < 0 && store.values[slot] != v) {
            negative = slot;
            negative_sim = result.similarities[r];
        }
        if (positive >= 0 && negative >= 0) break;
    }

    if (positive < 0) {
        if (store.value_count(v) == 0) {
            // No slot anywhere holds v: nothing to pull toward. The update
            // step writes the pair; the loss stays silent.
            report.negative_index = negative;
            return report;
        }
        // Fall back to the most similar value-v slot in the whole memory,
        // ties resolved toward the lowest slot index.
        const int d = store.config.key_size;
        for (int64_t i = 0; i < store.config.memory_size; ++i) {
            if (store.values[i] != v) continue;
            const double sim = dot_plain(q.data(), store.keys.data() + i * d, d);
            if (positive < 0 || sim > positive_sim) {
                positive = i;
                positive_sim = sim;
            }
        }
    }

    report.positive_index = positive;
    report.negative_index = negative;
    if (negative < 0) return report;  // every retrieved neighbor already correct

    const double raw = negative_sim - positive_sim + store.config.alpha;
    if (raw <= 0.0) return report;

    report.loss = raw;
    report.grad_q = (store.keys.row(negative) - store.keys.row(positive)).transpose();
    return report;
}

namespace {

// argmax_i (age_i + r_i) with r_i uniform in [0, J]. Only slots with
// age + J >= max_age can win, and those form a prefix of the
// least-recently-touched list, so jitter is drawn for that band only (in
// list order); ties keep the lowest slot index.
int64_t pick_eviction_slot(MemoryStore& store) {
    const uint64_t jitter = static_cast<uint64_t>(store.config.effective_jitter());
    const int32_t head = store.lru_head();
    const uint64_t min_touch = store.last_touch[head];

    int64_t best_slot = -1;
    uint64_t best_score = 0;
    for (int32_t slot = head;
         slot >= 0 && store.last_touch[slot] <= min_touch + jitter;
         slot = store.lru_next(slot)) {
        const uint64_t r = jitter == 0 ? 0 : store.rng.uniform_below(jitter + 1);
        const uint64_t score = store.age(slot) + r;
        if (best_slot < 0 || score > best_score ||
            (score == best_score && slot < best_slot)) {
            best_slot = slot;
            best_score = score;
        }
    }
    return best_slot;
}

}  // namespace

void UpdateJournal::arm(const MemoryStore& store) {
    entries.clear();
    rng_state = store.rng.state();
    tick = store.tick;
    armed = true;
}

void UpdateJournal::rollback(MemoryStore& store) {
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
        for (int j = 0; j < store.config.key_size; ++j)
            store.keys(it->slot, j) = it->key_row[j];
        store.set_value(it->slot, it->value);
        store.last_touch[it->slot] = it->last_touch;
    }
    entries.clear();
    store.rng.set_state(rng_state);
    store.tick = tick;
    store.rebuild_lru();
    armed = false;
}

namespace {

void journal_slot(UpdateJournal* journal, const MemoryStore& store, int64_t slot) {
    if (!journal || !journal->armed) return;
    UpdateJournal::Entry entry;
    entry.slot = slot;
    entry.key_row.assign(store.keys.data() + slot * store.config.key_size,
                         store.keys.data() + (slot + 1) * store.config.key_size);
    entry.value = store.values[slot];
    entry.last_touch = store.last_touch[slot];
    journal->entries.push_back(std::move(entry));
}

}  // namespace

WriteOutcome update(MemoryStore& store, const VecD& q, uint32_t v,
                    const QueryResult& result, NeighborBackend* backend,
                    UpdateJournal* journal) {
    if (v == kNoneValue) return {WriteKind::Skipped, -1};

    const int d = store.config.key_size;
    const int64_t n1 = result.indices.empty() ? -1 : result.indices[0];

    WriteOutcome outcome;
    if (n1 >= 0 && store.values[n1] == v) {
        // Case 1: the memory already answers correctly; fold q into the key.
        journal_slot(journal, store, n1);
        VecD sum = store.keys.row(n1).transpose() + q;
        const double norm = std::sqrt(dot_plain(sum.data(), sum.data(), d));
        if (norm >= 1e-12) {
            for (int j = 0; j < d; ++j) store.keys(n1, j) = quantize_f32(sum[j] / norm);
            if (backend) backend->key_written(store.keys, n1);
        }
        // q antipodal to the key leaves the key unchanged but still counts
        // as an averaging touch.
        store.tick += 1;
        store.last_touch[n1] = store.tick;
        store.touch_slot(n1);
        outcome = {WriteKind::Averaged, n1};
    } else {
        // Case 2: wrong (or no) answer; overwrite the oldest slot.
        const int64_t slot = pick_eviction_slot(store);
        journal_slot(journal, store, slot);
        for (int j = 0; j < d; ++j) store.keys(slot, j) = quantize_f32(q[j]);
        store.set_value(slot, v);
        if (backend) backend->key_written(store.keys, slot);
        store.tick += 1;
        store.last_touch[slot] = store.tick;
        store.touch_slot(slot);
        outcome = {WriteKind::Written, slot};
    }
    return outcome;
}

VecD query_grad_through_normalization(const VecD& x, const VecD& grad_q) {
    const double norm = x.norm();
    if (norm < 1e-12)
        throw std::domain_error("query_grad_through_normalization: |x| is numerically zero");
    const VecD q = x / norm;
    return (grad_q - q.dot(grad_q) * q) / norm;
}

}  // namespace raremem
