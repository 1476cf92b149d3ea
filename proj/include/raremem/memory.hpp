#pragma once

#include <algorithm>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "raremem/nn_search.hpp"
#include "raremem/rng.hpp"
#include "raremem/types.hpp"

namespace raremem {

// Life-long key-value memory: unit-norm keys, integer values, per-slot ages.
// Queries retrieve the k nearest keys by cosine similarity; supervised pairs
// feed a margin loss and an update rule that either averages into the nearest
// correct key or evicts the oldest slot.

struct MemoryConfig {
    int64_t memory_size = 0;
    int key_size = 0;
    int64_t k = 256;
    double alpha = 0.1;       // loss margin
    double t = 40.0;          // inverse softmax temperature
    int64_t jitter_bound = -1;  // eviction jitter J; -1 selects the default
    uint64_t seed = 0;

    // max(1, memory_size / 1024), clamped to the memory_size/16 invariant:
    // small relative to the memory but enough to disperse concurrent writers.
    int64_t effective_jitter() const {
        if (jitter_bound >= 0) return jitter_bound;
        return std::min(memory_size / 16, std::max<int64_t>(1, memory_size / 1024));
    }

    void validate() const;
};

struct QueryResult {
    std::vector<int32_t> indices;       // n_1..n_k, best first
    std::vector<double> similarities;   // q . K[n_i], non-increasing
    std::vector<double> confidences;    // softmax(similarities * t)
    uint32_t predicted_value = kNoneValue;  // V[n_1]

    int64_t size() const { return static_cast<int64_t>(indices.size()); }
};

struct LossReport {
    double loss = 0.0;
    int64_t positive_index = -1;  // -1 = absent
    int64_t negative_index = -1;
    VecD grad_q;  // d(loss)/d(q); zero when the hinge is inactive
};

enum class WriteKind { Averaged, Written, Skipped };

struct WriteOutcome {
    WriteKind kind = WriteKind::Skipped;
    int64_t slot = -1;
};

class MemoryStore {
public:
    MemoryConfig config;
    RowMatrixD keys;               // memory_size x key_size, unit rows
    std::vector<uint32_t> values;  // kNoneValue marks never-written slots
    Rng rng;

    // Ages are represented as (tick - last_touch); incrementing every
    // non-updated slot is then O(1) per update.
    uint64_t tick = 0;
    std::vector<uint64_t> last_touch;

    uint64_t age(int64_t slot) const { return tick - last_touch[slot]; }
    std::vector<uint64_t> ages() const;
    int64_t size() const { return config.memory_size; }

    // Slots threaded into a least-recently-touched list (head = oldest), so
    // eviction scans only the age band that can win instead of every slot.
    int32_t lru_head() const { return lru_head_; }
    int32_t lru_next(int32_t slot) const { return lru_next_[slot]; }
    void touch_slot(int64_t slot);
    void rebuild_lru();

    // Slots currently holding a given value; kNoneValue is tracked too.
    int64_t value_count(uint32_t v) const;

    // Used by update and by the snapshot loader.
    void set_value(int64_t slot, uint32_t v);
    void rebuild_value_counts();

    bool same_contents(const MemoryStore& other) const;

private:
    std::unordered_map<uint32_t, int64_t> value_counts_;
    std::vector<int32_t> lru_prev_;
    std::vector<int32_t> lru_next_;
    int32_t lru_head_ = -1;
    int32_t lru_tail_ = -1;
};

// Fresh store: independent pseudorandom unit keys (Gaussian, normalized),
// all values NONE, all ages zero. Deterministic given config.seed.
MemoryStore new_memory(const MemoryConfig& config);

// Top-k query through the given backend. Requires |q| = 1 +- 1e-4.
QueryResult query(const MemoryStore& store, const VecD& q, const NeighborBackend& backend);

// Margin loss over the query result: positive neighbor = first retrieved slot
// whose value equals v (falling back to the most similar value-v slot in the
// whole memory), negative neighbor = first retrieved slot with a different
// value. loss = max(0, q.K[n_b] - q.K[n_p] + alpha).
LossReport memory_loss(const MemoryStore& store, const VecD& q, uint32_t v,
                       const QueryResult& result);

// Reverse log for a run of updates: pre-images of touched slots plus the rng
// and age-counter state, so a failed training step can be undone exactly.
struct UpdateJournal {
    struct Entry {
        int64_t slot;
        std::vector<double> key_row;
        uint32_t value;
        uint64_t last_touch;
    };
    std::vector<Entry> entries;
    std::array<uint64_t, 4> rng_state{};
    uint64_t tick = 0;
    bool armed = false;

    void arm(const MemoryStore& store);
    // Restores store state; any backend must be rebuilt by the caller.
    void rollback(MemoryStore& store);
};

// Update rule. Case 1 (V[n_1] == v): average q into the key and re-normalize,
// reset its age. Case 2: write (q, v) over the slot maximizing age + jitter.
// Every other slot's age increments by one. The backend, if given, is kept in
// lockstep with the touched key row.
WriteOutcome update(MemoryStore& store, const VecD& q, uint32_t v,
                    const QueryResult& result, NeighborBackend* backend = nullptr,
                    UpdateJournal* journal = nullptr);

// Pulls a gradient w.r.t. the normalized query q = x/|x| back to x:
// (grad_q - (q . grad_q) q) / |x|. Throws when |x| is numerically zero.
VecD query_grad_through_normalization(const VecD& x, const VecD& grad_q);

// Softmax of (similarities * t); shared by query paths.
std::vector<double> softmax_confidences(const std::vector<double>& similarities, double t);

// Builds a QueryResult from ranked neighbors plus the store's values/config.
QueryResult make_query_result(const MemoryStore& store, const std::vector<Neighbor>& ranked);

}  // namespace raremem
