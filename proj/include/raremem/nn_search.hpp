#pragma once

#include <cstdint>
#include <memory>
#include <new>
#include <unordered_map>
#include <vector>

#include "raremem/rng.hpp"
#include "raremem/types.hpp"

namespace raremem {

struct Neighbor {
    int32_t index = -1;
    double similarity = 0.0;
};

// Ranking order shared by every backend: similarity descending, ties broken
// by ascending slot index.
inline bool neighbor_before(const Neighbor& a, const Neighbor& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.index < b.index;
}

// Plain left-to-right dot product. All similarity values in the project are
// defined as this exact accumulation so that blocked/batched kernels and
// reference scans agree bitwise (the build disables fp contraction).
inline double dot_plain(const double* a, const double* b, int d) {
    double acc = 0.0;
    for (int j = 0; j < d; ++j) acc += a[j] * b[j];
    return acc;
}

// ---------------------------------------------------------------------------
// Exact backend: batched blocked matrix multiplication against a tile-packed
// copy of the key matrix, plus streaming top-k selection. Each dot product
// accumulates left-to-right over key components, so results are bit-identical
// to a scalar reference scan; vectorization runs across slots only.
// ---------------------------------------------------------------------------

class ExactBackend {
public:
    // Slots per packed tile; each tile stores key components j-major so the
    // kernel reads 64-byte lanes contiguously.
    static constexpr int64_t kTileSlots = 32;

    ExactBackend() = default;
    explicit ExactBackend(const RowMatrixD& keys) { rebuild(keys); }

    void rebuild(const RowMatrixD& keys);
    void key_written(const RowMatrixD& keys, int64_t slot);

    // Exact top-k per query row; k is capped at the number of slots.
    std::vector<std::vector<Neighbor>> topk_batch(const RowMatrixD& queries,
                                                  int64_t k) const;
    std::vector<Neighbor> topk(const VecD& q, int64_t k) const;

    int64_t slots() const { return slots_; }
    int64_t key_size() const { return key_size_; }

private:
    struct AlignedDeleter {
        void operator()(double* p) const { ::operator delete(p, std::align_val_t{64}); }
    };

    double& packed(int64_t slot, int64_t j) {
        return buf_[(slot / kTileSlots) * key_size_ * kTileSlots + j * kTileSlots +
                    slot % kTileSlots];
    }

    int64_t slots_ = 0;
    int64_t key_size_ = 0;
    int64_t tiles_ = 0;
    std::unique_ptr<double[], AlignedDeleter> buf_;
    std::vector<double> rows_;  // row-major copy used for exact re-scoring
};

// Free-function form of the exact search. Validates k against memory_size.
std::vector<std::vector<Neighbor>> exact_topk(const RowMatrixD& queries,
                                              const RowMatrixD& keys, int64_t k);

// ---------------------------------------------------------------------------
// LSH backend: multi-table random-hyperplane signatures over the key rows.
// ---------------------------------------------------------------------------

struct LshParams {
    int bits = 0;        // signature length l (<= 63); 0 hashes everything together
    int tables = 8;      // table count m
    uint64_t seed = 0;

    // Default bit count used when bits is left unset: ceil(log2(n)) - 2,
    // clamped to [0, 24], which keeps buckets at roughly four slots.
    static int default_bits(int64_t memory_size);
};

class LshIndex {
public:
    LshIndex() = default;
    LshIndex(const RowMatrixD& keys, const LshParams& params) { build(keys, params); }

    void build(const RowMatrixD& keys, const LshParams& params);

    // Re-hashes one slot after its key row changed. Bucket membership after
    // any write sequence matches a fresh build over the current keys.
    void write(const RowMatrixD& keys, int64_t slot);

    uint64_t signature(int table, const VecD& q) const;
    uint64_t signature(int table, const double* q) const;

    // Union of matching buckets over all tables; when that union is smaller
    // than min_candidates, buckets at Hamming distance 1 are probed (tables
    // in order, bit positions ascending) until enough candidates are found
    // or every distance-1 bucket is exhausted.
    std::vector<int32_t> candidates(const double* q, int64_t min_candidates) const;

    const LshParams& params() const { return params_; }
    int64_t slots() const { return static_cast<int64_t>(slot_sigs_.empty() ? 0 : slot_sigs_[0].size()); }
    const RowMatrixD& hash_vectors(int table) const { return hash_vectors_[table]; }
    uint64_t slot_signature(int table, int64_t slot) const { return slot_sigs_[table][slot]; }

    // Sorted slot list for one bucket (empty if absent). Exposed for tests
    // and for the snapshot writer.
    const std::vector<int32_t>* bucket(int table, uint64_t sig) const;
    const std::unordered_map<uint64_t, std::vector<int32_t>>& table_buckets(int table) const {
        return buckets_[table];
    }

    // Rebuilds bucket maps from stored signatures (used by the snapshot loader).
    void restore(LshParams params, std::vector<RowMatrixD> hash_vectors,
                 std::vector<std::vector<uint64_t>> slot_sigs, int key_size);

    int key_size() const { return key_size_; }

    bool operator==(const LshIndex& other) const;

private:
    void insert_slot(int table, uint64_t sig, int32_t slot);
    void remove_slot(int table, uint64_t sig, int32_t slot);
    void rebuild_buckets();

    LshParams params_;
    int key_size_ = 0;
    std::vector<RowMatrixD> hash_vectors_;                 // per table: bits x key_size
    std::vector<std::vector<uint64_t>> slot_sigs_;         // per table: signature per slot
    std::vector<std::unordered_map<uint64_t, std::vector<int32_t>>> buckets_;
    mutable std::vector<uint8_t> seen_;                    // dedupe scratch
};

class LshBackend {
public:
    LshBackend() = default;
    LshBackend(const RowMatrixD& keys, const LshParams& params) : index_(keys, params) {}
    explicit LshBackend(LshIndex index) : index_(std::move(index)) {}

    void key_written(const RowMatrixD& keys, int64_t slot) { index_.write(keys, slot); }

    // Top-k restricted to the candidate set; may return fewer than k entries
    // when probing exhausts without reaching k candidates.
    std::vector<Neighbor> topk(const RowMatrixD& keys, const VecD& q, int64_t k,
                               int64_t* candidate_count = nullptr) const;

    LshIndex& index() { return index_; }
    const LshIndex& index() const { return index_; }

private:
    LshIndex index_;
};

// ---------------------------------------------------------------------------
// Backend handle used by the memory module: exact or LSH.
// ---------------------------------------------------------------------------

class NeighborBackend {
public:
    static NeighborBackend make_exact(const RowMatrixD& keys);
    static NeighborBackend make_lsh(const RowMatrixD& keys, const LshParams& params);

    bool is_exact() const { return lsh_ == nullptr; }

    std::vector<Neighbor> topk(const RowMatrixD& keys, const VecD& q, int64_t k,
                               int64_t* candidate_count = nullptr) const;
    void key_written(const RowMatrixD& keys, int64_t slot);

    ExactBackend& exact() { return *exact_; }
    const ExactBackend& exact() const { return *exact_; }
    LshBackend& lsh() { return *lsh_; }
    const LshBackend& lsh() const { return *lsh_; }

private:
    std::unique_ptr<ExactBackend> exact_;
    std::unique_ptr<LshBackend> lsh_;
};

// ---------------------------------------------------------------------------
// Recall evaluation of one backend against another over a query set.
// ---------------------------------------------------------------------------

struct RecallReport {
    double recall_at_1 = 0.0;
    double recall_at_k = 0.0;
    double mean_candidate_fraction = 0.0;
};

RecallReport recall_eval(const NeighborBackend& backend, const NeighborBackend& oracle,
                         const RowMatrixD& keys, const RowMatrixD& queries, int64_t k);

}  // namespace raremem
