#include "raremem/nn_search.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "nn_kernel_fma.hpp"

namespace raremem {

namespace {

// Streaming top-k screener over FMA-contracted similarities, keeping a pad
// of extra candidates under the strict (similarity desc, index asc) order;
// finish() re-scores the survivors with the canonical plain-accumulation dot
// product and ranks exactly.
//
// Coverage: contracted and plain sims differ by well under 1e-13 for
// unit-norm inputs, so an exact top-k member can only be screened out if
// more than `pad` distinct keys land within ~2e-13 of the boundary
// similarity. Bitwise-identical keys (the common near-tie source, produced
// by the averaging update) yield bitwise-identical sims in both arithmetic
// modes, so their index ordering is consistent between the screen and the
// exact re-rank, and they are culled safely rather than accumulating.
class TopkScreener {
public:
    static constexpr int64_t kPad = 64;

    TopkScreener(int64_t cap, int64_t slots)
        : cap_(cap), keep_(std::min(cap + kPad, slots)) {
        buf_.reserve(4 * keep_ + 32);
    }

    // Screens one tile worth of similarities; a slightly stale threshold is
    // only ever too permissive, never wrong.
    void screen_tile(int64_t base, const double* sims, int64_t valid) {
        double m0 = sims[0];
        double m1 = sims[1 % valid];
        double m2 = sims[2 % valid];
        double m3 = sims[3 % valid];
        for (int64_t l = 4; l + 4 <= valid; l += 4) {
            m0 = std::max(m0, sims[l]);
            m1 = std::max(m1, sims[l + 1]);
            m2 = std::max(m2, sims[l + 2]);
            m3 = std::max(m3, sims[l + 3]);
        }
        for (int64_t l = valid & ~int64_t{3}; l < valid; ++l) m0 = std::max(m0, sims[l]);
        const double tile_max = std::max(std::max(m0, m1), std::max(m2, m3));
        if (have_threshold_ && tile_max < threshold_.similarity) return;

        for (int64_t l = 0; l < valid; ++l) {
            const Neighbor cand{static_cast<int32_t>(base + l), sims[l]};
            if (have_threshold_ && !neighbor_before(cand, threshold_)) continue;
            buf_.push_back(cand);
        }
        if (static_cast<int64_t>(buf_.size()) >= 4 * keep_) compact();
    }

    // Exact ranking of the survivors against the given query and key rows.
    std::vector<Neighbor> finish(const double* q, const double* key_rows, int64_t d) {
        for (Neighbor& cand : buf_)
            cand.similarity = dot_plain(q, key_rows + int64_t{cand.index} * d, d);
        std::sort(buf_.begin(), buf_.end(), neighbor_before);
        if (static_cast<int64_t>(buf_.size()) > cap_) buf_.resize(cap_);
        return std::move(buf_);
    }

private:
    void compact() {
        if (static_cast<int64_t>(buf_.size()) <= keep_) return;
        std::nth_element(buf_.begin(), buf_.begin() + keep_ - 1, buf_.end(),
                         neighbor_before);
        buf_.resize(keep_);
        threshold_ = buf_[keep_ - 1];
        have_threshold_ = true;
    }

    int64_t cap_;
    int64_t keep_;
    std::vector<Neighbor> buf_;
    Neighbor threshold_{};
    bool have_threshold_ = false;
};

// Query rows processed per pass over the tiles; keeps the active query block
// resident in L2 while each 16 KB key tile stays in L1 across the block.
constexpr int64_t kQueryBlock = 1024;

}  // namespace

void ExactBackend::rebuild(const RowMatrixD& keys) {
    slots_ = keys.rows();
    key_size_ = keys.cols();
    tiles_ = (slots_ + kTileSlots - 1) / kTileSlots;
    const size_t total = static_cast<size_t>(tiles_ * key_size_ * kTileSlots);
    buf_.reset(static_cast<double*>(::operator new(total * sizeof(double),
                                                   std::align_val_t{64})));
    std::fill(buf_.get(), buf_.get() + total, 0.0);
    rows_.assign(keys.data(), keys.data() + slots_ * key_size_);
    for (int64_t i = 0; i < slots_; ++i)
        for (int64_t j = 0; j < key_size_; ++j) packed(i, j) = keys(i, j);
}

void ExactBackend::key_written(const RowMatrixD& keys, int64_t slot) {
    for (int64_t j = 0; j < key_size_; ++j) {
        packed(slot, j) = keys(slot, j);
        rows_[slot * key_size_ + j] = keys(slot, j);
    }
}

std::vector<std::vector<Neighbor>> ExactBackend::topk_batch(const RowMatrixD& queries,
                                                            int64_t k) const {
    const int64_t n = slots_;
    const int64_t d = key_size_;
    const int64_t b = queries.rows();
    if (queries.cols() != d)
        throw std::invalid_argument("topk_batch: query dimension mismatch");
    const int64_t keff = std::min<int64_t>(k, n);

    std::vector<TopkScreener> screeners;
    screeners.reserve(b);
    for (int64_t q = 0; q < b; ++q) screeners.emplace_back(keff, n);

    alignas(64) double sims[4][kTileSlots];
    double* const sims_ptrs[4] = {sims[0], sims[1], sims[2], sims[3]};

    for (int64_t q0 = 0; q0 < b; q0 += kQueryBlock) {
        const int64_t qb = std::min(kQueryBlock, b - q0);
        for (int64_t t = 0; t < tiles_; ++t) {
            const double* tile = buf_.get() + t * d * kTileSlots;
            const int64_t base = t * kTileSlots;
            const int64_t valid = std::min(kTileSlots, n - base);
            int64_t q = 0;
            for (; q + 4 <= qb; q += 4) {
                const double* qp[4] = {
                    queries.data() + (q0 + q) * d, queries.data() + (q0 + q + 1) * d,
                    queries.data() + (q0 + q + 2) * d, queries.data() + (q0 + q + 3) * d};
                detail::tile_sims_quad_fma(tile, qp, d, sims_ptrs);
                for (int u = 0; u < 4; ++u)
                    screeners[q0 + q + u].screen_tile(base, sims[u], valid);
            }
            for (; q + 2 <= qb; q += 2) {
                detail::tile_sims_pair_fma(tile, queries.data() + (q0 + q) * d,
                                           queries.data() + (q0 + q + 1) * d, d,
                                           sims[0], sims[1]);
                screeners[q0 + q].screen_tile(base, sims[0], valid);
                screeners[q0 + q + 1].screen_tile(base, sims[1], valid);
            }
            if (q < qb) {
                detail::tile_sims_one_fma(tile, queries.data() + (q0 + q) * d, d, sims[0]);
                screeners[q0 + q].screen_tile(base, sims[0], valid);
            }
        }
    }

    std::vector<std::vector<Neighbor>> out;
    out.reserve(b);
    for (int64_t q = 0; q < b; ++q)
        out.push_back(screeners[q].finish(queries.data() + q * d, rows_.data(), d));
    return out;
}

std::vector<Neighbor> ExactBackend::topk(const VecD& q, int64_t k) const {
    RowMatrixD one(1, q.size());
    for (int64_t j = 0; j < q.size(); ++j) one(0, j) = q[j];
    return topk_batch(one, k)[0];
}

std::vector<std::vector<Neighbor>> exact_topk(const RowMatrixD& queries,
                                              const RowMatrixD& keys, int64_t k) {
    if (k < 1 || k > keys.rows())
        throw std::invalid_argument("exact_topk: k out of range");
    if (queries.cols() != keys.cols())
        throw std::invalid_argument("exact_topk: dimension mismatch");
    ExactBackend backend(keys);
    return backend.topk_batch(queries, k);
}

// ---------------------------------------------------------------------------
// LSH
// ---------------------------------------------------------------------------

int LshParams::default_bits(int64_t memory_size) {
    int bits = 0;
    while ((int64_t{1} << bits) < memory_size) ++bits;
    bits -= 2;
    return std::clamp(bits, 0, 24);
}

void LshIndex::build(const RowMatrixD& keys, const LshParams& params) {
    if (params.bits < 0 || params.bits > 63)
        throw std::invalid_argument("LshIndex: bits must be in [0, 63]");
    if (params.tables < 1) throw std::invalid_argument("LshIndex: tables must be >= 1");
    params_ = params;
    key_size_ = static_cast<int>(keys.cols());
    const int64_t n = keys.rows();

    hash_vectors_.assign(params_.tables, RowMatrixD());
    for (int t = 0; t < params_.tables; ++t) {
        // Each table derives its own stream so table j is identical no matter
        // how many tables exist; candidate sets then grow monotonically in m.
        Rng rng(derive_seed(params_.seed, static_cast<uint64_t>(t)));
        RowMatrixD& h = hash_vectors_[t];
        h.resize(params_.bits, key_size_);
        for (int r = 0; r < params_.bits; ++r) {
            double norm = 0.0;
            do {
                norm = 0.0;
                for (int j = 0; j < key_size_; ++j) {
                    h(r, j) = rng.gaussian();
                    norm += h(r, j) * h(r, j);
                }
                norm = std::sqrt(norm);
            } while (norm < 1e-12);
            for (int j = 0; j < key_size_; ++j) h(r, j) = quantize_f32(h(r, j) / norm);
        }
    }

    slot_sigs_.assign(params_.tables, std::vector<uint64_t>(n, 0));
    for (int t = 0; t < params_.tables; ++t)
        for (int64_t i = 0; i < n; ++i)
            slot_sigs_[t][i] = signature(t, keys.data() + i * key_size_);

    rebuild_buckets();
    seen_.assign(n, 0);
}

void LshIndex::rebuild_buckets() {
    const int64_t n = slots();
    buckets_.assign(params_.tables, {});
    for (int t = 0; t < params_.tables; ++t)
        for (int64_t i = 0; i < n; ++i)
            buckets_[t][slot_sigs_[t][i]].push_back(static_cast<int32_t>(i));
    // Built in ascending slot order, so every bucket list is already sorted.
}

void LshIndex::restore(LshParams params, std::vector<RowMatrixD> hash_vectors,
                       std::vector<std::vector<uint64_t>> slot_sigs, int key_size) {
    params_ = params;
    key_size_ = key_size;
    hash_vectors_ = std::move(hash_vectors);
    slot_sigs_ = std::move(slot_sigs);
    rebuild_buckets();
    seen_.assign(slots(), 0);
}

uint64_t LshIndex::signature(int table, const VecD& q) const {
    return signature(table, q.data());
}

uint64_t LshIndex::signature(int table, const double* q) const {
    const RowMatrixD& h = hash_vectors_[table];
    uint64_t sig = 0;
    for (int r = 0; r < params_.bits; ++r) {
        const double d = dot_plain(q, h.data() + r * key_size_, key_size_);
        if (d > 0.0) sig |= uint64_t{1} << r;
    }
    return sig;
}

const std::vector<int32_t>* LshIndex::bucket(int table, uint64_t sig) const {
    auto it = buckets_[table].find(sig);
    return it == buckets_[table].end() ? nullptr : &it->second;
}

void LshIndex::insert_slot(int table, uint64_t sig, int32_t slot) {
    std::vector<int32_t>& list = buckets_[table][sig];
    list.insert(std::lower_bound(list.begin(), list.end(), slot), slot);
}

void LshIndex::remove_slot(int table, uint64_t sig, int32_t slot) {
    auto it = buckets_[table].find(sig);
    if (it == buckets_[table].end()) return;
    std::vector<int32_t>& list = it->second;
    auto pos = std::lower_bound(list.begin(), list.end(), slot);
    if (pos != list.end() && *pos == slot) list.erase(pos);
    if (list.empty()) buckets_[table].erase(it);
}

void LshIndex::write(const RowMatrixD& keys, int64_t slot) {
    for (int t = 0; t < params_.tables; ++t) {
        const uint64_t sig = signature(t, keys.data() + slot * key_size_);
        const uint64_t old = slot_sigs_[t][slot];
        if (sig == old) continue;
        remove_slot(t, old, static_cast<int32_t>(slot));
        insert_slot(t, sig, static_cast<int32_t>(slot));
        slot_sigs_[t][slot] = sig;
    }
}

std::vector<int32_t> LshIndex::candidates(const double* q, int64_t min_candidates) const {
    const int64_t n = slots();
    if (static_cast<int64_t>(seen_.size()) < n) seen_.assign(n, 0);

    std::vector<uint64_t> sig(params_.tables);
    for (int t = 0; t < params_.tables; ++t) sig[t] = signature(t, q);

    std::vector<int32_t> out;
    auto take_bucket = [&](int table, uint64_t s) {
        const std::vector<int32_t>* list = bucket(table, s);
        if (!list) return;
        for (int32_t idx : *list) {
            if (!seen_[idx]) {
                seen_[idx] = 1;
                out.push_back(idx);
            }
        }
    };

    for (int t = 0; t < params_.tables; ++t) take_bucket(t, sig[t]);

    if (static_cast<int64_t>(out.size()) < min_candidates) {
        for (int t = 0; t < params_.tables &&
                        static_cast<int64_t>(out.size()) < min_candidates; ++t) {
            for (int b = 0; b < params_.bits &&
                            static_cast<int64_t>(out.size()) < min_candidates; ++b) {
                take_bucket(t, sig[t] ^ (uint64_t{1} << b));
            }
        }
    }

    for (int32_t idx : out) seen_[idx] = 0;
    return out;
}

bool LshIndex::operator==(const LshIndex& other) const {
    if (params_.bits != other.params_.bits || params_.tables != other.params_.tables ||
        params_.seed != other.params_.seed || key_size_ != other.key_size_)
        return false;
    if (slot_sigs_ != other.slot_sigs_) return false;
    if (buckets_ != other.buckets_) return false;
    for (size_t t = 0; t < hash_vectors_.size(); ++t)
        if (hash_vectors_[t] != other.hash_vectors_[t]) return false;
    return true;
}

std::vector<Neighbor> LshBackend::topk(const RowMatrixD& keys, const VecD& q, int64_t k,
                                       int64_t* candidate_count) const {
    const std::vector<int32_t> cands = index_.candidates(q.data(), k);
    if (candidate_count) *candidate_count = static_cast<int64_t>(cands.size());

    const int d = index_.key_size();
    std::vector<Neighbor> scored;
    scored.reserve(cands.size());
    for (int32_t idx : cands)
        scored.push_back({idx, dot_plain(q.data(), keys.data() + int64_t{idx} * d, d)});
    std::sort(scored.begin(), scored.end(), neighbor_before);
    if (static_cast<int64_t>(scored.size()) > k) scored.resize(k);
    return scored;
}

// ---------------------------------------------------------------------------

NeighborBackend NeighborBackend::make_exact(const RowMatrixD& keys) {
    NeighborBackend b;
    b.exact_ = std::make_unique<ExactBackend>(keys);
    return b;
}

NeighborBackend NeighborBackend::make_lsh(const RowMatrixD& keys, const LshParams& params) {
    NeighborBackend b;
    b.lsh_ = std::make_unique<LshBackend>(keys, params);
    return b;
}

std::vector<Neighbor> NeighborBackend::topk(const RowMatrixD& keys, const VecD& q,
                                            int64_t k, int64_t* candidate_count) const {
    if (lsh_) return lsh_->topk(keys, q, k, candidate_count);
    if (candidate_count) *candidate_count = keys.rows();
    return exact_->topk(q, k);
}

void NeighborBackend::key_written(const RowMatrixD& keys, int64_t slot) {
    if (lsh_) lsh_->key_written(keys, slot);
    if (exact_) exact_->key_written(keys, slot);
}

RecallReport recall_eval(const NeighborBackend& backend, const NeighborBackend& oracle,
                         const RowMatrixD& keys, const RowMatrixD& queries, int64_t k) {
    const int64_t b = queries.rows();
    const int64_t n = keys.rows();
    RecallReport report;
    if (b == 0) return report;

    for (int64_t qi = 0; qi < b; ++qi) {
        const VecD q = queries.row(qi);
        int64_t cand = 0;
        const std::vector<Neighbor> got = backend.topk(keys, q, k, &cand);
        const std::vector<Neighbor> want = oracle.topk(keys, q, k, nullptr);

        if (!got.empty() && !want.empty() && got[0].index == want[0].index)
            report.recall_at_1 += 1.0;

        std::vector<int32_t> got_idx(got.size());
        for (size_t i = 0; i < got.size(); ++i) got_idx[i] = got[i].index;
        std::sort(got_idx.begin(), got_idx.end());
        int64_t hit = 0;
        for (const Neighbor& w : want)
            if (std::binary_search(got_idx.begin(), got_idx.end(), w.index)) ++hit;
        if (!want.empty())
            report.recall_at_k += static_cast<double>(hit) / static_cast<double>(want.size());

        report.mean_candidate_fraction +=
            static_cast<double>(cand) / static_cast<double>(n);
    }

    report.recall_at_1 /= static_cast<double>(b);
    report.recall_at_k /= static_cast<double>(b);
    report.mean_candidate_fraction /= static_cast<double>(b);
    return report;
}

}  // namespace raremem
