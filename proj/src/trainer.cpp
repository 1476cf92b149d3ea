#include "raremem/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace raremem {

MemoryConfig TrainRunConfig::memory_config() const {
    MemoryConfig mc;
    mc.memory_size = memory_size;
    mc.key_size = dims.key_size;
    mc.k = k;
    mc.alpha = alpha;
    mc.t = softmax_t;
    mc.jitter_bound = jitter_bound;
    mc.seed = seed;
    return mc;
}

LshParams TrainRunConfig::lsh_params() const {
    LshParams lp;
    lp.bits = lsh_bits >= 0 ? lsh_bits : LshParams::default_bits(memory_size);
    lp.tables = lsh_tables;
    lp.seed = derive_seed(seed, 0x6c7368 /* "lsh" */);
    return lp;
}

std::string format_metric_line(int64_t step, double loss, const EvalMetrics& eval) {
    std::ostringstream out;
    out << "step=" << step << " loss=" << loss << " seq_acc=" << eval.sequence_accuracy
        << " pos_acc=" << eval.position_accuracy
        << " digit_acc=" << eval.digit_position_accuracy;
    return out.str();
}

namespace {

NeighborBackend make_backend(const TrainRunConfig& config, const RowMatrixD& keys) {
    if (config.backend == BackendKind::Lsh)
        return NeighborBackend::make_lsh(keys, config.lsh_params());
    return NeighborBackend::make_exact(keys);
}

struct PositionRef {
    int32_t example;
    int32_t position;
};

// Sequentially consistent walk over every output position of a chunk of
// examples: position i's QueryResult is exactly what query() would return
// against the store after positions 0..i-1 applied their updates.
//
// With the exact backend this avoids one full scan per position: a single
// batched search against the chunk-start snapshot is merged, per position,
// with freshly scored similarities of the slots written inside the chunk.
// The snapshot depth k + P + 8 guarantees the merge covers the true top-k
// because at most P slots change.
template <typename PerPosition>
void stream_positions(const EncoderParams& params, MemoryStore& store,
                      NeighborBackend& backend,
                      const std::vector<const SyntheticExample*>& examples,
                      bool apply_updates, PerPosition&& per_position,
                      UpdateJournal* journal) {
    std::vector<PositionRef> refs;
    for (size_t e = 0; e < examples.size(); ++e)
        for (size_t p = 0; p < examples[e]->input.size(); ++p)
            refs.push_back({static_cast<int32_t>(e), static_cast<int32_t>(p)});
    const int64_t total = static_cast<int64_t>(refs.size());
    if (total == 0) return;

    const int d = params.dims.key_size;
    const int64_t k = store.config.k;

    std::vector<EncodeCache> caches(total);
    for (int64_t i = 0; i < total; ++i)
        caches[i] = encode_query(params, examples[refs[i].example]->input, refs[i].position);

    // Snapshot depth: k plus headroom for slots modified inside the chunk.
    // A query whose merge would consume the entire snapshot list falls back
    // to a fresh exact search, so a shallow margin stays correct.
    const bool exact = backend.is_exact();
    const int64_t snapshot_k = std::min<int64_t>(k + 96, store.size());
    std::vector<std::vector<Neighbor>> snapshot;
    if (exact) {
        RowMatrixD queries(total, d);
        for (int64_t i = 0; i < total; ++i)
            queries.row(i) = caches[i].q.transpose();
        snapshot = backend.exact().topk_batch(queries, snapshot_k);
    }

    std::vector<int32_t> modified_list;
    std::vector<uint8_t> modified_flag(store.size(), 0);
    std::vector<Neighbor> fresh;
    std::vector<Neighbor> merged;

    for (int64_t i = 0; i < total; ++i) {
        const EncodeCache& cache = caches[i];
        const SyntheticExample& ex = *examples[refs[i].example];
        const uint32_t target = ex.output[refs[i].position];

        QueryResult result;
        if (exact) {
            fresh.clear();
            for (int32_t slot : modified_list)
                fresh.push_back({slot, dot_plain(cache.q.data(),
                                                 store.keys.data() + int64_t{slot} * d, d)});
            std::sort(fresh.begin(), fresh.end(), neighbor_before);

            merged.clear();
            const std::vector<Neighbor>& snap = snapshot[i];
            size_t si = 0;
            size_t fi = 0;
            while (static_cast<int64_t>(merged.size()) < k) {
                while (si < snap.size() && modified_flag[snap[si].index]) ++si;
                const bool have_snap = si < snap.size();
                const bool have_fresh = fi < fresh.size();
                if (!have_snap && !have_fresh) break;
                if (have_snap && (!have_fresh || neighbor_before(snap[si], fresh[fi])))
                    merged.push_back(snap[si++]);
                else
                    merged.push_back(fresh[fi++]);
            }
            // The merge is exact as long as at least one snapshot entry was
            // left unconsumed (it upper-bounds every deeper unmodified slot).
            // Otherwise unmodified slots beyond the snapshot depth could
            // outrank what was taken, so rescan this query from scratch.
            const bool covered = si < snap.size() || snapshot_k >= store.size();
            if (!covered || static_cast<int64_t>(merged.size()) < std::min(k, store.size()))
                merged = backend.exact().topk(cache.q, k);
            result = make_query_result(store, merged);
        } else {
            result = make_query_result(store,
                                       backend.lsh().topk(store.keys, cache.q, k, nullptr));
        }

        per_position(i, cache, target, result);

        if (apply_updates) {
            const WriteOutcome outcome =
                update(store, cache.q, target, result, &backend, journal);
            if (exact && outcome.slot >= 0 && !modified_flag[outcome.slot]) {
                modified_flag[outcome.slot] = 1;
                modified_list.push_back(static_cast<int32_t>(outcome.slot));
            }
        }
    }
}

EvalMetrics evaluate_impl(const EncoderParams& params, const MemoryStore& store,
                          const NeighborBackend& backend,
                          const std::vector<SyntheticExample>& test) {
    EvalMetrics metrics;
    if (test.empty()) return metrics;

    const int d = params.dims.key_size;
    constexpr int64_t kChunkQueries = 8192;

    struct Pending {
        int32_t example;
        int32_t position;
    };
    std::vector<Pending> pending;
    RowMatrixD queries(kChunkQueries, d);
    std::vector<uint8_t> correct_flags;  // one per position over the whole run

    std::vector<int64_t> first_position(test.size());
    int64_t total_positions = 0;
    for (size_t e = 0; e < test.size(); ++e) {
        first_position[e] = total_positions;
        total_positions += static_cast<int64_t>(test[e].input.size());
    }
    correct_flags.assign(total_positions, 0);

    auto flush = [&]() {
        if (pending.empty()) return;
        if (backend.is_exact()) {
            RowMatrixD block = queries.topRows(static_cast<int64_t>(pending.size()));
            const auto ranked = backend.exact().topk_batch(block, 1);
            for (size_t i = 0; i < pending.size(); ++i) {
                const SyntheticExample& ex = test[pending[i].example];
                const uint32_t predicted =
                    ranked[i].empty() ? kNoneValue : store.values[ranked[i][0].index];
                correct_flags[first_position[pending[i].example] + pending[i].position] =
                    predicted == ex.output[pending[i].position];
            }
        } else {
            for (size_t i = 0; i < pending.size(); ++i) {
                const SyntheticExample& ex = test[pending[i].example];
                const VecD q = queries.row(static_cast<int64_t>(i)).transpose();
                const auto ranked = backend.lsh().topk(store.keys, q, store.config.k, nullptr);
                const uint32_t predicted =
                    ranked.empty() ? kNoneValue : store.values[ranked[0].index];
                correct_flags[first_position[pending[i].example] + pending[i].position] =
                    predicted == ex.output[pending[i].position];
            }
        }
        pending.clear();
    };

    for (size_t e = 0; e < test.size(); ++e) {
        for (size_t p = 0; p < test[e].input.size(); ++p) {
            const EncodeCache cache = encode_query(params, test[e].input, static_cast<int>(p));
            queries.row(static_cast<int64_t>(pending.size())) = cache.q.transpose();
            pending.push_back({static_cast<int32_t>(e), static_cast<int32_t>(p)});
            if (static_cast<int64_t>(pending.size()) == kChunkQueries) flush();
        }
    }
    flush();

    for (size_t e = 0; e < test.size(); ++e) {
        const SyntheticExample& ex = test[e];
        bool all_correct = true;
        for (size_t p = 0; p < ex.input.size(); ++p) {
            const bool ok = correct_flags[first_position[e] + static_cast<int64_t>(p)] != 0;
            all_correct = all_correct && ok;
            metrics.position_count += 1;
            metrics.position_accuracy += ok;
            const bool in_block = static_cast<int>(p) >= ex.block_start &&
                                  static_cast<int>(p) < ex.block_start + kDigitCount;
            if (in_block) {
                metrics.digit_position_count += 1;
                metrics.digit_position_accuracy += ok;
            }
        }
        metrics.sequence_count += 1;
        metrics.sequence_accuracy += all_correct;
    }

    metrics.sequence_accuracy /= static_cast<double>(metrics.sequence_count);
    metrics.position_accuracy /= static_cast<double>(metrics.position_count);
    if (metrics.digit_position_count > 0)
        metrics.digit_position_accuracy /= static_cast<double>(metrics.digit_position_count);
    return metrics;
}

}  // namespace

Trainer::Trainer(const TrainRunConfig& config)
    : config_(config),
      params_(EncoderParams::init(config.dims, config.seed)),
      adam_(AdamState::init(params_)),
      store_(new_memory(config.memory_config())),
      backend_(make_backend(config, store_.keys)) {}

Trainer::Trainer(const TrainRunConfig& config, EncoderParams params, AdamState adam,
                 MemoryStore store, int64_t step)
    : config_(config),
      params_(std::move(params)),
      adam_(std::move(adam)),
      store_(std::move(store)),
      backend_(make_backend(config, store_.keys)),
      step_(step) {}

double Trainer::train_step(const std::vector<SyntheticExample>& batch) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    std::vector<const SyntheticExample*> ptrs;
    ptrs.reserve(batch.size());
    for (const SyntheticExample& ex : batch) ptrs.push_back(&ex);

    // Pre-step images for rollback on numerical failure.
    UpdateJournal journal;
    journal.arm(store_);
    const EncoderParams params_before = params_;
    const AdamState adam_before = adam_;

    try {
        EncoderGrads grads = EncoderParams::zeros_like(params_);
        double total_loss = 0.0;
        int64_t positions = 0;

        stream_positions(
            params_, store_, backend_, ptrs, /*apply_updates=*/true,
            [&](int64_t, const EncodeCache& cache, uint32_t target, const QueryResult& result) {
                const LossReport report = memory_loss(store_, cache.q, target, result);
                total_loss += report.loss;
                if (report.loss > 0.0) encode_backward(params_, cache, report.grad_q, grads);
                positions += 1;
            },
            &journal);

        const double scale = 1.0 / static_cast<double>(positions);
        grads.for_each_tensor([scale](auto& t) { t *= scale; });
        grads.check_finite();
        adam_step(params_, grads, adam_, config_.adam);
        params_.check_finite();
        step_ += 1;
        return total_loss / static_cast<double>(positions);
    } catch (...) {
        journal.rollback(store_);
        params_ = params_before;
        adam_ = adam_before;
        if (backend_.is_exact())
            backend_.exact().rebuild(store_.keys);
        else
            backend_.lsh().index().build(store_.keys, config_.lsh_params());
        throw;
    }
}

void Trainer::run(const std::vector<SyntheticExample>& train, int64_t steps,
                  const std::function<bool(int64_t, double)>& on_step) {
    if (train.empty()) throw std::invalid_argument("run: empty training corpus");
    const int64_t n = static_cast<int64_t>(train.size());
    const int64_t batch = config_.batch_size;
    const int64_t batches_per_epoch = (n + batch - 1) / batch;

    std::vector<int64_t> order(n);
    int64_t shuffled_epoch = -1;

    for (int64_t s = 0; s < steps; ++s) {
        const int64_t epoch = step_ / batches_per_epoch;
        const int64_t batch_index = step_ % batches_per_epoch;
        if (epoch != shuffled_epoch) {
            std::iota(order.begin(), order.end(), 0);
            Rng rng(derive_seed(config_.seed, 0x706572 /* "per" */,
                                static_cast<uint64_t>(epoch)));
            for (int64_t i = n - 1; i > 0; --i)
                std::swap(order[i], order[rng.uniform_below(static_cast<uint64_t>(i) + 1)]);
            shuffled_epoch = epoch;
        }

        std::vector<SyntheticExample> examples;
        const int64_t begin = batch_index * batch;
        const int64_t end = std::min(n, begin + batch);
        examples.reserve(end - begin);
        for (int64_t j = begin; j < end; ++j) examples.push_back(train[order[j]]);

        const double loss = train_step(examples);
        if (on_step && !on_step(step_, loss)) return;
    }
}

EvalMetrics Trainer::evaluate(const std::vector<SyntheticExample>& test) const {
    return evaluate_impl(params_, store_, backend_, test);
}

void Trainer::ingest(const std::vector<SyntheticExample>& context, int passes) {
    for (int pass = 0; pass < passes; ++pass) {
        for (size_t begin = 0; begin < context.size();
             begin += static_cast<size_t>(config_.batch_size)) {
            const size_t end =
                std::min(context.size(), begin + static_cast<size_t>(config_.batch_size));
            std::vector<const SyntheticExample*> chunk;
            chunk.reserve(end - begin);
            for (size_t i = begin; i < end; ++i) chunk.push_back(&context[i]);
            stream_positions(params_, store_, backend_, chunk, /*apply_updates=*/true,
                             [](int64_t, const EncodeCache&, uint32_t, const QueryResult&) {},
                             nullptr);
        }
    }
}

EvalMetrics evaluate(const EncoderParams& params, const MemoryStore& store,
                     const NeighborBackend& backend,
                     const std::vector<SyntheticExample>& test) {
    return evaluate_impl(params, store, backend, test);
}

OneshotReport oneshot_context_eval(const EncoderParams& params, MemoryStore& store,
                                   NeighborBackend& backend,
                                   const std::vector<SyntheticExample>& context,
                                   const std::vector<SyntheticExample>& eval_set,
                                   int passes) {
    OneshotReport report;
    report.before = evaluate_impl(params, store, backend, eval_set);

    constexpr size_t kChunkExamples = 32;
    for (int pass = 0; pass < passes; ++pass) {
        for (size_t begin = 0; begin < context.size(); begin += kChunkExamples) {
            const size_t end = std::min(context.size(), begin + kChunkExamples);
            std::vector<const SyntheticExample*> chunk;
            chunk.reserve(end - begin);
            for (size_t i = begin; i < end; ++i) chunk.push_back(&context[i]);
            stream_positions(params, store, backend, chunk, /*apply_updates=*/true,
                             [](int64_t, const EncodeCache&, uint32_t, const QueryResult&) {},
                             nullptr);
        }
    }

    report.after = evaluate_impl(params, store, backend, eval_set);
    return report;
}

}  // namespace raremem
