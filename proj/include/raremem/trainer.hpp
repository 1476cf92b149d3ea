#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "raremem/memory.hpp"
#include "raremem/nn_search.hpp"
#include "raremem/optimizer.hpp"
#include "raremem/synthetic.hpp"

namespace raremem {

enum class BackendKind { Exact, Lsh };

struct TrainRunConfig {
    int64_t memory_size = 65536;
    int batch_size = 32;
    uint64_t seed = 17;
    BackendKind backend = BackendKind::Exact;
    AdamConfig adam;
    EncoderDims dims;

    // Memory module knobs (paper settings by default).
    int64_t k = 256;
    double alpha = 0.1;
    double softmax_t = 40.0;
    int64_t jitter_bound = -1;

    // LSH knobs, used when backend == Lsh; bits < 0 selects the size default.
    int lsh_bits = -1;
    int lsh_tables = 8;

    MemoryConfig memory_config() const;
    LshParams lsh_params() const;
};

struct EvalMetrics {
    double sequence_accuracy = 0.0;
    double position_accuracy = 0.0;
    double digit_position_accuracy = 0.0;
    int64_t sequence_count = 0;
    int64_t position_count = 0;
    int64_t digit_position_count = 0;
};

std::string format_metric_line(int64_t step, double loss, const EvalMetrics& eval);

// Owns the full training state: encoder parameters, Adam moments, the
// life-long memory (never reset), and the search backend kept in lockstep
// with key writes.
class Trainer {
public:
    explicit Trainer(const TrainRunConfig& config);
    Trainer(const TrainRunConfig& config, EncoderParams params, AdamState adam,
            MemoryStore store, int64_t step);

    // One supervised step over a batch: per output position, encode the
    // query, query the memory, accumulate margin loss and gradients, then
    // apply the memory update; updates are serialized in (example, position)
    // order and each query sees all previous writes. Ends with one Adam step
    // on the position-averaged gradients. Numerical failures roll the store
    // back and rethrow. Returns the mean loss.
    double train_step(const std::vector<SyntheticExample>& batch);

    // Runs `steps` batches drawn from a per-epoch seeded shuffle of `train`.
    // on_step(step, mean_loss) fires after every step; returns early when
    // on_step returns false.
    void run(const std::vector<SyntheticExample>& train, int64_t steps,
             const std::function<bool(int64_t, double)>& on_step);

    // Greedy per-position prediction; no memory updates.
    EvalMetrics evaluate(const std::vector<SyntheticExample>& test) const;

    // Query + update over every position of `context`, `passes` times, with
    // frozen weights (no loss, no gradients, no Adam).
    void ingest(const std::vector<SyntheticExample>& context, int passes);

    const EncoderParams& params() const { return params_; }
    const AdamState& adam() const { return adam_; }
    const MemoryStore& store() const { return store_; }
    MemoryStore& store() { return store_; }
    const NeighborBackend& backend() const { return backend_; }
    int64_t step() const { return step_; }
    const TrainRunConfig& config() const { return config_; }

private:
    TrainRunConfig config_;
    EncoderParams params_;
    AdamState adam_;
    MemoryStore store_;
    NeighborBackend backend_;
    int64_t step_ = 0;
};

// Spec-shaped free functions over an externally owned store/backend.
EvalMetrics evaluate(const EncoderParams& params, const MemoryStore& store,
                     const NeighborBackend& backend,
                     const std::vector<SyntheticExample>& test);

struct OneshotReport {
    EvalMetrics before;
    EvalMetrics after;
};

// Snapshot metrics, ingest the context `passes` times (memory updates only,
// weights frozen), then re-evaluate.
OneshotReport oneshot_context_eval(const EncoderParams& params, MemoryStore& store,
                                   NeighborBackend& backend,
                                   const std::vector<SyntheticExample>& context,
                                   const std::vector<SyntheticExample>& eval_set,
                                   int passes);

}  // namespace raremem
