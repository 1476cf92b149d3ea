// Command-line driver for the life-long memory experiments: corpus
// generation, training, evaluation, one-shot context evaluation, backend
// benchmarking, and snapshot inspection.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "raremem/persistence.hpp"
#include "raremem/trainer.hpp"

using namespace raremem;

namespace {

uint64_t env_seed_default() {
    if (const char* env = std::getenv("RAREMEM_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw CLI::ValidationError("RAREMEM_SEED", "must be an unsigned integer");
        }
    }
    return 17;
}

template <typename T>
void log_kv(const std::string& key, T value) {
    std::cout << "config " << key << "=" << value << "\n";
}

BackendKind parse_backend(const std::string& name) {
    if (name == "exact") return BackendKind::Exact;
    if (name == "lsh") return BackendKind::Lsh;
    throw CLI::ValidationError("--backend", "must be 'exact' or 'lsh'");
}

std::string metrics_string(const EvalMetrics& m) {
    std::ostringstream out;
    out << "seq_acc=" << m.sequence_accuracy << " pos_acc=" << m.position_accuracy
        << " digit_acc=" << m.digit_position_accuracy
        << " sequences=" << m.sequence_count << " positions=" << m.position_count;
    return out.str();
}

NeighborBackend make_backend_for(const MemoryStore& store, BackendKind kind, int lsh_bits,
                                 int lsh_tables) {
    if (kind == BackendKind::Lsh) {
        LshParams lp;
        lp.bits = lsh_bits >= 0 ? lsh_bits : LshParams::default_bits(store.size());
        lp.tables = lsh_tables;
        lp.seed = derive_seed(store.config.seed, 0x6c7368);
        return NeighborBackend::make_lsh(store.keys, lp);
    }
    return NeighborBackend::make_exact(store.keys);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
    uint64_t seed = env_seed_default();
    int64_t train_count = 40000;
    int64_t test_count = 10000;
    int max_len = 40;
    std::string out_dir = ".";
};

int run_gen_data(const GenDataArgs& args) {
    log_kv("command", "gen-data");
    log_kv("seed", args.seed);
    log_kv("train_count", args.train_count);
    log_kv("test_count", args.test_count);
    log_kv("max_len", args.max_len);
    log_kv("out_dir", args.out_dir);

    std::filesystem::create_directories(args.out_dir);
    const SyntheticTaskSpec spec =
        make_task_spec(args.seed, args.max_len, args.train_count, args.test_count);

    const auto train = generate(spec, args.train_count, 1);
    const auto test = generate(spec, args.test_count, 2);

    const auto dir = std::filesystem::path(args.out_dir);
    write_corpus((dir / "train.txt").string(), train, args.seed, "train");
    write_corpus((dir / "test.txt").string(), test, args.seed, "test");
    save_taskspec_file((dir / "task.ltrm").string(), spec);

    std::cout << "wrote " << train.size() << " train and " << test.size()
              << " test examples to " << args.out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data_dir = ".";
    int64_t memory_size = 65536;
    std::string backend = "exact";
    int64_t steps = 12000;
    double lr = 1e-3;
    int batch_size = 32;
    uint64_t seed = env_seed_default();
    std::string checkpoint_out = "checkpoint.ltrm";
    std::string resume;
    int64_t eval_every = 1000;
    int64_t eval_count = 256;
    int64_t k = 256;
    int lsh_bits = -1;
    int lsh_tables = 8;
};

int run_train(const TrainArgs& args) {
    TrainRunConfig cfg;
    cfg.memory_size = args.memory_size;
    cfg.batch_size = args.batch_size;
    cfg.seed = args.seed;
    cfg.backend = parse_backend(args.backend);
    cfg.adam.learning_rate = args.lr;
    cfg.k = args.k;
    cfg.lsh_bits = args.lsh_bits;
    cfg.lsh_tables = args.lsh_tables;

    log_kv("command", "train");
    log_kv("data_dir", args.data_dir);
    log_kv("memory_size", cfg.memory_size);
    log_kv("backend", args.backend);
    log_kv("steps", args.steps);
    log_kv("lr", args.lr);
    log_kv("batch_size", cfg.batch_size);
    log_kv("seed", cfg.seed);
    log_kv("k", cfg.k);
    log_kv("eval_every", args.eval_every);
    log_kv("checkpoint_out", args.checkpoint_out);
    if (!args.resume.empty()) log_kv("resume", args.resume);

    const auto dir = std::filesystem::path(args.data_dir);
    const auto train_corpus = read_corpus((dir / "train.txt").string());
    std::vector<SyntheticExample> eval_corpus;
    if (std::filesystem::exists(dir / "test.txt")) {
        auto test_corpus = read_corpus((dir / "test.txt").string());
        const size_t n = std::min<size_t>(test_corpus.size(),
                                          static_cast<size_t>(args.eval_count));
        eval_corpus.assign(test_corpus.begin(), test_corpus.begin() + n);
    }

    std::unique_ptr<Trainer> trainer;
    if (args.resume.empty()) {
        trainer = std::make_unique<Trainer>(cfg);
    } else {
        Checkpoint ckpt = load_checkpoint_file(args.resume);
        cfg.dims = ckpt.encoder.params.dims;
        cfg.memory_size = ckpt.store.config.memory_size;
        cfg.k = ckpt.store.config.k;
        cfg.adam = ckpt.encoder.adam_config;
        cfg.adam.learning_rate = args.lr;
        trainer = std::make_unique<Trainer>(cfg, std::move(ckpt.encoder.params),
                                            std::move(ckpt.encoder.adam),
                                            std::move(ckpt.store), ckpt.encoder.step);
    }

    EvalMetrics last_eval;
    trainer->run(train_corpus, args.steps, [&](int64_t step, double loss) {
        if (!eval_corpus.empty() && args.eval_every > 0 && step % args.eval_every == 0)
            last_eval = trainer->evaluate(eval_corpus);
        std::cout << format_metric_line(step, loss, last_eval) << "\n";
        return true;
    });

    const EncoderSnapshot snap{trainer->params(), trainer->adam(), cfg.adam,
                               trainer->step()};
    save_checkpoint_file(args.checkpoint_out, snap, trainer->store());
    std::cout << "checkpoint written to " << args.checkpoint_out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint = "checkpoint.ltrm";
    std::string data = ".";
    std::string split = "test";
    std::string backend = "exact";
    int lsh_bits = -1;
    int lsh_tables = 8;
};

int run_eval(const EvalArgs& args) {
    log_kv("command", "eval");
    log_kv("checkpoint", args.checkpoint);
    log_kv("data", args.data);
    log_kv("split", args.split);
    log_kv("backend", args.backend);

    const Checkpoint ckpt = load_checkpoint_file(args.checkpoint);
    const auto corpus = read_corpus(
        (std::filesystem::path(args.data) / (args.split + ".txt")).string());
    const NeighborBackend backend = make_backend_for(
        ckpt.store, parse_backend(args.backend), args.lsh_bits, args.lsh_tables);
    const EvalMetrics metrics = evaluate(ckpt.encoder.params, ckpt.store, backend, corpus);
    std::cout << metrics_string(metrics) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// oneshot-eval
// ---------------------------------------------------------------------------

struct OneshotArgs {
    std::string checkpoint = "checkpoint.ltrm";
    std::string context_file;
    std::string eval_file;
    int passes = 3;
    std::string backend = "exact";
    int lsh_bits = -1;
    int lsh_tables = 8;
};

int run_oneshot(const OneshotArgs& args) {
    log_kv("command", "oneshot-eval");
    log_kv("checkpoint", args.checkpoint);
    log_kv("context_file", args.context_file);
    log_kv("eval_file", args.eval_file);
    log_kv("passes", args.passes);

    Checkpoint ckpt = load_checkpoint_file(args.checkpoint);
    const auto context = read_corpus(args.context_file);
    const auto eval_set = read_corpus(args.eval_file);
    NeighborBackend backend = make_backend_for(ckpt.store, parse_backend(args.backend),
                                               args.lsh_bits, args.lsh_tables);

    const OneshotReport report = oneshot_context_eval(
        ckpt.encoder.params, ckpt.store, backend, context, eval_set, args.passes);
    std::cout << "before " << metrics_string(report.before) << "\n";
    std::cout << "after " << metrics_string(report.after) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// bench-nn
// ---------------------------------------------------------------------------

struct BenchArgs {
    int64_t memory_size = 65536;
    int key_size = 64;
    int64_t batch = 1024;
    std::string backend = "lsh";
    int lsh_bits = -1;
    int lsh_tables = 8;
    int64_t k = 256;
    uint64_t seed = env_seed_default();
};

int run_bench(const BenchArgs& args) {
    log_kv("command", "bench-nn");
    log_kv("memory_size", args.memory_size);
    log_kv("key_size", args.key_size);
    log_kv("batch", args.batch);
    log_kv("backend", args.backend);
    log_kv("l", args.lsh_bits >= 0 ? args.lsh_bits
                                   : LshParams::default_bits(args.memory_size));
    log_kv("tables", args.lsh_tables);
    log_kv("k", args.k);
    log_kv("seed", args.seed);

    MemoryConfig mc;
    mc.memory_size = args.memory_size;
    mc.key_size = args.key_size;
    mc.k = std::min<int64_t>(args.k, args.memory_size);
    mc.seed = args.seed;
    const MemoryStore store = new_memory(mc);

    RowMatrixD queries(args.batch, args.key_size);
    Rng rng(derive_seed(args.seed, 0x62656e63 /* "benc" */));
    for (int64_t i = 0; i < args.batch; ++i) {
        double norm = 0.0;
        for (int j = 0; j < args.key_size; ++j) {
            queries(i, j) = rng.gaussian();
            norm += queries(i, j) * queries(i, j);
        }
        norm = std::sqrt(norm);
        for (int j = 0; j < args.key_size; ++j) queries(i, j) /= norm;
    }

    const auto t0 = std::chrono::steady_clock::now();
    const NeighborBackend backend = make_backend_for(store, parse_backend(args.backend),
                                                     args.lsh_bits, args.lsh_tables);
    const auto t1 = std::chrono::steady_clock::now();

    const NeighborBackend oracle = NeighborBackend::make_exact(store.keys);
    const RecallReport recall = recall_eval(backend, oracle, store.keys, queries, mc.k);

    const auto t2 = std::chrono::steady_clock::now();
    for (int64_t i = 0; i < args.batch; ++i) {
        const VecD q = queries.row(i).transpose();
        backend.topk(store.keys, q, mc.k, nullptr);
    }
    const auto t3 = std::chrono::steady_clock::now();

    const double build_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    const double bench_s = std::chrono::duration<double>(t3 - t2).count();
    std::cout << "build_ms=" << build_ms << "\n";
    std::cout << "queries_per_second=" << static_cast<double>(args.batch) / bench_s
              << "\n";
    std::cout << "recall_at_1=" << recall.recall_at_1
              << " recall_at_k=" << recall.recall_at_k
              << " candidate_fraction=" << recall.mean_candidate_fraction << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// inspect-memory
// ---------------------------------------------------------------------------

struct InspectArgs {
    std::string snapshot;
    int64_t slot = -1;
    int64_t top_ages = 0;
};

void print_slot(const MemoryStore& store, int64_t slot) {
    std::cout << "slot=" << slot;
    if (store.values[slot] == kNoneValue)
        std::cout << " value=NONE";
    else
        std::cout << " value=" << store.values[slot];
    std::cout << " age=" << store.age(slot) << " key_norm=" << store.keys.row(slot).norm()
              << " key=[";
    const int show = std::min(8, store.config.key_size);
    for (int j = 0; j < show; ++j) {
        if (j) std::cout << ", ";
        std::cout << store.keys(slot, j);
    }
    if (show < store.config.key_size) std::cout << ", ...";
    std::cout << "]\n";
}

int run_inspect(const InspectArgs& args) {
    std::ifstream in(args.snapshot, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + args.snapshot);

    // Accept either a bare memory snapshot or a checkpoint file (encoder
    // followed by memory).
    MemoryStore store = [&] {
        if (peek_kind(in) == PayloadKind::Encoder) {
            load_encoder(in);
            return load_memory(in);
        }
        return load_memory(in);
    }();

    std::cout << "memory_size=" << store.config.memory_size
              << " key_size=" << store.config.key_size << " k=" << store.config.k
              << " updates=" << store.tick << "\n";

    if (args.slot >= 0) {
        if (args.slot >= store.size()) throw std::runtime_error("slot out of range");
        print_slot(store, args.slot);
    }
    if (args.top_ages > 0) {
        std::vector<int64_t> order(store.size());
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(),
                          order.begin() + std::min<int64_t>(args.top_ages, store.size()),
                          order.end(), [&](int64_t a, int64_t b) {
                              if (store.age(a) != store.age(b))
                                  return store.age(a) > store.age(b);
                              return a < b;
                          });
        for (int64_t i = 0; i < std::min<int64_t>(args.top_ages, store.size()); ++i)
            print_slot(store, order[i]);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Life-long key-value memory: synthetic task training and evaluation"};
    app.set_config("--config")->configurable(false);
    app.allow_config_extras(false);
    app.require_subcommand(1);

    GenDataArgs gen_args;
    CLI::App* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
    gen->add_option("--seed", gen_args.seed, "Task seed");
    gen->add_option("--train-count", gen_args.train_count, "Training examples")
        ->check(CLI::PositiveNumber);
    gen->add_option("--test-count", gen_args.test_count, "Test examples")
        ->check(CLI::PositiveNumber);
    gen->add_option("--max-len", gen_args.max_len, "Maximum sequence length")
        ->check(CLI::Range(7, 1024));
    gen->add_option("--out-dir", gen_args.out_dir, "Output directory");

    TrainArgs train_args;
    CLI::App* train = app.add_subcommand("train", "Train the window encoder with memory");
    train->add_option("--data-dir", train_args.data_dir, "Corpus directory");
    train->add_option("--memory-size", train_args.memory_size, "Memory slots")
        ->check(CLI::PositiveNumber);
    train->add_option("--backend", train_args.backend, "exact or lsh");
    train->add_option("--steps", train_args.steps, "Training steps")
        ->check(CLI::PositiveNumber);
    train->add_option("--lr", train_args.lr, "Adam learning rate");
    train->add_option("--batch-size", train_args.batch_size, "Examples per step")
        ->check(CLI::PositiveNumber);
    train->add_option("--seed", train_args.seed, "Run seed");
    train->add_option("--checkpoint-out", train_args.checkpoint_out, "Checkpoint path");
    train->add_option("--resume", train_args.resume, "Checkpoint to resume from");
    train->add_option("--eval-every", train_args.eval_every, "Steps between evals");
    train->add_option("--eval-count", train_args.eval_count, "Eval subset size");
    train->add_option("--k", train_args.k, "Neighbors per query");
    train->add_option("--lsh-bits", train_args.lsh_bits, "LSH signature bits");
    train->add_option("--lsh-tables", train_args.lsh_tables, "LSH tables");

    EvalArgs eval_args;
    CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus");
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint path");
    eval_cmd->add_option("--data", eval_args.data, "Corpus directory");
    eval_cmd->add_option("--split", eval_args.split, "Corpus split name");
    eval_cmd->add_option("--backend", eval_args.backend, "exact or lsh");
    eval_cmd->add_option("--lsh-bits", eval_args.lsh_bits, "LSH signature bits");
    eval_cmd->add_option("--lsh-tables", eval_args.lsh_tables, "LSH tables");

    OneshotArgs oneshot_args;
    CLI::App* oneshot =
        app.add_subcommand("oneshot-eval", "Context-set evaluation with frozen weights");
    oneshot->add_option("--checkpoint", oneshot_args.checkpoint, "Checkpoint path");
    oneshot->add_option("--context-file", oneshot_args.context_file, "Context corpus")
        ->required();
    oneshot->add_option("--eval-file", oneshot_args.eval_file, "Eval corpus")->required();
    oneshot->add_option("--passes", oneshot_args.passes, "Context passes")
        ->check(CLI::PositiveNumber);
    oneshot->add_option("--backend", oneshot_args.backend, "exact or lsh");
    oneshot->add_option("--lsh-bits", oneshot_args.lsh_bits, "LSH signature bits");
    oneshot->add_option("--lsh-tables", oneshot_args.lsh_tables, "LSH tables");

    BenchArgs bench_args;
    CLI::App* bench = app.add_subcommand("bench-nn", "Benchmark a neighbor backend");
    bench->add_option("--memory-size", bench_args.memory_size, "Memory slots")
        ->check(CLI::PositiveNumber);
    bench->add_option("--key-size", bench_args.key_size, "Key dimension")
        ->check(CLI::PositiveNumber);
    bench->add_option("--batch", bench_args.batch, "Query count")
        ->check(CLI::PositiveNumber);
    bench->add_option("--backend", bench_args.backend, "exact or lsh");
    bench->add_option("--l", bench_args.lsh_bits, "LSH signature bits");
    bench->add_option("--tables", bench_args.lsh_tables, "LSH tables");
    bench->add_option("--k", bench_args.k, "Neighbors per query");
    bench->add_option("--seed", bench_args.seed, "Seed");

    InspectArgs inspect_args;
    CLI::App* inspect = app.add_subcommand("inspect-memory", "Dump memory slots");
    inspect->add_option("--snapshot", inspect_args.snapshot, "Snapshot or checkpoint path")
        ->required();
    inspect->add_option("--slot", inspect_args.slot, "Slot index to print");
    inspect->add_option("--top-ages", inspect_args.top_ages, "Print the N oldest slots");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return run_gen_data(gen_args);
        if (train->parsed()) return run_train(train_args);
        if (eval_cmd->parsed()) return run_eval(eval_args);
        if (oneshot->parsed()) return run_oneshot(oneshot_args);
        if (bench->parsed()) return run_bench(bench_args);
        if (inspect->parsed()) return run_inspect(inspect_args);
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
    return 0;
}
