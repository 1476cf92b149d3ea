#include "raremem/memory.hpp"

#include <algorithm>
#include <cmath>

#include "doctest.h"

using namespace raremem;

namespace {

MemoryConfig small_config(int64_t size, int key_size, int64_t k, uint64_t seed,
                          int64_t jitter = -1) {
    MemoryConfig c;
    c.memory_size = size;
    c.key_size = key_size;
    c.k = k;
    c.seed = seed;
    c.jitter_bound = jitter;
    return c;
}

VecD unit2(double x, double y) {
    VecD v(2);
    v << x, y;
    return v;
}

// Loss as a plain function of the raw (pre-normalization) query, holding the
// neighbor selection fixed; used as the finite-difference target.
double loss_of_raw(const MemoryStore& store, const VecD& x, int64_t pos, int64_t neg,
                   double alpha) {
    const VecD q = x / x.norm();
    const double dp = q.dot(store.keys.row(pos).transpose());
    const double dn = q.dot(store.keys.row(neg).transpose());
    return std::max(0.0, dn - dp + alpha);
}

}  // namespace

TEST_CASE("new_memory postconditions") {
    const MemoryStore store = new_memory(small_config(4, 2, 2, 7));
    CHECK(store.keys.rows() == 4);
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(store.keys.row(i).norm() == doctest::Approx(1.0).epsilon(1e-5));
        CHECK(store.values[i] == kNoneValue);
        CHECK(store.age(i) == 0);
    }
}

TEST_CASE("new_memory is deterministic per seed") {
    const MemoryStore a = new_memory(small_config(16, 8, 4, 7));
    const MemoryStore b = new_memory(small_config(16, 8, 4, 7));
    const MemoryStore c = new_memory(small_config(16, 8, 4, 8));
    CHECK(a.same_contents(b));
    CHECK(a.keys == b.keys);
    CHECK(a.keys != c.keys);
}

TEST_CASE("invalid configs are rejected") {
    CHECK_THROWS_AS(new_memory(small_config(2, 2, 256, 7)), std::invalid_argument);
    CHECK_THROWS_AS(new_memory(small_config(0, 2, 1, 7)), std::invalid_argument);
    MemoryConfig bad = small_config(64, 2, 4, 7);
    bad.alpha = 0.0;
    CHECK_THROWS_AS(new_memory(bad), std::invalid_argument);
    bad = small_config(64, 2, 4, 7, 64);  // jitter > size/16
    CHECK_THROWS_AS(new_memory(bad), std::invalid_argument);
}

TEST_CASE("query on the orthonormal example, with confidences at t=40") {
    MemoryStore store = new_memory(small_config(4, 2, 2, 7, 0));
    store.keys << 1, 0, 0, 1, -1, 0, 0, -1;
    const NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    const QueryResult result = query(store, unit2(1, 0), backend);

    REQUIRE(result.size() == 2);
    CHECK(result.indices[0] == 0);
    CHECK(result.indices[1] == 1);
    CHECK(result.similarities[0] == 1.0);
    CHECK(result.similarities[1] == 0.0);

    // softmax(40, 0) = (1/(1+e^-40), e^-40/(1+e^-40))
    const double e40 = std::exp(-40.0);
    CHECK(result.confidences[0] == doctest::Approx(1.0 / (1.0 + e40)).epsilon(1e-12));
    CHECK(result.confidences[1] ==
          doctest::Approx(e40 / (1.0 + e40)).epsilon(1e-6));
    CHECK(result.confidences[1] == doctest::Approx(4.24835e-18).epsilon(1e-4));
    CHECK(result.confidences[0] + result.confidences[1] ==
          doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("query retrieves the value of an exactly matching key") {
    MemoryStore store = new_memory(small_config(4, 2, 2, 9, 0));
    store.keys << 1, 0, 0, 1, -1, 0, 0, -1;
    store.set_value(1, 42);
    const NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    const QueryResult result = query(store, unit2(0, 1), backend);
    CHECK(result.predicted_value == 42);
}

TEST_CASE("query rejects unnormalized input") {
    const MemoryStore store = new_memory(small_config(8, 2, 2, 9));
    const NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    CHECK_THROWS_AS(query(store, unit2(0.5, 0.5), backend), std::invalid_argument);
}

TEST_CASE("confidences sum to one for random queries") {
    const MemoryStore store = new_memory(small_config(128, 16, 32, 10));
    const NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    Rng rng(5);
    for (int it = 0; it < 20; ++it) {
        VecD q(16);
        for (int j = 0; j < 16; ++j) q[j] = rng.gaussian();
        q /= q.norm();
        const QueryResult result = query(store, q, backend);
        double sum = 0.0;
        for (double c : result.confidences) {
            CHECK(c > 0.0);
            CHECK(c < 1.0);
            sum += c;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        for (size_t r = 1; r < result.similarities.size(); ++r)
            CHECK(result.similarities[r] <= result.similarities[r - 1]);
    }
}

// ---------------------------------------------------------------------------
// memory_loss
// ---------------------------------------------------------------------------

TEST_CASE("memory_loss hinge arithmetic on crafted neighbors") {
    MemoryStore store = new_memory(small_config(4, 2, 2, 11, 0));
    store.keys << 1, 0, 0, 1, -1, 0, 0, -1;
    store.set_value(0, 5);
    store.set_value(1, 9);
    const NeighborBackend backend = NeighborBackend::make_exact(store.keys);

    SUBCASE("margin satisfied: positive on top") {
        const QueryResult r = query(store, unit2(1, 0), backend);
        const LossReport report = memory_loss(store, unit2(1, 0), 5, r);
        CHECK(report.loss == 0.0);
        CHECK(report.grad_q.norm() == 0.0);
        CHECK(report.positive_index == 0);
        CHECK(report.negative_index == 1);
    }

    SUBCASE("hinge active: negative on top") {
        // q = (1,0): K[n_b]=(1,0) value 5, K[n_p]=(0,1) value 9.
        const QueryResult r = query(store, unit2(1, 0), backend);
        const LossReport report = memory_loss(store, unit2(1, 0), 9, r);
        CHECK(report.loss == doctest::Approx(1.1).epsilon(1e-12));
        CHECK(report.positive_index == 1);
        CHECK(report.negative_index == 0);
        // grad_q = K[n_b] - K[n_p] = (1,-1)
        CHECK(report.grad_q[0] == doctest::Approx(1.0));
        CHECK(report.grad_q[1] == doctest::Approx(-1.0));
    }

    SUBCASE("equal similarities leave exactly the margin") {
        // q equidistant from both keys.
        const VecD q = unit2(std::sqrt(0.5), std::sqrt(0.5));
        const QueryResult r = query(store, q, backend);
        const LossReport report = memory_loss(store, q, 5, r);
        CHECK(report.loss == doctest::Approx(0.1).epsilon(1e-9));
    }
}

TEST_CASE("memory_loss falls back to the best value-v slot outside top-k") {
    MemoryStore store = new_memory(small_config(4, 2, 2, 12, 0));
    store.keys << 1, 0, 0, 1, -1, 0, 0, -1;
    store.set_value(0, 1);
    store.set_value(1, 1);
    store.set_value(2, 7);  // only value-7 slot sits opposite the query
    store.set_value(3, 1);
    const NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    const QueryResult r = query(store, unit2(1, 0), backend);  // top-2: slots 0, 1
    const LossReport report = memory_loss(store, unit2(1, 0), 7, r);
    CHECK(report.positive_index == 2);
    CHECK(report.negative_index == 0);
    // loss = max(0, 1 - (-1) + 0.1)
    CHECK(report.loss == doctest::Approx(2.1).epsilon(1e-12));
}

TEST_CASE("memory_loss degenerate cases") {
    MemoryStore store = new_memory(small_config(4, 2, 2, 13, 0));
    store.keys << 1, 0, 0, 1, -1, 0, 0, -1;
    const NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    const QueryResult r = query(store, unit2(1, 0), backend);

    SUBCASE("no positive anywhere: silent loss, update still writes") {
        const LossReport report = memory_loss(store, unit2(1, 0), 3, r);
        CHECK(report.loss == 0.0);
        CHECK(report.positive_index == -1);
        CHECK(report.grad_q.norm() == 0.0);
    }

    SUBCASE("all top-k share value v: no negative") {
        MemoryStore full = store;
        for (int64_t i = 0; i < 4; ++i) full.set_value(i, 3);
        const QueryResult r2 = query(full, unit2(1, 0), backend);
        const LossReport report = memory_loss(full, unit2(1, 0), 3, r2);
        CHECK(report.loss == 0.0);
        CHECK(report.negative_index == -1);
        CHECK(report.positive_index == 0);
    }

    SUBCASE("NONE counts as a negative") {
        MemoryStore part = store;
        part.set_value(0, 3);
        const QueryResult r3 = query(part, unit2(1, 0), backend);
        const LossReport report = memory_loss(part, unit2(1, 0), 3, r3);
        CHECK(report.positive_index == 0);
        CHECK(report.negative_index == 1);  // NONE slot
    }
}

TEST_CASE("loss is zero exactly when the margin holds") {
    Rng rng(17);
    MemoryStore store = new_memory(small_config(64, 8, 8, 14, 0));
    for (int64_t i = 0; i < 64; ++i) store.set_value(i, i % 3);
    const NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    for (int it = 0; it < 50; ++it) {
        VecD q(8);
        for (int j = 0; j < 8; ++j) q[j] = rng.gaussian();
        q /= q.norm();
        const QueryResult r = query(store, q, backend);
        const LossReport report = memory_loss(store, q, 1, r);
        REQUIRE(report.positive_index >= 0);
        REQUIRE(report.negative_index >= 0);
        const double dp = q.dot(store.keys.row(report.positive_index).transpose());
        const double dn = q.dot(store.keys.row(report.negative_index).transpose());
        if (dp - dn >= store.config.alpha + 1e-9)
            CHECK(report.loss == 0.0);
        else if (dp - dn < store.config.alpha - 1e-9)
            CHECK(report.loss > 0.0);
        CHECK(report.loss >= 0.0);
        CHECK(report.loss <= 2.0 + store.config.alpha);
    }
}

// ---------------------------------------------------------------------------
// update
// ---------------------------------------------------------------------------

TEST_CASE("case 1 averaging: idempotent for identical keys") {
    MemoryStore store = new_memory(small_config(4, 2, 2, 21, 0));
    store.keys << 1, 0, 0, 1, -1, 0, 0, -1;
    store.set_value(0, 5);
    NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    const QueryResult r = query(store, unit2(1, 0), backend);
    const WriteOutcome outcome = update(store, unit2(1, 0), 5, r, &backend);
    CHECK(outcome.kind == WriteKind::Averaged);
    CHECK(outcome.slot == 0);
    CHECK(store.keys(0, 0) == 1.0);
    CHECK(store.keys(0, 1) == 0.0);
    CHECK(store.age(0) == 0);
    CHECK(store.age(1) == 1);
}

TEST_CASE("case 1 averaging: normalized mean of orthonormal pair") {
    MemoryStore store = new_memory(small_config(4, 2, 2, 22, 0));
    store.keys << 0, 1, -1, 0, 1, 0, 0, -1;
    store.set_value(0, 5);
    NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    // q=(1,0) ties slot 0 at 0 similarity? No: slot 2 has sim 1. Query the
    // value-5 slot directly through a crafted result instead.
    QueryResult crafted;
    crafted.indices = {0};
    crafted.similarities = {0.0};
    crafted.confidences = {1.0};
    crafted.predicted_value = 5;
    update(store, unit2(1, 0), 5, crafted, &backend);
    const double s = std::sqrt(0.5);
    CHECK(store.keys(0, 0) == doctest::Approx(s).epsilon(1e-7));
    CHECK(store.keys(0, 1) == doctest::Approx(s).epsilon(1e-7));
    CHECK(store.keys.row(0).norm() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("case 1 with antipodal query keeps the key and resets age") {
    MemoryStore store = new_memory(small_config(4, 2, 2, 23, 0));
    store.keys << 1, 0, 0, 1, -1, 0, 0, -1;
    store.set_value(0, 5);
    NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    QueryResult crafted;
    crafted.indices = {0};
    crafted.similarities = {-1.0};
    crafted.confidences = {1.0};
    crafted.predicted_value = 5;
    const WriteOutcome outcome = update(store, unit2(-1, 0), 5, crafted, &backend);
    CHECK(outcome.kind == WriteKind::Averaged);
    CHECK(store.keys(0, 0) == 1.0);
    CHECK(store.age(0) == 0);
}

TEST_CASE("case 2 writes over the unique oldest slot when jitter is zero") {
    MemoryStore store = new_memory(small_config(4, 2, 2, 24, 0));
    store.keys << 1, 0, 0, 1, -1, 0, 0, -1;
    // Hand-set ages (5,0,0,0) via touch bookkeeping.
    store.tick = 5;
    store.last_touch = {0, 5, 5, 5};
    NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    const QueryResult r = query(store, unit2(0, 1), backend);
    REQUIRE(store.values[r.indices[0]] == kNoneValue);
    const WriteOutcome outcome = update(store, unit2(0, 1), 9, r, &backend);
    CHECK(outcome.kind == WriteKind::Written);
    CHECK(outcome.slot == 0);
    CHECK(store.values[0] == 9);
    CHECK(store.keys(0, 0) == 0.0);
    CHECK(store.keys(0, 1) == 1.0);
    CHECK(store.age(0) == 0);
    CHECK(store.age(1) == 1);
    CHECK(store.age(2) == 1);
    CHECK(store.age(3) == 1);
}

TEST_CASE("update with NONE value is skipped") {
    MemoryStore store = new_memory(small_config(4, 2, 2, 25, 0));
    const NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    const QueryResult r = query(store, unit2(1, 0), backend);
    const uint64_t tick_before = store.tick;
    const WriteOutcome outcome = update(store, unit2(1, 0), kNoneValue, r, nullptr);
    CHECK(outcome.kind == WriteKind::Skipped);
    CHECK(store.tick == tick_before);
}

TEST_CASE("update invariants over a long randomized run") {
    const int64_t size = 96;
    MemoryStore store = new_memory(small_config(size, 8, 8, 31, 0));
    NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    Rng rng(77);
    for (int it = 0; it < 3000; ++it) {
        VecD q(8);
        for (int j = 0; j < 8; ++j) q[j] = rng.gaussian();
        q /= q.norm();
        const uint32_t v = static_cast<uint32_t>(rng.uniform_below(5));
        const QueryResult r = query(store, q, backend);
        update(store, q, v, r, &backend);

        int zero_age = 0;
        for (int64_t i = 0; i < size; ++i) zero_age += store.age(i) == 0;
        CHECK(zero_age == 1);

        for (int64_t i = 0; i < size; ++i)
            CHECK(std::abs(store.keys.row(i).norm() - 1.0) < 1e-5);
    }
}

TEST_CASE("written slots have globally maximal age when jitter is zero") {
    const int64_t size = 64;
    MemoryStore store = new_memory(small_config(size, 4, 4, 32, 0));
    NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    Rng rng(78);
    for (int it = 0; it < 1000; ++it) {
        VecD q(4);
        for (int j = 0; j < 4; ++j) q[j] = rng.gaussian();
        q /= q.norm();
        const uint32_t v = static_cast<uint32_t>(rng.uniform_below(3));
        const QueryResult r = query(store, q, backend);

        std::vector<uint64_t> ages_before = store.ages();
        const WriteOutcome outcome = update(store, q, v, r, &backend);
        if (outcome.kind == WriteKind::Written) {
            const uint64_t max_age =
                *std::max_element(ages_before.begin(), ages_before.end());
            CHECK(ages_before[outcome.slot] == max_age);
        }
    }
}

TEST_CASE("identical seeds and call sequences give bitwise-identical stores") {
    auto run = [] {
        MemoryStore store = new_memory(small_config(32, 4, 4, 55));
        NeighborBackend backend = NeighborBackend::make_exact(store.keys);
        Rng rng(56);
        for (int it = 0; it < 200; ++it) {
            VecD q(4);
            for (int j = 0; j < 4; ++j) q[j] = rng.gaussian();
            q /= q.norm();
            const uint32_t v = static_cast<uint32_t>(rng.uniform_below(4));
            const QueryResult r = query(store, q, backend);
            update(store, q, v, r, &backend);
        }
        return store;
    };
    const MemoryStore a = run();
    const MemoryStore b = run();
    CHECK(a.same_contents(b));
}

TEST_CASE("update journal rolls a run of updates back exactly") {
    MemoryStore store = new_memory(small_config(32, 4, 4, 65));
    NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    const MemoryStore before = store;
    UpdateJournal journal;
    journal.arm(store);
    Rng rng(66);
    for (int it = 0; it < 50; ++it) {
        VecD q(4);
        for (int j = 0; j < 4; ++j) q[j] = rng.gaussian();
        q /= q.norm();
        const QueryResult r = query(store, q, backend);
        update(store, q, static_cast<uint32_t>(it % 3), r, &backend, &journal);
    }
    CHECK_FALSE(store.same_contents(before));
    journal.rollback(store);
    CHECK(store.same_contents(before));
}

// ---------------------------------------------------------------------------
// gradient through normalization
// ---------------------------------------------------------------------------

TEST_CASE("normalization gradient: radial component is annihilated") {
    VecD x(2), g(2);
    x << 2, 0;
    g << 1, 0;
    const VecD out = query_grad_through_normalization(x, g);
    CHECK(out[0] == 0.0);
    CHECK(out[1] == 0.0);
}

TEST_CASE("normalization gradient: tangential component scales by 1/|x|") {
    VecD x(2), g(2);
    x << 2, 0;
    g << 0, 1;
    const VecD out = query_grad_through_normalization(x, g);
    CHECK(out[0] == 0.0);
    CHECK(out[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("normalization gradient rejects near-zero input") {
    VecD x = VecD::Zero(3), g = VecD::Ones(3);
    CHECK_THROWS_AS(query_grad_through_normalization(x, g), std::domain_error);
}

TEST_CASE("analytic loss gradient matches central finite differences") {
    MemoryStore store = new_memory(small_config(64, 8, 8, 91, 0));
    for (int64_t i = 0; i < 64; ++i) store.set_value(i, i % 4);
    const NeighborBackend backend = NeighborBackend::make_exact(store.keys);
    Rng rng(92);
    const double step = 1e-5;
    int checked = 0;
    for (int it = 0; it < 400 && checked < 60; ++it) {
        VecD x(8);
        for (int j = 0; j < 8; ++j) x[j] = rng.gaussian();
        if (x.norm() < 0.5) continue;
        const VecD q = x / x.norm();
        const QueryResult r = query(store, q, backend);
        const LossReport report = memory_loss(store, q, 2, r);
        if (report.loss <= 1e-3) continue;  // want an active hinge

        // Selection stability probe: the chosen neighbors must not change in
        // the perturbation neighborhood.
        const int64_t p = report.positive_index;
        const int64_t nb = report.negative_index;
        if (p < 0 || nb < 0) continue;
        bool stable = true;
        for (int j = 0; j < 8 && stable; ++j) {
            for (double sgn : {-1.0, 1.0}) {
                VecD xp = x;
                xp[j] += sgn * step;
                const VecD qp = xp / xp.norm();
                const QueryResult rp = query(store, qp, backend);
                const LossReport lp = memory_loss(store, qp, 2, rp);
                stable = stable && lp.positive_index == p && lp.negative_index == nb;
            }
        }
        if (!stable) continue;

        const VecD grad_x = query_grad_through_normalization(x, report.grad_q);
        for (int j = 0; j < 8; ++j) {
            VecD xp = x, xm = x;
            xp[j] += step;
            xm[j] -= step;
            const double fd =
                (loss_of_raw(store, xp, p, nb, store.config.alpha) -
                 loss_of_raw(store, xm, p, nb, store.config.alpha)) /
                (2 * step);
            const double rel = std::abs(fd - grad_x[j]) /
                               std::max(1e-8, std::abs(grad_x[j]));
            CHECK(rel <= 1e-4);
        }
        ++checked;
    }
    CHECK(checked >= 50);
}
