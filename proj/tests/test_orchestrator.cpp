#include "dynadrag/error.hpp"
#include "dynadrag/ldm_backend.hpp"
#include "dynadrag/orchestrator.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <random>

using namespace dynadrag;

namespace {

RgbImage textured(int64_t size, uint64_t seed) {
    torch::manual_seed(seed);
    auto coarse = torch::rand({1, 3, size / 8, size / 8});
    return {torch::nn::functional::interpolate(
                coarse, torch::nn::functional::InterpolateFuncOptions().size(std::vector<int64_t>{size, size}).mode(torch::kNearest))
                .squeeze(0)
                .contiguous()};
}

EditSession toy_session(std::vector<PointPair> pairs, std::shared_ptr<const FlowPredictor> predictor, int64_t size = 64) {
    EditSession s;
    s.image = textured(size, 1);
    s.pairs = std::move(pairs);
    s.mask = MaskImage::full(size, size);
    s.backend = std::make_shared<ToyBackend>(size);
    s.predictor = std::move(predictor);
    return s;
}

class ThrowingPredictor final : public FlowPredictor {
public:
    explicit ThrowingPredictor(int fail_at) : fail_at_(fail_at) {}
    FlowField predict(const EncodedInput& input) const override {
        if (calls_++ == fail_at_) throw Error(ErrorKind::Unavailable, "predictor offline");
        return FlowField::constant(input.height(), input.width(), {1, 0});
    }
    std::string describe() const override { return "throwing"; }

private:
    int fail_at_;
    mutable std::atomic<int> calls_{0};
};

std::vector<PointPair> pairs_of(std::initializer_list<std::pair<Point, Point>> list) {
    std::vector<PointPair> out;
    for (const auto& [h, t] : list) out.push_back(PointPair::from_user(h, t));
    return out;
}

std::vector<bool> valid_flags(const std::vector<PointPair>& pairs) {
    std::vector<bool> out;
    for (const auto& p : pairs) out.push_back(p.valid);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Similarity and selection

TEST(Cosine, ReferenceCases) {
    const auto a = torch::tensor({1.0, 2.0, 3.0});
    EXPECT_NEAR(dynadrag::cosine_similarity(a, a), 1.0, 1e-15);
    EXPECT_NEAR(dynadrag::cosine_similarity(torch::tensor({1.0, 0.0}), torch::tensor({0.0, 4.0})), 0.0, 1e-15);
    EXPECT_NEAR(dynadrag::cosine_similarity(a, -2 * a), -1.0, 1e-15);
    EXPECT_EQ(dynadrag::cosine_similarity(torch::zeros({3}), a), 1.0);
}

TEST(Cosine, PairSimilaritiesOnToyFeatures) {
    ToyBackend b(64);
    auto z = torch::zeros({1, 4, 8, 8});
    z[0][0][1][1] = 1.0F;  // handle cell
    z[0][0][3][3] = 2.0F;  // parallel target
    z[0][1][5][5] = 1.0F;  // orthogonal target
    const auto pairs = pairs_of({{{8, 8}, {24, 24}}, {{8, 8}, {40, 40}}});
    const auto sims = compute_similarities(b, {z, 50}, pairs);
    EXPECT_NEAR(sims[0], 1.0, 1e-12);
    EXPECT_NEAR(sims[1], 0.0, 1e-12);
}

TEST(Selection, MinimumFallbackWhenAllSimilar) {
    std::mt19937_64 rng(0);
    const std::vector<double> sims = {0.9, 0.7, 0.65};
    const auto out = select_valid_points(pairs_of({{{0, 0}, {1, 1}}, {{2, 2}, {3, 3}}, {{4, 4}, {5, 5}}}), sims,
                                         SelectionMode::ADS, 0.6, 0, rng);
    EXPECT_EQ(valid_flags(out), (std::vector<bool>{false, false, true}));
}

TEST(Selection, ThresholdKeepsDissimilarPair) {
    std::mt19937_64 rng(0);
    const std::vector<double> sims = {0.5, 0.9};
    const auto out = select_valid_points(pairs_of({{{0, 0}, {1, 1}}, {{2, 2}, {3, 3}}}), sims, SelectionMode::ADS, 0.6, 0, rng);
    EXPECT_EQ(valid_flags(out), (std::vector<bool>{true, false}));
}

TEST(Selection, BothBelowThresholdBothKept) {
    std::mt19937_64 rng(0);
    const std::vector<double> sims = {0.3, 0.4};
    const auto out = select_valid_points(pairs_of({{{0, 0}, {1, 1}}, {{2, 2}, {3, 3}}}), sims, SelectionMode::ADS, 0.6, 0, rng);
    EXPECT_EQ(valid_flags(out), (std::vector<bool>{true, true}));
}

TEST(Selection, OffMarksAllValid) {
    std::mt19937_64 rng(0);
    const std::vector<double> sims = {0.9, 0.95};
    auto pairs = pairs_of({{{0, 0}, {1, 1}}, {{2, 2}, {3, 3}}});
    pairs[0].valid = false;
    EXPECT_EQ(valid_flags(select_valid_points(pairs, sims, SelectionMode::OFF, 0.6, 3, rng)), (std::vector<bool>{true, true}));
}

TEST(Selection, FirstOnlyFreezesAfterIterationZero) {
    std::mt19937_64 rng(0);
    auto pairs = pairs_of({{{0, 0}, {1, 1}}, {{2, 2}, {3, 3}}});
    const std::vector<double> first = {0.2, 0.9};
    pairs = select_valid_points(pairs, first, SelectionMode::FDS, 0.6, 0, rng);
    EXPECT_EQ(valid_flags(pairs), (std::vector<bool>{true, false}));
    const std::vector<double> later = {0.9, 0.1};
    pairs = select_valid_points(pairs, later, SelectionMode::FDS, 0.6, 1, rng);
    EXPECT_EQ(valid_flags(pairs), (std::vector<bool>{true, false}));
    pairs = select_valid_points(pairs, later, SelectionMode::ADS, 0.6, 1, rng);
    EXPECT_EQ(valid_flags(pairs), (std::vector<bool>{false, true}));
}

TEST(Selection, RandomMatchesThresholdCardinality) {
    std::mt19937_64 gen(99);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const size_t n = 1 + gen() % 10;
        std::vector<double> sims(n);
        for (double& s : sims) s = u(gen);
        std::vector<PointPair> pairs(n, PointPair::from_user({0, 0}, {1, 1}));
        const auto ads = select_valid_points(pairs, sims, SelectionMode::ADS, 0.6, trial, rng);
        const auto rs = select_valid_points(pairs, sims, SelectionMode::RS, 0.6, trial, rng);
        const auto count = [](const std::vector<PointPair>& p) { return std::count_if(p.begin(), p.end(), [](const auto& x) { return x.valid; }); };
        ASSERT_EQ(count(ads), count(rs));
        ASSERT_GE(count(ads), 1);
        ASSERT_EQ(ads.size(), n);
    }
}

TEST(Selection, LengthMismatchRejected) {
    std::mt19937_64 rng(0);
    const std::vector<double> sims = {0.1};
    EXPECT_THROW(select_valid_points(pairs_of({{{0, 0}, {1, 1}}, {{2, 2}, {3, 3}}}), sims, SelectionMode::ADS, 0.6, 0, rng), Error);
}

TEST(Convergence, Examples) {
    auto same = pairs_of({{{3, 3}, {3, 3}}, {{9, 1}, {9, 1}}});
    EXPECT_TRUE(is_converged(same, 0.0));
    auto far = pairs_of({{{0, 0}, {5, 0}}});
    EXPECT_FALSE(is_converged(far, 2.0));
    auto mixed = pairs_of({{{0, 0}, {50, 50}}, {{7, 7}, {7, 7}}});
    mixed[0].valid = false;
    EXPECT_TRUE(is_converged(mixed, 2.0));
}

// ---------------------------------------------------------------------------------------------
// JSON

TEST(PointsJson, ParseAndEmit) {
    const auto j = nlohmann::json::parse(R"([{"handle": [10.5, 20], "target": [30, 40.25]}])");
    const auto pairs = parse_points_json(j);
    ASSERT_EQ(pairs.size(), 1u);
    EXPECT_EQ(pairs[0].handle, (Point{10.5, 20}));
    EXPECT_EQ(pairs[0].target, (Point{30, 40.25}));
    EXPECT_EQ(points_to_json(pairs), j);
    EXPECT_THROW(parse_points_json(nlohmann::json::parse("{}")), Error);
    EXPECT_THROW(parse_points_json(nlohmann::json::parse("[]")), Error);
    EXPECT_THROW(parse_points_json(nlohmann::json::parse(R"([{"handle": [1, 2]}])")), Error);
    EXPECT_THROW(parse_points_json(nlohmann::json::parse(R"([{"handle": [1], "target": [1, 2]}])")), Error);
    EXPECT_THROW(parse_points_json(nlohmann::json::parse(R"([{"handle": ["a", 1], "target": [1, 2]}])")), Error);
}

TEST(TraceJson, RoundTripWithExactFieldNames) {
    EditTrace t;
    t.selection_mode = "ADS";
    t.seed = 5;
    t.converged = true;
    t.lora_adapter = "toy-identity";
    IterationRecord r;
    r.iteration = 0;
    r.valid_pair_indices = {1};
    r.valid = {false, true};
    r.similarities = {0.8, 0.2};
    r.predicted_next_positions = {{1, 2}, {3.5, 4}};
    r.ms_loss_curve = {{1.0, 0.5, 5.0}};
    r.intermediate_image = "iter_00000.png";
    r.handle_positions = {{1, 2}, {3.5, 4}};
    t.records.push_back(r);
    const auto j = to_json(t);
    for (const char* key : {"iteration", "valid_pair_indices", "similarities", "predicted_next_positions", "ms_loss_curve",
                            "intermediate_image", "handle_positions"})
        EXPECT_TRUE(j["iterations"][0].contains(key)) << key;
    EXPECT_EQ(to_json(trace_from_json(j)), j);
}

// ---------------------------------------------------------------------------------------------
// Loop

TEST(RunEdit, ZeroDragConvergesBeforeAnyStep) {
    auto s = toy_session(pairs_of({{{20, 20}, {20, 20}}}), make_predictor("constant:4,0"));
    s.config.selection_mode = SelectionMode::OFF;
    int iterations = 0;
    EditHooks hooks;
    hooks.on_iteration = [&](const IterationRecord&) { ++iterations; };
    const auto result = run_edit(s, hooks);
    EXPECT_TRUE(result.trace.converged);
    EXPECT_TRUE(result.trace.records.empty());
    EXPECT_EQ(iterations, 0);
    auto& b = *s.backend;
    const auto round_trip = b.decode(b.denoise_to_clean(b.ddim_invert(b.encode(s.image), 50).back(), nullptr).z);
    EXPECT_TRUE(torch::equal(result.image.data, round_trip.data));
}

TEST(RunEdit, FortyPixelDragAtFourPerIterationTakesTen) {
    auto s = toy_session(pairs_of({{{12, 30}, {52, 30}}}), make_predictor("constant:4,0"));
    std::vector<int> stored;
    EditHooks hooks;
    hooks.store_intermediate = [&](int k, const RgbImage& img) {
        stored.push_back(k);
        EXPECT_EQ(img.height(), 64);
        return "iter_" + std::to_string(k) + ".png";
    };
    const auto result = run_edit(s, hooks);
    EXPECT_TRUE(result.trace.converged);
    ASSERT_EQ(result.trace.records.size(), 10u);
    EXPECT_EQ(stored.size(), 10u);
    EXPECT_EQ(result.pairs[0].history.size(), 11u);
    for (size_t k = 0; k < 10; ++k) {
        const auto& rec = result.trace.records[k];
        EXPECT_EQ(rec.iteration, static_cast<int>(k));
        EXPECT_EQ(rec.handle_positions[0], result.pairs[0].history[k + 1]);
        EXPECT_NEAR(rec.handle_positions[0].x, 12 + 4.0 * (k + 1), 1e-4);
        EXPECT_EQ(rec.predicted_next_positions[0], rec.handle_positions[0]);
        EXPECT_EQ(rec.ms_loss_curve.size(), 5u);
        EXPECT_EQ(rec.intermediate_image, "iter_" + std::to_string(k) + ".png");
    }
    EXPECT_LE(result.pairs[0].remaining_distance(), 2.0);
}

TEST(RunEdit, CapReachedWithoutError) {
    auto s = toy_session(pairs_of({{{10, 10}, {60, 60}}}), make_predictor("constant:0,0"));
    const auto result = run_edit(s);
    EXPECT_FALSE(result.trace.converged);
    EXPECT_EQ(result.trace.records.size(), 25u);
    EXPECT_EQ(result.pairs[0].history.size(), 26u);
}

TEST(RunEdit, RandomizedCasesRespectCapAndTraceInvariants) {
    std::mt19937_64 gen(2024);
    std::uniform_real_distribution<double> pos(0, 63), step(-5, 5);
    const std::array<SelectionMode, 4> modes = {SelectionMode::ADS, SelectionMode::FDS, SelectionMode::RS, SelectionMode::OFF};
    for (int c = 0; c < 100; ++c) {
        std::vector<PointPair> pairs;
        const int n = 1 + static_cast<int>(gen() % 3);
        for (int i = 0; i < n; ++i) pairs.push_back(PointPair::from_user({pos(gen), pos(gen)}, {pos(gen), pos(gen)}));
        std::shared_ptr<const FlowPredictor> predictor;
        if (gen() % 2 == 0) predictor = std::make_shared<StraightLinePredictor>(1.0 + static_cast<double>(gen() % 6));
        else predictor = std::make_shared<ConstantFlowPredictor>(Point{step(gen), step(gen)});
        auto s = toy_session(pairs, predictor);
        s.config.selection_mode = modes[gen() % 4];
        s.config.seed = gen();
        s.config.ms_steps_per_iteration = 1;
        s.config.ddim_steps = 2;
        const auto result = run_edit(s);
        const size_t k = result.trace.records.size();
        ASSERT_LE(k, 25u);
        for (const auto& p : result.pairs) ASSERT_EQ(p.history.size(), k + 1);
        for (size_t r = 0; r < k; ++r) {
            const auto& rec = result.trace.records[r];
            ASSERT_FALSE(rec.valid_pair_indices.empty());
            for (size_t i = 0; i < result.pairs.size(); ++i) ASSERT_EQ(rec.handle_positions[i], result.pairs[i].history[r + 1]);
        }
        if (!result.trace.converged) ASSERT_EQ(k, 25u);
    }
}

TEST(RunEdit, CarryLatentAlsoConverges) {
    auto s = toy_session(pairs_of({{{12, 30}, {52, 30}}}), make_predictor("straight:4"));
    s.config.carry_latent = true;
    const auto result = run_edit(s);
    EXPECT_TRUE(result.trace.converged);
    EXPECT_EQ(result.trace.records.size(), 10u);
}

TEST(RunEdit, FailureCarriesIterationAndPartialTrace) {
    auto s = toy_session(pairs_of({{{10, 10}, {60, 10}}}), std::make_shared<ThrowingPredictor>(3));
    try {
        run_edit(s);
        FAIL();
    } catch (const EditFailed& e) {
        EXPECT_EQ(e.iteration(), 3);
        EXPECT_EQ(e.partial_trace().records.size(), 3u);
        EXPECT_NE(std::string(e.what()).find("predictor offline"), std::string::npos);
    }
}

TEST(RunEdit, SessionValidation) {
    auto s = toy_session({}, make_predictor("straight:4"));
    EXPECT_THROW(run_edit(s), Error);
    s = toy_session(pairs_of({{{1, 1}, {5, 5}}}), make_predictor("straight:4"));
    s.mask = MaskImage::full(32, 32);
    EXPECT_THROW(run_edit(s), Error);
    s = toy_session(pairs_of({{{1, 1}, {5, 5}}}), make_predictor("straight:4"));
    s.image = textured(32, 1);
    s.mask = MaskImage::full(32, 32);
    EXPECT_THROW(run_edit(s), Error);
}

TEST(RunEdit, ReusesSuppliedAdapter) {
    auto s = toy_session(pairs_of({{{12, 30}, {20, 30}}}), make_predictor("straight:4"));
    auto adapter = std::make_shared<LoraAdapter>();
    adapter->id = "supplied";
    bool trained = false;
    EditHooks hooks;
    hooks.adapter = adapter;
    hooks.on_adapter = [&](const LoraAdapter&) { trained = true; };
    const auto result = run_edit(s, hooks);
    EXPECT_FALSE(trained);
    EXPECT_EQ(result.trace.lora_adapter, "supplied");
}

TEST(RunEdit, MiniLdmMovesHandle) {
    EditSession s;
    s.image = textured(64, 3);
    s.pairs = pairs_of({{{20, 32}, {44, 32}}});
    s.mask = MaskImage::full(64, 64);
    s.backend = std::make_shared<LdmBackend>(LdmConfig::mini(), 64, 0);
    s.predictor = make_predictor("straight:8");
    s.config.lora_steps = 10;
    s.config.max_iterations = 2;
    s.config.ddim_steps = 10;
    const auto result = run_edit(s);
    ASSERT_EQ(result.trace.records.size(), 2u);
    EXPECT_LT(result.pairs[0].remaining_distance(), 24.0);
    EXPECT_TRUE(torch::isfinite(result.image.data).all().item<bool>());
    EXPECT_EQ(result.trace.lora_loss_curve.size(), 2u);
}
