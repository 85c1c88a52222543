#include "dynadrag/error.hpp"
#include "dynadrag/motion_predictor.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

using namespace dynadrag;

namespace {

PredictorConfig small_config() {
    PredictorConfig cfg;
    cfg.hid_s = 8;
    cfg.hid_t = 16;
    cfg.n_s = 2;
    cfg.n_t = 2;
    cfg.groups = 2;
    cfg.incep_ker = {3, 5};
    return cfg;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("dynadrag_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST(EncodeInput, SinglePairAtOrigin) {
    const RgbImage img = RgbImage::zeros(512, 512);
    const std::vector<PointPair> pairs = {PointPair::from_user({0, 0}, {10, 0})};
    const auto enc = encode_input(img, pairs, 4);
    ASSERT_EQ(enc.data.sizes(), (std::vector<int64_t>{6, 512, 512}));
    EXPECT_EQ(enc.data[3][0][0].item<float>(), -10.0F);
    EXPECT_EQ(enc.data[4][0][0].item<float>(), 0.0F);
    EXPECT_EQ(enc.data[5].sum().item<float>(), 25.0F);
    EXPECT_EQ(enc.data[5].slice(0, 0, 5).slice(1, 0, 5).sum().item<float>(), 25.0F);
    EXPECT_EQ(enc.data.slice(0, 3, 5).abs().sum().item<float>(), 10.0F);
}

TEST(EncodeInput, InvalidPairsContributeNothing) {
    const RgbImage img = RgbImage::zeros(64, 64);
    auto p = PointPair::from_user({20, 20}, {30, 25});
    p.valid = false;
    const std::vector<PointPair> pairs = {p};
    const auto enc = encode_input(img, pairs, 4);
    EXPECT_EQ(enc.data.slice(0, 3, 6).abs().sum().item<float>(), 0.0F);
}

TEST(EncodeInput, RgbChannelsCopyImage) {
    RgbImage img{torch::rand({3, 16, 16})};
    const auto enc = encode_input(img, {}, 4);
    EXPECT_TRUE(torch::equal(enc.data.slice(0, 0, 3), img.data));
}

TEST(EncodeInput, DeltaAndHeatmapProperty) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0, 63.0);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<PointPair> pairs;
        const int n = 1 + static_cast<int>(rng() % 4);
        for (int i = 0; i < n; ++i) pairs.push_back(PointPair::from_user({u(rng), u(rng)}, {u(rng), u(rng)}));
        const auto enc = encode_input(RgbImage::zeros(64, 64), pairs, 2);
        auto heat = enc.data[5];
        for (const auto& p : pairs) {
            const auto px = round_to_pixel(p.handle);
            EXPECT_EQ(heat[px.y][px.x].item<float>(), 1.0F);
        }
        // Heatmap support is the union of the neighborhoods.
        auto expected = torch::zeros({64, 64});
        for (const auto& p : pairs)
            for (const auto& q : chebyshev_neighborhood(p.handle, 2, 64, 64)) expected[q.y][q.x] = 1.0F;
        EXPECT_TRUE(torch::equal(heat, expected));
    }
}

TEST(EncodeInput, ResolutionMismatchIsEncodingError) {
    try {
        encode_input(RgbImage::zeros(32, 32), {}, 4, std::make_pair<int64_t, int64_t>(64, 64));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Encoding);
    }
}

TEST(EncodeInput, HandleOutsideImageRejected) {
    const std::vector<PointPair> pairs = {PointPair::from_user({70, 3}, {10, 3})};
    EXPECT_THROW(encode_input(RgbImage::zeros(64, 64), pairs, 4), Error);
}

// ---------------------------------------------------------------------------------------------

TEST(Predictor, OutputShapeAndDeterminism) {
    PredictorModel model(small_config(), 5);
    const std::vector<PointPair> pairs = {PointPair::from_user({10, 10}, {20, 12})};
    const auto enc = encode_input(RgbImage{torch::rand({3, 32, 32})}, pairs, 4);
    const auto a = predict_flow(model, enc);
    const auto b = predict_flow(model, enc);
    EXPECT_EQ(a.data.sizes(), (std::vector<int64_t>{2, 32, 32}));
    EXPECT_TRUE(torch::equal(a.data, b.data));
}

TEST(Predictor, DefaultConfigShape) {
    PredictorModel model(PredictorConfig{}, 0);
    const auto enc = encode_input(RgbImage::zeros(64, 64), {}, 4);
    EXPECT_EQ(predict_flow(model, enc).data.sizes(), (std::vector<int64_t>{2, 64, 64}));
}

TEST(Predictor, IndivisibleInputNamesStride) {
    PredictorModel model(PredictorConfig{}, 0);
    ASSERT_EQ(model.config().total_stride(), 4);
    const auto enc = encode_input(RgbImage::zeros(30, 30), {}, 4);
    try {
        predict_flow(model, enc);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("stride 4"), std::string::npos);
    }
}

TEST(Predictor, ConfigValidation) {
    auto cfg = small_config();
    cfg.n_s = 1;
    EXPECT_THROW(cfg.validate(), Error);
    EXPECT_EQ(parse_predictor_config(format_predictor_config(small_config())), small_config());
}

TEST(Trainer, ZeroLossWhenTargetEqualsPrediction) {
    PredictorModel model(small_config(), 1);
    const auto enc = encode_input(RgbImage{torch::rand({3, 16, 16})}, {}, 4);
    const auto pred = predict_flow(model, enc);
    const std::vector<EncodedInput> ins = {enc};
    const std::vector<FlowField> outs = {pred};
    const auto batch = TrainingBatch::stack(ins, outs);

    std::vector<torch::Tensor> before;
    for (const auto& p : model.net()->parameters()) before.push_back(p.detach().clone());
    PredictorTrainer trainer(model);
    EXPECT_NEAR(trainer.train_step(batch), 0.0, 1e-12);
    const auto after = model.net()->parameters();
    for (size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(torch::equal(before[i], after[i]));
}

TEST(Trainer, LossDecreasesOnFixedBatch) {
    PredictorModel model(small_config(), 2);
    const auto enc = encode_input(RgbImage{torch::rand({3, 16, 16})}, {}, 4);
    const std::vector<EncodedInput> ins = {enc};
    const std::vector<FlowField> outs = {FlowField::constant(16, 16, {1.0, -0.5})};
    const auto batch = TrainingBatch::stack(ins, outs);
    PredictorTrainer trainer(model);
    const double first = trainer.evaluate(batch);
    for (int i = 0; i < 50; ++i) trainer.train_step(batch);
    EXPECT_LT(trainer.evaluate(batch), 0.5 * first);
}

TEST(Trainer, NonFiniteTargetsRejected) {
    PredictorModel model(small_config(), 2);
    const auto enc = encode_input(RgbImage::zeros(16, 16), {}, 4);
    FlowField bad = FlowField::zeros(16, 16);
    bad.data[0][0][0] = std::numeric_limits<float>::quiet_NaN();
    const std::vector<EncodedInput> ins = {enc};
    const std::vector<FlowField> outs = {bad};
    PredictorTrainer trainer(model);
    EXPECT_THROW(trainer.train_step(TrainingBatch::stack(ins, outs)), Error);
}

// ---------------------------------------------------------------------------------------------

TEST(AdvanceHandles, AddsFlowAtHandle) {
    const std::vector<PointPair> pairs = {PointPair::from_user({100, 100}, {200, 100})};
    const auto out = advance_handles(pairs, FlowField::constant(512, 512, {3.2, -1.1}));
    EXPECT_NEAR(out[0].handle.x, 103.2, 1e-5);
    EXPECT_NEAR(out[0].handle.y, 98.9, 1e-5);
    EXPECT_EQ(out[0].history.size(), 2u);
}

TEST(AdvanceHandles, ClampsAtBorder) {
    const std::vector<PointPair> pairs = {PointPair::from_user({510, 5}, {0, 0})};
    const auto out = advance_handles(pairs, FlowField::constant(512, 512, {10, -10}));
    EXPECT_EQ(out[0].handle, (Point{511, 0}));
}

TEST(AdvanceHandles, InvalidPairsStayButGrowHistory) {
    auto p = PointPair::from_user({5, 5}, {9, 9});
    p.valid = false;
    const std::vector<PointPair> pairs = {p};
    const auto out = advance_handles(pairs, FlowField::constant(16, 16, {1, 1}));
    EXPECT_EQ(out[0].handle, (Point{5, 5}));
    EXPECT_EQ(out[0].history.size(), 2u);
    EXPECT_EQ(out[0].target, (Point{9, 9}));
}

TEST(AdvanceHandles, StaysInBoundsProperty) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> pos(0, 31), vel(-40, 40);
    for (int i = 0; i < 200; ++i) {
        const std::vector<PointPair> pairs = {PointPair::from_user({pos(rng), pos(rng)}, {pos(rng), pos(rng)})};
        const auto out = advance_handles(pairs, FlowField::constant(32, 32, {vel(rng), vel(rng)}));
        EXPECT_TRUE(in_bounds(out[0].handle, 32, 32));
        EXPECT_EQ(out[0].target, pairs[0].target);
    }
}

TEST(FlowPredictors, StraightLineMovesTowardsTarget) {
    const std::vector<PointPair> pairs = {PointPair::from_user({10, 10}, {30, 10})};
    const auto enc = encode_input(RgbImage::zeros(64, 64), pairs, 4);
    const auto out = advance_handles(pairs, StraightLinePredictor(4).predict(enc));
    EXPECT_NEAR(out[0].handle.x, 14.0, 1e-6);
    EXPECT_NEAR(out[0].handle.y, 10.0, 1e-6);
    EXPECT_EQ(make_predictor("constant:1,2")->describe(), "constant:1,2");
}

// ---------------------------------------------------------------------------------------------

TEST(Checkpoint, RoundTripGivesIdenticalOutput) {
    const auto dir = temp_dir("ckpt");
    PredictorModel model(small_config(), 9);
    model.save(dir / "mp.pt");
    const auto loaded = PredictorModel::load(dir / "mp.pt");
    EXPECT_EQ(loaded.config(), small_config());
    const auto enc = encode_input(RgbImage{torch::rand({3, 16, 16})}, {}, 4);
    EXPECT_TRUE(torch::equal(predict_flow(model, enc).data, predict_flow(loaded, enc).data));
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsGarbageAndForeignArchives) {
    const auto dir = temp_dir("ckpt_bad");
    {
        std::ofstream(dir / "junk.pt") << "not a checkpoint";
    }
    EXPECT_THROW(PredictorModel::load(dir / "junk.pt"), Error);
    EXPECT_THROW(PredictorModel::load(dir / "missing.pt"), Error);

    torch::serialize::OutputArchive archive;
    archive.write("format", c10::IValue(std::string("something-else")));
    archive.write("version", c10::IValue(int64_t{1}));
    archive.write("config", c10::IValue(format_predictor_config(small_config())));
    archive.save_to((dir / "foreign.pt").string());
    EXPECT_THROW(PredictorModel::load(dir / "foreign.pt"), Error);

    auto cfg = small_config();
    cfg.in_channels = 5;
    torch::serialize::OutputArchive wrong;
    wrong.write("format", c10::IValue(std::string("dynadrag-motion-predictor")));
    wrong.write("version", c10::IValue(int64_t{1}));
    wrong.write("config", c10::IValue(format_predictor_config(cfg)));
    wrong.save_to((dir / "wrong.pt").string());
    try {
        PredictorModel::load(dir / "wrong.pt");
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("input channels"), std::string::npos);
    }
    std::filesystem::remove_all(dir);
}
