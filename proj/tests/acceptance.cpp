// Acceptance runner: one PASS / FAIL / SKIP line per criterion A1..A8.
// Exit status is non-zero when any criterion fails; skips do not fail the run.

#include "dynadrag/dataset.hpp"
#include "dynadrag/diffusion_backend.hpp"
#include "dynadrag/error.hpp"
#include "dynadrag/eval.hpp"
#include "dynadrag/image_io.hpp"
#include "dynadrag/ldm_backend.hpp"
#include "dynadrag/log.hpp"
#include "dynadrag/motion_predictor.hpp"
#include "dynadrag/motion_supervisor.hpp"
#include "dynadrag/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <unistd.h>

using namespace dynadrag;
namespace fs = std::filesystem;

namespace {

enum class Verdict { Pass, Fail, Skip };

struct Outcome {
    Verdict verdict = Verdict::Pass;
    std::string detail;
};

// Collects failed checks; the first few messages end up in the report line.
class Checks {
public:
    void expect(bool ok, const std::string& what) {
        if (ok) return;
        ++failures_;
        if (messages_.size() < 3) messages_.push_back(what);
    }
    bool ok() const { return failures_ == 0; }
    Outcome outcome(const std::string& summary) const {
        if (ok()) return {Verdict::Pass, summary};
        std::ostringstream os;
        os << failures_ << " check(s) failed:";
        for (const auto& m : messages_) os << " [" << m << "]";
        return {Verdict::Fail, os.str()};
    }

private:
    int failures_ = 0;
    std::vector<std::string> messages_;
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("dynadrag_accept_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

RgbImage textured(int64_t size, uint64_t seed, int64_t cells = 8) {
    torch::manual_seed(seed);
    auto coarse = torch::rand({1, 3, cells, cells});
    return {torch::nn::functional::interpolate(coarse, torch::nn::functional::InterpolateFuncOptions()
                                                           .size(std::vector<int64_t>{size, size})
                                                           .mode(torch::kBilinear)
                                                           .align_corners(false))
                .squeeze(0)
                .contiguous()};
}

const char* env(const char* name) {
    const char* v = std::getenv(name);
    return (v != nullptr && *v != '\0') ? v : nullptr;
}

// ---------------------------------------------------------------------------------------------

SupervisionContext toy_context(const torch::Tensor& z, std::vector<Point> handles, std::vector<Point> next,
                               const MaskImage& mask) {
    SupervisionContext ctx;
    ctx.z_t_current = {z, 50, LatentOrigin::Inverted};
    ctx.z_t_original = {z.clone(), 50, LatentOrigin::Inverted};
    ctx.z_tm1_reference = z.clone();
    ctx.mask_latent = mask;
    ctx.handles = std::move(handles);
    ctx.next_positions = std::move(next);
    ctx.downscale = 8;
    return ctx;
}

Outcome a1_motion_supervision() {
    const auto t0 = std::chrono::steady_clock::now();
    Checks c;
    ToyBackend b(64, 8);
    torch::manual_seed(101);

    const auto z = torch::randn({1, 4, 8, 8}, torch::kFloat64);
    c.expect(ms_loss(b, toy_context(z, {{20, 28}, {40, 9}}, {{20, 28}, {40, 9}}, MaskImage::full(8, 8))).total.item<double>() == 0.0,
             "zero drag with full mask is not 0");

    auto full = toy_context(z, {{16, 16}}, {{24, 20}}, MaskImage::full(8, 8));
    full.z_tm1_reference = torch::randn({1, 4, 8, 8}, torch::kFloat64);
    c.expect(ms_loss(b, full).term2.item<double>() == 0.0, "term2 with full mask is not 0");

    // latent ramp along x: a one-cell move changes every feature by exactly |c|
    const auto ramp = torch::arange(8, torch::kFloat64).view({1, 1, 1, 8}).expand({1, 4, 8, 8}).contiguous();
    for (double scale : {1.0, 3.0}) {
        const double got = ms_loss(b, toy_context(ramp * scale, {{16, 16}}, {{24, 16}}, MaskImage::full(8, 8))).term1.item<double>();
        c.expect(got == 9.0 * 8 * scale, "constant-offset loss " + fmt(got, 10) + " != " + fmt(72 * scale));
    }

    // gradient vs central differences of the same objective with the handle patch held at z0
    MaskImage mask = MaskImage::empty(8, 8);
    mask.data.slice(0, 0, 5).fill_(1.0F);
    auto ctx = toy_context(z, {{13.3, 21.7}, {30.1, 44.9}}, {{17.9, 25.2}, {35.5, 41.0}}, mask);
    ctx.z_tm1_reference = z + 0.1 * torch::randn({1, 4, 8, 8}, torch::kFloat64);
    auto live = z.clone().requires_grad_(true);
    ms_loss(b, ctx, live).total.backward();
    const auto grad = live.grad().clone();
    const auto anchor = b.extract_features({z, 50}).data;
    auto frozen = [&](const torch::Tensor& zz) {
        const auto pass = b.step_with_features({zz, 50});
        double t1 = 0.0;
        for (size_t i = 0; i < ctx.handles.size(); ++i) {
            const auto from = sample_patch(anchor, pixel_to_latent(ctx.handles[i], 8), 1);
            const auto to = sample_patch(pass.features.data, pixel_to_latent(ctx.next_positions[i], 8), 1);
            t1 += (to - from).abs().sum().item<double>();
        }
        return t1 + ctx.config.lambda_mask * ((pass.z_prev - ctx.z_tm1_reference) * (1.0 - mask.data.to(torch::kFloat64))).abs().sum().item<double>();
    };
    c.expect(std::abs(frozen(z) - ms_loss(b, ctx).total.item<double>()) < 1e-10, "surrogate disagrees with the loss at z0");
    double worst = 0.0;
    constexpr int kDirections = 25;
    for (int d = 0; d < kDirections; ++d) {
        auto dir = torch::randn_like(z);
        dir /= dir.norm();
        const double h = 1e-7;
        const double fd = (frozen(z + h * dir) - frozen(z - h * dir)) / (2 * h);
        const double ad = (grad * dir).sum().item<double>();
        worst = std::max(worst, std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-12}));
    }
    c.expect(worst <= 1e-2, "gradient relative error " + fmt(worst));

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.expect(secs < 30.0, "runtime " + fmt(secs) + " s");
    return c.outcome("identities exact, max grad rel err " + fmt(worst, 3) + " over " + std::to_string(kDirections) +
                     " directions, " + fmt(secs, 3) + " s");
}

// ---------------------------------------------------------------------------------------------

EditSession toy_session(std::vector<PointPair> pairs, std::shared_ptr<const FlowPredictor> predictor) {
    EditSession s;
    s.image = textured(64, 1);
    s.pairs = std::move(pairs);
    s.mask = MaskImage::full(64, 64);
    s.backend = std::make_shared<ToyBackend>(64);
    s.predictor = std::move(predictor);
    return s;
}

Outcome a2_loop_convergence() {
    const auto t0 = std::chrono::steady_clock::now();
    Checks c;
    auto s = toy_session({PointPair::from_user({12, 30}, {52, 30})}, std::make_shared<ConstantFlowPredictor>(Point{4, 0}));
    s.config.stop_distance = 2.0;
    const auto result = run_edit(s);
    c.expect(result.trace.converged, "40 px drag did not converge");
    c.expect(result.trace.records.size() == 10, "trace length " + std::to_string(result.trace.records.size()));
    c.expect(is_converged(result.pairs, 2.0), "final pairs not converged");
    if (result.trace.records.size() >= 10) {
        // not converged one iteration earlier
        auto before = result.pairs;
        before[0].handle = result.trace.records[8].handle_positions[0];
        c.expect(!is_converged(before, 2.0), "already converged at iteration 9");
    }

    std::mt19937_64 gen(77);
    std::uniform_real_distribution<double> pos(0, 63), step(-5, 5);
    size_t longest = 0;
    for (int k = 0; k < 100; ++k) {
        std::vector<PointPair> pairs;
        const int n = 1 + static_cast<int>(gen() % 3);
        for (int i = 0; i < n; ++i) pairs.push_back(PointPair::from_user({pos(gen), pos(gen)}, {pos(gen), pos(gen)}));
        std::shared_ptr<const FlowPredictor> predictor;
        if (gen() % 2 == 0) predictor = std::make_shared<StraightLinePredictor>(1.0 + static_cast<double>(gen() % 6));
        else predictor = std::make_shared<ConstantFlowPredictor>(Point{step(gen), step(gen)});
        auto cs = toy_session(pairs, predictor);
        cs.config.selection_mode = std::array{SelectionMode::ADS, SelectionMode::FDS, SelectionMode::RS, SelectionMode::OFF}[gen() % 4];
        cs.config.seed = gen();
        cs.config.ms_steps_per_iteration = 1;
        cs.config.ddim_steps = 2;
        const auto r = run_edit(cs);
        longest = std::max(longest, r.trace.records.size());
        c.expect(r.trace.records.size() <= 25, "case " + std::to_string(k) + " ran " + std::to_string(r.trace.records.size()));
        for (const auto& p : r.pairs) c.expect(p.history.size() == r.trace.records.size() + 1, "history length mismatch");
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.expect(secs < 120.0, "runtime " + fmt(secs) + " s");
    return c.outcome("converged after " + std::to_string(result.trace.records.size()) + " iterations; 100 cases, longest " +
                     std::to_string(longest) + " <= 25; " + fmt(secs, 3) + " s");
}

// ---------------------------------------------------------------------------------------------

TrainingBatch encode_batch(const std::vector<TrainingSample>& samples, size_t begin, size_t end) {
    std::vector<EncodedInput> ins;
    std::vector<FlowField> outs;
    for (size_t i = begin; i < end; ++i) {
        ins.push_back(encode_input(samples[i].start_frame, samples[i].pairs, 4));
        outs.push_back(samples[i].gt_flow);
    }
    return TrainingBatch::stack(ins, outs);
}

Outcome a3_predictor_training() {
    const auto t0 = std::chrono::steady_clock::now();
    Checks c;
    PredictorConfig cfg;
    cfg.hid_s = 16;
    cfg.hid_t = 32;
    cfg.n_s = 2;
    cfg.n_t = 2;
    cfg.groups = 2;
    cfg.incep_ker = {3, 5};

    const auto samples = synthetic_translation_samples(200, 64, 0.5, 2024);
    c.expect(samples.size() == 200, "sample count " + std::to_string(samples.size()));
    constexpr size_t kTrain = 180;
    const auto held_out = encode_batch(samples, kTrain, samples.size());

    PredictorModel model(cfg, 7);
    PredictorTrainer trainer(model, {TrainOptimizer::Adam, 2e-3});
    const double untrained = trainer.evaluate(held_out);

    std::mt19937_64 rng(5);
    constexpr int kSteps = 200;
    constexpr size_t kBatch = 8;
    for (int step = 0; step < kSteps; ++step) {
        std::vector<TrainingSample> batch;
        for (size_t i = 0; i < kBatch; ++i) batch.push_back(samples[rng() % kTrain]);
        trainer.train_step(encode_batch(batch, 0, batch.size()));
    }
    const double trained = trainer.evaluate(held_out);
    c.expect(trained < 0.1 * untrained, "held-out mse " + fmt(trained) + " vs untrained " + fmt(untrained));

    // a batch whose targets are the model's own batched predictions
    PredictorModel fresh(cfg, 8);
    auto perfect_batch = encode_batch(samples, 0, 4);
    {
        torch::NoGradGuard ng;
        fresh.net()->train();
        perfect_batch.targets = fresh.net()->forward(perfect_batch.inputs).detach().clone();
    }
    PredictorTrainer perfect(fresh);
    const double zero = perfect.train_step(perfect_batch);
    c.expect(zero == 0.0, "perfect-prediction loss " + fmt(zero, 10));

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.expect(secs < 600.0, "runtime " + fmt(secs) + " s");
    return c.outcome("held-out mse " + fmt(untrained) + " -> " + fmt(trained) + " (" + fmt(100 * trained / untrained, 3) +
                     "%), perfect batch loss 0, " + fmt(secs, 3) + " s");
}

// ---------------------------------------------------------------------------------------------

std::vector<bool> flags(const std::vector<PointPair>& pairs) {
    std::vector<bool> out;
    for (const auto& p : pairs) out.push_back(p.valid);
    return out;
}

Outcome a4_selection() {
    Checks c;
    std::mt19937_64 rng(0);
    auto pairs = [](size_t n) { return std::vector<PointPair>(n, PointPair::from_user({0, 0}, {10, 10})); };
    const std::vector<double> all_similar = {0.9, 0.7, 0.65};
    c.expect(flags(select_valid_points(pairs(3), all_similar, SelectionMode::ADS, 0.6, 0, rng)) == std::vector<bool>{false, false, true},
             "minimum fallback");
    const std::vector<double> one_below = {0.5, 0.9};
    c.expect(flags(select_valid_points(pairs(2), one_below, SelectionMode::ADS, 0.6, 0, rng)) == std::vector<bool>{true, false},
             "threshold keeps the dissimilar pair");
    const std::vector<double> both_below = {0.3, 0.4};
    c.expect(flags(select_valid_points(pairs(2), both_below, SelectionMode::ADS, 0.6, 0, rng)) == std::vector<bool>{true, true},
             "both below threshold");

    std::mt19937_64 gen(31);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    auto count = [](const std::vector<PointPair>& p) { return std::count_if(p.begin(), p.end(), [](const auto& x) { return x.valid; }); };
    for (int trial = 0; trial < 1000; ++trial) {
        const size_t n = 1 + gen() % 10;
        std::vector<double> sims(n);
        for (double& s : sims) s = u(gen);
        const auto ads = select_valid_points(pairs(n), sims, SelectionMode::ADS, 0.6, trial, rng);
        const auto rs = select_valid_points(pairs(n), sims, SelectionMode::RS, 0.6, trial, rng);
        c.expect(count(ads) == count(rs), "cardinality differs in trial " + std::to_string(trial));
    }
    return c.outcome("three anchored cases exact; RS cardinality matches on 1000 vectors");
}

// ---------------------------------------------------------------------------------------------

std::map<std::string, std::vector<uint8_t>> snapshot(const fs::path& root) {
    std::map<std::string, std::vector<uint8_t>> out;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file()) out[fs::relative(entry.path(), root).string()] = read_file(entry.path());
    return out;
}

Outcome a5_dataset() {
    Checks c;
    const fs::path dir = scratch("a5");

    // determinism: two builds over the same clips
    for (int i = 0; i < 3; ++i) {
        SyntheticMotion m;
        m.kind = i == 2 ? SyntheticMotion::Kind::Rotation : SyntheticMotion::Kind::TranslatingSquare;
        m.origin = {8.0 + 4 * i, 10};
        m.side = 14;
        m.velocity = {0.4, 0.2 * i};
        m.angle_per_frame = 0.02;
        m.texture_seed = 40 + i;
        const std::string id = "clip" + std::to_string(i);
        write_clip(render_clip(m, id), dir / "videos" / id);
        write_text(dir / "videos" / id / "motion.json", m.to_json().dump());
    }
    BuildOptions opts;
    opts.seed = 99;
    opts.samples_per_clip = 3;
    const auto r1 = build_dataset(dir / "videos", dir / "run1", opts);
    const auto r2 = build_dataset(dir / "videos", dir / "run2", opts);
    c.expect(r1.written == 9 && r2.written == 9, "written " + std::to_string(r1.written) + "/" + std::to_string(r2.written));
    c.expect(snapshot(dir / "run1") == snapshot(dir / "run2"), "records differ between runs");

    // single draws from a uniform-magnitude 5x5 region
    MaskImage region = MaskImage::empty(32, 32);
    FlowField flow = FlowField::zeros(32, 32);
    region.data.slice(0, 10, 15).slice(1, 10, 15).fill_(1.0F);
    flow.data[0].slice(0, 10, 15).slice(1, 10, 15).fill_(0.6F);
    flow.data[1].slice(0, 10, 15).slice(1, 10, 15).fill_(0.8F);
    constexpr int kDraws = 10000;
    std::map<std::pair<int, int>, int> counts;
    std::mt19937_64 rng(2025);
    for (int i = 0; i < kDraws; ++i) {
        const auto h = sample_handles(region, flow, rng, 1);
        counts[{static_cast<int>(h.at(0).x), static_cast<int>(h.at(0).y)}] += 1;
    }
    c.expect(counts.size() <= 25, "draws outside the region");
    double chi2 = 0.0;
    const double expected = kDraws / 25.0;
    for (int y = 10; y < 15; ++y)
        for (int x = 10; x < 15; ++x) {
            const auto it = counts.find({x, y});
            const double o = it == counts.end() ? 0.0 : it->second;
            chi2 += (o - expected) * (o - expected) / expected;
        }
    constexpr double kChi2Critical = 42.97982013935165;  // 0.99 quantile, 24 degrees of freedom
    c.expect(chi2 < kChi2Critical, "chi-square " + fmt(chi2));

    // chained flow against the analytic rigid rotation
    SyntheticMotion rot;
    rot.kind = SyntheticMotion::Kind::Rotation;
    rot.angle_per_frame = 0.01;
    std::vector<FlowField> flows;
    for (int64_t f = 0; f + 1 < rot.frames; ++f) flows.push_back(rot.flow(f));
    std::uniform_real_distribution<double> angle(0, 2 * M_PI), radius(2, 20);
    double worst = 0.0;
    for (int window = kMinWindow; window <= kMaxWindow; ++window) {
        const double a = angle(rng), r = radius(rng);
        const Point p{32 + r * std::cos(a), 32 + r * std::sin(a)};
        const int64_t s = static_cast<int64_t>(rng() % static_cast<uint64_t>(rot.frames - 1 - window + 1));
        worst = std::max(worst, distance(chain_flow(flows, p, s, s + window), rot.track(p, s, s + window)));
    }
    c.expect(worst < 0.5, "chain_flow error " + fmt(worst) + " px");

    // bounds on every built record
    int records = 0;
    std::set<size_t> counts_seen;
    for (const auto& path : list_samples(dir / "run1")) {
        const auto sample = read_sample(path);
        const int64_t w = sample.meta.end - sample.meta.start;
        c.expect(sample.pairs.size() >= 1 && sample.pairs.size() <= 7, "handle count " + std::to_string(sample.pairs.size()));
        c.expect(w >= kMinWindow && w <= kMaxWindow, "window " + std::to_string(w));
        ++records;
    }
    SyntheticMotion sq;
    sq.velocity = {0.5, 0.3};
    const auto clip = render_clip(sq, "sq");
    SyntheticRegionExtractor extractor(sq);
    SyntheticFlowEstimator estimator(sq);
    const auto sq_flows = estimator.estimate(clip);
    for (uint64_t seed = 0; seed < 500; ++seed) {
        const auto sample = build_sample(clip, extractor, sq_flows, seed);
        const int64_t w = sample.meta.end - sample.meta.start;
        c.expect(sample.pairs.size() >= 1 && sample.pairs.size() <= 7, "handle count " + std::to_string(sample.pairs.size()));
        c.expect(w >= kMinWindow && w <= kMaxWindow, "window " + std::to_string(w));
        counts_seen.insert(sample.pairs.size());
        ++records;
    }
    c.expect(counts_seen.size() == 7, "only " + std::to_string(counts_seen.size()) + " distinct handle counts");
    fs::remove_all(dir);
    return c.outcome("byte-identical rebuild, chi-square " + fmt(chi2) + " < " + fmt(kChi2Critical) + ", chain_flow max err " +
                     fmt(worst, 3) + " px, " + std::to_string(records) + " records within bounds");
}

// ---------------------------------------------------------------------------------------------

double round_trip_error(DiffusionBackend& b, const RgbImage& img, size_t* states_out) {
    torch::NoGradGuard ng;
    const auto states = b.ddim_invert(b.encode(img), 50);
    *states_out = states.size();
    const auto out = b.decode(b.denoise_to_clean(states.back(), nullptr).z);
    return (out.data - img.data).abs().mean().item<double>();
}

Outcome a6_backend(std::vector<std::string>& skipped) {
    Checks c;
    ToyBackend toy(64);
    const auto img = textured(64, 3);
    const auto z0 = toy.encode(img);
    const auto states = toy.ddim_invert(z0, 50);
    c.expect(states.size() == 50, "toy returned " + std::to_string(states.size()) + " states");
    c.expect(torch::equal(toy.denoise_to_clean(states.back(), nullptr).z, z0), "toy invert then denoise is not the identity");
    double kv_toy = 0.0;
    for (const auto& st : {states[49], states[20], states[0]})
        kv_toy = std::max(kv_toy, (toy.denoise_step(st, nullptr).z - toy.denoise_step(st, &st).z).abs().mean().item<double>());
    c.expect(kv_toy <= 1e-5, "toy KV self-replacement diff " + fmt(kv_toy));

    // small randomly initialized latent diffusion model: attention path and inversion count
    LdmBackend mini(LdmConfig::mini(), 64, 3);
    double kv_mini = 0.0;
    {
        torch::NoGradGuard ng;
        const auto ms = mini.ddim_invert(mini.encode(img), 50);
        c.expect(ms.size() == 50, "mini returned " + std::to_string(ms.size()) + " states");
        for (int idx : {49, 25, 0}) {
            const auto& st = ms[static_cast<size_t>(idx)];
            kv_mini = std::max(kv_mini, (mini.denoise_step(st, nullptr).z - mini.denoise_step(st, &st).z).abs().mean().item<double>());
        }
    }
    c.expect(kv_mini <= 1e-5, "mini KV self-replacement diff " + fmt(kv_mini));

    std::string real = "real round trip skipped (DYNADRAG_LDM_WEIGHTS unset)";
    if (const char* weights = env("DYNADRAG_LDM_WEIGHTS")) {
        auto backend = make_backend({"ldm", weights, 512, 0});
        const RgbImage photo = env("DYNADRAG_A8_IMAGE") ? resize(read_png(env("DYNADRAG_A8_IMAGE")), 512, 512)
                                                        : textured(512, 9, 16);
        size_t n = 0;
        const double mae = round_trip_error(*backend, photo, &n);
        c.expect(n == 50, "real backend returned " + std::to_string(n) + " states");
        c.expect(mae <= 0.02, "real round trip mae " + fmt(mae));
        real = "real round trip mae " + fmt(mae, 4);
    } else {
        skipped.push_back("A6 real-backend round trip");
    }
    return c.outcome("toy identities exact, KV self-replacement diff toy " + fmt(kv_toy, 3) + " / mini " + fmt(kv_mini, 3) +
                     ", 50 states; " + real);
}

// ---------------------------------------------------------------------------------------------

Outcome a7_eval() {
    Checks c;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n;
    Eigen::MatrixXd a(6, 6);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) a(i, j) = n(rng);
    const Eigen::MatrixXd s = a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(6, 6);
    const Eigen::VectorXd mu = Eigen::VectorXd::LinSpaced(6, -2, 2);
    const double same = frechet_distance(mu, s, mu, s);
    c.expect(std::abs(same) <= 1e-9, "equal moments give " + fmt(same, 3));

    const Eigen::MatrixXd one = Eigen::MatrixXd::Constant(1, 1, 1.0), four = Eigen::MatrixXd::Constant(1, 1, 4.0);
    const Eigen::VectorXd zero1 = Eigen::VectorXd::Zero(1), one1 = Eigen::VectorXd::Ones(1);
    const double shifted = frechet_distance(zero1, one, one1, one);
    const double widened = frechet_distance(zero1, one, zero1, four);
    c.expect(std::abs(shifted - 1.0) <= 1e-9, "shifted means give " + fmt(shifted, 12));
    c.expect(std::abs(widened - 1.0) <= 1e-9, "variances 1 and 4 give " + fmt(widened, 12));

    const RgbImage zeros{torch::zeros({3, 8, 8})}, ones{torch::ones({3, 8, 8})};
    c.expect(mse(zeros, zeros) == 0.0, "mse of equal images");
    c.expect(mse(zeros, ones) == 1.0, "mse of 0 vs 1 images");

    const fs::path dir = scratch("a7");
    fs::create_directories(dir / "edited");
    fs::create_directories(dir / "target");
    RgbImage half{torch::full({3, 8, 8}, 0.5F)};
    write_png(zeros, dir / "edited" / "a.png");
    write_png(half, dir / "target" / "a.png");
    const auto report = evaluate(dir / "edited", dir / "target", {});
    const double stored = 128.0 / 255.0;  // 0.5 after 8-bit quantization
    c.expect(std::abs(report.mse - stored * stored) < 1e-6, "report mse " + fmt(report.mse, 10));
    c.expect(report.mse_x1e3 == report.mse * 1e3, "mse_x1e3 " + fmt(report.mse_x1e3) + " != 1000 * " + fmt(report.mse));
    c.expect(report.to_json().at("mse_x1e3").get<double>() == report.mse * 1e3, "json field mse_x1e3");
    fs::remove_all(dir);
    return c.outcome("Frechet 0 / 1 / 1 within 1e-9, mse exact, mse_x1e3 = " + fmt(report.mse_x1e3, 6));
}

// ---------------------------------------------------------------------------------------------

Outcome a8_end_to_end() {
    const char* weights = env("DYNADRAG_LDM_WEIGHTS");
    const char* predictor = env("DYNADRAG_MP_CKPT");
    if (weights == nullptr || predictor == nullptr)
        return {Verdict::Skip, "needs DYNADRAG_LDM_WEIGHTS and DYNADRAG_MP_CKPT (pretrained denoiser and motion predictor)"};
    Checks c;
    EditSession s;
    s.image = env("DYNADRAG_A8_IMAGE") ? resize(read_png(env("DYNADRAG_A8_IMAGE")), 512, 512)
                                       : textured(512, 9, 16);
    s.pairs = {PointPair::from_user({200, 256}, {280, 256})};
    s.mask = MaskImage::full(512, 512);
    s.backend = make_backend({"ldm", weights, 512, 0});
    s.predictor = make_predictor(predictor);
    const auto result = run_edit(s);
    const auto& pair = result.pairs.at(0);
    const double before = distance(pair.history.front(), pair.target);
    const double after = pair.remaining_distance();
    c.expect(after < before, "distance " + fmt(before) + " -> " + fmt(after));
    std::set<std::pair<double, double>> distinct;
    for (const auto& r : result.trace.records) distinct.insert({r.handle_positions[0].x, r.handle_positions[0].y});
    c.expect(distinct.size() >= 2, std::to_string(distinct.size()) + " distinct intermediate positions");
    return c.outcome(std::to_string(result.trace.records.size()) + " iterations, distance " + fmt(before) + " -> " + fmt(after) +
                     ", " + std::to_string(distinct.size()) + " distinct positions");
}

}  // namespace

int main(int argc, char** argv) {
    log::set_level(log::Level::Error);
    std::set<std::string> only;
    for (int i = 1; i < argc; ++i) only.insert(argv[i]);
    std::vector<std::string> skipped;

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"A1", a1_motion_supervision},
        {"A2", a2_loop_convergence},
        {"A3", a3_predictor_training},
        {"A4", a4_selection},
        {"A5", a5_dataset},
        {"A6", [&] { return a6_backend(skipped); }},
        {"A7", a7_eval},
        {"A8", a8_end_to_end},
    };
    int failed = 0;
    for (const auto& [name, run] : criteria) {
        if (!only.empty() && !only.contains(name)) continue;
        Outcome out;
        try {
            out = run();
        } catch (const std::exception& e) {
            out = {Verdict::Fail, std::string("threw: ") + e.what()};
        }
        const char* label = out.verdict == Verdict::Pass ? "PASS" : out.verdict == Verdict::Fail ? "FAIL" : "SKIP";
        if (out.verdict == Verdict::Fail) ++failed;
        std::cout << name << " " << label << "  " << out.detail << std::endl;
    }
    for (const auto& s : skipped) std::cout << "  partial skip: " << s << std::endl;
    return failed == 0 ? 0 : 1;
}
