#include "dynadrag/motion_predictor.hpp"

#include "dynadrag/config.hpp"
#include "dynadrag/error.hpp"
#include "dynadrag/image_io.hpp"
#include "dynadrag/log.hpp"

#include <cmath>
#include <map>
#include <sstream>

namespace dynadrag {

EncodedInput encode_input(const RgbImage& image, std::span<const PointPair> pairs, int heatmap_radius,
                          std::optional<std::pair<int64_t, int64_t>> expected_size) {
    require(image.data.defined() && image.data.dim() == 3 && image.data.size(0) == 3,
            "encode_input: image must be [3, H, W]", ErrorKind::Encoding);
    require(heatmap_radius >= 0, "encode_input: heatmap_radius must be non-negative");
    const int64_t h = image.height();
    const int64_t w = image.width();
    if (expected_size && (expected_size->first != h || expected_size->second != w)) {
        fail(ErrorKind::Encoding, c10::str("encode_input: image is ", h, "x", w, " but the session is ",
                                           expected_size->first, "x", expected_size->second));
    }

    auto data = torch::zeros({kEncodedChannels, h, w}, torch::kFloat32);
    data.slice(0, 0, 3).copy_(image.data.to(torch::kFloat32).clamp(0.0, 1.0));
    auto acc = data.accessor<float, 3>();

    std::map<PixelIndex, size_t> written;
    for (size_t i = 0; i < pairs.size(); ++i) {
        const PointPair& pair = pairs[i];
        if (!pair.valid) continue;
        require(in_bounds(pair.handle, w, h), c10::str("encode_input: handle ", i, " lies outside the image"));
        const PixelIndex px = round_to_pixel(pair.handle);
        if (auto it = written.find(px); it != written.end()) {
            log::warn("encode_input: handles ", it->second, " and ", i, " round to pixel (", px.x, ", ", px.y,
                      "); keeping handle ", i);
        }
        written[px] = i;
        acc[3][px.y][px.x] = static_cast<float>(pair.handle.x - pair.target.x);
        acc[4][px.y][px.x] = static_cast<float>(pair.handle.y - pair.target.y);
        for (const PixelIndex& q : chebyshev_neighborhood(pair.handle, heatmap_radius, w, h)) acc[5][q.y][q.x] = 1.0F;
    }
    return {data};
}

// ---------------------------------------------------------------------------------------------

int64_t PredictorConfig::total_stride() const {
    int64_t s = 1;
    for (int64_t i = 0; i < n_s; ++i)
        if (i % 2 == 1) s *= 2;
    return s;
}

void PredictorConfig::validate() const {
    require(in_channels > 0 && out_channels > 0, "predictor: channel counts must be positive");
    require(hid_s > 0 && hid_t > 0 && hid_t % 2 == 0, "predictor: hid_s must be positive and hid_t positive and even");
    require(n_s >= 2, "predictor: n_s must be >= 2");
    require(n_t >= 2, "predictor: n_t must be >= 2");
    require(groups >= 1, "predictor: groups must be >= 1");
    require(!incep_ker.empty(), "predictor: incep_ker must not be empty");
    for (int64_t k : incep_ker) require(k > 0 && k % 2 == 1, "predictor: inception kernels must be odd");
    require(hid_s % 2 == 0, "predictor: hid_s must be even (GroupNorm with 2 groups)");
}

PredictorConfig parse_predictor_config(const std::string& text) {
    PredictorConfig cfg;
    for (const auto& [key, value] : parse_key_values(text)) {
        auto as_int = [&] { return static_cast<int64_t>(std::stoll(value)); };
        if (key == "in_channels") cfg.in_channels = as_int();
        else if (key == "out_channels") cfg.out_channels = as_int();
        else if (key == "hid_s") cfg.hid_s = as_int();
        else if (key == "hid_t") cfg.hid_t = as_int();
        else if (key == "n_s") cfg.n_s = as_int();
        else if (key == "n_t") cfg.n_t = as_int();
        else if (key == "groups") cfg.groups = as_int();
        else if (key == "incep_ker") {
            cfg.incep_ker.clear();
            std::string list = value;
            for (char& c : list)
                if (c == '[' || c == ']' || c == ',') c = ' ';
            std::istringstream is(list);
            int64_t k = 0;
            while (is >> k) cfg.incep_ker.push_back(k);
        } else {
            fail(ErrorKind::InvalidArgument, "unknown predictor config key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

PredictorConfig load_predictor_config(const std::filesystem::path& path) { return parse_predictor_config(read_text(path)); }

std::string format_predictor_config(const PredictorConfig& cfg) {
    std::ostringstream os;
    os << "in_channels = " << cfg.in_channels << "\nout_channels = " << cfg.out_channels << "\nhid_s = " << cfg.hid_s
       << "\nhid_t = " << cfg.hid_t << "\nn_s = " << cfg.n_s << "\nn_t = " << cfg.n_t << "\ngroups = " << cfg.groups
       << "\nincep_ker = [";
    for (size_t i = 0; i < cfg.incep_ker.size(); ++i) os << (i ? ", " : "") << cfg.incep_ker[i];
    os << "]\n";
    return os.str();
}

// ---------------------------------------------------------------------------------------------

BasicConv2dImpl::BasicConv2dImpl(int64_t c_in, int64_t c_out, int64_t stride, bool transpose, bool act_norm)
    : transpose_(transpose && stride > 1), act_norm_(act_norm) {
    if (transpose_) {
        deconv_ = register_module(
            "conv", torch::nn::ConvTranspose2d(
                        torch::nn::ConvTranspose2dOptions(c_in, c_out, 3).stride(stride).padding(1).output_padding(stride / 2)));
    } else {
        conv_ = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(c_in, c_out, 3).stride(stride).padding(1)));
    }
    norm_ = register_module("norm", torch::nn::GroupNorm(2, c_out));
}

torch::Tensor BasicConv2dImpl::forward(const torch::Tensor& x) {
    auto y = transpose_ ? deconv_(x) : conv_(x);
    if (act_norm_) y = torch::leaky_relu(norm_(y), 0.2);
    return y;
}

GroupConv2dImpl::GroupConv2dImpl(int64_t c_in, int64_t c_out, int64_t kernel, int64_t groups, bool act_norm)
    : act_norm_(act_norm) {
    if (c_in % groups != 0 || c_out % groups != 0) groups = 1;
    conv_ = register_module(
        "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(c_in, c_out, kernel).padding(kernel / 2).groups(groups)));
    norm_ = register_module("norm", torch::nn::GroupNorm(groups, c_out));
}

torch::Tensor GroupConv2dImpl::forward(const torch::Tensor& x) {
    auto y = conv_(x);
    if (act_norm_) y = torch::leaky_relu(norm_(y), 0.2);
    return y;
}

InceptionImpl::InceptionImpl(int64_t c_in, int64_t c_hid, int64_t c_out, const std::vector<int64_t>& kernels, int64_t groups) {
    conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(c_in, c_hid, 1)));
    for (int64_t k : kernels) branches_->push_back(GroupConv2d(c_hid, c_out, k, groups, true));
    register_module("layers", branches_);
}

torch::Tensor InceptionImpl::forward(const torch::Tensor& x) {
    auto h = conv1_(x);
    torch::Tensor y;
    for (const auto& branch : *branches_) {
        auto b = branch->as<GroupConv2d>()->forward(h);
        y = y.defined() ? y + b : b;
    }
    return y;
}

FlowNetImpl::FlowNetImpl(const PredictorConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int64_t hs = cfg_.hid_s;
    const int64_t ht = cfg_.hid_t;

    // Encoder strides 1, 2, 1, 2, ...; the decoder mirrors them with transposed convolutions.
    std::vector<int64_t> strides;
    for (int64_t i = 0; i < cfg_.n_s; ++i) strides.push_back(i % 2 == 0 ? 1 : 2);

    enc_->push_back(BasicConv2d(cfg_.in_channels, hs, strides[0], false, true));
    for (size_t i = 1; i < strides.size(); ++i) enc_->push_back(BasicConv2d(hs, hs, strides[i], false, true));

    mid_enc_->push_back(Inception(hs, ht / 2, ht, cfg_.incep_ker, cfg_.groups));
    for (int64_t i = 1; i < cfg_.n_t; ++i) mid_enc_->push_back(Inception(ht, ht / 2, ht, cfg_.incep_ker, cfg_.groups));
    mid_dec_->push_back(Inception(ht, ht / 2, ht, cfg_.incep_ker, cfg_.groups));
    for (int64_t i = 1; i < cfg_.n_t - 1; ++i) mid_dec_->push_back(Inception(2 * ht, ht / 2, ht, cfg_.incep_ker, cfg_.groups));
    mid_dec_->push_back(Inception(2 * ht, ht / 2, hs, cfg_.incep_ker, cfg_.groups));

    std::vector<int64_t> rev(strides.rbegin(), strides.rend());
    for (size_t i = 0; i + 1 < rev.size(); ++i) dec_->push_back(BasicConv2d(hs, hs, rev[i], true, true));
    dec_->push_back(BasicConv2d(2 * hs, hs, rev.back(), true, true));
    readout_ = torch::nn::Conv2d(torch::nn::Conv2dOptions(hs, cfg_.out_channels, 1));

    register_module("enc", enc_);
    register_module("hid_enc", mid_enc_);
    register_module("hid_dec", mid_dec_);
    register_module("dec", dec_);
    register_module("readout", readout_);
}

torch::Tensor FlowNetImpl::forward(const torch::Tensor& x) {
    auto enc1 = enc_[0]->as<BasicConv2d>()->forward(x);
    auto z = enc1;
    for (size_t i = 1; i < enc_->size(); ++i) z = enc_[i]->as<BasicConv2d>()->forward(z);

    std::vector<torch::Tensor> skips;
    const size_t nt = mid_enc_->size();
    for (size_t i = 0; i < nt; ++i) {
        z = mid_enc_[i]->as<Inception>()->forward(z);
        if (i + 1 < nt) skips.push_back(z);
    }
    z = mid_dec_[0]->as<Inception>()->forward(z);
    for (size_t i = 1; i < nt; ++i) z = mid_dec_[i]->as<Inception>()->forward(torch::cat({z, skips[nt - 1 - i]}, 1));

    for (size_t i = 0; i + 1 < dec_->size(); ++i) z = dec_[i]->as<BasicConv2d>()->forward(z);
    z = dec_[dec_->size() - 1]->as<BasicConv2d>()->forward(torch::cat({z, enc1}, 1));
    return readout_(z);
}

// ---------------------------------------------------------------------------------------------

PredictorModel::PredictorModel(const PredictorConfig& cfg, uint64_t seed) {
    torch::manual_seed(seed);
    net_ = FlowNet(cfg);
}

const PredictorConfig& PredictorModel::config() const {
    require(initialized(), "predictor model is not initialized");
    return net_->config();
}

FlowNet& PredictorModel::net() {
    require(initialized(), "predictor model is not initialized");
    return net_;
}

const FlowNet& PredictorModel::net() const {
    require(initialized(), "predictor model is not initialized");
    return net_;
}

namespace {
constexpr const char* kCheckpointFormat = "dynadrag-motion-predictor";
constexpr int64_t kCheckpointVersion = 1;
}  // namespace

void PredictorModel::save(const std::filesystem::path& path) const {
    require(initialized(), "cannot save an uninitialized predictor model");
    torch::serialize::OutputArchive archive;
    archive.write("format", c10::IValue(std::string(kCheckpointFormat)));
    archive.write("version", c10::IValue(kCheckpointVersion));
    archive.write("config", c10::IValue(format_predictor_config(net_->config())));
    torch::serialize::OutputArchive weights;
    net_->save(weights);
    archive.write("weights", weights);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    archive.save_to(path.string());
}

PredictorModel PredictorModel::load(const std::filesystem::path& path) {
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error& e) {
        fail(ErrorKind::Io, "cannot read predictor checkpoint " + path.string());
    }
    c10::IValue format, version, config;
    archive.read("format", format);
    archive.read("version", version);
    archive.read("config", config);
    require(format.isString() && format.toStringRef() == kCheckpointFormat, "not a motion-predictor checkpoint: " + path.string());
    require(version.toInt() == kCheckpointVersion, c10::str("unsupported predictor checkpoint version ", version.toInt()));
    PredictorConfig cfg = parse_predictor_config(config.toStringRef());
    require(cfg.in_channels == kEncodedChannels,
            c10::str("predictor checkpoint expects ", cfg.in_channels, " input channels, this build encodes ", kEncodedChannels));
    require(cfg.out_channels == kFlowChannels, c10::str("predictor checkpoint outputs ", cfg.out_channels, " channels, expected 2"));
    PredictorModel model(cfg);
    torch::serialize::InputArchive weights;
    archive.read("weights", weights);
    model.net_->load(weights);
    model.net_->eval();
    return model;
}

FlowField predict_flow(const PredictorModel& model, const EncodedInput& input) {
    require(model.initialized(), "predict_flow: predictor model is not initialized");
    require(input.data.defined() && input.data.dim() == 3 && input.data.size(0) == kEncodedChannels,
            "predict_flow: input must be [6, H, W]");
    const int64_t stride = model.config().total_stride();
    if (input.height() % stride != 0 || input.width() % stride != 0) {
        fail(ErrorKind::InvalidArgument, c10::str("predict_flow: input ", input.height(), "x", input.width(),
                                                  " is not divisible by the encoder stride ", stride,
                                                  "; pad the image to a multiple of ", stride));
    }
    torch::NoGradGuard no_grad;
    auto net = model.net().ptr();
    if (net->is_training()) net->eval();
    auto out = net->forward(input.data.unsqueeze(0).to(torch::kFloat32));
    return {out.squeeze(0).contiguous()};
}

// ---------------------------------------------------------------------------------------------

TrainingBatch TrainingBatch::stack(std::span<const EncodedInput> inputs, std::span<const FlowField> targets) {
    require(!inputs.empty(), "training batch must not be empty");
    require(inputs.size() == targets.size(), "training batch: inputs and targets differ in length");
    std::vector<torch::Tensor> xs, ys;
    for (size_t i = 0; i < inputs.size(); ++i) {
        require(inputs[i].height() == targets[i].height() && inputs[i].width() == targets[i].width(),
                c10::str("training batch: sample ", i, " input and target sizes differ"));
        xs.push_back(inputs[i].data);
        ys.push_back(targets[i].data);
    }
    return {torch::stack(xs), torch::stack(ys)};
}

PredictorTrainer::PredictorTrainer(PredictorModel& model, TrainerOptions options) : model_(model), options_(options) {
    require(model.initialized(), "trainer: predictor model is not initialized");
    require(options.learning_rate > 0, "trainer: learning rate must be positive");
    auto params = model_.net()->parameters();
    if (options_.optimizer == TrainOptimizer::Adam) {
        optimizer_ = std::make_unique<torch::optim::Adam>(params, torch::optim::AdamOptions(options_.learning_rate));
    } else {
        optimizer_ = std::make_unique<torch::optim::SGD>(params, torch::optim::SGDOptions(options_.learning_rate));
    }
}

double PredictorTrainer::train_step(const TrainingBatch& batch) {
    require(batch.size() > 0, "train_step: empty batch");
    require(batch.targets.isfinite().all().item<bool>(), "train_step: targets contain non-finite values");
    auto net = model_.net().ptr();
    net->train();
    optimizer_->zero_grad();
    auto pred = net->forward(batch.inputs);
    auto loss = torch::mse_loss(pred, batch.targets);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
        auto per_sample = pred.detach().flatten(1);
        int64_t bad = 0;
        for (int64_t i = 0; i < per_sample.size(0); ++i) {
            if (!per_sample[i].isfinite().all().item<bool>() || !batch.inputs[i].isfinite().all().item<bool>()) {
                bad = i;
                break;
            }
        }
        const double max_in = batch.inputs[bad].abs().max().item<double>();
        const double max_out = pred[bad].detach().abs().max().item<double>();
        fail(ErrorKind::Numerical, c10::str("train_step: non-finite loss at batch index ", bad, " (max |input| = ", max_in,
                                            ", max |prediction| = ", max_out, ")"));
    }
    loss.backward();
    optimizer_->step();
    return value;
}

double PredictorTrainer::evaluate(const TrainingBatch& batch) const {
    torch::NoGradGuard no_grad;
    auto net = model_.net().ptr();
    net->eval();
    return torch::mse_loss(net->forward(batch.inputs), batch.targets).item<double>();
}

// ---------------------------------------------------------------------------------------------

FlowField ConstantFlowPredictor::predict(const EncodedInput& input) const {
    return FlowField::constant(input.height(), input.width(), step_);
}

std::string ConstantFlowPredictor::describe() const { return c10::str("constant:", step_.x, ",", step_.y); }

FlowField StraightLinePredictor::predict(const EncodedInput& input) const {
    const int64_t h = input.height();
    const int64_t w = input.width();
    auto flow = FlowField::zeros(h, w);
    auto in = input.data.to(torch::kFloat32).contiguous();
    auto a = in.accessor<float, 3>();
    auto f = flow.data.accessor<float, 3>();
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            const double dx = a[3][y][x];
            const double dy = a[4][y][x];
            const double d = std::hypot(dx, dy);
            if (d == 0.0) continue;
            const double s = std::min(1.0, step_ / d);
            // Fill a 3x3 block so bilinear lookups at sub-pixel handles see the full step.
            for (const PixelIndex& q : chebyshev_neighborhood({static_cast<double>(x), static_cast<double>(y)}, 1, w, h)) {
                f[0][q.y][q.x] = static_cast<float>(-dx * s);
                f[1][q.y][q.x] = static_cast<float>(-dy * s);
            }
        }
    }
    return flow;
}

std::string StraightLinePredictor::describe() const { return c10::str("straight:", step_); }

std::shared_ptr<const FlowPredictor> make_predictor(const std::string& spec) {
    if (spec.rfind("constant:", 0) == 0) {
        std::string rest = spec.substr(9);
        const auto comma = rest.find(',');
        require(comma != std::string::npos, "constant predictor spec must be constant:dx,dy");
        return std::make_shared<ConstantFlowPredictor>(Point{std::stod(rest.substr(0, comma)), std::stod(rest.substr(comma + 1))});
    }
    if (spec.rfind("straight:", 0) == 0) {
        const double step = std::stod(spec.substr(9));
        require(step > 0, "straight predictor step must be positive");
        return std::make_shared<StraightLinePredictor>(step);
    }
    return std::make_shared<NetworkPredictor>(PredictorModel::load(spec));
}

std::vector<PointPair> advance_handles(std::span<const PointPair> pairs, const FlowField& flow) {
    std::vector<PointPair> out(pairs.begin(), pairs.end());
    for (PointPair& p : out) {
        if (!p.valid) {
            p.advance_to(p.handle);
            continue;
        }
        const Point v = flow.at(p.handle);
        p.advance_to(clamp_to_bounds(p.handle + v, flow.width(), flow.height()));
    }
    return out;
}

}  // namespace dynadrag
