#include "rq/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#include "rq/error.hpp"
#include "rq/random.hpp"

namespace rq::nn {

namespace {

Matrix relu(const Matrix& m) { return m.cwiseMax(0.0); }

Matrix relu_mask(const Matrix& grad, const Matrix& pre) {
    return (pre.array() > 0.0).select(grad, 0.0);
}

Matrix affine(const Matrix& w, const Vector& b, const Matrix& x) {
    Matrix out(w.rows(), x.cols());
    out.noalias() = w * x;
    out.colwise() += b;
    return out;
}

void fill_uniform(Matrix& w, Vector& b, Rng& rng) {
    const double bound = 1.0 / std::sqrt(double(w.cols()));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = (2.0 * rng.uniform() - 1.0) * bound;
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = (2.0 * rng.uniform() - 1.0) * bound;
}

bool all_finite(const double* p, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Architecture

void Architecture::validate() const {
    if (input_dim <= 0 || hidden <= 0 || output_dim <= 0) throw ConfigError("layer widths must be positive");
    if (residual_blocks < 0) throw ConfigError("residual block count must be non-negative");
    if (attention_reduction <= 0) throw ConfigError("attention reduction must be positive");
    if (!(bn_eps > 0.0)) throw ConfigError("bn_eps must be positive");
    if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) throw ConfigError("bn_momentum must be in (0, 1]");
}

std::string Architecture::describe() const {
    std::ostringstream os;
    os.precision(17);
    os << "input=" << input_dim << " hidden=" << hidden << " blocks=" << residual_blocks
       << " reduction=" << attention_reduction << " output=" << output_dim << " bn_eps=" << bn_eps
       << " bn_momentum=" << bn_momentum;
    return os.str();
}

Architecture Architecture::parse(const std::string& text) {
    Architecture a;
    std::istringstream is(text);
    std::string tok;
    int seen = 0;
    while (is >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw SchemaError("bad architecture token: " + tok);
        const auto key = tok.substr(0, eq);
        const auto val = tok.substr(eq + 1);
        try {
            if (key == "input") a.input_dim = std::stoi(val);
            else if (key == "hidden") a.hidden = std::stoi(val);
            else if (key == "blocks") a.residual_blocks = std::stoi(val);
            else if (key == "reduction") a.attention_reduction = std::stoi(val);
            else if (key == "output") a.output_dim = std::stoi(val);
            else if (key == "bn_eps") a.bn_eps = std::stod(val);
            else if (key == "bn_momentum") a.bn_momentum = std::stod(val);
            else throw SchemaError("unknown architecture key: " + key);
        } catch (const std::logic_error&) {
            throw SchemaError("bad architecture value: " + tok);
        }
        ++seen;
    }
    if (seen != 7) throw SchemaError("architecture descriptor is incomplete");
    try {
        a.validate();
    } catch (const ConfigError& e) {
        throw SchemaError(e.what());
    }
    return a;
}

// ---------------------------------------------------------------------------
// Parameters

ModelParams ModelParams::zeros(const Architecture& arch) {
    arch.validate();
    const int d = arch.input_dim, h = arch.hidden, g = arch.gate_dim(), o = arch.output_dim;
    ModelParams p;
    p.arch = arch;
    p.bn_gamma = Vector::Ones(d);
    p.bn_beta = Vector::Zero(d);
    p.bn_mean = Vector::Zero(d);
    p.bn_var = Vector::Ones(d);
    p.w_in = Matrix::Zero(h, d);
    p.b_in = Vector::Zero(h);
    p.w_gate1 = Matrix::Zero(g, h);
    p.b_gate1 = Vector::Zero(g);
    p.w_gate2 = Matrix::Zero(h, g);
    p.b_gate2 = Vector::Zero(h);
    p.blocks.resize(std::size_t(arch.residual_blocks));
    for (auto& b : p.blocks) b = {Matrix::Zero(h, h), Vector::Zero(h), Matrix::Zero(h, h), Vector::Zero(h)};
    p.w_out = Matrix::Zero(o, h);
    p.b_out = Vector::Zero(o);
    p.out_scale = Vector::Ones(o);
    return p;
}

ModelParams ModelParams::init(const Architecture& arch, std::uint64_t seed) {
    ModelParams p = zeros(arch);
    Rng rng(seed);
    fill_uniform(p.w_in, p.b_in, rng);
    fill_uniform(p.w_gate1, p.b_gate1, rng);
    fill_uniform(p.w_gate2, p.b_gate2, rng);
    for (auto& b : p.blocks) {
        fill_uniform(b.w1, b.b1, rng);
        fill_uniform(b.w2, b.b2, rng);
    }
    fill_uniform(p.w_out, p.b_out, rng);
    return p;
}

std::vector<ModelParams::View> ModelParams::views() {
    std::vector<View> v;
    auto add = [&](const char* name, auto& t, bool trainable) { v.push_back({name, t.data(), t.size(), trainable}); };
    add("bn.gamma", bn_gamma, true);
    add("bn.beta", bn_beta, true);
    add("bn.running_mean", bn_mean, false);
    add("bn.running_var", bn_var, false);
    add("fc_in.w", w_in, true);
    add("fc_in.b", b_in, true);
    add("gate1.w", w_gate1, true);
    add("gate1.b", b_gate1, true);
    add("gate2.w", w_gate2, true);
    add("gate2.b", b_gate2, true);
    for (auto& b : blocks) {
        add("block.w1", b.w1, true);
        add("block.b1", b.b1, true);
        add("block.w2", b.w2, true);
        add("block.b2", b.b2, true);
    }
    add("head.w", w_out, true);
    add("head.b", b_out, true);
    add("head.scale", out_scale, false);
    return v;
}

std::vector<ModelParams::View> ModelParams::trainable_views() {
    auto all = views();
    std::erase_if(all, [](const View& v) { return !v.trainable; });
    return all;
}

std::size_t ModelParams::trainable_count() const {
    std::size_t n = 0;
    for (const auto& v : const_cast<ModelParams*>(this)->trainable_views()) n += std::size_t(v.size);
    return n;
}

void ModelParams::validate() const {
    const auto ref = zeros(arch);
    auto self = const_cast<ModelParams*>(this)->views();
    auto want = const_cast<ModelParams&>(ref).views();
    if (self.size() != want.size()) throw ShapeError("tensor count does not match the architecture");
    for (std::size_t i = 0; i < self.size(); ++i) {
        if (self[i].size != want[i].size)
            throw ShapeError(std::string("tensor ") + self[i].name + " has the wrong size");
        if (!all_finite(self[i].data, self[i].size))
            throw NumericError(std::string("tensor ") + self[i].name + " is not finite");
    }
    if ((bn_var.array() <= 0.0).any()) throw NumericError("running variance must be positive");
}

// ---------------------------------------------------------------------------
// Forward

Matrix forward(ModelParams& p, const Matrix& x, Mode mode, ForwardCache* cache) {
    const auto& a = p.arch;
    if (x.rows() != a.input_dim)
        throw ShapeError("input has " + std::to_string(x.rows()) + " rows, expected " + std::to_string(a.input_dim));
    if (x.cols() < 1) throw ShapeError("empty batch");
    if (mode == Mode::kEval) return forward_eval(p, x);

    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    const double n = double(x.cols());
    const Vector mu = x.rowwise().mean();
    Matrix centered = x.colwise() - mu;
    const Vector var = centered.array().square().rowwise().sum() / n;
    c.inv_std = (var.array() + a.bn_eps).rsqrt();
    c.xhat = centered.array().colwise() * c.inv_std.array();
    c.bn_out = (c.xhat.array().colwise() * p.bn_gamma.array()).colwise() + p.bn_beta.array();

    const double m = a.bn_momentum;
    const Vector unbiased = x.cols() > 1 ? Vector(var * (n / (n - 1.0))) : var;
    p.bn_mean = (1.0 - m) * p.bn_mean + m * mu;
    p.bn_var = (1.0 - m) * p.bn_var + m * unbiased;

    c.fc_pre = affine(p.w_in, p.b_in, c.bn_out);
    c.fc_out = relu(c.fc_pre);
    c.gate_hidden_pre = affine(p.w_gate1, p.b_gate1, c.fc_out);
    c.gate_hidden = relu(c.gate_hidden_pre);
    c.gate = affine(p.w_gate2, p.b_gate2, c.gate_hidden).unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    c.gated = c.fc_out.cwiseProduct(c.gate);

    c.blocks.resize(p.blocks.size());
    Matrix h = c.gated;
    for (std::size_t k = 0; k < p.blocks.size(); ++k) {
        auto& bc = c.blocks[k];
        const auto& blk = p.blocks[k];
        bc.hidden_pre = affine(blk.w1, blk.b1, h);
        bc.hidden = relu(bc.hidden_pre);
        Matrix out = h + affine(blk.w2, blk.b2, bc.hidden);
        bc.input = std::move(h);
        h = std::move(out);
    }
    c.trunk = std::move(h);

    c.x = x;
    c.version = p.version;
    c.valid = true;
    Matrix y = affine(p.w_out, p.b_out, c.trunk);
    y.array().colwise() *= p.out_scale.array();
    return y;
}

Matrix forward_eval(const ModelParams& p, const Matrix& x) {
    const auto& a = p.arch;
    if (x.rows() != a.input_dim)
        throw ShapeError("input has " + std::to_string(x.rows()) + " rows, expected " + std::to_string(a.input_dim));
    const Vector scale = p.bn_gamma.array() * (p.bn_var.array() + a.bn_eps).rsqrt();
    const Vector shift = p.bn_beta.array() - p.bn_mean.array() * scale.array();
    Matrix h0 = (x.array().colwise() * scale.array()).colwise() + shift.array();
    Matrix h = relu(affine(p.w_in, p.b_in, h0));
    const Matrix g = affine(p.w_gate2, p.b_gate2, relu(affine(p.w_gate1, p.b_gate1, h)))
                         .unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    h = h.cwiseProduct(g);
    for (const auto& blk : p.blocks) h += affine(blk.w2, blk.b2, relu(affine(blk.w1, blk.b1, h)));
    Matrix y = affine(p.w_out, p.b_out, h);
    y.array().colwise() *= p.out_scale.array();
    return y;
}

// ---------------------------------------------------------------------------
// Backward

Gradients backward(const ModelParams& p, const ForwardCache& c, const Matrix& upstream) {
    if (!c.valid) throw StateError("backward needs a cache from a train-mode forward");
    if (c.version != p.version) throw StateError("parameters changed since the forward pass");
    if (upstream.rows() != p.arch.output_dim || upstream.cols() != c.x.cols())
        throw ShapeError("upstream gradient shape does not match the forward output");

    Gradients g{ModelParams::zeros(p.arch), Matrix()};
    auto& gp = g.params;

    const Matrix d_head = upstream.array().colwise() * p.out_scale.array();
    gp.w_out.noalias() = d_head * c.trunk.transpose();
    gp.b_out = d_head.rowwise().sum();
    Matrix d_h(p.arch.hidden, c.x.cols());
    d_h.noalias() = p.w_out.transpose() * d_head;

    for (std::size_t k = p.blocks.size(); k-- > 0;) {
        const auto& blk = p.blocks[k];
        const auto& bc = c.blocks[k];
        auto& gb = gp.blocks[k];
        gb.w2.noalias() = d_h * bc.hidden.transpose();
        gb.b2 = d_h.rowwise().sum();
        const Matrix d_pre = relu_mask(blk.w2.transpose() * d_h, bc.hidden_pre);
        gb.w1.noalias() = d_pre * bc.input.transpose();
        gb.b1 = d_pre.rowwise().sum();
        d_h.noalias() += blk.w1.transpose() * d_pre;
    }

    // gated = fc_out * gate
    Matrix d_fc = d_h.cwiseProduct(c.gate);
    const Matrix d_gate_pre = d_h.cwiseProduct(c.fc_out).cwiseProduct(c.gate.cwiseProduct((1.0 - c.gate.array()).matrix()));
    gp.w_gate2.noalias() = d_gate_pre * c.gate_hidden.transpose();
    gp.b_gate2 = d_gate_pre.rowwise().sum();
    const Matrix d_gh_pre = relu_mask(p.w_gate2.transpose() * d_gate_pre, c.gate_hidden_pre);
    gp.w_gate1.noalias() = d_gh_pre * c.fc_out.transpose();
    gp.b_gate1 = d_gh_pre.rowwise().sum();
    d_fc.noalias() += p.w_gate1.transpose() * d_gh_pre;

    const Matrix d_fc_pre = relu_mask(d_fc, c.fc_pre);
    gp.w_in.noalias() = d_fc_pre * c.bn_out.transpose();
    gp.b_in = d_fc_pre.rowwise().sum();
    Matrix d_bn(p.arch.input_dim, c.x.cols());
    d_bn.noalias() = p.w_in.transpose() * d_fc_pre;

    gp.bn_gamma = d_bn.cwiseProduct(c.xhat).rowwise().sum();
    gp.bn_beta = d_bn.rowwise().sum();
    const double n = double(c.x.cols());
    const Matrix d_xhat = d_bn.array().colwise() * p.bn_gamma.array();
    const Vector sum_d = d_xhat.rowwise().sum();
    const Vector sum_dx = d_xhat.cwiseProduct(c.xhat).rowwise().sum();
    Matrix dx = (n * d_xhat.array()).colwise() - sum_d.array();
    dx -= (c.xhat.array().colwise() * sum_dx.array()).matrix();
    dx.array().colwise() *= (c.inv_std.array() / n);
    g.input = std::move(dx);
    return g;
}

// ---------------------------------------------------------------------------
// Optimizer

AdamState AdamState::for_params(const ModelParams& params) {
    AdamState s{ModelParams::zeros(params.arch), ModelParams::zeros(params.arch), 0};
    for (auto* p : {&s.m, &s.v})
        for (auto& view : p->views()) std::fill(view.data, view.data + view.size, 0.0);
    return s;
}

void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const AdamConfig& cfg) {
    auto pv = params.trainable_views();
    auto gv = const_cast<ModelParams&>(grads).trainable_views();
    auto mv = state.m.trainable_views();
    auto vv = state.v.trainable_views();
    if (gv.size() != pv.size() || mv.size() != pv.size() || vv.size() != pv.size())
        throw ShapeError("optimizer state does not match the parameters");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    for (std::size_t t = 0; t < pv.size(); ++t) {
        if (gv[t].size != pv[t].size || mv[t].size != pv[t].size || vv[t].size != pv[t].size)
            throw ShapeError(std::string("optimizer state mismatch at ") + pv[t].name);
        double* w = pv[t].data;
        const double* g = gv[t].data;
        double* m = mv[t].data;
        double* v = vv[t].data;
        for (Eigen::Index i = 0; i < pv[t].size; ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            w[i] -= cfg.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
        }
    }
    params.touch();
}

// ---------------------------------------------------------------------------
// Loss

void LossConfig::validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be positive");
}

LossResult curve_loss(const Matrix& pred, const Matrix& truth, const LossConfig& cfg) {
    cfg.validate();
    const auto k = Eigen::Index(CrfGrid::kCount);
    if (pred.rows() != 2 * k || truth.rows() != 2 * k || pred.cols() != truth.cols() || pred.cols() < 1)
        throw ShapeError("loss needs matching 202 x batch matrices");
    if (!pred.allFinite() || !truth.allFinite()) throw NumericError("loss input is not finite");
    const double b = double(pred.cols());
    LossResult r;
    r.grad.resize(pred.rows(), pred.cols());
    const auto dv = pred.topRows(k) - truth.topRows(k);
    r.grad.topRows(k) = (2.0 / b) * dv;
    double total = dv.squaredNorm();
    if (!cfg.log_domain) {
        const auto dr = pred.bottomRows(k) - truth.bottomRows(k);
        total += cfg.lambda * dr.squaredNorm();
        r.grad.bottomRows(k) = (2.0 * cfg.lambda / b) * dr;
    } else {
        for (Eigen::Index j = 0; j < pred.cols(); ++j)
            for (Eigen::Index i = k; i < 2 * k; ++i) {
                const double p = pred(i, j);
                const double clamped = std::max(p, kBitrateFloorKbps);
                const double d = std::log(clamped) - std::log(std::max(truth(i, j), kBitrateFloorKbps));
                total += d * d;
                r.grad(i, j) = p > kBitrateFloorKbps ? 2.0 * d / (b * p) : 0.0;
            }
    }
    r.value = total / b;
    return r;
}

Matrix to_matrix(std::span<const RateQualityCurve> curves) {
    Matrix m(Eigen::Index(kCurveWidth), Eigen::Index(curves.size()));
    for (std::size_t j = 0; j < curves.size(); ++j) {
        const auto flat = curves[j].flatten();
        m.col(Eigen::Index(j)) = Eigen::Map<const Vector>(flat.data(), Eigen::Index(flat.size()));
    }
    return m;
}

std::vector<RateQualityCurve> from_matrix(const Matrix& m) {
    if (m.rows() != Eigen::Index(kCurveWidth)) throw ShapeError("curve matrix must have 202 rows");
    std::vector<RateQualityCurve> out;
    out.reserve(std::size_t(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        out.push_back(RateQualityCurve::from_flat(std::span<const double>(m.col(j).data(), std::size_t(m.rows()))));
    return out;
}

double curve_loss(std::span<const RateQualityCurve> pred, std::span<const RateQualityCurve> truth, const LossConfig& cfg) {
    if (pred.size() != truth.size()) throw ShapeError("loss needs matching batch sizes");
    return curve_loss(to_matrix(pred), to_matrix(truth), cfg).value;
}

// ---------------------------------------------------------------------------
// Model file

namespace {

constexpr const char* kModelMagic = "rq-model";

void put_f64(std::ostream& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

double get_f64(std::istream& in) {
    std::uint64_t bits = 0;
    in.read(reinterpret_cast<char*>(&bits), sizeof bits);
    if (in.gcount() != sizeof bits) throw IoError("model file ends inside the tensor data");
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    return std::bit_cast<double>(bits);
}

std::string header_value(std::istream& in, const std::string& key, std::size_t line) {
    std::string text;
    if (!std::getline(in, text)) throw IoError("model header ends early", line);
    if (text.rfind(key + " ", 0) != 0 && text != key) throw IoError("expected '" + key + "' in model header", line);
    return text.size() > key.size() ? text.substr(key.size() + 1) : std::string();
}

}  // namespace

void write_model(std::ostream& out, const ModelParams& params, const ModelHeader& header) {
    params.validate();
    if (header.schema_tag.find('\n') != std::string::npos || header.flags.find('\n') != std::string::npos)
        throw ConfigError("model header fields must be single-line");
    auto views = const_cast<ModelParams&>(params).views();
    out << kModelMagic << ' ' << kModelFormatVersion << '\n';
    out << "arch " << params.arch.describe() << '\n';
    out << "schema " << header.schema_tag << '\n';
    out << "flags " << header.flags << '\n';
    out << "tensors " << views.size() << '\n';
    out << "end\n";
    for (const auto& v : views)
        for (Eigen::Index i = 0; i < v.size; ++i) put_f64(out, v.data[i]);
    if (!out) throw IoError("failed writing model");
}

ModelParams read_model(std::istream& in, ModelHeader* header_out, const std::optional<ModelHeader>& expect) {
    const auto version = header_value(in, kModelMagic, 1);
    if (version != std::to_string(kModelFormatVersion))
        throw SchemaError("unsupported model format version '" + version + "'");
    const auto arch = Architecture::parse(header_value(in, "arch", 2));
    ModelHeader header;
    header.schema_tag = header_value(in, "schema", 3);
    header.flags = header_value(in, "flags", 4);
    const auto count = header_value(in, "tensors", 5);
    header_value(in, "end", 6);
    if (expect) {
        if (expect->schema_tag != header.schema_tag)
            throw SchemaError("model feature schema '" + header.schema_tag + "' does not match '" + expect->schema_tag + "'");
        if (expect->flags != header.flags)
            throw SchemaError("model flags '" + header.flags + "' do not match '" + expect->flags + "'");
    }
    ModelParams p = ModelParams::zeros(arch);
    auto views = p.views();
    if (count != std::to_string(views.size())) throw SchemaError("tensor count does not match the architecture");
    for (auto& v : views)
        for (Eigen::Index i = 0; i < v.size; ++i) v.data[i] = get_f64(in);
    p.validate();
    if (header_out) *header_out = header;
    return p;
}

}  // namespace rq::nn
