#include "rq/pipeline.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "rq/error.hpp"
#include "rq/random.hpp"

namespace rq {

using nn::Matrix;
using nn::Vector;

// ---------------------------------------------------------------------------
// Names

std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::kFull: return "full";
        case Ablation::kNoAnchorFeatures: return "no_anchor_features";
        case Ablation::kNoSuspension: return "no_suspension";
        case Ablation::kNoEnd2End: return "no_end2end";
    }
    return "?";
}

std::string to_string(SuspensionMode m) {
    return m == SuspensionMode::kAdditive ? "additive" : "multiplicative-bitrate";
}

Ablation parse_ablation(const std::string& s) {
    for (auto a : kAllAblations)
        if (to_string(a) == s) return a;
    throw ConfigError("unknown ablation '" + s + "' (full, no_anchor_features, no_suspension, no_end2end)");
}

SuspensionMode parse_suspension_mode(const std::string& s) {
    if (s == "additive") return SuspensionMode::kAdditive;
    if (s == "multiplicative-bitrate") return SuspensionMode::kMultiplicativeBitrate;
    throw ConfigError("unknown suspension mode '" + s + "' (additive, multiplicative-bitrate)");
}

// ---------------------------------------------------------------------------
// Config

namespace {

std::string fmt(double v) { return format_number(v); }

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("'" + key + "' must be true or false, got '" + v + "'");
}

}  // namespace

void PredictorConfig::validate() const {
    if (!CrfGrid::on_grid(anchor_crf)) throw ConfigError("anchor_crf " + fmt(anchor_crf) + " is not on the CRF grid");
    loss.validate();
    const auto& t = train;
    if (t.epochs < 1) throw ConfigError("epochs must be at least 1");
    if (t.batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(t.adam.lr > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(t.adam.beta1 >= 0.0 && t.adam.beta1 < 1.0) || !(t.adam.beta2 >= 0.0 && t.adam.beta2 < 1.0))
        throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(t.adam.eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (t.hidden < 1 || t.residual_blocks < 0 || t.attention_reduction < 1)
        throw ConfigError("invalid network shape");
}

std::vector<std::string> PredictorConfig::known_keys() {
    return {"anchor_crf",      "ablation",   "suspension",      "lambda",      "log_domain_bitrate",
            "epochs",          "batch_size", "learning_rate",   "beta1",       "beta2",
            "adam_eps",        "cosine_decay", "hidden",        "residual_blocks", "attention_reduction",
            "zero_init_residual_head"};
}

KeyValueConfig PredictorConfig::to_kv() const {
    KeyValueConfig kv;
    kv.set("anchor_crf", fmt(anchor_crf));
    kv.set("ablation", to_string(ablation));
    kv.set("suspension", to_string(suspension));
    kv.set("lambda", fmt(loss.lambda));
    kv.set("log_domain_bitrate", loss.log_domain ? "true" : "false");
    kv.set("epochs", std::to_string(train.epochs));
    kv.set("batch_size", std::to_string(train.batch_size));
    kv.set("learning_rate", fmt(train.adam.lr));
    kv.set("beta1", fmt(train.adam.beta1));
    kv.set("beta2", fmt(train.adam.beta2));
    kv.set("adam_eps", fmt(train.adam.eps));
    kv.set("cosine_decay", train.cosine_decay ? "true" : "false");
    kv.set("hidden", std::to_string(train.hidden));
    kv.set("residual_blocks", std::to_string(train.residual_blocks));
    kv.set("attention_reduction", std::to_string(train.attention_reduction));
    kv.set("zero_init_residual_head", train.zero_init_residual_head ? "true" : "false");
    return kv;
}

PredictorConfig PredictorConfig::from_kv(const KeyValueConfig& kv) {
    const auto unknown = kv.unknown_keys(known_keys());
    if (!unknown.empty()) throw ConfigError("unknown config key '" + unknown.front() + "'");
    PredictorConfig c;
    c.anchor_crf = kv.get_double("anchor_crf", c.anchor_crf);
    if (auto v = kv.get("ablation")) c.ablation = parse_ablation(*v);
    if (auto v = kv.get("suspension")) c.suspension = parse_suspension_mode(*v);
    c.loss.lambda = kv.get_double("lambda", c.loss.lambda);
    if (auto v = kv.get("log_domain_bitrate")) c.loss.log_domain = parse_bool("log_domain_bitrate", *v);
    c.train.epochs = int(kv.get_int("epochs", c.train.epochs));
    c.train.batch_size = int(kv.get_int("batch_size", c.train.batch_size));
    c.train.adam.lr = kv.get_double("learning_rate", c.train.adam.lr);
    c.train.adam.beta1 = kv.get_double("beta1", c.train.adam.beta1);
    c.train.adam.beta2 = kv.get_double("beta2", c.train.adam.beta2);
    c.train.adam.eps = kv.get_double("adam_eps", c.train.adam.eps);
    if (auto v = kv.get("cosine_decay")) c.train.cosine_decay = parse_bool("cosine_decay", *v);
    c.train.hidden = int(kv.get_int("hidden", c.train.hidden));
    c.train.residual_blocks = int(kv.get_int("residual_blocks", c.train.residual_blocks));
    c.train.attention_reduction = int(kv.get_int("attention_reduction", c.train.attention_reduction));
    if (auto v = kv.get("zero_init_residual_head"))
        c.train.zero_init_residual_head = parse_bool("zero_init_residual_head", *v);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Suspension

namespace {

constexpr Eigen::Index kK = Eigen::Index(CrfGrid::kCount);

}  // namespace

Matrix suspend(const Matrix& pred, const Matrix& anchors, std::size_t index, SuspensionMode mode) {
    if (pred.rows() != Eigen::Index(kCurveWidth) || anchors.rows() != 2 || anchors.cols() != pred.cols())
        throw ShapeError("suspension needs a 202 x batch curve matrix and 2 x batch anchors");
    if (index >= CrfGrid::kCount) throw BoundsError("anchor index out of range");
    const auto a = Eigen::Index(index);
    Matrix out = pred;
    for (Eigen::Index j = 0; j < pred.cols(); ++j) {
        const double anchor_bitrate = anchors(0, j), anchor_vmaf = anchors(1, j);
        out.col(j).head(kK).array() += anchor_vmaf - pred(a, j);
        out(a, j) = anchor_vmaf;
        if (mode == SuspensionMode::kAdditive) {
            out.col(j).tail(kK).array() += anchor_bitrate - pred(kK + a, j);
        } else {
            const double base = pred(kK + a, j);
            if (!(base >= kBitrateFloorKbps))
                throw NumericError("degenerate anchor: predicted bitrate " + fmt(base) + " kbps at the anchor CRF");
            out.col(j).tail(kK) *= anchor_bitrate / base;
        }
        out(kK + a, j) = anchor_bitrate;
    }
    return out;
}

Matrix suspend_backward(const Matrix& upstream, const Matrix& pred, const Matrix& anchors, std::size_t index,
                        SuspensionMode mode) {
    if (upstream.rows() != Eigen::Index(kCurveWidth)) throw ShapeError("suspension gradient needs 202 rows");
    const auto a = Eigen::Index(index);
    Matrix g = upstream;
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
        g(a, j) = upstream(a, j) - upstream.col(j).head(kK).sum();
        if (mode == SuspensionMode::kAdditive) {
            g(kK + a, j) = upstream(kK + a, j) - upstream.col(j).tail(kK).sum();
        } else {
            const double base = pred(kK + a, j);
            const double ratio = anchors(0, j) / base;
            const double dot = upstream.col(j).tail(kK).dot(pred.col(j).tail(kK));
            g.col(j).tail(kK) = upstream.col(j).tail(kK) * ratio;
            g(kK + a, j) = upstream(kK + a, j) * ratio - dot * ratio / base;
        }
    }
    return g;
}

RateQualityCurve suspend(const RateQualityCurve& pred, const AnchorPoint& anchor, SuspensionMode mode) {
    const auto idx = anchor.index();
    const std::vector<RateQualityCurve> one{pred};
    Matrix a(2, 1);
    a << anchor.bitrate, anchor.vmaf;
    return RateQualityCurve::from_flat(std::span<const double>(suspend(nn::to_matrix(one), a, idx, mode).data(),
                                                               kCurveWidth));
}

std::vector<double> suspend_backward(std::span<const double> upstream, std::span<const double> pred,
                                     const AnchorPoint& anchor, SuspensionMode mode) {
    if (upstream.size() != kCurveWidth || pred.size() != kCurveWidth)
        throw ShapeError("suspension gradient needs 202 entries");
    const Matrix u = Eigen::Map<const Matrix>(upstream.data(), Eigen::Index(kCurveWidth), 1);
    const Matrix p = Eigen::Map<const Matrix>(pred.data(), Eigen::Index(kCurveWidth), 1);
    Matrix a(2, 1);
    a << anchor.bitrate, anchor.vmaf;
    const Matrix g = suspend_backward(u, p, a, anchor.index(), mode);
    return {g.data(), g.data() + g.size()};
}

// ---------------------------------------------------------------------------
// Feature files

FeatureSchema FeatureSchema::standard() {
    return {"codec-x264-v1", 113, "content-v1", 65, 2};
}

std::string FeatureSchema::tag() const {
    return codec_tag + ":" + std::to_string(codec_dim) + "+" + content_tag + ":" + std::to_string(content_dim) +
           "+anchor:" + std::to_string(anchor_dim);
}

bool Dataset::labeled() const {
    if (records.empty()) return false;
    for (const auto& r : records)
        if (!r.truth) return false;
    return true;
}

void Dataset::validate() const {
    for (const auto& r : records) {
        if (r.features.codec.size() != schema.codec_dim || r.features.content.size() != schema.content_dim ||
            r.features.anchor.size() != schema.anchor_dim)
            throw SchemaError("record '" + r.id + "' does not match feature schema " + schema.tag());
    }
}

namespace {

constexpr const char* kFeatureMagic = "#rq-features";

void put_segment(std::ostream& out, std::span<const double> v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out << ',';
        out << fmt(v[i]);
    }
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        parts.push_back(s.substr(start, pos - start));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return parts;
}

std::vector<double> parse_segment(const std::string& text, std::size_t expected, const char* what, std::size_t line) {
    std::vector<double> out;
    if (expected == 0 && text.empty()) return out;
    out.reserve(expected);
    const char* p = text.data();
    const char* end = p + text.size();
    while (p <= end) {
        double v = 0.0;
        const auto [next, ec] = std::from_chars(p, end, v);
        if (ec != std::errc() || !std::isfinite(v)) throw IoError(std::string("malformed number in ") + what, line);
        out.push_back(v);
        if (next == end) break;
        if (*next != ',') throw IoError(std::string("malformed number in ") + what, line);
        p = next + 1;
    }
    if (out.size() != expected)
        throw IoError(std::string(what) + " has " + std::to_string(out.size()) + " entries, header says " +
                          std::to_string(expected),
                      line);
    return out;
}

std::size_t header_size(const std::string& value, const std::string& key, std::string* tag) {
    const auto colon = value.rfind(':');
    try {
        if (tag) {
            if (colon == std::string::npos) throw std::invalid_argument(key);
            *tag = value.substr(0, colon);
            return std::stoul(value.substr(colon + 1));
        }
        return std::stoul(value);
    } catch (const std::logic_error&) {
        throw IoError("bad '" + key + "' in feature header", 1);
    }
}

}  // namespace

void write_feature_file(std::ostream& out, const Dataset& data) {
    data.validate();
    const bool labels = data.labeled();
    const auto& s = data.schema;
    out << kFeatureMagic << ' ' << kFeatureFileVersion << " codec=" << s.codec_tag << ':' << s.codec_dim
        << " content=" << s.content_tag << ':' << s.content_dim << " anchor=" << s.anchor_dim
        << " labels=" << (labels ? 1 : 0) << '\n';
    for (const auto& r : data.records) {
        if (r.id.empty() || r.id.find_first_of("\t\n") != std::string::npos)
            throw ConfigError("record ids must be non-empty and free of tabs/newlines");
        out << r.id << '\t';
        put_segment(out, r.features.codec);
        out << '\t';
        put_segment(out, r.features.content);
        out << '\t';
        put_segment(out, r.features.anchor);
        out << '\t' << fmt(r.anchor.crf) << ',' << fmt(r.anchor.bitrate) << ',' << fmt(r.anchor.vmaf) << '\t';
        if (labels) put_segment(out, r.truth->flatten());
        else out << '-';
        out << '\n';
    }
    if (!out) throw IoError("failed writing feature file");
}

void write_feature_file(const std::filesystem::path& path, const Dataset& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    write_feature_file(out, data);
}

Dataset read_feature_file(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty feature file", 1);
    std::istringstream hs(line);
    std::string magic, version;
    hs >> magic >> version;
    if (magic != kFeatureMagic) throw IoError("not a feature file", 1);
    if (version != std::to_string(kFeatureFileVersion)) throw IoError("unsupported feature file version " + version, 1);
    Dataset data;
    data.schema = {};
    int labels = -1;
    bool have_codec = false, have_content = false, have_anchor = false;
    std::string tok;
    while (hs >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw IoError("bad header token '" + tok + "'", 1);
        const auto key = tok.substr(0, eq), value = tok.substr(eq + 1);
        if (key == "codec") data.schema.codec_dim = header_size(value, key, &data.schema.codec_tag), have_codec = true;
        else if (key == "content")
            data.schema.content_dim = header_size(value, key, &data.schema.content_tag), have_content = true;
        else if (key == "anchor") data.schema.anchor_dim = header_size(value, key, nullptr), have_anchor = true;
        else if (key == "labels") labels = int(header_size(value, key, nullptr));
        else throw IoError("unknown header key '" + key + "'", 1);
    }
    if (!have_codec || !have_content || !have_anchor || (labels != 0 && labels != 1))
        throw IoError("incomplete feature header", 1);

    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split(line, '\t');
        if (f.size() != 6) throw IoError("expected 6 tab-separated fields, found " + std::to_string(f.size()), lineno);
        Record r;
        r.id = f[0];
        if (r.id.empty()) throw IoError("empty record id", lineno);
        r.features.codec = parse_segment(f[1], data.schema.codec_dim, "codec segment", lineno);
        r.features.content = parse_segment(f[2], data.schema.content_dim, "content segment", lineno);
        r.features.anchor = parse_segment(f[3], data.schema.anchor_dim, "anchor segment", lineno);
        const auto a = parse_segment(f[4], 3, "anchor point", lineno);
        r.anchor = {a[0], a[1], a[2]};
        if (!CrfGrid::on_grid(r.anchor.crf)) throw IoError("anchor CRF is not on the grid", lineno);
        if (labels == 1) {
            r.truth = RateQualityCurve::from_flat(parse_segment(f[5], kCurveWidth, "labels", lineno));
        } else if (f[5] != "-") {
            throw IoError("labels present but header says labels=0", lineno);
        }
        data.records.push_back(std::move(r));
    }
    return data;
}

Dataset read_feature_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open feature file '" + path.string() + "'");
    return read_feature_file(in);
}

// ---------------------------------------------------------------------------
// Bundles

namespace {

constexpr const char* kBundleMagic = "rq-bundle";
constexpr int kBundleVersion = 1;

std::string model_flags(const PredictorConfig& c) {
    return "ablation=" + to_string(c.ablation) + " suspension=" + to_string(c.suspension) +
           " anchor_crf=" + fmt(c.anchor_crf);
}

}  // namespace

void write_bundle(std::ostream& out, const ModelBundle& b) {
    const auto cfg = b.config.to_kv();
    out << kBundleMagic << ' ' << kBundleVersion << '\n';
    out << "schema " << b.schema.codec_tag << ' ' << b.schema.codec_dim << ' ' << b.schema.content_tag << ' '
        << b.schema.content_dim << ' ' << b.schema.anchor_dim << '\n';
    out << "config " << cfg.entries().size() << '\n';
    for (const auto& [k, v] : cfg.entries()) out << k << " = " << v << '\n';
    const nn::ModelHeader header{b.schema.tag(), model_flags(b.config)};
    nn::write_model(out, b.net1, header);
    nn::write_model(out, b.net2, header);
    if (!out) throw IoError("failed writing model bundle");
}

void write_bundle(const std::filesystem::path& path, const ModelBundle& b) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    write_bundle(out, b);
}

ModelBundle read_bundle(std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    auto next = [&]() -> std::string& {
        ++lineno;
        if (!std::getline(in, line)) throw IoError("model bundle ends early", lineno);
        return line;
    };
    {
        std::istringstream s(next());
        std::string magic;
        int version = 0;
        s >> magic >> version;
        if (magic != kBundleMagic) throw IoError("not a model bundle", lineno);
        if (version != kBundleVersion) throw SchemaError("unsupported model bundle version");
    }
    ModelBundle b;
    {
        std::istringstream s(next());
        std::string key;
        s >> key >> b.schema.codec_tag >> b.schema.codec_dim >> b.schema.content_tag >> b.schema.content_dim >>
            b.schema.anchor_dim;
        if (key != "schema" || !s) throw IoError("bad schema line in model bundle", lineno);
    }
    std::size_t n = 0;
    {
        std::istringstream s(next());
        std::string key;
        s >> key >> n;
        if (key != "config" || !s) throw IoError("bad config line in model bundle", lineno);
    }
    std::string text;
    for (std::size_t i = 0; i < n; ++i) text += next() + "\n";
    b.config = PredictorConfig::from_kv(KeyValueConfig::parse(text));
    const nn::ModelHeader expect{b.schema.tag(), model_flags(b.config)};
    b.net1 = nn::read_model(in, nullptr, expect);
    b.net2 = nn::read_model(in, nullptr, expect);
    const auto d = b.schema.codec_dim + b.schema.content_dim + (b.config.uses_anchor_features() ? b.schema.anchor_dim : 0);
    if (std::size_t(b.net1.arch.input_dim) != d || std::size_t(b.net2.arch.input_dim) != d + kCurveWidth ||
        b.net1.arch.output_dim != int(kCurveWidth) || b.net2.arch.output_dim != int(kCurveWidth))
        throw SchemaError("network shapes do not match the bundle's feature schema");
    return b;
}

ModelBundle read_bundle(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open model bundle '" + path.string() + "'");
    return read_bundle(in);
}

// ---------------------------------------------------------------------------
// Prediction

std::vector<double> model_input(const Record& r, const PredictorConfig& cfg) {
    return r.features.concat(cfg.uses_anchor_features());
}

namespace {

struct Batch {
    Matrix x;        // D x N
    Matrix anchors;  // 2 x N (bitrate, vmaf)
    Matrix truth;    // 202 x N, empty when unlabeled
};

Batch make_batch(std::span<const Record> records, const PredictorConfig& cfg, std::size_t expected_dim,
                 bool need_anchor, bool need_truth) {
    Batch b;
    const auto n = Eigen::Index(records.size());
    b.x.resize(Eigen::Index(expected_dim), n);
    b.anchors.resize(2, n);
    if (need_truth) b.truth.resize(Eigen::Index(kCurveWidth), n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto& r = records[std::size_t(j)];
        const auto in = model_input(r, cfg);
        if (in.size() != expected_dim)
            throw SchemaError("record '" + r.id + "' has " + std::to_string(in.size()) + " features, model expects " +
                              std::to_string(expected_dim));
        b.x.col(j) = Eigen::Map<const Vector>(in.data(), Eigen::Index(in.size()));
        if (need_anchor) {
            if (std::abs(r.anchor.crf - cfg.anchor_crf) > 1e-9)
                throw SchemaError("record '" + r.id + "' was anchored at CRF " + fmt(r.anchor.crf) +
                                  ", model expects " + fmt(cfg.anchor_crf));
            r.anchor.validate();
        }
        b.anchors(0, j) = r.anchor.bitrate;
        b.anchors(1, j) = r.anchor.vmaf;
        if (need_truth) {
            if (!r.truth) throw SchemaError("record '" + r.id + "' has no ground-truth labels");
            const auto flat = r.truth->flatten();
            b.truth.col(j) = Eigen::Map<const Vector>(flat.data(), Eigen::Index(flat.size()));
        }
    }
    return b;
}

Matrix stack(const Matrix& top, const Matrix& bottom) {
    Matrix m(top.rows() + bottom.rows(), top.cols());
    m.topRows(top.rows()) = top;
    m.bottomRows(bottom.rows()) = bottom;
    return m;
}

Matrix stage1_eval(const ModelBundle& m, const Batch& b, std::size_t index) {
    Matrix c = nn::forward_eval(m.net1, b.x);
    if (m.config.uses_suspension()) c = suspend(c, b.anchors, index, m.config.suspension);
    return c;
}

Matrix pipeline_eval(const ModelBundle& m, const Batch& b, std::size_t index) {
    const Matrix c = stage1_eval(m, b, index);
    return c + nn::forward_eval(m.net2, stack(c, b.x));
}

std::vector<RateQualityCurve> clamp_all(const Matrix& m) {
    auto curves = nn::from_matrix(m);
    for (auto& c : curves) c = clamp_curve(c);
    return curves;
}

std::size_t input_dim(const ModelBundle& m) { return std::size_t(m.net1.arch.input_dim); }

}  // namespace

std::vector<RateQualityCurve> predict_stage1(const ModelBundle& model, std::span<const Record> records) {
    if (records.empty()) return {};
    const auto b = make_batch(records, model.config, input_dim(model), model.config.uses_suspension(), false);
    return nn::from_matrix(stage1_eval(model, b, CrfGrid::index_of(model.config.anchor_crf)));
}

std::vector<RateQualityCurve> predict(const ModelBundle& model, std::span<const Record> records) {
    if (records.empty()) return {};
    const auto b = make_batch(records, model.config, input_dim(model), model.config.uses_suspension(), false);
    return clamp_all(pipeline_eval(model, b, CrfGrid::index_of(model.config.anchor_crf)));
}

RateQualityCurve predict(const ModelBundle& model, const FeatureVector& features, const AnchorPoint& anchor) {
    const Record r{"", features, anchor, std::nullopt};
    return predict(model, std::span<const Record>(&r, 1)).front();
}

// ---------------------------------------------------------------------------
// Training

namespace {

double vmaf_abs_error(const Matrix& pred, const Matrix& truth) {
    return (pred.topRows(kK).cwiseMax(0.0).cwiseMin(100.0) - truth.topRows(kK)).cwiseAbs().sum();
}

std::vector<Eigen::Index> shuffled(Eigen::Index n, Rng& rng) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) idx[std::size_t(i)] = i;
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
}

double cosine_lr(const TrainConfig& t, int epoch) {
    if (!t.cosine_decay) return t.adam.lr;
    return t.adam.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(epoch) / double(t.epochs)));
}

nn::ModelParams make_net(int input_dim, const TrainConfig& t, double lambda, std::uint64_t seed) {
    nn::Architecture a;
    a.input_dim = input_dim;
    a.hidden = t.hidden;
    a.residual_blocks = t.residual_blocks;
    a.attention_reduction = t.attention_reduction;
    auto p = nn::ModelParams::init(a, seed);
    // Bitrate outputs are emitted in units of 1/sqrt(lambda) kbps so both loss
    // terms see gradients of similar magnitude.
    p.out_scale.tail(kK).setConstant(1.0 / std::sqrt(lambda));
    return p;
}

}  // namespace

BatchGradients end_to_end_gradients(ModelBundle& m, const Matrix& x, const Matrix& anchors, const Matrix& truth) {
    const auto index = CrfGrid::index_of(m.config.anchor_crf);
    nn::ForwardCache c1, c2;
    const Matrix raw = nn::forward(m.net1, x, nn::Mode::kTrain, &c1);
    const Matrix stage1 = m.config.uses_suspension() ? suspend(raw, anchors, index, m.config.suspension) : raw;
    BatchGradients g;
    g.pred = stage1 + nn::forward(m.net2, stack(stage1, x), nn::Mode::kTrain, &c2);
    if (!g.pred.allFinite()) return g;
    auto loss = nn::curve_loss(g.pred, truth, m.config.loss);
    g.loss = loss.value;
    g.net2 = nn::backward(m.net2, c2, loss.grad);
    Matrix d_stage1 = loss.grad + g.net2.input.topRows(Eigen::Index(kCurveWidth));
    if (m.config.uses_suspension()) d_stage1 = suspend_backward(d_stage1, raw, anchors, index, m.config.suspension);
    g.net1 = nn::backward(m.net1, c1, d_stage1);
    return g;
}

namespace {

constexpr std::uint64_t kNet1Stream = 0x6e6574310000ULL;
constexpr std::uint64_t kNet2Stream = 0x6e6574320000ULL;
constexpr std::uint64_t kShuffleStream = 0x736875660000ULL;

[[noreturn]] void diverged(int epoch, const char* phase) {
    throw TrainingError("training diverged in epoch " + std::to_string(epoch + 1) + " (" + phase + ")");
}

class Trainer {
public:
    Trainer(ModelBundle& m, Batch train, std::optional<Batch> test, std::uint64_t seed, TrainingReport* report,
            const EpochCallback& cb)
        : m_(m), cfg_(m.config), train_(std::move(train)), test_(std::move(test)), seed_(seed), report_(report),
          cb_(cb), index_(CrfGrid::index_of(cfg_.anchor_crf)) {}

    enum class Phase { kJoint, kNet1, kNet2 };

    void run(Phase phase) {
        const auto& t = cfg_.train;
        const char* name = phase == Phase::kJoint ? "end2end" : phase == Phase::kNet1 ? "net1" : "net2";
        nn::AdamState s1 = nn::AdamState::for_params(m_.net1);
        nn::AdamState s2 = nn::AdamState::for_params(m_.net2);
        Rng rng(splitmix64(seed_ ^ kShuffleStream) + std::uint64_t(phase));
        Matrix frozen;
        if (phase == Phase::kNet2) frozen = stage1_eval(m_, train_, index_);

        const auto n = train_.x.cols();
        for (int epoch = 0; epoch < t.epochs; ++epoch) {
            nn::AdamConfig adam = t.adam;
            adam.lr = cosine_lr(t, epoch);
            const auto order = shuffled(n, rng);
            double loss_sum = 0.0, abs_sum = 0.0;
            for (Eigen::Index start = 0; start < n; start += t.batch_size) {
                const auto stop = std::min<Eigen::Index>(n, start + t.batch_size);
                const std::vector<Eigen::Index> idx(order.begin() + start, order.begin() + stop);
                const Matrix x = train_.x(Eigen::all, idx);
                const Matrix anchors = train_.anchors(Eigen::all, idx);
                const Matrix truth = train_.truth(Eigen::all, idx);
                const double b = double(idx.size());

                Matrix pred;
                if (phase == Phase::kJoint) {
                    auto g = end_to_end_gradients(m_, x, anchors, truth);
                    if (!g.pred.allFinite()) diverged(epoch, name);
                    nn::adam_step(m_.net2, g.net2.params, s2, adam);
                    nn::adam_step(m_.net1, g.net1.params, s1, adam);
                    loss_sum += g.loss * b;
                    abs_sum += vmaf_abs_error(g.pred, truth);
                    continue;
                }

                Matrix raw, stage1;
                nn::ForwardCache c1, c2;
                if (phase == Phase::kNet2) {
                    stage1 = frozen(Eigen::all, idx);
                    pred = stage1 + nn::forward(m_.net2, stack(stage1, x), nn::Mode::kTrain, &c2);
                } else {
                    raw = nn::forward(m_.net1, x, nn::Mode::kTrain, &c1);
                    stage1 = cfg_.uses_suspension() ? suspend(raw, anchors, index_, cfg_.suspension) : raw;
                    pred = stage1;
                }
                if (!pred.allFinite()) diverged(epoch, name);
                const auto loss = nn::curve_loss(pred, truth, cfg_.loss);
                loss_sum += loss.value * b;
                abs_sum += vmaf_abs_error(pred, truth);

                if (phase == Phase::kNet2) {
                    nn::adam_step(m_.net2, nn::backward(m_.net2, c2, loss.grad).params, s2, adam);
                } else {
                    const Matrix d_raw = cfg_.uses_suspension()
                                             ? suspend_backward(loss.grad, raw, anchors, index_, cfg_.suspension)
                                             : loss.grad;
                    nn::adam_step(m_.net1, nn::backward(m_.net1, c1, d_raw).params, s1, adam);
                }
            }
            EpochReport r;
            r.epoch = epoch + 1;
            r.phase = name;
            r.learning_rate = adam.lr;
            r.train_loss = loss_sum / double(n);
            r.train_vmaf_mae = abs_sum / (double(n) * double(kK));
            if (!std::isfinite(r.train_loss)) diverged(epoch, name);
            if (test_) {
                const Matrix p = pipeline_eval(m_, *test_, index_);
                r.test_vmaf_mae = vmaf_abs_error(p, test_->truth) / (double(p.cols()) * double(kK));
            }
            if (report_) report_->epochs.push_back(r);
            if (cb_) cb_(r);
        }
    }

private:
    ModelBundle& m_;
    const PredictorConfig& cfg_;
    Batch train_;
    std::optional<Batch> test_;
    std::uint64_t seed_;
    TrainingReport* report_;
    const EpochCallback& cb_;
    std::size_t index_;
};

}  // namespace

ModelBundle init_bundle(const Dataset& train_set, const PredictorConfig& config, std::uint64_t seed) {
    config.validate();
    if (!train_set.labeled() || train_set.records.empty()) throw SchemaError("initialization needs labeled records");
    ModelBundle m;
    m.config = config;
    m.schema = train_set.schema;
    const auto d = train_set.schema.codec_dim + train_set.schema.content_dim +
                   (config.uses_anchor_features() ? train_set.schema.anchor_dim : 0);
    m.net1 = make_net(int(d), config.train, config.loss.lambda, splitmix64(seed ^ kNet1Stream));
    Vector mean = Vector::Zero(Eigen::Index(kCurveWidth));
    for (const auto& r : train_set.records) {
        const auto flat = r.truth->flatten();
        mean += Eigen::Map<const Vector>(flat.data(), Eigen::Index(flat.size()));
    }
    mean /= double(train_set.records.size());
    m.net1.b_out = mean.cwiseQuotient(m.net1.out_scale);
    m.net2 = make_net(int(d + kCurveWidth), config.train, config.loss.lambda, splitmix64(seed ^ kNet2Stream));
    if (config.train.zero_init_residual_head) {
        m.net2.w_out.setZero();
        m.net2.b_out.setZero();
    }
    return m;
}

ModelBundle train(const Dataset& train_set, const PredictorConfig& config, std::uint64_t seed, TrainingReport* report,
                  const Dataset* test_set, const EpochCallback& on_epoch) {
    config.validate();
    if (train_set.records.empty()) throw ConfigError("training set is empty");
    train_set.validate();
    if (!train_set.labeled()) throw SchemaError("training set has records without labels");
    if (test_set) {
        if (!(test_set->schema == train_set.schema)) throw SchemaError("test set schema differs from the training set");
        test_set->validate();
        if (!test_set->labeled()) throw SchemaError("test set has records without labels");
    }
    const auto t0 = std::chrono::steady_clock::now();

    ModelBundle m = init_bundle(train_set, config, seed);
    const auto d = std::size_t(m.net1.arch.input_dim);
    const bool need_anchor = config.uses_suspension();
    Batch train_batch = make_batch(train_set.records, config, d, need_anchor, true);
    std::optional<Batch> test_batch;
    if (test_set && !test_set->records.empty())
        test_batch = make_batch(test_set->records, config, d, need_anchor, true);

    if (report) *report = {};
    Trainer trainer(m, std::move(train_batch), std::move(test_batch), seed, report, on_epoch);
    if (config.ablation == Ablation::kNoEnd2End) {
        trainer.run(Trainer::Phase::kNet1);
        trainer.run(Trainer::Phase::kNet2);
    } else {
        trainer.run(Trainer::Phase::kJoint);
    }
    if (report) report->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return m;
}

// ---------------------------------------------------------------------------
// Dynamic anchor

RetargetResult dynamic_anchor_retarget(const ModelBundle& model, const Record& record, double target_vmaf,
                                       CodecBackend& backend, const ClipRef& clip) {
    const auto& cfg = model.config;
    const std::span<const Record> one(&record, 1);
    const auto b = make_batch(one, cfg, input_dim(model), cfg.uses_suspension(), false);
    const auto initial = nn::from_matrix(stage1_eval(model, b, CrfGrid::index_of(cfg.anchor_crf))).front();

    RetargetResult out;
    out.lookup = crf_for_target_vmaf(clamp_curve(initial), target_vmaf);
    const auto measured = encode_measure(backend, clip, out.lookup.crf);
    out.anchor = {out.lookup.crf, measured.bitrate, measured.vmaf};
    out.anchor.validate();

    Batch moved = b;
    moved.anchors(0, 0) = out.anchor.bitrate;
    moved.anchors(1, 0) = out.anchor.vmaf;
    const auto idx = out.anchor.index();
    const Matrix c = [&] {
        Matrix raw = nn::forward_eval(model.net1, moved.x);
        return suspend(raw, moved.anchors, idx, cfg.suspension);
    }();
    const Matrix final_curve = c + nn::forward_eval(model.net2, stack(c, moved.x));
    out.curve = clamp_curve(nn::from_matrix(suspend(final_curve, moved.anchors, idx, cfg.suspension)).front());
    return out;
}

}  // namespace rq
