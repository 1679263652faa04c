#include "rq/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "rq/error.hpp"
#include "rq/strategy.hpp"

namespace rq {

CurveMae curve_mae(std::span<const RateQualityCurve> pred, std::span<const RateQualityCurve> truth) {
    if (pred.size() != truth.size()) throw ShapeError("prediction and truth sets differ in size");
    if (pred.empty()) throw ShapeError("empty curve set");
    double sv = 0.0, sr = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        for (std::size_t k = 0; k < CrfGrid::kCount; ++k) {
            sv += std::abs(pred[i].vmaf_at(k) - truth[i].vmaf_at(k));
            sr += std::abs(pred[i].bitrate_at(k) - truth[i].bitrate_at(k));
        }
    }
    const double n = double(pred.size() * CrfGrid::kCount);
    return {sv / n, sr / n};
}

double vacc(std::span<const double> actual_vmaf, double target, double tolerance) {
    if (actual_vmaf.empty()) throw ShapeError("VACC of an empty cohort");
    std::size_t hits = 0;
    for (double v : actual_vmaf)
        if (std::abs(v - target) < tolerance) ++hits;
    return double(hits) / double(actual_vmaf.size());
}

namespace {

std::vector<RateQualityCurve> truths(const Dataset& data) {
    if (data.records.empty()) throw ShapeError("evaluation set is empty");
    std::vector<RateQualityCurve> t;
    t.reserve(data.records.size());
    for (const auto& r : data.records) {
        if (!r.truth) throw SchemaError("record '" + r.id + "' has no ground-truth labels");
        t.push_back(*r.truth);
    }
    return t;
}

EvalReport assemble(const Dataset& data, const std::vector<RateQualityCurve>& pred,
                    const std::vector<RateQualityCurve>& truth, double target, double tolerance) {
    EvalReport rep;
    const auto mae = curve_mae(pred, truth);
    rep.vmaf_mae = mae.vmaf;
    rep.bitrate_mae = mae.bitrate;
    rep.n = pred.size();
    std::vector<double> actual;
    actual.reserve(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto d = crf_for_target_vmaf(pred[i], target);
        const double v = truth[i].vmaf_at(d.index());
        actual.push_back(v);
        rep.rows.push_back({data.records[i].id, std::abs(v - target), d.crf, v});
    }
    rep.vacc = vacc(actual, target, tolerance);
    return rep;
}

}  // namespace

EvalReport evaluate(const ModelBundle& model, const Dataset& data, double target, double tolerance) {
    const auto truth = truths(data);
    const auto pred = predict(model, data.records);
    auto rep = assemble(data, pred, truth, target, tolerance);
    rep.label = to_string(model.config.ablation);
    return rep;
}

EvalReport evaluate_dynamic(const ModelBundle& model, const Dataset& data, CodecBackend& backend, double target,
                            double tolerance) {
    const auto truth = truths(data);
    std::vector<RateQualityCurve> pred;
    pred.reserve(data.records.size());
    for (const auto& r : data.records) {
        ClipRef clip;
        clip.id = r.id;
        pred.push_back(dynamic_anchor_retarget(model, r, target, backend, clip).curve);
    }
    auto rep = assemble(data, pred, truth, target, tolerance);
    rep.label = to_string(model.config.ablation) + "+dynamic";
    return rep;
}

EvalReport AblationTable::summary(Ablation a) const {
    EvalReport s;
    s.label = to_string(a);
    std::size_t k = 0;
    for (const auto& row : rows) {
        if (row.ablation != a) continue;
        s.vmaf_mae += row.report.vmaf_mae;
        s.bitrate_mae += row.report.bitrate_mae;
        s.vacc += row.report.vacc;
        s.n = row.report.n;
        ++k;
    }
    if (k == 0) throw ConfigError("no rows for ablation " + to_string(a));
    s.vmaf_mae /= double(k);
    s.bitrate_mae /= double(k);
    s.vacc /= double(k);
    return s;
}

AblationTable run_ablation_suite(const Dataset& train_set, const Dataset& test_set, std::span<const std::uint64_t> seeds,
                                 const PredictorConfig& base, std::span<const Ablation> ablations,
                                 const ProgressCallback& progress) {
    if (seeds.empty()) throw ConfigError("ablation suite needs at least one seed");
    AblationTable table;
    for (const auto seed : seeds) {
        for (const auto a : ablations) {
            PredictorConfig cfg = base;
            cfg.ablation = a;
            AblationRow row;
            row.ablation = a;
            row.seed = seed;
            EpochCallback cb;
            if (progress) cb = [&](const EpochReport& e) { progress(a, seed, e); };
            const auto model = train(train_set, cfg, seed, &row.training, nullptr, cb);
            row.report = evaluate(model, test_set);
            table.rows.push_back(std::move(row));
        }
    }
    return table;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::string fixed(double v, int prec) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << v;
    return os.str();
}

nlohmann::json to_json(const EvalReport& r, bool with_rows) {
    nlohmann::json j = {{"label", r.label},   {"vmaf_mae", r.vmaf_mae}, {"bitrate_mae_kbps", r.bitrate_mae},
                        {"vacc", r.vacc},     {"n", r.n}};
    if (with_rows) {
        auto rows = nlohmann::json::array();
        for (const auto& v : r.rows)
            rows.push_back({{"id", v.id}, {"d", v.d}, {"selected_crf", v.selected_crf}, {"actual_vmaf", v.actual_vmaf}});
        j["videos"] = std::move(rows);
    }
    return j;
}

}  // namespace

std::string format_report(const EvalReport& r) {
    std::ostringstream os;
    os << "model        " << r.label << '\n'
       << "videos       " << r.n << '\n'
       << "VMAF MAE     " << fixed(r.vmaf_mae, 4) << '\n'
       << "bitrate MAE  " << fixed(r.bitrate_mae, 2) << " kbps\n"
       << "VACC         " << fixed(100.0 * r.vacc, 2) << " %\n";
    return os.str();
}

std::string format_ablation_table(const AblationTable& t) {
    std::ostringstream os;
    os << std::left << std::setw(22) << "method" << std::right << std::setw(10) << "VMAF MAE" << std::setw(10)
       << "VACC" << std::setw(14) << "bitrate MAE" << '\n';
    std::vector<Ablation> seen;
    for (const auto& row : t.rows) {
        if (std::find(seen.begin(), seen.end(), row.ablation) != seen.end()) continue;
        seen.push_back(row.ablation);
        const auto s = t.summary(row.ablation);
        os << std::left << std::setw(22) << s.label << std::right << std::setw(10) << fixed(s.vmaf_mae, 4)
           << std::setw(9) << fixed(100.0 * s.vacc, 2) << '%' << std::setw(14) << fixed(s.bitrate_mae, 2) << '\n';
    }
    return os.str();
}

std::string report_json(const EvalReport& r, bool with_rows) { return to_json(r, with_rows).dump(2); }

std::string ablation_table_json(const AblationTable& t) {
    auto rows = nlohmann::json::array();
    for (const auto& row : t.rows) {
        auto j = to_json(row.report, false);
        j["ablation"] = to_string(row.ablation);
        j["seed"] = row.seed;
        j["train_seconds"] = row.training.seconds;
        rows.push_back(std::move(j));
    }
    return nlohmann::json{{"rows", rows}}.dump(2);
}

// ---------------------------------------------------------------------------
// Curve CSV

std::string curve_csv(const RateQualityCurve& pred, const RateQualityCurve& truth) {
    std::string out = "crf,pred_vmaf,true_vmaf,pred_bitrate,true_bitrate\n";
    char crf[16];
    for (std::size_t i = 0; i < CrfGrid::kCount; ++i) {
        std::snprintf(crf, sizeof crf, "%.1f", CrfGrid::crf_of(std::ptrdiff_t(i)));
        out += std::string(crf) + ',' + format_number(pred.vmaf_at(i)) + ',' + format_number(truth.vmaf_at(i)) + ',' +
               format_number(pred.bitrate_at(i)) + ',' + format_number(truth.bitrate_at(i)) + '\n';
    }
    return out;
}

void emit_curve_csv(const RateQualityCurve& pred, const RateQualityCurve& truth, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << curve_csv(pred, truth);
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

CurveCsv read_curve_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string line;
    std::getline(in, line);
    if (line != "crf,pred_vmaf,true_vmaf,pred_bitrate,true_bitrate") throw IoError("unexpected CSV header", 1);
    std::vector<double> pv, tv, pr, tr;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        double c, a, b, d, e;
        if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf", &c, &a, &b, &d, &e) != 5)
            throw IoError("malformed CSV row", lineno);
        if (CrfGrid::index_of(c) != pv.size()) throw IoError("CSV rows out of CRF order", lineno);
        pv.push_back(a);
        tv.push_back(b);
        pr.push_back(d);
        tr.push_back(e);
    }
    if (pv.size() != CrfGrid::kCount) throw IoError("CSV must have 101 data rows", lineno);
    return {RateQualityCurve(pv, pr), RateQualityCurve(tv, tr)};
}

}  // namespace rq
