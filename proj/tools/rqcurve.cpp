#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "rq/codec.hpp"
#include "rq/config.hpp"
#include "rq/error.hpp"
#include "rq/eval.hpp"
#include "rq/features.hpp"
#include "rq/ingest.hpp"
#include "rq/pipeline.hpp"
#include "rq/simcodec.hpp"
#include "rq/strategy.hpp"

namespace fs = std::filesystem;
using namespace rq;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitBackend = 3;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

unsigned default_jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

/// Runs fn(i) for i in [0, n) on `jobs` threads; rethrows the first failure.
template <class Fn>
void parallel_for(std::size_t n, unsigned jobs, Fn fn) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex mu;
    auto worker = [&] {
        for (std::size_t i; (i = next++) < n;) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
                next = n;
            }
        }
    };
    const unsigned k = std::max(1u, std::min<unsigned>(jobs, unsigned(std::max<std::size_t>(n, 1))));
    std::vector<std::jthread> pool;
    for (unsigned t = 1; t < k; ++t) pool.emplace_back(worker);
    worker();
    pool.clear();
    if (failure) std::rethrow_exception(failure);
}

fs::path split_path(const fs::path& data, const char* split) {
    if (fs::is_directory(data)) return data / (std::string(split) + ".tsv");
    return data;
}

std::string fmt(double v) { return format_number(v); }

struct Output {
    std::ofstream file;
    std::ostream* os = &std::cout;
    explicit Output(const std::string& path) {
        if (path.empty() || path == "-") return;
        file.open(path, std::ios::binary);
        if (!file) throw IoError("cannot open '" + path + "' for writing");
        os = &file;
    }
    std::ostream& operator*() { return *os; }
};

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << text;
}

PredictorConfig load_predictor_config(const std::string& path) {
    if (path.empty()) return {};
    return PredictorConfig::from_kv(KeyValueConfig::load(path));
}

// ---------------------------------------------------------------------------

struct SynthOpts {
    std::size_t train = 2000, test = 500;
    std::uint64_t seed = 7;
    double noise = sim::kDefaultFeatureNoise;
    double anchor_crf = kDefaultAnchorCrf;
    std::string out;
};

void run_synth(const SynthOpts& o, unsigned jobs) {
    if (o.train < 1 || o.test < 1) throw UsageError("--train and --test must be at least 1");
    if (!CrfGrid::on_grid(o.anchor_crf)) throw ConfigError("--anchor-crf must lie on the 0.2 grid in [20, 40]");
    std::vector<sim::Sample> all(o.train + o.test);
    parallel_for(all.size(), jobs, [&](std::size_t i) {
        all[i] = sim::synth_sample(sim::sample_seed(o.seed, i), o.noise, o.anchor_crf);
    });
    fs::create_directories(o.out);
    const std::span<const sim::Sample> s(all);
    write_feature_file(fs::path(o.out) / "train.tsv", sim::to_dataset(s.first(o.train)));
    write_feature_file(fs::path(o.out) / "test.tsv", sim::to_dataset(s.subspan(o.train)));
    std::cout << "wrote " << o.train << " train and " << o.test << " test records to " << o.out << '\n';
}

// ---------------------------------------------------------------------------

struct ExtractOpts {
    std::vector<std::string> inputs;
    std::string backend;
    double anchor_crf = kDefaultAnchorCrf;
    std::string out;
    std::string work_dir;
    std::string size;  // WxH for raw .yuv input
    std::string fps = "30/1";
    int glcm_levels = 16;
};

FrameRate parse_fps(const std::string& s) {
    FrameRate r;
    if (std::sscanf(s.c_str(), "%d/%d", &r.num, &r.den) != 2 && std::sscanf(s.c_str(), "%d", &r.num) == 1) r.den = 1;
    if (r.num <= 0 || r.den <= 0) throw UsageError("--fps must look like 30 or 30000/1001");
    return r;
}

void run_extract(const ExtractOpts& o, unsigned jobs) {
    auto kv = KeyValueConfig::load(o.backend);
    if (!o.work_dir.empty()) kv.set("work_dir", o.work_dir);
    const auto unknown = kv.unknown_keys(ExternalBackendConfig::known_keys());
    if (!unknown.empty()) throw ConfigError("unknown backend config key '" + unknown.front() + "'");
    ExternalBackend backend(ExternalBackendConfig::from(kv));
    ContentConfig cc;
    cc.glcm_levels = o.glcm_levels;

    Dataset data;
    data.records.resize(o.inputs.size());
    parallel_for(o.inputs.size(), jobs, [&](std::size_t i) {
        const fs::path path = o.inputs[i];
        VideoClip clip;
        if (path.extension() == ".y4m") {
            clip = read_y4m(path);
        } else {
            int w = 0, h = 0;
            if (std::sscanf(o.size.c_str(), "%dx%d", &w, &h) != 2)
                throw UsageError("raw input " + path.string() + " needs --size WxH");
            clip = read_raw_yuv(path, w, h, parse_fps(o.fps), ChromaLayout::k420);
        }
        const auto id = path.stem().string() + (o.inputs.size() > 1 ? "#" + std::to_string(i) : "");
        const auto ex = extract_video(backend, clip, path, id, backend.config().work_dir, o.anchor_crf, cc);
        data.records[i] = {id, ex.features, ex.anchor, std::nullopt};
    });
    write_feature_file(o.out, data);
    std::cout << "wrote " << data.records.size() << " feature record(s) to " << o.out << '\n';
}

// ---------------------------------------------------------------------------

struct TrainOpts {
    std::string data, config, ablation, out, report;
    std::uint64_t seed = 1;
    int epochs = 0;
    bool quiet = false;
};

void run_train(const TrainOpts& o) {
    auto cfg = load_predictor_config(o.config);
    if (!o.ablation.empty()) cfg.ablation = parse_ablation(o.ablation);
    if (o.epochs > 0) cfg.train.epochs = o.epochs;
    cfg.validate();
    const auto train_set = read_feature_file(split_path(o.data, "train"));
    std::optional<Dataset> test_set;
    if (fs::is_directory(o.data) && fs::exists(fs::path(o.data) / "test.tsv"))
        test_set = read_feature_file(fs::path(o.data) / "test.tsv");

    TrainingReport report;
    const auto model = train(train_set, cfg, o.seed, &report, test_set ? &*test_set : nullptr,
                             [&](const EpochReport& e) {
                                 if (o.quiet || (e.epoch % 10 != 0 && e.epoch != 1)) return;
                                 std::fprintf(stderr, "[%s] epoch %3d  lr %.2e  loss %.4f  train MAE %.4f", e.phase.c_str(),
                                              e.epoch, e.learning_rate, e.train_loss, e.train_vmaf_mae);
                                 if (e.test_vmaf_mae) std::fprintf(stderr, "  test MAE %.4f", *e.test_vmaf_mae);
                                 std::fputc('\n', stderr);
                             });
    write_bundle(fs::path(o.out), model);
    if (!o.report.empty()) {
        std::ostringstream os;
        os << "phase,epoch,learning_rate,train_loss,train_vmaf_mae,test_vmaf_mae\n";
        for (const auto& e : report.epochs)
            os << e.phase << ',' << e.epoch << ',' << fmt(e.learning_rate) << ',' << fmt(e.train_loss) << ','
               << fmt(e.train_vmaf_mae) << ',' << (e.test_vmaf_mae ? fmt(*e.test_vmaf_mae) : "") << '\n';
        write_text(o.report, os.str());
    }
    std::cout << "trained " << to_string(cfg.ablation) << " model on " << train_set.records.size() << " videos in "
              << std::fixed << std::setprecision(1) << report.seconds << " s -> " << o.out << '\n';
}

// ---------------------------------------------------------------------------

struct PredictOpts {
    std::string model, features, out;
};

void run_predict(const PredictOpts& o) {
    const auto model = read_bundle(fs::path(o.model));
    const auto data = read_feature_file(fs::path(o.features));
    const auto curves = predict(model, data.records);
    Output out(o.out);
    *out << "id,crf,vmaf,bitrate\n";
    for (std::size_t i = 0; i < curves.size(); ++i)
        for (std::size_t k = 0; k < CrfGrid::kCount; ++k) {
            char crf[16];
            std::snprintf(crf, sizeof crf, "%.1f", CrfGrid::crf_of(std::ptrdiff_t(k)));
            *out << data.records[i].id << ',' << crf << ',' << fmt(curves[i].vmaf_at(k)) << ','
                 << fmt(curves[i].bitrate_at(k)) << '\n';
        }
}

struct RecommendOpts {
    std::string model, features, out;
    std::string policy = "quality";
    double target = kDefaultTargetVmaf;
    double threshold = kDefaultSlopeThreshold;
    bool no_project = false;
};

void run_recommend(const RecommendOpts& o) {
    if (o.policy != "quality" && o.policy != "slope") throw UsageError("--policy must be quality or slope");
    const auto model = read_bundle(fs::path(o.model));
    const auto data = read_feature_file(fs::path(o.features));
    const auto curves = predict(model, data.records);
    Output out(o.out);
    *out << "id,policy,crf,pred_vmaf,pred_bitrate,flag\n";
    for (std::size_t i = 0; i < curves.size(); ++i) {
        const auto d = o.policy == "quality" ? crf_for_target_vmaf(curves[i], o.target, !o.no_project)
                                             : crf_for_slope(curves[i], o.threshold, !o.no_project);
        const char* flag = d.unreachable ? "unreachable" : d.below_curve ? "below_curve"
                           : d.all_worthwhile ? "all_worthwhile" : "";
        char crf[16];
        std::snprintf(crf, sizeof crf, "%.1f", d.crf);
        *out << data.records[i].id << ',' << o.policy << ',' << crf << ',' << fmt(d.vmaf) << ',' << fmt(d.bitrate)
             << ',' << flag << '\n';
    }
}

// ---------------------------------------------------------------------------

struct EvaluateOpts {
    std::string model, data, json, config, seeds = "1";
    double target = kDefaultTargetVmaf;
    double tolerance = kDefaultVaccTolerance;
    bool dynamic = false;
    bool suite = false;
    int epochs = 0;
};

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            out.push_back(std::stoull(tok));
        } catch (const std::exception&) {
            throw UsageError("--seeds must be a comma-separated list of integers");
        }
    }
    if (out.empty()) throw UsageError("--seeds is empty");
    return out;
}

void run_evaluate(const EvaluateOpts& o) {
    if (o.suite) {
        if (!fs::is_directory(o.data)) throw UsageError("--ablation-suite needs --data DIR with train.tsv and test.tsv");
        auto cfg = load_predictor_config(o.config);
        if (o.epochs > 0) cfg.train.epochs = o.epochs;
        const auto train_set = read_feature_file(fs::path(o.data) / "train.tsv");
        const auto test_set = read_feature_file(fs::path(o.data) / "test.tsv");
        const auto seeds = parse_seeds(o.seeds);
        const auto table = run_ablation_suite(train_set, test_set, seeds, cfg, kAllAblations,
                                              [](Ablation a, std::uint64_t seed, const EpochReport& e) {
                                                  if (e.epoch % 50 == 0)
                                                      std::fprintf(stderr, "[%s seed %llu %s] epoch %d loss %.4f\n",
                                                                   to_string(a).c_str(), (unsigned long long)seed,
                                                                   e.phase.c_str(), e.epoch, e.train_loss);
                                              });
        std::cout << format_ablation_table(table);
        if (!o.json.empty()) write_text(o.json, ablation_table_json(table) + "\n");
        return;
    }
    if (o.model.empty()) throw UsageError("evaluate needs --model (or --ablation-suite)");
    const auto model = read_bundle(fs::path(o.model));
    const auto data = read_feature_file(split_path(o.data, "test"));
    EvalReport rep;
    if (o.dynamic) {
        sim::SimBackend backend;
        rep = evaluate_dynamic(model, data, backend, o.target, o.tolerance);
    } else {
        rep = evaluate(model, data, o.target, o.tolerance);
    }
    std::cout << format_report(rep);
    if (!o.json.empty()) write_text(o.json, report_json(rep) + "\n");
}

// ---------------------------------------------------------------------------

struct PlotOpts {
    std::string model, features, truth, id, out;
};

void run_plot(const PlotOpts& o) {
    const auto model = read_bundle(fs::path(o.model));
    const auto features = read_feature_file(fs::path(o.features));
    const auto truth = read_feature_file(fs::path(o.truth));
    auto find = [&](const Dataset& d) -> const Record& {
        if (d.records.empty()) throw SchemaError("feature file has no records");
        if (o.id.empty()) return d.records.front();
        for (const auto& r : d.records)
            if (r.id == o.id) return r;
        throw SchemaError("no record with id '" + o.id + "'");
    };
    const Record& rec = find(features);
    const Record& t = o.id.empty() ? find(truth) : [&]() -> const Record& {
        for (const auto& r : truth.records)
            if (r.id == rec.id) return r;
        throw SchemaError("truth file has no record '" + rec.id + "'");
    }();
    if (!t.truth) throw SchemaError("truth record '" + t.id + "' has no labels");
    const auto pred = predict(model, rec.features, rec.anchor);
    if (o.out.empty() || o.out == "-") std::cout << curve_csv(pred, *t.truth);
    else emit_curve_csv(pred, *t.truth, o.out);
}

// ---------------------------------------------------------------------------

void run_show_config(const std::string& section) {
    const bool all = section == "all";
    if (!all && section != "predictor" && section != "backend" && section != "features" && section != "strategy")
        throw UsageError("--section must be all, predictor, backend, features or strategy");
    if (all || section == "predictor") {
        if (all) std::cout << "# [predictor] keys accepted by train --config\n";
        std::cout << PredictorConfig{}.to_kv().render();
    }
    if (all || section == "backend") {
        const ExternalBackendConfig b;
        const char* p = all ? "# " : "";
        if (all) std::cout << "\n# [backend] keys accepted by extract --backend\n";
        std::cout << p << "encode_command = \n"
                  << p << "metric_command = \n"
                  << p << "metric_pattern = " << b.metric_pattern << '\n'
                  << p << "work_dir = " << b.work_dir.string() << '\n'
                  << p << "output_extension = " << b.output_extension << '\n'
                  << p << "timeout_seconds = " << b.timeout.count() << '\n'
                  << p << "max_parallel = " << b.max_parallel << '\n';
    }
    if (all || section == "features") {
        const ContentConfig c;
        const char* p = all ? "# " : "";
        if (all) std::cout << "\n# [features] extraction defaults\n";
        std::cout << p << "glcm_levels = " << c.glcm_levels << '\n'
                  << p << "max_sampled_frames = " << c.max_sampled_frames << '\n'
                  << p << "blur_ceiling = " << fmt(c.quality.blur_ceiling) << '\n'
                  << p << "blockiness_ceiling = " << fmt(c.quality.blockiness_ceiling) << '\n'
                  << p << "low_pre_encode_crf = " << fmt(kLowPreEncodeCrf) << '\n'
                  << p << "high_pre_encode_crf = " << fmt(kHighPreEncodeCrf) << '\n'
                  << p << "synthetic_feature_noise = " << fmt(sim::kDefaultFeatureNoise) << '\n';
    }
    if (all || section == "strategy") {
        const char* p = all ? "# " : "";
        if (all) std::cout << "\n# [strategy] recommend / evaluate defaults\n";
        std::cout << p << "target_vmaf = " << fmt(kDefaultTargetVmaf) << '\n'
                  << p << "vacc_tolerance = " << fmt(kDefaultVaccTolerance) << '\n'
                  << p << "slope_threshold = " << fmt(kDefaultSlopeThreshold) << '\n'
                  << p << "monotone_projection = true\n";
    }
}

// ---------------------------------------------------------------------------

std::string kind_of(const std::exception& e) {
    if (dynamic_cast<const BackendError*>(&e)) return "backend";
    if (dynamic_cast<const UsageError*>(&e)) return "usage";
    if (dynamic_cast<const IoError*>(&e)) return "io";
    if (dynamic_cast<const SchemaError*>(&e)) return "schema";
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (dynamic_cast<const TrainingError*>(&e)) return "training";
    if (dynamic_cast<const rq::ParseError*>(&e)) return "parse";
    if (dynamic_cast<const fs::filesystem_error*>(&e)) return "io";
    return "data";
}

int report_error(const std::exception& e) {
    const auto kind = kind_of(e);
    std::string msg = e.what();
    for (char& c : msg)
        if (c == '\n' || c == '\r') c = ' ';
    std::cerr << "error[" << kind << "]: " << msg << '\n';
    if (kind == "usage") return kExitUsage;
    if (kind == "backend") return kExitBackend;
    return kExitData;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Predict CRF-VMAF and CRF-bitrate curves and pick encoding CRFs"};
    app.require_subcommand(1);
    unsigned jobs = default_jobs();
    app.add_option("--jobs,-j", jobs, "Parallel workers for per-video work")->check(CLI::PositiveNumber);

    SynthOpts synth;
    auto* c_synth = app.add_subcommand("synth-data", "Write a synthetic train/test feature dataset");
    c_synth->add_option("--train", synth.train, "Training videos")->capture_default_str();
    c_synth->add_option("--test", synth.test, "Test videos")->capture_default_str();
    c_synth->add_option("--seed", synth.seed, "Dataset seed")->capture_default_str();
    c_synth->add_option("--noise", synth.noise, "Feature noise sigma")->capture_default_str();
    c_synth->add_option("--anchor-crf", synth.anchor_crf, "Anchor CRF")->capture_default_str();
    c_synth->add_option("--out", synth.out, "Output directory")->required();

    ExtractOpts ex;
    auto* c_extract = app.add_subcommand("extract", "Extract a feature record from real video via an encoder backend");
    c_extract->add_option("--input", ex.inputs, "Source video(s): .y4m, or raw 4:2:0 with --size")->required();
    c_extract->add_option("--backend", ex.backend, "Backend key-value config")->required();
    c_extract->add_option("--anchor-crf", ex.anchor_crf, "Anchor CRF")->capture_default_str();
    c_extract->add_option("--out", ex.out, "Output feature file")->required();
    c_extract->add_option("--work-dir", ex.work_dir, "Scratch directory (overrides the backend config)");
    c_extract->add_option("--size", ex.size, "WxH for raw YUV input");
    c_extract->add_option("--fps", ex.fps, "Frame rate for raw YUV input")->capture_default_str();
    c_extract->add_option("--glcm-levels", ex.glcm_levels, "GLCM grey levels")->capture_default_str();

    TrainOpts tr;
    auto* c_train = app.add_subcommand("train", "Train a predictor bundle");
    c_train->add_option("--data", tr.data, "Dataset directory (train.tsv, optional test.tsv) or feature file")->required();
    c_train->add_option("--config", tr.config, "Predictor key-value config");
    c_train->add_option("--ablation", tr.ablation, "full | no_anchor_features | no_suspension | no_end2end");
    c_train->add_option("--seed", tr.seed, "Training seed")->capture_default_str();
    c_train->add_option("--epochs", tr.epochs, "Override the configured epoch count");
    c_train->add_option("--out", tr.out, "Output model bundle")->required();
    c_train->add_option("--report", tr.report, "Write the per-epoch report as CSV");
    c_train->add_flag("--quiet", tr.quiet, "No progress on stderr");

    PredictOpts pr;
    auto* c_predict = app.add_subcommand("predict", "Predict curves for every record");
    c_predict->add_option("--model", pr.model, "Model bundle")->required();
    c_predict->add_option("--features", pr.features, "Feature file")->required();
    c_predict->add_option("--out", pr.out, "Output CSV (default stdout)");

    RecommendOpts rc;
    auto* c_rec = app.add_subcommand("recommend", "Choose a CRF per record");
    c_rec->add_option("--model", rc.model, "Model bundle")->required();
    c_rec->add_option("--features", rc.features, "Feature file")->required();
    c_rec->add_option("--policy", rc.policy, "quality | slope")->capture_default_str();
    c_rec->add_option("--target", rc.target, "Target VMAF (quality policy)")->capture_default_str();
    c_rec->add_option("--threshold", rc.threshold, "VMAF per kbps knee threshold (slope policy)")->capture_default_str();
    c_rec->add_flag("--no-project", rc.no_project, "Skip monotone projection of the predicted curve");
    c_rec->add_option("--out", rc.out, "Output CSV (default stdout)");

    EvaluateOpts ev;
    auto* c_eval = app.add_subcommand("evaluate", "Curve MAE and VACC on a labeled set");
    c_eval->add_option("--model", ev.model, "Model bundle");
    c_eval->add_option("--data", ev.data, "Dataset directory (uses test.tsv) or feature file")->required();
    c_eval->add_option("--target", ev.target, "Target VMAF")->capture_default_str();
    c_eval->add_option("--tolerance", ev.tolerance, "VACC tolerance")->capture_default_str();
    c_eval->add_option("--json", ev.json, "Write the machine-readable report here");
    c_eval->add_flag("--dynamic", ev.dynamic, "Re-anchor each video at its 1-pass CRF (simulated ids only)");
    c_eval->add_flag("--ablation-suite", ev.suite, "Train and compare all four configurations");
    c_eval->add_option("--config", ev.config, "Predictor config for --ablation-suite");
    c_eval->add_option("--seeds", ev.seeds, "Comma-separated seeds for --ablation-suite")->capture_default_str();
    c_eval->add_option("--epochs", ev.epochs, "Override the epoch count for --ablation-suite");

    PlotOpts pl;
    auto* c_plot = app.add_subcommand("plot-data", "Predicted vs true curve CSV for one video");
    c_plot->add_option("--model", pl.model, "Model bundle")->required();
    c_plot->add_option("--features", pl.features, "Feature file")->required();
    c_plot->add_option("--truth", pl.truth, "Labeled feature file")->required();
    c_plot->add_option("--id", pl.id, "Record id (default: first record)");
    c_plot->add_option("--out", pl.out, "Output CSV (default stdout)");

    std::string section = "all";
    auto* c_show = app.add_subcommand("show-config", "Print every default");
    c_show->add_option("--section", section, "all | predictor | backend | features | strategy")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::string msg = e.what();
        for (char& c : msg)
            if (c == '\n') c = ' ';
        std::cerr << "error[usage]: " << msg << '\n';
        return kExitUsage;
    }

    try {
        if (c_synth->parsed()) run_synth(synth, jobs);
        else if (c_extract->parsed()) run_extract(ex, jobs);
        else if (c_train->parsed()) run_train(tr);
        else if (c_predict->parsed()) run_predict(pr);
        else if (c_rec->parsed()) run_recommend(rc);
        else if (c_eval->parsed()) run_evaluate(ev);
        else if (c_plot->parsed()) run_plot(pl);
        else if (c_show->parsed()) run_show_config(section);
    } catch (const std::exception& e) {
        return report_error(e);
    }
    return 0;
}
