#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rq/core.hpp"
#include "rq/pipeline.hpp"

namespace rq {

inline constexpr double kDefaultTargetVmaf = 91.0;
inline constexpr double kDefaultVaccTolerance = 1.0;

struct CurveMae {
    double vmaf = 0.0;
    double bitrate = 0.0;  // kbps
};

/// Mean |pred - truth| over every video and grid point, per channel.
CurveMae curve_mae(std::span<const RateQualityCurve> pred, std::span<const RateQualityCurve> truth);

/// Fraction of videos with |actual - target| < tolerance (strict).
double vacc(std::span<const double> actual_vmaf, double target = kDefaultTargetVmaf,
            double tolerance = kDefaultVaccTolerance);

struct VideoRow {
    std::string id;
    double d = 0.0;  // |actual vmaf - target|
    double selected_crf = 0.0;
    double actual_vmaf = 0.0;
};

struct EvalReport {
    std::string label;
    double vmaf_mae = 0.0;
    double bitrate_mae = 0.0;
    double vacc = 0.0;
    std::size_t n = 0;
    std::vector<VideoRow> rows;
};

/// Predicts every record, picks the CRF for `target` on each predicted curve and
/// reads the actual VMAF there from the record's ground truth.
EvalReport evaluate(const ModelBundle& model, const Dataset& data, double target = kDefaultTargetVmaf,
                    double tolerance = kDefaultVaccTolerance);

/// Same, with the anchor re-measured at the 1-pass CRF for `target` through
/// `backend` before the final prediction. Clip ids are the record ids.
EvalReport evaluate_dynamic(const ModelBundle& model, const Dataset& data, CodecBackend& backend,
                            double target = kDefaultTargetVmaf, double tolerance = kDefaultVaccTolerance);

struct AblationRow {
    Ablation ablation = Ablation::kFull;
    std::uint64_t seed = 0;
    EvalReport report;
    TrainingReport training;
};

struct AblationTable {
    std::vector<AblationRow> rows;
    /// Mean over seeds for `a`.
    EvalReport summary(Ablation a) const;
};

using ProgressCallback = std::function<void(Ablation, std::uint64_t seed, const EpochReport&)>;

/// Trains and evaluates every configuration in `ablations` on the same data for
/// every seed; all other settings come from `base`.
AblationTable run_ablation_suite(const Dataset& train_set, const Dataset& test_set, std::span<const std::uint64_t> seeds,
                                 const PredictorConfig& base, std::span<const Ablation> ablations = kAllAblations,
                                 const ProgressCallback& progress = {});

std::string format_report(const EvalReport& r);
std::string format_ablation_table(const AblationTable& t);
/// JSON objects for machine consumption.
std::string report_json(const EvalReport& r, bool with_rows = true);
std::string ablation_table_json(const AblationTable& t);

/// Header plus 101 rows: crf, pred_vmaf, true_vmaf, pred_bitrate, true_bitrate.
void emit_curve_csv(const RateQualityCurve& pred, const RateQualityCurve& truth, const std::filesystem::path& path);
std::string curve_csv(const RateQualityCurve& pred, const RateQualityCurve& truth);

struct CurveCsv {
    RateQualityCurve pred;
    RateQualityCurve truth;
};
CurveCsv read_curve_csv(const std::filesystem::path& path);

}  // namespace rq
