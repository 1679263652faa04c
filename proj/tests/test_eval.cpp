#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rq/error.hpp"
#include "rq/eval.hpp"
#include "rq/random.hpp"
#include "rq/simcodec.hpp"
#include "test_util.hpp"

using namespace rq;

namespace {

RateQualityCurve offset_curve(const RateQualityCurve& c, double dv, double dr) {
    std::vector<double> v(c.vmaf().begin(), c.vmaf().end()), r(c.bitrate().begin(), c.bitrate().end());
    for (auto& x : v) x += dv;
    for (auto& x : r) x += dr;
    return {v, r};
}

PredictorConfig small_config() {
    PredictorConfig c;
    c.train.hidden = 32;
    c.train.residual_blocks = 1;
    c.train.epochs = 5;
    return c;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("curve MAE") {
    const auto a = sim::curve_gt(sim::make_latent(1).theta);
    const std::vector<RateQualityCurve> truth{a, a};
    const std::vector<RateQualityCurve> same{a, a};
    CHECK(curve_mae(same, truth).vmaf == 0.0);
    const std::vector<RateQualityCurve> shifted{offset_curve(a, 0.5, -10.0), offset_curve(a, -0.5, 10.0)};
    const auto m = curve_mae(shifted, truth);
    CHECK(m.vmaf == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(m.bitrate == doctest::Approx(10.0).epsilon(1e-12));

    Rng rng(4);
    std::vector<RateQualityCurve> p, t;
    for (int i = 0; i < 7; ++i) {
        t.push_back(sim::curve_gt(sim::make_latent(std::uint64_t(i)).theta));
        std::vector<double> v(CrfGrid::kCount), r(CrfGrid::kCount);
        for (auto& x : v) x = rng.uniform(0.0, 100.0);
        for (auto& x : r) x = rng.uniform(0.0, 9000.0);
        p.emplace_back(v, r);
    }
    double sv = 0.0;
    for (int i = 0; i < 7; ++i)
        for (std::size_t k = 0; k < CrfGrid::kCount; ++k) sv += std::abs(p[std::size_t(i)].vmaf_at(k) - t[std::size_t(i)].vmaf_at(k));
    CHECK(curve_mae(p, t).vmaf == doctest::Approx(sv / (7.0 * 101.0)).epsilon(1e-12));

    CHECK_THROWS_AS(curve_mae(std::vector<RateQualityCurve>{a}, truth), ShapeError);
    CHECK_THROWS_AS(curve_mae(std::vector<RateQualityCurve>{}, std::vector<RateQualityCurve>{}), ShapeError);
}

TEST_CASE("VACC counts strictly inside the tolerance") {
    const std::vector<double> actual{91.5, 92.0, 92.5};
    CHECK(vacc(actual, 91.0, 1.0) == doctest::Approx(1.0 / 3.0));
    const std::vector<double> below{90.5, 90.0, 89.5};
    CHECK(vacc(below, 91.0, 1.0) == doctest::Approx(1.0 / 3.0));
    CHECK(vacc(std::vector<double>{91.0}) == 1.0);
    CHECK_THROWS_AS(vacc(std::vector<double>{}), ShapeError);

    Rng rng(9);
    std::vector<double> v(1000);
    std::size_t hits = 0;
    for (auto& x : v) {
        x = 91.0 + rng.uniform(-3.0, 3.0);
        if (x > 90.0 && x < 92.0) ++hits;
    }
    CHECK(vacc(v) == doctest::Approx(double(hits) / 1000.0).epsilon(1e-15));
}

TEST_CASE("curve CSV") {
    rqtest::TempDir dir;
    const auto truth = sim::curve_gt(sim::make_latent(77).theta);
    const auto pred = offset_curve(truth, 0.3, 12.5);
    const auto path = dir / "curve.csv";
    emit_curve_csv(pred, truth, path);

    std::ifstream in(path);
    std::string line;
    std::size_t lines = 0;
    std::getline(in, line);
    CHECK(line == "crf,pred_vmaf,true_vmaf,pred_bitrate,true_bitrate");
    ++lines;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 102);

    const auto back = read_curve_csv(path);
    const auto theta = sim::make_latent(77).theta;
    for (std::size_t i = 0; i < CrfGrid::kCount; ++i) {
        const double crf = CrfGrid::crf_of(std::ptrdiff_t(i));
        CHECK(back.pred.vmaf_at(i) == doctest::Approx(pred.vmaf_at(i)).epsilon(1e-9));
        CHECK(back.pred.bitrate_at(i) == doctest::Approx(pred.bitrate_at(i)).epsilon(1e-9));
        CHECK(back.truth.vmaf_at(i) == doctest::Approx(100.0 / (1.0 + std::exp(theta.k * (crf - theta.v_mid)))).epsilon(1e-9));
        CHECK(back.truth.bitrate_at(i) == doctest::Approx(theta.r20 * std::exp(-theta.rho * (crf - 20.0))).epsilon(1e-9));
    }

    std::ofstream(dir / "bad.csv") << "crf,pred_vmaf,true_vmaf,pred_bitrate,true_bitrate\n20.0,1,2,3\n";
    CHECK_THROWS_AS(read_curve_csv(dir / "bad.csv"), IoError);
    std::ofstream(dir / "short.csv") << "crf,pred_vmaf,true_vmaf,pred_bitrate,true_bitrate\n20.0,1,2,3,4\n";
    CHECK_THROWS_AS(read_curve_csv(dir / "short.csv"), IoError);
}

TEST_CASE("evaluation reads actual quality from the ground truth") {
    const auto split = sim::synth_dataset(30, 20, 5);
    const auto train_set = sim::to_dataset(split.train);
    const auto test_set = sim::to_dataset(split.test);
    const auto model = train(train_set, small_config(), 3);
    const auto rep = evaluate(model, test_set);
    CHECK(rep.label == "full");
    CHECK(rep.n == 20);
    REQUIRE(rep.rows.size() == 20);
    const auto pred = predict(model, test_set.records);
    std::vector<double> actual;
    for (std::size_t i = 0; i < 20; ++i) {
        const auto& row = rep.rows[i];
        CHECK(row.id == test_set.records[i].id);
        CHECK(row.selected_crf == crf_for_target_vmaf(pred[i], 91.0).crf);
        CHECK(row.actual_vmaf == test_set.records[i].truth->vmaf_at(CrfGrid::index_of(row.selected_crf)));
        CHECK(row.d == doctest::Approx(std::abs(row.actual_vmaf - 91.0)));
        actual.push_back(row.actual_vmaf);
    }
    CHECK(rep.vacc == vacc(actual));
    std::vector<RateQualityCurve> truth;
    for (const auto& r : test_set.records) truth.push_back(*r.truth);
    CHECK(rep.vmaf_mae == curve_mae(pred, truth).vmaf);

    const auto j = nlohmann::json::parse(report_json(rep));
    CHECK(j["n"] == 20);
    CHECK(j["videos"].size() == 20);
    CHECK(j["vacc"].get<double>() == doctest::Approx(rep.vacc));
    CHECK_FALSE(nlohmann::json::parse(report_json(rep, false)).contains("videos"));
    const auto text = format_report(rep);
    CHECK(text.find("VMAF MAE") != std::string::npos);
    CHECK(text.find("VACC") != std::string::npos);

    sim::SimBackend backend;
    const auto dyn = evaluate_dynamic(model, test_set, backend);
    CHECK(dyn.label == "full+dynamic");
    CHECK(dyn.n == 20);

    auto unlabeled = test_set;
    unlabeled.records[0].truth.reset();
    CHECK_THROWS_AS(evaluate(model, unlabeled), SchemaError);
}

TEST_CASE("ablation suite smoke run") {
    const auto split = sim::synth_dataset(50, 20, 8);
    const auto train_set = sim::to_dataset(split.train);
    const auto test_set = sim::to_dataset(split.test);
    const std::uint64_t seeds[] = {1};
    const auto t1 = run_ablation_suite(train_set, test_set, seeds, small_config());
    const auto t2 = run_ablation_suite(train_set, test_set, seeds, small_config());
    REQUIRE(t1.rows.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(t1.rows[i].ablation == kAllAblations[i]);
        CHECK(std::isfinite(t1.rows[i].report.vmaf_mae));
        CHECK(t1.rows[i].report.vmaf_mae == t2.rows[i].report.vmaf_mae);
        CHECK(t1.rows[i].report.vacc == t2.rows[i].report.vacc);
    }
    CHECK(t1.rows[3].training.epochs.size() == 10);
    const auto table = format_ablation_table(t1);
    for (auto a : kAllAblations) CHECK(table.find(to_string(a)) != std::string::npos);
    const auto j = nlohmann::json::parse(ablation_table_json(t1));
    CHECK(j["rows"].size() == 4);
    CHECK(t1.summary(Ablation::kFull).vmaf_mae == t1.rows[0].report.vmaf_mae);
    CHECK_THROWS_AS(run_ablation_suite(train_set, test_set, {}, small_config()), ConfigError);
}

}  // TEST_SUITE
