#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "kctrace/eval.hpp"
#include "kctrace/synthetic.hpp"

using namespace kctrace;

namespace {

const CellMetrics& cell_of(const EvalReport& r, const std::string& source,
                           const std::string& model, const std::string& regime) {
    for (const auto& c : r.cells)
        if (c.kc_source == source && c.model == model && c.regime == regime) return c;
    FAIL("cell not found: " + source + "/" + model + "/" + regime);
    static CellMetrics dummy;
    return dummy;
}

SyntheticData small_world(std::uint64_t seed, double gamma_sd = 0.2) {
    SyntheticSpec spec;
    spec.n_students = 60;
    spec.n_items = 20;
    spec.n_kcs = 5;
    spec.opportunities = 20;
    spec.gamma_sd = gamma_sd;
    spec.seed = seed;
    return generate_synthetic(spec);
}

}  // namespace

TEST_CASE("afm eval touches every covered row exactly once per regime") {
    auto world = small_world(3);
    auto report = run_afm_eval(world.dataset, world.q,
                               {Regime::Stratified, Regime::StudentBlocked, Regime::ItemBlocked},
                               3, 7, "true");
    REQUIRE(report.cells.size() == 3);
    for (const auto& c : report.cells) {
        REQUIRE(c.n_rows == world.dataset.interactions.size());
        REQUIRE(c.present);
        // pooled MSE equals the row-weighted aggregate of fold MSEs
        double agg = 0.0;
        std::size_t n = 0;
        for (std::size_t f = 0; f < c.fold_rmse.size(); ++f) {
            agg += c.fold_rmse[f] * c.fold_rmse[f] * static_cast<double>(c.fold_rows[f]);
            n += c.fold_rows[f];
        }
        REQUIRE(n == c.n_rows);
        REQUIRE(std::sqrt(agg / static_cast<double>(n)) == Catch::Approx(c.rmse).epsilon(1e-12));
    }
}

TEST_CASE("afm on the true q-matrix approaches the bayes floor") {
    auto world = small_world(11);
    auto report =
        run_afm_eval(world.dataset, world.q, {Regime::Stratified}, 3, 7, "true");
    const auto& c = cell_of(report, "true", "AFM", "stratified");
    // can't beat the generator's noise floor, and should get close to it
    REQUIRE(c.rmse >= world.bayes_rmse - 0.005);
    REQUIRE(c.rmse <= world.bayes_rmse + 0.05);
}

TEST_CASE("true q-matrix beats a random one under item-blocked cv") {
    auto world = small_world(19);
    auto rand_q =
        random_qmatrix(world.q, 99);
    auto t = run_afm_eval(world.dataset, world.q, {Regime::ItemBlocked}, 3, 7, "true");
    auto r = run_afm_eval(world.dataset, rand_q, {Regime::ItemBlocked}, 3, 7, "random");
    double rmse_true = cell_of(t, "true", "AFM", "item_blocked").rmse;
    double rmse_rand = cell_of(r, "random", "AFM", "item_blocked").rmse;
    REQUIRE(rmse_true < rmse_rand);
}

TEST_CASE("regimes order from easiest to hardest") {
    // KC-sparse world: ~2 items per KC, so item folds mask skills the way
    // student folds mask abilities, and the difficulty ranking has teeth
    SyntheticSpec spec;
    spec.n_students = 150;
    spec.n_items = 60;
    spec.n_kcs = 30;
    spec.opportunities = 30;
    spec.theta_sd = 0.7;
    spec.beta_sd = 2.5;
    spec.gamma_sd = 0.2;
    spec.seed = 7;
    auto world = generate_synthetic(spec);
    auto report = run_afm_eval(world.dataset, world.q,
                               {Regime::Stratified, Regime::StudentBlocked, Regime::ItemBlocked},
                               3, 7, "true");
    double strat = cell_of(report, "true", "AFM", "stratified").rmse;
    double stud = cell_of(report, "true", "AFM", "student_blocked").rmse;
    double item = cell_of(report, "true", "AFM", "item_blocked").rmse;
    REQUIRE(strat <= stud + 0.005);
    REQUIRE(stud <= item + 0.005);
}

TEST_CASE("zero-shot regime works inside run_afm_eval") {
    auto world = small_world(29);
    auto report =
        run_afm_eval(world.dataset, world.q, {Regime::ZeroshotItemDisjoint}, 5, 7, "true");
    const auto& c = cell_of(report, "true", "AFM", "zeroshot_item_disjoint");
    REQUIRE(c.present);
    REQUIRE(c.n_rows > 0);
    REQUIRE(c.n_rows < world.dataset.interactions.size());  // only the test items scored
}

TEST_CASE("kt grid marks invalid cells and scores the rest") {
    auto world = small_world(31);
    auto rand_q = random_qmatrix(world.q, 55);
    KtOptions opt;
    opt.epochs = 3;  // keep the neural cells quick; quality tested elsewhere
    opt.seed = 13;
    std::vector<std::pair<std::string, const QMatrix*>> sources = {
        {"none", nullptr}, {"random", &rand_q}, {"llm", &world.q}};
    std::vector<std::string> models = {"IRT", "PFA", "DAS3H", "DKT", "SAKT"};
    auto report = run_kt_eval(world.dataset, sources, models, opt);
    REQUIRE(report.cells.size() == 15);  // every cell present in the grid, none skipped
    REQUIRE(cell_of(report, "none", "IRT", "student_blocked").present);
    REQUIRE(!cell_of(report, "none", "PFA", "student_blocked").present);
    REQUIRE(!cell_of(report, "none", "DKT", "student_blocked").present);
    REQUIRE(!cell_of(report, "llm", "IRT", "student_blocked").present);
    for (const auto& src : {"random", "llm"}) {
        for (const auto& m : {"PFA", "DAS3H", "DKT", "SAKT"}) {
            const auto& c = cell_of(report, src, m, "student_blocked");
            REQUIRE(c.present);
            REQUIRE(c.auc.has_value());
            REQUIRE(c.n_rows > 0);
        }
    }
    // held-out rows only: every scored row belongs to a fold-0 student
    auto plan = make_split(world.dataset, Regime::StudentBlocked, opt.folds, opt.seed);
    std::map<std::string, int> fold;
    for (std::size_t i = 0; i < world.dataset.interactions.size(); ++i)
        fold[world.dataset.interactions[i].student_id] = plan.assignments[i];
    std::size_t test_rows = 0;
    for (const auto& [s, f] : fold)
        if (f == 0)
            for (const auto& r : world.dataset.interactions)
                if (r.student_id == s) ++test_rows;
    REQUIRE(cell_of(report, "llm", "PFA", "student_blocked").n_rows == test_rows);
}

TEST_CASE("true skills beat random skills for pfa by a clear auc margin") {
    // single-KC items with strong learning: practice counters carry real
    // signal under the true assignment and none under a shuffled one
    SyntheticSpec spec;
    spec.n_students = 200;
    spec.n_items = 60;
    spec.n_kcs = 12;
    spec.kc_min = 1;
    spec.kc_max = 1;
    spec.opportunities = 60;
    spec.gamma_sd = 0.5;
    spec.seed = 38;
    auto world = generate_synthetic(spec);
    auto rand_q = random_qmatrix(world.q, 77);
    KtOptions opt;
    opt.seed = 13;
    std::vector<std::pair<std::string, const QMatrix*>> sources = {{"random", &rand_q},
                                                                   {"llm", &world.q}};
    auto report = run_kt_eval(world.dataset, sources, {"PFA"}, opt);
    double auc_true = *cell_of(report, "llm", "PFA", "student_blocked").auc;
    double auc_rand = *cell_of(report, "random", "PFA", "student_blocked").auc;
    REQUIRE(auc_true >= auc_rand + 0.05);
}

TEST_CASE("renderers produce complete tables") {
    auto world = small_world(41);
    auto rand_q = random_qmatrix(world.q, 55);
    KtOptions opt;
    opt.epochs = 2;
    std::vector<std::pair<std::string, const QMatrix*>> sources = {{"none", nullptr},
                                                                   {"llm", &world.q}};
    auto kt = run_kt_eval(world.dataset, sources, {"IRT", "PFA", "DKT"}, opt);
    auto auc_table = render_auc_table(kt);
    REQUIRE(auc_table.find("IRT") != std::string::npos);
    REQUIRE(auc_table.find("none") != std::string::npos);
    REQUIRE(auc_table.find("-") != std::string::npos);  // absent cells marked

    auto afm = run_afm_eval(world.dataset, world.q,
                            {Regime::Stratified, Regime::ItemBlocked}, 3, 7, "llm");
    auto rmse_table = render_rmse_table(afm);
    REQUIRE(rmse_table.find("stratified") != std::string::npos);
    REQUIRE(rmse_table.find("item_blocked") != std::string::npos);

    auto csv = report_to_csv(kt);
    REQUIRE(csv.find("kc_source,model,regime") == 0);
    auto j = eval_report_to_json(kt);
    REQUIRE(j.at("cells").size() == kt.cells.size());

    std::vector<KCurveRow> rows = {{12, 100.0, 0.4, 0.41, 0.42, 0.46}, {13, 90.0, 0.5, {}, {}, {}}};
    auto curves = curves_to_csv(rows);
    REQUIRE(curves.find("k,wcss,silhouette") == 0);
    REQUIRE(curves.find("12,100,0.4,0.41,0.42,0.46") != std::string::npos);
    REQUIRE(curves.find("13,90,0.5,,,") != std::string::npos);
}

TEST_CASE("prediction tables carry clipped probabilities and fold tags") {
    auto world = small_world(47);
    auto report = run_afm_eval(world.dataset, world.q, {Regime::Stratified}, 3, 7, "true");
    REQUIRE(report.predictions.size() == world.dataset.interactions.size());
    for (const auto& r : report.predictions) {
        REQUIRE(r.p >= 1e-6);
        REQUIRE(r.p <= 1.0 - 1e-6);
        REQUIRE((r.y == 0 || r.y == 1));
        REQUIRE(r.fold >= 0);
        REQUIRE(r.fold < 3);
        REQUIRE(r.regime == "stratified");
        REQUIRE(!r.student_id.empty());
        REQUIRE(!r.item_id.empty());
    }
}

TEST_CASE("eval is deterministic") {
    auto world = small_world(53);
    auto a = run_afm_eval(world.dataset, world.q, {Regime::StudentBlocked}, 3, 7, "true");
    auto b = run_afm_eval(world.dataset, world.q, {Regime::StudentBlocked}, 3, 7, "true");
    REQUIRE(a.cells[0].rmse == b.cells[0].rmse);
    REQUIRE(a.cells[0].fold_rmse == b.cells[0].fold_rmse);
}
