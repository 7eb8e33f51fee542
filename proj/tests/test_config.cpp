#include "doctest.h"

#include "ktie/config.hpp"
#include "ktie/errors.hpp"
#include "ktie/experiments.hpp"
#include "ktie/io.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ktie;

namespace {

// Problems reported for a configuration text, empty when it parses.
std::vector<std::string> problems_of(const std::string& text) {
    try {
        parse_config_string(text);
    } catch (const ConfigError& e) {
        return e.problems();
    }
    return {};
}

bool mentions(const std::vector<std::string>& problems, const std::string& fragment) {
    for (const auto& p : problems)
        if (p.find(fragment) != std::string::npos)
            return true;
    return false;
}

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("ktie_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}

} // namespace

TEST_CASE("an empty configuration is the default one") {
    const ExperimentConfig cfg = parse_config_string("");
    CHECK(cfg == ExperimentConfig{});
    CHECK(cfg.grid.dx == 0.1);
    CHECK(cfg.grid.n_v == 16);
    CHECK(cfg.grid.T == 4.0);
    CHECK(cfg.weight.s_multipliers == std::vector<double>{10, 20, 40, 80, 160});
}

TEST_CASE("parse, serialize, parse round-trips to an identical structure") {
    ExperimentConfig cfg;
    cfg.geometry.kind = "conformal";
    cfg.grid.T = 4.6;
    cfg.grid.dt = 0.025;
    cfg.coefficients.sigma = "lambda_bump";
    cfg.coefficients.sigma_amplitude = 0.1 + 0.2; // not exactly representable in short decimal
    cfg.weight.s_multipliers = {1.5, 3.0, 1.0 / 3.0 + 6.0};
    cfg.inversion.refined_data = true;
    cfg.seed = 18446744073709551615ull;
    cfg.output_dir = "some/dir";

    const std::string text = serialize_config(cfg);
    const ExperimentConfig back = parse_config_string(text);
    CHECK(back == cfg);
    CHECK(serialize_config(back) == text);
    CHECK(config_hash(back) == config_hash(cfg));
    CHECK(config_hash(cfg).size() == 16);

    ExperimentConfig other = cfg;
    other.seed = 2;
    CHECK(config_hash(other) != config_hash(cfg));
}

TEST_CASE("unknown sections and keys are errors, and every problem is reported") {
    const auto p = problems_of("[grid]\ndx = 0.1\nspacing = 3\n[solver]\ntolerance = 1\n[extras]\na = 1\n");
    CHECK(p.size() == 3);
    CHECK(mentions(p, "unknown key grid.spacing"));
    CHECK(mentions(p, "unknown key solver.tolerance"));
    CHECK(mentions(p, "unknown section [extras]"));

    const auto q = problems_of("[grid]\ndx = abc\n[coefficients]\nsigma = parabola\n[solver]\ntol = -1\n");
    CHECK(q.size() >= 3);
    CHECK(mentions(q, "grid.dx: cannot parse"));
    CHECK(mentions(q, "is not one of constant, gaussian_bump, linear_x, lambda_bump"));
    CHECK(mentions(q, "solver.tol must be positive"));
}

TEST_CASE("a short horizon names the T >= 2 D_metric rule") {
    const auto p = problems_of("[grid]\nT = 3\n");
    REQUIRE(p.size() == 1);
    CHECK(mentions(p, "T >= 2 D_metric"));

    // The conformal diameter exceeds 2, so the Euclidean default T = 4 is too short.
    CHECK(mentions(problems_of("[geometry]\nkind = conformal\n"), "T >= 2 D_metric"));
    CHECK(problems_of("[geometry]\nkind = conformal\n[grid]\nT = 4.6\n").empty());
}

TEST_CASE("an odd direction count fails the quadrature precondition") {
    const auto p = problems_of("[grid]\nn_v = 15\n");
    REQUIRE(p.size() == 1);
    CHECK(mentions(p, "grid.n_v"));
    CHECK(mentions(problems_of("[grid]\nn_v = 6\n"), "grid.n_v"));
}

TEST_CASE("grid and coefficient invariants") {
    CHECK(mentions(problems_of("[grid]\ndx = 0.3\n"), "2 R / grid.dx"));
    CHECK(mentions(problems_of("[grid]\ndt = 0.2\n"), "grid.dt must not exceed grid.dx"));
    CHECK(mentions(problems_of("[grid]\ndt = 0.03\n"), "multiple of grid.dt"));
    CHECK(mentions(problems_of("[geometry]\nkind = conformal\n[grid]\nT = 4.6\n[coefficients]\nmu = isotropic\n"),
                   "only supported on the Euclidean disk"));
    CHECK(mentions(problems_of("[weight]\nbeta = 0.5\n"), "0 < beta < gamma0"));
    CHECK(mentions(problems_of("[weight]\ns_multipliers = 10, 5\n"), "increasing"));
    CHECK(mentions(problems_of("seed = 3\n"), "outside any section"));
}

TEST_CASE("configuration files from disk") {
    const auto dir = scratch("cfg");
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir / "a.ini");
        os << "# comment line\n[run]\nseed = 7\n\n[coefficients]\nsigma_value = 1\n";
    }
    const ExperimentConfig cfg = parse_config(dir / "a.ini");
    CHECK(cfg.seed == 7);
    CHECK(cfg.coefficients.sigma_value == 1.0);
    CHECK_THROWS_AS(parse_config(dir / "missing.ini"), ConfigError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("catalog objects follow the configuration") {
    ExperimentConfig cfg;
    cfg.coefficients.sigma = "linear_x";
    cfg.coefficients.sigma_value = 0.5;
    cfg.coefficients.sigma_amplitude = 0.2;
    cfg.coefficients.mu = "separable";
    cfg.coefficients.mu_value = 0.1;
    cfg.data.initial = "probe";
    const CoefficientSet c = make_coefficients(cfg);
    CHECK(c.sigma({1.0, 0.0}, 0.0) == doctest::Approx(0.7));
    CHECK(c.mu.kind == Scattering::Kind::Separable);
    CHECK(c.mu({0.0, 0.0}, 0.0, 0.0) == doctest::Approx(0.15));

    const GridPtr g = make_grid(cfg);
    CHECK(g->n_levels() == 81);
    const GridPtr fine = make_refined_grid(cfg);
    CHECK(fine->dx() == doctest::Approx(0.05));
    CHECK(fine->horizon() == doctest::Approx(g->horizon()));
    CHECK(make_initial_data(cfg, g).min_value() > 0.0);
    CHECK(make_s_grid(cfg, 2.0).front() == doctest::Approx(5.0));
}

TEST_CASE("field dumps round-trip and artifact writers list their files") {
    ExperimentConfig cfg;
    cfg.grid.dx = 0.25;
    cfg.grid.n_v = 8;
    cfg.grid.dt = 0.25;
    const GridPtr g = make_grid(cfg);
    const Field f = Field::sample(g, [](double t, const Vec2& x, double th) { return t + x.x - std::sin(th); });

    const auto dir = scratch("io");
    ArtifactWriter out(dir);
    out.write_binary_field("f.bin", f);
    out.write("f.csv", [&](std::ostream& os) { write_field_csv(os, f); });
    CHECK(out.files() == std::vector<std::string>{"f.bin", "f.csv"});

    const Field back = read_field_binary(dir / "f.bin", g);
    CHECK(back.values() == f.values());
    CHECK(std::filesystem::file_size(dir / "f.bin") == 8 + 3 * 4 + 2 * 8 + f.values().size() * 8);

    std::ifstream csv(dir / "f.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "t,x1,x2,theta,value");

    ExperimentConfig other = cfg;
    other.grid.n_v = 16;
    CHECK_THROWS_AS(read_field_binary(dir / "f.bin", make_grid(other)), GridMismatch);
    std::filesystem::remove_all(dir);
}

TEST_CASE("forward runs write a complete manifest and identical bytes on repeat") {
    ExperimentConfig cfg = parse_config_string("[grid]\ndx = 0.2\nn_v = 8\ndt = 0.1\n[coefficients]\nsigma_value = 1\n");
    cfg.output_dir = scratch("run_a").string();
    const RunManifest a = run("forward", cfg);
    CHECK(a.exit_code == kExitOk);
    for (const auto& f : a.files)
        CHECK(std::filesystem::exists(std::filesystem::path(cfg.output_dir) / f));
    CHECK(std::find(a.files.begin(), a.files.end(), "comparison.csv") != a.files.end());

    std::ifstream js(std::filesystem::path(cfg.output_dir) / "manifest.json");
    const auto j = nlohmann::json::parse(js);
    CHECK(j["config_hash"] == config_hash(cfg));
    CHECK(j["stages"].size() == a.stages.size());

    const auto read = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    ExperimentConfig again = cfg;
    again.output_dir = scratch("run_b").string();
    const RunManifest b = run("forward", again);
    for (const auto& f : a.files)
        if (f != "manifest.json" && f != "config.ini")
            CHECK(read(std::filesystem::path(cfg.output_dir) / f) == read(std::filesystem::path(again.output_dir) / f));
    CHECK(b.config_hash != a.config_hash); // output_dir is part of the configuration

    CHECK_THROWS_AS(run("unknown", cfg), ConfigError);
    std::filesystem::remove_all(cfg.output_dir);
    std::filesystem::remove_all(again.output_dir);
}

TEST_CASE("failing checks and solver errors map onto exit codes") {
    ExperimentConfig cfg = parse_config_string("[grid]\ndx = 0.2\nn_v = 8\ndt = 0.1\n");
    cfg.output_dir = scratch("codes").string();

    // Two Picard sweeps cannot reach the tolerance under strong scattering.
    cfg.coefficients.mu = "isotropic";
    cfg.coefficients.mu_value = 0.45;
    cfg.solver.max_iter = 2;
    const RunManifest m = run("forward", cfg);
    CHECK(m.exit_code == kExitNonConvergence);
    CHECK(m.stages.front().status == "error");

    // Supercritical scattering is a precondition failure of the configuration.
    cfg.solver.max_iter = 1000;
    cfg.coefficients.mu_value = 0.8;
    CHECK(run("forward", cfg).exit_code == kExitConfig);
    std::filesystem::remove_all(cfg.output_dir);
}
