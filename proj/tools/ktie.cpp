// Command-line driver:
//   ktie <forward|linearize|carleman-check|invert|stability> --config <path> [--seed N] [--out DIR]
// The output directory is, in order of precedence, --out, $KTIE_OUTPUT_DIR,
// then output_dir from the configuration.

#include "ktie/config.hpp"
#include "ktie/errors.hpp"
#include "ktie/experiments.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>

int main(int argc, char** argv) {
    CLI::App app{"Kinetic transport inverse-problem experiments"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    for (const auto& name : ktie::subcommands()) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "experiment configuration (INI)")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "override the configured seed");
        sub->add_option("--out", out_dir, "output directory");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : ktie::kExitConfig;
    }
    const std::string subcommand = app.get_subcommands().front()->get_name();

    try {
        ktie::ExperimentConfig cfg = ktie::parse_config(config_path);
        if (seed)
            cfg.seed = *seed;
        if (const char* env = std::getenv("KTIE_OUTPUT_DIR"); env && *env)
            cfg.output_dir = env;
        if (out_dir)
            cfg.output_dir = *out_dir;

        const ktie::RunManifest m = ktie::run(subcommand, cfg);
        for (const auto& st : m.stages)
            std::cout << st.name << ": " << st.status << (st.message.empty() ? "" : " (" + st.message + ")") << " ["
                      << st.seconds << " s]\n";
        std::cout << "manifest: " << (m.output_dir / "manifest.json").string() << '\n';
        return m.exit_code;
    } catch (const ktie::ConfigError& e) {
        std::cerr << "configuration error:\n";
        for (const auto& p : e.problems())
            std::cerr << "  " << p << '\n';
        return ktie::kExitConfig;
    } catch (const ktie::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return ktie::kExitCheckFailed;
    }
}
