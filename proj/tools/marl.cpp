// marl: command-line front end for the archetype pipeline.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "marl/pipeline.hpp"

namespace {

int fail(const std::string& code, const std::string& message, const std::string& stage, int exit_code) {
    const nlohmann::json err{{"status", "error"}, {"error", code}, {"message", message}, {"stage", stage}};
    std::cout << err.dump() << std::endl;
    return exit_code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Building archetype learning and stock energy estimation"};
    app.set_version_flag("--version", std::string(marl::pipeline::kToolVersion));
    app.require_subcommand(1, 1);

    std::string config_path;
    std::vector<std::string> overrides;
    for (const auto& name : marl::pipeline::stage_names()) {
        auto* sub = app.add_subcommand(name, "run the " + name + " stage");
        sub->add_option("--config", config_path, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--override", overrides, "dotted key=value applied on top of the config");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage_error", e.what(), "", 2);
    }

    const std::string stage = app.get_subcommands().front()->get_name();
    try {
        const auto cfg = marl::pipeline::RunConfig::load(config_path, overrides);
        const auto result = marl::pipeline::run_stage(stage, cfg);
        if (stage == "evaluate") {
            std::cout << result.dump(2) << std::endl;
        } else {
            std::cout << nlohmann::json{{"status", "ok"}, {"stage", stage}, {"result", result}}.dump() << std::endl;
        }
        return 0;
    } catch (const marl::Error& e) {
        return fail(e.code(), e.what(), stage, 2);
    } catch (const nlohmann::json::exception& e) {
        return fail("configuration_error", e.what(), stage, 2);
    } catch (const std::exception& e) {
        return fail("internal_error", e.what(), stage, 3);
    }
}
