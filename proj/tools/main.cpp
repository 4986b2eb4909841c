// r2v: render coarse 3D guidance and synthesize guided video with small
// trainable diffusion models. Subcommands follow the pipeline stages:
//   render | train | customize | keyframes | interpolate | evaluate | demo

#include "r2v/pipeline.hpp"

#include <CLI11.hpp>

using namespace r2v;

int main(int argc, char** argv) {
    CLI::App app{"render2video: 3D-guided two-stage video synthesis at desk scale"};
    app.require_subcommand(1);
    app.fallthrough();  // common options may follow the subcommand

    std::string config_path;
    std::string out_dir = "out";
    std::string cache = "on";
    std::optional<uint64_t> seed;

    app.add_option("--config", config_path, "run configuration JSON")->required();
    app.add_option("--out", out_dir, "output directory (default: out)");
    app.add_option("--seed", seed, "override the config seed");
    app.add_option("--stage-cache", cache, "stage cache: on|off (default on)")
        ->check(CLI::IsMember({"on", "off"}));

    auto* c_render = app.add_subcommand("render", "rasterize the scene into guidance packs");
    auto* c_train = app.add_subcommand("train", "train the toy denoisers and depth estimator");
    auto* c_customize = app.add_subcommand("customize", "LoRA-customize the image model");
    auto* c_keyframes = app.add_subcommand("keyframes", "generate 3D-guided keyframes");
    auto* c_interpolate = app.add_subcommand("interpolate", "bidirectional guided interpolation");
    auto* c_evaluate = app.add_subcommand("evaluate", "compute the metric report");
    auto* c_demo = app.add_subcommand("demo", "run every stage end to end and print the report");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        RunConfig cfg = RunConfig::load(config_path, out_dir, seed, cache == "on");
        OutputLock lock(cfg.out_dir);
        Pipeline pipe(cfg);

        if (c_render->parsed()) {
            pipe.cmd_render();
        } else if (c_train->parsed()) {
            pipe.cmd_train();
        } else if (c_customize->parsed()) {
            pipe.cmd_customize();
        } else if (c_keyframes->parsed()) {
            pipe.cmd_keyframes();
        } else if (c_interpolate->parsed()) {
            pipe.cmd_interpolate();
        } else if (c_evaluate->parsed()) {
            pipe.cmd_evaluate();
        } else if (c_demo->parsed()) {
            pipe.cmd_demo();
        }
        return 0;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const DependencyError& e) {
        std::fprintf(stderr, "dependency error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const TrainingError& e) {
        std::fprintf(stderr, "training failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
