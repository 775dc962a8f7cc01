// Command-line front end: generate / run / sweep / boundary / dump-features /
// resume. Exit codes: 0 success, 2 config error, 3 numeric failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "chi/runner.hpp"

namespace fs = std::filesystem;

namespace {

chi::ExperimentConfig load_config(const std::string& path,
                                  const std::vector<std::string>& overrides) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw chi::ConfigError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    chi::KeyValueConfig kv = chi::KeyValueConfig::parse(buf.str(), path);
    std::string text = buf.str();
    if (!overrides.empty()) {
        for (const std::string& o : overrides) kv.override_key(o);
        text = kv.to_text();  // snapshot with overrides folded in
    }
    return chi::parse_experiment_config(kv, text);
}

chi::ExperimentConfig config_from_checkpoint(const chi::ArrayFile& file) {
    if (file.text.empty()) throw chi::ConfigError("checkpoint: missing config snapshot");
    return chi::parse_experiment_config(chi::KeyValueConfig::parse(file.text, "<checkpoint>"),
                                        file.text);
}

int cmd_generate(const std::string& config_path, const std::vector<std::string>& overrides,
                 const std::string& out_path) {
    chi::ExperimentConfig cfg = load_config(config_path, overrides);
    chi::Dataset ds = chi::generate_dataset(cfg.dataset, cfg.train.master_seed);
    chi::write_array_file(out_path, chi::kDatasetMagic, chi::dataset_to_file(ds));
    std::cout << "wrote " << out_path << " (" << ds.samples.size() << " samples, "
              << ds.generator << ")\n";
    return 0;
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides) {
    chi::ExperimentConfig cfg = load_config(config_path, overrides);
    chi::RunResult result = chi::run_experiment(cfg, std::cout);
    std::cout << "artifacts in " << result.out_dir.string() << "\n";
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& methods, const std::string& ratios, const std::string& seeds) {
    chi::ExperimentConfig cfg = load_config(config_path, overrides);
    auto split_list = [](const std::string& csv) {
        std::vector<std::string> out;
        std::istringstream in(csv);
        std::string tok;
        while (std::getline(in, tok, ','))
            if (!tok.empty()) out.push_back(tok);
        return out;
    };
    if (!methods.empty()) cfg.sweep.methods = split_list(methods);
    if (!ratios.empty()) {
        cfg.sweep.ratios.clear();
        for (const std::string& tok : split_list(ratios)) cfg.sweep.ratios.push_back(std::stod(tok));
    }
    if (!seeds.empty()) {
        cfg.sweep.seeds.clear();
        for (const std::string& tok : split_list(seeds)) cfg.sweep.seeds.push_back(std::stoull(tok));
    }
    auto cells = chi::run_sweep(cfg, std::cout);
    const fs::path out_dir = chi::resolve_output_dir(cfg.output);
    fs::create_directories(out_dir);
    chi::Dataset probe = chi::materialize_dataset(cfg);
    chi::write_sweep_csv(out_dir / "sweep.csv", cells, probe.task);
    std::cout << "wrote " << (out_dir / "sweep.csv").string() << "\n";
    return 0;
}

int cmd_boundary(const std::string& checkpoint_path, const std::string& out_path,
                 std::size_t resolution, const std::string& pgm_path,
                 const std::vector<double>& bounds) {
    chi::ArrayFile file = chi::read_array_file(checkpoint_path, chi::kCheckpointMagic);
    chi::ExperimentConfig cfg = config_from_checkpoint(file);
    chi::Dataset ds = chi::materialize_dataset(cfg);
    chi::ModelBundle bundle = chi::build_model(cfg, ds);
    chi::load_params(bundle, file);
    chi::Rect rect{-1.5, 2.5, -1.0, 1.5};
    if (bounds.size() == 4) rect = chi::Rect{bounds[0], bounds[1], bounds[2], bounds[3]};
    chi::BoundaryGrid grid = chi::decision_boundary_grid(bundle, rect, resolution);
    chi::write_boundary_csv(out_path, grid);
    if (!pgm_path.empty()) chi::write_boundary_pgm(pgm_path, grid);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_dump_features(const std::string& checkpoint_path, const std::string& out_path) {
    chi::ArrayFile file = chi::read_array_file(checkpoint_path, chi::kCheckpointMagic);
    chi::ExperimentConfig cfg = config_from_checkpoint(file);
    chi::Dataset ds = chi::materialize_dataset(cfg);
    chi::DatasetSplit split = chi::split_labeled(ds, cfg.dataset.split, cfg.train.master_seed);
    chi::ModelBundle bundle = chi::build_model(cfg, ds);
    chi::load_params(bundle, file);
    chi::write_features_csv(out_path, chi::dump_features(bundle, split), split);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_resume(const std::string& checkpoint_path, std::optional<std::size_t> epochs,
               const std::string& out_dir) {
    chi::ArrayFile file = chi::read_array_file(checkpoint_path, chi::kCheckpointMagic);
    chi::ExperimentConfig cfg = config_from_checkpoint(file);
    if (epochs) cfg.train.epochs = *epochs;
    if (!out_dir.empty()) cfg.output.dir = out_dir;
    chi::RunResult result = chi::run_experiment(cfg, std::cout, fs::path(checkpoint_path));
    std::cout << "artifacts in " << result.out_dir.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"chi-model: data- and model-stochasticity training on synthetic benchmarks"};
    app.require_subcommand(1);

    std::string config_path, out_path, checkpoint_path, pgm_path;
    std::string methods, ratios, seeds, out_dir;
    std::vector<std::string> overrides;
    std::vector<double> bounds;
    std::size_t resolution = 100;
    std::optional<std::size_t> epochs;

    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("--config,-c", config_path, "experiment config file")->required();
        cmd->add_option("--set", overrides, "override a key: section.key=value");
    };

    CLI::App* generate = app.add_subcommand("generate", "generate a dataset and export it");
    add_config(generate);
    generate->add_option("--out,-o", out_path, "output dataset file")->required();

    CLI::App* run = app.add_subcommand("run", "run one experiment");
    add_config(run);

    CLI::App* sweep = app.add_subcommand("sweep", "run a (method, ratio, seed) grid");
    add_config(sweep);
    sweep->add_option("--methods", methods, "comma-separated methods");
    sweep->add_option("--ratios", ratios, "comma-separated label ratios");
    sweep->add_option("--seeds", seeds, "comma-separated master seeds");

    CLI::App* boundary = app.add_subcommand("boundary", "evaluate a decision-boundary grid");
    boundary->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    boundary->add_option("--out,-o", out_path, "output csv")->required();
    boundary->add_option("--resolution", resolution, "lattice resolution");
    boundary->add_option("--pgm", pgm_path, "also write a PGM raster");
    boundary->add_option("--bounds", bounds, "x0 x1 y0 y1")->expected(4);

    CLI::App* features = app.add_subcommand("dump-features", "dump extractor features");
    features->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    features->add_option("--out,-o", out_path, "output csv")->required();

    CLI::App* resume = app.add_subcommand("resume", "continue training from a checkpoint");
    resume->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    resume->add_option("--epochs", epochs, "train to this epoch count");
    resume->add_option("--out-dir", out_dir, "override the output directory");

    try {
        app.parse(argc, argv);
        if (generate->parsed()) return cmd_generate(config_path, overrides, out_path);
        if (run->parsed()) return cmd_run(config_path, overrides);
        if (sweep->parsed()) return cmd_sweep(config_path, overrides, methods, ratios, seeds);
        if (boundary->parsed())
            return cmd_boundary(checkpoint_path, out_path, resolution, pgm_path, bounds);
        if (features->parsed()) return cmd_dump_features(checkpoint_path, out_path);
        if (resume->parsed()) return cmd_resume(checkpoint_path, epochs, out_dir);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const chi::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const chi::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
