// t2is: train the toy model, generate image sets, dump masks, evaluate,
// sweep divide ratios and summarise corpora.

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "t2is/bench.hpp"
#include "t2is/checkpoint.hpp"
#include "t2is/evalkit.hpp"
#include "t2is/image_io.hpp"
#include "t2is/layout.hpp"
#include "t2is/recaption.hpp"
#include "t2is/setgen.hpp"
#include "t2is/shapes.hpp"
#include "t2is/sweep.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace t2is;

namespace {

constexpr int kManifestVersion = 1;

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw Error("write failed for " + path.string());
}

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
}

// ---- config twin ----------------------------------------------------------
//
// A JSON object whose keys are long flag names without the dashes. Values
// fill in flags absent from the command line.

bool flag_given(const std::vector<std::string>& args, const std::string& name) {
    const std::string flag = "--" + name;
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

std::vector<std::string> with_config(std::vector<std::string> args, const CLI::App& sub) {
    std::string path;
    for (std::size_t i = 0; i + 1 < args.size(); ++i)
        if (args[i] == "--config") path = args[i + 1];
    for (const auto& a : args)
        if (a.rfind("--config=", 0) == 0) path = a.substr(9);
    if (path.empty()) return args;
    const json cfg = read_json(path);
    if (!cfg.is_object()) throw ValidationError(path + ": config must be a JSON object");
    for (const auto& [key, value] : cfg.items()) {
        if (key == "config") throw ValidationError(path + ": config files cannot nest");
        const CLI::Option* opt = nullptr;
        try {
            opt = sub.get_option("--" + key);
        } catch (const CLI::OptionNotFound&) {
            throw ValidationError(path + ": unknown key '" + key + "' for " + sub.get_name());
        }
        if (flag_given(args, key)) continue;
        if (value.is_boolean()) {
            if (opt->get_expected_min() != 0) throw ValidationError(path + ": '" + key + "' takes a value");
            if (value.get<bool>()) args.push_back("--" + key);
            continue;
        }
        std::string text;
        if (value.is_string()) {
            text = value.get<std::string>();
        } else if (value.is_number()) {
            text = value.dump();
        } else if (value.is_array()) {
            for (const auto& v : value) {
                if (!text.empty()) text += ",";
                text += v.is_string() ? v.get<std::string>() : v.dump();
            }
        } else {
            throw ValidationError(path + ": unsupported value for '" + key + "'");
        }
        args.push_back("--" + key);
        args.push_back(text);
    }
    return args;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
    ModelConfig model = set_model_config();
    TrainOptions train = set_training_options();
    std::uint64_t seed = 1;
    std::string out;
};

void add_train(CLI::App& app, TrainArgs& a) {
    app.add_option("--out,-o", a.out, "Checkpoint path")->required();
    app.add_option("--steps", a.train.steps, "Training steps")->capture_default_str();
    app.add_option("--lr", a.train.lr, "Adam learning rate")->capture_default_str();
    app.add_option("--batch-size", a.train.batch_size)->capture_default_str();
    app.add_option("--grid-fraction", a.train.grid_fraction, "Share of multi-image grid views")
        ->capture_default_str();
    app.add_option("--seed", a.seed)->capture_default_str();
    app.add_option("--d-model", a.model.d_model)->capture_default_str();
    app.add_option("--heads", a.model.n_heads)->capture_default_str();
    app.add_option("--layers", a.model.n_layers)->capture_default_str();
    app.add_option("--mlp-hidden", a.model.mlp_hidden)->capture_default_str();
    app.add_option("--image-side", a.model.image_side)->capture_default_str();
    app.add_option("--patch", a.model.patch_side)->capture_default_str();
    app.add_option("--rope-base", a.model.rope_base)->capture_default_str();
    app.add_option("--log-every", a.train.log_every)->capture_default_str();
}

int run_train(TrainArgs a) {
    a.model.validate();
    a.train.on_log = [](std::size_t step, double loss) { std::cerr << "step " << step << " loss " << loss << '\n'; };
    Rng rng(a.seed);
    const auto init = ModelParams<float>::initialized(a.model, a.seed);
    const auto result = train(init, shape_corpus(a.model.image_side), a.train, rng);
    save_checkpoint_file(a.out, result.params);
    std::cerr << "wrote " << a.out << '\n';
    return 0;
}

// ---- generate -------------------------------------------------------------

struct GenerateArgs {
    std::string checkpoint, instruction, task, corpus, out = "out", grid = "auto";
    std::optional<std::size_t> set_size;
    Schedule schedule;
    std::uint64_t seed = 0;
    bool offline = false, ppm = false;
    std::string endpoint, model;
};

void add_generate(CLI::App& app, GenerateArgs& a) {
    app.add_option("--checkpoint,-c", a.checkpoint)->required();
    auto* instr = app.add_option("--instruction,-i", a.instruction, "Free-text instruction");
    auto* task = app.add_option("--task", a.task, "Task id from --corpus");
    instr->excludes(task);
    app.add_option("--corpus", a.corpus, "Corpus file for --task");
    app.add_option("--n", a.set_size, "Set size when the instruction does not state one");
    app.add_option("--steps", a.schedule.total_steps)->capture_default_str();
    app.add_option("--divide", a.schedule.divide_steps)->capture_default_str();
    app.add_option("--guidance", a.schedule.guidance_scale)->capture_default_str();
    app.add_option("--seed", a.seed)->capture_default_str();
    app.add_option("--grid", a.grid, "auto, 1xn or 2x2")
        ->check(CLI::IsMember({"auto", "1xn", "2x2"}))
        ->capture_default_str();
    app.add_option("--out,-o", a.out, "Output directory")->capture_default_str();
    app.add_flag("--ppm", a.ppm, "Write per-image files as PPM instead of PNG");
    app.add_flag("--offline", a.offline, "Template recaption only; no network");
    app.add_option("--endpoint", a.endpoint, "Chat endpoint for recaption (else T2IS_ENDPOINT)");
    app.add_option("--model", a.model, "Chat model name");
}

GridLayout pick_grid(const std::string& mode, std::size_t n, std::size_t side) {
    if (mode == "1xn") return grid_layout_fixed(1, n, n, side, side);
    if (mode == "2x2") return grid_layout_fixed(2, 2, n, side, side);
    return grid_layout_for(n, side, side);
}

std::vector<int> global_tokens(const std::string& g) {
    if (g.empty()) return {};
    auto t = tokenize_for_toy(g);
    std::erase(t, vocab::null_token);
    return t;
}

int run_generate(GenerateArgs a) {
    a.schedule.validate();
    const auto params = load_checkpoint_file(a.checkpoint);
    Instruction instruction{a.instruction, a.set_size};
    std::string task_id;
    if (!a.task.empty()) {
        if (a.corpus.empty()) throw ValidationError("--task needs --corpus");
        const auto tasks = load_corpus(a.corpus);
        const auto it = std::find_if(tasks.begin(), tasks.end(), [&](const Task& t) { return t.id == a.task; });
        if (it == tasks.end()) throw ValidationError("no task '" + a.task + "' in " + a.corpus);
        instruction = {it->instruction, it->set_size};
        task_id = it->id;
    }
    if (instruction.text.empty()) throw ValidationError("give --instruction or --task");

    std::unique_ptr<ChatClient> client;
    if (!a.offline) {
        if (!a.endpoint.empty()) {
            EndpointConfig cfg;
            cfg.base_url = a.endpoint;
            if (const char* k = std::getenv("T2IS_API_KEY")) cfg.api_key = k;
            cfg.model = a.model;
            client = std::make_unique<HttpChatClient>(cfg);
        } else if (const char* url = std::getenv("T2IS_ENDPOINT"); url && *url) {
            auto cfg = EndpointConfig::from_env();
            if (!a.model.empty()) cfg.model = a.model;
            client = std::make_unique<HttpChatClient>(cfg);
        }
    } else if (!a.endpoint.empty()) {
        throw ValidationError("--endpoint and --offline are mutually exclusive");
    }
    const Recaptioner recaptioner = client ? Recaptioner(*client, a.model) : Recaptioner();
    const auto recap = recaptioner.run(instruction);
    const std::size_t n = recap.prompts.size();

    SetPrompts prompts;
    for (const auto& p : recap.prompts) prompts.images.push_back(tokenize_for_toy(p));
    prompts.global = global_tokens(recap.global);

    const std::size_t side = params.config.tokens_per_side();
    const auto grid = pick_grid(a.grid, n, side);
    const auto seeds = image_seeds(a.seed, n);
    const auto result = generate_set(params, prompts, a.schedule, seeds, grid);

    fs::create_directories(a.out);
    json files = json::array();
    for (std::size_t i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "image_%02zu.%s", i + 1, a.ppm ? "ppm" : "png");
        const auto rgb = to_rgb8(result.images[i]);
        if (a.ppm) {
            write_ppm((fs::path(a.out) / name).string(), rgb);
        } else {
            write_png((fs::path(a.out) / name).string(), rgb);
        }
        files.push_back(name);
    }
    std::size_t rows = grid.rows, cols = grid.cols;
    if (grid.windows || rows * cols < n) {
        cols = std::min<std::size_t>(n, 4);
        rows = (n + cols - 1) / cols;
    }
    write_png((fs::path(a.out) / "composite.png").string(), to_rgb8(compose_grid(result.images, rows, cols, 1)));

    json tokens = json::array();
    for (const auto& t : prompts.images) tokens.push_back(t);
    json windows = json::array();
    if (grid.windows)
        for (const auto& w : grid.windows->windows) windows.push_back(w);
    const json manifest{
        {"schema_version", kManifestVersion},
        {"instruction", instruction.text},
        {"task", task_id},
        {"set_size", n},
        {"recaption", client ? "client" : "template"},
        {"entities", recap.entities},
        {"consistency", recap.consistency},
        {"prompts", recap.prompts},
        {"global", recap.global},
        {"tokens", {{"images", tokens}, {"global", prompts.global}}},
        {"schedule",
         {{"total_steps", a.schedule.total_steps},
          {"divide_steps", a.schedule.divide_steps},
          {"guidance_scale", a.schedule.guidance_scale}}},
        {"seed", a.seed},
        {"image_seeds", seeds},
        {"grid", {{"mode", a.grid}, {"rows", grid.rows}, {"cols", grid.cols}, {"windows", windows}}},
        {"checkpoint", fs::path(a.checkpoint).filename().string()},
        {"images", files},
        {"composite", "composite.png"},
    };
    write_text(fs::path(a.out) / "manifest.json", manifest.dump(2) + "\n");
    std::cout << (fs::path(a.out) / "manifest.json").string() << '\n';
    return 0;
}

// ---- mask-dump ------------------------------------------------------------

struct MaskArgs {
    std::size_t n = 2;
    std::vector<std::size_t> prompt_lens{2}, visual_lens{4};
    std::size_t global_len = 1;
    bool no_global = false, no_cross = false;
};

void add_mask(CLI::App& app, MaskArgs& a) {
    app.add_option("--n", a.n, "Number of images")->capture_default_str();
    app.add_option("--prompt-lens", a.prompt_lens, "Prompt lengths, one or n values")->delimiter(',');
    app.add_option("--global", a.global_len, "Global prompt length")->capture_default_str();
    app.add_option("--visual-lens", a.visual_lens, "Visual token counts, one or n values")->delimiter(',');
    app.add_flag("--no-global", a.no_global, "Mask the global columns");
    app.add_flag("--no-cross", a.no_cross, "Mask cross-image visual columns");
}

std::vector<std::size_t> broadcast(std::vector<std::size_t> v, std::size_t n, const char* what) {
    if (v.size() == 1 && n > 1) v.assign(n, v[0]);
    if (v.size() != n) {
        throw ValidationError(std::string(what) + ": expected 1 or " + std::to_string(n) + " values, got " +
                              std::to_string(v.size()));
    }
    return v;
}

int run_mask(const MaskArgs& a) {
    if (a.n == 0) throw ValidationError("--n must be positive");
    const auto p = broadcast(a.prompt_lens, a.n, "--prompt-lens");
    const auto v = broadcast(a.visual_lens, a.n, "--visual-lens");
    const auto layout = build_token_layout(p, a.global_len, v);
    const auto mask = build_set_mask(layout, {!a.no_global, !a.no_cross});
    std::cout << format_mask_dump(layout, mask);
    return 0;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
    std::string manifest, images, instruction, prompts_file, fixtures, endpoint, model, out;
    std::vector<double> aesthetics;
    bool offline = false, align_to_instruction = false;
};

void add_eval(CLI::App& app, EvalArgs& a) {
    app.add_option("--manifest", a.manifest, "manifest.json written by generate");
    app.add_option("--images", a.images, "Directory of .png/.ppm images, scored in name order");
    app.add_option("--instruction,-i", a.instruction);
    app.add_option("--prompts", a.prompts_file, "JSON array of per-image prompts");
    auto* fx = app.add_option("--fixtures", a.fixtures, "Directory of judge transcripts");
    auto* ep = app.add_option("--endpoint", a.endpoint, "Judge endpoint (else T2IS_ENDPOINT)");
    fx->excludes(ep);
    app.add_option("--model", a.model, "Judge model name");
    app.add_option("--aesthetics", a.aesthetics, "Per-image aesthetics scores")->delimiter(',');
    app.add_option("--out,-o", a.out, "Write the report JSON here");
    app.add_flag("--offline", a.offline, "Refuse network access");
    app.add_flag("--align-to-instruction", a.align_to_instruction,
                 "Alignment criteria from the instruction instead of per-image prompts");
}

int run_eval(EvalArgs a) {
    std::vector<Tensor> images;
    std::vector<std::string> prompts;
    std::string label = "set";
    if (!a.manifest.empty()) {
        const auto m = read_json(a.manifest);
        const auto dir = fs::path(a.manifest).parent_path();
        for (const auto& f : m.at("images")) images.push_back(from_rgb8(read_image((dir / f.get<std::string>()).string())));
        if (a.instruction.empty()) a.instruction = m.at("instruction").get<std::string>();
        prompts = m.at("prompts").get<std::vector<std::string>>();
        label = dir.filename().string();
    } else if (!a.images.empty()) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(a.images)) {
            const auto ext = e.path().extension();
            if ((ext == ".png" || ext == ".ppm") && e.path().stem() != "composite") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) images.push_back(from_rgb8(read_image(f.string())));
        label = fs::path(a.images).filename().string();
    } else {
        throw ValidationError("give --manifest or --images");
    }
    if (!a.prompts_file.empty()) prompts = read_json(a.prompts_file).get<std::vector<std::string>>();
    if (a.instruction.empty()) throw ValidationError("--instruction is required");
    if (prompts.empty() && !a.align_to_instruction) {
        throw ValidationError("per-image prompts missing: pass --prompts or --align-to-instruction");
    }

    std::unique_ptr<ChatClient> client;
    std::unique_ptr<AestheticsScorer> aesthetics;
    std::optional<EndpointConfig> endpoint;
    if (!a.fixtures.empty()) {
        auto fc = std::make_unique<FixtureClient>();
        fc->load_directory(a.fixtures);
        client = std::move(fc);
    } else {
        if (a.offline) throw ValidationError("--offline needs --fixtures");
        if (!a.endpoint.empty()) {
            endpoint.emplace();
            endpoint->base_url = a.endpoint;
            if (const char* k = std::getenv("T2IS_API_KEY")) endpoint->api_key = k;
        } else {
            endpoint = EndpointConfig::from_env();
        }
        if (!a.model.empty()) endpoint->model = a.model;
        client = std::make_unique<HttpChatClient>(*endpoint);
    }
    if (!a.aesthetics.empty()) {
        aesthetics = std::make_unique<FixtureAesthetics>(a.aesthetics);
    } else if (endpoint) {
        aesthetics = std::make_unique<HttpAesthetics>(*endpoint, make_http_transport(*endpoint));
    } else {
        throw ValidationError("offline evaluation needs --aesthetics scores");
    }

    EvalOptions opts;
    opts.model = a.model;
    opts.align_to_instruction = a.align_to_instruction;
    opts.warn = [](const std::string& w) { std::cerr << "warning: " << w << '\n'; };
    const auto res = evaluate_set(images, a.instruction, prompts, *client, *aesthetics, opts);
    const auto report = report_to_json(res.report).dump(2) + "\n";
    std::cout << report_table({{label, res.report}});
    if (!a.out.empty()) {
        write_text(a.out, report);
    } else {
        std::cout << report;
    }
    return 0;
}

// ---- sweep-ratio ----------------------------------------------------------

struct SweepArgs {
    std::string checkpoint, out;
    std::vector<std::string> ratios{"1:20", "2:20", "4:20", "6:20", "20:20"};
    SweepOptions options;
    double guidance = 3.5;
};

void add_sweep(CLI::App& app, SweepArgs& a) {
    app.add_option("--checkpoint,-c", a.checkpoint)->required();
    app.add_option("--ratios", a.ratios, "divide:total pairs")->delimiter(',')->capture_default_str();
    app.add_option("--seeds", a.options.seeds, "Number of seeds")->capture_default_str();
    app.add_option("--first-seed", a.options.first_seed)->capture_default_str();
    app.add_option("--n", a.options.set_size, "Images per set")->capture_default_str();
    app.add_option("--guidance", a.guidance)->capture_default_str();
    app.add_option("--out,-o", a.out, "Write the JSON result here");
}

int run_sweep(const SweepArgs& a) {
    std::vector<Schedule> schedules;
    for (const auto& r : a.ratios) schedules.push_back(parse_ratio(r, a.guidance));
    const auto params = load_checkpoint_file(a.checkpoint);
    const auto results = ratio_sweep(params, schedules, a.options);
    json rows = json::array();
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        rows.push_back({{"ratio", a.ratios[i]},
                        {"median", r.median},
                        {"mean", r.mean},
                        {"distances", r.distances}});
        std::fprintf(stderr, "%-6s median %.4f  mean %.4f\n", a.ratios[i].c_str(), r.median, r.mean);
    }
    const json j{{"metric", "color_histogram_distance"},
                 {"set_size", a.options.set_size},
                 {"seeds", a.options.seeds},
                 {"guidance_scale", a.guidance},
                 {"results", rows}};
    if (!a.out.empty()) {
        write_text(a.out, j.dump(2) + "\n");
    } else {
        std::cout << j.dump(2) << '\n';
    }
    return 0;
}

// ---- stats / synth ----------------------------------------------------------

int run_stats(const std::string& corpus) {
    std::cout << stats_to_json(corpus_stats(load_corpus(corpus))) << '\n';
    return 0;
}

int run_synth(std::uint64_t seed, std::size_t count, const std::string& out) {
    const auto tasks = synth_tasks(seed, count);
    if (out.empty()) {
        std::cout << serialize_corpus(tasks);
    } else {
        save_corpus(out, tasks);
    }
    return 0;
}

int exit_code_for(const std::exception_ptr& e) {
    try {
        std::rethrow_exception(e);
    } catch (const ValidationError& x) {
        std::cerr << "error: " << x.what() << '\n';
        return 2;
    } catch (const ExternalServiceError& x) {
        std::cerr << "external service error: " << x.what() << '\n';
        return 3;
    } catch (const ScoringError& x) {
        std::cerr << "scoring error: " << x.what() << '\n';
        return 3;
    } catch (const CriteriaError& x) {
        std::cerr << "criteria error: " << x.what() << '\n';
        return 3;
    } catch (const InvariantError& x) {
        std::cerr << "internal error: " << x.what() << '\n';
        return 4;
    } catch (const DegenerateAttentionError& x) {
        std::cerr << "internal error: " << x.what() << '\n';
        return 4;
    } catch (const std::exception& x) {
        std::cerr << "error: " << x.what() << '\n';
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Image-set generation and evaluation toolkit", "t2is"};
    app.require_subcommand(1);

    TrainArgs train_args;
    GenerateArgs gen_args;
    MaskArgs mask_args;
    EvalArgs eval_args;
    SweepArgs sweep_args;
    std::string corpus_path, synth_out;
    std::uint64_t synth_seed = 0;
    std::size_t synth_count = 12;

    std::vector<CLI::App*> subs{
        app.add_subcommand("train", "Train the toy model and write a checkpoint"),
        app.add_subcommand("generate", "Recaption an instruction and generate an image set"),
        app.add_subcommand("mask-dump", "Print the set attention mask"),
        app.add_subcommand("eval", "Score an image set"),
        app.add_subcommand("sweep-ratio", "Colour consistency proxy per divide ratio"),
        app.add_subcommand("stats", "Corpus statistics as JSON"),
        app.add_subcommand("synth", "Write synthetic toy tasks as a corpus"),
    };
    add_train(*subs[0], train_args);
    add_generate(*subs[1], gen_args);
    add_mask(*subs[2], mask_args);
    add_eval(*subs[3], eval_args);
    add_sweep(*subs[4], sweep_args);
    subs[5]->add_option("corpus", corpus_path, "Corpus JSON")->required();
    subs[6]->add_option("--seed", synth_seed)->capture_default_str();
    subs[6]->add_option("--count", synth_count)->capture_default_str();
    subs[6]->add_option("--out,-o", synth_out);
    for (auto* s : subs) s->add_option("--config", "JSON file of flag values; flags on the command line win");

    try {
        std::vector<std::string> args(argv + 1, argv + argc);
        if (!args.empty()) {
            for (auto* s : subs)
                if (s->get_name() == args[0]) args = with_config(args, *s);
        }
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (...) {
        return exit_code_for(std::current_exception());
    }

    try {
        if (*subs[0]) return run_train(train_args);
        if (*subs[1]) return run_generate(gen_args);
        if (*subs[2]) return run_mask(mask_args);
        if (*subs[3]) return run_eval(eval_args);
        if (*subs[4]) return run_sweep(sweep_args);
        if (*subs[5]) return run_stats(corpus_path);
        if (*subs[6]) return run_synth(synth_seed, synth_count, synth_out);
    } catch (...) {
        return exit_code_for(std::current_exception());
    }
    return 0;
}
