// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Each pipeline stage is one subcommand; every run
// that writes files also writes a manifest (versions, config hash, seeds,
// input and output digests) next to them.
#pragma once

#include <CLI11.hpp>
#include <iostream>

#include "monolex/autointerp.hpp"
#include "monolex/evalbench.hpp"
#include "monolex/oracles.hpp"

namespace monolex::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kValidation = 1, kExternal = 2 };

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

inline std::string file_sha256(const fs::path& p) { return sha256_hex(detail::read_file(p)); }

struct Manifest {
    std::string command;
    json arguments = json::object();
    json seeds = json::object();
    std::string config_sha256 = "defaults";
    json inputs = json::object();
    json outputs = json::object();

    void input(const std::string& role, const fs::path& p) {
        inputs[role] = {{"file", p.filename().string()}, {"sha256", file_sha256(p)}};
    }
    void output(const std::string& role, const fs::path& p) {
        outputs[role] = {{"file", p.filename().string()}, {"sha256", file_sha256(p)}};
    }
};

inline json to_json(const Manifest& m) {
    return {{"tool", "monolex"},
            {"version", kVersion},
            {"libraries",
             {{"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
              {"cli11", CLI11_VERSION},
              {"openssl", OPENSSL_VERSION_TEXT}}},
            {"command", m.command},
            {"arguments", m.arguments},
            {"config_sha256", m.config_sha256},
            {"seeds", m.seeds},
            {"inputs", m.inputs},
            {"outputs", m.outputs}};
}

/// `out.ext` gets `out.ext.manifest.json`; a directory gets `manifest.json`.
inline fs::path manifest_path_for(const fs::path& out) {
    if (fs::is_directory(out)) return out / "manifest.json";
    return fs::path(out.string() + ".manifest.json");
}

inline void write_manifest(const Manifest& m, const fs::path& out) {
    detail::write_file(manifest_path_for(out), to_json(m).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Shared inputs
// ---------------------------------------------------------------------------

/// Defaults when `path` is empty. The hash covers the parsed document, so
/// whitespace and key order do not change it.
inline RunConfig load_run_config(const std::string& path, Manifest& m) {
    if (path.empty()) {
        RunConfig c;
        validate(c);
        return c;
    }
    json doc;
    try {
        doc = json::parse(detail::read_file(path));
    } catch (const json::parse_error& e) {
        throw ValidationError("config " + path + ": " + e.what());
    }
    m.config_sha256 = sha256_hex(doc.dump());
    return config_from_json(doc, fs::path(path).parent_path());
}

/// Parameters written by `gen synth`; the truth and the coefficients are
/// regenerated from them.
struct SynthSpec {
    std::size_t dim = 32;
    std::size_t n_features = 64;
    std::size_t samples = 50000;
    double feature_prob = 0.03;
    double noise = 0.0;
    double min_angle = 0.0;
    std::uint64_t truth_seed = 0;
    std::uint64_t sample_seed = 0;
};

inline json to_json(const SynthSpec& s) {
    return {{"kind", "synthetic"},         {"dim", s.dim},       {"n_features", s.n_features},
            {"samples", s.samples},        {"feature_prob", s.feature_prob},
            {"noise", s.noise},            {"min_angle", s.min_angle},
            {"truth_seed", s.truth_seed},  {"sample_seed", s.sample_seed}};
}

inline SynthSpec synth_spec_from_json(const json& j) {
    SynthSpec s;
    try {
        if (j.at("kind") != "synthetic") throw ValidationError("truth file: kind must be \"synthetic\"");
        s.dim = j.at("dim");
        s.n_features = j.at("n_features");
        s.samples = j.at("samples");
        s.feature_prob = j.at("feature_prob");
        s.noise = j.at("noise");
        s.min_angle = j.at("min_angle");
        s.truth_seed = j.at("truth_seed");
        s.sample_seed = j.at("sample_seed");
    } catch (const json::exception& e) {
        throw ValidationError(std::string("truth file: ") + e.what());
    }
    return s;
}

inline SynthSpec read_synth_spec(const fs::path& path) {
    try {
        return synth_spec_from_json(json::parse(detail::read_file(path)));
    } catch (const json::parse_error& e) {
        throw IoError("truth file " + path.string() + ": " + e.what());
    }
}

inline TrueDictionary synth_truth(const SynthSpec& s) {
    return generate_truth(s.dim, s.n_features, s.truth_seed, s.min_angle);
}

/// Tokens of `text` that the world knows; numbers map to "<num>".
inline std::pair<std::vector<std::string>, std::vector<std::string>> world_tokens(const TokenWorld& w,
                                                                                  const std::string& text) {
    std::vector<std::string> known, skipped;
    for (auto tok : merge_backslash_fragments(tokenize_math(text))) {
        if (!w.contains(tok) && is_number_token(tok)) tok = "<num>";
        (w.contains(tok) ? known : skipped).push_back(tok);
    }
    return {known, skipped};
}

inline std::string endpoint_model(const RunConfig& cfg, const std::string& role) {
    const auto name = cfg.clients.endpoint_for(role);
    const auto it = cfg.clients.endpoints.find(name);
    return it == cfg.clients.endpoints.end() ? name : it->second.model;
}

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

struct Io {
    std::ostream& out;
    std::ostream& err;
};

/// Options and actions for every subcommand. `action` is set by whichever
/// subcommand parsed.
class App {
public:
    explicit App(Io io) : io_(io), app_("monolex: sparse-autoencoder dictionaries and ambiguity-aware querying", "monolex") {
        app_.require_subcommand(1);
        app_.set_version_flag("--version", kVersion, "Print the version and exit");
        add_gen();
        add_train();
        add_eval_sae();
        add_export_dict();
        add_annotate();
        add_detect();
        add_reformulate();
        add_bench();
        add_report();
        add_replay();
    }

    CLI::App& root() { return app_; }

    int run(int argc, const char* const* argv) {
        try {
            app_.parse(argc, argv);
        } catch (const CLI::ParseError& e) {
            const int code = app_.exit(e, io_.out, io_.err);
            return code == 0 ? kOk : kValidation;
        }
        try {
            action_();
            return kOk;
        } catch (const ValidationError& e) {
            io_.err << "error: " << e.what() << "\n";
            return kValidation;
        } catch (const IoError& e) {
            io_.err << "error: " << e.what() << "\n";
            return kExternal;
        } catch (const ClientError& e) {
            io_.err << "error: " << e.what() << "\n";
            return kExternal;
        } catch (const std::exception& e) {
            io_.err << "error: " << e.what() << "\n";
            return kExternal;
        }
    }

private:
    // Every option is recorded under its long name for the manifest.
    template <class T>
    CLI::Option* opt(CLI::App* sub, const std::string& name, T& var, const std::string& help) {
        auto* o = sub->add_option(name, var, help);
        recorders_[sub].push_back([o, &var](json& args) {
            if (o->count()) args[o->get_single_name()] = as_json(var);
        });
        return o;
    }
    template <class T>
    static json as_json(const T& v) { return v; }
    template <class T>
    static json as_json(const std::optional<T>& v) { return v ? json(*v) : json(nullptr); }
    CLI::Option* flag(CLI::App* sub, const std::string& name, bool& var, const std::string& help) {
        auto* o = sub->add_flag(name, var, help);
        recorders_[sub].push_back([o, &var](json& args) {
            if (o->count()) args[o->get_single_name()] = var;
        });
        return o;
    }
    Manifest manifest(CLI::App* sub, const std::string& command) {
        Manifest m;
        m.command = command;
        for (auto& rec : recorders_[sub]) rec(m.arguments);
        return m;
    }
    void on(CLI::App* sub, std::function<void()> f) {
        sub->callback([this, f = std::move(f)] { action_ = f; });
    }

    // ---- gen ---------------------------------------------------------------

    struct GenSynth {
        SynthSpec spec;
        std::uint64_t seed = 0;
        std::string out, truth;
    } synth_;
    struct GenTokens {
        std::string world, text, out, oracle_model, oracle_dict;
        std::size_t repeat = 1;
        std::uint64_t seed = 0;
    } tokens_;

    void add_gen() {
        auto* gen = app_.add_subcommand("gen", "Generate synthetic activations or token-world inputs");
        gen->require_subcommand(1);

        auto* s = gen->add_subcommand("synth", "Sample sparse mixtures of random ground-truth directions");
        opt(s, "--dim", synth_.spec.dim, "Activation dimension")->capture_default_str();
        opt(s, "--features", synth_.spec.n_features, "Number of ground-truth features")->capture_default_str();
        opt(s, "--samples", synth_.spec.samples, "Number of activation rows")->capture_default_str();
        opt(s, "--prob", synth_.spec.feature_prob, "Probability that a feature is active in a row")->capture_default_str();
        opt(s, "--noise", synth_.spec.noise, "Standard deviation of added Gaussian noise")->capture_default_str();
        opt(s, "--min-angle", synth_.spec.min_angle, "Minimum angle in degrees between truth directions")->capture_default_str();
        opt(s, "--seed", synth_.seed, "Seed for the truth and the samples")->capture_default_str();
        opt(s, "--out", synth_.out, "Output ACTV file (a .tokens.jsonl sidecar is written beside it)")->required();
        opt(s, "--truth", synth_.truth, "Output truth file (generation parameters)")->required();
        on(s, [this, s] { gen_synth(s); });

        auto* t = gen->add_subcommand("tokens", "Token-world activations for a text, and the world's oracle model");
        opt(t, "--world", tokens_.world, "Token-world JSON file")->required();
        opt(t, "--text", tokens_.text, "Text whose known tokens become activation rows");
        opt(t, "--repeat", tokens_.repeat, "Emit the token sequence this many times")->capture_default_str();
        opt(t, "--seed", tokens_.seed, "Seed for token noise")->capture_default_str();
        opt(t, "--out", tokens_.out, "Output ACTV file for --text");
        opt(t, "--oracle-model", tokens_.oracle_model, "Write an SAE1 model whose features are the world's truth directions");
        opt(t, "--oracle-dict", tokens_.oracle_dict, "Write the dictionary of the world's labelled truth features");
        on(t, [this, t] { gen_tokens(t); });
    }

    void gen_synth(CLI::App* sub) {
        auto m = manifest(sub, "gen synth");
        SynthSpec spec = synth_.spec;
        spec.truth_seed = RngStream::substream(synth_.seed, 0).next_u64();
        spec.sample_seed = RngStream::substream(synth_.seed, 1).next_u64();
        const auto truth = synth_truth(spec);
        auto [batch, coeffs] = sample_activations(truth, spec.samples, spec.feature_prob, spec.noise, spec.sample_seed);
        batch.source = "synthetic";
        write_activations(batch, synthetic_sidecar(spec.samples), synth_.out);
        detail::write_file(synth_.truth, to_json(spec).dump(2) + "\n");
        m.seeds = {{"seed", synth_.seed}, {"truth_seed", spec.truth_seed}, {"sample_seed", spec.sample_seed}};
        m.output("activations", synth_.out);
        m.output("sidecar", sidecar_path(synth_.out));
        m.output("truth", synth_.truth);
        write_manifest(m, synth_.out);
        io_.out << "wrote " << spec.samples << " x " << spec.dim << " activations to " << synth_.out << "\n";
    }

    void gen_tokens(CLI::App* sub) {
        auto m = manifest(sub, "gen tokens");
        const auto wf = load_world(tokens_.world);
        m.input("world", tokens_.world);
        m.seeds = {{"seed", tokens_.seed}};
        if (tokens_.out.empty() && tokens_.oracle_model.empty() && tokens_.oracle_dict.empty())
            throw ValidationError("gen tokens: nothing to write; give --out, --oracle-model or --oracle-dict");
        std::string first_out;
        if (!tokens_.out.empty()) {
            if (tokens_.text.empty()) throw ValidationError("gen tokens: --out needs --text");
            const auto [known, skipped] = world_tokens(wf.world, tokens_.text);
            for (const auto& s : skipped) io_.err << "skipped token not in world: " << s << "\n";
            if (known.empty()) throw ValidationError("gen tokens: no token of the text is in the world");
            std::vector<std::string> seq;
            for (std::size_t r = 0; r < tokens_.repeat; ++r) seq.insert(seq.end(), known.begin(), known.end());
            auto [batch, sc] = token_activations(wf.world, wf.truth, seq, tokens_.seed, tokens_.text);
            write_activations(batch, sc, tokens_.out);
            m.output("activations", tokens_.out);
            m.output("sidecar", sidecar_path(tokens_.out));
            first_out = tokens_.out;
            io_.out << "wrote " << seq.size() << " token rows to " << tokens_.out << "\n";
        }
        if (!tokens_.oracle_model.empty()) {
            write_model(oracle_model(wf.truth), tokens_.oracle_model);
            m.output("oracle_model", tokens_.oracle_model);
            if (first_out.empty()) first_out = tokens_.oracle_model;
        }
        if (!tokens_.oracle_dict.empty()) {
            write_dictionary(truth_dictionary(wf.truth), tokens_.oracle_dict);
            m.output("oracle_dict", tokens_.oracle_dict);
            if (first_out.empty()) first_out = tokens_.oracle_dict;
        }
        write_manifest(m, first_out);
    }

    // ---- train / eval-sae / export-dict ------------------------------------

    struct Train {
        std::string activations, config, out, log;
        std::optional<std::uint64_t> seed;
        std::optional<double> l1;
        std::optional<std::size_t> epochs;
    } train_;

    void add_train() {
        auto* t = app_.add_subcommand("train", "Train a tied sparse autoencoder on an activation file");
        opt(t, "--activations", train_.activations, "Input ACTV file")->required();
        opt(t, "--config", train_.config, "Run configuration JSON (train section)");
        opt(t, "--out", train_.out, "Output SAE1 model file")->required();
        opt(t, "--log", train_.log, "Write the loss history as JSON");
        opt(t, "--seed", train_.seed, "Override train.seed");
        opt(t, "--l1", train_.l1, "Override train.l1_coefficient");
        opt(t, "--epochs", train_.epochs, "Train for this many passes instead of a single pass");
        on(t, [this, t] { train(t); });
    }

    void train(CLI::App* sub) {
        auto m = manifest(sub, "train");
        auto cfg = load_run_config(train_.config, m);
        if (train_.seed) cfg.train.seed = *train_.seed;
        if (train_.l1) cfg.train.l1_coefficient = *train_.l1;
        if (train_.epochs) {
            cfg.train.epochs = *train_.epochs;
            cfg.train.single_pass = false;
        }
        validate(cfg);
        const auto [batch, sidecar] = read_activations(train_.activations);
        m.input("activations", train_.activations);
        auto model = init_model(batch.dim(), cfg.train.expansion, cfg.train.seed);
        const auto report = monolex::train(model, batch.rows, cfg.train);
        write_model(model, train_.out);
        m.seeds = {{"train", cfg.train.seed}};
        m.output("model", train_.out);
        if (!train_.log.empty()) {
            json log = to_json(report);
            log.erase("wall_seconds");
            detail::write_file(train_.log, log.dump(1) + "\n");
            m.output("log", train_.log);
        }
        write_manifest(m, train_.out);
        io_.out << "trained " << model.h << " features over " << report.sample_count << " samples in " << report.steps
                << " steps; loss " << report.initial.total << " -> " << report.final.total << "\n";
        io_.err << "wall time " << report.wall_seconds << " s\n";
    }

    struct EvalSae {
        std::string model, activations, truth, out;
        double threshold = 1e-6;
        double match = 0.9;
    } eval_;

    void add_eval_sae() {
        auto* e = app_.add_subcommand("eval-sae", "Reconstruction, sparsity and (with a truth file) recovery metrics");
        opt(e, "--model", eval_.model, "SAE1 model file")->required();
        opt(e, "--activations", eval_.activations, "ACTV file to evaluate on")->required();
        opt(e, "--truth", eval_.truth, "Truth file from gen synth, for mmcs and matched fraction");
        opt(e, "--threshold", eval_.threshold, "Activation above which a feature counts as firing")->capture_default_str();
        opt(e, "--match", eval_.match, "|cosine| at which a truth direction counts as recovered")->capture_default_str();
        opt(e, "--out", eval_.out, "Write the metrics JSON here as well as to stdout");
        on(e, [this, e] { eval_sae(e); });
    }

    void eval_sae(CLI::App* sub) {
        auto m = manifest(sub, "eval-sae");
        const auto model = read_model(eval_.model);
        const auto [batch, sidecar] = read_activations(eval_.activations);
        m.input("model", eval_.model);
        m.input("activations", eval_.activations);
        const auto s = metrics(model, batch.rows, eval_.threshold);
        json j = {{"mse", s.mse},
                  {"sq_error_per_sample", s.sq_error_per_sample},
                  {"sparsity_fraction", s.sparsity_fraction},
                  {"mean_active", s.mean_active},
                  {"dead_features", s.dead_features},
                  {"features", model.h}};
        if (!eval_.truth.empty()) {
            const auto truth = synth_truth(read_synth_spec(eval_.truth));
            m.input("truth", eval_.truth);
            const auto learned = learned_directions(model);
            j["mmcs"] = mmcs(learned, truth.directions);
            j["matched_fraction"] = matched_fraction(learned, truth.directions, eval_.match);
        }
        io_.out << j.dump(2) << "\n";
        if (!eval_.out.empty()) {
            detail::write_file(eval_.out, j.dump(2) + "\n");
            m.output("metrics", eval_.out);
            write_manifest(m, eval_.out);
        }
    }

    struct ExportDict {
        std::string model, out;
    } export_;

    void add_export_dict() {
        auto* e = app_.add_subcommand("export-dict", "Write an unannotated dictionary from a model's feature directions");
        opt(e, "--model", export_.model, "SAE1 model file")->required();
        opt(e, "--out", export_.out, "Output dictionary JSON")->required();
        on(e, [this, e] {
            auto m = manifest(e, "export-dict");
            write_dictionary(dictionary_from_model(read_model(export_.model)), export_.out);
            m.input("model", export_.model);
            m.output("dictionary", export_.out);
            write_manifest(m, export_.out);
        });
    }

    // ---- annotate ----------------------------------------------------------

    struct Annotate {
        std::string model, activations, config, out, report, oracle;
        std::optional<std::uint64_t> seed;
        std::optional<std::size_t> jobs;
    } annotate_;

    void add_annotate() {
        auto* a = app_.add_subcommand("annotate", "Explain and score every alive feature");
        opt(a, "--model", annotate_.model, "SAE1 model file")->required();
        opt(a, "--activations", annotate_.activations, "ACTV file with its token sidecar")->required();
        opt(a, "--config", annotate_.config, "Run configuration JSON (annotate and clients sections)");
        opt(a, "--oracle", annotate_.oracle,
            "Truth file from gen synth; answer explainer and simulator prompts from the ground truth");
        opt(a, "--out", annotate_.out, "Output annotated dictionary JSON")->required();
        opt(a, "--report", annotate_.report, "Write one JSON line per feature (status, score, rows)");
        opt(a, "--seed", annotate_.seed, "Override annotate.seed");
        opt(a, "--jobs", annotate_.jobs, "Features annotated concurrently (default 1)");
        on(a, [this, a] { annotate(a); });
    }

    void annotate(CLI::App* sub) {
        auto m = manifest(sub, "annotate");
        auto cfg = load_run_config(annotate_.config, m);
        if (annotate_.seed) cfg.annotate.seed = *annotate_.seed;
        if (annotate_.jobs) cfg.annotate.jobs = *annotate_.jobs;
        validate(cfg);
        const auto model = read_model(annotate_.model);
        const auto [batch, sidecar] = read_activations(annotate_.activations);
        m.input("model", annotate_.model);
        m.input("activations", annotate_.activations);
        m.seeds = {{"annotate", cfg.annotate.seed}};

        AnnotationResult res;
        if (!annotate_.oracle.empty()) {
            const auto spec = read_synth_spec(annotate_.oracle);
            m.input("oracle", annotate_.oracle);
            const auto truth = synth_truth(spec);
            const auto coeffs = sample_activations(truth, spec.samples, spec.feature_prob, spec.noise, spec.sample_seed).second;
            auto explainer = truth_explainer("explainer", truth, synthetic_lookup(coeffs));
            auto simulator = truth_simulator("simulator", truth, synthetic_lookup(coeffs));
            res = annotate_all(model, batch, sidecar, *explainer, *simulator, cfg.annotate);
        } else {
            ClientSet clients(cfg.clients);
            res = annotate_all(model, batch, sidecar, clients.for_role("explainer"), clients.for_role("simulator"),
                               cfg.annotate);
        }
        write_dictionary(res.dictionary, annotate_.out);
        m.output("dictionary", annotate_.out);
        if (!annotate_.report.empty()) {
            detail::write_file(annotate_.report, annotation_report_jsonl(res));
            m.output("report", annotate_.report);
        }
        write_manifest(m, annotate_.out);
        io_.out << "alive " << res.alive << ", validated " << res.validated << " (score >= " << cfg.annotate.threshold
                << "), failed " << res.failed << "; validated fraction " << res.validated_fraction << "\n";
    }

    // ---- detect ------------------------------------------------------------

    struct Detect {
        std::string question, sentence, target, model, dict, world, config, out;
        std::optional<std::size_t> depth;
        std::uint64_t seed = 0;
    } detect_;

    struct Loaded {
        SaeModel model;
        FeatureDictionary dict;
        WorldFile world;
    };

    Loaded load_detection(Manifest& m, const std::string& model, const std::string& dict, const std::string& world) {
        Loaded l{read_model(model), read_dictionary(dict), load_world(world)};
        m.input("model", model);
        m.input("dictionary", dict);
        m.input("world", world);
        return l;
    }

    void add_detect() {
        auto* d = app_.add_subcommand("detect", "Find tokens whose top features suggest a misreading");
        d->require_subcommand(1);
        auto common = [this](CLI::App* s) {
            opt(s, "--model", detect_.model, "SAE1 model file")->required();
            opt(s, "--dict", detect_.dict, "Feature dictionary JSON with descriptions")->required();
            opt(s, "--world", detect_.world, "Token-world JSON supplying token activations")->required();
            opt(s, "--config", detect_.config, "Run configuration JSON (detect and clients sections)");
            opt(s, "--seed", detect_.seed, "Seed for token-world noise")->capture_default_str();
            opt(s, "--out", detect_.out, "Write the JSON result here as well as to stdout");
        };
        auto* mth = d->add_subcommand("math", "Flag math symbols whose top-m features are not mathematical");
        opt(mth, "--question", detect_.question, "Math question text")->required();
        opt(mth, "--depth", detect_.depth, "Override detect.depth (m)");
        common(mth);
        on(mth, [this, mth] { detect_math(mth); });

        auto* met = d->add_subcommand("metaphor", "Ask the metaphor judge whether the target word is likely misread");
        opt(met, "--sentence", detect_.sentence, "Sentence containing the target word")->required();
        opt(met, "--target", detect_.target, "Target word")->required();
        common(met);
        on(met, [this, met] { detect_metaphor(met); });
    }

    void emit(const json& j, Manifest& m, const std::string& out, const std::string& role) {
        io_.out << j.dump(2) << "\n";
        if (out.empty()) return;
        detail::write_file(out, j.dump(2) + "\n");
        m.output(role, out);
        write_manifest(m, out);
    }

    void detect_math(CLI::App* sub) {
        auto m = manifest(sub, "detect math");
        auto cfg = load_run_config(detect_.config, m);
        if (detect_.depth) cfg.detect.depth = *detect_.depth;
        validate(cfg);
        const auto l = load_detection(m, detect_.model, detect_.dict, detect_.world);
        m.seeds = {{"world", detect_.seed}};
        const auto res = detect_question(detect_.question, world_source(l.world.world, l.world.truth, detect_.seed), l.model,
                                         l.dict, load_category_map(cfg.detect.category_map), cfg.detect);
        json reports = json::array(), flagged = json::array();
        for (const auto& r : res.reports) reports.push_back(to_json(r));
        for (const auto& r : res.flagged()) flagged.push_back(r.token);
        json j = {{"question", detect_.question},
                  {"depth", cfg.detect.depth},
                  {"reports", reports},
                  {"flagged", flagged},
                  {"skipped", res.skipped}};
        emit(j, m, detect_.out, "detection");
    }

    void detect_metaphor(CLI::App* sub) {
        auto m = manifest(sub, "detect metaphor");
        auto cfg = load_run_config(detect_.config, m);
        const auto l = load_detection(m, detect_.model, detect_.dict, detect_.world);
        m.seeds = {{"world", detect_.seed}};
        const auto ranked = target_features(l, detect_.target, detect_.seed, cfg.detect.top_k);
        ClientSet clients(cfg.clients);
        const auto v = judge_metaphor_ambiguity(clients.for_role("metaphor_judge"), detect_.sentence, detect_.target, ranked);
        json feats = json::array();
        for (const auto& f : ranked) feats.push_back(to_json(f));
        emit({{"sentence", detect_.sentence}, {"target", detect_.target}, {"target_features", feats}, {"verdict", to_json(v)}},
             m, detect_.out, "verdict");
    }

    static std::vector<FeatureActivation> target_features(const Loaded& l, const std::string& target, std::uint64_t seed,
                                                          std::size_t k) {
        const auto act = world_source(l.world.world, l.world.truth, seed)(target, 0);
        if (!act) throw ValidationError("target \"" + target + "\" is not in the token world");
        return rank_token_features(l.model, l.dict, *act, k);
    }

    // ---- reformulate -------------------------------------------------------

    struct Reformulate {
        std::string question, sentence, target, model, dict, world, config, out;
        bool allow_same_judge = false;
        std::uint64_t seed = 0;
    } reform_;

    void add_reformulate() {
        auto* r = app_.add_subcommand("reformulate", "Rewrite an ambiguous query and answer it with the subject model");
        r->require_subcommand(1);
        auto common = [this](CLI::App* s) {
            opt(s, "--model", reform_.model, "SAE1 model file")->required();
            opt(s, "--dict", reform_.dict, "Feature dictionary JSON with descriptions")->required();
            opt(s, "--world", reform_.world, "Token-world JSON supplying token activations")->required();
            opt(s, "--config", reform_.config, "Run configuration JSON (detect, reformulate and clients sections)")->required();
            opt(s, "--seed", reform_.seed, "Seed for token-world noise")->capture_default_str();
            opt(s, "--out", reform_.out, "Write the outcome JSON (with its transcript) here as well as to stdout");
        };
        auto* mth = r->add_subcommand("math", "Detect, rephrase until the judge accepts, then answer");
        opt(mth, "--question", reform_.question, "Math question text")->required();
        flag(mth, "--allow-same-judge", reform_.allow_same_judge, "Permit the rephraser endpoint to judge its own rewrites");
        common(mth);
        on(mth, [this, mth] { reformulate(mth, true); });

        auto* met = r->add_subcommand("metaphor", "Judge, clarify if likely misread, then answer");
        opt(met, "--sentence", reform_.sentence, "Sentence containing the target word")->required();
        opt(met, "--target", reform_.target, "Target word")->required();
        common(met);
        on(met, [this, met] { reformulate(met, false); });
    }

    void reformulate(CLI::App* sub, bool math) {
        auto m = manifest(sub, math ? "reformulate math" : "reformulate metaphor");
        auto cfg = load_run_config(reform_.config, m);
        cfg.reformulate.allow_same_judge = cfg.reformulate.allow_same_judge || reform_.allow_same_judge;
        const auto l = load_detection(m, reform_.model, reform_.dict, reform_.world);
        m.seeds = {{"world", reform_.seed}};
        ClientSet clients(cfg.clients);
        ReformulationOutcome o;
        try {
            if (math) {
                const auto det = detect_question(reform_.question, world_source(l.world.world, l.world.truth, reform_.seed),
                                                 l.model, l.dict, load_category_map(cfg.detect.category_map), cfg.detect);
                o = run_math(clients.for_role("rephraser"), clients.for_role("judge"), clients.for_role("subject"),
                             reform_.question, det.reports, cfg.reformulate);
            } else {
                o = run_metaphor(clients.for_role("metaphor_judge"), clients.for_role("clarifier"), clients.for_role("subject"),
                                 reform_.sentence, reform_.target,
                                 target_features(l, reform_.target, reform_.seed, cfg.detect.top_k));
            }
        } catch (const ReformulationError& e) {
            if (!reform_.out.empty()) detail::write_file(reform_.out, to_json(e.partial()).dump(2) + "\n");
            throw;
        }
        emit(to_json(o), m, reform_.out, "outcome");
    }

    // ---- bench -------------------------------------------------------------

    struct Bench {
        std::string task, data, mode = "original", config, out, model_name, model, dict, world;
        std::string dataset = "MOH-X";
        std::size_t jobs = 1;
        std::uint64_t seed = 0;
        bool allow_same_judge = false;
    } bench_;

    void add_bench() {
        auto* b = app_.add_subcommand("bench", "Benchmark runs");
        b->require_subcommand(1);
        auto* r = b->add_subcommand("run", "Answer a dataset in original or enhanced mode and grade the replies");
        opt(r, "--task", bench_.task, "math or metaphor")->required()->check(CLI::IsMember({"math", "metaphor"}));
        opt(r, "--data", bench_.data, "Math: directory of .json or a .jsonl file; metaphor: TSV file")->required();
        opt(r, "--mode", bench_.mode, "original or enhanced")->capture_default_str()->check(CLI::IsMember({"original", "enhanced"}));
        opt(r, "--config", bench_.config, "Run configuration JSON (clients, detect, reformulate)")->required();
        opt(r, "--out", bench_.out, "Output directory (results.json, outcomes.jsonl, table.txt, manifest.json)")->required();
        opt(r, "--model-name", bench_.model_name, "Row label in the results table (default: the subject endpoint's model)");
        opt(r, "--model", bench_.model, "SAE1 model file (enhanced mode)");
        opt(r, "--dict", bench_.dict, "Feature dictionary JSON (enhanced mode)");
        opt(r, "--world", bench_.world, "Token-world JSON (enhanced mode)");
        opt(r, "--dataset", bench_.dataset, "Dataset tag for metaphor rows without a dataset column")->capture_default_str();
        opt(r, "--jobs", bench_.jobs, "Items evaluated concurrently")->capture_default_str();
        opt(r, "--seed", bench_.seed, "Seed for token-world noise")->capture_default_str();
        flag(r, "--allow-same-judge", bench_.allow_same_judge, "Permit the rephraser endpoint to judge its own rewrites");
        on(r, [this, r] { bench_run(r); });
    }

    void bench_run(CLI::App* sub) {
        auto m = manifest(sub, "bench run");
        auto cfg = load_run_config(bench_.config, m);
        cfg.reformulate.allow_same_judge = cfg.reformulate.allow_same_judge || bench_.allow_same_judge;
        const auto mode = bench_mode_from_string(bench_.mode);
        const std::string name = bench_.model_name.empty() ? endpoint_model(cfg, "subject") : bench_.model_name;
        m.input("data", bench_.data.back() == '/' ? bench_.data.substr(0, bench_.data.size() - 1) : bench_.data);
        m.seeds = {{"world", bench_.seed}};

        std::optional<Loaded> loaded;
        DetectionEnv env;
        if (mode == BenchMode::Enhanced) {
            if (bench_.model.empty() || bench_.dict.empty() || bench_.world.empty())
                throw ValidationError("bench run: enhanced mode needs --model, --dict and --world");
            loaded = load_detection(m, bench_.model, bench_.dict, bench_.world);
            env.model = &loaded->model;
            env.dictionary = &loaded->dict;
            env.source = world_source(loaded->world.world, loaded->world.truth, bench_.seed);
            env.categories = load_category_map(cfg.detect.category_map);
            env.detect = cfg.detect;
        }
        ClientSet clients(cfg.clients);
        BenchResult res;
        std::size_t skipped = 0;
        if (bench_.task == "math") {
            const auto ds = load_math(bench_.data);
            skipped = ds.skipped;
            for (const auto& w : ds.warnings) io_.err << "warning: " << w << "\n";
            res = run_math_benchmark(ds.items, mode, clients, loaded ? &env : nullptr, cfg.reformulate, name, bench_.jobs);
        } else {
            const auto ds = load_metaphor(bench_.data, bench_.dataset);
            res = run_metaphor_benchmark(ds.items, mode, clients, loaded ? &env : nullptr, name, bench_.jobs);
        }
        const fs::path dir = bench_.out;
        fs::create_directories(dir);
        std::string log;
        for (const auto& r : res.log) log += r.dump() + "\n";
        detail::write_file(dir / "results.json", to_json(res.table).dump(1) + "\n");
        detail::write_file(dir / "outcomes.jsonl", log);
        detail::write_file(dir / "table.txt", render_table(res.table));
        m.output("results", dir / "results.json");
        m.output("outcomes", dir / "outcomes.jsonl");
        m.output("table", dir / "table.txt");
        write_manifest(m, dir);
        io_.out << render_table(res.table) << res.log.size() << " items, " << res.failures << " failed";
        if (skipped) io_.out << ", " << skipped << " skipped at load";
        io_.out << "\n";
    }

    // ---- report ------------------------------------------------------------

    struct Report {
        std::vector<std::string> tables;
        bool json_out = false;
    } report_;

    void add_report() {
        auto* r = app_.add_subcommand("report", "Summaries of result tables");
        r->require_subcommand(1);
        auto* s = r->add_subcommand("stats", "Caption statistics and paired t-tests for original vs enhanced rows");
        opt(s, "--table", report_.tables, "Results table JSON; repeat to merge rows from several runs")->required();
        flag(s, "--json", report_.json_out, "Print the statistics as JSON instead of text");
        on(s, [this] { report_stats(); });
    }

    void report_stats() {
        ResultsTable merged = load_results_table(report_.tables.front());
        for (std::size_t i = 1; i < report_.tables.size(); ++i) {
            const auto t = load_results_table(report_.tables[i]);
            if (t.columns != merged.columns)
                throw ValidationError("report stats: " + report_.tables[i] + " has different columns");
            for (const auto& row : t.rows) {
                if (merged.find(row.model, row.condition))
                    throw ValidationError("report stats: duplicate row " + row.model + "/" + row.condition);
                merged.rows.push_back(row);
            }
        }
        const auto kept = drop_empty_columns(merged);
        if (kept.columns.size() != merged.columns.size()) {
            io_.err << "note: " << merged.columns.size() - kept.columns.size() << " column(s) without values left out\n";
            merged = kept;
        }
        if (report_.json_out) {
            json tests = json::object();
            for (const auto& m : model_t_tests_or_reasons(merged))
                tests[m.model] = m.test ? json{{"t", m.test->t}, {"df", m.test->df}, {"p", m.test->p},
                                               {"mean_diff", m.test->mean_diff}}
                                        : json{{"reason", m.reason}};
            io_.out << json{{"caption_stats", to_json(caption_stats(merged))}, {"t_tests", tests}}.dump(2) << "\n";
            return;
        }
        io_.out << render_table(merged) << "\n" << render_stats(merged);
    }

    // ---- replay ------------------------------------------------------------

    struct Replay {
        std::string log, config;
    } replay_;

    void add_replay() {
        auto* r = app_.add_subcommand("replay", "Re-run recorded outcomes against their own transcripts and compare");
        opt(r, "--log", replay_.log, "outcomes.jsonl from bench run, or an outcome JSON from reformulate")->required();
        opt(r, "--config", replay_.config, "Run configuration JSON (reformulate section)");
        on(r, [this, r] { replay(r); });
    }

    void replay(CLI::App* sub) {
        auto m = manifest(sub, "replay");
        const auto cfg = load_run_config(replay_.config, m);
        std::vector<json> records;
        const std::string text = detail::read_file(replay_.log);
        try {
            if (fs::path(replay_.log).extension() == ".jsonl") {
                std::istringstream in(text);
                std::string line;
                while (std::getline(in, line))
                    if (!trim(line).empty()) records.push_back(json::parse(line));
            } else {
                records.push_back(json::parse(text));
            }
        } catch (const json::parse_error& e) {
            throw IoError("replay " + replay_.log + ": " + e.what());
        }
        std::size_t same = 0, skipped = 0;
        std::vector<std::string> diverged;
        for (std::size_t i = 0; i < records.size(); ++i) {
            const json& r = records[i];
            if (r.contains("error") || (r.contains("id") && !r.contains("outcome"))) {
                ++skipped;
                continue;
            }
            const json& oj = r.contains("outcome") ? r.at("outcome") : r;
            const auto rec = outcome_from_json(oj);
            try {
                if (to_json(replay_outcome(rec, cfg.reformulate)) == to_json(rec)) ++same;
                else diverged.push_back("record " + std::to_string(i + 1) + ": outcome differs");
            } catch (const ClientError& e) {
                diverged.push_back("record " + std::to_string(i + 1) + ": " + e.what());
            }
        }
        io_.out << "replayed " << same + diverged.size() << " outcomes: " << same << " identical, " << diverged.size()
                << " diverged, " << skipped << " skipped (failed items)\n";
        for (const auto& d : diverged) io_.out << "  " << d << "\n";
        if (!diverged.empty()) throw ValidationError("replay: " + std::to_string(diverged.size()) + " outcome(s) diverged");
    }

    Io io_;
    CLI::App app_;
    std::function<void()> action_;
    std::map<CLI::App*, std::vector<std::function<void(json&)>>> recorders_;
};

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    App app({out, err});
    return app.run(argc, argv);
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<const char*> argv{"monolex"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

} // namespace monolex::cli
