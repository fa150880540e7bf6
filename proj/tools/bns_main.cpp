#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bns/eval.hpp"
#include "bns/field.hpp"
#include "bns/nsparams.hpp"
#include "bns/scheduler.hpp"
#include "bns/train.hpp"
#include "bns/transform.hpp"

namespace {

namespace nj = nlohmann;
namespace fs = std::filesystem;
using bns::ConfigError;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const std::string& path, const std::string& content) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write file: " + path);
    out << content;
    if (!out) throw ConfigError("write failed: " + path);
}

void reject_unknown_keys(const nj::json& obj, const std::string& ctx,
                         std::initializer_list<const char*> allowed) {
    for (const auto& item : obj.items()) {
        bool ok = false;
        for (const char* key : allowed)
            if (item.key() == key) {
                ok = true;
                break;
            }
        if (!ok)
            throw ConfigError("config: unknown key '" + item.key() + "' in " + ctx);
    }
}

const nj::json& require_object(const nj::json& j, const std::string& ctx) {
    if (!j.is_object()) throw ConfigError("config: " + ctx + " must be an object");
    return j;
}

double as_number(const nj::json& j, const std::string& ctx) {
    if (!j.is_number()) throw ConfigError("config: " + ctx + " must be a number");
    return j.get<double>();
}

int as_int(const nj::json& j, const std::string& ctx) {
    if (!j.is_number_integer()) throw ConfigError("config: " + ctx + " must be an integer");
    return j.get<int>();
}

std::string as_string(const nj::json& j, const std::string& ctx) {
    if (!j.is_string()) throw ConfigError("config: " + ctx + " must be a string");
    return j.get<std::string>();
}

bns::Vec as_vec(const nj::json& j, const std::string& ctx) {
    if (!j.is_array()) throw ConfigError("config: " + ctx + " must be an array of numbers");
    bns::Vec out;
    out.reserve(j.size());
    for (const auto& v : j) out.push_back(as_number(v, ctx + " entry"));
    return out;
}

bns::Scheduler parse_scheduler(const nj::json& j) {
    require_object(j, "scheduler");
    reject_unknown_keys(j, "scheduler", {"kind", "base", "sigma0", "sigma_max"});
    if (!j.contains("kind")) throw ConfigError("config: scheduler needs a 'kind'");
    const std::string kind = as_string(j.at("kind"), "scheduler.kind");
    auto plain = [](const std::string& name) -> std::optional<bns::Scheduler> {
        if (name == "ot") return bns::Scheduler::ot();
        if (name == "cosine_cs") return bns::Scheduler::cosine_cs();
        if (name == "vp") return bns::Scheduler::vp();
        return std::nullopt;
    };
    if (kind == "edm_ve") {
        double sigma_max = 80.0;
        if (j.contains("sigma_max")) sigma_max = as_number(j.at("sigma_max"), "sigma_max");
        return bns::Scheduler::edm_ve(sigma_max);
    }
    if (kind == "scaled_sigma") {
        if (!j.contains("base") || !j.contains("sigma0"))
            throw ConfigError("config: scaled_sigma scheduler needs 'base' and 'sigma0'");
        const std::string base_name = as_string(j.at("base"), "scheduler.base");
        std::optional<bns::Scheduler> base = plain(base_name);
        if (!base && base_name == "edm_ve") base = bns::Scheduler::edm_ve();
        if (!base)
            throw ConfigError("config: unknown base scheduler '" + base_name + "'");
        return bns::Scheduler::scaled_sigma(*base, as_number(j.at("sigma0"), "sigma0"));
    }
    if (auto s = plain(kind)) {
        if (j.contains("sigma_max") || j.contains("base") || j.contains("sigma0"))
            throw ConfigError("config: scheduler kind '" + kind + "' takes no extra keys");
        return *s;
    }
    throw ConfigError("config: unknown scheduler kind '" + kind + "'");
}

bns::GaussianMixture parse_gmm(const nj::json& j, const std::string& ctx) {
    require_object(j, ctx);
    reject_unknown_keys(j, ctx, {"weights", "means", "stds"});
    if (!j.contains("weights") || !j.contains("means") || !j.contains("stds"))
        throw ConfigError("config: " + ctx + " needs 'weights', 'means' and 'stds'");
    bns::GaussianMixture gmm;
    gmm.weights = as_vec(j.at("weights"), ctx + ".weights");
    gmm.stds = as_vec(j.at("stds"), ctx + ".stds");
    const nj::json& means = j.at("means");
    if (!means.is_array()) throw ConfigError("config: " + ctx + ".means must be an array");
    for (const auto& row : means) gmm.means.push_back(as_vec(row, ctx + ".means row"));
    gmm.validate();
    return gmm;
}

bns::Parameterization parse_parameterization(const std::string& name) {
    if (name == "velocity") return bns::Parameterization::Velocity;
    if (name == "eps") return bns::Parameterization::EpsPred;
    if (name == "x") return bns::Parameterization::XPred;
    throw ConfigError("config: unknown parameterization '" + name +
                      "' (expected velocity, eps or x)");
}

struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    bns::Scheduler scheduler;
    bns::FieldPtr field;
    double field_sigma0 = 1.0;

    // data block
    int data_count = 520;
    double data_rtol = 1e-9;
    std::optional<double> data_std;

    bns::TrainConfig train;
    std::string train_data;
    std::string val_data;

    std::vector<std::string> sweep_solvers;
    std::vector<int> sweep_nfes;
    std::string sweep_dataset;
    std::string sweep_theta;

    int taxonomy_count = 20;
    int taxonomy_dim = 2;
    double taxonomy_tol = 1e-9;
    int taxonomy_rules = 50;
};

RunConfig parse_config(const std::string& path) {
    nj::json j;
    try {
        j = nj::json::parse(read_file(path));
    } catch (const nj::json::exception& e) {
        throw ConfigError("config: " + path + ": " + e.what());
    }
    require_object(j, "config root");
    reject_unknown_keys(j, "config root",
                        {"seed", "output_dir", "field", "data", "train", "sweep", "taxonomy"});
    RunConfig cfg;
    if (j.contains("seed")) {
        if (!j.at("seed").is_number_integer() || j.at("seed").get<long long>() < 0)
            throw ConfigError("config: seed must be a non-negative integer");
        cfg.seed = j.at("seed").get<std::uint64_t>();
    }
    if (j.contains("output_dir")) cfg.output_dir = as_string(j.at("output_dir"), "output_dir");

    if (!j.contains("field")) throw ConfigError("config: missing 'field'");
    const nj::json& f = require_object(j.at("field"), "field");
    reject_unknown_keys(f, "field",
                        {"scheduler", "gmm", "parameterization", "guidance", "sigma0"});
    if (!f.contains("scheduler") || !f.contains("gmm"))
        throw ConfigError("config: field needs 'scheduler' and 'gmm'");
    cfg.scheduler = parse_scheduler(f.at("scheduler"));
    const bns::GaussianMixture gmm = parse_gmm(f.at("gmm"), "field.gmm");
    bns::FieldPtr vel = bns::make_gmm_field(gmm, cfg.scheduler);
    bns::Parameterization param = bns::Parameterization::Velocity;
    if (f.contains("parameterization"))
        param = parse_parameterization(as_string(f.at("parameterization"), "parameterization"));
    if (f.contains("guidance")) {
        const nj::json& g = require_object(f.at("guidance"), "field.guidance");
        reject_unknown_keys(g, "field.guidance", {"weight", "uncond"});
        if (!g.contains("weight") || !g.contains("uncond"))
            throw ConfigError("config: field.guidance needs 'weight' and 'uncond'");
        const double weight = as_number(g.at("weight"), "guidance.weight");
        const bns::GaussianMixture ugmm = parse_gmm(g.at("uncond"), "field.guidance.uncond");
        bns::FieldPtr uncond = bns::make_gmm_field(ugmm, cfg.scheduler);
        const bns::FieldPtr cond_m = bns::to_model_output(vel, param, cfg.scheduler);
        const bns::FieldPtr unc_m = bns::to_model_output(uncond, param, cfg.scheduler);
        vel = bns::to_velocity(bns::cfg_combine(cond_m, unc_m, weight), param, cfg.scheduler);
    } else if (param != bns::Parameterization::Velocity) {
        // Round-trip through the model parameterization so the field the
        // commands see is the one a model with that output head induces.
        vel = bns::to_velocity(bns::to_model_output(vel, param, cfg.scheduler), param,
                               cfg.scheduler);
    }
    cfg.field = vel;
    if (f.contains("sigma0")) cfg.field_sigma0 = as_number(f.at("sigma0"), "field.sigma0");
    cfg.train.sigma0 = cfg.field_sigma0;

    if (j.contains("data")) {
        const nj::json& d = require_object(j.at("data"), "data");
        reject_unknown_keys(d, "data", {"count", "rtol", "std"});
        if (d.contains("count")) cfg.data_count = as_int(d.at("count"), "data.count");
        if (d.contains("rtol")) cfg.data_rtol = as_number(d.at("rtol"), "data.rtol");
        if (d.contains("std")) cfg.data_std = as_number(d.at("std"), "data.std");
    }

    if (j.contains("train")) {
        const nj::json& t = require_object(j.at("train"), "train");
        reject_unknown_keys(t, "train",
                            {"nfe", "init", "sigma0", "lr", "lr_end", "lr_power", "batch",
                             "iters", "val_every", "optimizer", "beta1", "beta2", "adam_eps",
                             "psnr_range", "train_data", "val_data"});
        if (t.contains("nfe")) cfg.train.n_nfe = as_int(t.at("nfe"), "train.nfe");
        if (t.contains("init")) cfg.train.init = as_string(t.at("init"), "train.init");
        if (t.contains("sigma0")) cfg.train.sigma0 = as_number(t.at("sigma0"), "train.sigma0");
        if (t.contains("lr")) cfg.train.lr = as_number(t.at("lr"), "train.lr");
        if (t.contains("lr_end")) cfg.train.lr_end = as_number(t.at("lr_end"), "train.lr_end");
        if (t.contains("lr_power"))
            cfg.train.lr_power = as_number(t.at("lr_power"), "train.lr_power");
        if (t.contains("batch")) cfg.train.batch = as_int(t.at("batch"), "train.batch");
        if (t.contains("iters")) cfg.train.iters = as_int(t.at("iters"), "train.iters");
        if (t.contains("val_every"))
            cfg.train.val_every = as_int(t.at("val_every"), "train.val_every");
        if (t.contains("optimizer"))
            cfg.train.optimizer = as_string(t.at("optimizer"), "train.optimizer");
        if (t.contains("beta1")) cfg.train.beta1 = as_number(t.at("beta1"), "train.beta1");
        if (t.contains("beta2")) cfg.train.beta2 = as_number(t.at("beta2"), "train.beta2");
        if (t.contains("adam_eps"))
            cfg.train.adam_eps = as_number(t.at("adam_eps"), "train.adam_eps");
        if (t.contains("psnr_range"))
            cfg.train.psnr_range = as_number(t.at("psnr_range"), "train.psnr_range");
        if (t.contains("train_data"))
            cfg.train_data = as_string(t.at("train_data"), "train.train_data");
        if (t.contains("val_data")) cfg.val_data = as_string(t.at("val_data"), "train.val_data");
    }

    if (j.contains("sweep")) {
        const nj::json& s = require_object(j.at("sweep"), "sweep");
        reject_unknown_keys(s, "sweep", {"solvers", "nfes", "dataset", "theta"});
        if (s.contains("solvers")) {
            if (!s.at("solvers").is_array())
                throw ConfigError("config: sweep.solvers must be an array");
            for (const auto& v : s.at("solvers"))
                cfg.sweep_solvers.push_back(as_string(v, "sweep.solvers entry"));
        }
        if (s.contains("nfes")) {
            if (!s.at("nfes").is_array())
                throw ConfigError("config: sweep.nfes must be an array");
            for (const auto& v : s.at("nfes"))
                cfg.sweep_nfes.push_back(as_int(v, "sweep.nfes entry"));
        }
        if (s.contains("dataset")) cfg.sweep_dataset = as_string(s.at("dataset"), "sweep.dataset");
        if (s.contains("theta")) cfg.sweep_theta = as_string(s.at("theta"), "sweep.theta");
    }

    if (j.contains("taxonomy")) {
        const nj::json& t = require_object(j.at("taxonomy"), "taxonomy");
        reject_unknown_keys(t, "taxonomy", {"count", "dim", "tol", "rules"});
        if (t.contains("count")) cfg.taxonomy_count = as_int(t.at("count"), "taxonomy.count");
        if (t.contains("dim")) cfg.taxonomy_dim = as_int(t.at("dim"), "taxonomy.dim");
        if (t.contains("tol")) cfg.taxonomy_tol = as_number(t.at("tol"), "taxonomy.tol");
        if (t.contains("rules")) cfg.taxonomy_rules = as_int(t.at("rules"), "taxonomy.rules");
    }
    return cfg;
}

std::string dataset_to_json(const std::vector<bns::TrajectoryPair>& data) {
    std::string out = "[\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
        out += "{\"x0\":[";
        for (std::size_t c = 0; c < data[i].x0.size(); ++c) {
            if (c) out += ',';
            out += bns::format_double(data[i].x0[c]);
        }
        out += "],\"x1\":[";
        for (std::size_t c = 0; c < data[i].x1.size(); ++c) {
            if (c) out += ',';
            out += bns::format_double(data[i].x1[c]);
        }
        out += "]}";
        if (i + 1 < data.size()) out += ',';
        out += '\n';
    }
    out += "]\n";
    return out;
}

std::vector<bns::TrajectoryPair> dataset_from_json(const std::string& path) {
    nj::json j;
    try {
        j = nj::json::parse(read_file(path));
    } catch (const nj::json::exception& e) {
        throw ConfigError("dataset: " + path + ": " + e.what());
    }
    if (!j.is_array()) throw ConfigError("dataset: " + path + " must be a JSON array");
    std::vector<bns::TrajectoryPair> out;
    out.reserve(j.size());
    for (const auto& rec : j) {
        require_object(rec, "dataset record");
        reject_unknown_keys(rec, "dataset record", {"x0", "x1"});
        if (!rec.contains("x0") || !rec.contains("x1"))
            throw ConfigError("dataset: record needs 'x0' and 'x1'");
        bns::TrajectoryPair pair;
        pair.x0 = as_vec(rec.at("x0"), "dataset x0");
        pair.x1 = as_vec(rec.at("x1"), "dataset x1");
        if (pair.x0.size() != pair.x1.size() || pair.x0.empty())
            throw ConfigError("dataset: x0/x1 must be non-empty and the same length");
        out.push_back(std::move(pair));
    }
    if (out.empty()) throw ConfigError("dataset: " + path + " is empty");
    return out;
}

int cmd_gen_data(const std::string& config_path, std::optional<int> count_flag,
                 std::string out_path, std::optional<std::uint64_t> seed_flag) {
    RunConfig cfg = parse_config(config_path);
    const int count = count_flag.value_or(cfg.data_count);
    if (count < 1) throw ConfigError("gen-data: count must be >= 1");
    const std::uint64_t seed = seed_flag.value_or(cfg.seed);
    if (out_path.empty()) out_path = cfg.output_dir + "/dataset.json";
    const double std_dev = cfg.data_std.value_or(cfg.scheduler.eval(0.0).sigma);
    const bns::GaussianSourceSpec source{cfg.field->dim(), std_dev};
    cfg.field->reset_nfe();
    const auto data = bns::generate_dataset(*cfg.field, source, count, cfg.data_rtol, seed);
    const std::uint64_t evals = cfg.field->nfe();
    write_file(out_path, dataset_to_json(data));
    std::printf("wrote %d samples (dim %d) to %s\n", count, cfg.field->dim(),
                out_path.c_str());
    std::printf("oracle evaluations: total %llu, mean %.1f per sample\n",
                static_cast<unsigned long long>(evals),
                static_cast<double>(evals) / count);
    return 0;
}

int cmd_train(const std::string& config_path, std::optional<int> nfe_flag,
              std::optional<std::string> init_flag, std::optional<double> sigma0_flag,
              std::string out_dir, std::optional<std::uint64_t> seed_flag) {
    RunConfig cfg = parse_config(config_path);
    if (nfe_flag) cfg.train.n_nfe = *nfe_flag;
    if (init_flag) cfg.train.init = *init_flag;
    if (sigma0_flag) cfg.train.sigma0 = *sigma0_flag;
    cfg.train.seed = seed_flag.value_or(cfg.seed);
    if (out_dir.empty()) out_dir = cfg.output_dir;
    if (cfg.train_data.empty() || cfg.val_data.empty())
        throw ConfigError("train: config needs train.train_data and train.val_data paths");
    const auto train_set = dataset_from_json(cfg.train_data);
    const auto val_set = dataset_from_json(cfg.val_data);

    const bns::TrainResult result =
        bns::train_bns(cfg.field, cfg.scheduler, train_set, val_set, cfg.train);

    write_file(out_dir + "/theta.json", result.theta_best.to_json());
    write_file(out_dir + "/history.csv", result.history_csv());
    double final_psnr = 0.0;
    for (const auto& row : result.history)
        if (row.has_val_psnr) final_psnr = row.val_psnr;
    std::printf("final validation psnr: %.4f dB\n", final_psnr);
    std::printf("best validation psnr: %.4f dB\n", result.best_val_psnr);
    std::printf("theta written to %s/theta.json\n", out_dir.c_str());
    return 0;
}

int cmd_sweep(const std::string& config_path, std::string out_path,
              std::optional<std::uint64_t> seed_flag) {
    RunConfig cfg = parse_config(config_path);
    (void)seed_flag;  // the sweep itself is deterministic given its inputs
    if (out_path.empty()) out_path = cfg.output_dir + "/sweep.csv";
    if (cfg.sweep_dataset.empty())
        throw ConfigError("sweep: config needs sweep.dataset");
    if (cfg.sweep_solvers.empty() || cfg.sweep_nfes.empty())
        throw ConfigError("sweep: config needs sweep.solvers and sweep.nfes");
    const auto dataset = dataset_from_json(cfg.sweep_dataset);
    std::vector<bns::SweepSolver> solvers;
    for (const std::string& name : cfg.sweep_solvers) {
        if (name == "euler") solvers.push_back(bns::sweep_euler());
        else if (name == "midpoint") solvers.push_back(bns::sweep_midpoint());
        else if (name == "rk4") solvers.push_back(bns::sweep_rk4());
        else if (name == "ab2") solvers.push_back(bns::sweep_ab2());
        else if (name == "ddim") solvers.push_back(bns::sweep_ddim(cfg.scheduler));
        else if (name == "bns") {
            if (cfg.sweep_theta.empty())
                throw ConfigError("sweep: solver 'bns' needs sweep.theta");
            solvers.push_back(
                bns::sweep_ns(bns::NSSolverParams::from_json(read_file(cfg.sweep_theta))));
        } else {
            throw ConfigError("sweep: unknown solver '" + name + "'");
        }
    }
    const bns::SweepReport report =
        bns::nfe_sweep(*cfg.field, dataset, solvers, cfg.sweep_nfes, cfg.train.psnr_range);
    write_file(out_path, report.to_csv());
    std::fputs(report.to_table().c_str(), stdout);
    std::printf("report written to %s\n", out_path.c_str());
    return 0;
}

int cmd_check_taxonomy(const std::string& config_path, std::string out_path,
                       std::optional<std::uint64_t> seed_flag) {
    RunConfig cfg = parse_config(config_path);
    if (out_path.empty()) out_path = cfg.output_dir + "/taxonomy.csv";
    const std::uint64_t seed = seed_flag.value_or(cfg.seed);
    const auto suite = bns::default_taxonomy_suite(cfg.taxonomy_count, cfg.taxonomy_dim,
                                                   bns::mix_seed(seed, 0x5f1e1dULL));
    bns::TaxonomyOptions opts;
    opts.tol = cfg.taxonomy_tol;
    opts.random_rules = cfg.taxonomy_rules;
    opts.seed = seed;
    const bns::TaxonomyReport report = bns::taxonomy_check(suite, opts);
    write_file(out_path, report.to_csv());
    std::fputs(report.to_table().c_str(), stdout);
    std::printf("report written to %s\n", out_path.c_str());
    if (!report.all_pass()) {
        std::fputs("taxonomy check FAILED\n", stdout);
        return 4;
    }
    std::fputs("taxonomy check passed\n", stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Distills diffusion/flow velocity fields into bespoke few-step solvers"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<int> count_flag;
    std::optional<int> nfe_flag;
    std::optional<std::string> init_flag;
    std::optional<double> sigma0_flag;
    std::optional<std::uint64_t> seed_flag;
    std::string out_path;

    CLI::App* gen = app.add_subcommand("gen-data", "Sample source points and integrate them to t=1 with the adaptive oracle");
    gen->add_option("config", config_path, "Run config JSON")->required();
    gen->add_option("--count", count_flag, "Number of pairs to generate");
    gen->add_option("--out", out_path, "Output dataset path (default <output_dir>/dataset.json)");
    gen->add_option("--seed", seed_flag, "Seed override");

    CLI::App* train = app.add_subcommand("train", "Train an n-step solver on stored trajectory pairs");
    train->add_option("config", config_path, "Run config JSON")->required();
    train->add_option("--nfe", nfe_flag, "Solver step count n");
    train->add_option("--init", init_flag, "Initialization: euler, midpoint, rk4, ab2 or ddim");
    train->add_option("--sigma0", sigma0_flag, "Preconditioning noise-scale multiplier");
    train->add_option("--out", out_path, "Output directory (default <output_dir>)");
    train->add_option("--seed", seed_flag, "Seed override");

    CLI::App* sweep = app.add_subcommand("sweep", "Evaluate solvers across evaluation budgets on a dataset");
    sweep->add_option("config", config_path, "Run config JSON")->required();
    sweep->add_option("--out", out_path, "Output CSV path (default <output_dir>/sweep.csv)");
    sweep->add_option("--seed", seed_flag, "Seed override");

    CLI::App* taxo = app.add_subcommand("check-taxonomy", "Verify solver-equivalence identities on random smooth fields");
    taxo->add_option("config", config_path, "Run config JSON")->required();
    taxo->add_option("--out", out_path, "Output CSV path (default <output_dir>/taxonomy.csv)");
    taxo->add_option("--seed", seed_flag, "Seed override");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, count_flag, out_path, seed_flag);
        if (train->parsed())
            return cmd_train(config_path, nfe_flag, init_flag, sigma0_flag, out_path, seed_flag);
        if (sweep->parsed()) return cmd_sweep(config_path, out_path, seed_flag);
        if (taxo->parsed()) return cmd_check_taxonomy(config_path, out_path, seed_flag);
        std::fputs("no command given\n", stderr);
        return 2;
    } catch (const bns::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const bns::DomainError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const bns::RangeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const bns::DivergenceError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const bns::StiffnessError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const bns::VerificationError& e) {
        std::fprintf(stderr, "verification failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 1;
    }
}
