#include "trajgen/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "trajgen/aegan.hpp"
#include "trajgen/data.hpp"
#include "trajgen/error.hpp"
#include "trajgen/eval.hpp"
#include "trajgen/markov.hpp"
#include "trajgen/nflow.hpp"
#include "trajgen/parallel.hpp"
#include "trajgen/random.hpp"

namespace trajgen::cli {

namespace {

using nlohmann::json;

// Raised for argument combinations CLI11 cannot express; maps to exit 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GlobalOptions {
  std::uint64_t seed = 0;
  std::size_t threads = 0;
};

struct SynthOptions {
  std::string out;
  std::size_t trips = 100;
  std::size_t length_min = 100;
  std::size_t length_max = 6330;
  std::string profile = "mixed";
  double v_max = data::kDefaultVMax;
};

struct TrainOptions {
  std::string model;
  std::string corpus;
  std::string out;
  double v_max = data::kDefaultVMax;
  double bin_width = data::kDefaultBinWidth;
  // nf
  std::size_t min_samples = 50;
  std::size_t flow_epochs = 400;
  double flow_lr = 0.02;
  double jitter = 0.1;
  // rnn1d / rnn3d / crnn
  std::size_t epochs = 2000;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  double gan_learning_rate = 0.0;
  double ae_lr_final_factor = 1.0;
  std::size_t hidden_size = 24;
  std::size_t layers = 0;
  std::size_t gan_hidden = 64;
  std::size_t disc_steps = 1;
  std::size_t gen_steps = 1;
  std::string gen_loss = "nonsaturating";
  double instance_noise = 0.1;
  double clip_norm = 5.0;
  std::size_t checkpoint_every = 0;
  std::string checkpoint;
};

struct GenerateOptions {
  std::string model;
  std::string out;
  std::size_t count = 1;
  std::size_t length = 0;
  std::string condition_length;
  std::size_t per = 1;
  double s0 = 0.0;
  std::string emission = "uniform";
};

struct EvaluateOptions {
  std::string generated;
  std::string reference;
  std::string out;
  std::string manifest;
  double v_max = data::kDefaultVMax;
  double speed_bin = 0.5;
  double accel_lo = -5.0;
  double accel_hi = 5.0;
  double accel_bin = 0.1;
  std::size_t sample_size = eval::kSampleSize;
  double zero_tolerance = eval::kZeroTolerance;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// Global options followed by the active subcommand's section, all values
// resolved; loadable again through --config.
std::string resolved_config(const CLI::App& app, const CLI::App& sub) {
  std::ostringstream s;
  for (const CLI::Option* opt : app.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "seed" || name == "threads") s << name << '=' << opt->as<std::string>() << '\n';
  }
  s << '[' << sub.get_name() << "]\n" << sub.config_to_str(true, false);
  return s.str();
}

data::Corpus read_corpus(const std::string& path, double v_max) {
  data::CsvSchema schema;
  schema.v_max = v_max;
  return data::ingest_csv(path, schema);
}

// "1000..6000:step1000", "2500" or "1000,3000".
std::vector<double> parse_lengths(const std::string& text) {
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || !(v > 0.0) || !std::isfinite(v)) {
      throw UsageError("--condition-length: '" + s + "' is not a positive length in meters");
    }
    return v;
  };
  std::vector<double> out;
  const auto dots = text.find("..");
  if (dots != std::string::npos) {
    const auto colon = text.find(":step", dots);
    if (colon == std::string::npos) throw UsageError("--condition-length: range needs ':step<meters>'");
    const double lo = number(text.substr(0, dots));
    const double hi = number(text.substr(dots + 2, colon - dots - 2));
    const double step = number(text.substr(colon + 5));
    if (hi < lo) throw UsageError("--condition-length: range end is below its start");
    const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
    for (std::size_t k = 0; k < n; ++k) out.push_back(lo + static_cast<double>(k) * step);
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(number(item));
  if (out.empty()) throw UsageError("--condition-length is empty");
  return out;
}

// ---------------------------------------------------------------------------

int cmd_synth(const GlobalOptions& g, const SynthOptions& o, std::ostream& out) {
  data::SynthConfig cfg;
  cfg.trips = o.trips;
  cfg.min_length = o.length_min;
  cfg.max_length = o.length_max;
  cfg.profile = *data::profile_from_name(o.profile);
  cfg.seed = g.seed;
  cfg.v_max = o.v_max;
  const data::Corpus corpus = data::synth_corpus(cfg);
  data::export_csv(corpus, o.out);
  out << "wrote " << corpus.size() << " trips (" << corpus.stats().points << " samples) to " << o.out << '\n';
  return kExitOk;
}

int train_markov(const TrainOptions& o, const data::Corpus& corpus, std::ostream& out) {
  const markov::TransitionMatrix m = markov::fit(corpus.trips(), o.bin_width, o.v_max);
  markov::save(m, o.out);
  const auto occ = markov::occupancy_report(m);
  out << "markov: " << occ.bins << " bins, " << occ.empty_rows << " never left\n";
  return kExitOk;
}

int train_nf(const GlobalOptions& g, const TrainOptions& o, const data::Corpus& corpus, std::ostream& out) {
  nflow::EnsembleConfig cfg;
  cfg.bin_width = o.bin_width;
  cfg.v_max = o.v_max;
  cfg.min_samples = o.min_samples;
  cfg.fit.epochs = o.flow_epochs;
  cfg.fit.lr = o.flow_lr;
  cfg.fit.jitter = o.jitter;
  cfg.fit.seed = g.seed;
  const nflow::FlowEnsemble fe = nflow::fit_ensemble(corpus.trips(), cfg);
  nflow::save(fe, o.out);
  std::ostringstream h;
  h << "bin,samples,trained,initial_log_likelihood,final_log_likelihood\n";
  for (std::size_t i = 0; i < fe.num_bins(); ++i) {
    const auto& b = fe.bin(i);
    h << i << ',' << b.samples << ',' << (b.trained ? 1 : 0) << ',' << data::format_double(b.initial_log_likelihood)
      << ',' << data::format_double(b.final_log_likelihood) << '\n';
  }
  write_text(o.out + ".history.csv", h.str());
  out << "nf: " << fe.trained_bins() << " of " << fe.num_bins() << " bins trained\n";
  return kExitOk;
}

int train_aegan(const GlobalOptions& g, const TrainOptions& o, const data::Corpus& corpus, std::ostream& out) {
  aegan::TrainConfig cfg;
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch_size;
  cfg.learning_rate = o.learning_rate;
  cfg.gan_learning_rate = o.gan_learning_rate;
  cfg.ae_lr_final_factor = o.ae_lr_final_factor;
  cfg.hidden_size = o.hidden_size;
  cfg.layers = o.layers;
  cfg.gan_hidden = o.gan_hidden;
  cfg.seed = g.seed;
  cfg.disc_steps = o.disc_steps;
  cfg.gen_steps = o.gen_steps;
  cfg.gen_loss = *aegan::gen_loss_from_name(o.gen_loss);
  cfg.instance_noise = o.instance_noise;
  cfg.clip_norm = o.clip_norm;
  cfg.checkpoint_every = o.checkpoint_every;
  cfg.checkpoint_path = o.checkpoint.empty() ? o.out + ".ckpt" : o.checkpoint;
  cfg.v_max = o.v_max;
  try {
    cfg.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  const auto variant = *aegan::variant_from_name(o.model);
  const aegan::TrainResult r = aegan::train(variant, corpus.trips(), cfg);
  aegan::save(r.model, o.out, {{"epochs", cfg.epochs}, {"seed", cfg.seed}});
  std::ostringstream h;
  h << "epoch,ae_loss,disc_loss,gen_loss\n";
  auto cell = [](double v) { return std::isnan(v) ? std::string() : data::format_double(v); };
  for (std::size_t e = 0; e < r.history.size(); ++e) {
    h << e + 1 << ',' << cell(r.history[e].ae) << ',' << cell(r.history[e].disc) << ',' << cell(r.history[e].gen)
      << '\n';
  }
  write_text(o.out + ".history.csv", h.str());
  out << o.model << ": " << cfg.epochs << " epochs, final reconstruction loss "
      << data::format_double(r.history.back().ae) << " (m/s)^2\n";
  return kExitOk;
}

int cmd_train(const GlobalOptions& g, const TrainOptions& o, std::ostream& out) {
  const data::Corpus corpus = read_corpus(o.corpus, o.v_max);
  if (corpus.empty()) throw UsageError("corpus '" + o.corpus + "' has no trips");
  if (o.model == "markov") return train_markov(o, corpus, out);
  if (o.model == "nf") return train_nf(g, o, corpus, out);
  return train_aegan(g, o, corpus, out);
}

struct Job {
  std::optional<double> length_m;
};

int cmd_generate(const GlobalOptions& g, const GenerateOptions& o, std::ostream& out) {
  std::vector<Job> jobs;
  if (!o.condition_length.empty()) {
    for (double L : parse_lengths(o.condition_length)) {
      for (std::size_t k = 0; k < o.per; ++k) jobs.push_back({L});
    }
  } else {
    jobs.assign(o.count, Job{});
  }

  json manifest = {{"format", "trajgen.generation"}, {"model", o.model}, {"seed", g.seed}};
  std::function<std::vector<double>(const Job&, std::size_t, std::uint64_t)> draw;
  double v_max = data::kDefaultVMax;
  auto need_length = [&](const char* kind) {
    if (o.length < 2) throw UsageError(std::string(kind) + " models need --length of at least 2");
  };

  std::optional<aegan::AeGanModel> ae;
  std::optional<markov::TransitionMatrix> mc;
  std::optional<nflow::FlowEnsemble> fe;
  if (aegan::is_model_file(o.model)) {
    ae = aegan::load(o.model);
    if (!ae->trained) throw UsageError("model '" + o.model + "' is untrained");
    v_max = ae->ed.speed_scale;
    const auto variant = ae->variant;
    manifest["kind"] = aegan::variant_name(variant);
    if (variant == aegan::Variant::crnn && o.condition_length.empty()) {
      throw UsageError("crnn models need --condition-length");
    }
    if (variant == aegan::Variant::rnn1d) {
      if (!o.condition_length.empty()) throw UsageError("rnn1d models take no --condition-length");
      need_length("rnn1d");
    }
    if (variant == aegan::Variant::rnn3d && o.condition_length.empty()) need_length("rnn3d");
    draw = [&](const Job& job, std::size_t, std::uint64_t seed) {
      std::size_t n = o.length;
      if (n == 0) n = std::max<std::size_t>(2, ae->norm.generation_steps(*job.length_m));
      return aegan::generate(*ae, n, seed, job.length_m);
    };
  } else {
    json j;
    {
      std::ifstream in(o.model, std::ios::binary);
      try {
        j = json::parse(in);
      } catch (const json::exception&) {
        throw DataError("'" + o.model + "' is not a model file");
      }
    }
    const std::string format = j.value("format", "");
    if (!o.condition_length.empty()) throw UsageError("only crnn and rnn3d models take --condition-length");
    if (format == "trajgen.markov") {
      mc = markov::from_json(j);
      v_max = mc->v_max();
      manifest["kind"] = "markov";
      need_length("markov");
      const auto emission = o.emission == "midpoint" ? markov::Emission::midpoint : markov::Emission::uniform;
      draw = [&, emission](const Job&, std::size_t, std::uint64_t seed) {
        return markov::sample(*mc, o.length, o.s0, seed, emission);
      };
    } else if (format == "trajgen.nflow") {
      fe = nflow::ensemble_from_json(j);
      v_max = fe->v_max();
      manifest["kind"] = "nf";
      if (o.length < 1) throw UsageError("nf models need --length of at least 1");
      draw = [&](const Job&, std::size_t, std::uint64_t seed) { return nflow::nfg_generate(*fe, o.length, seed).speeds; };
    } else {
      throw DataError("'" + o.model + "' is not a model file");
    }
  }

  std::vector<data::Trip> trips;
  json entries = json::array();
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    const std::uint64_t seed = derive_seed(g.seed, k);
    data::Trip t;
    t.id = "gen-" + std::to_string(k);
    t.speeds = draw(jobs[k], k, seed);
    json e = {{"id", t.id}, {"seed", seed}, {"samples", t.speeds.size()}};
    if (jobs[k].length_m) e["condition_length_m"] = *jobs[k].length_m;
    entries.push_back(e);
    trips.push_back(std::move(t));
  }
  manifest["trips"] = entries;
  data::export_csv(data::Corpus(std::move(trips), v_max), o.out);
  write_json(o.out + ".manifest.json", manifest);
  out << "wrote " << jobs.size() << " trips to " << o.out << '\n';
  return kExitOk;
}

int cmd_evaluate(const GlobalOptions& g, const EvaluateOptions& o, std::ostream& out) {
  const data::Corpus gen = read_corpus(o.generated, o.v_max);
  const data::Corpus ref = read_corpus(o.reference, o.v_max);
  std::vector<double> targets;
  if (!o.manifest.empty()) {
    std::ifstream in(o.manifest, std::ios::binary);
    json m;
    try {
      m = json::parse(in);
    } catch (const json::exception&) {
      throw DataError("'" + o.manifest + "' is not a generation manifest");
    }
    for (const auto& e : m.at("trips")) {
      if (!e.contains("condition_length_m")) {
        throw UsageError("manifest '" + o.manifest + "' has trips without a condition length");
      }
      targets.push_back(e.at("condition_length_m").get<double>());
    }
    if (targets.size() != gen.size()) {
      throw UsageError("manifest lists " + std::to_string(targets.size()) + " trips, generated corpus has " +
                       std::to_string(gen.size()));
    }
  }
  eval::EvalConfig cfg;
  cfg.v_max = o.v_max;
  cfg.speed_bin = o.speed_bin;
  cfg.accel_lo = o.accel_lo;
  cfg.accel_hi = o.accel_hi;
  cfg.accel_bin = o.accel_bin;
  cfg.sample_size = o.sample_size;
  cfg.seed = g.seed;
  cfg.zero_tolerance = o.zero_tolerance;
  const eval::ComparisonReport r = eval::compare(gen.trips(), ref.trips(), cfg, targets);
  write_json(o.out, eval::to_json(r));
  eval::write_density_csv(r.generated_speed, o.out + ".speed_generated.csv");
  eval::write_density_csv(r.reference_speed, o.out + ".speed_reference.csv");
  eval::write_density_csv(r.generated_accel, o.out + ".accel_generated.csv");
  eval::write_density_csv(r.reference_accel, o.out + ".accel_reference.csv");
  out << "speed TV " << data::format_double(r.speed_tv) << ", W1 " << data::format_double(r.speed_w1)
      << "; accel W1 " << data::format_double(r.accel_w1) << '\n';
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Vehicle speed-trajectory generators", "trajgen"};
  app.set_config("--config", "", "TOML file with option values; command-line flags win")->check(CLI::ExistingFile);
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  GlobalOptions g;
  app.add_option("--seed", g.seed, "Base random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (0: hardware)")->capture_default_str();

  SynthOptions so;
  CLI::App* synth = app.add_subcommand("synth", "Write a synthetic corpus CSV");
  synth->add_option("--out", so.out, "Output CSV")->required();
  synth->add_option("--trips", so.trips)->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--length-min", so.length_min, "Shortest trip, s")->capture_default_str();
  synth->add_option("--length-max", so.length_max, "Longest trip, s")->capture_default_str();
  synth->add_option("--profile", so.profile)->capture_default_str()->check(CLI::IsMember({"urban", "highway", "mixed"}));
  synth->add_option("--v-max", so.v_max, "Speed ceiling, m/s")->capture_default_str()->check(CLI::PositiveNumber);

  TrainOptions to;
  CLI::App* train = app.add_subcommand("train", "Fit a generator to a corpus CSV");
  train->add_option("model", to.model, "markov, nf, rnn1d, rnn3d or crnn")
      ->required()
      ->check(CLI::IsMember({"markov", "nf", "rnn1d", "rnn3d", "crnn"}));
  train->add_option("--corpus", to.corpus, "Corpus CSV")->required()->check(CLI::ExistingFile);
  train->add_option("--out", to.out, "Model artifact")->required();
  train->add_option("--v-max", to.v_max)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--bin-width", to.bin_width, "markov, nf: speed bin width, m/s")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  train->add_option("--min-samples", to.min_samples, "nf: fewest next-speeds to train a bin")->capture_default_str();
  train->add_option("--flow-epochs", to.flow_epochs, "nf")->capture_default_str();
  train->add_option("--flow-learning-rate", to.flow_lr, "nf")->capture_default_str();
  train->add_option("--jitter", to.jitter, "nf: dequantization noise width, m/s")->capture_default_str();
  train->add_option("--epochs", to.epochs)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--batch-size", to.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--learning-rate", to.learning_rate)->capture_default_str();
  train->add_option("--gan-learning-rate", to.gan_learning_rate, "0: same as --learning-rate")->capture_default_str();
  train->add_option("--ae-lr-final-factor", to.ae_lr_final_factor)->capture_default_str();
  train->add_option("--hidden-size", to.hidden_size)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--layers", to.layers, "0: 3 for rnn1d, 2 otherwise")->capture_default_str();
  train->add_option("--gan-hidden", to.gan_hidden)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--disc-steps", to.disc_steps)->capture_default_str();
  train->add_option("--gen-steps", to.gen_steps)->capture_default_str();
  train->add_option("--gen-loss", to.gen_loss)->capture_default_str()->check(CLI::IsMember({"nonsaturating", "minimax"}));
  train->add_option("--instance-noise", to.instance_noise)->capture_default_str();
  train->add_option("--clip-norm", to.clip_norm)->capture_default_str();
  train->add_option("--checkpoint-every", to.checkpoint_every)->capture_default_str();
  train->add_option("--checkpoint", to.checkpoint, "Checkpoint path (default <out>.ckpt)");

  GenerateOptions go;
  CLI::App* generate = app.add_subcommand("generate", "Sample trips from a trained model");
  generate->add_option("--model", go.model, "Model artifact")->required()->check(CLI::ExistingFile);
  generate->add_option("--out", go.out, "Output CSV")->required();
  generate->add_option("--count", go.count, "Trips, without --condition-length")->capture_default_str();
  generate->add_option("--length", go.length, "Samples per trip (nf: steps after the initial 0)")
      ->capture_default_str();
  generate->add_option("--condition-length", go.condition_length,
                       "Target lengths in meters: 1000..6000:step1000, 2500 or 1000,3000");
  generate->add_option("--per", go.per, "Trips per condition length")->capture_default_str()->check(CLI::PositiveNumber);
  generate->add_option("--s0", go.s0, "markov: initial speed")->capture_default_str();
  generate->add_option("--emission", go.emission, "markov: uniform or midpoint")
      ->capture_default_str()
      ->check(CLI::IsMember({"uniform", "midpoint"}));

  EvaluateOptions eo;
  CLI::App* evaluate = app.add_subcommand("evaluate", "Compare generated trips against a reference corpus");
  evaluate->add_option("--generated", eo.generated)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--reference", eo.reference)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--out", eo.out, "Report JSON; density CSVs are written next to it")->required();
  evaluate->add_option("--manifest", eo.manifest, "Generation manifest with per-trip target lengths")
      ->check(CLI::ExistingFile);
  evaluate->add_option("--v-max", eo.v_max)->capture_default_str()->check(CLI::PositiveNumber);
  evaluate->add_option("--speed-bin", eo.speed_bin)->capture_default_str()->check(CLI::PositiveNumber);
  evaluate->add_option("--accel-lo", eo.accel_lo)->capture_default_str();
  evaluate->add_option("--accel-hi", eo.accel_hi)->capture_default_str();
  evaluate->add_option("--accel-bin", eo.accel_bin)->capture_default_str()->check(CLI::PositiveNumber);
  evaluate->add_option("--sample-size", eo.sample_size)->capture_default_str()->check(CLI::PositiveNumber);
  evaluate->add_option("--zero-tolerance", eo.zero_tolerance)->capture_default_str();

  std::vector<std::string> args;
  for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) return app.exit(e, out, err);
    const auto subs = app.get_subcommands();
    err << "error: " << e.what() << "\n\n" << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  if (g.threads > 0) set_default_threads(g.threads);
  try {
    CLI::App* sub = app.get_subcommands().front();
    std::string out_path;
    int code = kExitOk;
    if (sub == synth) {
      if (so.length_min > so.length_max) throw UsageError("--length-min exceeds --length-max");
      code = cmd_synth(g, so, out);
      out_path = so.out;
    } else if (sub == train) {
      code = cmd_train(g, to, out);
      out_path = to.out;
    } else if (sub == generate) {
      code = cmd_generate(g, go, out);
      out_path = go.out;
    } else {
      code = cmd_evaluate(g, eo, out);
      out_path = eo.out;
    }
    write_text(out_path + ".config.toml", resolved_config(app, *sub));
    return code;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << app.get_subcommands().front()->help();
    return kExitUsage;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    if (!e.checkpoint().empty()) err << "checkpoint: " << e.checkpoint() << '\n';
    return kExitFailure;
  } catch (const SamplingError& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace trajgen::cli
