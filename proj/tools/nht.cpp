/*
 * Copyright (c) 2026, The nhtlab Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include <nht/attacks.hpp>
#include <nht/channel.hpp>
#include <nht/gateway.hpp>
#include <nht/harness.hpp>
#include <nht/honeytrace.hpp>
#include <nht/verify.hpp>

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>

namespace {

using namespace nht;
namespace hn = nht::harness;
namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kStageError = 3;

/// Config file plus one --section.key flag per config key.
struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", file, "TOML config file")->check(CLI::ExistingFile);
    hn::ExperimentConfig defaults;
    hn::visit_fields(defaults, [&](const char* key, const auto& member, const char* help) {
      auto* opt = app->add_option(std::string("--") + key, values[key], std::string(help) + " [" + hn::detail::format(member) + "]");
      opt->group("Config keys");
    });
  }

  hn::ExperimentConfig resolve() const {
    hn::ExperimentConfig c;
    if (!file.empty()) c = hn::load_config(file);
    for (const auto& [key, v] : values)
      if (!v.empty()) hn::set_value(c, key, v);
    hn::validate(c);
    return c;
  }
};

template <class F>
void write_to(const fs::path& path, F&& writer) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  writer(os);
}

template <class T, class F>
T read_from(const fs::path& path, F&& reader) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw hn::ConfigError("cannot read " + path.string());
  return reader(is);
}

Mlp load_model(const fs::path& p) {
  return read_from<Mlp>(p, [](std::istream& is) { return read_model(is); });
}
Dataset load_dataset(const fs::path& p) {
  return read_from<Dataset>(p, [](std::istream& is) { return read_dataset(is); });
}
WatermarkSet load_watermarks(const fs::path& p) {
  return read_from<WatermarkSet>(p, [](std::istream& is) { return read_watermarks(is); });
}

fs::path out_dir(const hn::ExperimentConfig& c, const std::string& explicit_dir, const std::string& leaf) {
  if (!explicit_dir.empty()) return explicit_dir;
  return hn::output_root(c) / leaf;
}

gateway::Gateway* g_gateway = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nht: training-free watermarking against model extraction, desk-scale lab"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  // gen-data
  ConfigFlags gen_flags;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "Generate victim train/test sets and the attacker pool");
  gen_flags.attach(gen);
  gen->add_option("-o,--out", gen_out, "output directory [<root>/data]");

  // train-victim
  ConfigFlags tv_flags;
  std::string tv_data, tv_test, tv_out;
  auto* tv = app.add_subcommand("train-victim", "Train the victim model");
  tv_flags.attach(tv);
  tv->add_option("--train", tv_data, "training dataset file (default: generate)");
  tv->add_option("--test", tv_test, "test dataset file (default: generate)");
  tv->add_option("-o,--out", tv_out, "checkpoint path [<root>/victim.nhtm]");

  // protect
  ConfigFlags pr_flags;
  std::string pr_model, pr_wm, pr_ref, pr_inputs, pr_out;
  auto* pr = app.add_subcommand("protect", "Run protected predictions for a dataset file, CSV out");
  pr_flags.attach(pr);
  pr->add_option("--model", pr_model, "victim checkpoint")->required();
  pr->add_option("--watermarks", pr_wm, "watermark file")->required();
  pr->add_option("--reference", pr_ref, "dataset holding target-class reference samples")->required();
  pr->add_option("--inputs", pr_inputs, "dataset file to predict")->required();
  pr->add_option("-o,--out", pr_out, "CSV path (default stdout)");

  // attack
  ConfigFlags at_flags;
  std::string at_model, at_wm, at_out;
  auto* at = app.add_subcommand("attack", "Query a defended victim and write the attack trace");
  at_flags.attach(at);
  at->add_option("--model", at_model, "victim checkpoint")->required();
  at->add_option("--watermarks", at_wm, "watermark file (default: generate from config)");
  at->add_option("-o,--out", at_out, "trace path [<root>/trace.nhta]");

  // extract
  ConfigFlags ex_flags;
  std::string ex_trace, ex_victim, ex_out;
  auto* ex = app.add_subcommand("extract", "Train a surrogate from a trace");
  ex_flags.attach(ex);
  ex->add_option("--trace", ex_trace, "attack trace")->required();
  ex->add_option("--victim", ex_victim, "victim checkpoint (for fidelity)")->required();
  ex->add_option("-o,--out", ex_out, "surrogate checkpoint [<root>/surrogate.nhtm]");

  // verify
  ConfigFlags ve_flags;
  std::string ve_sus, ve_ref, ve_wm;
  double ve_baseline = -1.0;
  auto* ve = app.add_subcommand("verify", "Measure WSR on trigger probes and run the ownership test");
  ve_flags.attach(ve);
  ve->add_option("--suspicious", ve_sus, "suspicious model checkpoint")->required();
  ve->add_option("--reference", ve_ref, "unprotected reference model (the victim)")->required();
  ve->add_option("--watermarks", ve_wm, "watermark file")->required();
  ve->add_option("--baseline", ve_baseline, "null success rate p0 [verify.baseline_floor]");

  // channel
  channel::ChannelInputs ch_in;
  auto* ch = app.add_subcommand("channel", "Watermark transmission calculator");
  ch->add_option("--sigma", ch_in.similarity_sigma, "similarity standard deviation")->capture_default_str();
  ch->add_option("--precision", ch_in.precision, "quantisation step")->capture_default_str();
  ch->add_option("--classes", ch_in.num_classes, "number of classes")->capture_default_str();
  ch->add_option("--capacity", ch_in.capacity_bits, "channel capacity in bits (0 = log2 K)")->capture_default_str();
  ch->add_option("--error-rate", ch_in.error_rate, "label error rate e")->capture_default_str();
  ch->add_option("--bandwidth", ch_in.bandwidth, "bandwidth B")->capture_default_str();
  ch->add_option("--signal-mean", ch_in.signal_mean)->capture_default_str();
  ch->add_option("--signal-sigma", ch_in.signal_sigma)->capture_default_str();
  ch->add_option("--noise-mean", ch_in.noise_mean)->capture_default_str();
  ch->add_option("--noise-sigma", ch_in.noise_sigma)->capture_default_str();
  ch->add_option("--aggregate", ch_in.aggregation_count, "transmissions N")->capture_default_str();

  // run
  ConfigFlags run_flags;
  auto* run = app.add_subcommand("run", "Run one scenario end to end");
  run_flags.attach(run);

  // matrix
  ConfigFlags mx_flags;
  std::string mx_out;
  std::vector<std::string> mx_sweeps;
  bool mx_svg = false, mx_single = false;
  auto* mx = app.add_subcommand("matrix", "Defense x attack matrix with reports");
  mx_flags.attach(mx);
  mx->add_option("-o,--out", mx_out, "report directory [<root>/reports]");
  mx->add_option("--sweep", mx_sweeps, "key=v1,v2,... hyperparameter sweep (repeatable)");
  mx->add_flag("--svg", mx_svg, "also write SVG charts");
  mx->add_flag("--single", mx_single, "only the configured scenario instead of the default matrix");

  // claim-curve
  double cc_alpha = 1e-4, cc_beta = 0.01, cc_from = 0.01, cc_to = 1.0, cc_step = 0.01;
  std::string cc_out, cc_svg;
  auto* cc = app.add_subcommand("claim-curve", "Required probes vs watermark success rate (CSV)");
  cc->add_option("--alpha", cc_alpha)->capture_default_str();
  cc->add_option("--beta", cc_beta)->capture_default_str();
  cc->add_option("--from", cc_from)->capture_default_str();
  cc->add_option("--to", cc_to)->capture_default_str();
  cc->add_option("--step", cc_step)->capture_default_str();
  cc->add_option("-o,--out", cc_out, "CSV path (default stdout)");
  cc->add_option("--svg", cc_svg, "SVG path");

  // serve
  ConfigFlags sv_flags;
  std::string sv_model, sv_wm, sv_ref, sv_host = "127.0.0.1", sv_audit;
  int sv_port = 8080;
  auto* sv = app.add_subcommand("serve", "HTTP gateway around a protected model");
  sv_flags.attach(sv);
  sv->add_option("--model", sv_model, "victim checkpoint")->required();
  sv->add_option("--watermarks", sv_wm, "watermark file")->required();
  sv->add_option("--reference", sv_ref, "dataset holding target-class reference samples")->required();
  sv->add_option("--host", sv_host)->capture_default_str();
  sv->add_option("--port", sv_port)->capture_default_str();
  sv->add_option("--audit", sv_audit, "append audit records to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (gen->parsed()) {
      const auto c = gen_flags.resolve();
      const auto task = hn::make_task(c);
      const fs::path dir = out_dir(c, gen_out, "data");
      write_to(dir / "train.nhtd", [&](std::ostream& os) { write_dataset(os, task.train); });
      write_to(dir / "test.nhtd", [&](std::ostream& os) { write_dataset(os, task.test); });
      write_to(dir / "pool.nhtd", [&](std::ostream& os) { write_dataset(os, task.pool); });
      std::cout << "wrote " << task.train.size() << " train, " << task.test.size() << " test, " << task.pool.size()
                << " pool samples to " << dir.string() << '\n';
    } else if (tv->parsed()) {
      const auto c = tv_flags.resolve();
      auto task = hn::make_task(c);
      if (!tv_data.empty()) task.train = load_dataset(tv_data);
      if (!tv_test.empty()) task.test = load_dataset(tv_test);
      const Mlp victim = hn::train_victim(c, task.train);
      const fs::path out = tv_out.empty() ? hn::output_root(c) / "victim.nhtm" : fs::path(tv_out);
      write_to(out, [&](std::ostream& os) { write_model(os, victim); });
      std::cout << "victim test accuracy " << accuracy(victim, task.test.inputs, task.test.labels) << " -> " << out.string()
                << '\n';
    } else if (pr->parsed()) {
      const auto c = pr_flags.resolve();
      auto model = std::make_shared<const Mlp>(load_model(pr_model));
      const auto wm = load_watermarks(pr_wm);
      const auto ref = load_dataset(pr_ref);
      const auto inputs = load_dataset(pr_inputs);
      ProtectedModel pm(model, wm, ref, c.protection, hn::stage_seed(hn::config_digest(c), "protect"));
      std::ofstream file;
      if (!pr_out.empty()) file.open(pr_out);
      std::ostream& os = pr_out.empty() ? std::cout : file;
      os << "index,label,similarity,flipped";
      for (std::size_t k = 0; k < model->output_width(); ++k) os << ",out_" << k;
      os << '\n';
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto out = pm.protect(inputs.inputs.row(i));
        os << i << ',' << out.label << ',' << out.similarity << ',' << (out.flipped ? 1 : 0);
        for (double v : out.exposed()) os << ',' << v;
        os << '\n';
      }
    } else if (at->parsed()) {
      const auto c = at_flags.resolve();
      const auto task = hn::make_task(c);
      auto victim = std::make_shared<const Mlp>(load_model(at_model));
      const auto wm = at_wm.empty() ? hn::make_watermarks(c, task.train) : load_watermarks(at_wm);
      const std::string scenario = hn::config_digest(c);
      auto def = hn::build_defense(c, victim, wm, task, scenario);
      const auto trace = hn::perform_attack(c, task, *def.endpoint, scenario);
      const fs::path out = at_out.empty() ? hn::output_root(c) / "trace.nhta" : fs::path(at_out);
      write_to(out, [&](std::ostream& os) { attacks::write_trace(os, trace); });
      std::cout << trace.kind << ": " << trace.size() << " queries (" << def.endpoint->calls() << " calls) -> "
                << out.string() << '\n';
    } else if (ex->parsed()) {
      const auto c = ex_flags.resolve();
      const auto task = hn::make_task(c);
      const auto trace = read_from<attacks::AttackTrace>(ex_trace, [](std::istream& is) { return attacks::read_trace(is); });
      const Mlp victim = load_model(ex_victim);
      const std::string scenario = hn::config_digest(c);
      attacks::SurrogateConfig sc{c.surrogate_hidden, c.surrogate_train, hn::stage_seed(scenario, "extract/init")};
      sc.train.seed = hn::stage_seed(scenario, "extract/train");
      attacks::ExtractResult res = c.attack == "s4l"
                                       ? attacks::evaluate_surrogate(attacks::s4l_train(trace, {c.s4l_weight, sc}).model, victim, task.test)
                                       : attacks::extract(trace, sc, victim, task.test);
      const fs::path out = ex_out.empty() ? hn::output_root(c) / "surrogate.nhtm" : fs::path(ex_out);
      write_to(out, [&](std::ostream& os) { write_model(os, res.surrogate); });
      std::cout << "{\"extracted_accuracy\": " << res.extracted_accuracy << ", \"fidelity\": " << res.fidelity << "}\n";
    } else if (ve->parsed()) {
      const auto c = ve_flags.resolve();
      const auto task = hn::make_task(c);
      const Mlp sus = load_model(ve_sus);
      const Mlp ref = load_model(ve_ref);
      const auto wm = load_watermarks(ve_wm);
      const Tensor probes = hn::make_probes(c, wm, task.test);
      const auto hits = verify::count_wsr(sus, ref, probes, wm.target);
      const double p0 = ve_baseline >= 0.0 ? ve_baseline : c.baseline_floor;
      const auto claim = verify::ownership_claim(hits.successes, hits.probes, p0, c.alpha);
      std::cout << claim.to_json() << '\n';
      std::cerr << claim.summary() << '\n';
    } else if (ch->parsed()) {
      std::cout << channel::make_report(ch_in).to_text();
    } else if (run->parsed()) {
      const auto c = run_flags.resolve();
      const auto rec = hn::run_scenario(c);
      std::cout << rec.to_json(true).dump(2) << '\n';
      if (!rec.ok()) {
        std::cerr << "stage failure: " << rec.error << '\n';
        return kStageError;
      }
    } else if (mx->parsed()) {
      const auto c = mx_flags.resolve();
      hn::ScenarioCache cache;
      hn::RunOptions opt{true, &cache};
      const auto configs = mx_single ? std::vector<hn::ExperimentConfig>{c} : hn::default_matrix(c, c.dawn_attacker_fraction);
      const auto res = hn::run_matrix(configs, c.workers, opt);
      hn::ReportOptions ro{c.alpha, c.beta, mx_svg, {}};
      for (const auto& s : mx_sweeps) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw hn::ConfigError("--sweep expects key=v1,v2,...");
        std::vector<std::string> values;
        std::stringstream ss(s.substr(eq + 1));
        for (std::string v; std::getline(ss, v, ',');) values.push_back(v);
        ro.sweeps.push_back(hn::run_sweep(c, s.substr(0, eq), values, c.workers, opt));
      }
      const fs::path dir = out_dir(c, mx_out, "reports");
      hn::emit_reports(res.records, dir, ro);
      hn::write_wsr_table_csv(std::cout, res.records);
      std::cout << '\n';
      hn::write_matrix_csv(std::cout, res.summary);
      std::cout << "reports in " << dir.string() << '\n';
      for (const auto& r : res.records)
        if (!r.ok()) return kStageError;
    } else if (cc->parsed()) {
      if (!(cc_step > 0.0) || cc_from > cc_to) throw hn::ConfigError("claim-curve: need step > 0 and from <= to");
      std::vector<double> grid;
      for (double w = cc_from; w <= cc_to + 1e-12; w += cc_step) grid.push_back(std::min(w, 1.0));
      std::vector<std::pair<double, std::size_t>> curve;
      try {
        curve = verify::claim_curve(cc_alpha, cc_beta, grid);
      } catch (const std::invalid_argument& e) {
        throw hn::ConfigError(e.what());
      }
      if (cc_out.empty()) {
        verify::write_claim_curve_csv(std::cout, curve);
      } else {
        write_to(cc_out, [&](std::ostream& os) { verify::write_claim_curve_csv(os, curve); });
      }
      if (!cc_svg.empty()) {
        std::vector<double> n;
        for (const auto& [w, q] : curve) n.push_back(static_cast<double>(q));
        write_to(cc_svg, [&](std::ostream& os) { os << hn::svg_line_chart("Queries needed for a claim", "WSR", grid, {{"N", n}}, true); });
      }
    } else if (sv->parsed()) {
      const auto c = sv_flags.resolve();
      auto model = std::make_shared<const Mlp>(load_model(sv_model));
      const auto wm = load_watermarks(sv_wm);
      const auto ref = load_dataset(sv_ref);
      ProtectionParams params = c.protection;
      if (sv_flags.values.at("defense.mode").empty()) params.mode = LabelMode::hard;  // service default
      auto pm = std::make_shared<ProtectedModel>(model, wm, ref, params, hn::stage_seed(hn::config_digest(c), "protect"));
      const std::string token = gateway::admin_token_from_env();
      if (token.empty()) std::cerr << "warning: NHT_ADMIN_TOKEN is unset; admin routes will refuse every request\n";
      gateway::Gateway gw(pm, {token, c.master_seed, sv_audit, 4096});
      g_gateway = &gw;
      std::signal(SIGINT, [](int) {
        if (g_gateway) g_gateway->stop();
      });
      std::signal(SIGTERM, [](int) {
        if (g_gateway) g_gateway->stop();
      });
      std::cerr << "serving on " << sv_host << ':' << sv_port << " (" << to_string(params.mode) << " labels)\n";
      gw.run(sv_host, sv_port);
      g_gateway = nullptr;
    }
  } catch (const hn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "stage failure: " << e.what() << '\n';
    return kStageError;
  }
  return kOk;
}
