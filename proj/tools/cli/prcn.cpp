// prcn: train, evaluate and analyse PRC-NPTN models on MNIST.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "prcn/experiment.hpp"
#include "prcn/fetch.hpp"
#include "prcn/gradcheck.hpp"
#include "prcn/invariance.hpp"
#include "prcn/pool_kernel.hpp"

namespace {

using namespace prcn;

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// "60:8" -> rotation 60 deg, translation 8 px; "60" -> rotation only.
AugmentSpec parse_augment(const std::string& s) {
  AugmentSpec a;
  const auto colon = s.find(':');
  try {
    a.max_rotation_deg = std::stod(s.substr(0, colon));
    if (colon != std::string::npos) a.max_translation_px = std::stoi(s.substr(colon + 1));
  } catch (const std::logic_error&) {
    throw ConfigError("bad augment '" + s + "', expected THETA[:PX]");
  }
  a.validate();
  return a;
}

// "lo:hi:step"
ProbeSweep parse_sweep(const std::string& s, ProbeAxis axis) {
  double lo, hi, step;
  if (std::sscanf(s.c_str(), "%lf:%lf:%lf", &lo, &hi, &step) != 3 || step <= 0 || hi < lo)
    throw ConfigError("bad sweep '" + s + "', expected LO:HI:STEP");
  ProbeSweep sw = ProbeSweep::rotation(lo, hi, step);
  sw.axis = axis;
  return sw;
}

struct Checkpointed {
  Model model;
  nlohmann::json echo;
};

Checkpointed load_model(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  Sequential probe;
  detail::Reader r{bytes};
  if (r.str(8) != "PRCNCKPT") throw ParseError("checkpoint: bad magic", 0);
  r.u32();
  const auto echo = nlohmann::json::parse(r.str(r.u64()));
  if (!echo.contains("model")) throw ConfigError("checkpoint config echo lacks a model name");
  auto model = compile(presets::by_name(echo["model"].get<std::string>()), 0);
  decode_checkpoint(bytes, model.net);
  return {std::move(model), echo};
}

void print_epoch(const EpochMetrics& m) {
  std::printf("epoch %3zu  lr %.4g  loss %.5f  train_err %.4f  test_err %.4f  %.1fs\n", m.epoch, m.lr, m.train_loss,
              m.train_err, m.test_err, m.seconds);
  std::fflush(stdout);
}

struct Overrides {
  std::string config_path, data_root, out;
  std::vector<std::string> models, augments;
  std::vector<std::uint64_t> seeds;
  std::size_t epochs = 0, train_subset = 0, test_subset = 0, workers = 0;

  void add_to(CLI::App* app, bool grid) {
    app->add_option("--config", config_path, "JSON experiment config; flags override its fields");
    app->add_option("--data-root", data_root, "directory holding the MNIST IDX files (default $PRCN_DATA_ROOT or data/mnist)");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--train-subset", train_subset, "number of training images used");
    app->add_option("--test-subset", test_subset, "number of test images used");
    if (grid) {
      app->add_option("--model", models, "model preset (repeatable)")->take_all();
      app->add_option("--augment", augments, "THETA[:PX] condition (repeatable)")->take_all();
      app->add_option("--seed", seeds, "seed (repeatable)")->take_all();
      app->add_option("--workers", workers, "parallel training workers");
      app->add_option("--out", out, "output directory");
    }
  }

  ExperimentConfig apply() const {
    ExperimentConfig c = config_path.empty() ? ExperimentConfig{} : parse_config(slurp(config_path));
    if (!data_root.empty()) c.data = DataPaths::under(data_root);
    if (epochs) c.epochs = epochs;
    if (train_subset) c.train_subset = train_subset;
    if (test_subset) c.test_subset = test_subset;
    if (workers) c.workers = workers;
    if (!out.empty()) c.output_dir = out;
    if (!models.empty()) c.models = models;
    if (!augments.empty()) {
      c.augments.clear();
      for (const auto& a : augments) c.augments.push_back(parse_augment(a));
    }
    if (!seeds.empty()) c.seeds = seeds;
    c.validate();
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  prcn::retain_freed_memory();
  CLI::App app{"PRC-NPTN micro-engine: training, evaluation and invariance analysis on MNIST"};
  app.require_subcommand(1);
  int exit_code = 0;

  // fetch
  auto* fetch = app.add_subcommand("fetch", "download MNIST with checksum verification");
  std::string fetch_out = default_data_root();
  std::vector<std::string> mirrors;
  fetch->add_option("--out", fetch_out, "destination directory");
  fetch->add_option("--mirror", mirrors, "base URL to try, in order (repeatable)")->take_all();
  fetch->callback([&] {
    const auto r = fetch_files(fetch_out, mirrors.empty() ? mnist_mirrors() : mirrors, mnist_remote_files(), &std::cout);
    std::cout << r.downloaded.size() << " downloaded, " << r.already_present.size() << " already present in " << fetch_out << "\n";
  });

  // train
  auto* train_cmd = app.add_subcommand("train", "train one model");
  Overrides tr;
  tr.add_to(train_cmd, false);
  std::string tr_model = "prcn(12,3)", tr_augment = "0", tr_metrics, tr_ckpt;
  std::uint64_t tr_seed = 0;
  train_cmd->add_option("--model", tr_model, "model preset")->capture_default_str();
  train_cmd->add_option("--augment", tr_augment, "THETA[:PX]")->capture_default_str();
  train_cmd->add_option("--seed", tr_seed, "run seed")->capture_default_str();
  train_cmd->add_option("--metrics", tr_metrics, "per-epoch metrics CSV");
  train_cmd->add_option("--checkpoint", tr_ckpt, "checkpoint written after training");
  train_cmd->callback([&] {
    const auto c = tr.apply();
    const auto data = load_data(c);
    auto model = compile(presets::by_name(tr_model), substream(tr_seed, "init"));
    TrainConfig tc;
    tc.optim = c.optim();
    tc.augment = parse_augment(tr_augment);
    tc.test_seed = c.test_seed;
    tc.metrics_csv = tr_metrics;
    tc.checkpoint_path = tr_ckpt;
    tc.checkpoint_every = tr_ckpt.empty() ? 0 : c.epochs;
    tc.config_json = nlohmann::json{{"model", tr_model}, {"theta_deg", tc.augment.max_rotation_deg},
                                    {"trans_px", tc.augment.max_translation_px}, {"seed", tr_seed}, {"epochs", c.epochs}}
                         .dump();
    tc.on_epoch = print_epoch;
    std::cout << tr_model << ": " << model.net.param_count() << " parameters\n";
    const auto run = train(model.net, data.train, &data.test, tc, tr_seed);
    std::printf("final test_err %.6f train_err %.6f (%.1fs)\n", run.final_test_err, run.final_train_err, run.wall_seconds);
  });

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the (augmented) test set");
  Overrides ev;
  ev.add_to(eval_cmd, false);
  std::string ev_ckpt, ev_augment;
  eval_cmd->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--augment", ev_augment, "THETA[:PX] (default: the training condition)");
  eval_cmd->callback([&] {
    const auto c = ev.apply();
    auto [model, echo] = load_model(ev_ckpt);
    AugmentSpec aug{echo.value("theta_deg", 0.0), echo.value("trans_px", 0)};
    if (!ev_augment.empty()) aug = parse_augment(ev_augment);
    const auto test = load_idx(c.data.test_images, c.data.test_labels).head(c.test_subset);
    const double err = evaluate(model.net, aug.identity() ? test : augment_dataset(test, aug, c.test_seed));
    std::printf("%s test_err %.6f (rotation %g, translation %d, %zu images)\n", echo["model"].get<std::string>().c_str(), err,
                aug.max_rotation_deg, aug.max_translation_px, test.size());
  });

  // grid
  auto* grid = app.add_subcommand("grid", "run a resumable (model x augment x seed) grid");
  Overrides gr;
  gr.add_to(grid, true);
  grid->callback([&] {
    const auto c = gr.apply();
    const auto table = run_grid(c, &std::cout);
    if (!table.rows.empty()) report(table, (std::filesystem::path(c.output_dir) / "report").string());
    for (const auto& a : table.aggregate())
      std::printf("%-20s rot %5.1f trans %2d  n=%zu  test_err %.4f +- %.4f\n", a.model.c_str(), a.theta_deg, a.trans_px, a.count,
                  a.mean, a.std);
    if (table.errored()) {
      std::cerr << table.errored() << " grid row(s) errored\n";
      exit_code = 1;
    }
  });

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check of a preset on random input");
  std::string gc_model = "prcn(12,3)";
  std::uint64_t gc_seed = 0;
  std::size_t gc_batch = 4, gc_coords = 32;
  gc->add_option("--model", gc_model, "model preset")->capture_default_str();
  gc->add_option("--seed", gc_seed, "seed")->capture_default_str();
  gc->add_option("--batch", gc_batch, "batch size")->capture_default_str();
  gc->add_option("--coords", gc_coords, "coordinates checked per tensor")->capture_default_str();
  gc->callback([&] {
    auto spec = presets::by_name(gc_model);
    auto model = compile(spec, gc_seed);
    Rng rng(substream(gc_seed, "gradcheck"));
    Tensor x(gc_batch, spec.in_channels, spec.in_h, spec.in_w);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform();
    std::vector<int> labels(gc_batch);
    for (auto& l : labels) l = static_cast<int>(rng.below(spec.classes));
    const auto rep = gradcheck_model(model.net, x, labels, rng, gc_coords);
    for (const auto& e : rep.entries) std::printf("%-28s %4zu coords  rel_err %.3e\n", e.name.c_str(), e.checked, e.rel_err);
    std::printf("max rel_err %.3e (%s)\n", rep.max_rel_err(), rep.max_rel_err() < 1e-6 ? "pass" : "FAIL");
    if (rep.max_rel_err() >= 1e-6) exit_code = 1;
  });

  // lemma
  auto* lemma = app.add_subcommand("lemma", "order statistics of pooled uniforms and unitary-ensemble pooling");
  std::size_t lm_nmax = 16, lm_samples = 100000, lm_dim = 8, lm_pool = 6, lm_trials = 100000;
  std::uint64_t lm_seed = 0;
  std::string lm_out;
  lemma->add_option("--n-max", lm_nmax, "largest pool size")->capture_default_str();
  lemma->add_option("--samples", lm_samples, "Monte Carlo samples per n")->capture_default_str();
  lemma->add_option("--dim", lm_dim, "ensemble dimension")->capture_default_str();
  lemma->add_option("--pool", lm_pool, "ensemble pool size")->capture_default_str();
  lemma->add_option("--trials", lm_trials, "ensemble trials")->capture_default_str();
  lemma->add_option("--seed", lm_seed, "seed")->capture_default_str();
  lemma->add_option("--out", lm_out, "CSV path (default stdout)");
  lemma->callback([&] {
    if (lm_out.empty()) {
      write_lemma_csv(std::cout, lm_nmax, lm_samples, lm_seed);
    } else {
      std::ofstream f(lm_out);
      write_lemma_csv(f, lm_nmax, lm_samples, lm_seed);
    }
    Rng rng(substream(lm_seed, "ensemble"));
    std::vector<double> x(lm_dim), w(lm_dim);
    for (auto& v : x) v = rng.normal();
    for (auto& v : w) v = rng.normal();
    const auto r = mc_invariance(x, w, UnitaryEnsemble(lm_dim, EnsembleFamily::Orthogonal), lm_pool, lm_trials, rng);
    std::fprintf(stderr, "orthogonal ensemble d=%zu pool=%zu: var pooled %.6g +- %.2g, unpooled %.6g +- %.2g, max identity err %.2e\n",
                 lm_dim, lm_pool, r.pooled.estimate, r.pooled.stderr_, r.unpooled.estimate, r.unpooled.stderr_,
                 r.max_identity_error);
  });

  // bench-pool
  auto* bp = app.add_subcommand("bench-pool", "benchmark indirect vs naive channel max pooling");
  std::vector<std::string> bp_configs;
  std::size_t bp_reps = 20;
  bool bp_float = false;
  std::string bp_out;
  bp->add_option("--config", bp_configs, "E,CMP,N,H,W (repeatable; default 288,2,16,32,32)")->take_all();
  bp->add_option("--reps", bp_reps, "repetitions per path (>= 10)")->capture_default_str();
  bp->add_flag("--float", bp_float, "32-bit floats instead of 64-bit");
  bp->add_option("--out", bp_out, "CSV path (default stdout)");
  bp->callback([&] {
    if (bp_configs.empty()) bp_configs = {"288,2,16,32,32", "48,3,16,16,16", "128,4,8,28,28"};
    std::ostringstream csv;
    csv << "config,path,median_ns,peak_transient_bytes,speedup\n";
    for (const auto& cs : bp_configs) {
      std::size_t E, cmp, n, h, w;
      if (std::sscanf(cs.c_str(), "%zu,%zu,%zu,%zu,%zu", &E, &cmp, &n, &h, &w) != 5)
        throw ConfigError("bad bench config '" + cs + "', expected E,CMP,N,H,W");
      const auto conn = Connectome::build(std::uint64_t{1}, E, cmp, true);
      const auto plan = PoolPlan::from(conn);
      Rng rng(7);
      const auto rep = bp_float ? bench<float>(plan, Shape{n, E, h, w}, bp_reps, rng) : bench<double>(plan, Shape{n, E, h, w}, bp_reps, rng);
      const std::string cfg = "\"E=" + std::to_string(E) + " cmp=" + std::to_string(cmp) + " n=" + std::to_string(n) + " " +
                              std::to_string(h) + "x" + std::to_string(w) + (bp_float ? " f32" : " f64") + "\"";
      for (const auto* p : {&rep.naive, &rep.indirect, &rep.naive_backward, &rep.indirect_backward}) {
        const bool fwd = p == &rep.naive || p == &rep.indirect;
        csv << cfg << ',' << p->path << ',' << static_cast<long long>(p->median_ns) << ',' << p->peak_transient_bytes << ','
            << (fwd ? rep.speedup : rep.backward_speedup) << '\n';
      }
      std::fprintf(stderr, "%s: forward speedup %.2fx, indirect peak %zu B (output %zu + argmax %zu), naive peak %zu B\n",
                   cfg.c_str(), rep.speedup, rep.indirect.peak_transient_bytes, rep.output_bytes, rep.argmax_bytes,
                   rep.naive.peak_transient_bytes);
    }
    if (bp_out.empty()) std::cout << csv.str();
    else std::ofstream(bp_out) << csv.str();
  });

  // probe-invariance
  auto* pi = app.add_subcommand("probe-invariance", "pre/post channel-pooling activation variance over a transformation sweep");
  Overrides pv;
  pv.add_to(pi, false);
  std::string pi_ckpt, pi_sweep = "-90:90:15", pi_axis = "rotation", pi_out;
  std::size_t pi_inputs = 64;
  pi->add_option("--checkpoint", pi_ckpt, "trained checkpoint")->required();
  pi->add_option("--sweep", pi_sweep, "LO:HI:STEP")->capture_default_str();
  pi->add_option("--axis", pi_axis, "rotation | tx | ty")->capture_default_str();
  pi->add_option("--inputs", pi_inputs, "number of test images probed")->capture_default_str();
  pi->add_option("--out", pi_out, "CSV path (default stdout)");
  pi->callback([&] {
    const auto c = pv.apply();
    const ProbeAxis axis = pi_axis == "rotation" ? ProbeAxis::Rotation
                           : pi_axis == "tx"     ? ProbeAxis::TranslationX
                           : pi_axis == "ty"     ? ProbeAxis::TranslationY
                                                 : throw ConfigError("unknown axis '" + pi_axis + "'");
    auto [model, echo] = load_model(pi_ckpt);
    const auto inputs = load_idx(c.data.test_images, c.data.test_labels).head(pi_inputs);
    const auto probes = layer_invariance_probe(model.net, parse_sweep(pi_sweep, axis), inputs.images);
    std::ostringstream csv;
    write_probe_csv(csv, probes);
    if (pi_out.empty()) std::cout << csv.str();
    else std::ofstream(pi_out) << csv.str();
    for (const auto& p : probes)
      std::fprintf(stderr, "layer %zu: mean pre-CMP variance %.6g, mean post-CMP variance %.6g\n", p.layer_index, p.mean_pre,
                   p.mean_post);
  });

  // report
  auto* rp = app.add_subcommand("report", "aggregate a results CSV into a summary CSV and SVG plot");
  std::string rp_in, rp_out = "report";
  rp->add_option("--results", rp_in, "results.csv from grid")->required();
  rp->add_option("--out", rp_out, "output prefix (writes PREFIX.csv and PREFIX.svg)")->capture_default_str();
  rp->callback([&] {
    const auto t = ResultsTable::load(rp_in);
    report(t, rp_out);
    std::cout << "wrote " << rp_out << ".csv and " << rp_out << ".svg from " << t.rows.size() << " rows\n";
    if (t.errored()) exit_code = 1;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const prcn::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return exit_code;
}
