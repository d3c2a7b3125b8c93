// gmptl command line: one subcommand per pipeline step plus crossval / ablate drivers.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "gmptl/error.hpp"
#include "gmptl/pipeline.hpp"

namespace fs = std::filesystem;
using namespace gmptl;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string log_level = "info";
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path, "key=value config file");
  app->add_option("-s,--set", c.overrides, "override one key, e.g. --set gmp.scales=8,32,128");
  app->add_option("--log-level", c.log_level, "debug|info|warn|error")->capture_default_str();
}

PipelineConfig resolve(const Common& c) {
  if (c.log_level == "debug")
    set_log_level(LogLevel::Debug);
  else if (c.log_level == "info")
    set_log_level(LogLevel::Info);
  else if (c.log_level == "warn")
    set_log_level(LogLevel::Warn);
  else if (c.log_level == "error")
    set_log_level(LogLevel::Error);
  else
    fail(ErrorCode::ConfigInvalid, "unknown log level '" + c.log_level + "'");

  PipelineConfig cfg;
  if (!c.config_path.empty()) cfg = load_config(c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail(ErrorCode::ConfigInvalid, "--set expects key=value, got '" + kv + "'");
    apply_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

Corpus read_corpus(const std::string& manifest, const PipelineConfig& cfg) {
  ManifestStats stats;
  Corpus corpus = load_manifest(manifest, cfg.drop_unknown_labels, &stats);
  if (stats.dropped_unknown_label > 0)
    log_info("dropped " + std::to_string(stats.dropped_unknown_label) + " utterances with unmapped emotion labels");
  materialize(corpus);
  if (corpus.empty()) fail(ErrorCode::EmptyInput, "manifest " + manifest + " has no usable utterances");
  return corpus;
}

EncoderConfig encoder_for(const PipelineConfig& cfg, const Corpus& corpus) {
  EncoderConfig enc = cfg.encoder;
  enc.input_dim = load_features(corpus.front()).dim();
  enc.seed = derive_seed(cfg.train.seed, "encoder");
  return enc;
}

TrainHyperparams hyper(const PipelineConfig& cfg, int epochs, bool freeze, const char* tag) {
  TrainHyperparams hp = cfg.train;
  hp.epochs = epochs;
  hp.freeze_encoder = freeze;
  hp.seed = derive_seed(cfg.train.seed, tag);
  return hp;
}

std::string default_log(const std::string& ckpt) { return ckpt + ".log.csv"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gmptl: multi-task / GMP / AM-Softmax speech emotion recognition"};
  app.require_subcommand(1);

  Common common;
  std::string out, manifest, stage1_path, stage2_path, stage3_path, gmp_dir, log_path, axes = "use_gender,finetune_mode";
  int repeats = 1;
  bool print_config = false;

  auto* synth = app.add_subcommand("synth", "write a synthetic corpus (manifest + FTM1 features)");
  add_common(synth, common);
  synth->add_option("-o,--out", out, "output directory")->required();

  auto* s1 = app.add_subcommand("train-stage1", "multi-task emotion/gender fine-tuning");
  add_common(s1, common);
  s1->add_option("-m,--manifest", manifest)->required();
  s1->add_option("-o,--out", out, "stage-1 checkpoint path")->required();
  s1->add_option("--log", log_path, "CSV training log (default <out>.log.csv)");

  auto* xg = app.add_subcommand("extract-gmp", "cluster tapped stage-1 features into per-utterance GMP files");
  add_common(xg, common);
  xg->add_option("-m,--manifest", manifest)->required();
  xg->add_option("--stage1", stage1_path)->required();
  xg->add_option("-o,--out", out, "directory for <id>.gmp and codebooks.cbk")->required();

  auto* s2 = app.add_subcommand("train-stage2", "masked frame-level GMP prediction");
  add_common(s2, common);
  s2->add_option("-m,--manifest", manifest)->required();
  s2->add_option("--stage1", stage1_path)->required();
  s2->add_option("--gmp-dir", gmp_dir)->required();
  s2->add_option("-o,--out", out, "stage-2 checkpoint path")->required();
  s2->add_option("--log", log_path, "CSV training log (default <out>.log.csv)");

  auto* s3 = app.add_subcommand("train-stage3", "utterance-level AM-Softmax (or CE) fine-tuning");
  add_common(s3, common);
  s3->add_option("-m,--manifest", manifest)->required();
  s3->add_option("--stage2", stage2_path)->required();
  s3->add_option("-o,--out", out, "stage-3 checkpoint path")->required();
  s3->add_option("--log", log_path, "CSV training log (default <out>.log.csv)");

  auto* ev = app.add_subcommand("evaluate", "WAR/UAR of a stage-3 checkpoint on a manifest");
  add_common(ev, common);
  ev->add_option("-m,--manifest", manifest)->required();
  ev->add_option("--stage3", stage3_path)->required();
  ev->add_option("-o,--out", out, "report path (default: stdout only)");

  auto* cv = app.add_subcommand("crossval", "5-fold leave-one-session-out run of the full pipeline");
  add_common(cv, common);
  cv->add_flag("--print-config", print_config, "print the resolved config and exit");

  auto* ab = app.add_subcommand("ablate", "crossval over a grid of settings");
  add_common(ab, common);
  ab->add_option("--axes", axes, "comma list of use_gender, finetune_mode, tap=A:B")->capture_default_str();
  ab->add_option("--repeats", repeats, "seeds per cell")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    PipelineConfig cfg = resolve(common);

    if (synth->parsed()) {
      validate(cfg.synth);
      const Corpus corpus = generate_synthetic_corpus(cfg.synth);
      const fs::path dir = resolve_artifact_dir(out);
      write_manifest(dir / "manifest.tsv", corpus, dir / "features");
      std::cout << "wrote " << corpus.size() << " utterances to " << (dir / "manifest.tsv").string() << '\n';
    } else if (s1->parsed()) {
      validate(cfg);
      const Corpus corpus = read_corpus(manifest, cfg);
      Stage1Config s1cfg = cfg.stage1;
      if (!cfg.use_gender) s1cfg.loss.alpha_e = 1.0;
      const auto r = train_stage1(corpus, encoder_for(cfg, corpus), s1cfg,
                                  hyper(cfg, cfg.stage1_epochs, cfg.stage1_freeze_encoder, "stage1"));
      const fs::path path = resolve_artifact_dir(out);
      save_checkpoint(r.checkpoint, path);
      r.log.write(log_path.empty() ? default_log(path.string()) : log_path);
      std::cout << "stage1 " << checkpoint_hash(r.checkpoint) << ' ' << path.string() << '\n';
    } else if (xg->parsed()) {
      validate(cfg);
      const Corpus corpus = read_corpus(manifest, cfg);
      const Checkpoint stage1 = load_checkpoint(stage1_path);
      GMPConfig g = cfg.gmp;
      g.seed = derive_seed(cfg.train.seed, "gmp");
      const auto ex = extract_gmp(corpus, stage1, g);
      const fs::path dir = resolve_artifact_dir(out);
      write_gmp_dir(ex.labels, dir);
      write_codebooks(ex.codebooks, dir / "codebooks.cbk");
      const auto q = cluster_quality(ex.labels, corpus);
      for (std::size_t s = 0; s < q.nmi.size(); ++s)
        std::cout << "scale " << g.scales[s] << " purity=" << q.purity[s] << " nmi=" << q.nmi[s] << '\n';
    } else if (s2->parsed()) {
      validate(cfg);
      const Corpus corpus = read_corpus(manifest, cfg);
      const Checkpoint stage1 = load_checkpoint(stage1_path);
      const fs::path books_path = fs::path(gmp_dir) / "codebooks.cbk";
      if (fs::exists(books_path) && read_codebooks(books_path).stage1_hash != checkpoint_hash(stage1))
        fail(ErrorCode::ProvenanceMismatch, gmp_dir + " was extracted with a different stage-1 checkpoint");
      const auto r = train_stage2(corpus, fs::path(gmp_dir), stage1, cfg.stage2, hyper(cfg, cfg.stage2_epochs, false, "stage2"));
      const fs::path path = resolve_artifact_dir(out);
      save_checkpoint(r.checkpoint, path);
      r.log.write(log_path.empty() ? default_log(path.string()) : log_path);
      std::cout << "stage2 " << checkpoint_hash(r.checkpoint) << ' ' << path.string() << '\n';
    } else if (s3->parsed()) {
      validate(cfg);
      const Corpus corpus = read_corpus(manifest, cfg);
      const Checkpoint stage2 = load_checkpoint(stage2_path);
      const auto r = train_stage3(corpus, stage2, cfg.stage3, hyper(cfg, cfg.stage3_epochs, cfg.stage3_freeze_encoder, "stage3"));
      const fs::path path = resolve_artifact_dir(out);
      save_checkpoint(r.checkpoint, path);
      r.log.write(log_path.empty() ? default_log(path.string()) : log_path);
      std::cout << "stage3 " << checkpoint_hash(r.checkpoint) << ' ' << path.string() << '\n';
    } else if (ev->parsed()) {
      const Corpus corpus = read_corpus(manifest, cfg);
      const Checkpoint stage3 = load_checkpoint(stage3_path);
      const auto preds = predict_stage3(stage3, corpus);
      EvalReport report;
      FoldResult fr;
      fr.fold_id = 1;
      fr.test_session = "all";
      for (std::size_t i = 0; i < preds.size(); ++i) fr.cm.add(index_of(corpus[i].emotion), index_of(preds[i]));
      fr.metrics = compute_metrics(fr.cm);
      report.folds.push_back(fr);
      report.mean_uar = fr.metrics.uar;
      report.mean_war = fr.metrics.war;
      if (!out.empty()) report.write(resolve_artifact_dir(out));
      std::cout << report.to_text();
    } else if (cv->parsed()) {
      if (print_config) {
        std::cout << dump_config(cfg);
        return 0;
      }
      const auto res = run_pipeline(cfg);
      std::cout << res.report.to_text() << "artifacts: " << res.dir.string() << '\n';
    } else if (ab->parsed()) {
      const auto grid = parse_ablation_axes(axes, repeats);
      const auto table = run_ablation(grid, cfg);
      std::cout << table.to_text();
    }
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
