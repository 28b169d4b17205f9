// Command-line surface: dataset forging, standalone card generation,
// training, evaluation, and single-sample grounding output.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
// failure. RAMDG_SEED overrides the seed found in config files.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ramdg/data_forge.hpp"
#include "ramdg/trainer.hpp"

namespace {

using namespace ramdg;
using namespace ramdg::forge;

uint64_t env_seed_or(uint64_t fallback) {
  const char* s = std::getenv("RAMDG_SEED");
  if (!s || !*s) return fallback;
  try {
    size_t used = 0;
    uint64_t v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("RAMDG_SEED must be an unsigned integer");
  }
}

nlohmann::json load_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

int run_forge(const std::string& config, const std::string& out) {
  ForgeConfig cfg = ForgeConfig::from_json(load_json(config));
  cfg.seed = env_seed_or(cfg.seed);
  cfg.validate();
  Forge(cfg).run(out);
  std::cout << "forged dataset at " << out << "\n";
  return 0;
}

int run_capgen(size_t n, uint64_t seed, const std::string& out) {
  ForgeConfig cfg;
  cfg.n_identities = n;
  cfg.seed = env_seed_or(seed);
  cfg.validate();
  Forge forge(cfg);

  namespace fs = std::filesystem;
  fs::path dir = fs::path(out).parent_path();
  if (dir.empty()) dir = ".";
  fs::create_directories(dir / "cap_images");
  forge.make_cap().save(out);
  for (const auto& ident : forge.identities())
    for (int k = 0; k < 3; ++k)
      write_ppm((dir / forge.card_for(ident).image_refs[size_t(k)]).string(),
                forge.render_cap_image(ident, k));
  std::cout << "wrote " << forge.identities().size() << " cards to " << out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, data, cap;
  bool no_cncl = false, no_fvrm = false, no_retrieval = false, paper_lrs = false;
  std::string drop;
};

template <class T>
int train_typed(ModelConfig mc, const TrainConfig& tc, const TrainArgs& a,
                const std::string& out) {
  Dataset train_set(a.data, "train");
  mc.enc.vocab_size = train_set.vocab().size();
  mc.validate();

  Trainer<T> tr(mc, tc);
  tr.data_dir = a.data;
  KnowledgeBank kb;
  if (tc.flags.retrieval) {
    if (a.cap.empty()) throw ConfigError("train: --cap is required unless --no-retrieval");
    kb = KnowledgeBank(a.cap);
    tr.cap_path = a.cap;
  }
  tr.train(train_set, kb, [](size_t epoch, const StepLog& l) {
    std::printf(
        "epoch %zu  total %.6f  cncl %.6f  bin %.6f  type %.6f  patch %.6f  bbox %.6f  tok %.6f\n",
        epoch, l.total, l.contrastive, l.binary, l.type, l.patch, l.bbox, l.token);
    std::fflush(stdout);
  });
  tr.save(out);
  std::cout << "saved checkpoint " << out << "\n";
  return 0;
}

int run_train(const TrainArgs& a) {
  nlohmann::json j = load_json(a.config);
  TrainConfig tc = TrainConfig::from_json(j);
  tc.seed = env_seed_or(tc.seed);
  if (a.paper_lrs) tc.apply_paper_lrs();
  if (a.no_cncl) tc.flags.cncl = false;
  if (a.no_fvrm) tc.flags.refiner = false;
  if (a.no_retrieval) tc.flags.retrieval = false;
  if (!a.drop.empty()) tc.flags.drop = KnowledgeDrop::parse(a.drop);
  tc.validate();

  ModelConfig mc;
  if (j.contains("model")) mc = ModelConfig::from_json(j.at("model"));
  std::string out = j.value("out", std::string("ramdg.ckpt"));

  if (tc.precision == "f64") return train_typed<double>(mc, tc, a, out);
  return train_typed<float>(mc, tc, a, out);
}

template <class T>
int eval_typed(const std::string& ckpt, const std::string& split, bool no_retrieval) {
  Trainer<T> tr = Trainer<T>::load(ckpt);
  AblationFlags flags = tr.config().flags;
  if (no_retrieval) flags.retrieval = false;
  if (tr.data_dir.empty()) throw ConfigError("eval: checkpoint carries no dataset path");
  Dataset data(tr.data_dir, split);
  KnowledgeBank kb;
  if (flags.retrieval) {
    if (tr.cap_path.empty())
      throw ConfigError("eval: checkpoint carries no card file; pass --no-retrieval");
    kb = KnowledgeBank(tr.cap_path);
  }
  EvalOutput out = evaluate(tr.model(), data, kb, flags);
  std::cout << out.report.table();
  std::cout << out.report.to_json().dump() << "\n";
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& split, bool no_retrieval) {
  std::string prec = read_ckpt_header(ckpt).at("precision").get<std::string>();
  if (prec == "f64") return eval_typed<double>(ckpt, split, no_retrieval);
  return eval_typed<float>(ckpt, split, no_retrieval);
}

template <class T>
int ground_typed(const std::string& ckpt, const std::string& id, const std::string& out) {
  Trainer<T> tr = Trainer<T>::load(ckpt);
  if (tr.data_dir.empty()) throw ConfigError("ground: checkpoint carries no dataset path");

  namespace fs = std::filesystem;
  for (const char* split : {"test", "val", "train"}) {
    std::string manifest = (fs::path(tr.data_dir) / (std::string(split) + ".jsonl")).string();
    if (!fs::exists(manifest)) continue;
    for (const auto& rec : load_manifest(manifest)) {
      if (rec.id != id) continue;
      validate_record(rec);
      Image img = read_ppm((fs::path(tr.data_dir) / rec.image_rel).string());
      Vocab vocab = Vocab::load((fs::path(tr.data_dir) / "vocab.json").string());
      AblationFlags flags = tr.config().flags;
      KnowledgeBank kb;
      if (flags.retrieval && !tr.cap_path.empty()) kb = KnowledgeBank(tr.cap_path);
      GroundingResult g = ground_sample(tr.model(), rec, img, kb, vocab, flags);
      write_ground_files(out, g, img);
      std::cout << "wrote " << out << "/result.json, overlay.svg, tokens.txt\n";
      return 0;
    }
  }
  throw DataError("ground: sample not found: " + id);
}

int run_ground(const std::string& ckpt, const std::string& id, const std::string& out) {
  std::string prec = read_ckpt_header(ckpt).at("precision").get<std::string>();
  if (prec == "f64") return ground_typed<double>(ckpt, id, out);
  return ground_typed<float>(ckpt, id, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"retrieval-augmented manipulation detection and grounding"};
  app.require_subcommand(1);

  std::string forge_config, forge_out;
  CLI::App* forge = app.add_subcommand("forge", "generate a synthetic dataset");
  forge->add_option("--config", forge_config, "forge config JSON")->required();
  forge->add_option("--out", forge_out, "output directory")->required();

  size_t cap_n = 160;
  uint64_t cap_seed = 7;
  std::string cap_out;
  CLI::App* capgen = app.add_subcommand("capgen", "generate a standalone card file");
  capgen->add_option("--n", cap_n, "number of identities");
  capgen->add_option("--seed", cap_seed, "generator seed");
  capgen->add_option("--out", cap_out, "output card file")->required();

  TrainArgs ta;
  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", ta.config, "train config JSON")->required();
  train->add_option("--data", ta.data, "dataset directory")->required();
  train->add_option("--cap", ta.cap, "celebrity card file");
  train->add_flag("--no-cncl", ta.no_cncl, "disable the contrastive objective");
  train->add_flag("--no-fvrm", ta.no_fvrm, "disable patch refinement ahead of the box head");
  train->add_flag("--no-retrieval", ta.no_retrieval, "train without knowledge lookup");
  train->add_option("--drop-knowledge", ta.drop,
                    "comma list of card fields to withhold "
                    "(gender,birth_year,occupation,achievements,images)");
  train->add_flag("--paper-lrs", ta.paper_lrs, "use the published full-scale learning rates");

  std::string eval_ckpt, eval_split = "test";
  bool eval_no_retrieval = false;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--split", eval_split, "split name (train/val/test)");
  eval_cmd->add_flag("--no-retrieval", eval_no_retrieval, "evaluate without knowledge lookup");

  std::string ground_ckpt, ground_id, ground_out;
  CLI::App* ground = app.add_subcommand("ground", "render grounding output for one sample");
  ground->add_option("--ckpt", ground_ckpt, "checkpoint path")->required();
  ground->add_option("--id", ground_id, "sample id")->required();
  ground->add_option("--out", ground_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (forge->parsed()) return run_forge(forge_config, forge_out);
    if (capgen->parsed()) return run_capgen(cap_n, cap_seed, cap_out);
    if (train->parsed()) return run_train(ta);
    if (eval_cmd->parsed()) return run_eval(eval_ckpt, eval_split, eval_no_retrieval);
    if (ground->parsed()) return run_ground(ground_ckpt, ground_id, ground_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  }
  return 2;
}
