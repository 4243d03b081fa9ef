#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "m3dm/decision.hpp"
#include "m3dm/error.hpp"
#include "m3dm/fusion.hpp"
#include "m3dm/memory.hpp"
#include "m3dm/metrics.hpp"
#include "m3dm/pipeline.hpp"
#include "m3dm/synthetic.hpp"
#include "m3dm/tensor_io.hpp"

namespace m3dm::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using pipeline::Bank;
using pipeline::BankSet;
using pipeline::PipelineConfig;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::string> dataset, work, banks, grid, groups;
  std::optional<double> coreset_ratio;
  std::optional<int> threads;
  std::map<std::string, std::uint64_t> seeds;
};

std::pair<int, int> parse_pair(const std::string& text, const char* what) {
  const auto x = text.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(text);
    std::size_t used = 0;
    const int a = std::stoi(text.substr(0, x), &used);
    if (used != x) throw std::invalid_argument(text);
    const std::string rest = text.substr(x + 1);
    const int b = std::stoi(rest, &used);
    if (used != rest.size()) throw std::invalid_argument(text);
    return {a, b};
  } catch (const std::exception&) {
    throw Error(ErrorKind::ConfigError, std::string(what) + " must look like AxB, got '" + text + "'");
  }
}

json read_json(const fs::path& path, ErrorKind kind) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw Error(kind, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

PipelineConfig resolve(const Overrides& o) {
  PipelineConfig cfg;
  if (!o.config.empty()) cfg.apply_json(read_json(o.config, ErrorKind::ConfigError));
  if (o.dataset) cfg.dataset_dir = *o.dataset;
  if (o.work) cfg.work_dir = *o.work;
  if (o.banks) cfg.banks = BankSet::parse(*o.banks);
  if (o.grid) std::tie(cfg.grid_h, cfg.grid_w) = parse_pair(*o.grid, "--grid");
  if (o.groups) std::tie(cfg.groups, cfg.group_size) = parse_pair(*o.groups, "--groups");
  if (o.coreset_ratio) cfg.coreset_ratio = *o.coreset_ratio;
  if (o.threads) cfg.threads = *o.threads;
  for (const auto& [name, value] : o.seeds) {
    if (name == "ransac") cfg.seeds.ransac = value;
    if (name == "fps") cfg.seeds.fps = value;
    if (name == "feature") cfg.seeds.feature = value;
    if (name == "uff") cfg.seeds.uff = value;
    if (name == "bank") cfg.seeds.bank = value;
    if (name == "dlf") cfg.seeds.dlf = value;
    if (name == "synth") cfg.seeds.synth = value;
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Work directory layout

fs::path features_dir(const PipelineConfig& cfg) { return cfg.work_dir / "features"; }
fs::path uff_dir(const PipelineConfig& cfg) { return cfg.work_dir / "uff"; }
fs::path bank_dir(const PipelineConfig& cfg, Bank b) { return cfg.work_dir / "banks" / pipeline::to_string(b); }
fs::path dlf_dir(const PipelineConfig& cfg) { return cfg.work_dir / "dlf"; }
fs::path scores_dir(const PipelineConfig& cfg) { return cfg.work_dir / "scores"; }
fs::path eval_dir(const PipelineConfig& cfg) { return cfg.work_dir / "eval"; }
fs::path ablation_dir(const PipelineConfig& cfg) { return cfg.work_dir / "ablation"; }

struct IndexEntry {
  std::string id;
  synthetic::Split split;
  int label = 0;
  std::string kind;
};

// Scene list of the extracted features; carries no ground truth beyond labels.
std::vector<IndexEntry> read_index(const PipelineConfig& cfg) {
  const fs::path path = features_dir(cfg) / "index.json";
  require(fs::exists(path), ErrorKind::DataError, "no extracted features in " + features_dir(cfg).string() +
                                                      " (run 'extract' first)");
  const json j = read_json(path, ErrorKind::FormatError);
  std::vector<IndexEntry> out;
  try {
    for (const auto& e : j.at("scenes")) {
      out.push_back({e.at("id").get<std::string>(),
                     e.at("split").get<std::string>() == "train" ? synthetic::Split::Train : synthetic::Split::Test,
                     e.at("label").get<int>(), e.at("kind").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::FormatError, path.string() + ": " + e.what());
  }
  return out;
}

std::vector<IndexEntry> select(const std::vector<IndexEntry>& all, synthetic::Split split) {
  std::vector<IndexEntry> out;
  std::copy_if(all.begin(), all.end(), std::back_inserter(out), [&](const auto& e) { return e.split == split; });
  return out;
}

fs::path feature_stem(const PipelineConfig& cfg, const IndexEntry& e, const char* modality) {
  const char* split = e.split == synthetic::Split::Train ? "train" : "test";
  return features_dir(cfg) / split / (e.id + "_" + modality);
}

std::vector<pipeline::ExtractedScene> load_features(const PipelineConfig& cfg,
                                                    const std::vector<IndexEntry>& entries) {
  std::vector<pipeline::ExtractedScene> out(entries.size());
  pipeline::parallel_for(entries.size(), cfg.threads, [&](std::size_t i) {
    out[i].rgb = load_patch_grid(feature_stem(cfg, entries[i], "rgb"));
    out[i].pt = load_patch_grid(feature_stem(cfg, entries[i], "pt"));
  });
  return out;
}

pipeline::Banks load_banks(const PipelineConfig& cfg, BankSet which) {
  pipeline::Banks banks;
  if (which.has(Bank::Fs)) {
    require(fs::exists(uff_dir(cfg) / "manifest.json"), ErrorKind::DataError,
            "fused bank requested but no fusion network in " + uff_dir(cfg).string());
    banks.uff = fusion::load_fusion(uff_dir(cfg));
  }
  for (Bank b : which.list()) {
    require(fs::exists(bank_dir(cfg, b) / "manifest.json"), ErrorKind::DataError,
            std::string("memory bank '") + pipeline::to_string(b) + "' has not been built");
    banks.banks[static_cast<int>(b)] = memory::load_bank(bank_dir(cfg, b));
  }
  return banks;
}

std::vector<pipeline::BankScores> score_all(const pipeline::Banks& banks,
                                            const std::vector<pipeline::ExtractedScene>& scenes,
                                            const PipelineConfig& cfg, BankSet which) {
  std::vector<pipeline::BankScores> out(scenes.size());
  pipeline::parallel_for(scenes.size(), cfg.threads,
                         [&](std::size_t i) { out[i] = pipeline::score_scene(banks, scenes[i], cfg, which); });
  return out;
}

int image_size_of(const PipelineConfig& cfg) { return cfg.target_size; }

// ---------------------------------------------------------------------------
// Subcommands

void cmd_synth(const PipelineConfig& cfg) {
  auto spec = cfg.synth;
  spec.seed = cfg.seeds.synth;
  const auto samples = synthetic::generate_synthetic(spec);
  synthetic::write_dataset(cfg.dataset_dir, spec, samples);
  std::cout << "wrote " << samples.size() << " scenes to " << cfg.dataset_dir.string() << "\n";
}

void cmd_extract(const PipelineConfig& cfg) {
  const auto manifest = synthetic::read_manifest(cfg.dataset_dir);
  require(!manifest.entries.empty(), ErrorKind::EmptyData, "dataset has no scenes");
  pipeline::parallel_for(manifest.entries.size(), cfg.threads, [&](std::size_t i) {
    const auto& entry = manifest.entries[i];
    const auto scene = synthetic::load_scene(cfg.dataset_dir, entry);
    const auto extracted = pipeline::extract_scene(scene, cfg);
    const IndexEntry e{entry.id, entry.split, entry.label, ""};
    save_patch_grid(feature_stem(cfg, e, "rgb"), extracted.rgb);
    save_patch_grid(feature_stem(cfg, e, "pt"), extracted.pt);
  });
  nlohmann::ordered_json index;
  index["format"] = "m3dm-features";
  index["version"] = 1;
  index["scenes"] = json::array();
  for (const auto& e : manifest.entries) {
    index["scenes"].push_back({{"id", e.id},
                               {"split", e.split == synthetic::Split::Train ? "train" : "test"},
                               {"label", e.label},
                               {"kind", synthetic::to_string(e.kind)}});
  }
  write_text(features_dir(cfg) / "index.json", index.dump(2) + "\n");
  write_text(cfg.work_dir / "config.json", cfg.to_json().dump(2) + "\n");
  std::cout << "extracted " << manifest.entries.size() << " scenes\n";
}

void cmd_train_uff(const PipelineConfig& cfg) {
  const auto train = load_features(cfg, select(read_index(cfg), synthetic::Split::Train));
  require(!train.empty(), ErrorKind::EmptyData, "no training scenes");
  std::vector<double> losses;
  const auto net = pipeline::train_uff(train, cfg, &losses);
  fusion::save_fusion(uff_dir(cfg), net, cfg.uff_config());
  std::ostringstream log;
  for (std::size_t i = 0; i < losses.size(); ++i) log << i << "," << losses[i] << "\n";
  write_text(uff_dir(cfg) / "loss.csv", "step,loss\n" + log.str());
  if (!losses.empty()) {
    std::printf("trained fusion network: loss %.4f -> %.4f\n", losses.front(), losses.back());
  }
}

void cmd_build_banks(const PipelineConfig& cfg) {
  const auto train = load_features(cfg, select(read_index(cfg), synthetic::Split::Train));
  pipeline::Banks banks;
  if (cfg.banks.has(Bank::Fs)) {
    require(fs::exists(uff_dir(cfg) / "manifest.json"), ErrorKind::DataError,
            "the fused bank needs a fusion network (run 'train-uff' first)");
    banks.uff = fusion::load_fusion(uff_dir(cfg));
  }
  pipeline::build_banks(banks, train, cfg, cfg.banks);
  for (Bank b : cfg.banks.list()) {
    const auto& bank = *banks.banks[static_cast<int>(b)];
    memory::save_bank(bank_dir(cfg, b), bank);
    std::cout << "bank " << pipeline::to_string(b) << ": " << bank.size() << " x " << bank.dim() << "\n";
  }
}

void cmd_train_dlf(const PipelineConfig& cfg) {
  const auto train = load_features(cfg, select(read_index(cfg), synthetic::Split::Train));
  const auto banks = load_banks(cfg, cfg.banks);
  const auto scores = score_all(banks, train, cfg, cfg.banks);
  const auto heads = pipeline::train_dlf(scores, cfg, cfg.banks);
  decision::save_head(dlf_dir(cfg) / "head_a.json", heads.a);
  decision::save_head(dlf_dir(cfg) / "head_s.json", heads.s);
  nlohmann::ordered_json m;
  m["format"] = "m3dm-dlf";
  m["version"] = 1;
  m["banks"] = cfg.banks.to_string();
  write_text(dlf_dir(cfg) / "manifest.json", m.dump(2) + "\n");
  std::cout << "trained decision heads on " << scores.size() << " scenes (" << cfg.banks.to_string() << ")\n";
}

pipeline::Heads load_heads(const PipelineConfig& cfg) {
  require(fs::exists(dlf_dir(cfg) / "manifest.json"), ErrorKind::DataError,
          "no decision heads (run 'train-dlf' first)");
  const json m = read_json(dlf_dir(cfg) / "manifest.json", ErrorKind::FormatError);
  pipeline::Heads heads;
  heads.set = BankSet::parse(m.at("banks").get<std::string>());
  heads.a = decision::load_head(dlf_dir(cfg) / "head_a.json");
  heads.s = decision::load_head(dlf_dir(cfg) / "head_s.json");
  return heads;
}

void cmd_infer(const PipelineConfig& cfg) {
  const auto entries = select(read_index(cfg), synthetic::Split::Test);
  require(!entries.empty(), ErrorKind::EmptyData, "no test scenes");
  const auto heads = load_heads(cfg);
  const auto banks = load_banks(cfg, heads.set);
  const auto scenes = load_features(cfg, entries);
  const int size = image_size_of(cfg);
  std::vector<double> a(entries.size());
  std::vector<std::vector<double>> phi(entries.size());
  pipeline::parallel_for(entries.size(), cfg.threads, [&](std::size_t i) {
    const auto s = pipeline::score_scene(banks, scenes[i], cfg, heads.set);
    const auto d = pipeline::decide(heads, s, size, size, cfg.sigma);
    a[i] = d.anomaly_score;
    for (Bank b : heads.set.list()) phi[i].push_back(s.phi[static_cast<int>(b)]);
    save_score_map(scores_dir(cfg) / (entries[i].id + "_S.t"), d.segmentation);
  });
  nlohmann::ordered_json out;
  out["format"] = "m3dm-scores";
  out["version"] = 1;
  out["banks"] = heads.set.to_string();
  out["scenes"] = json::array();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    out["scenes"].push_back({{"id", entries[i].id}, {"a", a[i]}, {"phi", phi[i]}});
  }
  write_text(scores_dir(cfg) / "scores.json", out.dump(2) + "\n");
  std::cout << "scored " << entries.size() << " test scenes\n";
}

void cmd_eval(const PipelineConfig& cfg) {
  const auto manifest = synthetic::read_manifest(cfg.dataset_dir);
  const json scores = read_json(scores_dir(cfg) / "scores.json", ErrorKind::FormatError);
  std::map<std::string, synthetic::ManifestEntry> by_id;
  for (const auto& e : manifest.entries) by_id[e.id] = e;

  std::vector<std::string> ids;
  std::vector<double> a;
  std::vector<int> labels;
  std::vector<ScoreMap> maps;
  std::vector<std::vector<std::uint8_t>> masks;
  for (const auto& s : scores.at("scenes")) {
    const auto id = s.at("id").get<std::string>();
    const auto it = by_id.find(id);
    require(it != by_id.end(), ErrorKind::DataError, "scored scene '" + id + "' is not in the dataset");
    ids.push_back(id);
    a.push_back(s.at("a").get<double>());
    labels.push_back(it->second.label);
    maps.push_back(load_score_map(scores_dir(cfg) / (id + "_S.t")));
    masks.push_back(synthetic::load_mask(cfg.dataset_dir, it->second));
  }
  const auto report = metrics::evaluate(a, labels, maps, masks, cfg.fpr_limit);
  write_text(eval_dir(cfg) / "report.json", report.to_json());
  std::ostringstream csv;
  csv << "id,label,a,max_s\n";
  char line[256];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double mx = *std::max_element(maps[i].values.begin(), maps[i].values.end());
    std::snprintf(line, sizeof line, "%s,%d,%.17g,%.9g\n", ids[i].c_str(), labels[i], a[i], mx);
    csv << line;
  }
  write_text(eval_dir(cfg) / "scenes.csv", csv.str());
  std::cout << report.to_json();
}

std::vector<BankSet> parse_subsets(const std::string& text) {
  std::vector<BankSet> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (!item.empty()) out.push_back(BankSet::parse(item));
  }
  require(!out.empty(), ErrorKind::ConfigError, "no bank subsets given");
  return out;
}

void cmd_ablate(const PipelineConfig& cfg, const std::string& subset_text) {
  const auto subsets = parse_subsets(subset_text);
  BankSet needed;
  for (const auto& s : subsets) {
    for (Bank b : s.list()) needed.add(b);
  }
  const auto index = read_index(cfg);
  const auto train_entries = select(index, synthetic::Split::Train);
  const auto test_entries = select(index, synthetic::Split::Test);
  const auto banks = load_banks(cfg, needed);
  const auto train_scores = score_all(banks, load_features(cfg, train_entries), cfg, needed);
  const auto test_scores = score_all(banks, load_features(cfg, test_entries), cfg, needed);

  const auto manifest = synthetic::read_manifest(cfg.dataset_dir);
  std::map<std::string, synthetic::ManifestEntry> by_id;
  for (const auto& e : manifest.entries) by_id[e.id] = e;
  std::vector<int> labels;
  std::vector<std::vector<std::uint8_t>> masks;
  for (const auto& e : test_entries) {
    labels.push_back(e.label);
    masks.push_back(synthetic::load_mask(cfg.dataset_dir, by_id.at(e.id)));
  }
  const int size = image_size_of(cfg);
  const auto rows = pipeline::ablate(train_scores, test_scores, labels, masks, size, size, cfg, subsets);
  const std::string table = pipeline::format_ablation_table(rows);
  nlohmann::ordered_json j = json::array();
  for (const auto& r : rows) {
    j.push_back({{"banks", r.set.to_string()},
                 {"i_auroc", r.report.i_auroc},
                 {"p_auroc", r.report.p_auroc},
                 {"aupro", r.report.aupro}});
  }
  write_text(ablation_dir(cfg) / "table.md", table);
  write_text(ablation_dir(cfg) / "ablation.json", j.dump(2) + "\n");
  std::cout << table;
}

void cmd_all(const PipelineConfig& cfg) {
  cmd_extract(cfg);
  if (cfg.banks.has(Bank::Fs)) cmd_train_uff(cfg);
  cmd_build_banks(cfg);
  cmd_train_dlf(cfg);
  cmd_infer(cfg);
  cmd_eval(cfg);
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ConfigError:
    case ErrorKind::BadParam:
      return 2;
    case ErrorKind::IoError:
    case ErrorKind::FormatError:
    case ErrorKind::SizeMismatch:
    case ErrorKind::DataError:
    case ErrorKind::EmptyData:
    case ErrorKind::DegenerateScene:
    case ErrorKind::OneClassOnly:
    case ErrorKind::NoAnomaly:
      return 3;
    default:
      return 1;
  }
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Multimodal anomaly detection on organized point clouds with RGB"};
  app.require_subcommand(1);
  app.fallthrough();

  Overrides o;
  app.add_option("--config", o.config, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--dataset", o.dataset, "dataset directory");
  app.add_option("--work", o.work, "work directory for artifacts");
  app.add_option("--banks", o.banks, "memory banks to use, e.g. rgb,pt,fs");
  app.add_option("--grid", o.grid, "patch grid GHxGW");
  app.add_option("--groups", o.groups, "point groups MxS");
  app.add_option("--coreset-ratio", o.coreset_ratio, "coreset ratio in (0, 1]");
  app.add_option("--threads", o.threads, "worker threads (0 = all cores)");
  for (const char* name : {"ransac", "fps", "feature", "uff", "bank", "dlf", "synth"}) {
    app.add_option_function<std::uint64_t>(
        std::string("--seed-") + name, [&o, name](std::uint64_t v) { o.seeds[name] = v; },
        std::string(name) + " seed");
  }

  std::string subsets = "rgb;pt;rgb,pt;rgb,pt,fs";
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  auto* extract = app.add_subcommand("extract", "preprocess scenes and write patch features");
  auto* train_uff = app.add_subcommand("train-uff", "train the fusion network");
  auto* build_banks = app.add_subcommand("build-banks", "build memory banks from training features");
  auto* train_dlf = app.add_subcommand("train-dlf", "fit the decision heads");
  auto* infer = app.add_subcommand("infer", "score test scenes");
  auto* eval = app.add_subcommand("eval", "evaluate scores against ground truth");
  auto* ablate = app.add_subcommand("ablate", "compare bank subsets");
  ablate->add_option("--subsets", subsets, "semicolon separated bank subsets");
  auto* all = app.add_subcommand("all", "extract, train, infer and evaluate");
  auto* show = app.add_subcommand("config", "print the resolved configuration");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    const PipelineConfig cfg = resolve(o);
    if (*synth) cmd_synth(cfg);
    if (*extract) cmd_extract(cfg);
    if (*train_uff) cmd_train_uff(cfg);
    if (*build_banks) cmd_build_banks(cfg);
    if (*train_dlf) cmd_train_dlf(cfg);
    if (*infer) cmd_infer(cfg);
    if (*eval) cmd_eval(cfg);
    if (*ablate) cmd_ablate(cfg, subsets);
    if (*all) cmd_all(cfg);
    if (*show) std::cout << cfg.to_json().dump(2) << "\n";
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace m3dm::cli
