#include "mtlab/experiment.h"

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <chrono>
#include <ctime>
#include <deque>
#include <random>
#include <set>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include "mtlab/checkpoint.h"
#include "mtlab/evaluate.h"
#include "mtlab/report.h"

extern char** environ;

namespace mtlab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::vector<Regime> kAllRegimes{Regime::kOneToOne, Regime::kOneToMany, Regime::kManyToOne,
                                      Regime::kManyToMany};
const std::vector<Architecture> kAllArchitectures{Architecture::kDecoderOnly, Architecture::kEncoderDecoder};

json model_schema() {
  json j = ModelConfig{};
  j.erase("vocab_size");
  j.erase("seed");
  return j;
}

json train_schema() {
  json j = TrainConfig{};
  j.erase("seed");
  return j;
}

json defaults_doc() {
  const GenerationConfig gc;
  const MetricOptions mo;
  return {{"name", nullptr},
          {"seed", 0u},
          {"output_dir", "runs"},
          {"corpora", nullptr},
          {"tokenizer", {{"vocab_size", 2000u}, {"extra_alphabet", json::array()}}},
          {"data",
           {{"min_chars", 40u}, {"max_chars", 200u}, {"test_size", 100u}, {"val_size", 50u}, {"max_pairs", 0u}, {"skip_bad", false}}},
          {"directions",
           {{"regime", "one_to_one"},
            {"source_langs", json::array()},
            {"target_langs", json::array()},
            {"mixing", "proportional"}}},
          {"model", model_schema()},
          {"model_by_architecture", nullptr},
          {"train", train_schema()},
          {"generation",
           {{"max_new_tokens", gc.max_new_tokens},
            {"beam_width", gc.beam_width},
            {"length_penalty", gc.length_penalty}}},
          {"metrics",
           {{"bleu_smoothing", mo.bleu_smoothing},
            {"chrf_order", mo.chrf_order},
            {"chrf_beta", mo.chrf_beta},
            {"ter_max_block", mo.ter_limits.max_block},
            {"ter_max_distance", mo.ter_limits.max_distance},
            {"bucket_edges", json::array({10u, 20u, 40u})}}},
          {"matrix", nullptr}};
}

json corpus_schema() { return {{"src", nullptr}, {"tgt", nullptr}, {"path", nullptr}, {"bidirectional", true}}; }

json matrix_schema() {
  json archs = json::array(), regimes = json::array();
  for (auto a : kAllArchitectures) archs.push_back(std::string(to_string(a)));
  for (auto r : kAllRegimes) regimes.push_back(std::string(to_string(r)));
  return {{"architectures", archs}, {"regimes", regimes}, {"cells", json::array()}, {"languages", nullptr},
          {"jobs", 1u}};
}

json languages_schema() { return {{"source_langs", json::array()}, {"target_langs", json::array()}}; }

std::vector<std::string> keys_of(const json& obj) {
  std::vector<std::string> out;
  for (const auto& [k, v] : obj.items()) out.push_back(k);
  return out;
}

std::string join_path(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

// Overlays `user` on `schema`, checking key names and value kinds.
class Checker {
 public:
  std::vector<std::string> errors;

  json merge(const json& schema, const json& user, const std::string& path) {
    if (!user.is_object()) {
      errors.push_back(fmt::format("{}: expected an object, got {}", path.empty() ? "config" : path, user.dump()));
      return schema;
    }
    json out = schema;
    for (const auto& [key, value] : user.items()) {
      const std::string where = join_path(path, key);
      if (!schema.contains(key)) {
        unknown(where, key, keys_of(schema));
        continue;
      }
      out[key] = check_value(schema[key], value, where);
    }
    return out;
  }

  void unknown(const std::string& where, const std::string& key, const std::vector<std::string>& candidates) {
    if (auto near = nearest_key(key, candidates)) {
      errors.push_back(fmt::format("{}: unknown key (did you mean '{}'?)", where, *near));
    } else {
      errors.push_back(fmt::format("{}: unknown key; expected one of: {}", where, fmt::join(candidates, ", ")));
    }
  }

  json check_value(const json& def, const json& value, const std::string& where) {
    if (def.is_null()) return value;  // checked by the caller
    if (def.is_object()) return merge(def, value, where);
    if (value.is_null() && where.ends_with("grad_clip_norm")) return value;
    bool ok = false;
    const char* want = "";
    if (def.is_number_unsigned() || def.is_number_integer()) {
      ok = value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
      want = "a non-negative integer";
    } else if (def.is_number_float()) {
      ok = value.is_number();
      want = "a number";
    } else if (def.is_boolean()) {
      ok = value.is_boolean();
      want = "true or false";
    } else if (def.is_string()) {
      ok = value.is_string();
      want = "a string";
    } else if (def.is_array()) {
      ok = value.is_array();
      want = "a list";
    }
    if (!ok) {
      errors.push_back(fmt::format("{}: expected {}, got {}", where, want, value.dump()));
      return def;
    }
    return value;
  }

  // Runs `fn`, turning exceptions into errors prefixed with `where`.
  template <class F>
  void guard(const std::string& where, F&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      errors.push_back(fmt::format("{}: {}", where, e.what()));
    }
  }

  void add_all(const std::string& where, const std::vector<std::string>& problems) {
    for (const auto& p : problems) errors.push_back(fmt::format("{}: {}", where, p));
  }
};

std::vector<std::string> string_list(const json& j) {
  std::vector<std::string> out;
  for (const auto& v : j) {
    if (!v.is_string()) throw Error(fmt::format("expected a list of strings, got {}", j.dump()));
    out.push_back(v.get<std::string>());
  }
  return out;
}

ModelConfig model_for(const json& resolved, Architecture arch, std::size_t vocab, std::uint64_t seed) {
  json m = resolved.at("model");
  const json& overrides = resolved.at("model_by_architecture");
  const std::string name(to_string(arch));
  if (overrides.is_object() && overrides.contains(name)) m.update(overrides.at(name));
  m["architecture"] = name;
  m["vocab_size"] = vocab;
  m["seed"] = seed;
  return m.get<ModelConfig>();
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

std::string direction_name(const Direction& d) { return d.first + "-" + d.second; }

}  // namespace

std::string MatrixCell::name() const { return fmt::format("{}-{}", to_string(architecture), to_string(regime)); }

std::vector<MatrixCell> MatrixConfig::enabled_cells() const {
  if (!cells.empty()) return cells;
  std::vector<MatrixCell> out;
  for (auto a : architectures)
    for (auto r : regimes) out.push_back({a, r});
  return out;
}

ConfigError::ConfigError(std::vector<std::string> problems)
    : Error(fmt::format("invalid config ({} problem{}):\n  {}", problems.size(), problems.size() == 1 ? "" : "s",
                        fmt::join(problems, "\n  "))),
      problems_(std::move(problems)) {}

std::optional<std::string> nearest_key(std::string_view key, const std::vector<std::string>& candidates) {
  auto chars = [](std::string_view s) {
    std::vector<std::string> out;
    for (char c : s) out.emplace_back(1, c);
    return out;
  };
  const auto k = chars(key);
  std::optional<std::string> best;
  std::size_t best_d = std::max<std::size_t>(2, key.size() / 3) + 1;
  for (const auto& c : candidates) {
    const std::size_t d = edit_distance(k, chars(c));
    if (d < best_d) best_d = d, best = c;
  }
  return best;
}

ExperimentConfig parse_config(const json& doc, const fs::path& base_dir) {
  Checker ck;
  json r = ck.merge(defaults_doc(), doc, "");
  ExperimentConfig c;

  if (!r["name"].is_string() || r["name"].get<std::string>().empty()) {
    ck.errors.emplace_back("name: required non-empty string");
  } else {
    c.name = r["name"].get<std::string>();
    if (c.name.find('/') != std::string::npos || c.name == "." || c.name == "..") {
      ck.errors.push_back(fmt::format("name: '{}' must be usable as a directory name", c.name));
    }
  }
  c.seed = r["seed"].get<std::uint64_t>();
  {
    fs::path out = r["output_dir"].get<std::string>();
    if (out.is_relative()) out = base_dir / out;
    c.output_dir = out.lexically_normal();
    r["output_dir"] = c.output_dir.string();
  }

  // corpora
  if (!r["corpora"].is_array() || r["corpora"].empty()) {
    ck.errors.emplace_back("corpora: required non-empty list of {src, tgt, path}");
  } else {
    json resolved_corpora = json::array();
    for (std::size_t i = 0; i < r["corpora"].size(); ++i) {
      const std::string where = fmt::format("corpora[{}]", i);
      json e = ck.merge(corpus_schema(), r["corpora"][i], where);
      bool ok = true;
      for (const char* key : {"src", "tgt", "path"}) {
        if (!e[key].is_string() || e[key].get<std::string>().empty()) {
          ck.errors.push_back(fmt::format("{}.{}: required non-empty string", where, key));
          ok = false;
        }
      }
      if (ok) {
        CorpusSpec spec{e["src"], e["tgt"], e["path"].get<std::string>(), e["bidirectional"]};
        if (spec.path.is_relative()) spec.path = base_dir / spec.path;
        spec.path = spec.path.lexically_normal();
        if (spec.src_lang == spec.tgt_lang) ck.errors.push_back(fmt::format("{}: src and tgt must differ", where));
        if (!fs::is_regular_file(spec.path)) {
          ck.errors.push_back(fmt::format("{}.path: file not found: {}", where, spec.path.string()));
        }
        e["path"] = spec.path.string();
        c.corpora.push_back(std::move(spec));
      }
      resolved_corpora.push_back(e);
    }
    r["corpora"] = resolved_corpora;
  }

  // tokenizer / data
  c.vocab_size = r["tokenizer"]["vocab_size"].get<std::size_t>();
  if (c.vocab_size < 8) ck.errors.push_back(fmt::format("tokenizer.vocab_size: must be >= 8 (got {})", c.vocab_size));
  ck.guard("tokenizer.extra_alphabet", [&] { c.extra_alphabet = string_list(r["tokenizer"]["extra_alphabet"]); });
  const json& d = r["data"];
  c.data = {d["min_chars"], d["max_chars"], d["test_size"], d["val_size"], d["max_pairs"], d["skip_bad"]};
  if (c.data.min_chars > c.data.max_chars) {
    ck.errors.push_back(
        fmt::format("data: min_chars {} exceeds max_chars {}", c.data.min_chars, c.data.max_chars));
  }

  // model overrides
  if (r["model_by_architecture"].is_null()) {
    r["model_by_architecture"] = json::object();
  } else if (!r["model_by_architecture"].is_object()) {
    ck.errors.emplace_back("model_by_architecture: expected an object keyed by architecture");
    r["model_by_architecture"] = json::object();
  } else {
    json schema = model_schema();
    schema.erase("architecture");
    std::vector<std::string> names;
    for (auto a : kAllArchitectures) names.emplace_back(to_string(a));
    json cleaned = json::object();
    for (const auto& [arch, over] : r["model_by_architecture"].items()) {
      const std::string where = join_path("model_by_architecture", arch);
      if (std::find(names.begin(), names.end(), arch) == names.end()) {
        ck.unknown(where, arch, names);
        continue;
      }
      Checker sub;
      sub.merge(schema, over, where);
      ck.errors.insert(ck.errors.end(), sub.errors.begin(), sub.errors.end());
      if (sub.errors.empty()) cleaned[arch] = over;
    }
    r["model_by_architecture"] = cleaned;
  }

  // directions
  ck.guard("directions", [&] {
    const json& dj = r["directions"];
    c.directions.regime = parse_regime(dj["regime"].get<std::string>());
    c.directions.source_langs = string_list(dj["source_langs"]);
    c.directions.target_langs = string_list(dj["target_langs"]);
    c.directions.mixing = parse_mixing(dj["mixing"].get<std::string>());
  });

  // matrix
  if (!r["matrix"].is_null()) {
    json m = ck.merge(matrix_schema(), r["matrix"], "matrix");
    MatrixConfig mc;
    ck.guard("matrix.architectures", [&] {
      for (const auto& a : string_list(m["architectures"])) mc.architectures.push_back(parse_architecture(a));
    });
    ck.guard("matrix.regimes", [&] {
      for (const auto& s : string_list(m["regimes"])) mc.regimes.push_back(parse_regime(s));
    });
    ck.guard("matrix.cells", [&] {
      for (const auto& s : string_list(m["cells"])) {
        const auto slash = s.find('/');
        if (slash == std::string::npos) throw Error(fmt::format("'{}' is not architecture/regime", s));
        const MatrixCell cell{parse_architecture(s.substr(0, slash)), parse_regime(s.substr(slash + 1))};
        if (std::find(mc.architectures.begin(), mc.architectures.end(), cell.architecture) ==
                mc.architectures.end() ||
            std::find(mc.regimes.begin(), mc.regimes.end(), cell.regime) == mc.regimes.end()) {
          throw Error(fmt::format("'{}' is outside matrix.architectures x matrix.regimes", s));
        }
        mc.cells.push_back(cell);
      }
    });
    mc.jobs = m["jobs"].get<std::size_t>();
    if (mc.jobs == 0) ck.errors.emplace_back("matrix.jobs: must be >= 1");
    if (!m["languages"].is_object()) {
      ck.errors.emplace_back("matrix.languages: required object mapping each regime to {source_langs, target_langs}");
    } else {
      std::vector<std::string> names;
      for (auto rg : kAllRegimes) names.emplace_back(to_string(rg));
      json cleaned = json::object();
      for (const auto& [name, value] : m["languages"].items()) {
        const std::string where = join_path("matrix.languages", name);
        if (std::find(names.begin(), names.end(), name) == names.end()) {
          ck.unknown(where, name, names);
          continue;
        }
        json l = ck.merge(languages_schema(), value, where);
        ck.guard(where, [&] {
          mc.languages[parse_regime(name)] = {string_list(l["source_langs"]), string_list(l["target_langs"])};
        });
        cleaned[name] = l;
      }
      m["languages"] = cleaned;
    }
    std::set<std::string> seen;
    for (const auto& cell : mc.enabled_cells()) {
      if (!seen.insert(cell.name()).second) ck.errors.push_back(fmt::format("matrix.cells: {} listed twice", cell.name()));
    }
    r["matrix"] = m;
    c.matrix = std::move(mc);
  }

  // direction sets that will be trained, checked against the corpora
  std::vector<std::pair<std::string, DirectionConfig>> direction_sets;
  if (c.matrix) {
    for (auto rg : c.matrix->regimes) {
      bool used = false;
      for (const auto& cell : c.matrix->enabled_cells()) used = used || cell.regime == rg;
      if (!used) continue;
      const auto it = c.matrix->languages.find(rg);
      if (it == c.matrix->languages.end()) {
        ck.errors.push_back(fmt::format("matrix.languages.{}: missing", to_string(rg)));
        continue;
      }
      DirectionConfig dc{rg, it->second.first, it->second.second, c.directions.mixing};
      direction_sets.emplace_back(fmt::format("matrix.languages.{}", to_string(rg)), dc);
    }
  } else {
    direction_sets.emplace_back("directions", c.directions);
  }
  std::set<Direction> available;
  for (const auto& spec : c.corpora) {
    available.insert({spec.src_lang, spec.tgt_lang});
    if (spec.bidirectional) available.insert({spec.tgt_lang, spec.src_lang});
  }
  for (const auto& [where, dc] : direction_sets) {
    ck.add_all(where, dc.problems());
    for (const auto& dir : dc.directions()) {
      if (!c.corpora.empty() && !available.count(dir)) {
        ck.errors.push_back(fmt::format("{}: no corpus provides {}", where, direction_name(dir)));
      }
    }
  }

  // model, per architecture in use
  std::vector<Architecture> archs;
  if (c.matrix) {
    for (const auto& cell : c.matrix->enabled_cells())
      if (std::find(archs.begin(), archs.end(), cell.architecture) == archs.end()) archs.push_back(cell.architecture);
  }
  ck.guard("model", [&] {
    const auto base = parse_architecture(r["model"]["architecture"].get<std::string>());
    if (!c.matrix) archs.push_back(base);
    c.model = model_for(r, base, c.vocab_size, c.seed);
  });
  for (auto a : archs) {
    ck.guard(fmt::format("model ({})", to_string(a)), [&] {
      ck.add_all(fmt::format("model ({})", to_string(a)), model_for(r, a, c.vocab_size, c.seed).problems());
    });
  }

  ck.guard("train", [&] {
    json t = r["train"];
    t["seed"] = c.seed;
    c.train = t.get<TrainConfig>();
    ck.add_all("train", c.train.problems());
  });

  const json& g = r["generation"];
  c.generation.max_new_tokens = g["max_new_tokens"];
  c.generation.beam_width = g["beam_width"];
  c.generation.length_penalty = g["length_penalty"];
  ck.add_all("generation", c.generation.problems());

  const json& mj = r["metrics"];
  c.metrics.bleu_smoothing = mj["bleu_smoothing"];
  c.metrics.chrf_order = mj["chrf_order"];
  c.metrics.chrf_beta = mj["chrf_beta"];
  c.metrics.ter_limits = {mj["ter_max_block"], mj["ter_max_distance"]};
  if (c.metrics.chrf_order == 0) ck.errors.emplace_back("metrics.chrf_order: must be >= 1");
  if (!(c.metrics.chrf_beta > 0.0)) ck.errors.emplace_back("metrics.chrf_beta: must be > 0");
  if (c.metrics.ter_limits.max_block == 0) ck.errors.emplace_back("metrics.ter_max_block: must be >= 1");
  ck.guard("metrics.bucket_edges", [&] {
    c.bucket_edges = mj["bucket_edges"].get<std::vector<std::size_t>>();
    for (std::size_t i = 0; i < c.bucket_edges.size(); ++i) {
      if (c.bucket_edges[i] == 0 || (i > 0 && c.bucket_edges[i] <= c.bucket_edges[i - 1])) {
        throw Error("edges must be positive and strictly increasing");
      }
    }
  });

  if (!ck.errors.empty()) throw ConfigError(ck.errors);
  c.resolved = std::move(r);
  return c;
}

ExperimentConfig validate_config(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError({fmt::format("{}: not valid JSON: {}", path.string(), e.what())});
  }
  return parse_config(doc, fs::absolute(path).parent_path());
}

ExperimentConfig cell_config(const ExperimentConfig& config, const MatrixCell& cell) {
  if (!config.matrix) throw Error("cell_config: config has no matrix");
  json r = config.resolved;
  const auto& langs = config.matrix->languages.at(cell.regime);
  r["name"] = cell.name();
  r["output_dir"] = (config.output_dir / config.name).string();
  r["directions"]["regime"] = std::string(to_string(cell.regime));
  r["directions"]["source_langs"] = langs.first;
  r["directions"]["target_langs"] = langs.second;
  json model = r["model"];
  const std::string arch(to_string(cell.architecture));
  if (r["model_by_architecture"].contains(arch)) model.update(r["model_by_architecture"][arch]);
  model["architecture"] = arch;
  r["model"] = model;
  r["model_by_architecture"] = json::object();
  r.erase("matrix");
  return parse_config(r, config.output_dir);
}

Splits load_splits(const ExperimentConfig& c) {
  Splits s;
  std::set<std::string> langs;
  for (std::size_t i = 0; i < c.corpora.size(); ++i) {
    const CorpusSpec& spec = c.corpora[i];
    const auto loaded = load_corpus(spec.path, spec.src_lang, spec.tgt_lang, c.data.skip_bad);
    auto pairs = filter_by_length(loaded, c.data.min_chars, c.data.max_chars);
    if (pairs.size() < loaded.size()) {
      spdlog::info("{}: kept {} of {} pairs within {}-{} characters", spec.path.filename().string(), pairs.size(),
                   loaded.size(), c.data.min_chars, c.data.max_chars);
    }
    std::mt19937_64 rng(mix_seed(c.seed, 7000 + i));
    std::shuffle(pairs.begin(), pairs.end(), rng);
    if (c.data.max_pairs > 0 && pairs.size() > c.data.max_pairs) pairs.resize(c.data.max_pairs);
    const std::size_t n_test = std::min(c.data.test_size, pairs.size());
    const std::size_t n_val = std::min(c.data.val_size, pairs.size() - n_test);
    auto add = [&](CorpusMap& m, std::size_t first, std::size_t last) {
      for (std::size_t k = first; k < last; ++k) {
        const SentencePair& p = pairs[k];
        m[{p.src_lang, p.tgt_lang}].push_back(p);
        if (spec.bidirectional) m[{p.tgt_lang, p.src_lang}].push_back({p.tgt_lang, p.src_lang, p.tgt_text, p.src_text});
      }
    };
    add(s.test, 0, n_test);
    add(s.val, n_test, n_test + n_val);
    add(s.train, n_test + n_val, pairs.size());
    langs.insert(spec.src_lang);
    langs.insert(spec.tgt_lang);
  }
  s.languages.assign(langs.begin(), langs.end());
  return s;
}

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::kTokenizer: return "tokenizer";
    case Stage::kDataset: return "dataset";
    case Stage::kTrain: return "train";
    case Stage::kEvaluate: return "evaluate";
  }
  return "?";
}

namespace {

class Runner {
 public:
  explicit Runner(const ExperimentConfig& c) : c_(c), paths_{c.output_dir / c.name} {}

  const RunPaths& paths() const { return paths_; }

  const Splits& splits() {
    if (!splits_) splits_ = load_splits(c_);
    return *splits_;
  }

  const SubwordTokenizer& tokenizer() {
    if (!tokenizer_) {
      if (!fs::exists(paths_.tokenizer())) throw Error("no tokenizer in the run directory; run the tokenizer stage");
      tokenizer_ = SubwordTokenizer::load(paths_.tokenizer());
    }
    return *tokenizer_;
  }

  ModelConfig model_config() {
    ModelConfig mc = c_.model;
    mc.vocab_size = tokenizer().vocab_size();
    return mc;
  }

  void run_tokenizer() {
    std::vector<std::string> text;
    for (const auto& [dir, pairs] : splits().train) {
      for (const auto& p : pairs) text.push_back(p.src_text), text.push_back(p.tgt_text);
    }
    if (text.empty()) throw Error("no training sentences left after filtering and splitting");
    std::vector<std::string> tags;
    for (const auto& lang : splits().languages) tags.push_back(language_tag(lang));
    tokenizer_ = SubwordTokenizer::train(text, c_.vocab_size, tags, c_.extra_alphabet);
    tokenizer_->save(paths_.tokenizer());
    spdlog::info("tokenizer: {} pieces from {} sentences", tokenizer_->vocab_size(), text.size());
  }

  void build_datasets() {
    if (train_) return;
    const ModelConfig mc = model_config();
    train_ = build_direction_dataset(splits().train, c_.directions, mc.architecture, tokenizer(), mc.max_seq_len,
                                     c_.seed);
    val_.emplace();
    CorpusMap val;
    for (const auto& dir : c_.directions.directions()) {
      if (auto it = splits().val.find(dir); it != splits().val.end() && !it->second.empty()) val[dir] = it->second;
    }
    if (val.size() == c_.directions.directions().size()) {
      val_ = build_direction_dataset(val, c_.directions, mc.architecture, tokenizer(), mc.max_seq_len,
                                     mix_seed(c_.seed, 3));
    }
  }

  void run_dataset() {
    build_datasets();
    json per = json::object();
    for (const auto& [dir, n] : train_->per_direction) per[direction_name(dir)] = n;
    write_json(paths_.dataset_stats(), {{"train_examples", train_->examples.size()},
                                        {"val_examples", val_->examples.size()},
                                        {"dropped_overlength", train_->dropped_overlength + val_->dropped_overlength},
                                        {"per_direction", per}});
    if (train_->examples.empty()) throw Error("training set is empty after dropping over-length examples");
  }

  void run_train(bool resume) {
    build_datasets();
    const ModelConfig mc = model_config();
    TrainingState state = TrainingState::fresh(mc, c_.train);
    LossLog log;
    const auto newest = newest_checkpoint();
    if (resume && newest) {
      state = load_checkpoint(*newest);
      if (!(state.model.config() == mc) || !(state.config == c_.train)) {
        throw Error(fmt::format("{} was written with a different model or train config", newest->string()));
      }
      if (fs::exists(paths_.loss_log())) {
        const LossLog previous = LossLog::parse_csv(read_file(paths_.loss_log()));
        for (const auto& e : previous.entries())
          if (e.step <= state.step) log.append(e);
      }
      spdlog::info("resuming from {} at step {}", newest->filename().string(), state.step);
    } else {
      fs::remove_all(paths_.checkpoints());
    }
    fs::create_directories(paths_.checkpoints());
    spdlog::info("training {} ({} parameters) on {} examples for {} steps", to_string(mc.architecture),
                 count_parameters(state.model), train_->examples.size(), c_.train.max_steps);
    TrainOptions opts;
    opts.checkpoint_dir = paths_.checkpoints();
    opts.on_log = [](const LossEntry& e) {
      if (e.val_loss) {
        spdlog::info("step {} train {:.4f} val {:.4f}", e.step, e.train_loss, *e.val_loss);
      } else {
        spdlog::info("step {} train {:.4f}", e.step, e.train_loss);
      }
    };
    const TrainResult result = train(state, train_->examples, val_->examples, opts);
    for (const auto& e : result.log.entries()) log.append(e);
    log.write_csv(paths_.loss_log());
    parameter_count_ = count_parameters(state.model);
  }

  json run_evaluate() {
    if (!fs::exists(paths_.final_checkpoint())) throw Error("no final checkpoint; run the train stage");
    const TrainingState state = load_checkpoint(paths_.final_checkpoint());
    const auto& model = state.model;
    parameter_count_ = count_parameters(model);
    fs::create_directories(paths_.hypotheses());
    json reports = json::array();
    for (const auto& dir : c_.directions.directions()) {
      const auto it = splits().test.find(dir);
      const auto test = it == splits().test.end()
                            ? std::vector<SentencePair>{}
                            : fits_for_generation(it->second, model.config(), tokenizer());
      if (test.empty()) throw Error(fmt::format("no test pairs for {} (data.test_size)", direction_name(dir)));
      spdlog::info("evaluating {} on {} sentences", direction_name(dir), test.size());
      const auto result = evaluate(model, test, tokenizer(), c_.generation, c_.bucket_edges, c_.metrics);
      const fs::path stem = paths_.hypotheses() / direction_name(dir);
      write_lines(fs::path(stem) += ".hyp", result.hypotheses);
      write_lines(fs::path(stem) += ".ref", result.references);
      write_lines(fs::path(stem) += ".src", result.sources);
      spdlog::info("{}: BLEU {:.2f} chrF {:.2f} TER {:.4f}", direction_name(dir), result.report.overall.bleu,
                   result.report.overall.chrf, result.report.overall.ter);
      reports.push_back(to_json_value(result.report));
    }
    const json metrics{{"name", c_.name},
                       {"architecture", std::string(to_string(c_.model.architecture))},
                       {"regime", std::string(to_string(c_.directions.regime))},
                       {"seed", c_.seed},
                       {"reports", reports}};
    write_json(paths_.metrics(), metrics);
    return metrics;
  }

  std::optional<std::size_t> parameter_count() const { return parameter_count_; }

  std::optional<fs::path> newest_checkpoint() const {
    if (!fs::is_directory(paths_.checkpoints())) return std::nullopt;
    std::optional<fs::path> best;
    std::size_t best_step = 0;
    for (const auto& entry : fs::directory_iterator(paths_.checkpoints())) {
      const std::string name = entry.path().filename().string();
      std::size_t step = 0;
      if (name == "final.ckpt") {
        step = static_cast<std::size_t>(-1);
      } else if (name.starts_with("step-") && name.ends_with(".ckpt")) {
        step = std::stoul(name.substr(5, name.size() - 10));
      } else {
        continue;
      }
      if (!best || step > best_step) best = entry.path(), best_step = step;
    }
    return best;
  }

 private:
  const ExperimentConfig& c_;
  RunPaths paths_;
  std::optional<Splits> splits_;
  std::optional<SubwordTokenizer> tokenizer_;
  std::optional<DirectionDataset> train_, val_;
  std::optional<std::size_t> parameter_count_;
};

std::vector<std::string> relative_files(const fs::path& dir, const fs::path& root) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) out.push_back(fs::relative(e.path(), root).string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

RunRecord run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  if (config.matrix) throw Error("run_experiment: matrix configs run through run_matrix");
  Runner runner(config);
  const RunPaths& paths = runner.paths();
  fs::create_directories(paths.root);
  write_json(paths.config(), config.resolved);

  json record = json::object();
  if (fs::exists(paths.record())) {
    try {
      record = json::parse(read_file(paths.record()));
    } catch (const std::exception&) {
      record = json::object();
    }
  }
  json stages = record.value("stages", json::array());
  std::string timing = "stage,seconds\n";
  std::optional<std::string> failed_stage, error;

  for (Stage stage : options.stages) {
    const auto t0 = std::chrono::steady_clock::now();
    spdlog::info("[{}] stage {}", config.name, to_string(stage));
    try {
      switch (stage) {
        case Stage::kTokenizer: runner.run_tokenizer(); break;
        case Stage::kDataset: runner.run_dataset(); break;
        case Stage::kTrain: runner.run_train(options.resume); break;
        case Stage::kEvaluate: runner.run_evaluate(); break;
      }
    } catch (const std::exception& e) {
      failed_stage = std::string(to_string(stage));
      error = e.what();
      spdlog::error("[{}] stage {} failed: {}", config.name, to_string(stage), e.what());
    }
    timing += fmt::format("{},{:.3f}\n", to_string(stage),
                          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (failed_stage) break;
    const std::string name(to_string(stage));
    if (std::find(stages.begin(), stages.end(), name) == stages.end()) stages.push_back(name);
  }
  write_file(paths.timing(), timing);

  record["name"] = config.name;
  record["status"] = failed_stage ? "failed" : "completed";
  record["failed_stage"] = failed_stage ? json(*failed_stage) : json(nullptr);
  record["error"] = error ? json(*error) : json(nullptr);
  record["stages"] = stages;
  record["architecture"] = std::string(to_string(config.model.architecture));
  record["regime"] = std::string(to_string(config.directions.regime));
  json dirs = json::array();
  for (const auto& d : config.directions.directions()) dirs.push_back(direction_name(d));
  record["directions"] = dirs;
  record["version"] = kSoftwareVersion;
  record["seed"] = config.seed;
  record["timestamp"] = utc_timestamp();
  record["config"] = fs::relative(paths.config(), paths.root).string();
  record["tokenizer"] = fs::exists(paths.tokenizer()) ? json(paths.tokenizer().filename().string()) : json(nullptr);
  record["checkpoints"] = relative_files(paths.checkpoints(), paths.root);
  record["loss_log"] = fs::exists(paths.loss_log()) ? json(paths.loss_log().filename().string()) : json(nullptr);
  record["metrics"] = fs::exists(paths.metrics()) ? json(paths.metrics().filename().string()) : json(nullptr);
  record["hypotheses"] = relative_files(paths.hypotheses(), paths.root);
  if (auto n = runner.parameter_count()) record["parameter_count"] = *n;
  write_json(paths.record(), record);

  RunRecord out;
  out.name = config.name;
  out.status = record["status"];
  out.failed_stage = failed_stage;
  out.error = error;
  out.architecture = record["architecture"];
  out.regime = record["regime"];
  out.seed = config.seed;
  out.json = record;
  return out;
}

MatrixResult run_matrix(const ExperimentConfig& config, const fs::path& executable, std::size_t jobs) {
  if (!config.matrix) throw Error("run_matrix: config has no matrix");
  jobs = std::max<std::size_t>(1, jobs);
  MatrixResult result;
  result.root = config.output_dir / config.name;
  fs::create_directories(result.root);
  write_json(result.root / "config.resolved.json", config.resolved);

  struct Child {
    MatrixCell cell;
    fs::path dir;
    pid_t pid = -1;
    int exit_code = -1;
  };
  std::vector<Child> children;
  for (const auto& cell : config.matrix->enabled_cells()) {
    const ExperimentConfig child = cell_config(config, cell);
    Child ch{cell, result.root / cell.name()};
    fs::create_directories(ch.dir);
    write_json(ch.dir / "config.json", child.resolved);
    children.push_back(ch);
  }

  auto spawn = [&](Child& ch) {
    const std::string exe = executable.string(), cfg = (ch.dir / "config.json").string(),
                      out = result.root.string(), log = (ch.dir / "run.log").string();
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_addopen(&actions, 1, log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    posix_spawn_file_actions_adddup2(&actions, 1, 2);
    std::vector<std::string> args{exe, "run", "--config", cfg, "--out", out};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    const int rc = posix_spawn(&ch.pid, exe.c_str(), &actions, nullptr, argv.data(), environ);
    posix_spawn_file_actions_destroy(&actions);
    if (rc != 0) {
      spdlog::error("could not start {}: {}", ch.cell.name(), std::strerror(rc));
      ch.pid = -1;
      ch.exit_code = 127;
      return false;
    }
    spdlog::info("started {} (pid {})", ch.cell.name(), ch.pid);
    return true;
  };

  std::deque<std::size_t> pending;
  for (std::size_t i = 0; i < children.size(); ++i) pending.push_back(i);
  std::size_t running = 0;
  while (!pending.empty() || running > 0) {
    while (running < jobs && !pending.empty()) {
      if (spawn(children[pending.front()])) ++running;
      pending.pop_front();
    }
    if (running == 0) continue;
    int status = 0;
    const pid_t pid = waitpid(-1, &status, 0);
    if (pid < 0) {
      if (errno == EINTR) continue;
      throw Error(fmt::format("waitpid failed: {}", std::strerror(errno)));
    }
    for (auto& ch : children) {
      if (ch.pid != pid) continue;
      ch.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
      spdlog::info("{} finished with exit code {}", ch.cell.name(), ch.exit_code);
      --running;
    }
  }

  json grid = json::array();
  for (auto a : config.matrix->architectures)
    for (auto r : config.matrix->regimes) {
      const MatrixCell cell{a, r};
      const auto enabled = config.matrix->enabled_cells();
      grid.push_back({{"name", cell.name()},
                      {"architecture", std::string(to_string(a))},
                      {"regime", std::string(to_string(r))},
                      {"enabled", std::find(enabled.begin(), enabled.end(), cell) != enabled.end()}});
    }
  json runs = json::array();
  result.all_completed = true;
  for (const auto& ch : children) {
    const bool ok = ch.exit_code == 0;
    result.all_completed = result.all_completed && ok;
    runs.push_back({{"name", ch.cell.name()},
                    {"architecture", std::string(to_string(ch.cell.architecture))},
                    {"regime", std::string(to_string(ch.cell.regime))},
                    {"dir", ch.cell.name()},
                    {"exit_code", ch.exit_code},
                    {"status", ok ? "completed" : "failed"}});
  }
  result.record = {{"name", config.name}, {"version", kSoftwareVersion},  {"seed", config.seed},
                   {"timestamp", utc_timestamp()}, {"cells", grid}, {"runs", runs},
                   {"status", result.all_completed ? "completed" : "failed"}};
  write_json(result.root / "matrix_record.json", result.record);

  const std::vector<fs::path> dirs{result.root};
  const ReportTable table = build_report_table(dirs);
  write_file(result.root / "report.csv", to_csv(table));
  write_file(result.root / "report.txt", to_text(table));
  return result;
}

}  // namespace mtlab
