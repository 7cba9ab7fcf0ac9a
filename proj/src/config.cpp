#include "camforge/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "camforge/error.hpp"

namespace camforge {
namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
};

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
  fail(ErrorCode::InvalidArgument, "config key '" + key + "': cannot parse '" + value + "' as " + want);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) bad_value(key, s, "a number");
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) bad_value(key, s, "a non-negative integer");
  return v;
}

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <typename T>
Field real(std::string section, std::string key, T PipelineConfig::*group, double T::*member) {
  const std::string full = section + "." + key;
  return {section, key, [=](const PipelineConfig& c) { return format_double(c.*group.*member); },
          [=](PipelineConfig& c, const std::string& s) { c.*group.*member = parse_double(full, s); }};
}

template <typename T, typename U>
Field count(std::string section, std::string key, T PipelineConfig::*group, U T::*member) {
  const std::string full = section + "." + key;
  return {section, key,
          [=](const PipelineConfig& c) { return std::to_string(c.*group.*member); },
          [=](PipelineConfig& c, const std::string& s) {
            c.*group.*member = static_cast<U>(parse_uint(full, s));
          }};
}

const std::vector<Field>& fields() {
  using attn::VceConfig;
  using adapter::TrainConfig;
  using cache::RetrievalConfig;
  static const std::vector<Field> table = {
      count("vce", "groups", &PipelineConfig::vce, &VceConfig::groups),
      count("vce", "iterations", &PipelineConfig::vce, &VceConfig::iterations),
      real("vce", "epsilon", &PipelineConfig::vce, &VceConfig::epsilon),
      real("vce", "alpha", &PipelineConfig::vce, &VceConfig::alpha),
      count("vce", "layers", &PipelineConfig::vce, &VceConfig::layers),
      count("vce", "cluster_seed", &PipelineConfig::vce, &VceConfig::cluster_seed),
      count("vce", "cluster_max_iters", &PipelineConfig::vce, &VceConfig::cluster_max_iters),
      {"vce", "refine",
       [](const PipelineConfig& c) {
         return std::string(c.vce.refine == attn::RefineMode::Linear ? "linear" : "reinforced");
       },
       [](PipelineConfig& c, const std::string& s) {
         if (s == "linear")
           c.vce.refine = attn::RefineMode::Linear;
         else if (s == "reinforced")
           c.vce.refine = attn::RefineMode::Reinforced;
         else
           bad_value("vce.refine", s, "linear|reinforced");
       }},
      count("retrieval", "centroids", &PipelineConfig::retrieval, &RetrievalConfig::centroids),
      real("retrieval", "beta", &PipelineConfig::retrieval, &RetrievalConfig::beta),
      real("retrieval", "eta", &PipelineConfig::retrieval, &RetrievalConfig::eta),
      {"retrieval", "neg_mode",
       [](const PipelineConfig& c) { return cache::to_string(c.retrieval.neg_mode); },
       [](PipelineConfig& c, const std::string& s) {
         c.retrieval.neg_mode = cache::neg_mode_from_string(s);
       }},
      count("retrieval", "seed", &PipelineConfig::retrieval, &RetrievalConfig::seed),
      real("train", "lr", &PipelineConfig::train, &TrainConfig::lr),
      real("train", "weight_decay", &PipelineConfig::train, &TrainConfig::weight_decay),
      real("train", "adam_beta1", &PipelineConfig::train, &TrainConfig::adam_beta1),
      real("train", "adam_beta2", &PipelineConfig::train, &TrainConfig::adam_beta2),
      real("train", "adam_eps", &PipelineConfig::train, &TrainConfig::adam_eps),
      count("train", "iterations", &PipelineConfig::train, &TrainConfig::iterations),
      real("train", "gamma", &PipelineConfig::train, &TrainConfig::gamma),
      count("train", "prompts", &PipelineConfig::train, &TrainConfig::prompts),
      real("train", "prompt_init_scale", &PipelineConfig::train, &TrainConfig::prompt_init_scale),
      count("train", "seed", &PipelineConfig::train, &TrainConfig::seed),
      {"pipeline", "bg_threshold",
       [](const PipelineConfig& c) { return format_double(c.bg_threshold); },
       [](PipelineConfig& c, const std::string& s) {
         c.bg_threshold = parse_double("pipeline.bg_threshold", s);
       }},
      {"pipeline", "mode",
       [](const PipelineConfig& c) {
         return std::string(c.mode == PipelineMode::Trained ? "trained" : "training-free");
       },
       [](PipelineConfig& c, const std::string& s) {
         if (s == "trained")
           c.mode = PipelineMode::Trained;
         else if (s == "training-free")
           c.mode = PipelineMode::TrainingFree;
         else
           bad_value("pipeline.mode", s, "training-free|trained");
       }},
  };
  return table;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string unquote(std::string v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

const Field& find_field(std::string_view section, std::string_view key) {
  for (const auto& f : fields())
    if (f.section == section && f.key == key) return f;
  fail(ErrorCode::InvalidArgument, "unknown config key '" + std::string(section) + "." + std::string(key) + "'");
}

}  // namespace

void PipelineConfig::validate() const {
  vce.validate();
  retrieval.validate();
  train.validate();
  if (!(bg_threshold > 0.0 && bg_threshold < 1.0))
    fail(ErrorCode::InvalidArgument, "pipeline.bg_threshold must lie in (0, 1)");
}

std::string PipelineConfig::to_text() const {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(*this) + "\n";
  }
  return out;
}

std::string PipelineConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : to_text()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

PipelineConfig parse_config(std::string_view text) {
  PipelineConfig cfg;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(ErrorCode::InvalidArgument, "config line " + std::to_string(line_no) + ": bad section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorCode::InvalidArgument, "config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = unquote(trim(std::string_view(line).substr(eq + 1)));
    find_field(section, key).set(cfg, value);
  }
  cfg.validate();
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::UsageError, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void apply_override(PipelineConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    fail(ErrorCode::UsageError, "--set expects key=value, got '" + std::string(assignment) + "'");
  const std::string name = trim(assignment.substr(0, eq));
  const std::string value = unquote(trim(assignment.substr(eq + 1)));
  const auto dot = name.find('.');
  if (dot != std::string::npos) {
    find_field(name.substr(0, dot), name.substr(dot + 1)).set(cfg, value);
    return;
  }
  const Field* match = nullptr;
  for (const auto& f : fields()) {
    if (f.key != name) continue;
    if (match != nullptr)
      fail(ErrorCode::InvalidArgument, "config key '" + name + "' is ambiguous; qualify it");
    match = &f;
  }
  if (match == nullptr) fail(ErrorCode::InvalidArgument, "unknown config key '" + name + "'");
  match->set(cfg, value);
}

void apply_seed(PipelineConfig& cfg, std::uint64_t seed) {
  cfg.vce.cluster_seed = seed;
  cfg.retrieval.seed = seed;
  cfg.train.seed = seed;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.section + "." + f.key);
  return out;
}

}  // namespace camforge
