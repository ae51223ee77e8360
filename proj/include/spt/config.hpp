// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spt/errors.hpp"
#include "spt/model.hpp"

namespace spt {

// Human-editable key/value config with sections. Every field has a default;
// unknown sections or keys are rejected so typos cannot silently fall back.
// The resolved document is serialized into every run manifest.
struct ExperimentConfig {
  // [experiment]
  std::uint64_t root_seed = 1;

  // [engine] calibrated desk-scale architecture
  int layers = 2;
  int dim = 64;
  int heads = 2;
  int ff = 256;
  int max_seq = 128;
  int vocab = 512;

  // [adapters]
  int rank = 8;
  double alpha = 16.0;

  // [training] base-model pretraining curriculum
  int pretrain_n_plain = 64;
  int pretrain_n_per_topic = 8;
  int pretrain_steps = 800;
  int pretrain_batch = 8;
  double pretrain_lr = 1e-3;

  // [organism]
  int organism_n_per_condition = 64;
  int organism_steps = 300;
  int organism_batch = 8;
  double organism_lr = 5e-4;
  double organism_denial_fraction = 0.1;

  // [datagen]
  int datagen_n_per_topic = 24;
  bool datagen_include_swapped = true;

  // [persona]
  int persona_steps = 800;
  int persona_batch = 8;
  double persona_lr = 2e-3;
  std::string persona_variant = "mask";  // mask | no_mask

  // [eval]
  int eval_n_per_condition = 500;

  // [probes]
  std::vector<double> probe_alphas{0.01, 0.1, 1.0, 10.0, 100.0, 1000.0};
  double probe_val_fraction = 0.3;

  // [ablation]
  int ablation_n_per_topic = 10;
  int ablation_eval_n_per_topic = 6;
  int ablation_steps = 400;

  Arch arch() const { return Arch{layers, dim, heads, ff, max_seq, vocab}; }

  void validate() const {
    arch().validate();
    if (persona_variant != "mask" && persona_variant != "no_mask")
      fail(Errc::ConfigInvalid, "persona.variant must be mask or no_mask");
    if (!(probe_val_fraction > 0.0 && probe_val_fraction < 1.0))
      fail(Errc::ConfigInvalid, "probes.val_fraction must be in (0, 1)");
    for (double a : probe_alphas)
      if (!(a > 0.0)) fail(Errc::ConfigInvalid, "probes.alphas must be > 0");
  }

  std::string to_ini() const {
    std::ostringstream os;
    os << "[experiment]\n";
    os << "root_seed = " << root_seed << "\n\n";
    os << "[engine]\n";
    os << "layers = " << layers << "\ndim = " << dim << "\nheads = " << heads
       << "\nff = " << ff << "\nmax_seq = " << max_seq << "\nvocab = " << vocab << "\n\n";
    os << "[adapters]\n";
    os << "rank = " << rank << "\nalpha = " << alpha << "\n\n";
    os << "[training]\n";
    os << "n_plain = " << pretrain_n_plain << "\nn_per_topic = " << pretrain_n_per_topic
       << "\nsteps = " << pretrain_steps << "\nbatch = " << pretrain_batch
       << "\nlr = " << pretrain_lr << "\n\n";
    os << "[organism]\n";
    os << "n_per_condition = " << organism_n_per_condition << "\nsteps = " << organism_steps
       << "\nbatch = " << organism_batch << "\nlr = " << organism_lr
       << "\ndenial_fraction = " << organism_denial_fraction << "\n\n";
    os << "[datagen]\n";
    os << "n_per_topic = " << datagen_n_per_topic
       << "\ninclude_swapped = " << (datagen_include_swapped ? "true" : "false") << "\n\n";
    os << "[persona]\n";
    os << "steps = " << persona_steps << "\nbatch = " << persona_batch
       << "\nlr = " << persona_lr << "\nvariant = " << persona_variant << "\n\n";
    os << "[eval]\n";
    os << "n_per_condition = " << eval_n_per_condition << "\n\n";
    os << "[probes]\n";
    os << "alphas =";
    for (double a : probe_alphas) os << " " << a;
    os << "\nval_fraction = " << probe_val_fraction << "\n\n";
    os << "[ablation]\n";
    os << "n_per_topic = " << ablation_n_per_topic
       << "\neval_n_per_topic = " << ablation_eval_n_per_topic
       << "\nsteps = " << ablation_steps << "\n";
    return os.str();
  }

  nlohmann::json to_json() const { return nlohmann::json::parse(to_json_str()); }

  static ExperimentConfig parse(const std::string& text) {
    ExperimentConfig c;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto semi = line.find(';');
      if (semi != std::string::npos) line.erase(semi);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          fail(Errc::ConfigInvalid, "malformed section at line " + std::to_string(lineno));
        section = line.substr(1, line.size() - 2);
        static const std::set<std::string> known{"experiment", "engine", "adapters", "training",
                                                "organism", "datagen", "persona", "eval",
                                                "probes", "ablation"};
        if (!known.count(section)) fail(Errc::ConfigInvalid, "unknown section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        fail(Errc::ConfigInvalid, "expected key = value at line " + std::to_string(lineno));
      const std::string key = trim(line.substr(0, eq));
      const std::string val = trim(line.substr(eq + 1));
      c.set(section, key, val);
    }
    c.validate();
    return c;
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

  static bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail(Errc::ConfigInvalid, "expected boolean, got '" + v + "'");
  }

  void set(const std::string& section, const std::string& key, const std::string& val) {
    auto num = [&] { return std::stod(val); };
    auto integer = [&] { return std::stoi(val); };
    auto unknown = [&]() -> void {
      fail(Errc::ConfigInvalid, "unknown key '" + key + "' in section [" + section + "]");
    };
    try {
      if (section == "experiment") {
        if (key == "root_seed") root_seed = std::stoull(val);
        else unknown();
      } else if (section == "engine") {
        if (key == "layers") layers = integer();
        else if (key == "dim") dim = integer();
        else if (key == "heads") heads = integer();
        else if (key == "ff") ff = integer();
        else if (key == "max_seq") max_seq = integer();
        else if (key == "vocab") vocab = integer();
        else unknown();
      } else if (section == "adapters") {
        if (key == "rank") rank = integer();
        else if (key == "alpha") alpha = num();
        else unknown();
      } else if (section == "training") {
        if (key == "n_plain") pretrain_n_plain = integer();
        else if (key == "n_per_topic") pretrain_n_per_topic = integer();
        else if (key == "steps") pretrain_steps = integer();
        else if (key == "batch") pretrain_batch = integer();
        else if (key == "lr") pretrain_lr = num();
        else unknown();
      } else if (section == "organism") {
        if (key == "n_per_condition") organism_n_per_condition = integer();
        else if (key == "steps") organism_steps = integer();
        else if (key == "batch") organism_batch = integer();
        else if (key == "lr") organism_lr = num();
        else if (key == "denial_fraction") organism_denial_fraction = num();
        else unknown();
      } else if (section == "datagen") {
        if (key == "n_per_topic") datagen_n_per_topic = integer();
        else if (key == "include_swapped") datagen_include_swapped = parse_bool(val);
        else unknown();
      } else if (section == "persona") {
        if (key == "steps") persona_steps = integer();
        else if (key == "batch") persona_batch = integer();
        else if (key == "lr") persona_lr = num();
        else if (key == "variant") persona_variant = val;
        else unknown();
      } else if (section == "eval") {
        if (key == "n_per_condition") eval_n_per_condition = integer();
        else unknown();
      } else if (section == "probes") {
        if (key == "alphas") {
          probe_alphas.clear();
          std::istringstream as(val);
          double a;
          while (as >> a) probe_alphas.push_back(a);
          if (probe_alphas.empty()) fail(Errc::ConfigInvalid, "probes.alphas is empty");
        } else if (key == "val_fraction") {
          probe_val_fraction = num();
        } else {
          unknown();
        }
      } else if (section == "ablation") {
        if (key == "n_per_topic") ablation_n_per_topic = integer();
        else if (key == "eval_n_per_topic") ablation_eval_n_per_topic = integer();
        else if (key == "steps") ablation_steps = integer();
        else unknown();
      } else {
        fail(Errc::ConfigInvalid, "key '" + key + "' appears before any section");
      }
    } catch (const std::invalid_argument&) {
      fail(Errc::ConfigInvalid, "bad value for " + section + "." + key + ": '" + val + "'");
    } catch (const std::out_of_range&) {
      fail(Errc::ConfigInvalid, "value out of range for " + section + "." + key);
    }
  }

  std::string to_json_str() const {
    nlohmann::json j{
        {"experiment", {{"root_seed", root_seed}}},
        {"engine",
         {{"layers", layers},
          {"dim", dim},
          {"heads", heads},
          {"ff", ff},
          {"max_seq", max_seq},
          {"vocab", vocab}}},
        {"adapters", {{"rank", rank}, {"alpha", alpha}}},
        {"training",
         {{"n_plain", pretrain_n_plain},
          {"n_per_topic", pretrain_n_per_topic},
          {"steps", pretrain_steps},
          {"batch", pretrain_batch},
          {"lr", pretrain_lr}}},
        {"organism",
         {{"n_per_condition", organism_n_per_condition},
          {"steps", organism_steps},
          {"batch", organism_batch},
          {"lr", organism_lr},
          {"denial_fraction", organism_denial_fraction}}},
        {"datagen",
         {{"n_per_topic", datagen_n_per_topic},
          {"include_swapped", datagen_include_swapped}}},
        {"persona",
         {{"steps", persona_steps},
          {"batch", persona_batch},
          {"lr", persona_lr},
          {"variant", persona_variant}}},
        {"eval", {{"n_per_condition", eval_n_per_condition}}},
        {"probes", {{"alphas", probe_alphas}, {"val_fraction", probe_val_fraction}}},
        {"ablation",
         {{"n_per_topic", ablation_n_per_topic},
          {"eval_n_per_topic", ablation_eval_n_per_topic},
          {"steps", ablation_steps}}}};
    return j.dump();
  }
};

}  // namespace spt
