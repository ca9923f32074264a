#include "saccader/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "saccader/errors.hpp"

namespace saccader {

namespace {

struct KeyDef {
  std::string name;
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

int64_t parse_i64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int64_t out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const uint64_t out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
}

double parse_f64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<int64_t> parse_i64_list(const std::string& key, const std::string& v) {
  std::vector<int64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(parse_i64(key, item));
  }
  if (out.empty()) throw ConfigError("config: key '" + key + "' expects a comma list of ints");
  return out;
}

std::string fmt_i64(int64_t v) { return std::to_string(v); }
std::string fmt_u64(uint64_t v) { return std::to_string(v); }

std::string fmt_f64(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

std::string fmt_i64_list(const std::vector<int64_t>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

#define KEY_I64(field)                                                            \
  KeyDef {                                                                        \
    #field, [](Config& c, const std::string& v) { c.field = parse_i64(#field, v); }, \
        [](const Config& c) { return fmt_i64(c.field); }                          \
  }
#define KEY_U64(field)                                                            \
  KeyDef {                                                                        \
    #field, [](Config& c, const std::string& v) { c.field = parse_u64(#field, v); }, \
        [](const Config& c) { return fmt_u64(c.field); }                          \
  }
#define KEY_F64(field)                                                            \
  KeyDef {                                                                        \
    #field, [](Config& c, const std::string& v) { c.field = parse_f64(#field, v); }, \
        [](const Config& c) { return fmt_f64(c.field); }                          \
  }
#define KEY_BOOL(field)                                                            \
  KeyDef {                                                                         \
    #field, [](Config& c, const std::string& v) { c.field = parse_bool(#field, v); }, \
        [](const Config& c) { return fmt_bool(c.field); }                          \
  }
#define KEY_STR(field)                                                  \
  KeyDef {                                                              \
    #field, [](Config& c, const std::string& v) { c.field = v; },       \
        [](const Config& c) { return c.field; }                         \
  }

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = {
      KEY_STR(run_dir),
      KEY_STR(data_dir),
      KEY_I64(num_classes),
      KEY_I64(image_h),
      KEY_I64(image_w),
      KEY_I64(distractors),
      KEY_F64(noise_amp),
      KEY_F64(background),
      KEY_F64(glyph_level),
      KEY_I64(fragment_size),
      KEY_I64(train_size),
      KEY_I64(dev_size),
      KEY_I64(test_size),
      KEY_I64(rf),
      KEY_I64(patch_stride),
      KEY_I64(enc_c1),
      KEY_I64(enc_c2),
      KEY_I64(d_repr),
      KEY_I64(d_what),
      KEY_I64(where_hidden),
      KEY_I64(d_where),
      KEY_I64(d_mix),
      KEY_F64(lambda_repr),
      KEY_F64(nu_loc),
      KEY_I64(t_pretrain),
      KEY_I64(t_joint),
      KEY_I64(samples),
      KEY_F64(lr_stage1),
      KEY_F64(lr_stage2),
      KEY_F64(lr_stage3),
      KEY_I64(batch_size),
      KEY_I64(epochs_stage1),
      KEY_I64(epochs_stage2),
      KEY_I64(epochs_stage3),
      KEY_I64(warmup_epochs),
      KEY_F64(momentum),
      KEY_U64(seed),
      KEY_BOOL(reinforce_into_repr),
      KEY_BOOL(bn_train_stats_in_sampling),
      KEY_BOOL(augment_random_crop),
      KEY_I64(crop_margin),
      KEY_STR(joint_init),
      KEY_F64(occl_lr),
      KEY_I64(occl_epochs),
      KEY_I64(occl_warmup_epochs),
      KEY_STR(eval_split),
      KeyDef{"eval_ks",
             [](Config& c, const std::string& v) { c.eval_ks = parse_i64_list("eval_ks", v); },
             [](const Config& c) { return fmt_i64_list(c.eval_ks); }},
      KEY_I64(traces_limit),
      KEY_F64(pgd_eps),
      KEY_F64(pgd_step),
      KEY_I64(pgd_iters),
      KEY_I64(pgd_examples),
  };
  return defs;
}

#undef KEY_I64
#undef KEY_U64
#undef KEY_F64
#undef KEY_BOOL
#undef KEY_STR

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

ModelConfig Config::model_config() const {
  ModelConfig m;
  m.image_h = image_h;
  m.image_w = image_w;
  m.channels = 1;
  m.rf = rf;
  m.patch_stride = patch_stride;
  m.enc_c1 = enc_c1;
  m.enc_c2 = enc_c2;
  m.d_repr = d_repr;
  m.d_what = d_what;
  m.where_hidden = where_hidden;
  m.d_where = d_where;
  m.d_mix = d_mix;
  m.num_classes = num_classes;
  return m;
}

TrainConfig Config::train_config() const {
  TrainConfig t;
  t.lambda_repr = lambda_repr;
  t.nu_loc = nu_loc;
  t.t_pretrain = t_pretrain;
  t.t_joint = t_joint;
  t.samples = samples;
  t.lr_stage1 = lr_stage1;
  t.lr_stage2 = lr_stage2;
  t.lr_stage3 = lr_stage3;
  t.batch_size = batch_size;
  t.epochs_stage1 = epochs_stage1;
  t.epochs_stage2 = epochs_stage2;
  t.epochs_stage3 = epochs_stage3;
  t.warmup_epochs = warmup_epochs;
  t.momentum = momentum;
  t.seed = seed;
  t.reinforce_into_repr = reinforce_into_repr;
  t.bn_train_stats_in_sampling = bn_train_stats_in_sampling;
  t.augment_random_crop = augment_random_crop;
  t.crop_margin = crop_margin;
  return t;
}

SyntheticSpec Config::synthetic_spec() const {
  SyntheticSpec s;
  s.num_classes = num_classes;
  s.image_h = image_h;
  s.image_w = image_w;
  s.channels = 1;
  s.distractors = distractors;
  s.noise_amp = noise_amp;
  s.background = background;
  s.glyph_level = glyph_level;
  s.fragment_size = fragment_size;
  s.train_size = train_size;
  s.dev_size = dev_size;
  s.test_size = test_size;
  s.seed = seed;
  s.rf = rf;
  s.patch_stride = patch_stride;
  return s;
}

void Config::validate() const {
  try {
    model_config().validate();
    train_config().validate(model_config());
    synthetic_spec().validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (joint_init != "stage2" && joint_init != "stage1") {
    throw ConfigError("config: joint_init must be 'stage2' or 'stage1'");
  }
  if (eval_split != "train" && eval_split != "dev" && eval_split != "test") {
    throw ConfigError("config: eval_split must be train, dev, or test");
  }
  const int64_t P = model_config().num_locations();
  for (int64_t k : eval_ks) {
    if (k < 1 || k > P) {
      throw ConfigError("config: eval_ks entry " + std::to_string(k) + " out of [1, " +
                        std::to_string(P) + "]");
    }
  }
  if (pgd_eps <= 0 || pgd_step <= 0 || pgd_iters < 0 || pgd_examples < 1) {
    throw ConfigError("config: bad PGD settings");
  }
  if (traces_limit < 1) throw ConfigError("config: traces_limit must be >= 1");
  if (occl_lr <= 0 || occl_epochs < 1 || occl_warmup_epochs >= occl_epochs) {
    throw ConfigError("config: bad occlusion classifier settings");
  }
  if (run_dir.empty()) throw ConfigError("config: run_dir must not be empty");
}

std::vector<std::string> config_key_names() {
  std::vector<std::string> names;
  for (const auto& d : key_defs()) names.push_back(d.name);
  return names;
}

Config parse_config_text(const std::string& text, const std::string& origin) {
  Config cfg;
  std::map<std::string, const KeyDef*> by_name;
  for (const auto& d : key_defs()) by_name[d.name] = &d;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: " + origin + ":" + std::to_string(lineno) +
                        ": expected 'key = value', got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = by_name.find(key);
    if (it == by_name.end()) {
      std::string valid;
      for (const auto& d : key_defs()) valid += (valid.empty() ? "" : ", ") + d.name;
      throw ConfigError("config: " + origin + ":" + std::to_string(lineno) + ": unknown key '" +
                        key + "'; valid keys: " + valid);
    }
    it->second->set(cfg, value);
  }
  return cfg;
}

Config parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str(), path);
}

std::string canonical_config(const Config& cfg) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& d : key_defs()) pairs.emplace_back(d.name, d.get(cfg));
  std::sort(pairs.begin(), pairs.end());
  std::string out;
  for (const auto& [k, v] : pairs) out += k + "=" + v + "\n";
  return out;
}

uint64_t fnv1a64(const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 1469598103934665603ULL;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string fnv1a64_hex(const void* data, size_t len) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(data, len)));
  return buf;
}

std::string config_hash_hex(const Config& cfg) {
  const std::string canon = canonical_config(cfg);
  return fnv1a64_hex(canon.data(), canon.size());
}

}  // namespace saccader
