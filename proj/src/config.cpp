#include "topicnet/config.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include "topicnet/keyvalue.hpp"
#include "topicnet/netpbm.hpp"

namespace topicnet {

namespace {

std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const unsigned long long n = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a non-negative integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError("config: " + key + " expects a boolean (0/1/true/false), got '" + v + "'");
}

std::vector<int> to_layers(const std::string& key, const std::string& v) {
  std::vector<int> out;
  // "1..5" is accepted as shorthand for 1,2,3,4,5.
  if (const auto dots = v.find(".."); dots != std::string::npos) {
    const std::size_t a = to_size(key, trim(v.substr(0, dots))), b = to_size(key, trim(v.substr(dots + 2)));
    for (std::size_t l = a; l <= b; ++l) out.push_back(static_cast<int>(l));
  } else {
    for (const auto& s : split_list(v)) out.push_back(static_cast<int>(to_size(key, s)));
  }
  for (int l : out)
    if (l < 1 || l > 5) throw ConfigError("config: " + key + " layers must be in 1..5");
  std::set<int> uniq(out.begin(), out.end());
  if (uniq.size() != out.size()) throw ConfigError("config: " + key + " lists a layer twice");
  std::sort(out.begin(), out.end());
  return out;
}

std::string join_layers(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  const std::string& v = value;
  if (key == "data_dir") data_dir = v;
  else if (key == "image_size") image_size = to_size(key, v);
  else if (key == "images_per_group") images_per_group = to_size(key, v);
  else if (key == "categories") categories = to_size(key, v);
  else if (key == "train_groups") train_groups = to_size(key, v);
  else if (key == "val_groups") val_groups = to_size(key, v);
  else if (key == "augment") augment = to_bool(key, v);
  else if (key == "channels") {
    auto parts = split_list(v);
    if (parts.size() != 5) throw ConfigError("config: channels needs five values");
    for (std::size_t i = 0; i < 5; ++i) channels[i] = to_size(key, parts[i]);
  } else if (key == "lateral_dim") lateral_dim = to_size(key, v);
  else if (key == "working_res") working_res = to_size(key, v);
  else if (key == "resize_mode") resize_mode = v;
  else if (key == "igp_softmax_before_mean") igp_softmax_before_mean = to_bool(key, v);
  else if (key == "use_igp") use_igp = to_bool(key, v);
  else if (key == "use_gpp") use_gpp = to_bool(key, v);
  else if (key == "use_clm") use_clm = to_bool(key, v);
  else if (key == "groups_per_step") groups_per_step = to_size(key, v);
  else if (key == "positive_layers") positive_layers = to_layers(key, v);
  else if (key == "negative_layers") negative_layers = to_layers(key, v);
  else if (key == "tau") tau = to_double(key, v);
  else if (key == "lambda1") lambda1 = to_double(key, v);
  else if (key == "lambda2") lambda2 = to_double(key, v);
  else if (key == "dice_factor_two") dice_factor_two = to_bool(key, v);
  else if (key == "lr") lr = to_double(key, v);
  else if (key == "epochs") epochs = to_size(key, v);
  else if (key == "steps_per_epoch") steps_per_epoch = to_size(key, v);
  else if (key == "seed") seed = to_size(key, v);
  else throw ConfigError("config: unknown key '" + key + "'");
}

void TrainConfig::validate() const {
  if (image_size == 0 || image_size % 16 != 0) throw ConfigError("config: image_size must be a positive multiple of 16");
  if (images_per_group < 1) throw ConfigError("config: images_per_group (N) must be >= 1");
  if (working_res < 2) throw ConfigError("config: working_res (S) must be >= 2");
  if (use_clm && groups_per_step < 2) throw ConfigError("config: groups_per_step (M) must be >= 2");
  if (groups_per_step < 1) throw ConfigError("config: groups_per_step (M) must be >= 1");
  if (groups_per_step > train_groups) throw ConfigError("config: groups_per_step exceeds train_groups");
  if (lateral_dim < 2) throw ConfigError("config: lateral_dim must be >= 2");
  for (std::size_t c : channels)
    if (c == 0) throw ConfigError("config: channel counts must be positive");
  if (resize_mode != "bilinear" && resize_mode != "area") throw ConfigError("config: resize_mode must be bilinear or area");
  if (std::find(positive_layers.begin(), positive_layers.end(), 5) == positive_layers.end())
    throw ConfigError("config: positive_layers must include the anchor layer 5");
  if (negative_layers.empty()) throw ConfigError("config: negative_layers must not be empty");
  if (!(tau > 0.0)) throw ConfigError("config: tau must be positive");
  if (!(lr > 0.0)) throw ConfigError("config: lr must be positive");
  if (epochs == 0 || steps_per_epoch == 0) throw ConfigError("config: epochs and steps_per_epoch must be >= 1");
  dataset().validate();
}

std::string TrainConfig::echo() const {
  std::ostringstream o;
  o << "data_dir=" << data_dir << "\n"
    << "image_size=" << image_size << "\n"
    << "images_per_group=" << images_per_group << "\n"
    << "categories=" << categories << "\n"
    << "train_groups=" << train_groups << "\n"
    << "val_groups=" << val_groups << "\n"
    << "augment=" << augment << "\n"
    << "channels=" << channels[0] << "," << channels[1] << "," << channels[2] << "," << channels[3] << ","
    << channels[4] << "\n"
    << "lateral_dim=" << lateral_dim << "\n"
    << "working_res=" << working_res << "\n"
    << "resize_mode=" << resize_mode << "\n"
    << "igp_softmax_before_mean=" << igp_softmax_before_mean << "\n"
    << "use_igp=" << use_igp << "\n"
    << "use_gpp=" << use_gpp << "\n"
    << "use_clm=" << use_clm << "\n"
    << "groups_per_step=" << groups_per_step << "\n"
    << "positive_layers=" << join_layers(positive_layers) << "\n"
    << "negative_layers=" << join_layers(negative_layers) << "\n"
    << "tau=" << num(tau) << "\n"
    << "lambda1=" << num(lambda1) << "\n"
    << "lambda2=" << num(lambda2) << "\n"
    << "dice_factor_two=" << dice_factor_two << "\n"
    << "lr=" << num(lr) << "\n"
    << "epochs=" << epochs << "\n"
    << "steps_per_epoch=" << steps_per_epoch << "\n"
    << "seed=" << seed << "\n";
  return o.str();
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t TrainConfig::hash() const { return fnv1a(std::string(kCodeVersion) + "\n" + echo()); }

data::DatasetConfig TrainConfig::dataset() const {
  data::DatasetConfig d;
  d.categories = categories;
  d.train_groups = train_groups;
  d.val_groups = val_groups;
  d.images_per_group = images_per_group;
  d.image_size = image_size;
  return d;
}

std::vector<int> TrainConfig::gated_layers(bool training) const {
  std::set<int> layers{3, 4, 5};
  if (training && use_clm) {
    layers.insert(positive_layers.begin(), positive_layers.end());
    layers.insert(negative_layers.begin(), negative_layers.end());
  }
  return {layers.begin(), layers.end()};
}

TrainConfig load_config(const std::filesystem::path& path) {
  TrainConfig cfg;
  for (const auto& [k, v] : parse_key_values(netpbm::read_file(path), path.string())) cfg.set(k, v);
  return cfg;
}

void apply_overrides(TrainConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    cfg.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
}

}  // namespace topicnet
