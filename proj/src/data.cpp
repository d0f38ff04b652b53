#include "topicnet/data.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "topicnet/keyvalue.hpp"
#include "topicnet/netpbm.hpp"
#include "topicnet/parallel.hpp"

namespace topicnet::data {

namespace fs = std::filesystem;

namespace {

constexpr double kMinForeground = 0.02;
constexpr double kMaxForeground = 0.5;

struct Placement {
  ShapeKind kind;
  double cx, cy, radius, angle;
};

bool inside(const Placement& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  const double c = std::cos(s.angle), sn = std::sin(s.angle);
  const double u = (c * dx + sn * dy) / s.radius;
  const double v = (-sn * dx + c * dy) / s.radius;
  const double r2 = u * u + v * v;
  switch (s.kind) {
    case ShapeKind::kDisc:
      return r2 <= 1.0;
    case ShapeKind::kSquare:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case ShapeKind::kTriangle: {
      const double k = std::numbers::sqrt3;
      return v >= -0.5 && k * u + v <= 1.0 && -k * u + v <= 1.0;
    }
    case ShapeKind::kCross:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case ShapeKind::kRing:
      return r2 <= 1.0 && r2 >= 0.36;
    case ShapeKind::kBar:
      return std::abs(u) <= 1.0 && std::abs(v) <= 0.35;
  }
  return false;
}

// Pixel-centre rasterisation into a 0/1 footprint.
std::vector<std::uint8_t> rasterize(const Placement& s, std::size_t size) {
  std::vector<std::uint8_t> out(size * size, 0);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      out[y * size + x] = inside(s, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5) ? 1 : 0;
  return out;
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double f = h * 6.0;
  const int i = static_cast<int>(std::floor(f)) % 6;
  const double frac = f - std::floor(f);
  const double p = v * (1 - s), q = v * (1 - s * frac), t = v * (1 - s * (1 - frac));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

Placement random_placement(ShapeKind kind, double size, double rmin, double rmax, Rng& rng) {
  Placement p;
  p.kind = kind;
  p.radius = rng.uniform(rmin, rmax) * size;
  const double margin = 0.85 * p.radius;
  p.cx = rng.uniform(margin, size - margin);
  p.cy = rng.uniform(margin, size - margin);
  p.angle = rng.uniform(0.0, std::numbers::pi);
  return p;
}

struct Canvas {
  std::size_t size;
  Tensor image;

  void paint(const std::vector<std::uint8_t>& footprint, std::size_t category, Rng& rng) {
    const double hue = category_hue(category) + rng.uniform(-0.02, 0.02);
    const auto rgb = hsv_to_rgb(hue, rng.uniform(0.75, 0.95), rng.uniform(0.75, 0.95));
    const std::size_t plane = size * size;
    for (std::size_t i = 0; i < plane; ++i) {
      if (!footprint[i]) continue;
      const double shade = rng.uniform(-0.03, 0.03);
      for (std::size_t c = 0; c < 3; ++c) image[c * plane + i] = rgb[c] + shade;
    }
  }
};

Tensor textured_background(std::size_t size, Rng& rng) {
  const std::size_t plane = size * size;
  Tensor img(Shape{3, size, size});
  const double base = rng.uniform(0.25, 0.55);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = rng.uniform(-0.05, 0.05);
  const double fx = rng.uniform(0.05, 0.3), fy = rng.uniform(0.05, 0.3);
  const double ph1 = rng.uniform(0.0, 2 * std::numbers::pi), ph2 = rng.uniform(0.0, 2 * std::numbers::pi);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double wave = 0.05 * std::sin(fx * static_cast<double>(x) + ph1) * std::cos(fy * static_cast<double>(y) + ph2);
      const double grain = rng.uniform(-0.06, 0.06);
      for (std::size_t c = 0; c < 3; ++c) img[c * plane + y * size + x] = base + tint[c] + wave + grain;
    }
  return img;
}

bool overlaps(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& occupied, std::size_t size) {
  // One-pixel guard band around occupied pixels.
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      if (!a[y * size + x]) continue;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(size) || xx >= static_cast<long>(size)) continue;
          if (occupied[static_cast<std::size_t>(yy) * size + static_cast<std::size_t>(xx)]) return true;
        }
    }
  return false;
}

std::size_t count(const std::vector<std::uint8_t>& v) { return static_cast<std::size_t>(std::count(v.begin(), v.end(), 1)); }

void generate_image(const DatasetConfig& cfg, std::size_t category, Rng& rng, std::size_t index, Tensor& image,
                    Tensor& mask, std::vector<std::size_t>& distractors) {
  const std::size_t size = cfg.image_size, plane = size * size;
  const double sz = static_cast<double>(size);
  Canvas canvas{size, textured_background(size, rng)};

  std::vector<std::uint8_t> target;
  for (int attempt = 0;; ++attempt) {
    if (attempt == 200) throw ConfigError("data: could not place a target within the foreground bounds");
    target = rasterize(random_placement(category_shape(category), sz, 0.16, 0.34, rng), size);
    const double frac = static_cast<double>(count(target)) / static_cast<double>(plane);
    if (frac >= kMinForeground && frac <= kMaxForeground) break;
  }
  canvas.paint(target, category, rng);

  // Even images carry 1-2 distractors, odd images 0-2, so half the images are guaranteed to
  // contain a noise object.
  const std::size_t wanted = index % 2 == 0 ? 1 + rng.below(2) : rng.below(3);
  std::vector<std::uint8_t> occupied = target;
  for (std::size_t d = 0; d < wanted; ++d) {
    std::size_t other = rng.below(cfg.categories - 1);
    if (other >= category) ++other;
    for (int attempt = 0; attempt < 200; ++attempt) {
      // Shrink the candidate as attempts accumulate so crowded images still fit one.
      const double shrink = 1.0 - 0.6 * attempt / 200.0;
      auto fp = rasterize(random_placement(category_shape(other), sz, 0.10 * shrink, 0.22 * shrink, rng), size);
      if (count(fp) < 4 || overlaps(fp, occupied, size)) continue;
      canvas.paint(fp, other, rng);
      for (std::size_t i = 0; i < plane; ++i) occupied[i] |= fp[i];
      distractors.push_back(other);
      break;
    }
  }
  image = std::move(canvas.image);
  for (double& v : image.data()) v = netpbm::dequantize(netpbm::quantize(v));
  mask = Tensor(Shape{1, size, size});
  for (std::size_t i = 0; i < plane; ++i) mask[i] = target[i];
}

fs::path split_dir(const fs::path& root, const std::string& split) { return root / split; }

void make_dirs(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

std::string image_name(std::size_t i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img%02zu.%s", i, ext);
  return buf;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t parse_size(const std::string& v, const std::string& key, const std::string& source) {
  try {
    std::size_t pos = 0;
    const unsigned long long n = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ConfigError(source + ": bad integer for " + key + ": '" + v + "'");
  }
}

std::array<double, 3> parse_triple(const std::string& v, const std::string& key, const std::string& source) {
  auto parts = split_list(v);
  if (parts.size() != 3) throw ConfigError(source + ": " + key + " needs three values");
  std::array<double, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) {
    try {
      out[i] = std::stod(parts[i]);
    } catch (const std::exception&) {
      throw ConfigError(source + ": bad number in " + key);
    }
  }
  return out;
}

}  // namespace

void DatasetConfig::validate() const {
  if (image_size == 0 || image_size % 16 != 0) throw ConfigError("data: image size must be a positive multiple of 16");
  if (categories < 4) throw ConfigError("data: at least 4 categories are required");
  if (images_per_group == 0) throw ConfigError("data: images_per_group must be >= 1");
  if (images_per_group > 100) throw ConfigError("data: images_per_group must be <= 100");
}

ShapeKind category_shape(std::size_t category) { return static_cast<ShapeKind>(category % kShapeKinds); }

double category_hue(std::size_t category) {
  // Golden-angle spacing keeps neighbouring categories, and the pairs sharing a shape, apart.
  const double h = 0.05 + 0.3819660112501051 * static_cast<double>(category);
  return h - std::floor(h);
}

std::string category_name(std::size_t category) {
  static const char* names[kShapeKinds] = {"disc", "square", "triangle", "cross", "ring", "bar"};
  return std::string(names[category % kShapeKinds]) + std::to_string(category / kShapeKinds);
}

std::string group_dir_name(std::size_t id, std::size_t category) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "group%03zu_cat%zu", id, category);
  return buf;
}

std::string ImageGroup::dir_name() const { return group_dir_name(id, category); }

ImageGroup generate_group(const DatasetConfig& cfg, std::uint64_t seed, std::size_t group_id) {
  cfg.validate();
  ImageGroup g;
  g.id = group_id;
  g.category = group_id % cfg.categories;
  g.images.resize(cfg.images_per_group);
  g.masks.resize(cfg.images_per_group);
  g.distractors.resize(cfg.images_per_group);
  for (std::size_t n = 0; n < cfg.images_per_group; ++n) {
    Rng rng = Rng::keyed(seed, {group_id, n});
    generate_image(cfg, g.category, rng, n, g.images[n], g.masks[n], g.distractors[n]);
  }
  return g;
}

ChannelStats compute_stats(const std::vector<ImageGroup>& groups) {
  ChannelStats s;
  std::array<double, 3> sum{}, sq{};
  double count = 0.0;
  for (const auto& g : groups)
    for (const Tensor& img : g.images) {
      const std::size_t plane = img.size() / 3;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i) sum[c] += img[c * plane + i];
      count += static_cast<double>(plane);
    }
  if (count == 0.0) return s;
  for (std::size_t c = 0; c < 3; ++c) s.mean[c] = sum[c] / count;
  for (const auto& g : groups)
    for (const Tensor& img : g.images) {
      const std::size_t plane = img.size() / 3;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = img[c * plane + i] - s.mean[c];
          sq[c] += d * d;
        }
    }
  for (std::size_t c = 0; c < 3; ++c) s.std[c] = std::max(std::sqrt(sq[c] / count), 1e-12);
  return s;
}

const std::vector<std::string>& Manifest::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  throw ConfigError("unknown split '" + name + "' (expected train or val)");
}

Manifest generate_dataset(const DatasetConfig& cfg, std::uint64_t seed, const fs::path& root) {
  cfg.validate();
  const std::size_t total = cfg.train_groups + cfg.val_groups;
  std::vector<ImageGroup> groups(total);
  parallel_for(total, [&](std::size_t g) { groups[g] = generate_group(cfg, seed, g); });

  Manifest m;
  m.config = cfg;
  m.seed = seed;
  m.stats = compute_stats(groups);
  for (std::size_t g = 0; g < total; ++g) {
    const std::string split = g < cfg.train_groups ? "train" : "val";
    (split == "train" ? m.train : m.val).push_back(groups[g].dir_name());
    const fs::path dir = split_dir(root, split) / groups[g].dir_name();
    make_dirs(dir / "img");
    make_dirs(dir / "gt");
    for (std::size_t n = 0; n < groups[g].images.size(); ++n) {
      netpbm::write_ppm(dir / "img" / image_name(n, "ppm"), groups[g].images[n]);
      netpbm::write_pgm(dir / "gt" / image_name(n, "pgm"), groups[g].masks[n]);
    }
  }
  netpbm::write_file(root / "manifest.txt", encode_manifest(m));
  return m;
}

std::string encode_manifest(const Manifest& m) {
  std::ostringstream out;
  out << "# synthetic co-saliency dataset\n";
  out << "seed=" << m.seed << "\n";
  out << "image_size=" << m.config.image_size << "\n";
  out << "images_per_group=" << m.config.images_per_group << "\n";
  out << "categories=" << m.config.categories << "\n";
  std::vector<std::string> names;
  for (std::size_t c = 0; c < m.config.categories; ++c) names.push_back(category_name(c));
  out << "category_names=" << join(names) << "\n";
  out << "train=" << join(m.train) << "\n";
  out << "val=" << join(m.val) << "\n";
  out << "mean=" << fmt(m.stats.mean[0]) << "," << fmt(m.stats.mean[1]) << "," << fmt(m.stats.mean[2]) << "\n";
  out << "std=" << fmt(m.stats.std[0]) << "," << fmt(m.stats.std[1]) << "," << fmt(m.stats.std[2]) << "\n";
  return out.str();
}

Manifest decode_manifest(const std::string& text, const std::string& source) {
  Manifest m;
  bool have_mean = false, have_std = false;
  for (const auto& [k, v] : parse_key_values(text, source)) {
    if (k == "seed") m.seed = parse_size(v, k, source);
    else if (k == "image_size") m.config.image_size = parse_size(v, k, source);
    else if (k == "images_per_group") m.config.images_per_group = parse_size(v, k, source);
    else if (k == "categories") m.config.categories = parse_size(v, k, source);
    else if (k == "category_names") continue;
    else if (k == "train") m.train = split_list(v);
    else if (k == "val") m.val = split_list(v);
    else if (k == "mean") m.stats.mean = parse_triple(v, k, source), have_mean = true;
    else if (k == "std") m.stats.std = parse_triple(v, k, source), have_std = true;
    else throw ConfigError(source + ": unknown manifest key '" + k + "'");
  }
  if (!have_mean || !have_std) throw ConfigError(source + ": manifest lacks mean/std");
  m.config.train_groups = m.train.size();
  m.config.val_groups = m.val.size();
  return m;
}

Manifest read_manifest(const fs::path& root) {
  const fs::path p = root / "manifest.txt";
  return decode_manifest(netpbm::read_file(p), p.string());
}

ImageGroup load_group(const fs::path& dir) {
  ImageGroup g;
  const std::string name = dir.filename().string();
  unsigned long id = 0, cat = 0;
  if (std::sscanf(name.c_str(), "group%lu_cat%lu", &id, &cat) == 2) {
    g.id = id;
    g.category = cat;
  }
  if (!fs::is_directory(dir / "img")) throw IoError("missing image directory " + (dir / "img").string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir / "img"))
    if (e.path().extension() == ".ppm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    g.images.push_back(netpbm::read(f));
    const fs::path gt = dir / "gt" / (f.stem().string() + ".pgm");
    g.masks.push_back(fs::exists(gt) ? netpbm::read(gt) : Tensor());
    g.distractors.emplace_back();
  }
  return g;
}

std::vector<ImageGroup> load_split(const fs::path& root, const Manifest& m, const std::string& split) {
  std::vector<ImageGroup> out;
  for (const auto& name : m.split(split)) out.push_back(load_group(split_dir(root, split) / name));
  return out;
}

Tensor normalize(const Tensor& image, const ChannelStats& stats) {
  if (image.shape().size() != 3 || image.shape()[0] != 3) throw ShapeError("normalize expects [3,H,W]");
  Tensor out = image;
  const std::size_t plane = image.size() / 3;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = (image[c * plane + i] - stats.mean[c]) / stats.std[c];
  return out;
}

Tensor hflip(const Tensor& t) {
  const Shape& s = t.shape();
  if (s.size() != 3) throw ShapeError("hflip expects [C,H,W]");
  Tensor out(s);
  const std::size_t w = s[2];
  for (std::size_t row = 0; row < s[0] * s[1]; ++row)
    for (std::size_t x = 0; x < w; ++x) out[row * w + x] = t[row * w + (w - 1 - x)];
  return out;
}

namespace {

// Maps output pixel centre (x, y) to its source location under a rotation by `degrees`.
struct InverseRotation {
  double c, s, cx, cy;
  InverseRotation(double degrees, std::size_t h, std::size_t w)
      : c(std::cos(degrees * std::numbers::pi / 180.0)),
        s(std::sin(degrees * std::numbers::pi / 180.0)),
        cx(0.5 * static_cast<double>(w) - 0.5),
        cy(0.5 * static_cast<double>(h) - 0.5) {}
  std::pair<double, double> operator()(std::size_t x, std::size_t y) const {
    const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
    return {c * dx + s * dy + cx, -s * dx + c * dy + cy};
  }
};

}  // namespace

Tensor rotate_bilinear(const Tensor& t, double degrees) {
  const Shape& s = t.shape();
  if (s.size() != 3) throw ShapeError("rotate expects [C,H,W]");
  const std::size_t h = s[1], w = s[2], plane = h * w;
  const InverseRotation inv(degrees, h, w);
  Tensor out(s);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      auto [sx, sy] = inv(x, y);
      sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
      sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
      const auto x0 = static_cast<std::size_t>(std::floor(sx)), y0 = static_cast<std::size_t>(std::floor(sy));
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::size_t c = 0; c < s[0]; ++c) {
        const double* p = t.data().data() + c * plane;
        const double top = p[y0 * w + x0] * (1 - fx) + p[y0 * w + x1] * fx;
        const double bot = p[y1 * w + x0] * (1 - fx) + p[y1 * w + x1] * fx;
        out[c * plane + y * w + x] = top * (1 - fy) + bot * fy;
      }
    }
  return out;
}

Tensor rotate_nearest(const Tensor& t, double degrees) {
  const Shape& s = t.shape();
  if (s.size() != 3) throw ShapeError("rotate expects [C,H,W]");
  const std::size_t h = s[1], w = s[2], plane = h * w;
  const InverseRotation inv(degrees, h, w);
  Tensor out(s, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const auto [sx, sy] = inv(x, y);
      const double rx = std::round(sx), ry = std::round(sy);
      if (rx < 0 || ry < 0 || rx > static_cast<double>(w - 1) || ry > static_cast<double>(h - 1)) continue;
      const auto ix = static_cast<std::size_t>(rx), iy = static_cast<std::size_t>(ry);
      for (std::size_t c = 0; c < s[0]; ++c) out[c * plane + y * w + x] = t[c * plane + iy * w + ix];
    }
  return out;
}

Augmented augment(const Tensor& image, const Tensor& mask, const ChannelStats& stats, Rng& rng) {
  Augmented a;
  a.flipped = rng.bernoulli(0.5);
  a.degrees = rng.uniform(-kMaxRotationDegrees, kMaxRotationDegrees);
  Tensor img = normalize(image, stats);
  Tensor m = mask;
  if (a.flipped) {
    img = hflip(img);
    m = hflip(m);
  }
  a.image = rotate_bilinear(img, a.degrees);
  a.mask = rotate_nearest(m, a.degrees);
  return a;
}

Tensor stack(const std::vector<Tensor>& items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  Shape s = items.front().shape();
  const std::size_t per = items.front().size();
  Shape out_shape{items.size()};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Tensor out(out_shape);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != s) throw ShapeError("stack: mismatched shapes");
    std::copy(items[i].data().begin(), items[i].data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

}  // namespace topicnet::data
