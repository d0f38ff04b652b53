#include "topicnet/params.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>

namespace topicnet {

namespace {

constexpr char kMagic[] = "TOPICNETv1";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

  std::uint64_t uint(std::size_t width) {
    need(width);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += width;
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError("checkpoint truncated at byte offset " + std::to_string(pos_));
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void ParameterSet::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  index_[name] = values_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
}

Tensor& ParameterSet::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return values_[it->second];
}

const Tensor& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return values_[it->second];
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

BoundParameters::BoundParameters(Tape& tape, const ParameterSet& params, bool requires_grad)
    : tape_(tape) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    vars_.push_back(tape.leaf(params.values()[i], requires_grad));
    index_[params.names()[i]] = i;
  }
}

const Var& BoundParameters::operator()(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("parameter not bound: " + name);
  return vars_[it->second];
}

std::vector<Tensor> BoundParameters::gradients() const {
  std::vector<Tensor> out;
  out.reserve(vars_.size());
  for (const Var& v : vars_) out.push_back(tape_.grad(v));
  return out;
}

std::string encode_checkpoint(const ParameterSet& params) {
  std::string out(kMagic, kMagicLen);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names()[i];
    const Tensor& t = params.values()[i];
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(out, d);
    for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

ParameterSet decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagicLen || bytes.compare(0, kMagicLen, kMagic) != 0)
    throw FormatError("checkpoint magic missing at byte offset 0");
  Reader r(bytes);
  r.str(kMagicLen);
  ParameterSet params;
  while (!r.done()) {
    const std::size_t name_len = r.uint(4);
    const std::string name = r.str(name_len);
    const std::size_t rank = r.uint(4);
    if (rank > 8) throw FormatError("implausible tensor rank at byte offset " + std::to_string(r.pos()));
    Shape shape;
    for (std::size_t k = 0; k < rank; ++k) {
      const std::uint64_t d = r.uint(8);
      if (d == 0) throw FormatError("zero extent at byte offset " + std::to_string(r.pos()));
      shape.push_back(d);
    }
    std::vector<double> values(numel(shape));
    for (auto& v : values) v = std::bit_cast<double>(r.uint(8));
    params.add(name, Tensor(std::move(shape), std::move(values)));
  }
  return params;
}

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(params);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace topicnet
