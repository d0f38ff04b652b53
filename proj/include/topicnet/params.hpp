#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "topicnet/autograd.hpp"
#include "topicnet/tensor.hpp"

namespace topicnet {

// Named, insertion-ordered parameter tensors.
class ParameterSet {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& values() { return values_; }
  const std::vector<Tensor>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  std::size_t scalar_count() const;

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Parameters placed on a tape for one forward pass.
class BoundParameters {
 public:
  BoundParameters(Tape& tape, const ParameterSet& params, bool requires_grad);
  const Var& operator()(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  // Gradients in ParameterSet order.
  std::vector<Tensor> gradients() const;
  const std::vector<Var>& vars() const { return vars_; }

 private:
  Tape& tape_;
  std::vector<Var> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Checkpoint container: magic "TOPICNETv1", then one record per tensor until EOF:
// u32 name length, name bytes, u32 rank, rank x u64 extents, raw little-endian f64 values.
std::string encode_checkpoint(const ParameterSet& params);
ParameterSet decode_checkpoint(const std::string& bytes);
void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_checkpoint(const std::filesystem::path& path);

}  // namespace topicnet
