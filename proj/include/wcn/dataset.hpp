#pragma once
// Two-class datasets with +-1 labels: MNIST IDX, CIFAR-10 binary and a
// synthetic Gaussian source. Inputs are globally standardized with train
// statistics.

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wcn/parallel.hpp"
#include "wcn/tensor.hpp"

namespace wcn {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(const void* data, std::size_t size) {
    EVP_DigestUpdate(ctx_, data, size);
    return *this;
  }
  Sha256& update(const std::string& s) { return update(s.data(), s.size()); }
  template <typename T>
  Sha256& update_value(T v) {
    // Little-endian byte order regardless of host.
    unsigned char buf[sizeof(T)];
    std::uint64_t bits = 0;
    static_assert(sizeof(T) <= 8);
    std::memcpy(&bits, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
    return update(buf, sizeof(T));
  }

  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    std::ostringstream os;
    for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
  }

 private:
  EVP_MD_CTX* ctx_;
};

inline std::string sha256_hex(const std::string& bytes) { return Sha256().update(bytes).hex(); }

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

struct Standardization {
  double mean = 0.0;
  double std = 1.0;
};

struct Dataset {
  Batch inputs;
  std::vector<double> labels;
  /// Original class id -> +-1.
  std::map<int, double> class_map;
  Shape shape;
  std::string digest;

  std::size_t size() const { return inputs.size(); }

  std::string compute_digest() const {
    Sha256 h;
    h.update_value<std::int32_t>(shape.height).update_value<std::int32_t>(shape.width);
    h.update_value<std::int32_t>(shape.channels).update_value<std::uint64_t>(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      h.update_value<double>(labels[i]);
      for (double v : inputs[i].data) h.update_value<double>(v);
    }
    return h.hex();
  }
};

/// Global mean and population standard deviation over every value in `d`.
inline Standardization fit_standardization(const Dataset& d) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& x : d.inputs) {
    for (double v : x.data) sum += v;
    count += x.data.size();
  }
  if (count == 0) return {};
  const double mean = sum / double(count);
  double sq = 0.0;
  for (const auto& x : d.inputs)
    for (double v : x.data) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / double(count));
  return {mean, sd > 0.0 ? sd : 1.0};
}

inline void apply_standardization(Dataset& d, const Standardization& s) {
  for (auto& x : d.inputs)
    for (double& v : x.data) v = (v - s.mean) / s.std;
  d.digest = d.compute_digest();
}

struct DatasetRequest {
  std::string source = "synthetic";  // mnist | cifar10 | synthetic
  std::array<int, 2> classes{0, 1};
  int per_class_train = 10;
  int per_class_test = 10;
  std::uint64_t seed = 0;
  Shape shape{4, 4, 1};  // synthetic only
  int n_train = 20;      // synthetic only
  int n_test = 20;       // synthetic only
};

inline nlohmann::json to_json(const DatasetRequest& r) {
  nlohmann::json j{{"source", r.source}, {"seed", r.seed}};
  if (r.source == "synthetic") {
    j["shape"] = {r.shape.height, r.shape.width, r.shape.channels};
    j["n_train"] = r.n_train;
    j["n_test"] = r.n_test;
  } else {
    j["classes"] = {r.classes[0], r.classes[1]};
    j["per_class_train"] = r.per_class_train;
    j["per_class_test"] = r.per_class_test;
  }
  return j;
}

struct DatasetPair {
  Dataset train;
  Dataset test;
  Standardization standardization;
  Standardization raw;  // statistics of the unstandardized train split
  /// Source file name -> SHA-256.
  std::map<std::string, std::string> sources;
  DatasetRequest request;

  nlohmann::json manifest() const {
    auto split = [](const Dataset& d) {
      nlohmann::json cm = nlohmann::json::object();
      for (auto [k, v] : d.class_map) cm[std::to_string(k)] = v;
      return nlohmann::json{{"count", d.size()}, {"digest", d.digest}, {"class_map", cm}};
    };
    return {{"request", to_json(request)},
            {"source_files", sources},
            {"standardization", {{"kind", "global"}, {"mean", standardization.mean}, {"std", standardization.std}}},
            {"train", split(train)},
            {"test", split(test)}};
  }
};

namespace detail {

inline std::uint32_t big_endian_u32(const std::string& bytes, std::size_t off) {
  return (std::uint32_t(std::uint8_t(bytes[off])) << 24) | (std::uint32_t(std::uint8_t(bytes[off + 1])) << 16) |
         (std::uint32_t(std::uint8_t(bytes[off + 2])) << 8) | std::uint32_t(std::uint8_t(bytes[off + 3]));
}

inline std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

inline void check_size(const std::string& name, const std::string& bytes, std::size_t need) {
  if (bytes.size() < need)
    throw DataError(name + ": truncated file, expected " + std::to_string(need) + " bytes but found " +
                    std::to_string(bytes.size()));
}

inline std::vector<int> parse_idx_labels(const std::string& name, const std::string& bytes) {
  check_size(name, bytes, 8);
  const auto magic = big_endian_u32(bytes, 0);
  if (magic != 0x801) throw DataError(name + ": bad magic " + hex32(magic) + ", expected 0x00000801");
  const std::size_t count = big_endian_u32(bytes, 4);
  check_size(name, bytes, 8 + count);
  std::vector<int> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = std::uint8_t(bytes[8 + i]);
  return out;
}

/// Returns (count, rows, cols) and checks the payload length.
inline std::array<std::size_t, 3> parse_idx_images_header(const std::string& name, const std::string& bytes) {
  check_size(name, bytes, 16);
  const auto magic = big_endian_u32(bytes, 0);
  if (magic != 0x803) throw DataError(name + ": bad magic " + hex32(magic) + ", expected 0x00000803");
  const std::size_t count = big_endian_u32(bytes, 4), rows = big_endian_u32(bytes, 8), cols = big_endian_u32(bytes, 12);
  check_size(name, bytes, 16 + count * rows * cols);
  return {count, rows, cols};
}

/// Shuffles indices with `seed` and keeps the first `per_class` of each
/// requested class, in shuffled order.
inline std::vector<std::size_t> select_two_classes(const std::vector<int>& labels, std::array<int, 2> classes,
                                                   int per_class, std::uint64_t seed, const std::string& where) {
  std::vector<std::size_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 gen(seed);
  std::shuffle(order.begin(), order.end(), gen);
  std::array<int, 2> taken{0, 0};
  std::vector<std::size_t> out;
  for (std::size_t i : order)
    for (int c = 0; c < 2; ++c)
      if (labels[i] == classes[std::size_t(c)] && taken[std::size_t(c)] < per_class) {
        ++taken[std::size_t(c)];
        out.push_back(i);
        break;
      }
  for (int c = 0; c < 2; ++c)
    if (taken[std::size_t(c)] < per_class)
      throw DataError(where + ": insufficient examples of class " + std::to_string(classes[std::size_t(c)]) +
                      ": requested " + std::to_string(per_class) + ", available " +
                      std::to_string(taken[std::size_t(c)]));
  return out;
}

inline void check_classes(std::array<int, 2> classes, int limit) {
  for (int c : classes)
    if (c < 0 || c >= limit)
      throw DataError("unknown class id " + std::to_string(c) + " (valid 0.." + std::to_string(limit - 1) + ")");
  if (classes[0] == classes[1]) throw DataError("the two classes must differ");
}

inline std::map<int, double> class_map(std::array<int, 2> classes) {
  return {{classes[0], 1.0}, {classes[1], -1.0}};
}

inline DatasetPair finish(Dataset train, Dataset test, const DatasetRequest& req,
                          std::map<std::string, std::string> sources) {
  DatasetPair out;
  out.raw = fit_standardization(train);
  out.standardization = out.raw;
  apply_standardization(train, out.standardization);
  apply_standardization(test, out.standardization);
  out.train = std::move(train);
  out.test = std::move(test);
  out.sources = std::move(sources);
  out.request = req;
  return out;
}

}  // namespace detail

/// Reads train-*/t10k-* IDX files from `dir`. Pixels are scaled to [0,1]
/// before standardization; classes[0] maps to +1.
inline DatasetPair load_mnist(const std::filesystem::path& dir, std::array<int, 2> classes, int per_class_train,
                              int per_class_test, std::uint64_t seed) {
  detail::check_classes(classes, 10);
  DatasetRequest req;
  req.source = "mnist";
  req.classes = classes;
  req.per_class_train = per_class_train;
  req.per_class_test = per_class_test;
  req.seed = seed;
  std::map<std::string, std::string> sources;
  auto split = [&](const std::string& prefix, int per_class, std::uint64_t split_seed) {
    const std::string img_name = prefix + "-images-idx3-ubyte", lab_name = prefix + "-labels-idx1-ubyte";
    const std::string img = read_file(dir / img_name), lab = read_file(dir / lab_name);
    sources[img_name] = sha256_hex(img);
    sources[lab_name] = sha256_hex(lab);
    const auto [count, rows, cols] = detail::parse_idx_images_header(img_name, img);
    const auto labels = detail::parse_idx_labels(lab_name, lab);
    if (labels.size() != count)
      throw DataError(lab_name + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(count) +
                      " images");
    Dataset d;
    d.shape = {int(rows), int(cols), 1};
    d.class_map = detail::class_map(classes);
    for (std::size_t i : detail::select_two_classes(labels, classes, per_class, split_seed, prefix + " split")) {
      Tensor t(d.shape);
      const std::size_t base = 16 + i * rows * cols;
      for (std::size_t k = 0; k < rows * cols; ++k) t.data[k] = std::uint8_t(img[base + k]) / 255.0;
      d.inputs.push_back(std::move(t));
      d.labels.push_back(d.class_map.at(labels[i]));
    }
    return d;
  };
  Dataset train = split("train", per_class_train, derive_seed(seed, 0));
  Dataset test = split("t10k", per_class_test, derive_seed(seed, 1));
  return detail::finish(std::move(train), std::move(test), req, std::move(sources));
}

/// Reads data_batch_{1..5}.bin and test_batch.bin from `dir`.
inline DatasetPair load_cifar10(const std::filesystem::path& dir, std::array<int, 2> classes, int per_class_train,
                                int per_class_test, std::uint64_t seed) {
  detail::check_classes(classes, 10);
  constexpr std::size_t record = 3073;
  DatasetRequest req;
  req.source = "cifar10";
  req.classes = classes;
  req.per_class_train = per_class_train;
  req.per_class_test = per_class_test;
  req.seed = seed;
  std::map<std::string, std::string> sources;
  auto split = [&](const std::vector<std::string>& files, int per_class, std::uint64_t split_seed,
                   const std::string& where) {
    std::vector<std::string> blobs;
    std::vector<std::pair<std::size_t, std::size_t>> where_of;  // (blob, offset)
    std::vector<int> labels;
    for (const auto& name : files) {
      blobs.push_back(read_file(dir / name));
      const std::string& b = blobs.back();
      sources[name] = sha256_hex(b);
      if (b.size() % record != 0)
        throw DataError(name + ": record-size mismatch at byte offset " +
                        std::to_string(b.size() - b.size() % record) + " (records are 3073 bytes, file has " +
                        std::to_string(b.size()) + ")");
      for (std::size_t off = 0; off < b.size(); off += record) {
        const int label = std::uint8_t(b[off]);
        if (label > 9)
          throw DataError(name + ": unknown class id " + std::to_string(label) + " at byte offset " +
                          std::to_string(off));
        labels.push_back(label);
        where_of.push_back({blobs.size() - 1, off});
      }
    }
    Dataset d;
    d.shape = {32, 32, 3};
    d.class_map = detail::class_map(classes);
    for (std::size_t i : detail::select_two_classes(labels, classes, per_class, split_seed, where)) {
      const auto [blob, off] = where_of[i];
      const std::string& b = blobs[blob];
      Tensor t(d.shape);
      for (int c = 0; c < 3; ++c)
        for (int r = 0; r < 32; ++r)
          for (int s = 0; s < 32; ++s)
            t.at(r, s, c) = std::uint8_t(b[off + 1 + std::size_t(c) * 1024 + std::size_t(r) * 32 + std::size_t(s)]) / 255.0;
      d.inputs.push_back(std::move(t));
      d.labels.push_back(d.class_map.at(labels[i]));
    }
    return d;
  };
  Dataset train = split({"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
                         "data_batch_5.bin"},
                        per_class_train, derive_seed(seed, 0), "train split");
  Dataset test = split({"test_batch.bin"}, per_class_test, derive_seed(seed, 1), "test split");
  return detail::finish(std::move(train), std::move(test), req, std::move(sources));
}

/// Standard-normal inputs and uniformly random +-1 labels.
inline DatasetPair synthetic(Shape shape, int n_train, int n_test, std::uint64_t seed) {
  if (n_train < 0 || n_test < 0) throw DataError("synthetic: negative example count");
  DatasetRequest req;
  req.source = "synthetic";
  req.shape = shape;
  req.n_train = n_train;
  req.n_test = n_test;
  req.seed = seed;
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  auto make = [&](int count) {
    Dataset d;
    d.shape = shape;
    d.class_map = {{0, 1.0}, {1, -1.0}};
    for (int i = 0; i < count; ++i) {
      Tensor t(shape);
      for (double& v : t.data) v = normal(gen);
      d.inputs.push_back(std::move(t));
      d.labels.push_back(coin(gen) ? 1.0 : -1.0);
    }
    return d;
  };
  Dataset train = make(n_train);
  Dataset test = make(n_test);
  return detail::finish(std::move(train), std::move(test), req, {});
}

/// WCN_DATA_ROOT, or a DataError when unset.
inline std::filesystem::path data_root() {
  const char* env = std::getenv("WCN_DATA_ROOT");
  if (!env || !*env) throw DataError("WCN_DATA_ROOT is not set");
  return env;
}

/// Dispatches on request.source. MNIST files live in root/mnist, CIFAR-10
/// batches in root/cifar-10-batches-bin.
inline DatasetPair load_dataset(const DatasetRequest& r, const std::filesystem::path& root) {
  if (r.source == "synthetic") return synthetic(r.shape, r.n_train, r.n_test, r.seed);
  if (r.source == "mnist") return load_mnist(root / "mnist", r.classes, r.per_class_train, r.per_class_test, r.seed);
  if (r.source == "cifar10")
    return load_cifar10(root / "cifar-10-batches-bin", r.classes, r.per_class_train, r.per_class_test, r.seed);
  throw DataError("unknown dataset source '" + r.source + "'");
}

inline DatasetRequest parse_dataset_request(const nlohmann::json& j, const std::string& path = "dataset") {
  auto fail = [&](const std::string& field, const std::string& msg) {
    throw DataError(path + (field.empty() ? "" : "." + field) + ": " + msg);
  };
  if (!j.is_object()) fail("", "expected an object");
  DatasetRequest r;
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const std::vector<std::string> known{"source",          "classes", "per_class_train", "per_class_test",
                                                "seed",            "shape",   "n_train",         "n_test"};
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) fail(it.key(), "unknown field");
  }
  auto integer = [&](const char* key, int lo) {
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < lo)
      fail(key, "expected an integer >= " + std::to_string(lo));
    return v.get<int>();
  };
  if (!j.contains("source") || !j["source"].is_string()) fail("source", "required string");
  r.source = j["source"].get<std::string>();
  if (r.source != "mnist" && r.source != "cifar10" && r.source != "synthetic")
    fail("source", "must be one of mnist, cifar10, synthetic");
  if (j.contains("seed")) {
    const auto& v = j["seed"];
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0))
      fail("seed", "expected a nonnegative integer");
    r.seed = v.get<std::uint64_t>();
  }
  if (r.source == "synthetic") {
    if (j.contains("shape")) {
      const auto& s = j["shape"];
      if (!s.is_array() || s.size() != 3) fail("shape", "expected [height, width, channels]");
      for (std::size_t k = 0; k < 3; ++k)
        if (!s[k].is_number_integer() || s[k].get<int>() <= 0)
          fail("shape[" + std::to_string(k) + "]", "expected a positive integer");
      r.shape = {s[0].get<int>(), s[1].get<int>(), s[2].get<int>()};
    }
    if (j.contains("n_train")) r.n_train = integer("n_train", 0);
    if (j.contains("n_test")) r.n_test = integer("n_test", 0);
  } else {
    if (j.contains("classes")) {
      const auto& c = j["classes"];
      if (!c.is_array() || c.size() != 2 || !c[0].is_number_integer() || !c[1].is_number_integer())
        fail("classes", "expected two integer class ids");
      r.classes = {c[0].get<int>(), c[1].get<int>()};
    }
    if (j.contains("per_class_train")) r.per_class_train = integer("per_class_train", 1);
    if (j.contains("per_class_test")) r.per_class_test = integer("per_class_test", 0);
  }
  return r;
}

}  // namespace wcn
