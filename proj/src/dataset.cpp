#include "npath/dataset.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "json.hpp"
#include "npath/error.hpp"
#include "npath/rng.hpp"

namespace npath {
namespace {

constexpr int kSize = static_cast<int>(kToyImageSize);

class Canvas {
 public:
  explicit Canvas(double ink) : ink_(ink), px_(kSize * kSize, 0.0) {}

  void dot(int r, int c) {
    if (r >= 0 && r < kSize && c >= 0 && c < kSize) px_[r * kSize + c] = ink_;
  }
  void rect(int r0, int c0, int h, int w) {
    for (int r = r0; r < r0 + h; ++r)
      for (int c = c0; c < c0 + w; ++c) dot(r, c);
  }
  std::vector<double>& pixels() { return px_; }

 private:
  double ink_;
  std::vector<double> px_;
};

int pick(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

void draw_class(std::size_t label, Rng& rng, Canvas& cv) {
  switch (label) {
    case 0: {  // thin horizontal bar
      const int len = pick(rng, 8, 14);
      cv.rect(pick(rng, 1, 14), pick(rng, 0, kSize - len), 1, len);
      break;
    }
    case 1: {  // thick horizontal bar
      const int len = pick(rng, 8, 14);
      cv.rect(pick(rng, 1, 12), pick(rng, 0, kSize - len), 3, len);
      break;
    }
    case 2: {  // thin vertical bar
      const int len = pick(rng, 8, 14);
      cv.rect(pick(rng, 0, kSize - len), pick(rng, 1, 14), len, 1);
      break;
    }
    case 3: {  // thick vertical bar
      const int len = pick(rng, 8, 14);
      cv.rect(pick(rng, 0, kSize - len), pick(rng, 1, 12), len, 3);
      break;
    }
    case 4: {  // plus-shaped cross
      const int arm = pick(rng, 3, 5);
      const int r = pick(rng, arm, kSize - 1 - arm), c = pick(rng, arm, kSize - 1 - arm);
      cv.rect(r, c - arm, 1, 2 * arm + 1);
      cv.rect(r - arm, c, 2 * arm + 1, 1);
      break;
    }
    case 5: {  // diagonal, top-left to bottom-right
      const int len = pick(rng, 7, 12);
      const int r = pick(rng, 0, kSize - len), c = pick(rng, 0, kSize - len);
      for (int i = 0; i < len; ++i) cv.dot(r + i, c + i);
      break;
    }
    case 6: {  // anti-diagonal
      const int len = pick(rng, 7, 12);
      const int r = pick(rng, 0, kSize - len), c = pick(rng, len - 1, kSize - 1);
      for (int i = 0; i < len; ++i) cv.dot(r + i, c - i);
      break;
    }
    case 7: {  // filled blob
      const int s = pick(rng, 4, 7);
      cv.rect(pick(rng, 0, kSize - s), pick(rng, 0, kSize - s), s, s);
      break;
    }
    case 8: {  // square outline
      const int s = pick(rng, 6, 10);
      const int r = pick(rng, 0, kSize - s), c = pick(rng, 0, kSize - s);
      cv.rect(r, c, 1, s);
      cv.rect(r + s - 1, c, 1, s);
      cv.rect(r, c, s, 1);
      cv.rect(r, c + s - 1, s, 1);
      break;
    }
    case 9: {  // checkerboard texture patch
      const int s = pick(rng, 6, 10);
      const int r0 = pick(rng, 0, kSize - s), c0 = pick(rng, 0, kSize - s);
      for (int r = r0; r < r0 + s; ++r)
        for (int c = c0; c < c0 + s; ++c)
          if (((r - r0) / 2 + (c - c0) / 2) % 2 == 0) cv.dot(r, c);
      break;
    }
    default:
      throw IndexError("toy class " + std::to_string(label) + " does not exist");
  }
}

}  // namespace

const std::vector<std::string>& toy_class_names() {
  static const std::vector<std::string> names = {"hbar_thin", "hbar_thick", "vbar_thin", "vbar_thick", "cross",
                                                 "diag",      "antidiag",   "blob",      "ring",       "checker"};
  return names;
}

Sample generate_toy_sample(std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed(seed, index));
  const std::size_t label = index % kToyClasses;
  Canvas cv(rng.uniform(0.6, 1.0));
  draw_class(label, rng, cv);
  auto& px = cv.pixels();
  for (auto& v : px) v += 0.05 * rng.normal();
  return {Tensor({1, kToyImageSize, kToyImageSize}, std::move(px)), label};
}

std::vector<Sample> generate_toy_dataset(std::uint64_t seed, std::size_t count) {
  if (count < 1) throw InvalidParameter("dataset count must be >= 1");
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_toy_sample(seed, i));
  return out;
}

void write_dataset_ndjson(std::ostream& os, const std::vector<Sample>& samples) {
  for (const auto& s : samples) {
    nlohmann::ordered_json j;
    j["y"] = s.y;
    j["x"] = s.x.values();
    os << j.dump() << '\n';
  }
}

std::vector<Sample> read_dataset_ndjson(std::istream& is, std::size_t channels, std::size_t image_size) {
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  const std::size_t want = channels * image_size * image_size;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("y") || !j.contains("x") || !j["x"].is_array()) {
      throw FormatError("dataset line " + std::to_string(lineno) + ": expected {\"y\": int, \"x\": [...]}");
    }
    auto x = j["x"].get<std::vector<double>>();
    if (x.size() != want) {
      throw FormatError("dataset line " + std::to_string(lineno) + ": " + std::to_string(x.size()) +
                        " pixels, expected " + std::to_string(want));
    }
    out.push_back({Tensor({channels, image_size, image_size}, std::move(x)), j["y"].get<std::size_t>()});
  }
  return out;
}

void save_dataset(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream os(path);
  if (!os) throw UsageError("cannot write dataset to " + path);
  write_dataset_ndjson(os, samples);
}

std::vector<Sample> load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read dataset " + path);
  return read_dataset_ndjson(is);
}

std::vector<std::size_t> class_histogram(const std::vector<Sample>& samples, std::size_t classes) {
  std::vector<std::size_t> h(classes, 0);
  for (const auto& s : samples) {
    if (s.y >= classes) throw IndexError("label " + std::to_string(s.y) + " out of range");
    ++h[s.y];
  }
  return h;
}

}  // namespace npath
