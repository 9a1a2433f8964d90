#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "graph_json.hpp"
#include "quantkit/nnexec.hpp"

namespace quantkit {

double Rng::normal() {
  if (spare_) {
    const double v = *spare_;
    spare_.reset();
    return v;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

void Dataset::validate() const {
  if (num_classes == 0) throw ValidationError("dataset has no classes");
  const Shape* shape = nullptr;
  for (const auto& s : samples) {
    if (s.label >= num_classes) throw ValidationError("label " + std::to_string(s.label) + " out of range");
    if (shape && s.input.shape() != *shape) throw ValidationError("dataset samples differ in shape");
    shape = &s.input.shape();
  }
}

Tensor stack(std::span<const Tensor> samples) {
  if (samples.empty()) throw ValidationError("cannot stack zero tensors");
  Shape shape{samples.size()};
  shape.insert(shape.end(), samples[0].shape().begin(), samples[0].shape().end());
  Tensor out(shape, DType::F32);
  const auto per = samples[0].numel();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].shape() != samples[0].shape()) throw ValidationError("cannot stack tensors of different shapes");
    std::copy(samples[i].f32().begin(), samples[i].f32().end(), out.f32().begin() + i * per);
  }
  return out;
}

Batch Dataset::batch(std::span<const std::size_t> indices) const {
  std::vector<Tensor> inputs;
  Batch b;
  for (auto i : indices) {
    inputs.push_back(samples.at(i).input);
    b.labels.push_back(samples.at(i).label);
  }
  b.inputs = stack(inputs);
  return b;
}

Batch Dataset::batch(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> idx;
  for (auto i = begin; i < end; ++i) idx.push_back(i);
  return batch(idx);
}

namespace {

float sample_bilinear(const float* plane, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const auto y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  const double top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
  const double bot = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
  return static_cast<float>(top * (1 - fy) + bot * fy);
}

}  // namespace

Tensor augment(const Tensor& image, Augmentation mode, Rng& rng) {
  if (mode == Augmentation::None) return image;
  if (image.rank() != 3) throw ValidationError("augmentation expects a C,H,W image");
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape(), DType::F32);
  const float* src = image.f32().data();
  float* dst = out.f32().data();
  if (mode == Augmentation::WeakCrop) {
    // zero-pad by one pixel, crop back at a random offset
    const long dy = static_cast<long>(rng.index(3)) - 1, dx = static_cast<long>(rng.index(3)) - 1;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (long i = 0; i < static_cast<long>(h); ++i)
        for (long j = 0; j < static_cast<long>(w); ++j) {
          const long si = i + dy, sj = j + dx;
          const bool inside = si >= 0 && sj >= 0 && si < static_cast<long>(h) && sj < static_cast<long>(w);
          dst[(ch * h + i) * w + j] = inside ? src[(ch * h + si) * w + sj] : 0.0f;
        }
    return out;
  }
  const double frac = rng.uniform(0.6, 1.0);
  const double ch_h = frac * static_cast<double>(h - 1), ch_w = frac * static_cast<double>(w - 1);
  const double oy = rng.uniform(0.0, static_cast<double>(h - 1) - ch_h);
  const double ox = rng.uniform(0.0, static_cast<double>(w - 1) - ch_w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double y = oy + ch_h * static_cast<double>(i) / static_cast<double>(h - 1);
        const double x = ox + ch_w * static_cast<double>(j) / static_cast<double>(w - 1);
        dst[(ch * h + i) * w + j] = sample_bilinear(src + ch * h * w, h, w, y, x);
      }
  return out;
}

namespace {

constexpr std::size_t kShiftMargin = 2;

/// Class template on a canvas larger than the image so samples can be shifted crops of it.
std::vector<float> make_template(Rng& rng, std::size_t channels, std::size_t canvas) {
  std::vector<float> t(channels * canvas * canvas, 0.0f);
  const double fy = rng.uniform(-1.2, 1.2), fx = rng.uniform(-1.2, 1.2), phase = rng.uniform(0, 2 * std::numbers::pi);
  std::vector<double> grating_gain(channels);
  for (auto& gch : grating_gain) gch = rng.uniform(-1.0, 1.0);
  struct Blob {
    double y, x, sigma;
    std::vector<double> gain;
  };
  std::vector<Blob> blobs(3);
  for (auto& b : blobs) {
    b.y = rng.uniform(0, static_cast<double>(canvas));
    b.x = rng.uniform(0, static_cast<double>(canvas));
    b.sigma = rng.uniform(1.0, 2.5);
    b.gain.resize(channels);
    for (auto& gch : b.gain) gch = rng.uniform(-1.5, 1.5);
  }
  double sq = 0.0;
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (std::size_t i = 0; i < canvas; ++i)
      for (std::size_t j = 0; j < canvas; ++j) {
        double v = grating_gain[ch] * std::sin(fy * static_cast<double>(i) + fx * static_cast<double>(j) + phase);
        for (const auto& b : blobs) {
          const double dy = static_cast<double>(i) - b.y, dx = static_cast<double>(j) - b.x;
          v += b.gain[ch] * std::exp(-(dy * dy + dx * dx) / (2 * b.sigma * b.sigma));
        }
        t[(ch * canvas + i) * canvas + j] = static_cast<float>(v);
        sq += v * v;
      }
  const double rms = std::sqrt(sq / static_cast<double>(t.size()));
  for (auto& v : t) v = static_cast<float>(v / (rms > 0 ? rms : 1.0));
  return t;
}

}  // namespace

DatasetSplit make_toy_dataset(const ToyDataOptions& o) {
  if (o.classes == 0 || o.per_class == 0 || o.image_size < 2 || o.channels == 0)
    throw ValidationError("toy dataset arguments must be positive (image size >= 2)");
  if (!(o.eval_fraction >= 0.0 && o.eval_fraction < 1.0)) throw ValidationError("eval fraction must be in [0,1)");
  Rng rng(o.seed);
  const auto canvas = o.image_size + 2 * kShiftMargin;
  std::vector<std::vector<float>> templates;
  for (std::size_t k = 0; k < o.classes; ++k) templates.push_back(make_template(rng, o.channels, canvas));

  const auto n_eval = static_cast<std::size_t>(std::llround(o.eval_fraction * static_cast<double>(o.per_class)));
  DatasetSplit split;
  split.train.num_classes = split.eval.num_classes = o.classes;
  const auto s = o.image_size;
  for (std::size_t idx = 0; idx < o.per_class; ++idx) {
    for (std::size_t k = 0; k < o.classes; ++k) {
      const auto oy = rng.index(2 * kShiftMargin + 1), ox = rng.index(2 * kShiftMargin + 1);
      const double amp = rng.uniform(0.6, 1.4);
      const auto other = (k + 1 + rng.index(o.classes > 1 ? o.classes - 1 : 1)) % o.classes;
      const double distract = o.classes > 1 ? rng.uniform(0.0, 0.5) : 0.0;
      Tensor img({o.channels, s, s}, DType::F32);
      for (std::size_t ch = 0; ch < o.channels; ++ch)
        for (std::size_t i = 0; i < s; ++i)
          for (std::size_t j = 0; j < s; ++j) {
            const auto t = (ch * canvas + i + oy) * canvas + j + ox;
            const double v = amp * templates[k][t] + distract * templates[other][t] + o.noise * rng.normal();
            img.f32()[(ch * s + i) * s + j] = static_cast<float>(v);
          }
      auto& dst = idx < o.per_class - n_eval ? split.train : split.eval;
      dst.samples.push_back({std::move(img), k});
    }
  }
  rng.shuffle(split.train.samples);
  return split;
}

DatasetSplit make_toy_dataset(std::uint64_t seed, std::size_t classes, std::size_t per_class, std::size_t image_size) {
  ToyDataOptions o;
  o.seed = seed;
  o.classes = classes;
  o.per_class = per_class;
  o.image_size = image_size;
  return make_toy_dataset(o);
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  data.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream labels(dir / "labels.csv", std::ios::trunc);
  if (!labels) throw IoError("cannot write " + (dir / "labels.csv").string());
  labels << "filename,label\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu.qt", i);
    save_tensor(data.samples[i].input, dir / name);
    labels << name << "," << data.samples[i].label << "\n";
  }
  if (!labels) throw IoError("failed writing labels.csv");
  detail::write_json_file({{"num_classes", data.num_classes}, {"samples", data.size()}}, dir / "dataset.json");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream labels(dir / "labels.csv");
  if (!labels) throw IoError("cannot open " + (dir / "labels.csv").string());
  Dataset data;
  std::string line;
  std::size_t max_label = 0;
  bool header = true;
  while (std::getline(labels, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line.rfind("filename", 0) == 0) continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("malformed labels.csv line '" + line + "'");
    std::size_t label = 0;
    const auto* first = line.data() + comma + 1;
    const auto* last = line.data() + line.size();
    auto [ptr, err] = std::from_chars(first, last, label);
    if (err != std::errc() || ptr != last) throw FormatError("bad label in labels.csv line '" + line + "'");
    data.samples.push_back({load_tensor(dir / line.substr(0, comma)), label});
    max_label = std::max(max_label, label);
  }
  data.num_classes = max_label + 1;
  if (std::filesystem::exists(dir / "dataset.json")) {
    const auto meta = detail::read_json_file(dir / "dataset.json");
    data.num_classes = meta.at("num_classes").get<std::size_t>();
  }
  data.validate();
  return data;
}

}  // namespace quantkit
