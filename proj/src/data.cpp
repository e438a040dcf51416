#include "irnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "irnet/rng.hpp"

namespace irnet {

const char* label_name(int label) { return label == kLabelPneumonia ? "PNEUMONIA" : "NORMAL"; }

int label_from_name(const std::string& name) {
  if (name == "NORMAL") return kLabelNormal;
  if (name == "PNEUMONIA") return kLabelPneumonia;
  throw format_error("unknown label name '" + name + "' (expected NORMAL or PNEUMONIA)");
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open manifest: " + path);
  DatasetManifest m;
  m.base_dir = std::filesystem::path(path).parent_path().string();

  std::string line;
  int line_no = 0;
  std::vector<std::string> seen_paths;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (line_no == 1) {
      if (fields != std::vector<std::string>{"path", "label", "split"}) {
        throw format_error("manifest line 1: header must be 'path,label,split'");
      }
      continue;
    }
    if (fields.size() != 3) {
      throw format_error("manifest line " + std::to_string(line_no) + ": expected 3 fields, got " +
                         std::to_string(fields.size()));
    }
    ManifestRow row;
    row.path = fields[0];
    try {
      row.label = label_from_name(fields[1]);
    } catch (const Error& e) {
      throw format_error("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (fields[2] != "train" && fields[2] != "test") {
      throw format_error("manifest line " + std::to_string(line_no) + ": split '" + fields[2] +
                         "' is not one of {train,test}");
    }
    row.split = fields[2];
    if (std::find(seen_paths.begin(), seen_paths.end(), row.path) != seen_paths.end()) {
      throw format_error("manifest line " + std::to_string(line_no) + ": duplicate path '" +
                         row.path + "'");
    }
    seen_paths.push_back(row.path);
    m.rows.push_back(std::move(row));
  }
  if (line_no == 0) throw format_error("manifest is empty (missing header): " + path);
  return m;
}

namespace {

// PNM header token reader: skips whitespace and '#' comments.
int read_pnm_int(std::istream& in, const std::string& path, const char* what) {
  int c;
  for (;;) {
    c = in.peek();
    if (c == '#') {
      std::string comment;
      std::getline(in, comment);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int value;
  if (!(in >> value) || value < 0) {
    throw format_error("image " + path + ": malformed header (" + std::string(what) + ")");
  }
  return value;
}

}  // namespace

Tensor decode_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open image: " + path);
  std::string magic(2, '\0');
  f.read(magic.data(), 2);
  if (!f || (magic != "P5" && magic != "P6")) {
    throw format_error("image " + path + ": unsupported format '" + magic +
                       "' (only binary PGM P5 / PPM P6; convert first, e.g. "
                       "`magick input.jpeg output.pgm`)");
  }
  const int width = read_pnm_int(f, path, "width");
  const int height = read_pnm_int(f, path, "height");
  const int maxval = read_pnm_int(f, path, "maxval");
  if (width < 1 || height < 1) throw format_error("image " + path + ": empty raster");
  if (maxval <= 0 || maxval > 255) {
    throw format_error("image " + path + ": maxval " + std::to_string(maxval) +
                       " unsupported (8-bit only)");
  }
  f.get();  // single whitespace byte after maxval

  const int channels = magic == "P6" ? 3 : 1;
  const size_t n = static_cast<size_t>(width) * static_cast<size_t>(height) * static_cast<size_t>(channels);
  std::vector<unsigned char> raw(n);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(f.gcount()) != n) {
    throw format_error("image " + path + ": truncated payload (expected " + std::to_string(n) +
                       " bytes)");
  }

  Tensor out({height, width, 3});
  const float scale = 1.0f / static_cast<float>(maxval);
  for (int64_t i = 0; i < static_cast<int64_t>(width) * height; ++i) {
    if (channels == 1) {
      const float v = static_cast<float>(raw[static_cast<size_t>(i)]) * scale;
      out[i * 3 + 0] = v;
      out[i * 3 + 1] = v;
      out[i * 3 + 2] = v;
    } else {
      for (int c = 0; c < 3; ++c) {
        out[i * 3 + c] = static_cast<float>(raw[static_cast<size_t>(i * 3 + c)]) * scale;
      }
    }
  }
  return out;
}

Tensor resize_bilinear(const Tensor& image, int64_t target) {
  if (image.ndim() != 3) throw shape_error("resize expects (H,W,C), got " + shape_str(image.shape()));
  if (target < 1) throw invalid_error("resize target must be >= 1");
  const int64_t h = image.dim(0), w = image.dim(1), c_n = image.dim(2);
  if (h == target && w == target) return image;

  Tensor out({target, target, c_n});
  const double sy = static_cast<double>(h) / static_cast<double>(target);
  const double sx = static_cast<double>(w) / static_cast<double>(target);
  for (int64_t y = 0; y < target; ++y) {
    // Half-pixel centers: sample source at (i + 0.5) * scale - 0.5.
    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
    const int64_t y0 = static_cast<int64_t>(std::floor(fy));
    const int64_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (int64_t x = 0; x < target; ++x) {
      double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
      const int64_t x0 = static_cast<int64_t>(std::floor(fx));
      const int64_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (int64_t c = 0; c < c_n; ++c) {
        const double v00 = image[(y0 * w + x0) * c_n + c];
        const double v01 = image[(y0 * w + x1) * c_n + c];
        const double v10 = image[(y1 * w + x0) * c_n + c];
        const double v11 = image[(y1 * w + x1) * c_n + c];
        out[(y * target + x) * c_n + c] = static_cast<float>(
            v00 * (1 - wy) * (1 - wx) + v01 * (1 - wy) * wx + v10 * wy * (1 - wx) + v11 * wy * wx);
      }
    }
  }
  return out;
}

std::vector<Sample> load_samples(const DatasetManifest& manifest, const std::string& split,
                                 int64_t resize_to) {
  std::vector<Sample> out;
  for (const auto& row : manifest.split_rows(split)) {
    Sample s;
    const std::filesystem::path full =
        manifest.base_dir.empty() ? row.path : std::filesystem::path(manifest.base_dir) / row.path;
    s.image = decode_image(full.string());
    if (resize_to > 0) s.image = resize_bilinear(s.image, resize_to);
    s.label = row.label;
    s.id = row.path;
    out.push_back(std::move(s));
  }
  return out;
}

FoldAssignment stratified_kfold(const std::vector<std::pair<std::string, int>>& id_labels, int k,
                                uint64_t seed) {
  if (k < 2) throw invalid_error("k-fold needs k >= 2, got " + std::to_string(k));
  std::map<int, std::vector<std::string>> by_class;
  for (const auto& [id, label] : id_labels) by_class[label].push_back(id);
  for (const auto& [label, ids] : by_class) {
    if (static_cast<int>(ids.size()) < k) {
      throw invalid_error("class " + std::string(label_name(label)) + " has " +
                          std::to_string(ids.size()) + " samples, fewer than k=" + std::to_string(k));
    }
  }
  FoldAssignment fa;
  fa.folds.assign(static_cast<size_t>(k), {});
  Rng rng(mix_seed(seed, 0x6b666f6c64ULL));
  // Deal each class cyclically; the cursor carries across classes so overall
  // fold sizes also differ by at most one.
  int cursor = 0;
  for (auto& [label, ids] : by_class) {
    rng.shuffle(ids);
    for (const auto& id : ids) {
      fa.folds[static_cast<size_t>(cursor)].push_back(id);
      cursor = (cursor + 1) % k;
    }
  }
  return fa;
}

std::vector<std::vector<int64_t>> batch_indices(int64_t n, int64_t batch_size, uint64_t seed,
                                                bool shuffle) {
  if (n < 1) throw invalid_error("cannot batch an empty sample set");
  if (batch_size < 1) throw invalid_error("batch size must be >= 1");
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  if (shuffle) {
    Rng rng(mix_seed(seed, 0x62617463686573ULL));
    rng.shuffle(order);
  }
  std::vector<std::vector<int64_t>> batches;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t end = std::min(start + batch_size, n);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

std::pair<Tensor, std::vector<int>> assemble_batch(const std::vector<Sample>& samples,
                                                   const std::vector<int64_t>& indices,
                                                   int64_t input_size) {
  if (indices.empty()) throw invalid_error("cannot assemble an empty batch");
  const int64_t b_n = static_cast<int64_t>(indices.size());
  Tensor batch({b_n, input_size, input_size, 3});
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (int64_t i = 0; i < b_n; ++i) {
    const Sample& s = samples[static_cast<size_t>(indices[static_cast<size_t>(i)])];
    const Tensor img = resize_bilinear(s.image, input_size);
    std::copy(img.vec().begin(), img.vec().end(), batch.data() + i * img.size());
    labels.push_back(s.label);
  }
  return {std::move(batch), std::move(labels)};
}

std::vector<Sample> gen_synthetic(int64_t n, int64_t image_size, uint64_t seed,
                                  SyntheticTask task) {
  if (n < 2 || n % 2 != 0) throw invalid_error("gen_synthetic needs an even n >= 2");
  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(n));
  const double s = static_cast<double>(image_size);

  for (int64_t idx = 0; idx < n; ++idx) {
    Rng rng(mix_seed(mix_seed(seed, 0x73796e7468ULL), static_cast<uint64_t>(idx)));
    const int label = static_cast<int>(idx % 2);

    // Background, global brightness jitter, and one smooth blob.
    const double base = rng.uniform(0.12, 0.25) + rng.uniform(-0.06, 0.06);
    double cx, cy;
    if (task == SyntheticTask::BlobPosition) {
      cx = label == 0 ? rng.uniform(0.15, 0.42) * s : rng.uniform(0.58, 0.85) * s;
      cy = rng.uniform(0.25, 0.75) * s;
    } else {
      cx = rng.uniform(0.25, 0.75) * s;
      cy = rng.uniform(0.25, 0.75) * s;
    }
    const double sigma = rng.uniform(0.16, 0.30) * s;
    const double amp = rng.uniform(0.30, 0.60);

    std::vector<double> gray(static_cast<size_t>(image_size * image_size));
    for (int64_t y = 0; y < image_size; ++y) {
      for (int64_t x = 0; x < image_size; ++x) {
        const double dx = static_cast<double>(x) - cx;
        const double dy = static_cast<double>(y) - cy;
        gray[static_cast<size_t>(y * image_size + x)] =
            base + amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      }
    }

    // Class 1 in the opacity task: 3-5 hard-edged ellipses, bright or dark
    // with equal probability so mean intensity carries little class signal.
    const bool draw_opacities = task == SyntheticTask::OpacityPresence && label == 1;
    if (draw_opacities) {
      const int64_t count = rng.uniform_int(3, 5);
      for (int64_t e = 0; e < count; ++e) {
        const double ex = rng.uniform(0.15, 0.85) * s;
        const double ey = rng.uniform(0.15, 0.85) * s;
        const double ra = rng.uniform(0.05, 0.11) * s;
        const double rb = rng.uniform(0.035, 0.08) * s;
        const double theta = rng.uniform(0.0, M_PI);
        const double delta = (rng.next_double() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.25, 0.38);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int64_t y = 0; y < image_size; ++y) {
          for (int64_t x = 0; x < image_size; ++x) {
            const double dx = static_cast<double>(x) - ex;
            const double dy = static_cast<double>(y) - ey;
            const double u = (dx * ct + dy * st) / ra;
            const double v = (-dx * st + dy * ct) / rb;
            if (u * u + v * v <= 1.0) {
              gray[static_cast<size_t>(y * image_size + x)] += delta;
            }
          }
        }
      }
    }

    Sample sample;
    sample.image = Tensor({image_size, image_size, 3});
    for (int64_t i = 0; i < image_size * image_size; ++i) {
      double v = gray[static_cast<size_t>(i)] + 0.05 * rng.normal();
      v = std::min(std::max(v, 0.0), 1.0);
      for (int c = 0; c < 3; ++c) sample.image[i * 3 + c] = static_cast<float>(v);
    }
    sample.label = label;
    std::ostringstream id;
    id << "syn-" << std::setw(6) << std::setfill('0') << idx;
    sample.id = id.str();
    out.push_back(std::move(sample));
  }
  return out;
}

}  // namespace irnet
