#include "puda/data.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"

namespace puda::data {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<PointCloud>& DomainDataset::split(const std::string& which) const {
  if (which == "train") return train;
  if (which == "val") return val;
  if (which == "test") return test;
  throw std::invalid_argument("unknown split '" + which + "' (expected train, val or test)");
}

void DomainDataset::validate() const {
  for (const auto* s : {&train, &val, &test}) {
    for (const auto& c : *s) {
      if (c.label && (*c.label < 0 || static_cast<std::size_t>(*c.label) >= class_names.size())) {
        throw FormatError("dataset '" + name + "': label " + std::to_string(*c.label) +
                          " outside the " + std::to_string(class_names.size()) +
                          "-class vocabulary");
      }
    }
  }
}

std::vector<PointCloud> unlabeled(std::span<const PointCloud> clouds) {
  std::vector<PointCloud> out(clouds.begin(), clouds.end());
  for (auto& c : out) c.label.reset();
  return out;
}

// ---------------------------------------------------------------------------
// Analytic surfaces

namespace {

constexpr double kPi = std::numbers::pi;
constexpr std::string_view kShapes[] = {"sphere", "cube",    "cylinder",  "cone",
                                        "torus",  "pyramid", "ellipsoid", "capsule"};
// Every surface below fits inside this radius.
constexpr double kShapeBound = 1.8;

Point3 unit_sphere(Rng& rng) { return random_unit_vector(rng); }

Point3 on_triangle(const Point3& a, const Point3& b, const Point3& c, Rng& rng) {
  const double r1 = std::sqrt(rng.uniform());
  const double r2 = rng.uniform();
  Point3 p;
  for (int j = 0; j < 3; ++j) {
    p[j] = (1.0 - r1) * a[j] + r1 * (1.0 - r2) * b[j] + r1 * r2 * c[j];
  }
  return p;
}

double triangle_area(const Point3& a, const Point3& b, const Point3& c) {
  const Point3 u{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  const Point3 v{c[0] - a[0], c[1] - a[1], c[2] - a[2]};
  const double x = u[1] * v[2] - u[2] * v[1];
  const double y = u[2] * v[0] - u[0] * v[2];
  const double z = u[0] * v[1] - u[1] * v[0];
  return 0.5 * std::sqrt(x * x + y * y + z * z);
}

Point3 disk(double radius, double z, Rng& rng) {
  const double r = radius * std::sqrt(rng.uniform());
  const double t = rng.uniform(0.0, 2.0 * kPi);
  return {r * std::cos(t), r * std::sin(t), z};
}

Point3 sample_one(std::string_view shape, Rng& rng) {
  if (shape == "sphere") return unit_sphere(rng);
  if (shape == "cube") {
    constexpr double h = 0.7;
    const std::size_t face = rng.index(6);
    const double u = rng.uniform(-h, h), v = rng.uniform(-h, h);
    const double s = face % 2 == 0 ? h : -h;
    switch (face / 2) {
      case 0: return {s, u, v};
      case 1: return {u, s, v};
      default: return {u, v, s};
    }
  }
  if (shape == "cylinder") {
    constexpr double r = 0.6, h = 0.8;
    const double side = 2.0 * kPi * r * 2.0 * h;
    const double caps = 2.0 * kPi * r * r;
    if (rng.uniform() * (side + caps) < side) {
      const double t = rng.uniform(0.0, 2.0 * kPi);
      return {r * std::cos(t), r * std::sin(t), rng.uniform(-h, h)};
    }
    return disk(r, rng.uniform() < 0.5 ? -h : h, rng);
  }
  if (shape == "cone") {
    constexpr double radius = 0.8, height = 1.6, top = 0.8;
    const double slant = std::sqrt(radius * radius + height * height);
    const double lateral = kPi * radius * slant;
    const double base = kPi * radius * radius;
    if (rng.uniform() * (lateral + base) < lateral) {
      const double t = std::sqrt(rng.uniform());
      const double a = rng.uniform(0.0, 2.0 * kPi);
      return {radius * t * std::cos(a), radius * t * std::sin(a), top - height * t};
    }
    return disk(radius, top - height, rng);
  }
  if (shape == "torus") {
    constexpr double big = 0.7, small = 0.25;
    for (;;) {
      const double u = rng.uniform(0.0, 2.0 * kPi);
      const double v = rng.uniform(0.0, 2.0 * kPi);
      if (rng.uniform() * (big + small) <= big + small * std::cos(v)) {
        const double w = big + small * std::cos(v);
        return {w * std::cos(u), w * std::sin(u), small * std::sin(v)};
      }
    }
  }
  if (shape == "pyramid") {
    constexpr double h = 0.8, bottom = -0.6, apex_z = 1.0;
    const Point3 apex{0.0, 0.0, apex_z};
    const Point3 c[4] = {{-h, -h, bottom}, {h, -h, bottom}, {h, h, bottom}, {-h, h, bottom}};
    double areas[5];
    for (int i = 0; i < 4; ++i) areas[i] = triangle_area(c[i], c[(i + 1) % 4], apex);
    areas[4] = (2 * h) * (2 * h);
    double total = 0.0;
    for (double a : areas) total += a;
    double pick = rng.uniform() * total;
    for (int i = 0; i < 4; ++i) {
      if (pick < areas[i]) return on_triangle(c[i], c[(i + 1) % 4], apex, rng);
      pick -= areas[i];
    }
    return {rng.uniform(-h, h), rng.uniform(-h, h), bottom};
  }
  if (shape == "ellipsoid") {
    constexpr double a = 1.0, b = 0.6, c = 0.4;
    for (;;) {
      const Point3 u = unit_sphere(rng);
      // Area element of the sphere -> ellipsoid map, relative to its maximum.
      const double g = std::sqrt(u[0] * u[0] / (a * a) + u[1] * u[1] / (b * b) +
                                 u[2] * u[2] / (c * c)) * c;
      if (rng.uniform() <= g) return {a * u[0], b * u[1], c * u[2]};
    }
  }
  if (shape == "capsule") {
    constexpr double r = 0.4, half = 0.6;
    const double side = 2.0 * kPi * r * 2.0 * half;
    const double ends = 4.0 * kPi * r * r;
    if (rng.uniform() * (side + ends) < side) {
      const double t = rng.uniform(0.0, 2.0 * kPi);
      return {r * std::cos(t), r * std::sin(t), rng.uniform(-half, half)};
    }
    const Point3 u = unit_sphere(rng);
    return {r * u[0], r * u[1], r * u[2] + (u[2] >= 0.0 ? half : -half)};
  }
  throw ConfigError("unknown shape '" + std::string(shape) + "'");
}

void require_known(const std::string& shape) {
  if (std::find(std::begin(kShapes), std::end(kShapes), shape) == std::end(kShapes)) {
    throw ConfigError("unknown shape '" + shape + "'");
  }
}

}  // namespace

std::span<const std::string_view> known_shapes() { return kShapes; }

std::vector<Point3> sample_shape(const std::string& shape, std::size_t n, Rng& rng) {
  require_known(shape);
  std::vector<Point3> pts(n);
  for (auto& p : pts) p = sample_one(shape, rng);
  return pts;
}

std::vector<Point3> sample_shape_biased(const std::string& shape, std::size_t n,
                                        double density_bias, Rng& rng) {
  if (density_bias < 0.0 || density_bias > 1.0) {
    throw ConfigError("density bias must lie in [0,1]");
  }
  if (density_bias == 0.0) return sample_shape(shape, n, rng);
  require_known(shape);
  const Point3 dir = random_unit_vector(rng);
  std::vector<Point3> pts;
  pts.reserve(n);
  while (pts.size() < n) {
    const Point3 p = sample_one(shape, rng);
    const double t = (p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2]) / kShapeBound;
    const double w = (1.0 - density_bias) + density_bias * 0.5 * (t + 1.0);
    if (rng.uniform() < w) pts.push_back(p);
  }
  return pts;
}

PointCloud synth_cloud(const SyntheticSpec& spec, std::size_t class_index, Rng& rng) {
  PointCloud c;
  c.label = static_cast<int>(class_index);
  c.points = sample_shape_biased(spec.classes.at(class_index), spec.n_points,
                                 spec.density_bias, rng);
  if (spec.scale_jitter > 0.0) {
    Point3 s;
    for (auto& v : s) v = 1.0 + spec.scale_jitter * rng.uniform(-1.0, 1.0);
    for (auto& p : c.points) {
      for (int j = 0; j < 3; ++j) p[j] *= s[j];
    }
  }
  if (spec.noise_sigma > 0.0) {
    for (auto& p : c.points) {
      for (auto& v : p) v += spec.noise_sigma * rng.normal();
    }
  }
  if (spec.crop_retain < 1.0) c = random_plane_crop(c, spec.crop_retain, rng);
  return normalize(c);
}

DomainDataset gen_synthetic_domain(const SyntheticSpec& spec) {
  if (spec.classes.size() < 2) throw ConfigError("synthetic domain needs at least 2 classes");
  for (const auto& s : spec.classes) require_known(s);
  if (spec.noise_sigma < 0.0 || spec.scale_jitter < 0.0 || spec.density_bias < 0.0) {
    throw ConfigError("synthetic domain knobs must be non-negative");
  }
  if (spec.n_points < 2) throw ConfigError("synthetic clouds need at least 2 points");
  if (!(spec.crop_retain > 0.0 && spec.crop_retain <= 1.0)) {
    throw ConfigError("crop_retain must lie in (0,1]");
  }
  const Rng root(spec.seed);
  auto stream = [](std::uint64_t split, std::uint64_t cls, std::uint64_t i) {
    return (split << 40) | (cls << 20) | i;
  };

  DomainDataset ds;
  ds.name = spec.name;
  ds.class_names = spec.classes;
  ds.nominal_n = spec.n_points;
  std::vector<PointCloud> official;
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    for (std::size_t i = 0; i < spec.train_per_class; ++i) {
      Rng r = root.child(stream(0, c, i));
      official.push_back(synth_cloud(spec, c, r));
    }
    for (std::size_t i = 0; i < spec.test_per_class; ++i) {
      Rng r = root.child(stream(1, c, i));
      ds.test.push_back(synth_cloud(spec, c, r));
    }
  }
  if (spec.val_fraction > 0.0) {
    auto [tr, va] = split_train_val(official, 1.0 - spec.val_fraction, spec.seed ^ 0x5EEDULL);
    ds.train = std::move(tr);
    ds.val = std::move(va);
  } else {
    ds.train = std::move(official);
  }
  return ds;
}

std::pair<std::vector<PointCloud>, std::vector<PointCloud>> split_train_val(
    std::span<const PointCloud> clouds, double fraction, std::uint64_t seed) {
  if (clouds.size() < 5) throw std::invalid_argument("split needs at least 5 samples");
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("split fraction must lie in (0,1)");
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    if (!clouds[i].label) throw std::invalid_argument("split needs labeled clouds");
    by_class[*clouds[i].label].push_back(i);
  }
  std::vector<std::uint8_t> to_train(clouds.size(), 0);
  const Rng root(seed);
  for (auto& [label, idx] : by_class) {
    if (idx.size() < 2) {
      throw std::invalid_argument("class " + std::to_string(label) + " has " +
                                  std::to_string(idx.size()) + " sample(s); need 2 to split");
    }
    Rng r = root.child(static_cast<std::uint64_t>(label));
    r.shuffle(idx);
    const auto n_train = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::floor(fraction * static_cast<double>(idx.size()) + 1e-9)),
        1, idx.size() - 1);
    for (std::size_t k = 0; k < n_train; ++k) to_train[idx[k]] = 1;
  }
  std::pair<std::vector<PointCloud>, std::vector<PointCloud>> out;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    (to_train[i] ? out.first : out.second).push_back(clouds[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// xyz text files

std::string format_xyz(const PointCloud& cloud) {
  std::string out;
  char buf[96];
  for (const auto& p : cloud.points) {
    const int n = std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

void write_xyz(const fs::path& path, const PointCloud& cloud) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << format_xyz(cloud);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

PointCloud parse_xyz(const std::string& text, const std::string& origin) {
  PointCloud c;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string_view::npos) continue;

    Point3 p;
    const char* it = line.data() + first;
    const char* stop = line.data() + line.size();
    for (int j = 0; j < 3; ++j) {
      while (it < stop && (*it == ' ' || *it == '\t')) ++it;
      auto [next, ec] = std::from_chars(it, stop, p[j]);
      if (ec != std::errc() || it == stop) {
        throw FormatError(origin + ":" + std::to_string(line_no) +
                          ": expected three numbers per line");
      }
      it = next;
    }
    while (it < stop && (*it == ' ' || *it == '\t')) ++it;
    if (it != stop) {
      throw FormatError(origin + ":" + std::to_string(line_no) + ": trailing characters");
    }
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2])) {
      throw FormatError(origin + ":" + std::to_string(line_no) + ": non-finite coordinate");
    }
    c.points.push_back(p);
  }
  if (c.points.empty()) throw FormatError(origin + ": no points");
  return c;
}

PointCloud read_xyz(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_xyz(ss.str(), path.string());
}

// ---------------------------------------------------------------------------
// Directory datasets

namespace {

constexpr const char* kSplits[] = {"train", "val", "test"};

std::vector<PointCloud>& split_mut(DomainDataset& ds, const std::string& which) {
  return const_cast<std::vector<PointCloud>&>(ds.split(which));
}

}  // namespace

void write_dataset(const fs::path& dir, const DomainDataset& ds) {
  ds.validate();
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "puda-dataset";
  manifest["version"] = 1;
  manifest["name"] = ds.name;
  manifest["class_names"] = ds.class_names;
  manifest["nominal_n"] = ds.nominal_n;
  json splits = json::object();
  for (const char* s : kSplits) {
    json entries = json::array();
    const auto& clouds = ds.split(s);
    if (!clouds.empty()) fs::create_directories(dir / s);
    for (std::size_t i = 0; i < clouds.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%05zu.xyz", i);
      const std::string rel = std::string(s) + "/" + name;
      write_xyz(dir / rel, clouds[i]);
      json e;
      e["file"] = rel;
      if (clouds[i].label) {
        e["label"] = *clouds[i].label;
      } else {
        e["label"] = nullptr;
      }
      entries.push_back(e);
    }
    splits[s] = entries;
  }
  manifest["splits"] = splits;
  std::ofstream os(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  os << manifest.dump(1) << "\n";
  if (!os) throw std::runtime_error("failed writing manifest in " + dir.string());
}

DomainDataset read_dataset(const fs::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream is(mpath);
  if (!is) throw IntegrityError("missing manifest: " + mpath.string());
  json manifest;
  try {
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  DomainDataset ds;
  try {
    ds.name = manifest.value("name", std::string{});
    ds.class_names = manifest.at("class_names").get<std::vector<std::string>>();
    ds.nominal_n = manifest.at("nominal_n").get<std::size_t>();
    std::vector<std::string> missing;
    for (const char* s : kSplits) {
      if (!manifest.at("splits").contains(s)) continue;
      for (const auto& e : manifest["splits"][s]) {
        const auto rel = e.at("file").get<std::string>();
        if (!fs::exists(dir / rel)) {
          missing.push_back(rel);
          continue;
        }
        PointCloud c = read_xyz(dir / rel);
        if (!e.at("label").is_null()) c.label = e["label"].get<int>();
        split_mut(ds, s).push_back(std::move(c));
      }
    }
    if (!missing.empty()) {
      std::string msg = "dataset " + dir.string() + " is missing " +
                        std::to_string(missing.size()) + " file(s):";
      for (const auto& m : missing) msg += " " + m;
      throw IntegrityError(msg);
    }
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Packed datasets

namespace {

constexpr char kPackedMagic[4] = {'P', 'C', 'D', 'S'};
constexpr std::uint32_t kPackedVersion = 1;
constexpr std::uint16_t kNoLabel = 0xFFFF;

void put_le(std::ostream& os, std::uint64_t v, int bytes) {
  char b[8];
  for (int i = 0; i < bytes; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, bytes);
}

std::uint64_t get_le(std::istream& is, int bytes) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), bytes);
  if (is.gcount() != bytes) throw FormatError("packed dataset truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put_le(os, s.size(), 4);
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto n = get_le(is, 4);
  if (n > (1u << 20)) throw FormatError("packed dataset string too long");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::uint64_t>(is.gcount()) != n) throw FormatError("packed dataset truncated");
  return s;
}

}  // namespace

void write_packed(const fs::path& file, const DomainDataset& ds) {
  ds.validate();
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os.write(kPackedMagic, 4);
  put_le(os, kPackedVersion, 4);
  put_string(os, ds.name);
  put_le(os, ds.nominal_n, 4);
  put_le(os, ds.class_names.size(), 4);
  for (const auto& c : ds.class_names) put_string(os, c);
  for (const char* s : kSplits) {
    const auto& clouds = ds.split(s);
    put_le(os, clouds.size(), 4);
    for (const auto& c : clouds) {
      put_le(os, c.label ? static_cast<std::uint16_t>(*c.label) : kNoLabel, 2);
      put_le(os, c.size(), 4);
      for (const auto& p : c.points) {
        for (double v : p) put_le(os, std::bit_cast<std::uint64_t>(v), 8);
      }
    }
  }
  if (!os) throw std::runtime_error("failed writing " + file.string());
}

DomainDataset read_packed(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + file.string());
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || !std::equal(magic, magic + 4, kPackedMagic)) {
    throw FormatError(file.string() + ": bad magic, not a packed dataset");
  }
  const auto version = get_le(is, 4);
  if (version != kPackedVersion) {
    throw FormatError(file.string() + ": unsupported version " + std::to_string(version));
  }
  DomainDataset ds;
  ds.name = get_string(is);
  ds.nominal_n = get_le(is, 4);
  const auto classes = get_le(is, 4);
  for (std::uint64_t i = 0; i < classes; ++i) ds.class_names.push_back(get_string(is));
  for (const char* s : kSplits) {
    const auto count = get_le(is, 4);
    auto& dst = split_mut(ds, s);
    for (std::uint64_t i = 0; i < count; ++i) {
      PointCloud c;
      const auto label = static_cast<std::uint16_t>(get_le(is, 2));
      if (label != kNoLabel) c.label = label;
      const auto n = get_le(is, 4);
      c.points.resize(n);
      for (auto& p : c.points) {
        for (auto& v : p) v = std::bit_cast<double>(get_le(is, 8));
      }
      dst.push_back(std::move(c));
    }
  }
  ds.validate();
  return ds;
}

DomainDataset load_dataset(const fs::path& path) {
  return fs::is_directory(path) ? read_dataset(path) : read_packed(path);
}

// ---------------------------------------------------------------------------
// Hashing

std::string sha1_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 0xF];
  }
  return out;
}

namespace {

std::string blob_hash(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string content = ss.str();
  std::string blob = "blob " + std::to_string(content.size());
  blob.push_back('\0');
  blob += content;
  return sha1_hex(blob);
}

}  // namespace

std::string dataset_hash(const fs::path& path) {
  std::vector<std::pair<std::string, std::string>> entries;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::recursive_directory_iterator(path)) {
      if (!e.is_regular_file()) continue;
      entries.emplace_back(fs::relative(e.path(), path).generic_string(), blob_hash(e.path()));
    }
  } else {
    entries.emplace_back(path.filename().generic_string(), blob_hash(path));
  }
  std::sort(entries.begin(), entries.end());
  std::string tree;
  for (const auto& [rel, h] : entries) tree += h + " " + rel + "\n";
  return sha1_hex(tree);
}

}  // namespace puda::data
