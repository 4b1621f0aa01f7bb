#include "puda/networks.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <map>

namespace puda::nn {

namespace {

ad::Tensor kaiming(std::size_t in, std::size_t out, Rng& rng) {
  ad::Tensor w(ad::Shape{in, out});
  const double std = std::sqrt(2.0 / static_cast<double>(in));
  for (auto& v : w.values()) v = std * rng.normal();
  return w;
}

ad::Var bind(ad::Tape& tape, ad::Parameter& p, bool frozen) {
  return frozen ? tape.constant(p.value) : tape.param(p);
}

}  // namespace

Dense::Dense(const std::string& name, std::size_t in, std::size_t out, bool norm_act_, Rng& rng)
    : weight(name + ".weight", kaiming(in, out, rng)),
      bias(name + ".bias", ad::Tensor(ad::Shape{out}, 0.0)),
      norm_act(norm_act_) {
  if (norm_act) {
    gamma = ad::Parameter(name + ".bn.gamma", ad::Tensor(ad::Shape{out}, 1.0));
    beta = ad::Parameter(name + ".bn.beta", ad::Tensor(ad::Shape{out}, 0.0));
    bn = ad::BatchNormState(out);
  }
}

ad::Var Mlp::forward(ad::Tape& tape, ad::Var x, Mode mode) {
  for (auto& layer : layers) {
    x = ad::linear(x, bind(tape, layer.weight, frozen), bind(tape, layer.bias, frozen));
    if (layer.norm_act) {
      // Frozen stacks also keep their running statistics fixed.
      const Mode m = frozen ? Mode::eval : mode;
      x = ad::batchnorm_relu(x, bind(tape, layer.gamma, frozen),
                             bind(tape, layer.beta, frozen), layer.bn, m);
    }
  }
  return x;
}

std::vector<ad::Parameter*> Mlp::parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& layer : layers) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
    if (layer.norm_act) {
      out.push_back(&layer.gamma);
      out.push_back(&layer.beta);
    }
  }
  return out;
}

Mlp make_mlp(const std::string& name, std::size_t in, std::span<const std::size_t> widths,
             bool last_norm_act, Rng& rng) {
  Mlp mlp;
  mlp.name = name;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const bool act = i + 1 < widths.size() || last_norm_act;
    mlp.layers.emplace_back(name + ".fc" + std::to_string(i + 1), in, widths[i], act, rng);
    in = widths[i];
  }
  return mlp;
}

CloudBatch CloudBatch::from(std::span<const PointCloud> clouds) {
  std::vector<const PointCloud*> ptrs;
  ptrs.reserve(clouds.size());
  for (const auto& c : clouds) ptrs.push_back(&c);
  return from(std::span<const PointCloud* const>(ptrs));
}

CloudBatch CloudBatch::from(std::span<const PointCloud* const> clouds) {
  CloudBatch b;
  b.offsets.push_back(0);
  std::size_t total = 0;
  for (const auto* c : clouds) {
    if (c->empty()) throw EmptyCloudError("batch contains an empty cloud");
    total += c->size();
    b.offsets.push_back(total);
  }
  b.points = ad::Tensor(ad::Shape{total, 3});
  std::size_t r = 0;
  for (const auto* c : clouds) {
    for (const auto& p : c->points) {
      for (std::size_t j = 0; j < 3; ++j) b.points.at(r, j) = p[j];
      ++r;
    }
  }
  return b;
}

std::vector<std::size_t> CloudBatch::row_owner() const {
  std::vector<std::size_t> owner(offsets.back());
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) owner[r] = s;
  }
  return owner;
}

ad::Var Encoder::forward(ad::Tape& tape, ad::Var points, std::span<const std::size_t> offsets,
                         Mode mode) {
  if (points.value().rank() != 2 || points.value().dim(1) != 3) {
    throw DimensionError("encoder expects [N,3] points, got " +
                         ad::shape_str(points.value().shape()));
  }
  auto h = mlp.forward(tape, points, mode);
  return ad::maxpool_segments(h, offsets).values;
}

ad::Var TransformNet::forward(ad::Tape& tape, ad::Var points,
                              std::span<const std::size_t> offsets, Mode mode) {
  if (points.value().rank() != 2 || points.value().dim(1) != 3) {
    throw DimensionError("transformation net expects [N,3] points, got " +
                         ad::shape_str(points.value().shape()));
  }
  auto local = point_mlp.forward(tape, points, mode);
  auto global = ad::maxpool_segments(local, offsets).values;
  std::vector<std::size_t> owner(offsets.back());
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) owner[r] = s;
  }
  auto skip = ad::concat(local, ad::gather_rows(global, std::move(owner)));
  return out_mlp.forward(tape, skip, mode);
}

Model::Model(const NetworkConfig& cfg, std::uint64_t seed) : config(cfg) {
  if (cfg.encoder_widths.empty() || cfg.transform_point_widths.empty() ||
      cfg.num_classes < 2 || cfg.recon_points < 1) {
    throw std::invalid_argument("network config: empty widths, <2 classes or no recon points");
  }
  const Rng root(seed);
  {
    Rng r = root.child(1);
    encoder.mlp = make_mlp("encoder", 3, cfg.encoder_widths, true, r);
  }
  const std::size_t feat = cfg.feature_width();
  {
    Rng r = root.child(2);
    auto widths = cfg.main_hidden;
    widths.push_back(cfg.num_classes);
    main_head = make_mlp("main_head", feat, widths, false, r);
  }
  {
    Rng r = root.child(3);
    auto widths = cfg.recon_hidden;
    widths.push_back(cfg.recon_points * 3);
    recon_head = make_mlp("recon_head", feat, widths, false, r);
  }
  {
    Rng r = root.child(4);
    auto widths = cfg.rotation_hidden;
    widths.push_back(4);
    rotation_head = make_mlp("rotation_head", feat, widths, false, r);
  }
  {
    Rng r = root.child(5);
    transform.point_mlp = make_mlp("transform.point", 3, cfg.transform_point_widths, true, r);
    auto widths = cfg.transform_out_widths;
    widths.push_back(3);
    transform.out_mlp =
        make_mlp("transform.out", 2 * cfg.transform_point_widths.back(), widths, false, r);
  }
  class_names.resize(cfg.num_classes);
  for (std::size_t i = 0; i < cfg.num_classes; ++i) class_names[i] = "class" + std::to_string(i);
}

std::vector<ad::Parameter*> Model::parameters(std::span<const Group> groups) {
  std::vector<ad::Parameter*> out;
  auto append = [&](std::vector<ad::Parameter*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  for (auto g : groups) {
    switch (g) {
      case Group::encoder: append(encoder.mlp.parameters()); break;
      case Group::main_head: append(main_head.parameters()); break;
      case Group::recon_head: append(recon_head.parameters()); break;
      case Group::rotation_head: append(rotation_head.parameters()); break;
      case Group::transform:
        append(transform.point_mlp.parameters());
        append(transform.out_mlp.parameters());
        break;
    }
  }
  return out;
}

std::vector<ad::Parameter*> Model::all_parameters() {
  const Group all[] = {Group::encoder, Group::main_head, Group::recon_head,
                       Group::rotation_head, Group::transform};
  return parameters(all);
}

void Model::visit_state(const std::function<void(const std::string&, ad::Tensor&)>& fn) {
  auto visit_mlp = [&](Mlp& mlp) {
    for (auto& layer : mlp.layers) {
      std::vector<ad::Parameter*> ps{&layer.weight, &layer.bias};
      if (layer.norm_act) {
        ps.push_back(&layer.gamma);
        ps.push_back(&layer.beta);
      }
      for (auto* p : ps) {
        fn(p->name, p->value);
        fn(p->name + ".adam_m", p->adam_m);
        fn(p->name + ".adam_v", p->adam_v);
        ad::Tensor step = ad::Tensor::scalar(static_cast<double>(p->step_count));
        fn(p->name + ".adam_step", step);
        p->step_count = static_cast<long>(step.item());
      }
      if (layer.norm_act) {
        const auto base = layer.weight.name.substr(0, layer.weight.name.size() - 7);
        fn(base + ".bn.running_mean", layer.bn.running_mean);
        fn(base + ".bn.running_var", layer.bn.running_var);
      }
    }
  };
  visit_mlp(encoder.mlp);
  visit_mlp(main_head);
  visit_mlp(recon_head);
  visit_mlp(rotation_head);
  visit_mlp(transform.point_mlp);
  visit_mlp(transform.out_mlp);
}

namespace {

ad::Var head_forward(Mlp& head, ad::Tape& tape, ad::Var features, Mode mode,
                     std::size_t expected) {
  const auto& f = features.value();
  if (f.rank() != 2 || f.dim(1) != expected) {
    throw DimensionError("head expects [b," + std::to_string(expected) + "] features, got " +
                         ad::shape_str(f.shape()));
  }
  return head.forward(tape, features, mode);
}

}  // namespace

ad::Var classify_head(Model& model, ad::Tape& tape, ad::Var features, Mode mode) {
  return head_forward(model.main_head, tape, features, mode, model.config.feature_width());
}

ad::Var recon_head(Model& model, ad::Tape& tape, ad::Var features, Mode mode) {
  return head_forward(model.recon_head, tape, features, mode, model.config.feature_width());
}

ad::Var recon_cloud(ad::Var recon, std::size_t i) {
  const std::size_t n = recon.value().dim(1) / 3;
  return ad::reshape(ad::slice_rows(recon, i, i + 1), ad::Shape{n, 3});
}

ad::Var rotation_head(Model& model, ad::Tape& tape, ad::Var features, Mode mode) {
  return head_forward(model.rotation_head, tape, features, mode, model.config.feature_width());
}

ad::Var apply_destruction(ad::Var cloud, const RegionMask& mask, ad::Var displacements,
                          double alpha) {
  if (mask.selected.size() != cloud.value().rows()) {
    throw DimensionError("destruction mask covers " + std::to_string(mask.selected.size()) +
                         " points, cloud has " + std::to_string(cloud.value().rows()));
  }
  return ad::masked_scale_add(displacements, cloud, mask.selected, alpha);
}

std::vector<double> encode(Model& model, const PointCloud& cloud, Mode mode) {
  ad::Tape tape;
  const std::size_t offsets[] = {0, cloud.size()};
  auto f = model.encoder.forward(tape, tape.constant(to_tensor(cloud)), offsets, mode);
  return {f.value().values().begin(), f.value().values().end()};
}

PointCloud displacements(Model& model, const PointCloud& cloud, Mode mode) {
  ad::Tape tape;
  const std::size_t offsets[] = {0, cloud.size()};
  auto d = model.transform.forward(tape, tape.constant(to_tensor(cloud)), offsets, mode);
  return from_tensor(d.value());
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr char kMagic[4] = {'P', 'U', 'D', 'A'};

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

bool get_bytes(std::istream& is, unsigned char* b, std::size_t n) {
  is.read(reinterpret_cast<char*>(b), static_cast<std::streamsize>(n));
  return static_cast<std::size_t>(is.gcount()) == n;
}

std::uint64_t get_uint(std::istream& is, int bytes, const char* what) {
  unsigned char b[8];
  if (!get_bytes(is, b, static_cast<std::size_t>(bytes))) {
    throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_record(std::ostream& os, const std::string& name, const ad::Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u64(os, d);
  for (double v : t.values()) put_u64(os, std::bit_cast<std::uint64_t>(v));
}

ad::Tensor widths_tensor(const std::vector<std::size_t>& w) {
  std::vector<double> v(w.begin(), w.end());
  return ad::Tensor(ad::Shape{w.size()}, std::move(v));
}

std::vector<std::size_t> tensor_widths(const ad::Tensor& t) {
  std::vector<std::size_t> w;
  for (double v : t.values()) w.push_back(static_cast<std::size_t>(v));
  return w;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Model& model) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, 4);
  put_u32(os, kCheckpointVersion);
  const auto& c = model.config;
  put_record(os, "meta.encoder_widths", widths_tensor(c.encoder_widths));
  put_record(os, "meta.transform_point_widths", widths_tensor(c.transform_point_widths));
  put_record(os, "meta.transform_out_widths", widths_tensor(c.transform_out_widths));
  put_record(os, "meta.main_hidden", widths_tensor(c.main_hidden));
  put_record(os, "meta.recon_hidden", widths_tensor(c.recon_hidden));
  put_record(os, "meta.rotation_hidden", widths_tensor(c.rotation_hidden));
  put_record(os, "meta.num_classes", ad::Tensor::scalar(static_cast<double>(c.num_classes)));
  put_record(os, "meta.recon_points", ad::Tensor::scalar(static_cast<double>(c.recon_points)));
  for (std::size_t i = 0; i < model.class_names.size(); ++i) {
    put_record(os, "meta.class/" + model.class_names[i],
               ad::Tensor::scalar(static_cast<double>(i)));
  }
  model.visit_state([&](const std::string& name, ad::Tensor& t) { put_record(os, name, t); });
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || !std::equal(magic, magic + 4, kMagic)) {
    throw FormatError("not a checkpoint (bad magic): " + path.string());
  }
  const auto version = get_uint(is, 4, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  std::map<std::string, ad::Tensor> records;
  std::vector<std::pair<std::size_t, std::string>> classes;
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto len = get_uint(is, 4, "name length");
    if (len > 4096) throw FormatError("checkpoint record name too long");
    std::string name(len, '\0');
    if (!get_bytes(is, reinterpret_cast<unsigned char*>(name.data()), len)) {
      throw FormatError("checkpoint truncated in record name");
    }
    const auto rank = get_uint(is, 4, "rank");
    if (rank > 8) throw FormatError("checkpoint record '" + name + "' has rank " + std::to_string(rank));
    ad::Shape shape(rank);
    for (auto& d : shape) d = get_uint(is, 8, "dims");
    ad::Tensor t(shape);
    for (auto& v : t.values()) v = std::bit_cast<double>(get_uint(is, 8, "values"));
    if (name.rfind("meta.class/", 0) == 0) {
      classes.emplace_back(static_cast<std::size_t>(t.item()), name.substr(11));
    } else {
      records[name] = std::move(t);
    }
  }

  auto take = [&](const std::string& name) -> ad::Tensor& {
    auto it = records.find(name);
    if (it == records.end()) throw FormatError("checkpoint is missing record '" + name + "'");
    return it->second;
  };
  NetworkConfig cfg;
  cfg.encoder_widths = tensor_widths(take("meta.encoder_widths"));
  cfg.transform_point_widths = tensor_widths(take("meta.transform_point_widths"));
  cfg.transform_out_widths = tensor_widths(take("meta.transform_out_widths"));
  cfg.main_hidden = tensor_widths(take("meta.main_hidden"));
  cfg.recon_hidden = tensor_widths(take("meta.recon_hidden"));
  cfg.rotation_hidden = tensor_widths(take("meta.rotation_hidden"));
  cfg.num_classes = static_cast<std::size_t>(take("meta.num_classes").item());
  cfg.recon_points = static_cast<std::size_t>(take("meta.recon_points").item());

  Model model(cfg, 0);
  model.visit_state([&](const std::string& name, ad::Tensor& t) {
    auto& src = take(name);
    if (src.shape() != t.shape()) {
      throw FormatError("checkpoint record '" + name + "' has shape " +
                        ad::shape_str(src.shape()) + ", expected " + ad::shape_str(t.shape()));
    }
    t = src;
  });
  std::sort(classes.begin(), classes.end());
  if (classes.size() != cfg.num_classes) {
    throw FormatError("checkpoint class table has " + std::to_string(classes.size()) +
                      " entries for " + std::to_string(cfg.num_classes) + " classes");
  }
  for (std::size_t i = 0; i < classes.size(); ++i) model.class_names[i] = classes[i].second;
  return model;
}

}  // namespace puda::nn
