#include "kanlab/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace kanlab {

namespace fs = std::filesystem;
using nlohmann::json;

void save_manifest(const DatasetManifest& m, const std::string& path) {
  json j;
  j["dataset_name"] = m.dataset_name;
  if (m.center_slice) j["center_slice"] = *m.center_slice;
  j["volume_extents"] = m.volume_extents;
  j["voxel_size_mm"] = m.voxel_size_mm;
  j["provenance"] = m.provenance;
  json subjects = json::array();
  for (const auto& s : m.subjects) {
    subjects.push_back({{"subject_id", s.subject_id},
                        {"label", s.label == ClassLabel::pd ? "pd" : "control"},
                        {"volume_path", s.volume_path},
                        {"group_id", s.group_id}});
  }
  j["subjects"] = subjects;
  std::ofstream os(path);
  if (!os) throw IoError("cannot write manifest: " + path);
  os << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read manifest: " + path);
  json j = json::parse(is);
  DatasetManifest m;
  m.dataset_name = j.at("dataset_name").get<std::string>();
  if (j.contains("center_slice")) m.center_slice = j["center_slice"].get<int>();
  m.volume_extents = j.at("volume_extents").get<std::array<std::int64_t, 3>>();
  m.voxel_size_mm = j.at("voxel_size_mm").get<std::array<double, 3>>();
  m.provenance = j.value("provenance", "");
  const fs::path base = fs::path(path).parent_path();
  for (const auto& s : j.at("subjects")) {
    SubjectRecord r;
    r.subject_id = s.at("subject_id").get<std::string>();
    const auto label = s.at("label").get<std::string>();
    if (label == "pd")
      r.label = ClassLabel::pd;
    else if (label == "control")
      r.label = ClassLabel::control;
    else
      throw InputError("manifest label must be pd or control: " + label);
    r.volume_path = s.at("volume_path").get<std::string>();
    if (!fs::path(r.volume_path).is_absolute())
      r.volume_path = (base / r.volume_path).string();
    r.group_id = s.value("group_id", r.subject_id);
    m.subjects.push_back(std::move(r));
  }
  // subject ids must be unique within a dataset
  std::vector<std::string> ids;
  for (const auto& s : m.subjects) ids.push_back(s.subject_id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw InputError("manifest has duplicate subject ids: " + path);
  return m;
}

std::vector<Tensor> extract_slices(const Volume& vol, int center, int count) {
  if (vol.data.rank() != 3)
    throw DimensionError("extract_slices: volume must be rank-3");
  if (count < 1) throw InputError("extract_slices: count must be >= 1");
  const std::int64_t depth = vol.data.dim(0);
  const std::int64_t start = std::int64_t(center) - count / 2;
  if (start < 0 || start + count > depth)
    throw InputError("extract_slices: window [" + std::to_string(start) +
                     ", " + std::to_string(start + count) +
                     ") outside volume depth " + std::to_string(depth));
  const std::int64_t h = vol.data.dim(1), w = vol.data.dim(2);
  const auto vd = vol.data.data();
  std::vector<Tensor> out;
  out.reserve(std::size_t(count));
  for (int i = 0; i < count; ++i) {
    const double* src = vd.data() + (start + i) * h * w;
    out.push_back(
        Tensor::from({h, w}, std::vector<double>(src, src + h * w)));
  }
  return out;
}

namespace {

struct LinearTap {
  std::int64_t i0, i1;
  double f;  // weight of i1
};

std::vector<LinearTap> linear_taps(std::int64_t in, std::int64_t out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double ratio = double(in) / double(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double s = (double(o) + 0.5) * ratio - 0.5;
    s = std::clamp(s, 0.0, double(in - 1));
    const auto i0 = std::int64_t(std::floor(s));
    taps[std::size_t(o)] = {i0, std::min(i0 + 1, in - 1), s - double(i0)};
  }
  return taps;
}

}  // namespace

Tensor resample(const Tensor& x, const Shape& target_extents) {
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("resample: rank must be 2 or 3");
  if (int(target_extents.size()) != x.rank())
    throw DimensionError("resample: target rank mismatch");
  for (auto e : target_extents)
    if (e < 1) throw ConfigError("resample: target extents must be positive");
  if (target_extents == x.shape()) return x.clone();

  const auto xd = x.data();
  if (x.rank() == 2) {
    const auto ty = linear_taps(x.dim(0), target_extents[0]);
    const auto tx = linear_taps(x.dim(1), target_extents[1]);
    const std::int64_t w = x.dim(1);
    std::vector<double> out(
        std::size_t(target_extents[0] * target_extents[1]));
    for (std::int64_t oy = 0; oy < target_extents[0]; ++oy) {
      const auto& a = ty[std::size_t(oy)];
      for (std::int64_t ox = 0; ox < target_extents[1]; ++ox) {
        const auto& b = tx[std::size_t(ox)];
        const double v00 = xd[std::size_t(a.i0 * w + b.i0)];
        const double v01 = xd[std::size_t(a.i0 * w + b.i1)];
        const double v10 = xd[std::size_t(a.i1 * w + b.i0)];
        const double v11 = xd[std::size_t(a.i1 * w + b.i1)];
        out[std::size_t(oy * target_extents[1] + ox)] =
            (1 - a.f) * ((1 - b.f) * v00 + b.f * v01) +
            a.f * ((1 - b.f) * v10 + b.f * v11);
      }
    }
    return Tensor::from(target_extents, std::move(out));
  }

  const auto tz = linear_taps(x.dim(0), target_extents[0]);
  const auto ty = linear_taps(x.dim(1), target_extents[1]);
  const auto tx = linear_taps(x.dim(2), target_extents[2]);
  const std::int64_t h = x.dim(1), w = x.dim(2);
  std::vector<double> out(std::size_t(target_extents[0] * target_extents[1] *
                                      target_extents[2]));
  parallel_for(target_extents[0], [&](std::int64_t z0, std::int64_t z1) {
    for (std::int64_t oz = z0; oz < z1; ++oz) {
      const auto& c = tz[std::size_t(oz)];
      for (std::int64_t oy = 0; oy < target_extents[1]; ++oy) {
        const auto& a = ty[std::size_t(oy)];
        for (std::int64_t ox = 0; ox < target_extents[2]; ++ox) {
          const auto& b = tx[std::size_t(ox)];
          auto at = [&](std::int64_t z, std::int64_t y, std::int64_t xx) {
            return xd[std::size_t((z * h + y) * w + xx)];
          };
          const double v0 =
              (1 - a.f) * ((1 - b.f) * at(c.i0, a.i0, b.i0) +
                           b.f * at(c.i0, a.i0, b.i1)) +
              a.f * ((1 - b.f) * at(c.i0, a.i1, b.i0) +
                     b.f * at(c.i0, a.i1, b.i1));
          const double v1 =
              (1 - a.f) * ((1 - b.f) * at(c.i1, a.i0, b.i0) +
                           b.f * at(c.i1, a.i0, b.i1)) +
              a.f * ((1 - b.f) * at(c.i1, a.i1, b.i0) +
                     b.f * at(c.i1, a.i1, b.i1));
          out[std::size_t((oz * target_extents[1] + oy) * target_extents[2] +
                          ox)] = (1 - c.f) * v0 + c.f * v1;
        }
      }
    }
  });
  return Tensor::from(target_extents, std::move(out));
}

Tensor normalize_intensity(const Tensor& x) {
  double mn = 1e300, mx = -1e300;
  for (double v : x.data()) {
    if (!std::isfinite(v))
      throw NumericError("normalize_intensity: non-finite value");
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  std::vector<double> out(std::size_t(x.numel()));
  if (mx > mn) {
    const double inv = 1.0 / (mx - mn);
    const auto xd = x.data();
    for (std::int64_t i = 0; i < x.numel(); ++i)
      out[std::size_t(i)] = (xd[std::size_t(i)] - mn) * inv;
  }
  return Tensor::from(x.shape(), std::move(out));
}

namespace {

// reflected index with edge duplication: (d c b a | a b c d | d c b a)
std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * n;
  i = ((i % period) + period) % period;
  return i < n ? i : period - 1 - i;
}

void filter_axis(std::vector<double>& data, const Shape& extents, int axis,
                 const std::vector<double>& kernel) {
  const auto radius = std::int64_t(kernel.size()) / 2;
  if (radius == 0) return;
  std::int64_t outer = 1, inner = 1;
  const std::int64_t n = extents[std::size_t(axis)];
  for (int i = 0; i < axis; ++i) outer *= extents[std::size_t(i)];
  for (std::size_t i = std::size_t(axis) + 1; i < extents.size(); ++i)
    inner *= extents[i];
  std::vector<double> line(static_cast<std::size_t>(n));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in_i = 0; in_i < inner; ++in_i) {
      double* base = data.data() + (o * n) * inner + in_i;
      for (std::int64_t i = 0; i < n; ++i) line[std::size_t(i)] = base[i * inner];
      for (std::int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::int64_t t = -radius; t <= radius; ++t)
          acc += kernel[std::size_t(t + radius)] *
                 line[std::size_t(reflect_index(i + t, n))];
        base[i * inner] = acc;
      }
    }
  }
}

}  // namespace

Tensor gaussian_filter(const Tensor& x, double sigma_mm,
                       std::span<const double> voxel_size_mm) {
  if (sigma_mm < 0.0) throw InputError("gaussian_filter: sigma must be >= 0");
  if (int(voxel_size_mm.size()) != x.rank())
    throw DimensionError("gaussian_filter: voxel size rank mismatch");
  for (double v : voxel_size_mm)
    if (!(v > 0.0)) throw ConfigError("gaussian_filter: voxel size must be positive");

  std::vector<double> data(x.data().begin(), x.data().end());
  for (int axis = 0; axis < x.rank(); ++axis) {
    const double sigma = sigma_mm / voxel_size_mm[std::size_t(axis)];
    if (sigma == 0.0) continue;
    const auto radius = std::int64_t(std::ceil(3.0 * sigma));
    if (radius == 0) continue;
    std::vector<double> kernel(std::size_t(2 * radius + 1));
    double total = 0.0;
    for (std::int64_t t = -radius; t <= radius; ++t) {
      const double v = std::exp(-0.5 * double(t) * double(t) / (sigma * sigma));
      kernel[std::size_t(t + radius)] = v;
      total += v;
    }
    for (auto& v : kernel) v /= total;
    filter_axis(data, x.shape(), axis, kernel);
  }
  return Tensor::from(x.shape(), std::move(data));
}

namespace {

double smoothstep(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace

DatasetManifest synth_generate(const SynthOptions& options) {
  if (options.n_subjects < 4 || options.n_subjects % 2 != 0)
    throw ConfigError("synth: n_subjects must be even and >= 4");
  if (options.volume_extent < 16)
    throw ConfigError("synth: volume extent too small");
  std::error_code ec;
  fs::create_directories(options.out_dir, ec);
  if (!fs::is_directory(options.out_dir))
    throw IoError("synth: cannot create output directory " + options.out_dir);

  const std::int64_t e = options.volume_extent;
  const double ctr = double(e - 1) / 2.0;
  Rng root(options.seed);

  DatasetManifest m;
  m.dataset_name = options.dataset_name;
  m.center_slice = int(e / 2);
  m.volume_extents = {e, e, e};
  m.voxel_size_mm = {options.voxel_size_mm, options.voxel_size_mm,
                     options.voxel_size_mm};
  {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "{\"generator\":\"phantom\",\"effect_size\":%g,"
                  "\"noise_sd\":%g,\"seed\":%llu,\"extent\":%lld}",
                  options.effect_size, options.noise_sd,
                  (unsigned long long)options.seed, (long long)e);
    m.provenance = buf;
  }

  for (int s = 0; s < options.n_subjects; ++s) {
    const bool is_pd = s % 2 == 1;
    Rng rng = root.child(std::uint64_t(s));

    // subject-level nuisance variation, identical in law for both classes
    const double brain_base = 0.5 + 0.01 * rng.normal();
    double axes[3];
    for (auto& a : axes) a = 0.42 * double(e) * (1.0 + 0.05 * rng.normal());
    double blob_ctr[3];
    for (auto& c : blob_ctr) c = ctr + rng.uniform(-2.0, 2.0);
    const double radius_jit = 1.0 + 0.04 * rng.normal();
    const double intensity_jit = 0.015 * rng.normal();

    // the class effect: midbrain blob radius and intensity shift
    const double effect = is_pd ? options.effect_size : 0.0;
    const double blob_radius = 0.11 * double(e) * (1.0 + 0.25 * effect) * radius_jit;
    const double blob_intensity = 0.30 * (1.0 + 0.6 * effect) + intensity_jit;

    std::vector<double> vox(std::size_t(e * e * e));
    const double edge = 0.06 * double(e);
    std::int64_t idx = 0;
    for (std::int64_t z = 0; z < e; ++z)
      for (std::int64_t y = 0; y < e; ++y)
        for (std::int64_t x = 0; x < e; ++x, ++idx) {
          const double dz = (double(z) - ctr) / axes[0];
          const double dy = (double(y) - ctr) / axes[1];
          const double dx = (double(x) - ctr) / axes[2];
          const double rell = std::sqrt(dz * dz + dy * dy + dx * dx);
          double v = brain_base * smoothstep((1.0 - rell) * double(e) / edge * 0.08);
          const double bz = double(z) - blob_ctr[0];
          const double by = double(y) - blob_ctr[1];
          const double bx = double(x) - blob_ctr[2];
          const double d = std::sqrt(bz * bz + by * by + bx * bx);
          v += blob_intensity * smoothstep((blob_radius - d) / (0.35 * blob_radius));
          v += options.noise_sd * rng.normal();
          vox[std::size_t(idx)] = v;
        }

    char name[32];
    std::snprintf(name, sizeof name, "s%03d", s);
    const std::string file = std::string(name) + ".kvt";
    write_blob((fs::path(options.out_dir) / file).string(),
               Tensor::from({e, e, e}, std::move(vox)), BlobDtype::f32);
    SubjectRecord rec;
    rec.subject_id = name;
    rec.label = is_pd ? ClassLabel::pd : ClassLabel::control;
    rec.volume_path = file;
    rec.group_id = rec.subject_id;
    m.subjects.push_back(std::move(rec));
  }

  save_manifest(m, (fs::path(options.out_dir) / "manifest.json").string());
  // reload so volume paths are resolved exactly as consumers will see them
  return load_manifest((fs::path(options.out_dir) / "manifest.json").string());
}

Volume load_volume(const std::string& path,
                   std::array<double, 3> voxel_size_mm) {
  Volume v;
  v.data = read_blob(path);
  if (v.data.rank() != 3) throw IoError("volume blob must be rank-3: " + path);
  v.voxel_size_mm = voxel_size_mm;
  return v;
}

}  // namespace kanlab
