#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "kanlab/common.hpp"
#include "kanlab/tensor.hpp"

namespace kanlab {

struct Volume {
  Tensor data;                               // [D x H x W]
  std::array<double, 3> voxel_size_mm{1, 1, 1};
};

enum class ClassLabel { control = 0, pd = 1 };

struct SubjectRecord {
  std::string subject_id;
  ClassLabel label = ClassLabel::control;
  std::string volume_path;
  std::string group_id;  // defaults to subject_id
};

struct DatasetManifest {
  std::string dataset_name;
  std::vector<SubjectRecord> subjects;
  std::optional<int> center_slice;
  std::array<std::int64_t, 3> volume_extents{0, 0, 0};
  std::array<double, 3> voxel_size_mm{1, 1, 1};
  // provenance of the generator settings
  std::string provenance;
};

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

// `count` contiguous axial slices centered at `center` (window start =
// center - count/2). Throws when the window leaves the volume.
std::vector<Tensor> extract_slices(const Volume& vol, int center,
                                   int count = 100);

// Separable linear interpolation (bilinear for rank 2, trilinear for rank 3),
// align-corners-false convention.
Tensor resample(const Tensor& x, const Shape& target_extents);

// (x - min) / (max - min); constant inputs map to all zeros.
Tensor normalize_intensity(const Tensor& x);

// Separable Gaussian, per-axis sigma in voxels = sigma_mm / voxel_size,
// kernel truncated at 3 sigma, reflected boundary.
Tensor gaussian_filter(const Tensor& x, double sigma_mm,
                       std::span<const double> voxel_size_mm);

struct SynthOptions {
  int n_subjects = 60;
  double effect_size = 0.5;
  double noise_sd = 0.05;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string dataset_name = "synthetic";
  int volume_extent = 64;        // cubic volumes; 128 for full-scale runs
  double voxel_size_mm = 2.0;
};

// Writes one phantom volume blob per subject plus manifest.json: a smooth
// brain ellipsoid with a central midbrain blob whose radius and intensity
// shift with effect_size for the pd class, plus voxel noise. Classes are
// balanced; the two class distributions coincide at effect_size 0.
DatasetManifest synth_generate(const SynthOptions& options);

Volume load_volume(const std::string& path,
                   std::array<double, 3> voxel_size_mm);

}  // namespace kanlab
