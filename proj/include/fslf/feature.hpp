#ifndef FSLF_FEATURE_HPP
#define FSLF_FEATURE_HPP

#include <array>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fslf/cnn.hpp"
#include "fslf/grid.hpp"
#include "fslf/volume_ops.hpp"

namespace fslf {

struct FeatureError : std::runtime_error {
  explicit FeatureError(const std::string& msg) : std::runtime_error(msg) {}
};

// Segment layout of the augmented vector: intensity | gradient | signature.
constexpr int kIntensityDim = 125;
constexpr int kGradientDim = 125;
constexpr int kSignatureDim = 18;
constexpr int kFeatureDim = kIntensityDim + kGradientDim + kSignatureDim;
constexpr std::array<int, 3> kSegmentLengths = {kIntensityDim, kGradientDim,
                                                kSignatureDim};
constexpr std::array<int, 3> kSegmentOffsets = {0, kIntensityDim,
                                                kIntensityDim + kGradientDim};

struct AugmentedFeature {
  std::array<float, kFeatureDim> values;
  int image_id = -1;
  uint32_t voxel = 0;  // linear index in the source image
  int8_t label = -1;   // 0/1 for atlas entries, -1 when unlabeled
};

// One voxel's intensity patch, gradient patch and CNN signature concatenated.
inline AugmentedFeature build_feature(const VolumeF& intensity,
                                      const VolumeF& gradient,
                                      const SignatureNet& net, int x, int y,
                                      int z) {
  if (!intensity.same_dims(gradient))
    throw FeatureError("build_feature: intensity/gradient dims differ");
  AugmentedFeature f;
  auto ip = extract_patch3(intensity, x, y, z, 5);
  auto gp = extract_patch3(gradient, x, y, z, 5);
  auto axial = extract_patch2(intensity, x, y, z, net.input_side);
  auto fwd = forward(net, axial);
  for (int i = 0; i < kIntensityDim; ++i) f.values[i] = ip[i];
  for (int i = 0; i < kGradientDim; ++i) f.values[kSegmentOffsets[1] + i] = gp[i];
  for (int i = 0; i < kSignatureDim; ++i)
    f.values[kSegmentOffsets[2] + i] = float(fwd.signature[i]);
  f.voxel = uint32_t(intensity.index(x, y, z));
  return f;
}

struct FeatureBank {
  std::vector<AugmentedFeature> features;
};

struct AtlasImage {
  VolumeF intensity;
  LabelVolume labels;
};

// Labeled atlas features for every voxel inside the SDM band of the given
// structure (|d| <= roi_radius), across all atlases.
inline FeatureBank build_bank(const std::vector<AtlasImage>& atlases,
                              int structure, const SignatureNet& net,
                              double roi_radius = 4.0) {
  if (atlases.empty()) throw FeatureError("build_bank: no atlases");
  FeatureBank bank;
  for (size_t a = 0; a < atlases.size(); ++a) {
    const AtlasImage& img = atlases[a];
    VolumeF grad = gradient_magnitude(img.intensity);
    Sdm sdm = signed_distance_map(img.labels, structure);
    for (int z = 0; z < img.intensity.nz(); ++z)
      for (int y = 0; y < img.intensity.ny(); ++y)
        for (int x = 0; x < img.intensity.nx(); ++x) {
          if (std::abs(sdm.volume.at(x, y, z)) > roi_radius) continue;
          AugmentedFeature f = build_feature(img.intensity, grad, net, x, y, z);
          f.image_id = int(a);
          f.label = (img.labels.at(x, y, z) == structure) ? 1 : 0;
          bank.features.push_back(f);
        }
  }
  if (bank.features.empty())
    throw FeatureError("build_bank: empty ROI for structure " +
                       std::to_string(structure));
  return bank;
}

// ---------------------------------------------------------------------------
// FBNK cache: magic "FBNK", u32 version, u32 count, then per entry
// image_id (u32), voxel (u32), label (u8), 268 f32 values. Little-endian.

inline void save_bank(const std::string& path, const FeatureBank& bank) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("FBNK", 4);
  detail::write_u32(os, 1);
  detail::write_u32(os, uint32_t(bank.features.size()));
  for (const auto& f : bank.features) {
    detail::write_u32(os, uint32_t(f.image_id));
    detail::write_u32(os, f.voxel);
    os.put(char(f.label));
    os.write(reinterpret_cast<const char*>(f.values.data()),
             std::streamsize(sizeof(float) * kFeatureDim));
  }
  if (!os) throw IoError("short write: " + path);
}

inline FeatureBank load_bank(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FBNK", 4) != 0)
    throw IoError("not an FBNK file: " + path);
  if (detail::read_u32(is) != 1)
    throw IoError("unsupported FBNK version in " + path);
  uint32_t count = detail::read_u32(is);
  FeatureBank bank;
  bank.features.resize(count);
  for (auto& f : bank.features) {
    f.image_id = int(detail::read_u32(is));
    f.voxel = detail::read_u32(is);
    f.label = int8_t(is.get());
    is.read(reinterpret_cast<char*>(f.values.data()),
            std::streamsize(sizeof(float) * kFeatureDim));
  }
  if (!is) throw IoError("truncated FBNK file: " + path);
  return bank;
}

}  // namespace fslf

#endif  // FSLF_FEATURE_HPP
