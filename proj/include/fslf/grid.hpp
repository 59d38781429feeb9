#ifndef FSLF_GRID_HPP
#define FSLF_GRID_HPP

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fslf {

struct GridError : std::runtime_error {
  explicit GridError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class VolumeKind : uint8_t { intensity, gradient, sdm, probability, label };

// 3D scalar grid, row-major with x fastest.
template <typename T>
class Grid3 {
 public:
  Grid3() = default;
  Grid3(int nx, int ny, int nz, T fill = T{})
      : nx_(nx), ny_(ny), nz_(nz), data_(size_t(nx) * ny * nz, fill) {
    if (nx <= 0 || ny <= 0 || nz <= 0)
      throw GridError("Grid3: non-positive dimension");
  }

  int nx() const { return nx_; }
  int ny() const { return ny_; }
  int nz() const { return nz_; }
  size_t size() const { return data_.size(); }

  size_t index(int x, int y, int z) const {
    return size_t(z) * ny_ * nx_ + size_t(y) * nx_ + x;
  }
  void coords(size_t idx, int& x, int& y, int& z) const {
    x = int(idx % nx_);
    y = int((idx / nx_) % ny_);
    z = int(idx / (size_t(nx_) * ny_));
  }

  T& at(int x, int y, int z) { return data_[index(x, y, z)]; }
  const T& at(int x, int y, int z) const { return data_[index(x, y, z)]; }
  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  bool inside(int x, int y, int z) const {
    return x >= 0 && x < nx_ && y >= 0 && y < ny_ && z >= 0 && z < nz_;
  }

  // Mirror-padded access: reflects indices at the borders.
  T at_mirrored(int x, int y, int z) const {
    return data_[index(mirror(x, nx_), mirror(y, ny_), mirror(z, nz_))];
  }

  static int mirror(int i, int n) {
    if (n == 1) return 0;
    int period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
  }

  bool same_dims(const Grid3& o) const {
    return nx_ == o.nx_ && ny_ == o.ny_ && nz_ == o.nz_;
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

 private:
  int nx_ = 0, ny_ = 0, nz_ = 0;
  std::vector<T> data_;
};

using VolumeF = Grid3<float>;
using LabelVolume = Grid3<uint8_t>;

// ---------------------------------------------------------------------------
// SVOL raster format: magic "SVOL", u32 version=1, u32 nx,ny,nz,
// u8 dtype (0=f32, 1=u8), little-endian raw raster x-fastest.

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}

}  // namespace detail

inline void save_svol(const std::string& path, const VolumeF& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("SVOL", 4);
  detail::write_u32(os, 1);
  detail::write_u32(os, uint32_t(v.nx()));
  detail::write_u32(os, uint32_t(v.ny()));
  detail::write_u32(os, uint32_t(v.nz()));
  os.put(char(0));
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(v.data().data()),
           std::streamsize(v.size() * 4));
  if (!os) throw IoError("short write: " + path);
}

inline void save_svol(const std::string& path, const LabelVolume& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("SVOL", 4);
  detail::write_u32(os, 1);
  detail::write_u32(os, uint32_t(v.nx()));
  detail::write_u32(os, uint32_t(v.ny()));
  detail::write_u32(os, uint32_t(v.nz()));
  os.put(char(1));
  os.write(reinterpret_cast<const char*>(v.data().data()),
           std::streamsize(v.size()));
  if (!os) throw IoError("short write: " + path);
}

struct SvolHeader {
  uint32_t nx, ny, nz;
  uint8_t dtype;  // 0=f32, 1=u8
};

inline SvolHeader read_svol_header(std::istream& is, const std::string& path) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SVOL", 4) != 0)
    throw IoError("not an SVOL file: " + path);
  uint32_t version = detail::read_u32(is);
  if (version != 1) throw IoError("unsupported SVOL version in " + path);
  SvolHeader h;
  h.nx = detail::read_u32(is);
  h.ny = detail::read_u32(is);
  h.nz = detail::read_u32(is);
  h.dtype = uint8_t(is.get());
  if (!is) throw IoError("truncated SVOL header: " + path);
  return h;
}

inline VolumeF load_svol_f32(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  SvolHeader h = read_svol_header(is, path);
  if (h.dtype != 0) throw IoError("expected f32 SVOL: " + path);
  VolumeF v(int(h.nx), int(h.ny), int(h.nz));
  is.read(reinterpret_cast<char*>(v.data().data()),
          std::streamsize(v.size() * 4));
  if (!is) throw IoError("truncated SVOL payload: " + path);
  return v;
}

inline LabelVolume load_svol_u8(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  SvolHeader h = read_svol_header(is, path);
  if (h.dtype != 1) throw IoError("expected u8 SVOL: " + path);
  LabelVolume v(int(h.nx), int(h.ny), int(h.nz));
  is.read(reinterpret_cast<char*>(v.data().data()), std::streamsize(v.size()));
  if (!is) throw IoError("truncated SVOL payload: " + path);
  return v;
}

}  // namespace fslf

#endif  // FSLF_GRID_HPP
