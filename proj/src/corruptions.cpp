#include "vqla/corruptions.hpp"

#include <jpeglib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "vqla/error.hpp"

namespace vqla::corruptions {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

using Rng = std::mt19937_64;

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

Image clipped(Image img) {
  for (auto& v : img.data) v = clip01(v);
  return img;
}

// Clamp-to-edge bilinear sample of one channel.
double sample(const Image& img, double y, double x, int c) {
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, img.height - 1);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - y0;
  const double fx = x - x0;
  return (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
         fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
}

Image convolve(const Image& img, const std::vector<std::vector<double>>& kernel) {
  const int r = static_cast<int>(kernel.size()) / 2;
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        double s = 0.0;
        for (int dy = -r; dy <= r; ++dy) {
          for (int dx = -r; dx <= r; ++dx) {
            const int yy = std::clamp(y + dy, 0, img.height - 1);
            const int xx = std::clamp(x + dx, 0, img.width - 1);
            s += kernel[dy + r][dx + r] * img.at(yy, xx, c);
          }
        }
        out.at(y, x, c) = s;
      }
    }
  }
  return out;
}

std::vector<double> gaussian_kernel_1d(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  return k;
}

Image gaussian_filter(const Image& img, double sigma) {
  if (sigma <= 0) return img;
  const auto k = gaussian_kernel_1d(sigma);
  const int r = static_cast<int>(k.size()) / 2;
  Image tmp(img.height, img.width, img.channels);
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        double s = 0.0;
        for (int i = -r; i <= r; ++i) s += k[i + r] * img.at(y, std::clamp(x + i, 0, img.width - 1), c);
        tmp.at(y, x, c) = s;
      }
    }
  }
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        double s = 0.0;
        for (int i = -r; i <= r; ++i) s += k[i + r] * tmp.at(std::clamp(y + i, 0, img.height - 1), x, c);
        out.at(y, x, c) = s;
      }
    }
  }
  return out;
}

// Low-frequency value noise in [0, 1]: bilinear upsampling of random lattices
// at two octaves.
std::vector<double> smooth_field(int h, int w, int cells, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> field(static_cast<size_t>(h) * w, 0.0);
  double amp = 1.0;
  for (int octave = 0; octave < 2; ++octave) {
    const int n = cells << octave;
    std::vector<double> lattice(static_cast<size_t>(n + 1) * (n + 1));
    for (auto& v : lattice) v = u(rng);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double gy = static_cast<double>(y) / h * n;
        const double gx = static_cast<double>(x) / w * n;
        const int y0 = static_cast<int>(gy);
        const int x0 = static_cast<int>(gx);
        const double fy = gy - y0;
        const double fx = gx - x0;
        auto at = [&](int yy, int xx) { return lattice[static_cast<size_t>(yy) * (n + 1) + xx]; };
        const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                         fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        field[static_cast<size_t>(y) * w + x] += amp * v;
      }
    }
    amp *= 0.5;
  }
  const auto [mn, mx] = std::minmax_element(field.begin(), field.end());
  const double lo = *mn;
  const double span = std::max(*mx - lo, 1e-12);
  for (auto& v : field) v = (v - lo) / span;
  return field;
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0.0;
  if (d == 0) {
    h = 0;
  } else if (mx == r) {
    h = std::fmod((g - b) / d + 6.0, 6.0);
  } else if (mx == g) {
    h = (b - r) / d + 2.0;
  } else {
    h = (r - g) / d + 4.0;
  }
  h /= 6.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s);
  const double q = v * (1 - s * f);
  const double t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

template <class F>
Image map_hsv(const Image& img, F f) {
  Image out = img;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double h, s, v;
      rgb_to_hsv(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2), h, s, v);
      f(h, s, v);
      hsv_to_rgb(h, clip01(s), clip01(v), out.at(y, x, 0), out.at(y, x, 1), out.at(y, x, 2));
    }
  }
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

Image jpeg_roundtrip(const Image& img, int quality) {
  const auto bytes = to_bytes(img);
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  {
    jpeg_compress_struct cinfo;
    JpegErrorManager jerr;
    cinfo.err = jpeg_std_error(&jerr.base);
    jerr.base.error_exit = jpeg_error_exit;
    if (setjmp(jerr.jump)) {
      jpeg_destroy_compress(&cinfo);
      std::free(buffer);
      throw IoError("JPEG encode failed");
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &buffer, &size);
    cinfo.image_width = static_cast<JDIMENSION>(img.width);
    cinfo.image_height = static_cast<JDIMENSION>(img.height);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
      JSAMPROW row = const_cast<JSAMPROW>(bytes.data() + static_cast<size_t>(cinfo.next_scanline) * img.width * 3);
      jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
  }
  std::vector<std::uint8_t> decoded(bytes.size());
  {
    jpeg_decompress_struct dinfo;
    JpegErrorManager jerr;
    dinfo.err = jpeg_std_error(&jerr.base);
    jerr.base.error_exit = jpeg_error_exit;
    if (setjmp(jerr.jump)) {
      jpeg_destroy_decompress(&dinfo);
      std::free(buffer);
      throw IoError("JPEG decode failed");
    }
    jpeg_create_decompress(&dinfo);
    jpeg_mem_src(&dinfo, buffer, size);
    jpeg_read_header(&dinfo, TRUE);
    dinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&dinfo);
    while (dinfo.output_scanline < dinfo.output_height) {
      JSAMPROW row = decoded.data() + static_cast<size_t>(dinfo.output_scanline) * img.width * 3;
      jpeg_read_scanlines(&dinfo, &row, 1);
    }
    jpeg_finish_decompress(&dinfo);
    jpeg_destroy_decompress(&dinfo);
  }
  std::free(buffer);
  return from_bytes(decoded, img.height, img.width, 3);
}

// Severity ladders, index = severity - 1. Pixel-scale parameters follow the
// small-image variant of the common corruptions, adjusted where the original
// ladder is not monotone in distortion energy.
constexpr std::array<double, 5> kGaussianNoise = {0.04, 0.06, 0.08, 0.09, 0.10};
constexpr std::array<double, 5> kShotNoise = {500, 250, 100, 75, 50};
constexpr std::array<double, 5> kImpulseNoise = {0.01, 0.02, 0.03, 0.05, 0.07};
constexpr std::array<double, 5> kSpeckleNoise = {0.06, 0.10, 0.12, 0.16, 0.20};
constexpr std::array<double, 5> kDefocusRadius = {1.0, 1.5, 2.0, 2.5, 3.0};
constexpr std::array<double, 5> kGaussianBlur = {0.4, 0.6, 0.7, 0.8, 1.0};
constexpr std::array<std::array<double, 3>, 5> kGlassBlur = {{{0.5, 1, 1}, {0.5, 1, 2}, {0.5, 1, 3}, {0.5, 2, 2}, {0.5, 2, 3}}};
constexpr std::array<double, 5> kMotionSigma = {1.0, 1.5, 2.0, 2.5, 3.0};
constexpr std::array<double, 5> kZoomMax = {1.06, 1.11, 1.16, 1.21, 1.26};
constexpr std::array<int, 5> kBleedingBlobs = {2, 4, 6, 8, 10};
constexpr std::array<double, 5> kBleedingOpacity = {0.4, 0.5, 0.65, 0.8, 0.9};
constexpr std::array<double, 5> kBrightness = {0.05, 0.10, 0.15, 0.20, 0.30};
constexpr std::array<double, 5> kSmokeOpacity = {0.2, 0.35, 0.5, 0.65, 0.8};
constexpr std::array<double, 5> kSpatterThreshold = {0.80, 0.72, 0.65, 0.58, 0.50};
constexpr std::array<double, 5> kSpatterOpacity = {0.5, 0.55, 0.6, 0.65, 0.7};
constexpr std::array<double, 5> kContrast = {0.75, 0.5, 0.4, 0.3, 0.15};
constexpr std::array<double, 5> kElasticAlpha = {1.0, 1.5, 2.0, 2.5, 3.0};
constexpr std::array<double, 5> kGamma = {1.5, 2.0, 2.5, 3.0, 3.5};
constexpr std::array<int, 5> kJpegQuality = {25, 18, 15, 10, 7};
constexpr std::array<int, 5> kPixelateBlock = {2, 3, 4, 5, 6};
constexpr std::array<std::array<double, 2>, 5> kSaturate = {{{1.5, 0}, {2, 0}, {3, 0.05}, {5, 0.1}, {10, 0.2}}};

Image additive_noise(const Image& img, double scale, Rng& rng, bool multiplicative) {
  std::normal_distribution<double> n(0.0, 1.0);
  Image out = img;
  for (auto& v : out.data) v = clip01(v + (multiplicative ? v : 1.0) * scale * n(rng));
  return out;
}

Image shot_noise(const Image& img, double photons, Rng& rng) {
  Image out = img;
  for (auto& v : out.data) {
    const double lambda = std::max(v, 0.0) * photons;
    v = lambda > 0 ? clip01(static_cast<double>(std::poisson_distribution<long>(lambda)(rng)) / photons) : 0.0;
  }
  return out;
}

Image impulse_noise(const Image& img, double amount, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image out = img;
  for (auto& v : out.data) {
    const double hit = u(rng);
    const double salt = u(rng);
    if (hit < amount) v = salt < 0.5 ? 0.0 : 1.0;
  }
  return out;
}

Image defocus_blur(const Image& img, double radius) {
  const int r = static_cast<int>(std::ceil(radius));
  std::vector<std::vector<double>> k(2 * r + 1, std::vector<double>(2 * r + 1, 0.0));
  double s = 0.0;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      if (dx * dx + dy * dy <= radius * radius) s += k[dy + r][dx + r] = 1.0;
    }
  }
  for (auto& row : k) {
    for (auto& v : row) v /= s;
  }
  return gaussian_filter(convolve(img, k), 0.5);
}

Image glass_blur(const Image& img, const std::array<double, 3>& p, Rng& rng) {
  const double sigma = p[0];
  const int delta = static_cast<int>(p[1]);
  const int iterations = static_cast<int>(p[2]);
  Image out = gaussian_filter(img, sigma);
  std::uniform_int_distribution<int> d(-delta, delta - 1);
  for (int it = 0; it < iterations; ++it) {
    for (int y = img.height - delta; y > delta; --y) {
      for (int x = img.width - delta; x > delta; --x) {
        const int yy = y + d(rng);
        const int xx = x + d(rng);
        for (int c = 0; c < img.channels; ++c) std::swap(out.at(y - 1, x - 1, c), out.at(yy - 1, xx - 1, c));
      }
    }
  }
  return gaussian_filter(out, sigma);
}

Image motion_blur(const Image& img, double sigma, Rng& rng) {
  const double angle = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
  const int len = static_cast<int>(std::ceil(3.0 * sigma));
  const double dy = std::sin(angle);
  const double dx = std::cos(angle);
  std::vector<double> w(len + 1);
  double s = 0.0;
  for (int t = 0; t <= len; ++t) s += w[t] = std::exp(-0.5 * t * t / (sigma * sigma));
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int t = 0; t <= len; ++t) acc += w[t] * sample(img, y - t * dy, x - t * dx, c);
        out.at(y, x, c) = acc / s;
      }
    }
  }
  return out;
}

Image zoom_blur(const Image& img, double max_zoom) {
  Image acc = img;
  int count = 1;
  const double cy = 0.5 * (img.height - 1);
  const double cx = 0.5 * (img.width - 1);
  for (double z = 1.01; z < max_zoom - 1e-9; z += 0.01) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        for (int c = 0; c < img.channels; ++c) acc.at(y, x, c) += sample(img, cy + (y - cy) / z, cx + (x - cx) / z, c);
      }
    }
    ++count;
  }
  for (auto& v : acc.data) v /= count;
  return acc;
}

Image bleeding(const Image& img, int blobs, double opacity, Rng& rng) {
  // Draw the full set once so lower severities use a prefix of the same blobs.
  std::uniform_real_distribution<double> u(0.0, 1.0);
  struct Blob {
    double y, x, radius;
  };
  std::vector<Blob> all;
  const double size = std::min(img.height, img.width);
  for (int i = 0; i < kBleedingBlobs.back(); ++i) all.push_back({u(rng) * img.height, u(rng) * img.width, size * (0.06 + 0.1 * u(rng))});
  const std::array<double, 3> blood = {0.45, 0.02, 0.03};
  Image out = img;
  for (int i = 0; i < blobs; ++i) {
    const auto& b = all[i];
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        const double d = std::hypot(y + 0.5 - b.y, x + 0.5 - b.x) / b.radius;
        const double edge = std::clamp(1.5 - d, 0.0, 1.0);  // soft rim between 0.5r and 1.5r
        const double a = opacity * edge * edge * (3 - 2 * edge);
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = (1 - a) * out.at(y, x, c) + a * blood[c];
      }
    }
  }
  return out;
}

Image smoke(const Image& img, double opacity, Rng& rng) {
  const auto field = smooth_field(img.height, img.width, 3, rng);
  Image out = img;
  const double gray = 0.75;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double a = opacity * (0.3 + 0.7 * field[static_cast<size_t>(y) * img.width + x]);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = (1 - a) * out.at(y, x, c) + a * gray;
    }
  }
  return out;
}

Image spatter(const Image& img, double threshold, double opacity, Rng& rng) {
  const auto field = smooth_field(img.height, img.width, 6, rng);
  const std::array<double, 3> mud = {0.42, 0.36, 0.28};
  Image out = img;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (field[static_cast<size_t>(y) * img.width + x] < threshold) continue;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = (1 - opacity) * out.at(y, x, c) + opacity * mud[c];
    }
  }
  return out;
}

Image contrast(const Image& img, double c) {
  double mean = 0.0;
  for (double v : img.data) mean += v;
  mean /= static_cast<double>(img.data.size());
  Image out = img;
  for (auto& v : out.data) v = (v - mean) * c + mean;
  return out;
}

Image elastic(const Image& img, double alpha, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Image dy(img.height, img.width, 1);
  Image dx(img.height, img.width, 1);
  for (auto& v : dy.data) v = u(rng);
  for (auto& v : dx.data) v = u(rng);
  const double smooth = 0.08 * std::min(img.height, img.width);
  dy = gaussian_filter(dy, smooth);
  dx = gaussian_filter(dx, smooth);
  // Normalize the field so alpha is the peak displacement in pixels.
  double peak = 1e-12;
  for (size_t i = 0; i < dy.data.size(); ++i) peak = std::max(peak, std::hypot(dy.data[i], dx.data[i]));
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double sy = y + alpha * dy.at(y, x, 0) / peak;
      const double sx = x + alpha * dx.at(y, x, 0) / peak;
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = sample(img, sy, sx, c);
    }
  }
  return out;
}

Image pixelate(const Image& img, int block) {
  Image out = img;
  for (int by = 0; by < img.height; by += block) {
    for (int bx = 0; bx < img.width; bx += block) {
      const int ey = std::min(by + block, img.height);
      const int ex = std::min(bx + block, img.width);
      for (int c = 0; c < img.channels; ++c) {
        double s = 0.0;
        for (int y = by; y < ey; ++y) {
          for (int x = bx; x < ex; ++x) s += img.at(y, x, c);
        }
        s /= (ey - by) * (ex - bx);
        for (int y = by; y < ey; ++y) {
          for (int x = bx; x < ex; ++x) out.at(y, x, c) = s;
        }
      }
    }
  }
  return out;
}

}  // namespace

const char* category_name(Category c) {
  switch (c) {
    case Category::kNoise: return "noise";
    case Category::kBlur: return "blur";
    case Category::kOcclusion: return "occlusion";
    case Category::kDigital: return "digital";
  }
  return "?";
}

const std::vector<KindInfo>& registry() {
  static const std::vector<KindInfo> kinds = {
      {"gaussian_noise", Category::kNoise}, {"shot_noise", Category::kNoise},
      {"impulse_noise", Category::kNoise},  {"speckle_noise", Category::kNoise},
      {"defocus_blur", Category::kBlur},    {"gaussian_blur", Category::kBlur},
      {"glass_blur", Category::kBlur},      {"motion_blur", Category::kBlur},
      {"zoom_blur", Category::kBlur},       {"bleeding", Category::kOcclusion},
      {"brightness", Category::kOcclusion}, {"smoke", Category::kOcclusion},
      {"spatter", Category::kOcclusion},    {"contrast", Category::kDigital},
      {"elastic", Category::kDigital},      {"gamma", Category::kDigital},
      {"jpeg", Category::kDigital},         {"pixelate", Category::kDigital},
      {"saturate", Category::kDigital},
  };
  return kinds;
}

std::vector<std::string> all_kinds() {
  std::vector<std::string> out;
  for (const auto& k : registry()) out.push_back(k.name);
  return out;
}

bool is_kind(const std::string& name) {
  return std::any_of(registry().begin(), registry().end(), [&](const KindInfo& k) { return k.name == name; });
}

Category category_of(const std::string& kind) {
  for (const auto& k : registry()) {
    if (k.name == kind) return k.category;
  }
  throw ConfigError("unknown corruption kind: " + kind);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Image corrupt(const Image& image, const CorruptionSpec& spec, const std::string& frame_id) {
  if (!is_kind(spec.kind)) throw ConfigError("unknown corruption kind: " + spec.kind);
  if (spec.severity < 0 || spec.severity > kMaxSeverity) {
    throw ConfigError("severity must be in 0.." + std::to_string(kMaxSeverity));
  }
  if (image.channels != 3) throw ShapeError("corrupt: expected an RGB image");
  if (spec.severity == 0) return image;
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(fnv1a(frame_id)), static_cast<std::uint32_t>(fnv1a(frame_id) >> 32),
                    static_cast<std::uint32_t>(fnv1a(spec.kind))};
  Rng rng(seq);
  const size_t s = static_cast<size_t>(spec.severity - 1);
  const std::string& k = spec.kind;
  Image out;
  if (k == "gaussian_noise") {
    out = additive_noise(image, kGaussianNoise[s], rng, false);
  } else if (k == "shot_noise") {
    out = shot_noise(image, kShotNoise[s], rng);
  } else if (k == "impulse_noise") {
    out = impulse_noise(image, kImpulseNoise[s], rng);
  } else if (k == "speckle_noise") {
    out = additive_noise(image, kSpeckleNoise[s], rng, true);
  } else if (k == "defocus_blur") {
    out = defocus_blur(image, kDefocusRadius[s]);
  } else if (k == "gaussian_blur") {
    out = gaussian_filter(image, kGaussianBlur[s]);
  } else if (k == "glass_blur") {
    out = glass_blur(image, kGlassBlur[s], rng);
  } else if (k == "motion_blur") {
    out = motion_blur(image, kMotionSigma[s], rng);
  } else if (k == "zoom_blur") {
    out = zoom_blur(image, kZoomMax[s]);
  } else if (k == "bleeding") {
    out = bleeding(image, kBleedingBlobs[s], kBleedingOpacity[s], rng);
  } else if (k == "brightness") {
    out = map_hsv(image, [c = kBrightness[s]](double&, double&, double& v) { v += c; });
  } else if (k == "smoke") {
    out = smoke(image, kSmokeOpacity[s], rng);
  } else if (k == "spatter") {
    out = spatter(image, kSpatterThreshold[s], kSpatterOpacity[s], rng);
  } else if (k == "contrast") {
    out = contrast(image, kContrast[s]);
  } else if (k == "elastic") {
    out = elastic(image, kElasticAlpha[s], rng);
  } else if (k == "gamma") {
    out = image;
    for (auto& v : out.data) v = std::pow(clip01(v), kGamma[s]);
  } else if (k == "jpeg") {
    out = jpeg_roundtrip(image, kJpegQuality[s]);
  } else if (k == "pixelate") {
    out = pixelate(image, kPixelateBlock[s]);
  } else {
    out = map_hsv(image, [p = kSaturate[s]](double&, double& sat, double&) { sat = sat * p[0] + p[1]; });
  }
  return clipped(std::move(out));
}

std::vector<std::string> parse_kinds(const std::string& s) {
  if (s == "all") return all_kinds();
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    if (!is_kind(item)) throw ConfigError("unknown corruption kind: " + item);
    out.push_back(item);
  }
  if (out.empty()) throw ConfigError("no corruption kinds selected");
  return out;
}

std::vector<int> parse_severities(const std::string& s) {
  std::vector<int> out;
  const auto dots = s.find("..");
  try {
    if (dots != std::string::npos) {
      const int a = std::stoi(s.substr(0, dots));
      const int b = std::stoi(s.substr(dots + 2));
      for (int v = a; v <= b; ++v) out.push_back(v);
    } else {
      std::stringstream ss(s);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
      }
    }
  } catch (const std::exception&) {
    throw ConfigError("bad severity list: " + s);
  }
  if (out.empty()) throw ConfigError("no severities selected");
  for (int v : out) {
    if (v < 0 || v > kMaxSeverity) throw ConfigError("severity out of range: " + std::to_string(v));
  }
  return out;
}

CorruptReport corrupt_dataset(const dataio::DatasetManifest& manifest, const std::vector<std::string>& kinds,
                              const std::vector<int>& severities, std::uint64_t seed,
                              const std::filesystem::path& out_dir, const std::map<std::string, Image>* cache) {
  for (const auto& k : kinds) {
    if (!is_kind(k)) throw ConfigError("unknown corruption kind: " + k);
  }
  CorruptReport report;
  dataio::DatasetManifest combined = manifest;
  combined.records.clear();
  combined.base_dir = out_dir;
  combined.image_dir = ".";

  // Load each unique frame once.
  std::map<std::string, Image> clean;
  std::set<std::string> unreadable;
  for (const auto& r : manifest.records) {
    if (clean.count(r.frame_id) || unreadable.count(r.frame_id)) continue;
    if (cache) {
      auto it = cache->find(r.frame_id);
      if (it != cache->end()) {
        clean.emplace(r.frame_id, it->second);
        continue;
      }
    }
    try {
      clean.emplace(r.frame_id, read_image(manifest.image_path(r)));
    } catch (const Error& e) {
      unreadable.insert(r.frame_id);
      report.failures.push_back(std::string("read ") + r.frame_id + ": " + e.what());
    }
  }

  for (const auto& kind : kinds) {
    for (int sev : severities) {
      const auto rel = std::filesystem::path(kind) / std::to_string(sev);
      const auto dir = out_dir / rel;
      std::filesystem::create_directories(dir);
      dataio::DatasetManifest sub = manifest;
      sub.records.clear();
      sub.image_dir = ".";
      for (const auto& [frame, img] : clean) {
        try {
          const Image out = corrupt(img, {kind, sev, seed}, frame);
          write_image(dir / (frame + manifest.image_ext), out);
          ++report.written;
        } catch (const Error& e) {
          report.failures.push_back("write " + (rel / frame).string() + ": " + e.what());
        }
      }
      for (const auto& r : manifest.records) {
        if (!clean.count(r.frame_id)) continue;
        sub.records.push_back(r);
        auto cr = r;
        cr.frame_id = (rel / r.frame_id).string();
        cr.corruption = kind;
        cr.severity = sev;
        combined.records.push_back(cr);
      }
      dataio::save_manifest(dir / "manifest.txt", sub);
    }
  }
  report.manifest = out_dir / "manifest.txt";
  dataio::save_manifest(report.manifest, combined);
  return report;
}

}  // namespace vqla::corruptions
