#pragma once

// Independent reference implementations used only by the tests. They follow
// the textbook definitions directly and share no code with the library.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <random>
#include <set>
#include <vector>

namespace oracle {

// out[b][o][z][y][x] = bias[o] + sum_{c,kz,ky,kx} w[o][c][kz][ky][kx] * in[b][c][z*s+kz-p][y*s+ky-p][x*s+kx-p]
inline std::vector<double> conv3d(const std::vector<double>& in, std::size_t B, std::size_t Cin, std::size_t D,
                                  std::size_t H, std::size_t W, const std::vector<double>& w, std::size_t Cout,
                                  std::size_t K, const std::vector<double>& bias, std::size_t stride,
                                  std::size_t pad, std::array<std::size_t, 3>& out_dims) {
  const long OD = (long(D) + 2 * long(pad) - long(K)) / long(stride) + 1;
  const long OH = (long(H) + 2 * long(pad) - long(K)) / long(stride) + 1;
  const long OW = (long(W) + 2 * long(pad) - long(K)) / long(stride) + 1;
  out_dims = {std::size_t(OD), std::size_t(OH), std::size_t(OW)};
  std::vector<double> out(B * Cout * std::size_t(OD * OH * OW), 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Cout; ++o)
      for (long z = 0; z < OD; ++z)
        for (long y = 0; y < OH; ++y)
          for (long x = 0; x < OW; ++x) {
            double acc = bias[o];
            for (std::size_t c = 0; c < Cin; ++c)
              for (std::size_t kz = 0; kz < K; ++kz)
                for (std::size_t ky = 0; ky < K; ++ky)
                  for (std::size_t kx = 0; kx < K; ++kx) {
                    const long iz = z * long(stride) + long(kz) - long(pad);
                    const long iy = y * long(stride) + long(ky) - long(pad);
                    const long ix = x * long(stride) + long(kx) - long(pad);
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= long(D) || iy >= long(H) || ix >= long(W)) continue;
                    acc += w[(((o * Cin + c) * K + kz) * K + ky) * K + kx] *
                           in[(((b * Cin + c) * D + std::size_t(iz)) * H + std::size_t(iy)) * W + std::size_t(ix)];
                  }
            out[(((b * Cout + o) * std::size_t(OD) + std::size_t(z)) * std::size_t(OH) + std::size_t(y)) *
                    std::size_t(OW) +
                std::size_t(x)] = acc;
          }
  return out;
}

// Scatter form of the stride-2, 2x2x2 transposed convolution: every input
// voxel adds w * value into its 2x2x2 output block. Weight is [Cin,Cout,2,2,2].
inline std::vector<double> transposed_conv3d(const std::vector<double>& in, std::size_t B, std::size_t Cin,
                                             std::size_t D, std::size_t H, std::size_t W,
                                             const std::vector<double>& w, std::size_t Cout,
                                             const std::vector<double>& bias) {
  const std::size_t OD = 2 * D, OH = 2 * H, OW = 2 * W;
  std::vector<double> out(B * Cout * OD * OH * OW, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Cout; ++o)
      for (std::size_t i = 0; i < OD * OH * OW; ++i) out[(b * Cout + o) * OD * OH * OW + i] = bias[o];
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < Cin; ++c)
      for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const double v = in[(((b * Cin + c) * D + z) * H + y) * W + x];
            for (std::size_t o = 0; o < Cout; ++o)
              for (std::size_t kz = 0; kz < 2; ++kz)
                for (std::size_t ky = 0; ky < 2; ++ky)
                  for (std::size_t kx = 0; kx < 2; ++kx) {
                    const std::size_t oz = 2 * z + kz, oy = 2 * y + ky, ox = 2 * x + kx;
                    out[(((b * Cout + o) * OD + oz) * OH + oy) * OW + ox] +=
                        v * w[(((c * Cout + o) * 2 + kz) * 2 + ky) * 2 + kx];
                  }
          }
  return out;
}

// Breadth-first flood fill over the 18-neighbourhood (face and edge
// neighbours, no corners). Returns one label per voxel, -1 for background,
// labels numbered in order of the first voxel reached in z,y,x scan order.
inline std::vector<int> flood_fill_18(const std::vector<std::uint8_t>& bits, int D, int H, int W) {
  std::vector<int> label(bits.size(), -1);
  int next = 0;
  auto idx = [&](int z, int y, int x) { return std::size_t((z * H + y) * W + x); };
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (!bits[idx(z, y, x)] || label[idx(z, y, x)] >= 0) continue;
        std::deque<std::array<int, 3>> q{{z, y, x}};
        label[idx(z, y, x)] = next;
        while (!q.empty()) {
          const auto [cz, cy, cx] = q.front();
          q.pop_front();
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int nonzero = (dz != 0) + (dy != 0) + (dx != 0);
                if (nonzero == 0 || nonzero == 3) continue;
                const int nz = cz + dz, ny = cy + dy, nx = cx + dx;
                if (nz < 0 || ny < 0 || nx < 0 || nz >= D || ny >= H || nx >= W) continue;
                if (!bits[idx(nz, ny, nx)] || label[idx(nz, ny, nx)] >= 0) continue;
                label[idx(nz, ny, nx)] = next;
                q.push_back({nz, ny, nx});
              }
        }
        ++next;
      }
  return label;
}

// The partition induced by a labelling, as a set of voxel-index sets.
inline std::set<std::set<std::size_t>> partition(const std::vector<int>& label) {
  std::vector<std::set<std::size_t>> groups;
  for (std::size_t i = 0; i < label.size(); ++i) {
    if (label[i] < 0) continue;
    if (std::size_t(label[i]) >= groups.size()) groups.resize(std::size_t(label[i]) + 1);
    groups[std::size_t(label[i])].insert(i);
  }
  return {groups.begin(), groups.end()};
}

// Central difference of f with respect to the scalar x, restored afterwards.
template <typename F>
double central_diff(F&& f, double& x, double h = 1e-4) {
  const double orig = x;
  x = orig + h;
  const double up = f();
  x = orig - h;
  const double down = f();
  x = orig;
  return (up - down) / (2 * h);
}

inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

inline std::vector<std::uint8_t> random_bits(std::size_t n, double density, std::mt19937_64& rng) {
  std::bernoulli_distribution on(density);
  std::vector<std::uint8_t> out(n);
  for (auto& b : out) b = on(rng) ? 1 : 0;
  return out;
}

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> out(n);
  for (auto& v : out) v = g(rng);
  return out;
}

}  // namespace oracle
