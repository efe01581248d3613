#pragma once

// Row-major accumulating matrix products used by matmul and conv3d.
// Loop orders are fixed so results are reproducible bit for bit. The narrow
// dimension N (output channels) is dispatched to compile-time widths so the
// inner loops unroll.

#include <cstddef>
#include <utility>

namespace dir3d::detail {

template <typename F>
void dispatch_width(std::size_t n, F&& f) {
  switch (n) {
#define DIR3D_WIDTH(W) \
  case W: f(std::integral_constant<std::size_t, W>{}); return;
    DIR3D_WIDTH(1) DIR3D_WIDTH(2) DIR3D_WIDTH(3) DIR3D_WIDTH(4) DIR3D_WIDTH(5) DIR3D_WIDTH(6) DIR3D_WIDTH(7)
    DIR3D_WIDTH(8) DIR3D_WIDTH(12) DIR3D_WIDTH(16) DIR3D_WIDTH(24) DIR3D_WIDTH(32)
#undef DIR3D_WIDTH
    default: f(std::integral_constant<std::size_t, 0>{});
  }
}

// C[M x N] += A[M x K] * B[K x N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  dispatch_width(N, [&](auto width) {
    constexpr std::size_t W = decltype(width)::value;
    if constexpr (W == 0) {
      for (std::size_t m = 0; m < M; ++m) {
        const T* a = A + m * K;
        T* c = C + m * N;
        for (std::size_t k = 0; k < K; ++k) {
          const T av = a[k];
          if (av == T(0)) continue;
          const T* b = B + k * N;
          for (std::size_t n = 0; n < N; ++n) c[n] += av * b[n];
        }
      }
    } else {
      for (std::size_t m = 0; m < M; ++m) {
        const T* a = A + m * K;
        T acc[W] = {};
        for (std::size_t k = 0; k < K; ++k) {
          const T av = a[k];
          const T* b = B + k * W;
          for (std::size_t n = 0; n < W; ++n) acc[n] += av * b[n];
        }
        T* c = C + m * W;
        for (std::size_t n = 0; n < W; ++n) c[n] += acc[n];
      }
    }
  });
}

// C[K x N] += A[M x K]^T * D[M x N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* D, T* C) {
  dispatch_width(N, [&](auto width) {
    constexpr std::size_t W = decltype(width)::value;
    if constexpr (W == 0) {
      for (std::size_t m = 0; m < M; ++m) {
        const T* a = A + m * K;
        const T* d = D + m * N;
        for (std::size_t k = 0; k < K; ++k) {
          const T av = a[k];
          if (av == T(0)) continue;
          T* c = C + k * N;
          for (std::size_t n = 0; n < N; ++n) c[n] += av * d[n];
        }
      }
    } else {
      for (std::size_t m = 0; m < M; ++m) {
        const T* a = A + m * K;
        T d[W];
        for (std::size_t n = 0; n < W; ++n) d[n] = D[m * W + n];
        for (std::size_t k = 0; k < K; ++k) {
          const T av = a[k];
          T* c = C + k * W;
          for (std::size_t n = 0; n < W; ++n) c[n] += av * d[n];
        }
      }
    }
  });
}

// C[M x K] += D[M x N] * B[K x N]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* D, const T* B, T* C) {
  dispatch_width(N, [&](auto width) {
    constexpr std::size_t W = decltype(width)::value;
    for (std::size_t m = 0; m < M; ++m) {
      const T* d = D + m * N;
      T* c = C + m * K;
      for (std::size_t k = 0; k < K; ++k) {
        const T* b = B + k * N;
        T acc = T(0);
        if constexpr (W == 0) {
          for (std::size_t n = 0; n < N; ++n) acc += d[n] * b[n];
        } else {
          for (std::size_t n = 0; n < W; ++n) acc += d[n] * b[n];
        }
        c[k] += acc;
      }
    }
  });
}

}  // namespace dir3d::detail
