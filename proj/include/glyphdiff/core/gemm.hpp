#pragma once

#include <Eigen/Core>

namespace glyphdiff {

// Row-major GEMM wrappers over Eigen. Single-threaded Eigen with AVX on this
// kind of shape profile (im2col columns, attention logits) beats the BLAS
// builds we have around, and keeps the library header-only.

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C = A(MxK) * B(KxN)
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
    ConstMatMap<T> ma(a, m, k), mb(b, k, n);
    MatMap<T> mc(c, m, n);
    mc.noalias() = ma * mb;
}

// C += A(MxK) * B(KxN)
template <typename T>
void gemm_nn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    ConstMatMap<T> ma(a, m, k), mb(b, k, n);
    MatMap<T> mc(c, m, n);
    mc.noalias() += ma * mb;
}

// C = A(MxK) * B(NxK)^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
    ConstMatMap<T> ma(a, m, k), mb(b, n, k);
    MatMap<T> mc(c, m, n);
    mc.noalias() = ma * mb.transpose();
}

// C += A(MxK) * B(NxK)^T
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    ConstMatMap<T> ma(a, m, k), mb(b, n, k);
    MatMap<T> mc(c, m, n);
    mc.noalias() += ma * mb.transpose();
}

// C += A(KxM)^T * B(KxN)
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    ConstMatMap<T> ma(a, k, m), mb(b, k, n);
    MatMap<T> mc(c, m, n);
    mc.noalias() += ma.transpose() * mb;
}

}  // namespace glyphdiff
