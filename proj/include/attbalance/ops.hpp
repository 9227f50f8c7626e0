#pragma once

#include <vector>

#include "attbalance/tensor.hpp"

namespace attbalance {

// Floor applied inside log() so attention sums of exactly 0 or 1 stay finite.
inline constexpr double kLogFloor = 1e-12;

// Binary elementwise ops accept operands of identical shape, or one operand
// with a single element which broadcasts against the other.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);  // ties route grad to a
Tensor maximum(const Tensor& a, const Tensor& b);  // ties route grad to a

Tensor neg(const Tensor& x);
Tensor log(const Tensor& x, double floor = kLogFloor);
Tensor exp(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor scale(const Tensor& x, double c);

Tensor sum_all(const Tensor& x);
Tensor mean_over_axis(const Tensor& x, int axis);
Tensor softmax(const Tensor& x, int axis);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// x: [m, n], row: n-element vector broadcast over every row of x.
Tensor add_rowvec(const Tensor& x, const Tensor& row);

Tensor matmul(const Tensor& a, const Tensor& b);

// Rowwise layer normalization with affine parameters gamma/beta of width n.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Identity forward with a deliberately wrong backward rule. Negative control
// for gradient checking; never part of a real loss.
Tensor with_corrupted_gradient(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

}  // namespace attbalance
