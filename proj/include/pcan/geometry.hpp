#pragma once

#include <array>
#include <string>

#include "pcan/rng.hpp"

namespace pcan::geometry {

enum class BoxConvention {
  kCornerAbsolute,      // (x1, y1, x2, y2) in pixels
  kCornerNormalized,    // (x1, y1, x2, y2) in [0, 1]
  kCenterSizeNormalized // (cx, cy, w, h) in [0, 1]
};

const char* to_string(BoxConvention c);

// Axis-aligned rectangle with an explicit coordinate-convention tag.
// Degenerate (zero-area) boxes are rejected at construction; binary
// operations reject mixed conventions.
class Box {
 public:
  Box(double a, double b, double c, double d, BoxConvention conv);

  static Box corners_normalized(double x1, double y1, double x2, double y2) {
    return Box(x1, y1, x2, y2, BoxConvention::kCornerNormalized);
  }
  static Box corners_absolute(double x1, double y1, double x2, double y2) {
    return Box(x1, y1, x2, y2, BoxConvention::kCornerAbsolute);
  }
  static Box center_size_normalized(double cx, double cy, double w, double h) {
    return Box(cx, cy, w, h, BoxConvention::kCenterSizeNormalized);
  }

  BoxConvention convention() const { return conv_; }

  double x1() const;
  double y1() const;
  double x2() const;
  double y2() const;
  double cx() const;
  double cy() const;
  double width() const;
  double height() const;
  double area() const { return width() * height(); }

  // Exact convention conversions (corner <-> center-size round trips to 1e-9).
  Box to_center_size() const;
  Box to_corners() const;

  std::array<double, 4> raw() const { return {a_, b_, c_, d_}; }

 private:
  double a_, b_, c_, d_;
  BoxConvention conv_;
};

/// Intersection over union; 0 when disjoint. Boxes must share a convention.
double iou(const Box& a, const Box& b);

/// Generalized IoU: iou - (hull - union)/hull, in (-1, 1].
double giou(const Box& a, const Box& b);

/// Shifts each coordinate by uniform noise of magnitude <= scale * side
/// length, then clips to [0,1] keeping the box valid. Requires a normalized
/// box and 0 <= scale < 0.5.
Box perturb(const Box& b, double scale, pcan::Rng& rng);

}  // namespace pcan::geometry
