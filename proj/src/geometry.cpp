#include "pcan/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pcan::geometry {

const char* to_string(BoxConvention c) {
  switch (c) {
    case BoxConvention::kCornerAbsolute: return "corner-absolute";
    case BoxConvention::kCornerNormalized: return "corner-normalized";
    case BoxConvention::kCenterSizeNormalized: return "center-size-normalized";
  }
  return "?";
}

namespace {

bool is_corner(BoxConvention c) {
  return c == BoxConvention::kCornerAbsolute || c == BoxConvention::kCornerNormalized;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument("Box: " + msg);
}

}  // namespace

Box::Box(double a, double b, double c, double d, BoxConvention conv)
    : a_(a), b_(b), c_(c), d_(d), conv_(conv) {
  require(std::isfinite(a) && std::isfinite(b) && std::isfinite(c) && std::isfinite(d),
          "non-finite coordinate");
  if (is_corner(conv)) {
    require(a < c && b < d, "degenerate corner box (needs x1 < x2 and y1 < y2)");
  } else {
    require(c > 0.0 && d > 0.0, "degenerate center-size box (needs w > 0 and h > 0)");
  }
  if (conv != BoxConvention::kCornerAbsolute) {
    for (double v : {a, b, c, d})
      require(v >= 0.0 && v <= 1.0, "normalized coordinate outside [0, 1]");
  }
}

double Box::x1() const { return is_corner(conv_) ? a_ : a_ - c_ / 2.0; }
double Box::y1() const { return is_corner(conv_) ? b_ : b_ - d_ / 2.0; }
double Box::x2() const { return is_corner(conv_) ? c_ : a_ + c_ / 2.0; }
double Box::y2() const { return is_corner(conv_) ? d_ : b_ + d_ / 2.0; }
double Box::cx() const { return is_corner(conv_) ? (a_ + c_) / 2.0 : a_; }
double Box::cy() const { return is_corner(conv_) ? (b_ + d_) / 2.0 : b_; }
double Box::width() const { return is_corner(conv_) ? c_ - a_ : c_; }
double Box::height() const { return is_corner(conv_) ? d_ - b_ : d_; }

Box Box::to_center_size() const {
  require(conv_ != BoxConvention::kCornerAbsolute, "cannot convert absolute box to normalized form");
  return Box(cx(), cy(), width(), height(), BoxConvention::kCenterSizeNormalized);
}

Box Box::to_corners() const {
  if (is_corner(conv_)) return *this;
  return Box(x1(), y1(), x2(), y2(), BoxConvention::kCornerNormalized);
}

double iou(const Box& a, const Box& b) {
  require(a.convention() == b.convention(),
          std::string("convention mismatch: ") + to_string(a.convention()) + " vs " +
              to_string(b.convention()));
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return inter / uni;
}

double giou(const Box& a, const Box& b) {
  const double i = iou(a, b);
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double uni = a.area() + b.area() - ix * iy;
  const double hull = (std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1())) *
                      (std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1()));
  return i - (hull - uni) / hull;
}

Box perturb(const Box& b, double scale, pcan::Rng& rng) {
  require(b.convention() != BoxConvention::kCornerAbsolute, "perturb expects a normalized box");
  require(scale >= 0.0 && scale < 0.5, "perturb scale out of [0, 0.5)");
  const double w = b.width(), h = b.height();
  double x1 = b.x1() + rng.uniform(-scale * w, scale * w);
  double x2 = b.x2() + rng.uniform(-scale * w, scale * w);
  double y1 = b.y1() + rng.uniform(-scale * h, scale * h);
  double y2 = b.y2() + rng.uniform(-scale * h, scale * h);
  x1 = std::clamp(x1, 0.0, 1.0);
  x2 = std::clamp(x2, 0.0, 1.0);
  y1 = std::clamp(y1, 0.0, 1.0);
  y2 = std::clamp(y2, 0.0, 1.0);
  // Clipping can collapse a side when the box hugs the border; restore a
  // minimal positive extent instead of emitting a degenerate box.
  const double min_side = 1e-6;
  if (x2 - x1 < min_side) {
    const double cx = std::clamp((x1 + x2) / 2.0, min_side / 2.0, 1.0 - min_side / 2.0);
    x1 = cx - min_side / 2.0;
    x2 = cx + min_side / 2.0;
  }
  if (y2 - y1 < min_side) {
    const double cy = std::clamp((y1 + y2) / 2.0, min_side / 2.0, 1.0 - min_side / 2.0);
    y1 = cy - min_side / 2.0;
    y2 = cy + min_side / 2.0;
  }
  Box out = Box::corners_normalized(x1, y1, x2, y2);
  if (b.convention() == BoxConvention::kCenterSizeNormalized) return out.to_center_size();
  return out;
}

}  // namespace pcan::geometry
