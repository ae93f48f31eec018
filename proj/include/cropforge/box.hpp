#pragma once

// Axis-aligned rectangle math in normalized [0,1] image coordinates.
// Canonical parameterization is center/size (cx, cy, w, h); offsets reuse
// the same struct with components allowed outside [0,1].

#include <stdexcept>
#include <vector>

#include <json.hpp>

namespace cropforge {

struct BoxError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  static Box from_corners(double x1, double y1, double x2, double y2) {
    return Box{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
  }
  double x1() const { return cx - w / 2; }
  double y1() const { return cy - h / 2; }
  double x2() const { return cx + w / 2; }
  double y2() const { return cy + h / 2; }
  double area() const { return w * h; }

  bool operator==(const Box&) const = default;
};

// |a ∩ b| / |a ∪ b|; 0 when the union has zero area.
double iou(const Box& a, const Box& b);

// iou(a,b) - |hull \ (a ∪ b)| / |hull|, in [-1, 1].
double giou(const Box& a, const Box& b);

// Smallest box containing all inputs. Throws on an empty list.
Box union_box(const std::vector<Box>& boxes);

// Clamps corners into [0,1]^2 and floors w,h at min_size.
Box clamp_box(const Box& b, double min_size = 1e-4);

// Elementwise cxcywh sum, then clamp_box.
Box apply_offset(const Box& base, const Box& offset);

// 1x1, 2x2 or 3x3 mosaic canvas; cells tile [0,1]^2 exactly.
struct MosaicLayout {
  int grid = 1;  // side length, in {1,2,3}
  int target_row = 0, target_col = 0;

  MosaicLayout() = default;
  MosaicLayout(int grid_, int row, int col);

  // Extent of a cell in global canvas coordinates.
  Box cell_region(int row, int col) const;
  Box target_region() const { return cell_region(target_row, target_col); }

  // Affine map between cell-local and global normalized coordinates.
  Box to_global(int row, int col, const Box& local) const;
  Box from_global(int row, int col, const Box& global) const;

 private:
  void check_cell(int row, int col) const;
};

// JSON: canonical form [cx, cy, w, h]. Objects with {"format":"xyxy",
// "box":[x1,y1,x2,y2]} are accepted on input.
nlohmann::json box_to_json(const Box& b);
Box box_from_json(const nlohmann::json& j);

}  // namespace cropforge
