#include "cropforge/box.hpp"

#include <algorithm>
#include <cmath>

namespace cropforge {

namespace {
double inter_area(const Box& a, const Box& b) {
  double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  return std::max(iw, 0.0) * std::max(ih, 0.0);
}
}  // namespace

double iou(const Box& a, const Box& b) {
  double inter = inter_area(a, b);
  double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

double giou(const Box& a, const Box& b) {
  double inter = inter_area(a, b);
  double uni = a.area() + b.area() - inter;
  double hx1 = std::min(a.x1(), b.x1()), hy1 = std::min(a.y1(), b.y1());
  double hx2 = std::max(a.x2(), b.x2()), hy2 = std::max(a.y2(), b.y2());
  double hull = (hx2 - hx1) * (hy2 - hy1);
  double i = uni > 0 ? inter / uni : 0.0;
  if (hull <= 0) return i;
  return i - (hull - uni) / hull;
}

Box union_box(const std::vector<Box>& boxes) {
  if (boxes.empty()) throw BoxError("union_box: empty box list");
  double x1 = boxes[0].x1(), y1 = boxes[0].y1();
  double x2 = boxes[0].x2(), y2 = boxes[0].y2();
  for (const auto& b : boxes) {
    x1 = std::min(x1, b.x1());
    y1 = std::min(y1, b.y1());
    x2 = std::max(x2, b.x2());
    y2 = std::max(y2, b.y2());
  }
  return Box::from_corners(x1, y1, x2, y2);
}

Box clamp_box(const Box& b, double min_size) {
  double x1 = std::clamp(b.x1(), 0.0, 1.0);
  double x2 = std::clamp(b.x2(), 0.0, 1.0);
  double y1 = std::clamp(b.y1(), 0.0, 1.0);
  double y2 = std::clamp(b.y2(), 0.0, 1.0);
  if (x2 < x1) std::swap(x1, x2);
  if (y2 < y1) std::swap(y1, y2);
  Box out = Box::from_corners(x1, y1, x2, y2);
  if (out.w < min_size) {
    out.w = min_size;
    out.cx = std::clamp(out.cx, min_size / 2, 1.0 - min_size / 2);
  }
  if (out.h < min_size) {
    out.h = min_size;
    out.cy = std::clamp(out.cy, min_size / 2, 1.0 - min_size / 2);
  }
  return out;
}

Box apply_offset(const Box& base, const Box& offset) {
  Box raw{base.cx + offset.cx, base.cy + offset.cy, base.w + offset.w,
          base.h + offset.h};
  return clamp_box(raw);
}

MosaicLayout::MosaicLayout(int grid_, int row, int col)
    : grid(grid_), target_row(row), target_col(col) {
  if (grid < 1 || grid > 3)
    throw BoxError("MosaicLayout: grid must be 1, 2 or 3");
  check_cell(row, col);
}

void MosaicLayout::check_cell(int row, int col) const {
  if (row < 0 || row >= grid || col < 0 || col >= grid)
    throw BoxError("MosaicLayout: cell (" + std::to_string(row) + "," +
                   std::to_string(col) + ") out of range for grid " +
                   std::to_string(grid));
}

Box MosaicLayout::cell_region(int row, int col) const {
  check_cell(row, col);
  double s = 1.0 / grid;
  return Box{(col + 0.5) * s, (row + 0.5) * s, s, s};
}

Box MosaicLayout::to_global(int row, int col, const Box& local) const {
  check_cell(row, col);
  double s = 1.0 / grid;
  return Box{(local.cx + col) * s, (local.cy + row) * s, local.w * s,
             local.h * s};
}

Box MosaicLayout::from_global(int row, int col, const Box& global) const {
  check_cell(row, col);
  double s = 1.0 / grid;
  return Box{global.cx / s - col, global.cy / s - row, global.w / s,
             global.h / s};
}

nlohmann::json box_to_json(const Box& b) {
  return nlohmann::json::array({b.cx, b.cy, b.w, b.h});
}

Box box_from_json(const nlohmann::json& j) {
  if (j.is_array()) {
    if (j.size() != 4) throw BoxError("box_from_json: expected 4 elements");
    return Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
               j[3].get<double>()};
  }
  if (j.is_object() && j.contains("box")) {
    const auto& arr = j.at("box");
    if (arr.size() != 4) throw BoxError("box_from_json: expected 4 elements");
    std::string fmt = j.value("format", "cxcywh");
    if (fmt == "xyxy")
      return Box::from_corners(arr[0].get<double>(), arr[1].get<double>(),
                               arr[2].get<double>(), arr[3].get<double>());
    if (fmt == "cxcywh")
      return Box{arr[0].get<double>(), arr[1].get<double>(),
                 arr[2].get<double>(), arr[3].get<double>()};
    throw BoxError("box_from_json: unknown format '" + fmt + "'");
  }
  throw BoxError("box_from_json: expected array or {format, box} object");
}

}  // namespace cropforge
