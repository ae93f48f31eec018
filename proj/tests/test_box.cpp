#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "cropforge/box.hpp"
#include "cropforge/rng.hpp"

using namespace cropforge;

namespace {

Box random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> c(0.1, 0.9), s(0.05, 0.5);
  Box b{c(rng), c(rng), s(rng), s(rng)};
  return clamp_box(b);
}

// Counting oracle: fraction of a k x k pixel grid covered.
double raster_iou(const Box& a, const Box& b, int k) {
  long inter = 0, uni = 0;
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x) {
      double px = (x + 0.5) / k, py = (y + 0.5) / k;
      bool in_a = px >= a.x1() && px <= a.x2() && py >= a.y1() && py <= a.y2();
      bool in_b = px >= b.x1() && px <= b.x2() && py >= b.y1() && py <= b.y2();
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

}  // namespace

TEST_CASE("corner/center round trip is exact") {
  Box b{0.3125, 0.40625, 0.21875, 0.09375};
  Box r = Box::from_corners(b.x1(), b.y1(), b.x2(), b.y2());
  CHECK(r.cx == doctest::Approx(b.cx).epsilon(1e-12));
  CHECK(r.cy == doctest::Approx(b.cy).epsilon(1e-12));
  CHECK(r.w == doctest::Approx(b.w).epsilon(1e-12));
  CHECK(r.h == doctest::Approx(b.h).epsilon(1e-12));
}

TEST_CASE("iou hand cases") {
  Box a = Box::from_corners(0, 0, 2, 2);
  Box b = Box::from_corners(1, 1, 3, 3);
  CHECK(iou(a, b) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(iou(a, Box::from_corners(5, 5, 6, 6)) == 0.0);
}

TEST_CASE("giou hand case: disjoint unit squares in a 3x3 hull") {
  Box a = Box::from_corners(0, 0, 1, 1);
  Box b = Box::from_corners(2, 2, 3, 3);
  CHECK(giou(a, b) == doctest::Approx(-7.0 / 9.0).epsilon(1e-12));
  CHECK(giou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("iou is symmetric and giou <= iou on random pairs") {
  auto rng = make_rng(3, "box-pairs");
  for (int i = 0; i < 1000; ++i) {
    Box a = random_box(rng), b = random_box(rng);
    CHECK(iou(a, b) == iou(b, a));
    CHECK(giou(a, b) <= iou(a, b) + 1e-12);
    CHECK(giou(a, b) >= -1.0 - 1e-12);
  }
}

TEST_CASE("iou matches the rasterized counting oracle") {
  auto rng = make_rng(5, "raster");
  for (int i = 0; i < 50; ++i) {
    Box a = random_box(rng), b = random_box(rng);
    CHECK(iou(a, b) == doctest::Approx(raster_iou(a, b, 2000)).epsilon(2e-3));
  }
}

TEST_CASE("union_box hand case and properties") {
  Box a = Box::from_corners(0.1, 0.1, 0.3, 0.3);
  Box b = Box::from_corners(0.2, 0.2, 0.6, 0.5);
  Box u = union_box({a, b});
  CHECK(u.x1() == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(u.y1() == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(u.x2() == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(u.y2() == doctest::Approx(0.5).epsilon(1e-12));
  Box single = union_box({a});
  CHECK(single.cx == doctest::Approx(a.cx).epsilon(1e-12));
  CHECK(single.cy == doctest::Approx(a.cy).epsilon(1e-12));
  CHECK(single.w == doctest::Approx(a.w).epsilon(1e-12));
  CHECK(single.h == doctest::Approx(a.h).epsilon(1e-12));
  CHECK_THROWS_AS(union_box({}), BoxError);

  auto rng = make_rng(9, "union");
  for (int i = 0; i < 200; ++i) {
    std::vector<Box> boxes;
    for (int j = 0; j < 4; ++j) boxes.push_back(random_box(rng));
    Box u2 = union_box(boxes);
    for (const auto& bx : boxes) {
      CHECK(u2.x1() <= bx.x1() + 1e-12);
      CHECK(u2.x2() >= bx.x2() - 1e-12);
    }
    boxes.push_back(u2);  // idempotence
    Box u3 = union_box(boxes);
    CHECK(u3.x1() == doctest::Approx(u2.x1()).epsilon(1e-12));
    CHECK(u3.x2() == doctest::Approx(u2.x2()).epsilon(1e-12));
  }
}

TEST_CASE("apply_offset: zero, hand case, and clamp fuzz") {
  Box b{0.5, 0.5, 0.4, 0.4};
  Box same = apply_offset(b, Box{0, 0, 0, 0});
  CHECK(same.cx == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(same.w == doctest::Approx(0.4).epsilon(1e-12));

  Box moved = apply_offset(b, Box{0.02, -0.03, 0.05, 0.0});
  CHECK(moved.cx == doctest::Approx(0.52).epsilon(1e-12));
  CHECK(moved.cy == doctest::Approx(0.47).epsilon(1e-12));
  CHECK(moved.w == doctest::Approx(0.45).epsilon(1e-12));
  CHECK(moved.h == doctest::Approx(0.40).epsilon(1e-12));

  auto rng = make_rng(11, "offset-fuzz");
  std::uniform_real_distribution<double> ofs(-0.6, 0.6);
  for (int i = 0; i < 500; ++i) {
    Box r = apply_offset(random_box(rng),
                         Box{ofs(rng), ofs(rng), ofs(rng), ofs(rng)});
    CHECK(r.x1() >= -1e-12);
    CHECK(r.y1() >= -1e-12);
    CHECK(r.x2() <= 1.0 + 1e-12);
    CHECK(r.y2() <= 1.0 + 1e-12);
    CHECK(r.w >= 1e-4 - 1e-15);
    CHECK(r.h >= 1e-4 - 1e-15);
  }
}

TEST_CASE("mosaic layout hand case and round trip") {
  MosaicLayout one(1, 0, 0);
  Box b{0.31, 0.74, 0.2, 0.11};
  Box g1 = one.to_global(0, 0, b);
  CHECK(g1.cx == doctest::Approx(b.cx).epsilon(1e-12));
  CHECK(g1.h == doctest::Approx(b.h).epsilon(1e-12));

  MosaicLayout two(2, 1, 0);
  Box g = two.to_global(1, 0, Box{0.5, 0.5, 0.2, 0.2});
  CHECK(g.cx == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(g.cy == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(g.w == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(g.h == doctest::Approx(0.1).epsilon(1e-12));

  auto rng = make_rng(13, "mosaic-roundtrip");
  std::uniform_int_distribution<int> gd(1, 3);
  for (int i = 0; i < 500; ++i) {
    int grid = gd(rng);
    std::uniform_int_distribution<int> cd(0, grid - 1);
    int r = cd(rng), c = cd(rng);
    MosaicLayout lay(grid, r, c);
    Box local = random_box(rng);
    Box back = lay.from_global(r, c, lay.to_global(r, c, local));
    CHECK(std::abs(back.cx - local.cx) <= 1e-12);
    CHECK(std::abs(back.cy - local.cy) <= 1e-12);
    CHECK(std::abs(back.w - local.w) <= 1e-12);
    CHECK(std::abs(back.h - local.h) <= 1e-12);
  }
}

TEST_CASE("mosaic cells tile the canvas") {
  for (int grid = 1; grid <= 3; ++grid) {
    double area = 0;
    for (int r = 0; r < grid; ++r)
      for (int c = 0; c < grid; ++c) {
        MosaicLayout lay(grid, r, c);
        area += lay.target_region().area();
      }
    CHECK(area == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(MosaicLayout(4, 0, 0), BoxError);
  CHECK_THROWS_AS(MosaicLayout(2, 2, 0), BoxError);
}

TEST_CASE("box JSON: cxcywh array and flagged corner form") {
  Box b{0.5, 0.25, 0.4, 0.3};
  auto j = box_to_json(b);
  Box r = box_from_json(j);
  CHECK(r == b);

  nlohmann::json corners = {{"format", "xyxy"},
                            {"box", {0.3, 0.1, 0.7, 0.4}}};
  Box c = box_from_json(corners);
  CHECK(c.cx == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(c.cy == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(c.w == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(c.h == doctest::Approx(0.3).epsilon(1e-12));
}
