#include <gtest/gtest.h>

#include "tokalign/augment.hpp"
#include "tokalign/errors.hpp"
#include "tokalign/synthetic.hpp"

using namespace tokalign;

namespace {

Image test_image() {
  SyntheticConfig s;
  return render_grating(s, 3, 77);
}

}  // namespace

TEST(GenerateViews, SingleViewIsOriginal) {
  const Image im = test_image();
  const ViewBatch b = generate_views(im, 1, 5);
  ASSERT_EQ(b.views.size(), 1u);
  EXPECT_EQ(b.views[0], im);
  EXPECT_TRUE(b.params_log.empty());
}

TEST(GenerateViews, SixtyFourViews) {
  const Image im = test_image();
  const ViewBatch b = generate_views(im, 64, 5);
  ASSERT_EQ(b.views.size(), 64u);
  EXPECT_EQ(b.params_log.size(), 63u);
  EXPECT_EQ(b.views[0], im);
  for (const Image& v : b.views) {
    EXPECT_EQ(v.channels, im.channels);
    EXPECT_EQ(v.height, im.height);
    EXPECT_EQ(v.width, im.width);
  }
  int flips = 0;
  for (const CropParams& c : b.params_log) {
    flips += c.flip;
    EXPECT_GE(c.x, 0);
    EXPECT_GE(c.y, 0);
    EXPECT_LE(c.x + c.width, im.width);
    EXPECT_LE(c.y + c.height, im.height);
    const double area = static_cast<double>(c.width) * c.height / (im.width * im.height);
    EXPECT_GT(area, 0.4);
    EXPECT_LE(area, 1.0);
  }
  EXPECT_GT(flips, 10);
  EXPECT_LT(flips, 53);
}

TEST(GenerateViews, Deterministic) {
  const Image im = test_image();
  const ViewBatch a = generate_views(im, 16, 9), b = generate_views(im, 16, 9);
  EXPECT_EQ(a.views, b.views);
  EXPECT_EQ(a.params_log, b.params_log);
  const ViewBatch c = generate_views(im, 16, 10);
  EXPECT_NE(a.params_log, c.params_log);
}

TEST(GenerateViews, PrefixStable) {
  const Image im = test_image();
  const ViewBatch small = generate_views(im, 8, 4), large = generate_views(im, 32, 4);
  for (std::size_t i = 0; i < small.views.size(); ++i) EXPECT_EQ(small.views[i], large.views[i]);
}

TEST(GenerateViews, InvalidArguments) {
  const Image im = test_image();
  EXPECT_THROW(generate_views(im, 0, 1), ContractError);
  AugmentConfig bad;
  bad.scale_min = 0.0;
  EXPECT_THROW(generate_views(im, 4, 1, bad), ConfigError);
}

TEST(ResizedCrop, FullCropIsIdentity) {
  const Image im = test_image();
  const CropParams full{0, 0, im.width, im.height, false};
  EXPECT_EQ(resized_crop(im, full, im.height, im.width), im);
  EXPECT_THROW(resized_crop(im, {1, 0, im.width, im.height, false}, 4, 4), ContractError);
}

TEST(ResizedCrop, CornersMapExactly) {
  Image im(1, 4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) im.at(0, y, x) = 10 * y + x;
  const Image out = resized_crop(im, {1, 1, 3, 2, false}, 5, 7);
  EXPECT_EQ(out.at(0, 0, 0), 11.0);
  EXPECT_EQ(out.at(0, 0, 6), 13.0);
  EXPECT_EQ(out.at(0, 4, 0), 21.0);
  EXPECT_EQ(out.at(0, 4, 6), 23.0);
  // Bilinear on an affine image stays affine.
  EXPECT_NEAR(out.at(0, 2, 3), 17.0, 1e-12);
}

TEST(Flip, Involution) {
  const Image im = test_image();
  const Image f = flip_horizontal(im);
  EXPECT_NE(f, im);
  EXPECT_EQ(flip_horizontal(f), im);
  EXPECT_EQ(f.at(0, 3, 0), im.at(0, 3, im.width - 1));
}
