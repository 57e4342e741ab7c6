// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>

#include "mte/error.hpp"
#include "mte/io.hpp"
#include "mte/matrix.hpp"
#include "mte/rng.hpp"
#include "test_util.hpp"

namespace mte {
namespace {

TEST(FormatDouble, RoundTripsExactly) {
  CounterRng rng(5);
  for (int i = 0; i < 2000; ++i) {
    const double v = (rng.uniform() - 0.5) * std::pow(10.0, static_cast<int>(rng.below(40)) - 20);
    const std::string s = format_double(v);
    EXPECT_EQ(std::strtod(s.c_str(), nullptr), v) << s;
  }
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(-2.0), "-2");
}

TEST(Fnv1a, KnownVectors) {
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
  EXPECT_NE(fnv1a_hex("ab"), fnv1a_hex("ba"));
}

TEST(Files, AtomicWriteThenRead) {
  const auto dir = testing::temp_dir("io");
  const auto path = dir / "sub" / "file.txt";
  write_file_atomic(path, "hello\n");
  EXPECT_EQ(read_file(path), "hello\n");
  write_file_atomic(path, "replaced");
  EXPECT_EQ(read_file(path), "replaced");
  EXPECT_FALSE(std::filesystem::exists(dir / "sub" / "file.txt.tmp"));
}

TEST(Files, MissingFileIsParseError) {
  EXPECT_THROW(read_file("/nonexistent/definitely/missing.json"), ParseError);
}

TEST(Matrix, MatmulAgainstHandComputation) {
  const Matrix a(2, 3, {1, 2, 3, 4, 5, 6});
  const Matrix b(3, 2, {7, 8, 9, 10, 11, 12});
  const Matrix c = matmul(a, b);
  EXPECT_EQ(c, Matrix(2, 2, {58, 64, 139, 154}));
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Matrix, GatherRowsAndFiniteness) {
  const Matrix a(3, 2, {1, 2, 3, 4, 5, 6});
  const std::size_t idx[] = {2, 0};
  EXPECT_EQ(gather_rows(a, idx), Matrix(2, 2, {5, 6, 1, 2}));
  Matrix bad = a;
  bad(1, 1) = std::numeric_limits<double>::infinity();
  EXPECT_TRUE(a.all_finite());
  EXPECT_FALSE(bad.all_finite());
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
}

}  // namespace
}  // namespace mte
