#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "simplerob/common.hpp"
#include "simplerob/data.hpp"

using namespace simplerob;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("simplerob_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Solves the 3×3 normal equations AᵀA w = Aᵀt by Gaussian elimination.
std::array<double, 3> least_squares(const data::Dataset& d) {
  double m[3][4] = {};
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double row[3] = {d.inputs.at(2 * i), d.inputs.at(2 * i + 1), 1.0};
    const double t = d.labels[i] == 1 ? 1.0 : -1.0;
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) m[a][b] += row[a] * row[b];
      m[a][3] += row[a] * t;
    }
  }
  for (int c = 0; c < 3; ++c) {
    for (int r = c + 1; r < 3; ++r) {
      const double f = m[r][c] / m[c][c];
      for (int k = c; k < 4; ++k) m[r][k] -= f * m[c][k];
    }
  }
  std::array<double, 3> w{};
  for (int r = 2; r >= 0; --r) {
    double s = m[r][3];
    for (int k = r + 1; k < 3; ++k) s -= m[r][k] * w[k];
    w[r] = s / m[r][r];
  }
  return w;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("gaussians: zero spread puts points on the centres") {
    const auto d = data::gen_gaussians(4, 5, 0.0, 1);
    d.validate();
    CHECK(d.size() == 20);
    CHECK(d.example_shape() == ad::Shape{2});
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double a = 2.0 * std::numbers::pi * double(d.labels[i]) / 4.0;
      CHECK(d.inputs.at(2 * i) == doctest::Approx(std::cos(a)).epsilon(1e-15));
      CHECK(d.inputs.at(2 * i + 1) == doctest::Approx(std::sin(a)).epsilon(1e-15));
    }
    CHECK(d.class_counts() == std::vector<std::size_t>{5, 5, 5, 5});
  }

  TEST_CASE("gaussians are deterministic in the seed") {
    const auto a = data::gen_gaussians(3, 10, 0.3, 9), b = data::gen_gaussians(3, 10, 0.3, 9);
    CHECK(std::equal(a.inputs.data().begin(), a.inputs.data().end(), b.inputs.data().begin()));
    CHECK(a.labels == b.labels);
    const auto c = data::gen_gaussians(3, 10, 0.3, 10);
    CHECK_FALSE(std::equal(a.inputs.data().begin(), a.inputs.data().end(), c.inputs.data().begin()));
  }

  TEST_CASE("two well-separated gaussians are linearly separable by least squares") {
    const auto d = data::gen_gaussians(2, 500, 0.1, 3);
    const auto w = least_squares(d);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double s = w[0] * d.inputs.at(2 * i) + w[1] * d.inputs.at(2 * i + 1) + w[2];
      correct += (s > 0) == (d.labels[i] == 1);
    }
    CHECK(double(correct) / double(d.size()) > 0.99);
  }

  TEST_CASE("model_j relabelling") {
    const auto m2 = data::make_model_j(10, 2);
    CHECK(m2.new_num_classes == 2);
    CHECK(m2(0) == 0);
    for (std::size_t c = 1; c < 10; ++c) CHECK(m2(c) == 1);
    const auto m3 = data::make_model_j(4, 3);
    CHECK(m3.mapping == std::vector<std::size_t>{0, 1, 2, 2});
    CHECK(m3.new_num_classes == 3);
    const auto mk = data::make_model_j(5, 5);
    CHECK(mk.mapping == std::vector<std::size_t>{0, 1, 2, 3, 4});
    CHECK_THROWS_AS(data::make_model_j(4, 1), PreconditionError);
    CHECK_THROWS_AS(data::make_model_j(4, 5), PreconditionError);
  }

  TEST_CASE("one-vs-all relabelling") {
    const auto m = data::make_one_vs_all(3, 1);
    CHECK(m.mapping == std::vector<std::size_t>{0, 1, 0});
    CHECK(m.new_num_classes == 2);
    CHECK_THROWS_AS(data::make_one_vs_all(3, 3), PreconditionError);
    auto d = data::gen_gaussians(3, 4, 0.1, 1);
    const auto r = data::relabel(d, m);
    CHECK(r.size() == d.size());
    CHECK(r.inputs.data().data() == d.inputs.data().data());
    for (std::size_t i = 0; i < d.size(); ++i) CHECK(r.labels[i] == (d.labels[i] == 1 ? 1u : 0u));
  }

  TEST_CASE("model_j keeps the distinguished class apart from everything else") {
    for (std::size_t j = 2; j <= 6; ++j) {
      const auto m = data::make_model_j(6, j);
      const auto ova = data::make_one_vs_all(6, 0);
      for (std::size_t c = 0; c < 6; ++c) CHECK((m(c) == 0) == (ova(c) == 1));
    }
  }

  TEST_CASE("class permutation is a bijection") {
    const auto p = data::class_permutation(10, 4);
    p.validate();
    std::set<std::size_t> seen(p.mapping.begin(), p.mapping.end());
    CHECK(seen.size() == 10);
    CHECK(data::class_permutation(10, 4).mapping == p.mapping);
  }

  TEST_CASE("shuffled batches cover every index once") {
    const auto batches = data::shuffled_batches(103, 10, 5);
    CHECK(batches.size() == 11);
    std::vector<int> hits(103, 0);
    for (const auto& b : batches) {
      for (auto i : b) ++hits[i];
    }
    for (int h : hits) CHECK(h == 1);
  }

  TEST_CASE("balanced batches are exactly half positive") {
    std::vector<std::size_t> labels(90, 0);
    for (std::size_t i = 0; i < 13; ++i) labels[i * 7] = 1;
    const data::BalancedBatches bb(labels, 16, 3);
    const std::size_t negatives = 90 - 13;
    CHECK(bb.batches_per_epoch() == (negatives + 7) / 8);
    for (std::size_t e = 0; e < 5; ++e) {
      const auto batches = bb.epoch(e);
      CHECK(batches.size() == bb.batches_per_epoch());
      std::set<std::size_t> neg_seen;
      for (const auto& b : batches) {
        REQUIRE(b.size() == 16);
        std::size_t pos = 0;
        for (auto i : b) {
          REQUIRE(i < labels.size());
          if (labels[i] == 1) {
            ++pos;
          } else {
            neg_seen.insert(i);
          }
        }
        CHECK(pos == 8);
      }
      CHECK(neg_seen.size() == negatives);
    }
  }

  TEST_CASE("balanced data: every example is visited in every epoch") {
    std::vector<std::size_t> labels(40);
    for (std::size_t i = 0; i < 40; ++i) labels[i] = i % 2;
    const data::BalancedBatches bb(labels, 8, 1);
    for (std::size_t e = 0; e < 100; ++e) {
      std::set<std::size_t> seen;
      for (const auto& b : bb.epoch(e)) seen.insert(b.begin(), b.end());
      CHECK(seen.size() == 40);
    }
  }

  TEST_CASE("balanced batches reject bad input") {
    const std::vector<std::size_t> one_class(10, 0);
    CHECK_THROWS_AS(data::BalancedBatches(one_class, 4, 0), PreconditionError);
    const std::vector<std::size_t> mixed{0, 1, 0, 1};
    CHECK_THROWS_AS(data::BalancedBatches(mixed, 3, 0), PreconditionError);
  }

  TEST_CASE("IDX: all-255 image loads as ones") {
    const auto dir = temp_dir("idx_ones");
    const std::vector<std::uint8_t> px(4 * 4, 255);
    data::write_idx_images(dir / "img", 4, 4, px);
    data::write_idx_labels(dir / "lbl", std::vector<std::uint8_t>{3});
    const auto d = data::load_idx(dir / "img", dir / "lbl", false);
    CHECK(d.inputs.shape() == ad::Shape{1, 1, 4, 4});
    for (double v : d.inputs.data()) CHECK(v == 1.0);
    CHECK(d.labels == std::vector<std::size_t>{3});
    const auto pooled = data::load_idx(dir / "img", dir / "lbl", true);
    CHECK(pooled.inputs.shape() == ad::Shape{1, 1, 2, 2});
  }

  TEST_CASE("IDX round trip of three images") {
    const auto dir = temp_dir("idx_round");
    std::vector<std::uint8_t> px(3 * 5 * 4);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i * 37);
    data::write_idx_images(dir / "img", 5, 4, px);
    data::write_idx_labels(dir / "lbl", std::vector<std::uint8_t>{0, 1, 2});
    const auto d = data::load_idx(dir / "img", dir / "lbl", false);
    REQUIRE(d.inputs.size() == px.size());
    for (std::size_t i = 0; i < px.size(); ++i) CHECK(static_cast<std::uint8_t>(std::lround(d.inputs.at(i) * 255.0)) == px[i]);
  }

  TEST_CASE("IDX errors are distinct") {
    const auto dir = temp_dir("idx_err");
    data::write_idx_images(dir / "img", 2, 2, std::vector<std::uint8_t>(8, 1));
    data::write_idx_labels(dir / "lbl3", std::vector<std::uint8_t>{0, 1, 1});
    data::write_idx_labels(dir / "lbl2", std::vector<std::uint8_t>{0, 1});
    auto kind_of = [&](const std::filesystem::path& img, const std::filesystem::path& lbl) {
      try {
        data::load_idx(img, lbl, false);
      } catch (const data::IdxError& e) {
        return e.kind();
      }
      FAIL("no error");
      return data::IdxError::Kind::Io;
    };
    CHECK(kind_of(dir / "img", dir / "lbl3") == data::IdxError::Kind::CountMismatch);
    CHECK(kind_of(dir / "lbl2", dir / "lbl2") == data::IdxError::Kind::BadMagic);
    {
      std::ifstream in(dir / "img", std::ios::binary);
      std::string bytes((std::istreambuf_iterator<char>(in)), {});
      std::ofstream(dir / "short", std::ios::binary) << bytes.substr(0, bytes.size() - 2);
    }
    CHECK(kind_of(dir / "short", dir / "lbl2") == data::IdxError::Kind::Truncated);
    CHECK(kind_of(dir / "missing", dir / "lbl2") == data::IdxError::Kind::Io);
  }

  TEST_CASE("CSV round trip") {
    const auto d = data::gen_gaussians(3, 4, 0.2, 2);
    std::stringstream s;
    data::write_csv(s, d);
    const auto r = data::read_csv(s);
    CHECK(r.labels == d.labels);
    CHECK(r.num_classes == 3);
    CHECK(std::equal(r.inputs.data().begin(), r.inputs.data().end(), d.inputs.data().begin()));
  }

  TEST_CASE("dataset validation") {
    data::Dataset d = data::gen_gaussians(2, 3, 0.1, 1);
    d.labels[0] = 5;
    CHECK_THROWS_AS(d.validate(), PreconditionError);
  }
}
