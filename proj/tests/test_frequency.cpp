#include <catch2/catch_amalgamated.hpp>

#include "uwf/frequency.hpp"

#include <complex>

using namespace uwf;

namespace {

// O(N^4) direct DFT magnitude with the zero bin shifted to the center,
// independent of the FFT path under test.
cv::Mat naive_dft_magnitude(const cv::Mat& gray) {
  int H = gray.rows, W = gray.cols;
  cv::Mat mag(H, W, CV_64F);
  for (int u = 0; u < H; ++u)
    for (int v = 0; v < W; ++v) {
      std::complex<double> acc(0.0, 0.0);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double phase = -2.0 * M_PI * (static_cast<double>(u) * y / H +
                                        static_cast<double>(v) * x / W);
          acc += gray.at<double>(y, x) * std::complex<double>(std::cos(phase), std::sin(phase));
        }
      mag.at<double>((u + H / 2) % H, (v + W / 2) % W) = std::abs(acc);
    }
  return mag;
}

cv::Mat random_gray(Rng& rng, int h, int w) {
  cv::Mat m(h, w, CV_64F);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at<double>(y, x) = rng.uniform();
  return m;
}

Image gray_to_rgb(const cv::Mat& gray) {
  Image img(gray.rows, gray.cols, CV_32FC3);
  for (int y = 0; y < gray.rows; ++y)
    for (int x = 0; x < gray.cols; ++x) {
      float v = static_cast<float>(gray.at<double>(y, x));
      img.at<cv::Vec3f>(y, x) = cv::Vec3f(v, v, v);
    }
  return img;
}

}  // namespace

TEST_CASE("dft magnitude of a constant image is a pure center bin") {
  for (int n : {8, 16}) {
    double c = 0.37;
    cv::Mat gray(n, n, CV_64F, cv::Scalar(c));
    SpectralImage s = dft_magnitude(gray);
    REQUIRE(s.magnitude.at<double>(n / 2, n / 2) == Catch::Approx(c * n * n).epsilon(1e-12));
    double off_center = 0.0;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (y != n / 2 || x != n / 2) off_center = std::max(off_center, s.magnitude.at<double>(y, x));
    REQUIRE(off_center < 1e-9);
  }
}

TEST_CASE("dft magnitude of a corner impulse is flat") {
  int n = 16;
  cv::Mat gray(n, n, CV_64F, cv::Scalar(0.0));
  gray.at<double>(0, 0) = 1.0;
  SpectralImage s = dft_magnitude(gray);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      REQUIRE(s.magnitude.at<double>(y, x) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("dft magnitude of a horizontal cosine concentrates in two symmetric bins") {
  int n = 16, k = 3;
  cv::Mat gray(n, n, CV_64F);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) gray.at<double>(y, x) = std::cos(2.0 * M_PI * k * x / n);
  SpectralImage s = dft_magnitude(gray);
  cv::Mat oracle = naive_dft_magnitude(gray);
  int nonzero = 0;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      REQUIRE(s.magnitude.at<double>(y, x) == Catch::Approx(oracle.at<double>(y, x)).margin(1e-8));
      if (s.magnitude.at<double>(y, x) > 1e-6) ++nonzero;
    }
  REQUIRE(nonzero == 2);
  REQUIRE(s.magnitude.at<double>(n / 2, n / 2 + k) == Catch::Approx(n * n / 2.0).margin(1e-8));
  REQUIRE(s.magnitude.at<double>(n / 2, n / 2 - k) == Catch::Approx(n * n / 2.0).margin(1e-8));
}

TEST_CASE("dft magnitude matches the naive O(N^4) oracle on random images") {
  Rng rng(99);
  for (int trial = 0; trial < 12; ++trial) {
    int h = 2 + static_cast<int>(rng.below(15));
    int w = 2 + static_cast<int>(rng.below(15));
    cv::Mat gray = random_gray(rng, h, w);
    SpectralImage s = dft_magnitude(gray);
    cv::Mat oracle = naive_dft_magnitude(gray);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double got = s.magnitude.at<double>(y, x);
        double want = oracle.at<double>(y, x);
        REQUIRE(std::abs(got - want) <= 1e-6 * std::max(1.0, std::abs(want)));
      }
  }
}

TEST_CASE("Parseval: spectral energy equals N^2 times pixel energy") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    cv::Mat gray = random_gray(rng, 8, 8);
    SpectralImage s = dft_magnitude(gray);
    double spec = 0.0, pix = 0.0;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        spec += s.magnitude.at<double>(y, x) * s.magnitude.at<double>(y, x);
        pix += gray.at<double>(y, x) * gray.at<double>(y, x);
      }
    REQUIRE(spec == Catch::Approx(64.0 * pix).epsilon(1e-9));
  }
}

TEST_CASE("magnitude spectrum is conjugate-symmetric about the center for real input") {
  Rng rng(15);
  cv::Mat gray = random_gray(rng, 16, 16);
  SpectralImage s = dft_magnitude(gray);
  int n = 16, c = n / 2;
  for (int dy = -7; dy <= 7; ++dy)
    for (int dx = -7; dx <= 7; ++dx) {
      double a = s.magnitude.at<double>(c + dy, c + dx);
      double b = s.magnitude.at<double>(c - dy, c - dx);
      REQUIRE(a == Catch::Approx(b).margin(1e-9));
    }
}

TEST_CASE("dft magnitude rejects empty input") {
  REQUIRE_THROWS_AS(dft_magnitude(cv::Mat()), DataError);
}

TEST_CASE("clip_at_percentile caps at the sort-based quantile") {
  SpectralImage s;
  s.magnitude = cv::Mat(10, 10, CV_64F);
  for (int i = 0; i < 100; ++i) s.magnitude.at<double>(i / 10, i % 10) = i + 1;  // {1..100}
  // oracle: sorted order statistic at rank floor(p*(n-1))
  std::vector<double> sorted(100);
  for (int i = 0; i < 100; ++i) sorted[static_cast<size_t>(i)] = i + 1;
  double q = sorted[static_cast<size_t>(std::floor(0.99 * 99))];
  SpectralImage clipped = clip_at_percentile(s, 0.99);
  double maxv;
  cv::minMaxLoc(clipped.magnitude, nullptr, &maxv);
  REQUIRE(maxv == Catch::Approx(q));
  int changed = 0;
  for (int i = 0; i < 100; ++i) {
    double before = s.magnitude.at<double>(i / 10, i % 10);
    double after = clipped.magnitude.at<double>(i / 10, i % 10);
    if (before <= q) REQUIRE(after == before);
    else ++changed;
  }
  REQUIRE(changed == 1);  // only the value 100 exceeds the 0.99 quantile of {1..100}
}

TEST_CASE("clip_at_percentile trivial cases and idempotence") {
  SpectralImage flat;
  flat.magnitude = cv::Mat(6, 6, CV_64F, cv::Scalar(3.5));
  SpectralImage c1 = clip_at_percentile(flat, 0.99);
  REQUIRE(cv::norm(c1.magnitude - flat.magnitude) == 0.0);

  Rng rng(3);
  SpectralImage s;
  s.magnitude = cv::Mat(12, 12, CV_64F);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x) s.magnitude.at<double>(y, x) = rng.uniform() * 100.0;
  SpectralImage p1 = clip_at_percentile(s, 1.0);
  REQUIRE(cv::norm(p1.magnitude - s.magnitude) == 0.0);

  for (double p : {0.5, 0.9, 0.99}) {
    SpectralImage once = clip_at_percentile(s, p);
    SpectralImage twice = clip_at_percentile(once, p);
    REQUIRE(cv::norm(twice.magnitude - once.magnitude) == 0.0);
  }
  REQUIRE_THROWS_AS(clip_at_percentile(s, 0.0), ConfigError);
}

TEST_CASE("frequency representation of a constant image is a centered unit peak") {
  Image img(16, 16, CV_32FC3, cv::Scalar(0.4f, 0.4f, 0.4f));
  FrequencyConfig cfg{0.99, 16};
  Image out = frequency_representation(img, cfg);
  REQUIRE(out.rows == 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      float expected = (y == 8 && x == 8) ? 1.0f : 0.0f;
      REQUIRE(out.at<cv::Vec3f>(y, x)[0] == Catch::Approx(expected).margin(1e-6));
      REQUIRE(out.at<cv::Vec3f>(y, x)[1] == out.at<cv::Vec3f>(y, x)[0]);  // replicated channels
    }
}

TEST_CASE("frequency representation is deterministic and in range") {
  Rng rng(31);
  Image img = gray_to_rgb(random_gray(rng, 32, 32));
  FrequencyConfig cfg{0.99, 24};
  Image a = frequency_representation(img, cfg);
  Image b = frequency_representation(img, cfg);
  REQUIRE(cv::norm(a, b) == 0.0);
  double lo, hi;
  cv::minMaxLoc(a.reshape(1), &lo, &hi);
  REQUIRE(lo >= 0.0);
  REQUIRE(hi <= 1.0);
}

TEST_CASE("blur moves spectral energy into the low-frequency disc") {
  Rng rng(77);
  int wins = 0;
  for (int trial = 0; trial < 20; ++trial) {
    cv::Mat sharp = random_gray(rng, 64, 64);
    cv::Mat blurred;
    cv::GaussianBlur(sharp, blurred, cv::Size(9, 9), 1.5, 1.5, cv::BORDER_REFLECT_101);
    SpectralImage ss = clip_at_percentile(dft_magnitude(sharp), 0.99);
    SpectralImage sb = clip_at_percentile(dft_magnitude(blurred), 0.99);
    double fs = low_frequency_energy_fraction(ss.magnitude, 0.10);
    double fb = low_frequency_energy_fraction(sb.magnitude, 0.10);
    if (fb > fs) ++wins;
  }
  REQUIRE(wins == 20);
}
