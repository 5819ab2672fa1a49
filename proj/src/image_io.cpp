#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "hvgg/error.hpp"
#include "hvgg/preprocess.hpp"

namespace hvgg {

Image read_png(const std::string& path, std::size_t channels) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("channels must be 1 or 3");
  cv::Mat m;
  try {
    m = cv::imread(path, cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    throw DataError("cannot read image " + path + ": " + e.what());
  }
  if (m.empty()) throw DataError("cannot read image " + path);
  if (m.depth() != CV_8U) throw DataError("image " + path + " is not 8-bit");
  const int src = m.channels();
  if (src != 1 && src != 3 && src != 4) throw DataError("unsupported channel count in " + path);

  Image rgb(static_cast<std::size_t>(m.cols), static_cast<std::size_t>(m.rows), 3);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      for (int c = 0; c < 3; ++c) {
        // stored as BGR(A); gray replicates
        rgb.at(x, y, c) = src == 1 ? row[x] : row[x * src + (2 - c)];
      }
    }
  }
  if (channels == 3) return rgb;
  if (src == 1) {
    Image gray(rgb.width, rgb.height, 1);
    for (std::size_t i = 0; i < gray.pixels.size(); ++i) gray.pixels[i] = rgb.pixels[3 * i];
    return gray;
  }
  return to_grayscale(rgb);
}

void write_png(const std::string& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw std::invalid_argument("only gray or RGB images can be written");
  }
  cv::Mat m(static_cast<int>(image.height), static_cast<int>(image.width),
            image.channels == 1 ? CV_8UC1 : CV_8UC3);
  for (std::size_t y = 0; y < image.height; ++y) {
    auto* row = m.ptr<std::uint8_t>(static_cast<int>(y));
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < image.channels; ++c) {
        row[x * image.channels + c] = image.at(x, y, image.channels == 3 ? 2 - c : c);
      }
    }
  }
  bool ok = false;
  try {
    ok = cv::imwrite(path, m, {cv::IMWRITE_PNG_COMPRESSION, 6});
  } catch (const cv::Exception& e) {
    throw DataError("cannot write image " + path + ": " + e.what());
  }
  if (!ok) throw DataError("cannot write image " + path);
}

}  // namespace hvgg
