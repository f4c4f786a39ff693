#include "xem/pngio.hpp"

#include <cstdio>
#include <memory>

#include <png.h>

#include "xem/error.hpp"

namespace xem {

void write_png_gray(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
                    int rows, int cols) {
  if (rows < 1 || cols < 1 || pixels.size() != static_cast<std::size_t>(rows) * cols)
    fail(ErrorKind::Shape, "png write: pixel buffer does not match " + std::to_string(rows) + "x" +
                               std::to_string(cols));
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.string().c_str(), "wb"),
                                                     &std::fclose);
  if (!fp) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(ErrorKind::Io, "png writer allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail(ErrorKind::Io, "png info allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::Io, "png write failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < rows; ++r)
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(r) * cols));
  png_write_end(png, info);
  png_destroy_write_struct(&png, &info);
}

}  // namespace xem
