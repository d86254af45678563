#include "devos/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>

#include <jpeglib.h>
#include <png.h>

namespace devos {

namespace fs = std::filesystem;

const std::array<std::array<std::uint8_t, 3>, 256>& davis_palette() {
  static const auto palette = [] {
    std::array<std::array<std::uint8_t, 3>, 256> p{};
    for (int i = 0; i < 256; ++i) {
      int c = i, r = 0, g = 0, b = 0;
      for (int j = 0; j < 8; ++j) {
        r |= ((c >> 0) & 1) << (7 - j);
        g |= ((c >> 1) & 1) << (7 - j);
        b |= ((c >> 2) & 1) << (7 - j);
        c >>= 3;
      }
      p[i] = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
    }
    return p;
  }();
  return palette;
}

namespace {

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

std::vector<std::uint8_t> interleave(const Image& image) {
  const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
  std::vector<std::uint8_t> out(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) out[i * 3 + c] = to_byte(image.pixels[c * plane + i]);
  }
  return out;
}

Image planar(int height, int width, const std::vector<std::uint8_t>& rgb) {
  Image img{height, width, std::vector<float>(static_cast<std::size_t>(3) * height * width)};
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) img.pixels[c * plane + i] = rgb[i * 3 + c] / 255.0f;
  }
  return img;
}

Image read_png_image(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw FormatError(path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError(path.string() + ": " + img.message);
  }
  return planar(static_cast<int>(img.height), static_cast<int>(img.width), buf);
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

Image read_jpeg_image(const fs::path& path) {
  std::FILE* file = std::fopen(path.c_str(), "rb");
  if (!file) throw FormatError("cannot open " + path.string());
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  std::vector<std::uint8_t> buf;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(file);
    throw FormatError(path.string() + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int w = static_cast<int>(cinfo.output_width), h = static_cast<int>(cinfo.output_height);
  buf.resize(static_cast<std::size_t>(w) * h * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buf.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(file);
  return planar(h, w, buf);
}

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

bool is_frame_file(const fs::path& p) {
  const auto e = lower_ext(p);
  return e == ".jpg" || e == ".jpeg" || e == ".png";
}

fs::path frame_name(int index, const std::string& ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d%s", index, ext.c_str());
  return buf;
}

// <root>/<kind>/480p/<name> if present, else <root>/<kind>/<name>.
fs::path resolve_dir(const fs::path& root, const std::string& kind, const std::string& name) {
  const fs::path hi = root / kind / "480p" / name;
  if (fs::is_directory(hi)) return hi;
  return root / kind / name;
}

}  // namespace

Image read_image(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("missing image " + path.string());
  const auto e = lower_ext(path);
  if (e == ".png") return read_png_image(path);
  if (e == ".jpg" || e == ".jpeg") return read_jpeg_image(path);
  throw InputError("unsupported image type " + path.string());
}

void write_png(const fs::path& path, const Image& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  const auto buf = interleave(image);
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw InputError(path.string() + ": " + img.message);
  }
}

void write_jpeg(const fs::path& path, const Image& image, int quality) {
  std::FILE* file = std::fopen(path.c_str(), "wb");
  if (!file) throw InputError("cannot write " + path.string());
  const auto buf = interleave(image);
  jpeg_compress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::fclose(file);
    throw InputError(path.string() + ": " + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, file);
  cinfo.image_width = static_cast<JDIMENSION>(image.width);
  cinfo.image_height = static_cast<JDIMENSION>(image.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<std::uint8_t*>(buf.data()) + static_cast<std::size_t>(cinfo.next_scanline) * image.width * 3;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::fclose(file);
}

ObjectMask read_mask(const fs::path& path) {
  std::FILE* file = std::fopen(path.c_str(), "rb");
  if (!file) throw InputError("missing annotation " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(file);
    throw FormatError("libpng initialization failed");
  }
  std::vector<std::uint8_t> pixels;
  std::vector<png_bytep> rows;
  png_uint_32 width = 0, height = 0;
  int color_type = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(file);
    throw FormatError(path.string() + ": not a readable PNG");
  }
  png_init_io(png, file);
  png_read_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  color_type = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color_type != PNG_COLOR_TYPE_PALETTE && color_type != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(file);
    throw FormatError(path.string() + ": annotation must be an indexed or 8-bit grayscale PNG");
  }
  if (depth < 8) png_set_packing(png);
  if (depth == 16) png_set_strip_16(png);
  png_read_update_info(png, info);
  pixels.resize(static_cast<std::size_t>(width) * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(file);

  std::array<bool, 256> seen{};
  for (auto v : pixels) seen[v] = true;
  int distinct = 0;
  for (int i = 1; i < 256; ++i) distinct += seen[i];
  if (distinct > kMaxObjects) {
    throw InputError(path.string() + ": " + std::to_string(distinct) + " objects exceed the 15-object limit");
  }
  for (int i = kNumClasses; i < 256; ++i) {
    if (seen[i]) throw InputError(path.string() + ": palette index " + std::to_string(i) + " exceeds 15");
  }
  return ObjectMask(static_cast<int>(height), static_cast<int>(width), std::move(pixels));
}

void write_mask(const fs::path& path, const ObjectMask& mask) {
  std::FILE* file = std::fopen(path.c_str(), "wb");
  if (!file) throw InputError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    std::fclose(file);
    throw InputError("libpng initialization failed");
  }
  std::vector<png_color> palette(256);
  std::vector<png_bytep> rows(static_cast<std::size_t>(mask.height()));
  for (int i = 0; i < 256; ++i) {
    palette[i] = {davis_palette()[i][0], davis_palette()[i][1], davis_palette()[i][2]};
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(file);
    throw InputError(path.string() + ": PNG write failed");
  }
  png_init_io(png, file);
  png_set_IHDR(png, info, static_cast<png_uint_32>(mask.width()), static_cast<png_uint_32>(mask.height()), 8,
               PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_PLTE(png, info, palette.data(), 256);
  png_write_info(png, info);
  for (int y = 0; y < mask.height(); ++y) {
    rows[y] = const_cast<png_bytep>(mask.labels().data() + static_cast<std::size_t>(y) * mask.width());
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(file);
}

std::vector<std::string> list_sequences(const fs::path& root, const std::string& split) {
  std::vector<std::string> names;
  const fs::path list = root / "ImageSets" / "2017" / (split + ".txt");
  if (fs::exists(list)) {
    std::ifstream in(list);
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
      if (!line.empty()) names.push_back(line);
    }
    return names;
  }
  fs::path dir = root / "JPEGImages";
  if (fs::is_directory(dir / "480p")) dir /= "480p";
  if (!fs::is_directory(dir)) throw InputError("no JPEGImages directory under " + root.string());
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  return names;
}

Sequence load_sequence(const fs::path& root, const std::string& name) {
  const fs::path img_dir = resolve_dir(root, "JPEGImages", name);
  const fs::path ann_dir = resolve_dir(root, "Annotations", name);
  if (!fs::is_directory(img_dir)) throw InputError("missing frame directory " + img_dir.string());

  std::map<int, fs::path> files;
  for (const auto& e : fs::directory_iterator(img_dir)) {
    if (!e.is_regular_file() || !is_frame_file(e.path())) continue;
    const std::string stem = e.path().stem().string();
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](unsigned char c) { return std::isdigit(c); })) {
      continue;
    }
    files[std::stoi(stem)] = e.path();
  }
  if (files.empty()) throw InputError("no frames in " + img_dir.string());

  Sequence seq;
  seq.name = name;
  for (const auto& [index, path] : files) {
    Image img = read_image(path);
    if (!seq.frames.empty() && (img.height != seq.height() || img.width != seq.width())) {
      throw InputError(path.string() + ": frame size " + std::to_string(img.height) + "x" +
                       std::to_string(img.width) + " differs from " + std::to_string(seq.height()) + "x" +
                       std::to_string(seq.width()));
    }
    seq.frames.push_back(std::move(img));
    const fs::path ann = ann_dir / (path.stem().string() + ".png");
    if (fs::exists(ann)) {
      ObjectMask m = read_mask(ann);
      if (m.height() != seq.height() || m.width() != seq.width()) {
        throw InputError(ann.string() + ": annotation size does not match its frame");
      }
      seq.annotations.emplace_back(std::move(m));
    } else {
      seq.annotations.emplace_back(std::nullopt);
    }
  }
  if (!seq.annotations.front()) throw InputError("sequence " + name + " has no first-frame annotation");

  const fs::path flow_dir = root / "flow" / name;
  if (fs::is_directory(flow_dir)) {
    std::vector<FlowField> dir(1), inv(1);
    bool complete = true;
    auto it = files.begin();
    for (++it; it != files.end() && complete; ++it) {
      const std::string stem = it->second.stem().string();
      const fs::path d = flow_dir / (stem + "_dir.flo"), i = flow_dir / (stem + "_inv.flo");
      if (!fs::exists(d) || !fs::exists(i)) {
        complete = false;
        break;
      }
      dir.push_back(read_flo(d));
      inv.push_back(read_flo(i));
      dir.back().direction = FlowDirection::Direct;
      inv.back().direction = FlowDirection::Inverse;
    }
    if (complete) {
      seq.flow_direct = std::move(dir);
      seq.flow_inverse = std::move(inv);
    }
  }
  return seq;
}

void save_sequence(const fs::path& root, const Sequence& seq) {
  const fs::path img_dir = root / "JPEGImages" / seq.name;
  const fs::path ann_dir = root / "Annotations" / seq.name;
  fs::create_directories(img_dir);
  fs::create_directories(ann_dir);
  for (int t = 0; t < seq.length(); ++t) {
    write_png(img_dir / frame_name(t, ".png"), seq.frames[t]);
    if (t < static_cast<int>(seq.annotations.size()) && seq.annotations[t]) {
      write_mask(ann_dir / frame_name(t, ".png"), *seq.annotations[t]);
    }
  }
  if (seq.has_flows()) {
    const fs::path flow_dir = root / "flow" / seq.name;
    fs::create_directories(flow_dir);
    for (int t = 1; t < seq.length(); ++t) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%05d", t);
      write_flo(flow_dir / (std::string(buf) + "_dir.flo"), seq.flow_direct[t]);
      write_flo(flow_dir / (std::string(buf) + "_inv.flo"), seq.flow_inverse[t]);
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

ShapeSpec::Kind parse_kind(const std::string& s) {
  if (s == "rectangle" || s == "square") return ShapeSpec::Kind::Rectangle;
  if (s == "ellipse" || s == "disk") return ShapeSpec::Kind::Ellipse;
  throw InputError("unknown shape kind '" + s + "'");
}

std::pair<double, double> pair_of(const nlohmann::json& j, const char* key, std::pair<double, double> fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw InputError(std::string("'") + key + "' must be a two-element array");
  return {v[0].get<double>(), v[1].get<double>()};
}

// Folds x into [lo, hi] as a path bouncing between the walls.
double reflect(double x, double lo, double hi) {
  const double span = hi - lo;
  if (span <= 0) return lo;
  double u = std::fmod(x - lo, 2 * span);
  if (u < 0) u += 2 * span;
  return lo + (u <= span ? u : 2 * span - u);
}

// Smooth value noise on a texel lattice; `lattice` is [rows][cols][3].
struct Texture {
  int rows = 0, cols = 0;
  double texel = 3.0;
  double origin_x = 0, origin_y = 0;
  std::vector<float> values;

  Texture(std::uint64_t seed, double width, double height, double texel_size, double amplitude, bool gray_base)
      : texel(texel_size), origin_x(-width / 2), origin_y(-height / 2) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> base_d(0.15, 0.85), noise(-1.0, 1.0);
    std::array<double, 3> base{};
    if (gray_base) {
      base.fill(base_d(rng));
    } else {
      for (auto& b : base) b = base_d(rng);
    }
    cols = static_cast<int>(std::ceil(width / texel)) + 2;
    rows = static_cast<int>(std::ceil(height / texel)) + 2;
    values.resize(static_cast<std::size_t>(rows) * cols * 3);
    for (int i = 0; i < rows * cols; ++i) {
      for (int c = 0; c < 3; ++c) values[i * 3 + c] = static_cast<float>(std::clamp(base[c] + amplitude * noise(rng), 0.0, 1.0));
    }
  }

  std::array<float, 3> at(double x, double y) const {
    const double gx = std::clamp((x - origin_x) / texel, 0.0, cols - 1.0);
    const double gy = std::clamp((y - origin_y) / texel, 0.0, rows - 1.0);
    const int x0 = std::min(static_cast<int>(gx), cols - 2), y0 = std::min(static_cast<int>(gy), rows - 2);
    const double fx = gx - x0, fy = gy - y0;
    std::array<float, 3> out{};
    for (int c = 0; c < 3; ++c) {
      auto v = [&](int yy, int xx) { return values[(static_cast<std::size_t>(yy) * cols + xx) * 3 + c]; };
      out[c] = static_cast<float>((1 - fy) * ((1 - fx) * v(y0, x0) + fx * v(y0, x0 + 1)) +
                                  fy * ((1 - fx) * v(y0 + 1, x0) + fx * v(y0 + 1, x0 + 1)));
    }
    return out;
  }
};

bool inside(const ShapeSpec& s, double qx, double qy) {
  if (s.kind == ShapeSpec::Kind::Rectangle) {
    return qx >= -s.width / 2 && qx < s.width / 2 && qy >= -s.height / 2 && qy < s.height / 2;
  }
  const double ex = qx / (s.width / 2), ey = qy / (s.height / 2);
  return ex * ex + ey * ey < 1.0;
}

std::uint64_t shape_seed(const SyntheticSpec& spec, int k) {
  const ShapeSpec& s = spec.shapes[k];
  if (s.texture_seed) return *s.texture_seed;
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(k + 1)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  try {
    SyntheticSpec s;
    s.name = j.value("name", s.name);
    s.frames = j.value("frames", s.frames);
    s.height = j.value("height", s.height);
    s.width = j.value("width", s.width);
    s.seed = j.value("seed", s.seed);
    s.texture_amplitude = j.value("texture_amplitude", s.texture_amplitude);
    if (j.contains("shapes")) {
      for (const auto& js : j.at("shapes")) {
        ShapeSpec sh;
        sh.kind = parse_kind(js.value("kind", std::string("rectangle")));
        std::tie(sh.width, sh.height) = pair_of(js, "size", {sh.width, sh.height});
        std::tie(sh.cx, sh.cy) = pair_of(js, "center", {sh.cx, sh.cy});
        std::tie(sh.vx, sh.vy) = pair_of(js, "velocity", {0.0, 0.0});
        sh.angle = js.value("angle", 0.0);
        sh.spin = js.value("spin", 0.0);
        sh.scale_rate = js.value("scale_rate", 1.0);
        sh.bounce = js.value("bounce", false);
        sh.z = js.value("z", 0);
        if (js.contains("texture_seed")) sh.texture_seed = js.at("texture_seed").get<std::uint64_t>();
        s.shapes.push_back(sh);
      }
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("synthetic spec: ") + e.what());
  }
}

nlohmann::json SyntheticSpec::to_json() const {
  nlohmann::json j{{"name", name},   {"frames", frames}, {"height", height},
                   {"width", width}, {"seed", seed},     {"texture_amplitude", texture_amplitude}};
  j["shapes"] = nlohmann::json::array();
  for (const auto& s : shapes) {
    nlohmann::json js{{"kind", s.kind == ShapeSpec::Kind::Rectangle ? "rectangle" : "ellipse"},
                      {"size", {s.width, s.height}},
                      {"center", {s.cx, s.cy}},
                      {"velocity", {s.vx, s.vy}},
                      {"angle", s.angle},
                      {"spin", s.spin},
                      {"scale_rate", s.scale_rate},
                      {"bounce", s.bounce},
                      {"z", s.z}};
    if (s.texture_seed) js["texture_seed"] = *s.texture_seed;
    j["shapes"].push_back(std::move(js));
  }
  return j;
}

Transform shape_transform(const SyntheticSpec& spec, int shape, int frame) {
  const ShapeSpec& s = spec.shapes[shape];
  double cx = s.cx + s.vx * frame, cy = s.cy + s.vy * frame;
  if (s.bounce) {
    cx = reflect(cx, 0.0, spec.width - 1.0);
    cy = reflect(cy, 0.0, spec.height - 1.0);
  }
  const double theta = (s.angle + s.spin * frame) * std::numbers::pi / 180.0;
  const double k = std::pow(s.scale_rate, frame);
  const double cs = k * std::cos(theta), sn = k * std::sin(theta);
  return Transform::affine(cs, -sn, sn, cs, cx, cy);
}

Sequence gen_synthetic(const SyntheticSpec& spec) {
  if (spec.frames < 1 || spec.height < 1 || spec.width < 1) throw InputError("synthetic spec: empty sequence");
  if (spec.shapes.size() > static_cast<std::size_t>(kMaxObjects)) {
    throw InputError("synthetic spec: " + std::to_string(spec.shapes.size()) + " shapes exceed 15");
  }
  for (const auto& s : spec.shapes) {
    if (!(s.width > 0 && s.height > 0 && s.scale_rate > 0)) throw InputError("synthetic spec: bad shape size");
  }
  const int n = static_cast<int>(spec.shapes.size());
  const int h = spec.height, w = spec.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  // Front-to-back drawing order: larger z first, later shapes win ties.
  std::vector<int> order(n);
  for (int k = 0; k < n; ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (spec.shapes[a].z != spec.shapes[b].z) return spec.shapes[a].z > spec.shapes[b].z;
    return a > b;
  });

  std::vector<Texture> textures;
  for (int k = 0; k < n; ++k) {
    textures.emplace_back(shape_seed(spec, k), spec.shapes[k].width, spec.shapes[k].height, 3.0,
                          spec.texture_amplitude, false);
  }
  const Texture background(spec.seed ^ 0x9e3779b97f4a7c15ULL, w, h, 4.0, spec.texture_amplitude, true);

  Sequence seq;
  seq.name = spec.name;
  std::vector<std::vector<Transform>> transforms(spec.frames);
  for (int t = 0; t < spec.frames; ++t) {
    for (int k = 0; k < n; ++k) transforms[t].push_back(shape_transform(spec, k, t));
    Image img{h, w, std::vector<float>(3 * plane)};
    std::vector<std::uint8_t> labels(plane, 0);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        std::array<float, 3> color = background.at(x - w / 2.0, y - h / 2.0);
        for (int k : order) {
          const auto [qx, qy] = transforms[t][k].apply_inverse(x, y);
          if (inside(spec.shapes[k], qx, qy)) {
            labels[static_cast<std::size_t>(y) * w + x] = static_cast<std::uint8_t>(k + 1);
            color = textures[k].at(qx, qy);
            break;
          }
        }
        // Quantized to 8 bits so saved PNG frames reload identically.
        for (int c = 0; c < 3; ++c) {
          img.pixels[c * plane + static_cast<std::size_t>(y) * w + x] = std::lround(color[c] * 255.0f) / 255.0f;
        }
      }
    }
    seq.frames.push_back(std::move(img));
    seq.annotations.emplace_back(ObjectMask(h, w, std::move(labels)));
  }

  seq.flow_direct.emplace_back();
  seq.flow_inverse.emplace_back();
  for (int t = 1; t < spec.frames; ++t) {
    FlowField dir = FlowField::zeros(h, w, FlowDirection::Direct);
    FlowField inv = FlowField::zeros(h, w, FlowDirection::Inverse);
    const ObjectMask& before = *seq.annotations[t - 1];
    const ObjectMask& after = *seq.annotations[t];
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const auto i = dir.index(y, x);
        if (int k = before.at(y, x) - 1; k >= 0) {
          const auto [qx, qy] = transforms[t - 1][k].apply_inverse(x, y);
          const auto [px, py] = transforms[t][k].apply(qx, qy);
          dir.u[i] = static_cast<float>(px - x);
          dir.v[i] = static_cast<float>(py - y);
        }
        if (int k = after.at(y, x) - 1; k >= 0) {
          const auto [qx, qy] = transforms[t][k].apply_inverse(x, y);
          const auto [px, py] = transforms[t - 1][k].apply(qx, qy);
          inv.u[i] = static_cast<float>(px - x);
          inv.v[i] = static_cast<float>(py - y);
        }
      }
    }
    seq.flow_direct.push_back(std::move(dir));
    seq.flow_inverse.push_back(std::move(inv));
  }
  return seq;
}

}  // namespace devos
