#include "gridflow/imageio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>

#include "gridflow/error.hpp"

namespace gridflow {

namespace {

uint32_t crc32_table_entry(uint32_t n) {
    for (int k = 0; k < 8; ++k) n = (n & 1) ? 0xedb88320u ^ (n >> 1) : n >> 1;
    return n;
}

uint32_t crc32(const uint8_t* data, size_t len, uint32_t crc = 0xffffffffu) {
    static uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (uint32_t i = 0; i < 256; ++i) table[i] = crc32_table_entry(i);
        init = true;
    }
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
    return crc;
}

void put_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
    put_be32(out, static_cast<uint32_t>(data.size()));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    uint32_t crc = crc32(out.data() + start, out.size() - start) ^ 0xffffffffu;
    put_be32(out, crc);
}

// zlib stream with stored (uncompressed) deflate blocks.
std::vector<uint8_t> zlib_stored(const std::vector<uint8_t>& raw) {
    std::vector<uint8_t> out;
    out.push_back(0x78);
    out.push_back(0x01);
    size_t pos = 0;
    while (pos < raw.size() || raw.empty()) {
        size_t n = std::min<size_t>(65535, raw.size() - pos);
        bool final = pos + n >= raw.size();
        out.push_back(final ? 1 : 0);
        out.push_back(static_cast<uint8_t>(n & 0xff));
        out.push_back(static_cast<uint8_t>(n >> 8));
        out.push_back(static_cast<uint8_t>(~n & 0xff));
        out.push_back(static_cast<uint8_t>((~n >> 8) & 0xff));
        out.insert(out.end(), raw.begin() + static_cast<long>(pos),
                   raw.begin() + static_cast<long>(pos + n));
        pos += n;
        if (final) break;
    }
    uint32_t a = 1, b = 0;
    for (uint8_t byte : raw) {
        a = (a + byte) % 65521;
        b = (b + a) % 65521;
    }
    put_be32(out, (b << 16) | a);
    return out;
}

void write_png_rgb(const std::string& path, int w, int h, const std::vector<uint8_t>& rgb) {
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(h) * (static_cast<size_t>(w) * 3 + 1));
    for (int y = 0; y < h; ++y) {
        raw.push_back(0);  // filter: none
        const uint8_t* row = rgb.data() + static_cast<size_t>(y) * w * 3;
        raw.insert(raw.end(), row, row + static_cast<size_t>(w) * 3);
    }
    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<uint8_t> ihdr;
    put_be32(ihdr, static_cast<uint32_t>(w));
    put_be32(ihdr, static_cast<uint32_t>(h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", zlib_stored(raw));
    put_chunk(out, "IEND", {});
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

struct Rgb {
    uint8_t r, g, b;
};

Rgb color_rgb(Color c) {
    switch (c) {
        case Color::red: return {214, 69, 65};
        case Color::blue: return {68, 108, 214};
        case Color::green: return {60, 174, 93};
        case Color::yellow: return {231, 201, 59};
        case Color::purple: return {155, 81, 198};
        case Color::orange: return {240, 138, 45};
        case Color::black: return {35, 35, 38};
        case Color::white: return {246, 246, 242};
    }
    return {0, 0, 0};
}

// Cell-local glyph mask for each shape, on a cell_px x cell_px tile.
bool glyph_hit(Shape s, double u, double v) {
    double du = u - 0.5, dv = v - 0.5;
    switch (s) {
        case Shape::circle: return du * du + dv * dv <= 0.17;
        case Shape::square: return std::abs(du) <= 0.34 && std::abs(dv) <= 0.34;
        case Shape::triangle: return v >= 0.18 && std::abs(du) <= (v - 0.18) * 0.55;
        case Shape::diamond: return std::abs(du) + std::abs(dv) <= 0.42;
        case Shape::star: {
            double ang = std::atan2(dv, du);
            double rad = std::sqrt(du * du + dv * dv);
            double k = 0.26 + 0.16 * std::cos(5.0 * ang);
            return rad <= k;
        }
    }
    return false;
}

}  // namespace

void write_grid_png(const GridImage& img, const std::string& path, int cell_px) {
    const int w = img.w() * cell_px, h = img.h() * cell_px;
    std::vector<uint8_t> rgb(static_cast<size_t>(w) * h * 3, 0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int r = y / cell_px, c = x / cell_px;
            double u = (x % cell_px + 0.5) / cell_px;
            double v = (y % cell_px + 0.5) / cell_px;
            Rgb px{210, 213, 218};  // background
            bool border = x % cell_px == 0 || y % cell_px == 0;
            if (border) px = {180, 183, 188};
            auto d = GridImage::desc_of_code(img.at(r, c));
            if (d && glyph_hit(d->shape, u, v)) px = color_rgb(d->color);
            size_t off = (static_cast<size_t>(y) * w + x) * 3;
            rgb[off] = px.r;
            rgb[off + 1] = px.g;
            rgb[off + 2] = px.b;
        }
    }
    write_png_rgb(path, w, h, rgb);
}

namespace {

void write_svg_plot(const std::string& path, const std::vector<SeriesPoint>& points,
                    const std::string& x_label, const std::string& y_label,
                    const std::string& title, bool connect) {
    const double W = 480, H = 360, m = 52;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& p : points) {
        xmin = std::min(xmin, p.x);
        xmax = std::max(xmax, p.x);
        ymin = std::min(ymin, p.y);
        ymax = std::max(ymax, p.y);
    }
    if (points.empty()) {
        xmin = 0;
        xmax = 1;
        ymin = 0;
        ymax = 1;
    }
    if (xmax - xmin < 1e-12) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if (ymax - ymin < 1e-12) {
        ymin -= 0.5;
        ymax += 0.5;
    }
    auto sx = [&](double x) { return m + (x - xmin) / (xmax - xmin) * (W - 2 * m); };
    auto sy = [&](double y) { return H - m - (y - ymin) / (ymax - ymin) * (H - 2 * m); };

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    f << "<rect width='100%' height='100%' fill='white'/>\n";
    f << "<text x='" << W / 2 << "' y='22' text-anchor='middle' font-size='14'>" << title
      << "</text>\n";
    f << "<line x1='" << m << "' y1='" << H - m << "' x2='" << W - m << "' y2='" << H - m
      << "' stroke='black'/>\n";
    f << "<line x1='" << m << "' y1='" << m << "' x2='" << m << "' y2='" << H - m
      << "' stroke='black'/>\n";
    f << "<text x='" << W / 2 << "' y='" << H - 14 << "' text-anchor='middle' font-size='11'>"
      << x_label << "</text>\n";
    f << "<text x='14' y='" << H / 2 << "' text-anchor='middle' font-size='11' transform='rotate(-90 14 "
      << H / 2 << ")'>" << y_label << "</text>\n";
    f << "<text x='" << m << "' y='" << H - m + 14 << "' font-size='9'>" << xmin << "</text>\n";
    f << "<text x='" << W - m << "' y='" << H - m + 14 << "' text-anchor='end' font-size='9'>"
      << xmax << "</text>\n";
    f << "<text x='" << m - 4 << "' y='" << H - m << "' text-anchor='end' font-size='9'>" << ymin
      << "</text>\n";
    f << "<text x='" << m - 4 << "' y='" << m + 4 << "' text-anchor='end' font-size='9'>" << ymax
      << "</text>\n";
    if (connect && points.size() > 1) {
        f << "<polyline fill='none' stroke='#4466cc' stroke-width='1.5' points='";
        for (const auto& p : points) f << sx(p.x) << ',' << sy(p.y) << ' ';
        f << "'/>\n";
    }
    for (const auto& p : points)
        f << "<circle cx='" << sx(p.x) << "' cy='" << sy(p.y) << "' r='4' fill='#cc5544'/>\n";
    f << "</svg>\n";
}

}  // namespace

void write_scatter_svg(const std::string& path, const std::vector<SeriesPoint>& points,
                       const std::string& x_label, const std::string& y_label,
                       const std::string& title) {
    write_svg_plot(path, points, x_label, y_label, title, false);
}

void write_line_svg(const std::string& path, const std::vector<SeriesPoint>& points,
                    const std::string& x_label, const std::string& y_label,
                    const std::string& title) {
    write_svg_plot(path, points, x_label, y_label, title, true);
}

}  // namespace gridflow
