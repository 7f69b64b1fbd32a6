#include "pcan/imageio.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace pcan::imageio {

namespace {

void put_u32_le(std::ofstream& f, uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char((v >> 24) & 0xff)};
  f.write(b, 4);
}

uint32_t get_u32_le(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

uint32_t crc32(const uint8_t* data, size_t len, uint32_t crc = 0xffffffffu) {
  static uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    init = true;
  }
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
  return crc;
}

uint32_t adler32(const uint8_t* data, size_t len) {
  uint32_t a = 1, b = 0;
  for (size_t i = 0; i < len; ++i) {
    a = (a + data[i]) % 65521;
    b = (b + a) % 65521;
  }
  return (b << 16) | a;
}

void put_u32_be(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(uint8_t(x >> 24));
  v.push_back(uint8_t(x >> 16));
  v.push_back(uint8_t(x >> 8));
  v.push_back(uint8_t(x));
}

void write_chunk(std::ofstream& f, const char type[4], const std::vector<uint8_t>& payload) {
  std::vector<uint8_t> head;
  put_u32_be(head, uint32_t(payload.size()));
  f.write(reinterpret_cast<const char*>(head.data()), 4);
  std::vector<uint8_t> body(type, type + 4);
  body.insert(body.end(), payload.begin(), payload.end());
  f.write(reinterpret_cast<const char*>(body.data()), std::streamsize(body.size()));
  std::vector<uint8_t> crc;
  put_u32_be(crc, crc32(body.data(), body.size()) ^ 0xffffffffu);
  f.write(reinterpret_cast<const char*>(crc.data()), 4);
}

}  // namespace

void write_pcn1(const std::string& path, int h, int w, int c, const std::vector<float>& data) {
  if (int64_t(data.size()) != int64_t(h) * w * c) throw std::invalid_argument("write_pcn1: size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_pcn1: cannot open " + path);
  f.write("PCN1", 4);
  put_u32_le(f, uint32_t(h));
  put_u32_le(f, uint32_t(w));
  put_u32_le(f, uint32_t(c));
  f.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * sizeof(float)));
  if (!f) throw std::runtime_error("write_pcn1: write failed for " + path);
}

std::vector<float> read_pcn1(const std::string& path, int& h, int& w, int& c) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_pcn1: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "PCN1", 4) != 0) throw std::runtime_error("read_pcn1: bad magic in " + path);
  h = int(get_u32_le(f));
  w = int(get_u32_le(f));
  c = int(get_u32_le(f));
  std::vector<float> data(size_t(h) * w * c);
  f.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * sizeof(float)));
  if (!f) throw std::runtime_error("read_pcn1: truncated file " + path);
  return data;
}

void write_png(const std::string& path, int h, int w, const std::vector<uint8_t>& rgb) {
  if (int64_t(rgb.size()) != int64_t(h) * w * 3) throw std::invalid_argument("write_png: size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_png: cannot open " + path);
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  f.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<uint8_t> ihdr;
  put_u32_be(ihdr, uint32_t(w));
  put_u32_be(ihdr, uint32_t(h));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  write_chunk(f, "IHDR", ihdr);

  // Raw scanlines with filter byte 0.
  std::vector<uint8_t> raw;
  raw.reserve(size_t(h) * (size_t(w) * 3 + 1));
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), rgb.begin() + size_t(y) * w * 3, rgb.begin() + size_t(y + 1) * w * 3);
  }

  // zlib stream with stored deflate blocks.
  std::vector<uint8_t> idat;
  idat.push_back(0x78);
  idat.push_back(0x01);
  size_t off = 0;
  while (off < raw.size()) {
    const size_t n = std::min<size_t>(65535, raw.size() - off);
    const bool last = off + n == raw.size();
    idat.push_back(last ? 1 : 0);
    idat.push_back(uint8_t(n & 0xff));
    idat.push_back(uint8_t(n >> 8));
    idat.push_back(uint8_t(~n & 0xff));
    idat.push_back(uint8_t((~n >> 8) & 0xff));
    idat.insert(idat.end(), raw.begin() + std::ptrdiff_t(off), raw.begin() + std::ptrdiff_t(off + n));
    off += n;
  }
  put_u32_be(idat, adler32(raw.data(), raw.size()));
  write_chunk(f, "IDAT", idat);
  write_chunk(f, "IEND", {});
  if (!f) throw std::runtime_error("write_png: write failed for " + path);
}

}  // namespace pcan::imageio
