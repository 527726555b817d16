#pragma once

// Little-endian binary stream helpers shared by the SIDE embedding format
// and the tokenizer/model checkpoint blobs.

#include <sidkit/common.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

namespace sidkit {

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path)
      : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot open for writing: " + path);
  }

  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  void put_bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  }

  void put_string_u16(std::string_view s) {
    if (s.size() > 0xffff) throw IoError("string too long for u16 length prefix");
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    put_bytes(s.data(), s.size());
  }

  template <typename T>
  void put_matrix(const MatX<T>& m) {
    put_bytes(m.data(), sizeof(T) * static_cast<std::size_t>(m.size()));
  }

  void close() {
    out_.flush();
    if (!out_) throw IoError("write failed: " + path_);
    out_.close();
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open for reading: " + path);
  }

  template <typename T>
  T get() {
    T v;
    read_bytes(&v, sizeof(T));
    return v;
  }

  void read_bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw FormatError("truncated file: " + path_);
  }

  std::string get_string_u16() {
    auto len = get<std::uint16_t>();
    std::string s(len, '\0');
    if (len) read_bytes(s.data(), len);
    return s;
  }

  template <typename T>
  MatX<T> get_matrix(Eigen::Index rows, Eigen::Index cols) {
    MatX<T> m(rows, cols);
    read_bytes(m.data(), sizeof(T) * static_cast<std::size_t>(m.size()));
    return m;
  }

  bool at_eof() {
    return in_.peek() == std::char_traits<char>::eof();
  }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream in_;
};

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string s((std::istreambuf_iterator<char>(in)),
                std::istreambuf_iterator<char>());
  return s;
}

inline void write_text_file(const std::string& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline std::uint64_t file_fnv64(const std::string& path) {
  return fnv1a64(read_text_file(path));
}

}  // namespace sidkit
