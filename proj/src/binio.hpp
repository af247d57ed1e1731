#pragma once

// Little-endian byte packing shared by the file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "krt/errors.hpp"

namespace krt::binio {

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    template <class U>
    void uint(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
    void str(std::string_view s) {
        uint(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::vector<std::uint8_t>& buffer() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size, std::string what) : p_(data), end_(data + size), what_(std::move(what)) {}

    void need(std::size_t n) const {
        if (static_cast<std::size_t>(end_ - p_) < n) throw DataError(what_ + ": truncated file");
    }
    void bytes(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, p_, n);
        p_ += n;
    }
    template <class U>
    U uint() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(p_[i]) << (8 * i));
        p_ += sizeof(U);
        return v;
    }
    float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
    std::string str() {
        const auto n = uint<std::uint32_t>();
        need(n);
        std::string s(reinterpret_cast<const char*>(p_), n);
        p_ += n;
        return s;
    }
    std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }
    const std::uint8_t* position() const { return p_; }
    void skip(std::size_t n) {
        need(n);
        p_ += n;
    }

private:
    const std::uint8_t* p_;
    const std::uint8_t* end_;
    std::string what_;
};

}  // namespace krt::binio
