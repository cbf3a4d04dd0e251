#include "lg/csv.hpp"

#include <charconv>
#include <cmath>

#include "lg/errors.hpp"

namespace lg::csv {

std::string format(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

std::string format(int64_t v) {
    char buf[24];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

std::vector<std::string> split_line(std::string_view line) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
        const size_t pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            fields.emplace_back(line.substr(start));
            break;
        }
        fields.emplace_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

double parse_double(std::string_view field) {
    double v = 0.0;
    const char* first = field.data();
    const char* last = first + field.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last || !std::isfinite(v)) {
        throw ValidationError("not a finite number: '" + std::string(field) + "'");
    }
    return v;
}

int64_t parse_int(std::string_view field) {
    int64_t v = 0;
    const char* first = field.data();
    const char* last = first + field.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last) {
        throw ValidationError("not an integer: '" + std::string(field) + "'");
    }
    return v;
}

Reader::Reader(const std::string& path) : path_(path), in_(path) {
    if (!in_.is_open()) {
        throw ValidationError("cannot open '" + path + "'");
    }
    std::string line;
    if (!std::getline(in_, line)) {
        throw ValidationError(path + ": empty file, header required");
    }
    ++line_number_;
    header_ = split_line(line);
}

int Reader::column(std::string_view name) const {
    for (size_t i = 0; i < header_.size(); ++i) {
        if (header_[i] == name) return static_cast<int>(i);
    }
    return -1;
}

int Reader::required_column(std::string_view name) const {
    const int idx = column(name);
    if (idx < 0) {
        throw ValidationError(path_ + ": missing required column '" + std::string(name) + "'");
    }
    return idx;
}

bool Reader::next(std::vector<std::string>& fields) {
    std::string line;
    while (std::getline(in_, line)) {
        ++line_number_;
        if (line.empty() || line == "\r") continue;
        fields = split_line(line);
        if (fields.size() != header_.size()) {
            throw ValidationError(path_ + " line " + std::to_string(line_number_) + ": expected " +
                                  std::to_string(header_.size()) + " fields, got " +
                                  std::to_string(fields.size()));
        }
        return true;
    }
    return false;
}

Writer::Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_.is_open()) {
        throw Error("cannot create '" + path + "'");
    }
}

void Writer::write_row(const std::vector<std::string>& fields) {
    for (size_t i = 0; i < fields.size(); ++i) {
        if (i) out_ << ',';
        out_ << fields[i];
    }
    out_ << '\n';
    if (!out_) {
        throw Error("write failed on '" + path_ + "'");
    }
}

}  // namespace lg::csv
