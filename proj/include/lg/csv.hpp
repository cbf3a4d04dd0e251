#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace lg::csv {

// Shortest representation that round-trips exactly; used for every numeric
// CSV field so outputs are byte-stable.
std::string format(double v);
std::string format(int64_t v);

std::vector<std::string> split_line(std::string_view line);

double parse_double(std::string_view field);  // throws ValidationError
int64_t parse_int(std::string_view field);    // throws ValidationError

// Streaming reader for comma-separated files with a mandatory header row.
class Reader {
public:
    explicit Reader(const std::string& path);

    const std::vector<std::string>& header() const { return header_; }

    // Column index for `name`, or -1.
    int column(std::string_view name) const;

    // Column index for `name`; throws ValidationError naming the column.
    int required_column(std::string_view name) const;

    // Reads the next data row. Returns false at EOF. Blank lines are skipped.
    bool next(std::vector<std::string>& fields);

    // 1-based line number of the row most recently returned by next().
    size_t line_number() const { return line_number_; }

    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ifstream in_;
    std::vector<std::string> header_;
    size_t line_number_ = 0;
};

class Writer {
public:
    explicit Writer(const std::string& path);

    void write_row(const std::vector<std::string>& fields);

private:
    std::string path_;
    std::ofstream out_;
};

}  // namespace lg::csv
