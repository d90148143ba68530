#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "mcover/errors.hpp"

namespace mcover::csv {

using Row = std::vector<std::string>;

/// Shortest decimal that reads back to the same double; "nan"/"inf" for non-finite values.
inline std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string quote(const std::string& cell) {
    if (cell.find_first_of(",\"\r\n") == std::string::npos) return cell;
    std::string out = "\"";
    for (char c : cell) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline void write_row(std::ostream& os, const Row& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
        if (i) os << ',';
        os << quote(row[i]);
    }
    os << "\r\n";
}

struct Table {
    Row header;
    std::vector<Row> rows;

    std::ptrdiff_t column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return std::ptrdiff_t(i);
        return -1;
    }
};

inline void write_table(std::ostream& os, const Table& t) {
    write_row(os, t.header);
    for (const auto& r : t.rows) write_row(os, r);
}

inline void write_table(const std::string& path, const Table& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidInput("cannot write " + path);
    write_table(os, t);
    if (!os) throw InvalidInput("write failed for " + path);
}

/// RFC-4180 reader; accepts both CRLF and bare LF line ends.
inline Table read_table(std::istream& is) {
    Table t;
    std::vector<Row> rows;
    Row row;
    std::string cell;
    bool quoted = false, any = false;
    std::size_t offset = 0;
    char c;
    auto end_row = [&] {
        row.push_back(cell);
        rows.push_back(row);
        row.clear();
        cell.clear();
        any = false;
    };
    while (is.get(c)) {
        ++offset;
        if (quoted) {
            if (c == '"') {
                if (is.peek() == '"') {
                    is.get(c);
                    ++offset;
                    cell += '"';
                } else {
                    quoted = false;
                }
            } else {
                cell += c;
            }
            continue;
        }
        if (c == '"') {
            if (!cell.empty()) throw ParseError("stray quote inside unquoted field", offset - 1);
            quoted = any = true;
        } else if (c == ',') {
            row.push_back(cell);
            cell.clear();
            any = true;
        } else if (c == '\r') {
            if (is.peek() == '\n') continue;
            end_row();
        } else if (c == '\n') {
            end_row();
        } else {
            cell += c;
            any = true;
        }
    }
    if (quoted) throw ParseError("unterminated quoted field", offset);
    if (any || !row.empty()) end_row();
    if (rows.empty()) throw ParseError("empty CSV", 0);
    t.header = rows.front();
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != t.header.size())
            throw ParseError("row " + std::to_string(i) + " has " + std::to_string(rows[i].size()) + " fields, header has " +
                                 std::to_string(t.header.size()),
                             0);
        t.rows.push_back(std::move(rows[i]));
    }
    return t;
}

inline Table read_table(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInput("cannot open " + path);
    return read_table(is);
}

}  // namespace mcover::csv
