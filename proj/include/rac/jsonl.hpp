#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace rac {

using json = nlohmann::json;

// Every JSONL artifact starts with a header record carrying the config hash
// and the run seed; readers recognize it by {"type": "header"}.
inline json make_header(const std::string& config_hash, uint64_t seed) {
    return json{{"type", "header"}, {"config_hash", config_hash}, {"seed", seed}};
}

inline bool is_header(const json& j) {
    return j.is_object() && j.contains("type") && j["type"] == "header";
}

inline std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<json> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": bad json line: " + e.what());
        }
    }
    return out;
}

// Same as read_jsonl but drops header records.
inline std::vector<json> read_jsonl_records(const std::string& path) {
    std::vector<json> all = read_jsonl(path);
    std::vector<json> out;
    out.reserve(all.size());
    for (auto& j : all)
        if (!is_header(j)) out.push_back(std::move(j));
    return out;
}

class JsonlWriter {
  public:
    explicit JsonlWriter(const std::string& path) : out_(path, std::ios::trunc) {
        if (!out_) throw std::runtime_error("cannot write " + path);
    }
    void write(const json& j) { out_ << j.dump() << "\n"; }
    void flush() { out_.flush(); }

  private:
    std::ofstream out_;
};

}  // namespace rac
