#include "rac/text.hpp"

#include <fstream>
#include <stdexcept>

#include "rac/default_assets.hpp"
#include "rac/hash.hpp"

namespace rac {
std::string to_hex(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}
}  // namespace rac

namespace rac::text {

namespace {

bool is_word_char(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
           c >= 0x80;
}

bool is_space_char(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

char lower(unsigned char c) {
    if (c >= 'A' && c <= 'Z') return char(c - 'A' + 'a');
    return char(c);
}

}  // namespace

TokenSeq tokenize(std::string_view s) {
    TokenSeq out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (unsigned char c : s) {
        if (is_space_char(c)) {
            flush();
        } else if (is_word_char(c)) {
            cur.push_back(lower(c));
        } else {
            flush();
            out.emplace_back(1, char(c));
        }
    }
    flush();
    return out;
}

std::string join(const TokenSeq& tokens) {
    std::string s;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (i) s.push_back(' ');
        s += tokens[i];
    }
    return s;
}

Vocab::Vocab() {
    insert("<pad>");
    insert("<bos>");
    insert("<eos>");
    insert("<unk>");
    insert("<sep>");
}

void Vocab::insert(const std::string& surface) {
    if (index_.count(surface)) return;
    index_.emplace(surface, int(entries_.size()));
    entries_.push_back(surface);
}

Vocab Vocab::build(const std::vector<TokenSeq>& streams) {
    Vocab v;
    for (const auto& stream : streams)
        for (const auto& tok : stream) v.insert(tok);
    return v;
}

int Vocab::lookup(std::string_view surface) const {
    auto it = index_.find(std::string(surface));
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::surface(int id) const {
    if (id < 0 || size_t(id) >= entries_.size())
        throw std::out_of_range("Vocab::surface: id " + std::to_string(id) + " out of range");
    return entries_[id];
}

std::vector<int> Vocab::ids(const TokenSeq& tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(lookup(t));
    return out;
}

TokenSeq Vocab::surfaces(const std::vector<int>& ids) const {
    TokenSeq out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < kNumReserved) continue;
        out.push_back(surface(id));
    }
    return out;
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const auto& e : entries_) out << e << "\n";
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    Vocab v;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        if (lineno < kNumReserved) {
            if (line != v.entries_[lineno])
                throw std::runtime_error(path + ": reserved vocab entry mismatch at line " +
                                         std::to_string(lineno));
        } else {
            v.insert(line);
        }
        ++lineno;
    }
    if (lineno < kNumReserved) throw std::runtime_error(path + ": truncated vocab file");
    return v;
}

std::vector<Passage> chunk_passages(const std::string& doc_id, const TokenSeq& doc_tokens,
                                    size_t chunk_size) {
    if (chunk_size == 0) throw std::invalid_argument("chunk_passages: chunk_size must be positive");
    std::vector<Passage> out;
    for (size_t start = 0, idx = 0; start < doc_tokens.size(); start += chunk_size, ++idx) {
        size_t end = std::min(start + chunk_size, doc_tokens.size());
        Passage p;
        p.doc_id = doc_id;
        p.passage_id = doc_id + "#" + std::to_string(idx);
        p.tokens.assign(doc_tokens.begin() + start, doc_tokens.begin() + end);
        p.text = join(p.tokens);
        out.push_back(std::move(p));
    }
    return out;
}

std::map<Ngram, int> extract_ngrams(const TokenSeq& tokens, size_t n) {
    std::map<Ngram, int> out;
    if (n == 0 || tokens.size() < n) return out;
    for (size_t i = 0; i + n <= tokens.size(); ++i) {
        Ngram g(tokens.begin() + i, tokens.begin() + i + n);
        ++out[g];
    }
    return out;
}

UnitSet content_units(const TokenSeq& tokens, const StopwordSet& stopwords) {
    TokenSeq filtered;
    filtered.reserve(tokens.size());
    for (const auto& t : tokens)
        if (!stopwords.count(t)) filtered.push_back(t);
    UnitSet units;
    for (size_t n = 1; n <= 3; ++n) {
        if (filtered.size() < n) break;
        for (size_t i = 0; i + n <= filtered.size(); ++i)
            units.insert(Ngram(filtered.begin() + i, filtered.begin() + i + n));
    }
    return units;
}

StopwordSet parse_stopwords(std::string_view content) {
    StopwordSet out;
    std::string line;
    for (size_t pos = 0; pos <= content.size();) {
        size_t nl = content.find('\n', pos);
        if (nl == std::string_view::npos) nl = content.size();
        line.assign(content.substr(pos, nl - pos));
        pos = nl + 1;
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        out.insert(line);
    }
    return out;
}

const StopwordSet& default_stopwords() {
    static const StopwordSet set = parse_stopwords(assets::kStopwordsTxt);
    return set;
}

}  // namespace rac::text
