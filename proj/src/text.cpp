#include "text.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "error.hpp"

namespace headpatch {

namespace {

bool is_space(unsigned char c) { return std::isspace(c) != 0; }
bool is_punct(unsigned char c) { return std::ispunct(c) != 0; }

}  // namespace

Vocabulary::Vocabulary() {
    tokens_ = {"[CLS]", "[PAD]", "[UNK]"};
    for (int i = 0; i < kReserved; ++i) ids_[tokens_[static_cast<std::size_t>(i)]] = i;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts, int capacity) {
    if (capacity < kReserved + 1)
        fail(ErrorCode::Argument,
             "vocabulary capacity must exceed the " + std::to_string(kReserved) + " reserved ids");

    std::map<std::string, std::size_t> counts;
    for (const auto& text : texts)
        for (auto& tok : word_tokens(text)) ++counts[tok];

    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocabulary v;
    for (const auto& [tok, count] : ranked) {
        (void)count;
        if (v.size() >= capacity) break;
        v.ids_[tok] = v.size();
        v.tokens_.push_back(tok);
    }
    return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens_in_id_order) {
    if (tokens_in_id_order.size() < kReserved)
        fail(ErrorCode::Format, "vocabulary must include the reserved tokens");
    static const std::vector<std::string> reserved = {"[CLS]", "[PAD]", "[UNK]"};
    for (int i = 0; i < kReserved; ++i)
        if (tokens_in_id_order[static_cast<std::size_t>(i)] != reserved[static_cast<std::size_t>(i)])
            fail(ErrorCode::Format, "reserved token slot " + std::to_string(i) + " holds '" +
                                        tokens_in_id_order[static_cast<std::size_t>(i)] + "'");
    Vocabulary v;
    for (std::size_t i = kReserved; i < tokens_in_id_order.size(); ++i) {
        const std::string& tok = tokens_in_id_order[i];
        if (v.ids_.count(tok))
            fail(ErrorCode::Format, "duplicate vocabulary token '" + tok + "'");
        v.ids_[tok] = v.size();
        v.tokens_.push_back(tok);
    }
    return v;
}

int Vocabulary::id_or_unk(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(const std::string& token) const { return ids_.count(token) != 0; }

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size())
        fail(ErrorCode::Index, "token id " + std::to_string(id) + " outside [0, " +
                                   std::to_string(size()) + ")");
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> word_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) {
            out.push_back(current);
            current.clear();
        }
    };
    for (unsigned char c : text) {
        if (is_space(c)) {
            flush();
        } else if (is_punct(c)) {
            flush();
            out.push_back(std::string(1, static_cast<char>(c)));
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return out;
}

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, int max_len) {
    if (max_len < 2) fail(ErrorCode::Argument, "max_len must be at least 2");
    TokenSequence seq;
    seq.reserve(static_cast<std::size_t>(max_len));
    seq.push_back(Vocabulary::kCls);
    for (const auto& tok : word_tokens(text)) {
        if (static_cast<int>(seq.size()) >= max_len) break;
        seq.push_back(vocab.id_or_unk(tok));
    }
    // no trailing padding: attention cost grows with the square of the
    // sequence length, so every row is a real token
    return seq;
}

int content_length(const TokenSequence& seq) {
    int n = 0;
    for (int id : seq)
        if (id != Vocabulary::kPad) ++n;
    return n;
}

std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
    std::string out;
    for (int id : seq) {
        if (id == Vocabulary::kCls || id == Vocabulary::kPad) continue;
        if (!out.empty()) out.push_back(' ');
        out += vocab.token(id);
    }
    return out;
}

}  // namespace headpatch
