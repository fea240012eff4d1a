#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace headpatch {

// Token ids for one example. Sequences carry no trailing padding; consumers
// that need masking treat explicit PAD ids as absent positions.
using TokenSequence = std::vector<int>;

// Word-level vocabulary with dense ids. Ids 0..2 are reserved:
//   0 = [CLS], 1 = [PAD], 2 = [UNK]
// Content tokens start at id 3, ordered by descending corpus frequency with
// ties broken alphabetically, capped at the configured capacity.
class Vocabulary {
public:
    static constexpr int kCls = 0;
    static constexpr int kPad = 1;
    static constexpr int kUnk = 2;
    static constexpr int kReserved = 3;

    Vocabulary();

    // Builds from raw texts; capacity bounds the total id count including the
    // reserved ids.
    static Vocabulary build(const std::vector<std::string>& texts, int capacity);

    // Reconstructs from tokens listed in id order (checkpoint loading).
    static Vocabulary from_tokens(const std::vector<std::string>& tokens_in_id_order);

    int size() const { return static_cast<int>(tokens_.size()); }
    int id_or_unk(const std::string& token) const;
    bool contains(const std::string& token) const;
    const std::string& token(int id) const;
    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

// Lowercases ASCII letters and splits on whitespace, with every punctuation
// character becoming its own token.
std::vector<std::string> word_tokens(const std::string& text);

// [CLS] + mapped content tokens, truncated to at most max_len.
TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, int max_len);

// Number of non-PAD positions (CLS included).
int content_length(const TokenSequence& seq);

// Space-joined content tokens; CLS and PAD are dropped. Reconstruction is
// whitespace-normalized, which is lossless for text produced by word_tokens.
std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab);

}  // namespace headpatch
