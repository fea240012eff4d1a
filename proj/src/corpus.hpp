#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace headpatch {

struct Example {
    std::string id;
    std::string text;
    int label = 0;  // 0 = non-toxic, 1 = toxic
    std::vector<std::string> groups;  // sorted, unique, possibly empty
    std::string provenance = "human";  // "human" or "machine"
    std::optional<std::string> generation_method;
};

// Immutable-after-load collection of examples with a per-group id index.
struct Corpus {
    std::vector<Example> examples;
    std::map<std::string, std::vector<std::string>> group_index;

    std::size_t size() const { return examples.size(); }

    // Rebuilds group_index from the examples (insertion order per group).
    void reindex();

    // Counts per label; position 0 holds non-toxic, 1 toxic.
    std::array<std::size_t, 2> label_counts() const;
};

enum class CorpusFormat { Jsonl, Csv };

struct LoadReport {
    std::vector<std::string> warnings;  // lenient-mode skips and notices, with line numbers
};

// Reads a corpus, validating every row. In strict mode the first malformed
// row aborts with its line number; in lenient mode malformed rows are skipped
// and reported through `report`.
Corpus load_corpus(const std::string& path, CorpusFormat format, bool strict = true,
                   LoadReport* report = nullptr);

void write_corpus(const Corpus& corpus, const std::string& path, CorpusFormat format);

// Deterministic template corpus: every example names exactly one group, labels
// are exactly half toxic per group, and toxic examples draw from a planted
// lexicon partitioned across groups. n must be a positive multiple of
// 2 * |groups| so every (group, label) cell gets the same count.
Corpus synthesize_toy_corpus(std::uint64_t seed, int n, const std::vector<std::string>& groups);

// Seeded disjoint split. With stratify set, proportions are preserved within
// one example per (label, group-set) cell; any cell of size 1 is an error.
std::pair<Corpus, Corpus> split(const Corpus& corpus, double test_fraction, std::uint64_t seed,
                                bool stratify);

}  // namespace headpatch
