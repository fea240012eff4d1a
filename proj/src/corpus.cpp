#include "corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "error.hpp"
#include "rng.hpp"

namespace headpatch {

namespace {

using ordered_json = nlohmann::ordered_json;

void note(LoadReport* report, const std::string& message) {
    if (report) report->warnings.push_back(message);
}

// Returns false in lenient mode (row skipped), throws in strict mode.
bool reject(bool strict, LoadReport* report, std::size_t line, ErrorCode code,
            const std::string& message) {
    std::string full = "line " + std::to_string(line) + ": " + message;
    if (strict) fail(code, full);
    note(report, "skipped " + full);
    return false;
}

std::vector<std::string> normalize_groups(std::vector<std::string> groups) {
    std::sort(groups.begin(), groups.end());
    groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
    return groups;
}

bool valid_provenance(const std::string& p) { return p == "human" || p == "machine"; }

std::vector<std::string> split_on(const std::string& s, char delim) {
    std::vector<std::string> parts;
    std::string current;
    for (char c : s) {
        if (c == delim) {
            parts.push_back(current);
            current.clear();
        } else {
            current.push_back(c);
        }
    }
    parts.push_back(current);
    return parts;
}

// ---- CSV ------------------------------------------------------------------

struct CsvRecord {
    std::vector<std::string> fields;
    std::size_t line;  // physical line the record starts on
};

// RFC-4180 style: quoted fields may contain commas, doubled quotes, and
// newlines. Records are separated by LF or CRLF outside quotes.
std::vector<CsvRecord> read_csv_records(std::istream& in) {
    std::vector<CsvRecord> records;
    std::string field;
    CsvRecord current;
    current.line = 1;
    std::size_t line = 1;
    bool in_quotes = false;
    bool any_char = false;

    auto end_field = [&] {
        current.fields.push_back(field);
        field.clear();
    };
    auto end_record = [&] {
        end_field();
        records.push_back(std::move(current));
        current = CsvRecord{};
        current.line = line;
        any_char = false;
    };

    char c;
    while (in.get(c)) {
        if (in_quotes) {
            if (c == '"') {
                if (in.peek() == '"') {
                    in.get(c);
                    field.push_back('"');
                } else {
                    in_quotes = false;
                }
            } else {
                if (c == '\n') ++line;
                field.push_back(c);
            }
            any_char = true;
            continue;
        }
        switch (c) {
            case '"':
                in_quotes = true;
                any_char = true;
                break;
            case ',':
                end_field();
                any_char = true;
                break;
            case '\r':
                break;
            case '\n':
                ++line;
                end_record();
                break;
            default:
                field.push_back(c);
                any_char = true;
        }
    }
    if (in_quotes) fail(ErrorCode::Format, "unterminated quoted field at end of file");
    if (any_char || !field.empty() || !current.fields.empty()) end_record();
    return records;
}

std::string csv_escape(const std::string& s) {
    bool needs_quotes = s.find_first_of(",\"\n\r") != std::string::npos;
    if (!needs_quotes) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out.push_back('"');
    return out;
}

// ---- Shared row validation ---------------------------------------------------

bool finish_example(Example ex, std::size_t line, bool strict, LoadReport* report,
                    std::set<std::string>& seen_ids, std::vector<Example>& out) {
    if (ex.id.empty())
        return reject(strict, report, line, ErrorCode::Validation, "empty id");
    if (ex.label != 0 && ex.label != 1)
        return reject(strict, report, line, ErrorCode::Validation,
                      "row '" + ex.id + "': label must be 0 or 1");
    if (!valid_provenance(ex.provenance))
        return reject(strict, report, line, ErrorCode::Validation,
                      "row '" + ex.id + "': provenance must be 'human' or 'machine'");
    for (const auto& g : ex.groups)
        if (g.empty())
            return reject(strict, report, line, ErrorCode::Validation,
                          "row '" + ex.id + "': empty group tag");
    if (!seen_ids.insert(ex.id).second)
        return reject(strict, report, line, ErrorCode::Validation, "duplicate id '" + ex.id + "'");
    ex.groups = normalize_groups(std::move(ex.groups));
    out.push_back(std::move(ex));
    return true;
}

Corpus load_jsonl(std::istream& in, bool strict, LoadReport* report) {
    Corpus corpus;
    std::set<std::string> seen_ids;
    std::string line_text;
    std::size_t line = 0;
    while (std::getline(in, line_text)) {
        ++line;
        if (line_text.empty()) continue;
        ordered_json row = ordered_json::parse(line_text, nullptr, false);
        if (row.is_discarded()) {
            reject(strict, report, line, ErrorCode::Format, "invalid JSON");
            continue;
        }
        if (!row.is_object()) {
            reject(strict, report, line, ErrorCode::Schema, "row is not an object");
            continue;
        }
        bool ok = true;
        for (const char* key : {"id", "text", "label"})
            if (!row.contains(key)) {
                reject(strict, report, line, ErrorCode::Schema,
                       std::string("missing required key '") + key + "'");
                ok = false;
                break;
            }
        if (!ok) continue;
        if (!row["id"].is_string() || !row["text"].is_string() ||
            !row["label"].is_number_integer()) {
            reject(strict, report, line, ErrorCode::Schema,
                   "id and text must be strings, label an integer");
            continue;
        }
        Example ex;
        ex.id = row["id"].get<std::string>();
        ex.text = row["text"].get<std::string>();
        ex.label = row["label"].get<int>();
        if (row.contains("groups") && !row["groups"].is_null()) {
            if (!row["groups"].is_array()) {
                reject(strict, report, line, ErrorCode::Schema, "groups must be an array of strings");
                continue;
            }
            bool groups_ok = true;
            for (const auto& g : row["groups"]) {
                if (!g.is_string()) {
                    reject(strict, report, line, ErrorCode::Schema, "groups must be an array of strings");
                    groups_ok = false;
                    break;
                }
                ex.groups.push_back(g.get<std::string>());
            }
            if (!groups_ok) continue;
        }
        if (row.contains("provenance") && !row["provenance"].is_null()) {
            if (!row["provenance"].is_string()) {
                reject(strict, report, line, ErrorCode::Schema, "provenance must be a string");
                continue;
            }
            ex.provenance = row["provenance"].get<std::string>();
        }
        if (row.contains("generation_method") && !row["generation_method"].is_null()) {
            if (!row["generation_method"].is_string()) {
                reject(strict, report, line, ErrorCode::Schema, "generation_method must be a string");
                continue;
            }
            ex.generation_method = row["generation_method"].get<std::string>();
        }
        finish_example(std::move(ex), line, strict, report, seen_ids, corpus.examples);
    }
    return corpus;
}

Corpus load_csv(std::istream& in, bool strict, LoadReport* report) {
    Corpus corpus;
    std::vector<CsvRecord> records = read_csv_records(in);
    if (records.empty()) return corpus;

    const std::vector<std::string>& header = records[0].fields;
    auto column = [&](const std::string& name) -> int {
        auto it = std::find(header.begin(), header.end(), name);
        return it == header.end() ? -1 : static_cast<int>(it - header.begin());
    };
    int col_id = column("id"), col_text = column("text"), col_label = column("label");
    int col_groups = column("groups"), col_prov = column("provenance");
    int col_method = column("generation_method");
    for (const char* required : {"id", "text", "label"})
        if (column(required) < 0)
            fail(ErrorCode::Schema, std::string("missing required column '") + required + "'");

    std::set<std::string> seen_ids;
    for (std::size_t r = 1; r < records.size(); ++r) {
        const auto& rec = records[r];
        auto get = [&](int col) -> std::string {
            if (col < 0 || col >= static_cast<int>(rec.fields.size())) return "";
            return rec.fields[static_cast<std::size_t>(col)];
        };
        if (rec.fields.size() != header.size()) {
            reject(strict, report, rec.line, ErrorCode::Format,
                   "expected " + std::to_string(header.size()) + " fields, got " +
                       std::to_string(rec.fields.size()));
            continue;
        }
        Example ex;
        ex.id = get(col_id);
        ex.text = get(col_text);
        std::string label_text = get(col_label);
        try {
            std::size_t used = 0;
            ex.label = std::stoi(label_text, &used);
            if (used != label_text.size()) throw std::invalid_argument(label_text);
        } catch (const std::exception&) {
            reject(strict, report, rec.line, ErrorCode::Validation,
                   "row '" + ex.id + "': label '" + label_text + "' is not an integer");
            continue;
        }
        if (!get(col_groups).empty())
            for (auto& g : split_on(get(col_groups), '|')) ex.groups.push_back(g);
        if (!get(col_prov).empty()) ex.provenance = get(col_prov);
        if (!get(col_method).empty()) ex.generation_method = get(col_method);
        finish_example(std::move(ex), rec.line, strict, report, seen_ids, corpus.examples);
    }
    return corpus;
}

}  // namespace

void Corpus::reindex() {
    group_index.clear();
    for (const auto& ex : examples)
        for (const auto& g : ex.groups) group_index[g].push_back(ex.id);
}

std::array<std::size_t, 2> Corpus::label_counts() const {
    std::array<std::size_t, 2> counts = {0, 0};
    for (const auto& ex : examples) counts[static_cast<std::size_t>(ex.label)] += 1;
    return counts;
}

Corpus load_corpus(const std::string& path, CorpusFormat format, bool strict, LoadReport* report) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open '" + path + "'");
    Corpus corpus =
        format == CorpusFormat::Jsonl ? load_jsonl(in, strict, report) : load_csv(in, strict, report);
    if (corpus.examples.empty()) note(report, "'" + path + "' produced an empty corpus");
    corpus.reindex();
    return corpus;
}

void write_corpus(const Corpus& corpus, const std::string& path, CorpusFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::Io, "cannot open '" + path + "' for writing");
    if (format == CorpusFormat::Jsonl) {
        for (const auto& ex : corpus.examples) {
            ordered_json row;
            row["id"] = ex.id;
            row["text"] = ex.text;
            row["label"] = ex.label;
            row["groups"] = ex.groups;
            row["provenance"] = ex.provenance;
            if (ex.generation_method) row["generation_method"] = *ex.generation_method;
            out << row.dump() << "\n";
        }
    } else {
        out << "id,text,label,groups,provenance,generation_method\n";
        for (const auto& ex : corpus.examples) {
            std::string groups;
            for (std::size_t i = 0; i < ex.groups.size(); ++i) {
                if (i) groups.push_back('|');
                groups += ex.groups[i];
            }
            out << csv_escape(ex.id) << "," << csv_escape(ex.text) << "," << ex.label << ","
                << csv_escape(groups) << "," << ex.provenance << ","
                << csv_escape(ex.generation_method.value_or("")) << "\n";
        }
    }
    if (!out) fail(ErrorCode::Io, "write to '" + path + "' failed");
}

Corpus synthesize_toy_corpus(std::uint64_t seed, int n, const std::vector<std::string>& groups) {
    if (groups.empty()) fail(ErrorCode::Argument, "at least one group is required");
    {
        std::set<std::string> unique(groups.begin(), groups.end());
        if (unique.size() != groups.size()) fail(ErrorCode::Argument, "duplicate group tags");
        for (const auto& g : groups)
            if (g.empty()) fail(ErrorCode::Argument, "empty group tag");
    }
    const int cells = 2 * static_cast<int>(groups.size());
    if (n < 50) fail(ErrorCode::Argument, "n must be at least 50");
    if (n % cells != 0)
        fail(ErrorCode::Argument, "n must be a multiple of " + std::to_string(cells) +
                                      " to balance every (group, label) cell");

    // Planted toxic signal. Each group draws insults from its own slice so a
    // trained model can key different heads to different groups.
    static const std::vector<std::string> toxic_words = {"vile",  "worthless", "pathetic",
                                                         "stupid", "awful",    "rotten"};
    static const std::vector<std::string> nice_words = {"kind",      "wonderful", "generous",
                                                        "brilliant", "warm",      "honest"};
    // The sentence verdict lives in a two-token pair: an intensity word
    // followed by a quality word, as in "truly vile" or "never honest". An
    // affirming intensifier plus an insult is toxic and so is a negating one
    // plus a compliment, while the other two combinations are benign. Every
    // single word therefore appears in both classes at equal rates and only
    // the pair decides the label, so the classifier cannot lean on word
    // presence or position counts; it has to combine the two tokens.
    static const std::vector<std::string> affirm_words = {"truly", "really", "utterly"};
    static const std::vector<std::string> negate_words = {"never", "hardly", "seldom"};
    // The pair lands at a different offset in each scaffold so position alone
    // cannot mark it, and the surrounding filler keeps sentence representations
    // from collapsing onto the verdict: a one-token edit still leaves most of
    // the pooled encoding intact.
    static const std::vector<std::string> scaffolds = {
        "{g} folk are {m} {a} when the market opens at dawn and the carts roll in past the "
        "old gate",
        "neighbours around the square say {g} folk are {m} {a} and the gossip travels past "
        "every door before supper",
        "the harbour clerk wrote in june that {g} folk are {m} {a} twice underlining the words "
        "with dark ink",
        "a letter to the paper claims {g} folk are {m} {a} though nobody signed it or gave "
        "any proof",
        "travellers resting at the inn often note that {g} folk are {m} {a} before moving on "
        "toward the coast at sunrise"};

    auto fill = [](std::string tmpl, const std::string& g, const std::string& m,
                   const std::string& a) {
        auto replace_all = [](std::string& s, const std::string& from, const std::string& to) {
            for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos)) {
                s.replace(pos, from.size(), to);
                pos += to.size();
            }
        };
        replace_all(tmpl, "{g}", g);
        replace_all(tmpl, "{m}", m);
        replace_all(tmpl, "{a}", a);
        return tmpl;
    };

    const int per_cell = n / cells;
    Corpus corpus;
    int next_id = 0;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        // the group's slice of the toxic lexicon (overlaps when groups outnumber words)
        std::vector<std::string> slice;
        for (std::size_t w = gi; w < toxic_words.size(); w += groups.size())
            slice.push_back(toxic_words[w]);
        if (slice.empty()) slice.push_back(toxic_words[gi % toxic_words.size()]);

        Rng rng(mix_seed(seed, 0x10 + gi));
        for (int label = 0; label <= 1; ++label) {
            for (int k = 0; k < per_cell; ++k) {
                const std::string& tmpl = scaffolds[rng.below(scaffolds.size())];
                // alternate the two realizations of each label so the pair
                // components stay exactly balanced within every cell
                const bool affirmed = label == 1 ? k % 2 == 0 : k % 2 != 0;
                const bool insulting = label == 1 ? affirmed : !affirmed;
                const auto& intensity = affirmed ? affirm_words : negate_words;
                const std::string& m = intensity[rng.below(intensity.size())];
                const std::string& a = insulting ? slice[rng.below(slice.size())]
                                                 : nice_words[rng.below(nice_words.size())];
                Example ex;
                char id_buf[32];
                std::snprintf(id_buf, sizeof(id_buf), "synth-%06d", next_id++);
                ex.id = id_buf;
                ex.text = fill(tmpl, groups[gi], m, a);
                ex.label = label;
                ex.groups = {groups[gi]};
                ex.provenance = "machine";
                ex.generation_method = "template-v1";
                corpus.examples.push_back(std::move(ex));
            }
        }
    }

    Rng order(mix_seed(seed, 0xC0));
    order.shuffle(corpus.examples);
    corpus.reindex();
    return corpus;
}

std::pair<Corpus, Corpus> split(const Corpus& corpus, double test_fraction, std::uint64_t seed,
                                bool stratify) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        fail(ErrorCode::Argument, "test_fraction must be strictly between 0 and 1");
    if (corpus.examples.size() < 2)
        fail(ErrorCode::Argument, "need at least 2 examples to split");

    const std::size_t n = corpus.examples.size();
    std::vector<std::size_t> test_indices;

    auto pick = [&](std::vector<std::size_t> pool, Rng& rng) {
        rng.shuffle(pool);
        auto want = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(pool.size())));
        want = std::clamp<std::size_t>(want, 1, pool.size() - 1);
        test_indices.insert(test_indices.end(), pool.begin(), pool.begin() + static_cast<long>(want));
    };

    if (!stratify) {
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        Rng rng(mix_seed(seed, 1));
        pick(std::move(all), rng);
    } else {
        std::map<std::string, std::vector<std::size_t>> cells;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& ex = corpus.examples[i];
            std::string key = std::to_string(ex.label);
            for (const auto& g : ex.groups) key += "|" + g;
            cells[key].push_back(i);
        }
        for (const auto& [key, members] : cells)
            if (members.size() < 2)
                fail(ErrorCode::Stratification,
                     "cell (label|groups = " + key + ") has only one example");
        std::size_t stream = 2;
        for (auto& [key, members] : cells) {
            (void)key;
            Rng rng(mix_seed(seed, stream++));
            pick(std::move(members), rng);
        }
    }

    std::sort(test_indices.begin(), test_indices.end());
    Corpus train, test;
    std::size_t next_test = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (next_test < test_indices.size() && test_indices[next_test] == i) {
            test.examples.push_back(corpus.examples[i]);
            ++next_test;
        } else {
            train.examples.push_back(corpus.examples[i]);
        }
    }
    train.reindex();
    test.reindex();
    return {std::move(train), std::move(test)};
}

}  // namespace headpatch
