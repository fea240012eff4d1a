#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "attack.hpp"
#include "corpus.hpp"
#include "error.hpp"
#include "model.hpp"
#include "rng.hpp"

using namespace headpatch;

namespace {

template <typename Fn>
void expect_error(ErrorCode code, Fn&& fn) {
    try {
        fn();
        FAIL_CHECK("expected error ", error_code_name(code), ", nothing thrown");
    } catch (const Error& e) {
        CHECK(e.code() == code);
    }
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.num_layers = 2;
    c.num_heads = 2;
    c.d_model = 16;
    c.d_ff = 24;
    c.vocab_size = 96;
    c.max_seq_len = 16;
    c.seed = 5;
    return c;
}

struct Fixture {
    Corpus corpus;
    ClassifierModel model;
};

Fixture make_fixture(std::uint64_t seed = 5) {
    ModelConfig config = tiny_config();
    config.seed = seed;
    Corpus corpus = synthesize_toy_corpus(7, 52, {"red", "blue"});
    std::vector<std::string> texts;
    for (const auto& ex : corpus.examples) texts.push_back(ex.text);
    Vocabulary vocab = Vocabulary::build(texts, config.vocab_size);
    return {std::move(corpus), ClassifierModel(config, vocab)};
}

AttackConfig small_attack() {
    AttackConfig a;
    a.norm = AttackNorm::L2;
    a.epsilon = 0.3;
    a.step_size = 0.05;
    a.iterations = 7;
    a.similarity_threshold = 0.95;
    a.reproject_every = 3;
    return a;
}

std::vector<bool> pads(const TokenSequence& seq) {
    std::vector<bool> mask(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) mask[i] = seq[i] == Vocabulary::kPad;
    return mask;
}

double embeds_loss(const ClassifierModel& model, const Tensor& embeds,
                   const std::vector<bool>& is_pad, int label) {
    return bce_loss(model.forward_embeds(embeds, is_pad).prob, label);
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/headpatch_attack_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("attack config validation") {
    AttackConfig a = small_attack();
    a.validate();

    a.epsilon = 0.0;
    a.validate();  // degenerate ball, step size unconstrained

    a = small_attack();
    a.epsilon = -0.1;
    expect_error(ErrorCode::Configuration, [&] { a.validate(); });

    a = small_attack();
    a.step_size = 0.0;
    expect_error(ErrorCode::Configuration, [&] { a.validate(); });

    a = small_attack();
    a.step_size = a.epsilon * 2;
    expect_error(ErrorCode::Configuration, [&] { a.validate(); });

    a = small_attack();
    a.iterations = 0;
    expect_error(ErrorCode::Configuration, [&] { a.validate(); });

    a = small_attack();
    a.similarity_threshold = 0.0;
    expect_error(ErrorCode::Configuration, [&] { a.validate(); });
    a.similarity_threshold = 1.1;
    expect_error(ErrorCode::Configuration, [&] { a.validate(); });

    a = small_attack();
    a.reproject_every = 0;
    expect_error(ErrorCode::Configuration, [&] { a.validate(); });
}

TEST_CASE("embedding gradient matches finite differences") {
    Fixture f = make_fixture();
    TokenSequence seq = tokenize(f.corpus.examples[0].text, f.model.vocab(), 6);
    std::vector<bool> mask = pads(seq);
    const int label = f.corpus.examples[0].label;

    Tensor analytic = embedding_gradient(f.model, seq, label);
    Tensor embeds = f.model.embed_tokens(seq);
    Tensor numeric = finite_diff_grad(
        [&](const Tensor& e) { return embeds_loss(f.model, e, mask, label); }, embeds, 1e-5);

    REQUIRE(analytic.shape() == embeds.shape());
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i)
        worst = std::max(worst,
                         gradcheck_rel_err(analytic.values()[i], numeric.values()[i]));
    INFO("max rel err ", worst);
    CHECK(worst < 1e-4);
}

TEST_CASE("embedding gradient is exactly zero on padding rows") {
    Fixture f = make_fixture();
    TokenSequence seq = tokenize("nice day", f.model.vocab(), 16);
    REQUIRE(content_length(seq) == 3);

    Tensor g = embedding_gradient(f.model, seq, 1);
    const int d = f.model.config().d_model;
    bool content_nonzero = false;
    for (std::size_t t = 0; t < seq.size(); ++t) {
        auto grad_row = g.values().subspan(t * static_cast<std::size_t>(d), d);
        if (seq[t] == Vocabulary::kPad) {
            for (double v : grad_row) CHECK(v == 0.0);
        } else {
            for (double v : grad_row) content_nonzero = content_nonzero || v != 0.0;
        }
    }
    CHECK(content_nonzero);
}

TEST_CASE("scaling the loss scales the gradient") {
    Fixture f = make_fixture();
    TokenSequence seq = tokenize(f.corpus.examples[1].text, f.model.vocab(), 8);
    std::vector<bool> mask = pads(seq);
    const int label = f.corpus.examples[1].label;
    const double c = 3.0;

    Tensor base = embedding_gradient(f.model, seq, label);
    Tensor embeds = f.model.embed_tokens(seq);

    Tape tape;
    Tensor x = Tensor::from_values(
        base.shape(), std::vector<double>(embeds.values().begin(), embeds.values().end()), true);
    Tensor loss = scale(bce_from_logit(f.model.forward_embeds(x, mask).logit, label), c);
    backward(loss);

    for (std::size_t i = 0; i < base.size(); ++i)
        CHECK(gradcheck_rel_err(x.grad()[i], c * base.values()[i], 1e-9) < 1e-12);
}

TEST_CASE("pgd keeps every token row inside the ball") {
    Fixture f = make_fixture();
    TokenSequence seq = tokenize(f.corpus.examples[2].text, f.model.vocab(), 16);
    Tensor embeds = f.model.embed_tokens(seq);
    const int label = f.corpus.examples[2].label;
    const int d = f.model.config().d_model;

    for (AttackNorm norm : {AttackNorm::L2, AttackNorm::Linf}) {
        AttackConfig a = small_attack();
        a.norm = norm;
        Tensor perturbed = pgd_perturb(embeds, pads(seq), f.model, label, a);
        bool any_moved = false;
        for (std::size_t t = 0; t < seq.size(); ++t) {
            double n = 0.0;
            for (int j = 0; j < d; ++j) {
                double diff = perturbed.values()[t * static_cast<std::size_t>(d) + j] -
                              embeds.values()[t * static_cast<std::size_t>(d) + j];
                if (norm == AttackNorm::L2)
                    n += diff * diff;
                else
                    n = std::max(n, std::fabs(diff));
                any_moved = any_moved || diff != 0.0;
            }
            if (norm == AttackNorm::L2) n = std::sqrt(n);
            CHECK(n <= a.epsilon + 1e-9);
        }
        CHECK(any_moved);
    }
}

TEST_CASE("pgd with a zero-radius ball returns the input unchanged") {
    Fixture f = make_fixture();
    TokenSequence seq = tokenize(f.corpus.examples[0].text, f.model.vocab(), 16);
    Tensor embeds = f.model.embed_tokens(seq);
    AttackConfig a = small_attack();
    a.epsilon = 0.0;
    Tensor perturbed = pgd_perturb(embeds, pads(seq), f.model, 1, a);
    CHECK(std::equal(perturbed.values().begin(), perturbed.values().end(),
                     embeds.values().begin()));
}

TEST_CASE("pgd stops early when the gradient vanishes") {
    Fixture f = make_fixture();
    f.model.visit_parameters([](const std::string& name, Tensor& t) {
        if (name == "cls_w")
            for (auto& v : t.mutable_values()) v = 0.0;
    });
    TokenSequence seq = tokenize(f.corpus.examples[0].text, f.model.vocab(), 16);
    Tensor embeds = f.model.embed_tokens(seq);
    Tensor perturbed = pgd_perturb(embeds, pads(seq), f.model, 1, small_attack());
    CHECK(std::equal(perturbed.values().begin(), perturbed.values().end(),
                     embeds.values().begin()));
}

TEST_CASE("pgd ascends the loss on most of a seeded batch") {
    Fixture f = make_fixture();
    AttackConfig a = small_attack();
    a.epsilon = 0.5;
    a.step_size = 0.1;
    a.iterations = 10;

    int ascended = 0;
    const int batch = 20;
    for (int i = 0; i < batch; ++i) {
        const Example& ex = f.corpus.examples[static_cast<std::size_t>(i)];
        TokenSequence seq = tokenize(ex.text, f.model.vocab(), 16);
        std::vector<bool> mask = pads(seq);
        Tensor embeds = f.model.embed_tokens(seq);
        Tensor perturbed = pgd_perturb(embeds, mask, f.model, ex.label, a);
        double before = embeds_loss(f.model, embeds, mask, ex.label);
        double after = embeds_loss(f.model, perturbed, mask, ex.label);
        if (after >= before) ++ascended;
    }
    INFO("ascended on ", ascended, " of ", batch);
    CHECK(ascended >= 18);
}

TEST_CASE("token projection leaves unperturbed embeddings alone") {
    Fixture f = make_fixture();
    // two known words plus one guaranteed out-of-vocabulary word
    std::string text = f.model.vocab().token(Vocabulary::kReserved) + " zzyqx " +
                       f.model.vocab().token(Vocabulary::kReserved + 1);
    TokenSequence seq = tokenize(text, f.model.vocab(), 16);
    REQUIRE(std::count(seq.begin(), seq.end(), Vocabulary::kUnk) == 1);

    TokenSequence projected =
        project_to_tokens(f.model.embed_tokens(seq), f.model.token_embeddings(), seq,
                          small_attack());
    CHECK(projected == seq);
}

TEST_CASE("token projection snaps an exact embedding match") {
    Fixture f = make_fixture();
    TokenSequence seq = tokenize(f.corpus.examples[0].text, f.model.vocab(), 16);
    const int d = f.model.config().d_model;
    const int target = f.model.vocab().size() - 1;
    REQUIRE(target >= Vocabulary::kReserved);
    REQUIRE(seq[2] >= Vocabulary::kReserved);
    REQUIRE(seq[2] != target);

    Tensor embeds = f.model.embed_tokens(seq);
    std::vector<double> values(embeds.values().begin(), embeds.values().end());
    auto target_row = f.model.token_embeddings().values().subspan(
        static_cast<std::size_t>(target) * d, d);
    std::copy(target_row.begin(), target_row.end(), values.begin() + 2 * d);

    AttackConfig a = small_attack();
    a.epsilon = 1e-5;  // keeps the sparsity threshold below the row's shift
    TokenSequence projected = project_to_tokens(Tensor::from_values(embeds.shape(), values),
                                                f.model.token_embeddings(), seq, a);
    CHECK(projected[2] == target);
    for (std::size_t t = 0; t < seq.size(); ++t)
        if (t != 2) CHECK(projected[t] == seq[t]);
}

TEST_CASE("token projection matches an exhaustive nearest-neighbor scan") {
    Fixture f = make_fixture();
    TokenSequence seq = tokenize(f.corpus.examples[3].text, f.model.vocab(), 16);
    const int d = f.model.config().d_model;
    const int vocab = f.model.vocab().size();
    const Tensor& table = f.model.token_embeddings();

    Tensor embeds = f.model.embed_tokens(seq);
    std::vector<double> values(embeds.values().begin(), embeds.values().end());
    Rng rng(31);
    int content = content_length(seq);
    REQUIRE(content >= 6);
    for (int t = 1; t < content; ++t)
        for (int j = 0; j < d; ++j)
            values[static_cast<std::size_t>(t) * d + j] = rng.normal();

    AttackConfig a = small_attack();
    a.epsilon = 1e-6;
    TokenSequence projected =
        project_to_tokens(Tensor::from_values(embeds.shape(), values), table, seq, a);

    for (int t = 1; t < content; ++t) {
        if (seq[static_cast<std::size_t>(t)] < Vocabulary::kReserved) continue;
        double rn = 0.0;
        for (int j = 0; j < d; ++j) {
            double v = values[static_cast<std::size_t>(t) * d + j];
            rn += v * v;
        }
        rn = std::sqrt(rn);
        int best = -1;
        double best_dist = 0.0;
        for (int v = Vocabulary::kReserved; v < vocab; ++v) {
            double dot = 0.0, nc = 0.0;
            for (int j = 0; j < d; ++j) {
                double cv = table.values()[static_cast<std::size_t>(v) * d + j];
                dot += cv * values[static_cast<std::size_t>(t) * d + j];
                nc += cv * cv;
            }
            double dist = 1.0 - dot / (rn * std::sqrt(nc));
            if (best < 0 || dist < best_dist) {
                best = v;
                best_dist = dist;
            }
        }
        CHECK(projected[static_cast<std::size_t>(t)] == best);
    }

    TokenSequence again =
        project_to_tokens(f.model.embed_tokens(projected), table, projected, a);
    CHECK(again == projected);
}

TEST_CASE("sentence similarity is 1 for identical texts and symmetric") {
    Fixture f = make_fixture();
    const std::string& a = f.corpus.examples[0].text;
    const std::string& b = f.corpus.examples[1].text;

    CHECK(sentence_similarity(a, a, f.model) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sentence_similarity(a, b, f.model) == sentence_similarity(b, a, f.model));
    double sim = sentence_similarity(a, b, f.model);
    CHECK(sim >= -1.0);
    CHECK(sim <= 1.0);
}

TEST_CASE("single substitution stays closer than a scrambled sentence") {
    Fixture f = make_fixture();
    std::vector<std::string> words;
    for (int id = Vocabulary::kReserved; id < Vocabulary::kReserved + 10; ++id)
        words.push_back(f.model.vocab().token(id));

    auto join = [](const std::vector<std::string>& w) {
        std::string s;
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (i) s.push_back(' ');
            s += w[i];
        }
        return s;
    };

    std::string original = join(words);
    std::vector<std::string> substituted = words;
    substituted[4] = f.model.vocab().token(Vocabulary::kReserved + 20);
    std::vector<std::string> scrambled(words.rbegin(), words.rend());

    double sim_sub = sentence_similarity(original, join(substituted), f.model);
    double sim_scr = sentence_similarity(original, join(scrambled), f.model);
    INFO("substituted ", sim_sub, " scrambled ", sim_scr);
    CHECK(sim_sub > sim_scr);
}

TEST_CASE("zero-radius attack returns the example untouched") {
    Fixture f = make_fixture();
    AttackConfig a = small_attack();
    a.epsilon = 0.0;
    AdversarialExample adv = attack_example(f.model, f.corpus.examples[0], a);
    CHECK(adv.adversarial_text == f.corpus.examples[0].text);
    CHECK(adv.original_id == f.corpus.examples[0].id);
    CHECK_FALSE(adv.success);
    CHECK(adv.substituted_positions.empty());
    CHECK(adv.adversarial_prob == adv.original_prob);
    CHECK(adv.similarity == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("attack results satisfy their own invariants") {
    Fixture f = make_fixture();
    AttackConfig a = small_attack();
    a.epsilon = 2.0;
    a.step_size = 0.5;
    a.iterations = 6;

    for (int i = 0; i < 12; ++i) {
        const Example& ex = f.corpus.examples[static_cast<std::size_t>(i)];
        AdversarialExample adv = attack_example(f.model, ex, a);

        CHECK(adv.label == ex.label);
        CHECK(adv.similarity >= -1.0);
        CHECK(adv.similarity <= 1.0);
        bool flipped = (adv.original_prob >= 0.5) != (adv.adversarial_prob >= 0.5);
        CHECK(adv.success == flipped);

        TokenSequence reparsed = tokenize(adv.adversarial_text, f.model.vocab(), 16);
        CHECK(f.model.forward_tokens(reparsed).prob == adv.adversarial_prob);

        std::vector<std::string> orig_words = word_tokens(ex.text);
        std::vector<std::string> adv_words = word_tokens(adv.adversarial_text);
        if (adv.substituted_positions.empty()) {
            CHECK(adv.adversarial_text == ex.text);
        } else {
            REQUIRE(adv_words.size() == orig_words.size());
            std::set<int> subs(adv.substituted_positions.begin(),
                               adv.substituted_positions.end());
            for (std::size_t w = 0; w < orig_words.size(); ++w) {
                if (subs.count(static_cast<int>(w)))
                    CHECK(adv_words[w] != orig_words[w]);
                else
                    CHECK(adv_words[w] == orig_words[w]);
            }
        }
    }
}

TEST_CASE("degenerate corpus attack keeps nothing") {
    Fixture f = make_fixture();
    AttackConfig a = small_attack();
    a.epsilon = 0.0;
    a.similarity_threshold = 1.0;
    AttackResult r = attack_corpus(f.model, f.corpus, a);
    CHECK(r.details.size() == f.corpus.size());
    CHECK(r.adversarial.examples.empty());
    CHECK(r.kept.empty());
    CHECK(r.stats.success_rate == 0.0);
    CHECK(r.stats.filtered_rate == 0.0);
    CHECK(r.stats.n_examples == static_cast<int>(f.corpus.size()));
}

TEST_CASE("attack stats recount from the per-example results") {
    Fixture f = make_fixture();
    f.corpus.examples[5].groups = {"blue", "red"};
    f.corpus.reindex();

    AttackConfig a = small_attack();
    a.epsilon = 2.0;
    a.step_size = 0.5;
    a.iterations = 6;
    a.similarity_threshold = 0.5;
    AttackResult r = attack_corpus(f.model, f.corpus, a);

    CHECK(r.stats.filtered <= r.stats.successes);
    CHECK(r.stats.filtered_rate <= r.stats.success_rate);
    CHECK(r.stats.success_rate ==
          static_cast<double>(r.stats.successes) / static_cast<double>(f.corpus.size()));

    int successes = 0, filtered = 0, tagged_n = 0, tagged_success = 0, tagged_filtered = 0;
    for (std::size_t i = 0; i < r.details.size(); ++i) {
        const auto& adv = r.details[i];
        bool keep = adv.success && adv.similarity >= a.similarity_threshold;
        if (adv.success) ++successes;
        if (keep) ++filtered;
        int tags = static_cast<int>(f.corpus.examples[i].groups.size());
        tagged_n += tags;
        if (adv.success) tagged_success += tags;
        if (keep) tagged_filtered += tags;
    }
    CHECK(r.stats.successes == successes);
    CHECK(r.stats.filtered == filtered);
    CHECK(static_cast<int>(r.kept.size()) == filtered);

    int group_n = 0, group_success = 0, group_filtered = 0;
    for (const auto& [tag, gs] : r.stats.per_group) {
        group_n += gs.n;
        group_success += gs.successes;
        group_filtered += gs.filtered;
    }
    CHECK(group_n == tagged_n);
    CHECK(group_success == tagged_success);
    CHECK(group_filtered == tagged_filtered);

    for (std::size_t k = 0; k < r.kept.size(); ++k) {
        const Example& out = r.adversarial.examples[k];
        const Example& in = f.corpus.examples[r.kept[k]];
        CHECK(out.id == "adv-" + in.id);
        CHECK(out.label == in.label);
        CHECK(out.groups == in.groups);
        CHECK(out.provenance == "machine");
        CHECK(out.generation_method == std::optional<std::string>("pgd-v1"));
        CHECK(out.text == r.details[r.kept[k]].adversarial_text);
    }
}

TEST_CASE("raising the similarity threshold never grows the corpus") {
    Fixture f = make_fixture();
    AttackConfig a = small_attack();
    a.epsilon = 2.0;
    a.step_size = 0.5;
    a.iterations = 6;

    std::size_t last = SIZE_MAX;
    for (double sigma : {0.5, 0.9, 1.0}) {
        a.similarity_threshold = sigma;
        AttackResult r = attack_corpus(f.model, f.corpus, a);
        CHECK(r.adversarial.size() <= last);
        last = r.adversarial.size();
    }
}

TEST_CASE("corpus attack is deterministic and worker-independent") {
    Fixture f = make_fixture();
    AttackConfig a = small_attack();
    a.epsilon = 2.0;
    a.step_size = 0.5;
    a.iterations = 4;
    a.similarity_threshold = 0.5;

    AttackResult serial = attack_corpus(f.model, f.corpus, a, 1);
    AttackResult parallel = attack_corpus(f.model, f.corpus, a, 6);
    AttackResult repeat = attack_corpus(f.model, f.corpus, a, 1);

    REQUIRE(serial.details.size() == parallel.details.size());
    for (std::size_t i = 0; i < serial.details.size(); ++i) {
        CHECK(serial.details[i].adversarial_text == parallel.details[i].adversarial_text);
        CHECK(serial.details[i].adversarial_prob == parallel.details[i].adversarial_prob);
        CHECK(serial.details[i].similarity == parallel.details[i].similarity);
        CHECK(serial.details[i].adversarial_text == repeat.details[i].adversarial_text);
    }
    CHECK(serial.kept == parallel.kept);
    CHECK(serial.kept == repeat.kept);
}

TEST_CASE("adversarial corpus file reloads through the standard reader") {
    Fixture f = make_fixture();
    AttackConfig a = small_attack();
    a.epsilon = 2.0;
    a.step_size = 0.5;
    a.iterations = 6;
    a.similarity_threshold = 0.5;
    AttackResult r = attack_corpus(f.model, f.corpus, a);
    REQUIRE(r.adversarial.size() > 0);

    TempFile file("adv.jsonl");
    write_adversarial_corpus(file.path, r);
    Corpus reloaded = load_corpus(file.path, CorpusFormat::Jsonl, true, nullptr);
    REQUIRE(reloaded.size() == r.adversarial.size());
    for (std::size_t i = 0; i < reloaded.size(); ++i) {
        CHECK(reloaded.examples[i].id == r.adversarial.examples[i].id);
        CHECK(reloaded.examples[i].text == r.adversarial.examples[i].text);
        CHECK(reloaded.examples[i].label == r.adversarial.examples[i].label);
        CHECK(reloaded.examples[i].groups == r.adversarial.examples[i].groups);
    }

    std::ifstream in(file.path);
    std::string line;
    REQUIRE(std::getline(in, line));
    auto row = nlohmann::json::parse(line);
    CHECK(row.contains("original_id"));
    CHECK(row.contains("similarity"));
    CHECK(row.contains("substituted_positions"));
    CHECK(row["original_id"].get<std::string>() ==
          f.corpus.examples[r.kept[0]].id);
}

TEST_CASE("attack stats serialize to json") {
    AttackStats stats;
    stats.n_examples = 10;
    stats.successes = 4;
    stats.filtered = 3;
    stats.success_rate = 0.4;
    stats.filtered_rate = 0.3;
    stats.per_group["red"] = {5, 2, 1};

    TempFile file("stats.json");
    write_attack_stats(file.path, stats);

    std::ifstream in(file.path);
    auto doc = nlohmann::json::parse(in);
    CHECK(doc["n_examples"] == 10);
    CHECK(doc["successes"] == 4);
    CHECK(doc["filtered"] == 3);
    CHECK(doc["success_rate"] == 0.4);
    CHECK(doc["similarity_encoder"] == "attacked-model-mean-pool");
    CHECK(doc["per_group"]["red"]["n"] == 5);
    CHECK(doc["per_group"]["red"]["successes"] == 2);
    CHECK(doc["per_group"]["red"]["filtered"] == 1);
}

TEST_CASE("attack corpus argument validation") {
    Fixture f = make_fixture();
    Corpus empty;
    expect_error(ErrorCode::Argument, [&] { attack_corpus(f.model, empty, small_attack()); });
    expect_error(ErrorCode::Argument,
                 [&] { attack_corpus(f.model, f.corpus, small_attack(), 0); });
}
