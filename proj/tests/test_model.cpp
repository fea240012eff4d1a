#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

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
    c.vocab_size = 64;
    c.max_seq_len = 8;
    c.seed = 5;
    return c;
}

ClassifierModel tiny_model(std::uint64_t seed = 5) {
    ModelConfig c = tiny_config();
    c.seed = seed;
    Vocabulary v = Vocabulary::build({"alpha beta gamma delta epsilon zeta eta theta"}, c.vocab_size);
    return ClassifierModel(c, v);
}

// Independent forward that never touches attention: with every head output
// zeroed, each attention block contributes exactly its output bias.
double attention_free_prob(const ClassifierModel& model, const TokenSequence& seq) {
    constexpr double eps = 1e-5;
    std::vector<int> positions(seq.size());
    std::iota(positions.begin(), positions.end(), 0);
    Tensor x = add(model.embed_tokens(seq), gather_rows(model.pos_embeddings(), positions));
    x = layer_norm(x, model.emb_ln_gain(), model.emb_ln_bias(), eps);
    for (int l = 0; l < model.config().num_layers; ++l) {
        const auto& lp = model.layer(l);
        Tensor zero = Tensor::zeros(x.shape());
        x = layer_norm(add(x, add_rows(zero, lp.bo)), lp.ln1_gain, lp.ln1_bias, eps);
        Tensor hidden = gelu(add_rows(matmul(x, lp.ffn_w1), lp.ffn_b1));
        Tensor ff = add_rows(matmul(hidden, lp.ffn_w2), lp.ffn_b2);
        x = layer_norm(add(x, ff), lp.ln2_gain, lp.ln2_bias, eps);
    }
    Tensor logit = add(matmul(row(x, 0), model.cls_w()), model.cls_b());
    return sigmoid(logit.values()[0]);
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig c = tiny_config();
    c.d_model = 15;
    expect_error(ErrorCode::Configuration, [&] { c.validate(); });
    c = tiny_config();
    c.num_layers = 0;
    expect_error(ErrorCode::Configuration, [&] { c.validate(); });

    ModelConfig big_vocab = tiny_config();
    big_vocab.vocab_size = 4;
    Vocabulary v = Vocabulary::build({"a b c d e f"}, 16);
    expect_error(ErrorCode::Configuration, [&] { ClassifierModel(big_vocab, v); });
}

TEST_CASE("bce_loss analytic cases") {
    CHECK(bce_loss(1.0, 1) == doctest::Approx(0.0).scale(1).epsilon(1e-9));
    CHECK(bce_loss(0.5, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    CHECK(bce_loss(0.9, 0) == doctest::Approx(-std::log(0.1)).epsilon(1e-9));
    CHECK(std::isfinite(bce_loss(0.0, 1)));  // clamped, not infinite
    expect_error(ErrorCode::Label, [] { bce_loss(0.5, 2); });
}

TEST_CASE("accuracy and the tie rule") {
    CHECK(accuracy({0.9, 0.1}, {1, 0}) == 1.0);
    CHECK(accuracy({0.9, 0.1}, {0, 1}) == 0.0);
    CHECK(accuracy({0.5}, {1}) == 1.0);  // exact threshold predicts class 1
    CHECK(accuracy({0.5}, {0}) == 0.0);
    expect_error(ErrorCode::Argument, [] { accuracy({}, {}); });
    expect_error(ErrorCode::Argument, [] { accuracy({0.5}, {1, 0}); });
}

TEST_CASE("forward produces probabilities in range and is deterministic") {
    ClassifierModel model = tiny_model();
    TokenSequence seq = tokenize("alpha beta gamma", model.vocab(), 8);
    ExampleForward a = model.forward_tokens(seq);
    ExampleForward b = model.forward_tokens(seq);
    CHECK(a.prob > 0.0);
    CHECK(a.prob < 1.0);
    CHECK(a.prob == b.prob);

    // same seed, same parameters, same output
    ClassifierModel again = tiny_model();
    CHECK(again.forward_tokens(seq).prob == a.prob);
    // different seed, different output
    ClassifierModel other = tiny_model(99);
    CHECK(other.forward_tokens(seq).prob != a.prob);
}

TEST_CASE("probabilities stay strictly inside (0,1) and vary with input") {
    ClassifierModel model = tiny_model();
    Rng rng(3);
    double min_p = 1.0, max_p = 0.0;
    for (int trial = 0; trial < 64; ++trial) {
        TokenSequence seq(8, Vocabulary::kPad);
        seq[0] = Vocabulary::kCls;
        int len = 1 + static_cast<int>(rng.below(7));
        for (int i = 1; i <= len; ++i)
            seq[static_cast<std::size_t>(i)] =
                Vocabulary::kReserved + static_cast<int>(rng.below(
                    static_cast<std::size_t>(model.vocab().size() - Vocabulary::kReserved)));
        double p = model.forward_tokens(seq).prob;
        CHECK(p > 0.0);
        CHECK(p < 1.0);
        min_p = std::min(min_p, p);
        max_p = std::max(max_p, p);
    }
    CHECK(max_p > min_p);
}

TEST_CASE("empty patch is bit-identical to no patch") {
    ClassifierModel model = tiny_model();
    TokenSequence seq = tokenize("alpha beta gamma delta", model.vocab(), 8);
    PatchSpec empty;
    ExampleForward plain = model.forward_tokens(seq, nullptr, true);
    ExampleForward patched = model.forward_tokens(seq, &empty, true);
    CHECK(plain.prob == patched.prob);
    CHECK(plain.logit.values()[0] == patched.logit.values()[0]);
    for (int l = 0; l < 2; ++l)
        for (int h = 0; h < 2; ++h)
            CHECK(plain.cache.head_output(l, h) == patched.cache.head_output(l, h));
}

TEST_CASE("patch bounds are validated") {
    ClassifierModel model = tiny_model();
    TokenSequence seq = tokenize("alpha", model.vocab(), 8);
    PatchSpec bad = zero_patch({{2, 0}});
    expect_error(ErrorCode::Index, [&] { model.forward_tokens(seq, &bad); });
    PatchSpec bad2 = zero_patch({{0, 5}});
    expect_error(ErrorCode::Index, [&] { model.forward_tokens(seq, &bad2); });

    PatchSpec mean_no_stats;
    mean_no_stats.heads = {{0, 0}};
    mean_no_stats.mode = AblationMode::Mean;
    expect_error(ErrorCode::Configuration, [&] { model.forward_tokens(seq, &mean_no_stats); });
}

TEST_CASE("cache stores replacement values for patched heads") {
    ClassifierModel model = tiny_model();
    TokenSequence seq = tokenize("alpha beta gamma", model.vocab(), 8);
    PatchSpec patch = zero_patch({{0, 1}});
    ExampleForward fwd = model.forward_tokens(seq, &patch, true);
    for (double v : fwd.cache.head_output(0, 1)) CHECK(v == 0.0);
    bool nonzero = false;
    for (double v : fwd.cache.head_output(0, 0))
        if (v != 0.0) nonzero = true;
    CHECK(nonzero);
}

TEST_CASE("zero-ablating every head matches an attention-free recomputation") {
    ClassifierModel model = tiny_model();
    TokenSequence seq = tokenize("alpha beta gamma delta epsilon", model.vocab(), 8);

    std::vector<HeadIndex> all_heads;
    for (int l = 0; l < 2; ++l)
        for (int h = 0; h < 2; ++h) all_heads.push_back({l, h});
    PatchSpec all = zero_patch(all_heads);
    double patched_prob = model.forward_tokens(seq, &all).prob;
    CHECK(patched_prob == doctest::Approx(attention_free_prob(model, seq)).epsilon(1e-12));
}

TEST_CASE("zero patch equals zeroing the head's value path exactly") {
    ClassifierModel model = tiny_model();
    TokenSequence seq = tokenize("alpha beta gamma delta", model.vocab(), 8);
    for (int l = 0; l < 2; ++l)
        for (int h = 0; h < 2; ++h) {
            PatchSpec patch = zero_patch({{l, h}});
            double patched = model.forward_tokens(seq, &patch).prob;

            ClassifierModel surgery = tiny_model();
            auto& head = surgery.mutable_layer(l).heads[static_cast<std::size_t>(h)];
            for (auto& v : head.wv.mutable_values()) v = 0.0;
            for (auto& v : head.bv.mutable_values()) v = 0.0;
            double surgical = surgery.forward_tokens(seq).prob;
            INFO("head ", head_name({l, h}));
            CHECK(std::abs(patched - surgical) <= 1e-12);
        }
}

TEST_CASE("patch locality: earlier layers are untouched") {
    ClassifierModel model = tiny_model();
    TokenSequence seq = tokenize("alpha beta gamma", model.vocab(), 8);
    PatchSpec patch = zero_patch({{1, 0}});
    ExampleForward base = model.forward_tokens(seq, nullptr, true);
    ExampleForward patched = model.forward_tokens(seq, &patch, true);
    for (int h = 0; h < 2; ++h)
        CHECK(base.cache.head_output(0, h) == patched.cache.head_output(0, h));
    CHECK(base.cache.head_output(1, 0) != patched.cache.head_output(1, 0));
}

TEST_CASE("mean patch from a single-position example is a no-op on the logit") {
    ClassifierModel model = tiny_model();
    TokenSequence seq = {Vocabulary::kCls};  // seq_len 1, no padding
    ExampleForward base = model.forward_tokens(seq, nullptr, true);

    // single position: the mean over non-pad positions is that position's output
    HeadMeanStats stats;
    for (int l = 0; l < 2; ++l)
        for (int h = 0; h < 2; ++h) stats[{l, h}] = base.cache.head_output(l, h);

    PatchSpec patch;
    patch.heads = {{0, 0}};
    patch.mode = AblationMode::Mean;
    patch.mean_stats = stats;
    double patched = model.forward_tokens(seq, &patch).prob;
    CHECK(patched == doctest::Approx(base.prob).epsilon(1e-12));
}

TEST_CASE("padding never contributes to the CLS path") {
    ClassifierModel model = tiny_model();
    // same content, different padding depth: pad columns are masked away
    TokenSequence short_seq = tokenize("alpha beta", model.vocab(), 4);
    TokenSequence long_seq = tokenize("alpha beta", model.vocab(), 8);
    double a = model.forward_tokens(short_seq).prob;
    double b = model.forward_tokens(long_seq).prob;
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("sequence length bounds") {
    ClassifierModel model = tiny_model();
    expect_error(ErrorCode::Dimension, [&] {
        TokenSequence seq(9, Vocabulary::kPad);
        seq[0] = Vocabulary::kCls;
        model.forward_tokens(seq);
    });
    expect_error(ErrorCode::Dimension, [&] { model.forward_tokens(TokenSequence{}); });
}

TEST_CASE("full-model gradient check against finite differences") {
    ClassifierModel model = tiny_model();
    std::vector<TokenSequence> batch = {
        tokenize("alpha beta gamma", model.vocab(), 8),
        tokenize("delta epsilon", model.vocab(), 8),
        tokenize("zeta eta theta alpha beta", model.vocab(), 8),
        tokenize("theta", model.vocab(), 8),
    };
    std::vector<int> labels = {1, 0, 1, 0};

    auto batch_loss_value = [&]() {
        TapeSuspend off;
        double total = 0.0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            double p = model.forward_tokens(batch[i]).prob;
            total += bce_loss(p, labels[i]);
        }
        return total / static_cast<double>(batch.size());
    };

    // analytic gradients for every parameter in one backward pass
    {
        Tape tape;
        Tensor loss;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            Tensor li = bce_from_logit(model.forward_tokens(batch[i]).logit, labels[i]);
            loss = loss.defined() ? add(loss, li) : li;
        }
        loss = scale(loss, 1.0 / static_cast<double>(batch.size()));
        backward(loss);
    }

    const double h = 1e-5;
    double max_rel = 0.0;
    std::size_t checked = 0;
    model.visit_parameters([&](const std::string& name, Tensor& t) {
        auto values = t.mutable_values();
        auto grad = t.grad();
        for (std::size_t j = 0; j < values.size(); ++j) {
            double saved = values[j];
            values[j] = saved + h;
            double up = batch_loss_value();
            values[j] = saved - h;
            double down = batch_loss_value();
            values[j] = saved;
            double numeric = (up - down) / (2.0 * h);
            double rel = gradcheck_rel_err(grad[j], numeric);
            if (rel > max_rel) max_rel = rel;
            if (rel >= 1e-4)
                FAIL_CHECK("parameter ", name, "[", j, "]: analytic ", grad[j], " numeric ",
                           numeric, " rel ", rel);
            ++checked;
        }
    });
    MESSAGE("checked ", checked, " parameters, max rel err ", max_rel);
    CHECK(max_rel < 1e-4);
    model.visit_parameters([&](const std::string&, Tensor& t) { t.zero_grad(); });
}

TEST_CASE("training separates a linearly separable toy corpus") {
    Corpus corpus;
    for (int i = 0; i < 40; ++i) {
        Example ex;
        ex.id = "t" + std::to_string(i);
        ex.label = i % 2;
        ex.text = ex.label == 1 ? "bad bad bad" : "good good good";
        corpus.examples.push_back(ex);
    }
    corpus.reindex();

    ModelConfig config = tiny_config();
    TrainConfig tc;
    tc.epochs = 5;
    tc.batch_size = 8;
    tc.learning_rate = 5e-3;
    tc.seed = 11;
    TrainMetrics metrics;
    ClassifierModel model = train_classifier(config, corpus, tc, &metrics);

    std::vector<TokenSequence> seqs;
    std::vector<int> labels;
    for (const auto& ex : corpus.examples) {
        seqs.push_back(tokenize(ex.text, model.vocab(), config.max_seq_len));
        labels.push_back(ex.label);
    }
    EvalResult eval = evaluate(model, seqs, labels);
    CHECK(eval.accuracy >= 0.99);
    REQUIRE(metrics.epoch_loss.size() == 5);
    CHECK(metrics.epoch_loss.back() < metrics.epoch_loss.front());

    // after training, both classes are reachable
    bool low = false, high = false;
    for (double p : eval.probs) (p >= 0.5 ? high : low) = true;
    CHECK(low);
    CHECK(high);
}

TEST_CASE("training rejects a single-class corpus") {
    Corpus corpus;
    for (int i = 0; i < 10; ++i) {
        Example ex;
        ex.id = "s" + std::to_string(i);
        ex.label = 1;
        ex.text = "same class";
        corpus.examples.push_back(ex);
    }
    corpus.reindex();
    expect_error(ErrorCode::Training, [&] { train_classifier(tiny_config(), corpus, TrainConfig{}); });
}

TEST_CASE("training is deterministic in its seeds") {
    Corpus corpus = synthesize_toy_corpus(21, 64, {"g"});
    ModelConfig config = tiny_config();
    TrainConfig tc;
    tc.epochs = 2;
    tc.seed = 31;
    ClassifierModel a = train_classifier(config, corpus, tc);
    ClassifierModel b = train_classifier(config, corpus, tc);

    bool identical = true;
    a.visit_parameters([&](const std::string& name, const Tensor& ta) {
        b.visit_parameters([&](const std::string& name_b, const Tensor& tb) {
            if (name != name_b) return;
            auto va = ta.values();
            auto vb = tb.values();
            for (std::size_t i = 0; i < va.size(); ++i)
                if (va[i] != vb[i]) identical = false;
        });
    });
    CHECK(identical);
}

TEST_CASE("evaluation is worker-count independent") {
    ClassifierModel model = tiny_model();
    std::vector<TokenSequence> seqs;
    std::vector<int> labels;
    Rng rng(13);
    for (int i = 0; i < 23; ++i) {
        TokenSequence seq(8, Vocabulary::kPad);
        seq[0] = Vocabulary::kCls;
        for (int j = 1; j < 5; ++j)
            seq[static_cast<std::size_t>(j)] = Vocabulary::kReserved +
                static_cast<int>(rng.below(static_cast<std::size_t>(model.vocab().size() - 3)));
        seqs.push_back(seq);
        labels.push_back(static_cast<int>(rng.below(2)));
    }
    EvalResult one = evaluate(model, seqs, labels, nullptr, 1);
    EvalResult four = evaluate(model, seqs, labels, nullptr, 4);
    EvalResult many = evaluate(model, seqs, labels, nullptr, 64);
    CHECK(one.loss == four.loss);
    CHECK(one.accuracy == four.accuracy);
    CHECK(one.probs == four.probs);
    CHECK(one.probs == many.probs);
}

TEST_CASE("checkpoint round-trip reproduces forward bit-for-bit") {
    ClassifierModel model = tiny_model(17);
    auto path = (std::filesystem::temp_directory_path() / "model_roundtrip.bin").string();
    save_model(model, path);
    ClassifierModel loaded = load_model(path);

    CHECK(loaded.config().num_layers == model.config().num_layers);
    CHECK(loaded.vocab().size() == model.vocab().size());
    Rng rng(23);
    for (int trial = 0; trial < 8; ++trial) {
        TokenSequence seq(8, Vocabulary::kPad);
        seq[0] = Vocabulary::kCls;
        for (int j = 1; j < 6; ++j)
            seq[static_cast<std::size_t>(j)] = Vocabulary::kReserved +
                static_cast<int>(rng.below(static_cast<std::size_t>(model.vocab().size() - 3)));
        CHECK(model.forward_tokens(seq).prob == loaded.forward_tokens(seq).prob);
    }

    // rewriting the loaded model produces identical bytes
    auto path2 = (std::filesystem::temp_directory_path() / "model_roundtrip2.bin").string();
    save_model(loaded, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("checkpoint corruption is rejected") {
    ClassifierModel model = tiny_model();
    auto path = (std::filesystem::temp_directory_path() / "model_corrupt.bin").string();
    save_model(model, path);

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    // bad magic
    {
        std::string bad = bytes;
        bad[0] = 'X';
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << bad;
        out.close();
        expect_error(ErrorCode::Format, [&] { load_model(path); });
    }
    // truncation
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << bytes.substr(0, bytes.size() / 2);
        out.close();
        expect_error(ErrorCode::Format, [&] { load_model(path); });
    }
    // flipped payload byte with intact structure -> checksum failure
    {
        std::string bad = bytes;
        bad[bad.size() - 16] ^= 0x01;  // inside the last parameter values
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << bad;
        out.close();
        expect_error(ErrorCode::Integrity, [&] { load_model(path); });
    }
    // version bump
    {
        std::string bad = bytes;
        bad[4] = 2;
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << bad;
        out.close();
        expect_error(ErrorCode::Format, [&] { load_model(path); });
    }
    std::remove(path.c_str());
}
