#include "attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "error.hpp"

namespace headpatch {

namespace {

using ordered_json = nlohmann::ordered_json;

std::vector<bool> pad_mask(const TokenSequence& seq) {
    std::vector<bool> mask(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) mask[i] = seq[i] == Vocabulary::kPad;
    return mask;
}

double row_norm(std::span<const double> row, AttackNorm norm) {
    double acc = 0.0;
    if (norm == AttackNorm::L2) {
        for (double v : row) acc += v * v;
        return std::sqrt(acc);
    }
    for (double v : row) acc = std::max(acc, std::fabs(v));
    return acc;
}

// Loss gradient at an embedding matrix that need not correspond to any token
// sequence. Padding rows come back exactly zero.
Tensor gradient_at(const ClassifierModel& model, const Tensor& embeds,
                   const std::vector<bool>& is_pad, int label) {
    Tape tape;
    Tensor x = Tensor::from_values(embeds.shape(),
                                   std::vector<double>(embeds.values().begin(),
                                                       embeds.values().end()),
                                   true);
    ExampleForward fwd = model.forward_embeds(x, is_pad);
    Tensor loss = bce_from_logit(fwd.logit, label);
    backward(loss);

    std::vector<double> g(x.grad().begin(), x.grad().end());
    const int d = embeds.dim(1);
    for (std::size_t t = 0; t < is_pad.size(); ++t)
        if (is_pad[t])
            std::fill_n(g.begin() + static_cast<long>(t) * d, d, 0.0);
    return Tensor::from_values(embeds.shape(), std::move(g));
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) fail(ErrorCode::Dimension, "cosine over unequal lengths");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

void AttackConfig::validate() const {
    if (epsilon < 0.0) fail(ErrorCode::Configuration, "epsilon must be >= 0");
    if (step_size <= 0.0) fail(ErrorCode::Configuration, "step_size must be > 0");
    if (epsilon > 0.0 && step_size > epsilon)
        fail(ErrorCode::Configuration, "step_size must not exceed epsilon");
    if (iterations < 1) fail(ErrorCode::Configuration, "iterations must be >= 1");
    if (!(similarity_threshold > 0.0 && similarity_threshold <= 1.0))
        fail(ErrorCode::Configuration, "similarity_threshold must be in (0, 1]");
    if (reproject_every < 1) fail(ErrorCode::Configuration, "reproject_every must be >= 1");
}

Tensor embedding_gradient(const ClassifierModel& model, const TokenSequence& seq, int label) {
    return gradient_at(model, model.embed_tokens(seq), pad_mask(seq), label);
}

Tensor pgd_perturb(const Tensor& embeddings, const std::vector<bool>& is_pad,
                   const ClassifierModel& model, int label, const AttackConfig& config) {
    config.validate();
    if (embeddings.rank() != 2)
        fail(ErrorCode::Dimension, "embeddings must be 2-D, got " + embeddings.shape_string());
    const int seq_len = embeddings.dim(0);
    const int d = embeddings.dim(1);
    if (static_cast<int>(is_pad.size()) != seq_len)
        fail(ErrorCode::Dimension, "pad mask length does not match sequence length");

    std::vector<double> perturbed(embeddings.values().begin(), embeddings.values().end());
    if (config.epsilon == 0.0) return Tensor::from_values(embeddings.shape(), std::move(perturbed));

    const auto orig = embeddings.values();
    std::vector<double> delta(perturbed.size(), 0.0);
    for (int iter = 0; iter < config.iterations; ++iter) {
        Tensor g = gradient_at(model, Tensor::from_values(embeddings.shape(), perturbed),
                               is_pad, label);
        bool moved = false;
        for (int t = 0; t < seq_len; ++t) {
            std::span<const double> gt = g.values().subspan(static_cast<std::size_t>(t) * d, d);
            double* dt = delta.data() + static_cast<std::size_t>(t) * d;
            if (config.norm == AttackNorm::L2) {
                double n = row_norm(gt, AttackNorm::L2);
                if (n == 0.0) continue;
                moved = true;
                for (int j = 0; j < d; ++j) dt[j] += config.step_size * gt[static_cast<std::size_t>(j)] / n;
                double dn = row_norm({dt, static_cast<std::size_t>(d)}, AttackNorm::L2);
                if (dn > config.epsilon)
                    for (int j = 0; j < d; ++j) dt[j] *= config.epsilon / dn;
            } else {
                for (int j = 0; j < d; ++j) {
                    double gj = gt[static_cast<std::size_t>(j)];
                    if (gj == 0.0) continue;
                    moved = true;
                    dt[j] += gj > 0.0 ? config.step_size : -config.step_size;
                    dt[j] = std::clamp(dt[j], -config.epsilon, config.epsilon);
                }
            }
        }
        if (!moved) break;
        for (std::size_t i = 0; i < perturbed.size(); ++i) perturbed[i] = orig[i] + delta[i];
    }
    return Tensor::from_values(embeddings.shape(), std::move(perturbed));
}

TokenSequence project_to_tokens(const Tensor& perturbed, const Tensor& embedding_table,
                                const TokenSequence& original, const AttackConfig& config) {
    if (perturbed.rank() != 2 || embedding_table.rank() != 2 ||
        perturbed.dim(1) != embedding_table.dim(1))
        fail(ErrorCode::Dimension, "perturbed " + perturbed.shape_string() +
                                       " does not align with table " +
                                       embedding_table.shape_string());
    if (static_cast<int>(original.size()) != perturbed.dim(0))
        fail(ErrorCode::Dimension, "original sequence length does not match perturbed rows");

    const int d = perturbed.dim(1);
    const int vocab = embedding_table.dim(0);
    TokenSequence out = original;
    for (std::size_t t = 0; t < original.size(); ++t) {
        int id = original[t];
        if (id < Vocabulary::kReserved) continue;
        std::span<const double> r = perturbed.values().subspan(t * static_cast<std::size_t>(d), d);
        std::span<const double> e =
            embedding_table.values().subspan(static_cast<std::size_t>(id) * d, d);

        std::vector<double> diff(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) diff[static_cast<std::size_t>(j)] = r[static_cast<std::size_t>(j)] - e[static_cast<std::size_t>(j)];
        double dn = row_norm(diff, config.norm);
        if (dn == 0.0 || dn < config.epsilon / 10.0) continue;

        double rn = row_norm(r, AttackNorm::L2);
        if (rn == 0.0) continue;

        int best = -1;
        double best_dist = 0.0;
        for (int v = Vocabulary::kReserved; v < vocab; ++v) {
            std::span<const double> cand =
                embedding_table.values().subspan(static_cast<std::size_t>(v) * d, d);
            double dot = 0.0, nc = 0.0;
            for (int j = 0; j < d; ++j) {
                dot += r[static_cast<std::size_t>(j)] * cand[static_cast<std::size_t>(j)];
                nc += cand[static_cast<std::size_t>(j)] * cand[static_cast<std::size_t>(j)];
            }
            double dist = nc == 0.0 ? 2.0 : 1.0 - dot / (rn * std::sqrt(nc));
            if (best < 0 || dist < best_dist) {
                best = v;
                best_dist = dist;
            }
        }
        out[t] = best;
    }
    return out;
}

double sentence_similarity(const std::string& a, const std::string& b,
                           const ClassifierModel& model) {
    auto encode = [&](const std::string& text) {
        TokenSequence seq = tokenize(text, model.vocab(), model.config().max_seq_len);
        return model.forward_tokens(seq, nullptr, true).cache.mean_pooled;
    };
    return cosine(encode(a), encode(b));
}

AdversarialExample attack_example(const ClassifierModel& model, const Example& example,
                                  const AttackConfig& config) {
    config.validate();
    const int max_len = model.config().max_seq_len;
    TokenSequence seq0 = tokenize(example.text, model.vocab(), max_len);

    AdversarialExample result;
    result.original_id = example.id;
    result.original_text = example.text;
    result.label = example.label;
    result.original_prob = model.forward_tokens(seq0).prob;

    TokenSequence current = seq0;
    if (config.epsilon > 0.0) {
        int remaining = config.iterations;
        while (remaining > 0) {
            AttackConfig stage = config;
            stage.iterations = std::min(config.reproject_every, remaining);
            Tensor embeds = model.embed_tokens(current);
            Tensor perturbed =
                pgd_perturb(embeds, pad_mask(current), model, example.label, stage);
            current = project_to_tokens(perturbed, model.token_embeddings(), current, config);
            remaining -= stage.iterations;
        }
    }

    for (std::size_t t = 1; t < seq0.size(); ++t)
        if (current[t] != seq0[t]) result.substituted_positions.push_back(static_cast<int>(t) - 1);

    if (result.substituted_positions.empty()) {
        result.adversarial_text = example.text;
    } else {
        std::vector<std::string> words = word_tokens(example.text);
        for (int pos : result.substituted_positions)
            words[static_cast<std::size_t>(pos)] =
                model.vocab().token(current[static_cast<std::size_t>(pos) + 1]);
        std::string text;
        for (std::size_t i = 0; i < words.size(); ++i) {
            if (i) text.push_back(' ');
            text += words[i];
        }
        result.adversarial_text = text;
    }

    result.adversarial_prob = model.forward_tokens(current).prob;
    result.success = (result.original_prob >= 0.5) != (result.adversarial_prob >= 0.5);
    result.similarity = sentence_similarity(example.text, result.adversarial_text, model);
    return result;
}

AttackResult attack_corpus(const ClassifierModel& model, const Corpus& corpus,
                           const AttackConfig& config, int workers) {
    config.validate();
    if (corpus.examples.empty()) fail(ErrorCode::Argument, "cannot attack an empty corpus");
    if (workers < 1) fail(ErrorCode::Argument, "workers must be >= 1");

    const std::size_t n = corpus.size();
    AttackResult result;
    result.details.resize(n);
    auto run_range = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i)
            result.details[i] = attack_example(model, corpus.examples[i], config);
    };
    const std::size_t nworkers = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    if (nworkers <= 1) {
        run_range(0, n);
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (n + nworkers - 1) / nworkers;
        for (std::size_t w = 0; w < nworkers; ++w) {
            std::size_t begin = w * chunk;
            std::size_t end = std::min(n, begin + chunk);
            if (begin >= end) break;
            pool.emplace_back(run_range, begin, end);
        }
        for (auto& th : pool) th.join();
    }

    result.stats.n_examples = static_cast<int>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const AdversarialExample& adv = result.details[i];
        const Example& ex = corpus.examples[i];
        bool keep = adv.success && adv.similarity >= config.similarity_threshold;
        if (adv.success) ++result.stats.successes;
        if (keep) {
            ++result.stats.filtered;
            result.kept.push_back(i);
            Example out;
            out.id = "adv-" + ex.id;
            out.text = adv.adversarial_text;
            out.label = ex.label;
            out.groups = ex.groups;
            out.provenance = "machine";
            out.generation_method = "pgd-v1";
            result.adversarial.examples.push_back(std::move(out));
        }
        for (const auto& g : ex.groups) {
            GroupAttackStats& gs = result.stats.per_group[g];
            ++gs.n;
            if (adv.success) ++gs.successes;
            if (keep) ++gs.filtered;
        }
    }
    result.adversarial.reindex();
    result.stats.success_rate =
        static_cast<double>(result.stats.successes) / static_cast<double>(n);
    result.stats.filtered_rate =
        static_cast<double>(result.stats.filtered) / static_cast<double>(n);
    return result;
}

void write_adversarial_corpus(const std::string& path, const AttackResult& result) {
    if (result.adversarial.size() != result.kept.size())
        fail(ErrorCode::State, "adversarial corpus and kept index are out of step");
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::Io, "cannot open '" + path + "' for writing");
    for (std::size_t k = 0; k < result.kept.size(); ++k) {
        const Example& ex = result.adversarial.examples[k];
        const AdversarialExample& adv = result.details[result.kept[k]];
        ordered_json row;
        row["id"] = ex.id;
        row["text"] = ex.text;
        row["label"] = ex.label;
        row["groups"] = ex.groups;
        row["provenance"] = ex.provenance;
        if (ex.generation_method) row["generation_method"] = *ex.generation_method;
        row["original_id"] = adv.original_id;
        row["similarity"] = adv.similarity;
        row["substituted_positions"] = adv.substituted_positions;
        out << row.dump() << "\n";
    }
    if (!out) fail(ErrorCode::Io, "write to '" + path + "' failed");
}

void write_attack_stats(const std::string& path, const AttackStats& stats) {
    ordered_json doc;
    doc["n_examples"] = stats.n_examples;
    doc["successes"] = stats.successes;
    doc["filtered"] = stats.filtered;
    doc["success_rate"] = stats.success_rate;
    doc["filtered_rate"] = stats.filtered_rate;
    doc["similarity_encoder"] = stats.similarity_encoder;
    ordered_json groups = ordered_json::object();
    for (const auto& [tag, gs] : stats.per_group) {
        ordered_json g;
        g["n"] = gs.n;
        g["successes"] = gs.successes;
        g["filtered"] = gs.filtered;
        groups[tag] = g;
    }
    doc["per_group"] = groups;
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::Io, "cannot open '" + path + "' for writing");
    out << doc.dump(2) << "\n";
    if (!out) fail(ErrorCode::Io, "write to '" + path + "' failed");
}

}  // namespace headpatch
