#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "model.hpp"
#include "tensor.hpp"
#include "text.hpp"

namespace headpatch {

enum class AttackNorm { L2, Linf };

// Gradient-ascent attack on the input embeddings. epsilon bounds each token
// row's perturbation; epsilon 0 is the degenerate no-op ball, in which case
// step_size is not constrained by it.
struct AttackConfig {
    AttackNorm norm = AttackNorm::L2;
    double epsilon = 1.0;
    double step_size = 0.25;
    int iterations = 30;
    double similarity_threshold = 0.95;
    int reproject_every = 10;
    std::uint64_t seed = 1;

    void validate() const;
};

struct AdversarialExample {
    std::string original_id;
    std::string original_text;
    std::string adversarial_text;
    int label = 0;
    double original_prob = 0.0;
    double adversarial_prob = 0.0;
    bool success = false;   // prediction flipped at threshold 0.5
    double similarity = 0.0;
    std::vector<int> substituted_positions;  // 0-based word positions
};

struct GroupAttackStats {
    int n = 0;
    int successes = 0;
    int filtered = 0;  // successes that also pass the similarity filter
};

struct AttackStats {
    int n_examples = 0;
    int successes = 0;
    int filtered = 0;
    double success_rate = 0.0;
    double filtered_rate = 0.0;
    std::map<std::string, GroupAttackStats> per_group;
    std::string similarity_encoder = "attacked-model-mean-pool";
};

struct AttackResult {
    std::vector<AdversarialExample> details;  // one per input example, corpus order
    Corpus adversarial;                       // successful + similarity-filtered only
    std::vector<std::size_t> kept;            // indices into details, corpus order
    AttackStats stats;
};

// d(BCE loss)/d(input embeddings) for one sequence, [seq_len x d_model].
// Padding rows are exactly zero.
Tensor embedding_gradient(const ClassifierModel& model, const TokenSequence& seq, int label);

// Iterative ascent on the loss: per token row, step alpha*g/|g| (l2) or
// alpha*sign(g) (linf), then project the cumulative perturbation back into
// the epsilon-ball around the input embeddings. Stops early when the
// gradient vanishes.
Tensor pgd_perturb(const Tensor& embeddings, const std::vector<bool>& is_pad,
                   const ClassifierModel& model, int label, const AttackConfig& config);

// Maps each perturbed row to the vocabulary token with the nearest embedding
// by cosine distance (ties go to the lowest id). Reserved positions are never
// substituted, and rows whose perturbation norm is below epsilon/10 keep
// their original token.
TokenSequence project_to_tokens(const Tensor& perturbed, const Tensor& embedding_table,
                                const TokenSequence& original, const AttackConfig& config);

// Cosine similarity of the mean-pooled final-layer representations.
double sentence_similarity(const std::string& a, const std::string& b,
                           const ClassifierModel& model);

// Embed, perturb (re-projecting through token space every reproject_every
// iterations), project to tokens, then measure flip and similarity. Success
// and similarity are recorded here but not filtered.
AdversarialExample attack_example(const ClassifierModel& model, const Example& example,
                                  const AttackConfig& config);

// Attacks every example and keeps those that flip the prediction and stay
// above the similarity threshold. Output is identical for any worker count.
AttackResult attack_corpus(const ClassifierModel& model, const Corpus& corpus,
                           const AttackConfig& config, int workers = 1);

// Adversarial corpus as JSONL in the standard corpus schema plus original_id,
// similarity and substituted_positions.
void write_adversarial_corpus(const std::string& path, const AttackResult& result);

void write_attack_stats(const std::string& path, const AttackStats& stats);

}  // namespace headpatch
