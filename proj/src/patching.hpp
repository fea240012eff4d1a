#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "corpus.hpp"
#include "model.hpp"
#include "patch_spec.hpp"
#include "text.hpp"

namespace headpatch {

// Tokenized view of a corpus, parallel arrays indexed like the corpus.
struct EvalDataset {
    std::vector<TokenSequence> seqs;
    std::vector<int> labels;
    std::vector<std::vector<std::string>> groups;
    std::string fingerprint;
};

EvalDataset make_eval_dataset(const Corpus& corpus, const Vocabulary& vocab, int max_len);

// Stable content hash of ids, texts, labels and groups (hex string).
std::string corpus_fingerprint(const Corpus& corpus);

struct SweepResult {
    int layers = 0;
    int heads = 0;
    double baseline_loss = 0.0;
    double baseline_accuracy = 0.0;
    std::vector<double> delta_loss;      // layers*heads, layer-major
    std::vector<double> delta_accuracy;  // layers*heads, layer-major
    std::string dataset_tag;             // "clean" or "adversarial"
    std::string group_tag;               // empty = overall
    int n_examples = 0;

    std::size_t cell(int layer, int head) const;
    double dloss(int layer, int head) const { return delta_loss[cell(layer, head)]; }
    double daccuracy(int layer, int head) const { return delta_accuracy[cell(layer, head)]; }
};

struct SweepOptions {
    AblationMode mode = AblationMode::Zero;
    const HeadMeanStats* mean_stats = nullptr;  // required for mean mode
    std::string dataset_tag = "clean";
    int workers = 1;
};

EvalResult run_with_patch(const ClassifierModel& model, const std::vector<TokenSequence>& seqs,
                          const std::vector<int>& labels, const PatchSpec& patch, int workers = 1);

// Arithmetic mean of every head's output over all non-padding positions of
// all examples.
HeadMeanStats mean_activation_stats(const ClassifierModel& model,
                                    const std::vector<TokenSequence>& seqs, int workers = 1);

// Ablates each of the layers x heads cells one at a time against the shared
// unpatched baseline. Results are identical for any worker count.
SweepResult sweep_heads(const ClassifierModel& model, const std::vector<TokenSequence>& seqs,
                        const std::vector<int>& labels, const SweepOptions& options);

// Overall sweep first, then one per group tag in sorted order; multi-tag
// examples take part in each of their groups' sweeps.
std::vector<SweepResult> sweep_heads_by_group(const ClassifierModel& model,
                                              const EvalDataset& dataset,
                                              const SweepOptions& options);

// Heads whose clean-accuracy drop reaches tau_c, most damaging first.
std::vector<HeadIndex> identify_crucial(const SweepResult& sweep_clean, double tau_c);

struct VulnerableHead {
    HeadIndex head;
    double delta_loss = 0.0;
    double delta_accuracy = 0.0;
};

// Heads whose ablation reduces adversarial loss, most negative delta first.
std::vector<VulnerableHead> identify_vulnerable(const SweepResult& sweep_adv);

struct HeadClassification {
    double tau_c = 0.0;
    std::vector<HeadIndex> crucial;
    std::vector<VulnerableHead> vulnerable;
    std::vector<HeadIndex> intersection;  // computed, never assumed empty
};

HeadClassification classify_heads(const SweepResult& sweep_clean, const SweepResult& sweep_adv,
                                  double tau_c);

struct GroupBestHead {
    HeadIndex head;
    double accuracy_gain = 0.0;
};

// Per group, the head whose ablation most improves that group's accuracy on
// the sweep's dataset (ties: lower layer, then lower head).
std::map<std::string, GroupBestHead> best_head_per_group(const std::vector<SweepResult>& sweeps);

}  // namespace headpatch
