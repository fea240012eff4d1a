#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "patch_spec.hpp"
#include "tensor.hpp"
#include "text.hpp"

namespace headpatch {

struct ModelConfig {
    int num_layers = 4;
    int num_heads = 4;
    int d_model = 64;
    int d_ff = 128;
    int vocab_size = 512;
    int max_seq_len = 32;
    std::uint64_t seed = 1;

    int d_head() const { return d_model / num_heads; }
    void validate() const;
};

struct TrainConfig {
    double learning_rate = 1e-3;
    // Decoupled decay applied at the update step; keeps unused capacity from
    // lingering, which concentrates the learned circuit into fewer heads.
    double weight_decay = 0.0;
    int epochs = 10;
    int batch_size = 16;
    std::uint64_t seed = 1;
    bool rebalance = false;

    void validate() const;
};

struct TrainMetrics {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_accuracy;
    // filled per epoch when an eval corpus is passed to train_classifier
    std::vector<double> eval_accuracy;
    std::vector<double> eval_loss;
};

// Values each head actually fed into the output projection (replacements
// included when a patch was active), plus the final-layer summaries the
// attack and report stages read.
struct ActivationCache {
    int layers = 0;
    int heads = 0;
    int seq_len = 0;
    int d_head = 0;
    std::vector<std::vector<double>> head_outputs;  // [layers*heads] of [seq_len*d_head]
    std::vector<bool> is_pad;                       // per position
    std::vector<double> cls_hidden;                 // final-layer CLS row [d_model]
    std::vector<double> mean_pooled;                // final-layer mean over non-PAD rows [d_model]

    const std::vector<double>& head_output(int layer, int head) const;
};

struct ExampleForward {
    double prob = 0.0;
    Tensor logit;  // [1x1]; graph-connected when a tape is active
    ActivationCache cache;
};

// Post-layer-norm transformer encoder with a sigmoid head on the CLS
// position. Attention weights are stored per head so one head's value path
// can be surgically inspected or replaced.
class ClassifierModel {
public:
    struct HeadParams {
        Tensor wq, bq, wk, bk, wv, bv;  // [d_model x d_head], [d_head]
        Tensor wo;                      // [d_head x d_model]
    };
    struct LayerParams {
        std::vector<HeadParams> heads;
        Tensor bo;                        // [d_model]
        Tensor ln1_gain, ln1_bias;        // [d_model]
        Tensor ffn_w1, ffn_b1;            // [d_model x d_ff], [d_ff]
        Tensor ffn_w2, ffn_b2;            // [d_ff x d_model], [d_model]
        Tensor ln2_gain, ln2_bias;        // [d_model]
    };

    ClassifierModel(ModelConfig config, Vocabulary vocab);

    const ModelConfig& config() const { return config_; }
    const Vocabulary& vocab() const { return vocab_; }

    const Tensor& token_embeddings() const { return token_embeddings_; }
    Tensor& mutable_token_embeddings() { return token_embeddings_; }
    const Tensor& pos_embeddings() const { return pos_embeddings_; }
    const Tensor& emb_ln_gain() const { return emb_ln_gain_; }
    const Tensor& emb_ln_bias() const { return emb_ln_bias_; }
    const Tensor& cls_w() const { return cls_w_; }
    const Tensor& cls_b() const { return cls_b_; }
    const LayerParams& layer(int l) const;
    LayerParams& mutable_layer(int l);

    // Token embeddings only (no position, no norm) — the space the attack
    // perturbs and projects back to.
    Tensor embed_tokens(const TokenSequence& seq) const;

    ExampleForward forward_tokens(const TokenSequence& seq, const PatchSpec* patch = nullptr,
                                  bool want_cache = false) const;
    ExampleForward forward_embeds(const Tensor& token_embeds, const std::vector<bool>& is_pad,
                                  const PatchSpec* patch = nullptr, bool want_cache = false) const;

    // Fixed traversal order shared by the optimizer, the checkpoint writer,
    // and the gradient checker.
    void visit_parameters(const std::function<void(const std::string&, Tensor&)>& fn);
    void visit_parameters(const std::function<void(const std::string&, const Tensor&)>& fn) const;

    void validate_patch(const PatchSpec& patch) const;

private:
    ModelConfig config_;
    Vocabulary vocab_;
    Tensor token_embeddings_;  // [vocab.size() x d_model]
    Tensor pos_embeddings_;    // [max_seq_len x d_model]
    Tensor emb_ln_gain_, emb_ln_bias_;
    std::vector<LayerParams> layers_;
    Tensor cls_w_;  // [d_model x 1]
    Tensor cls_b_;  // [1 x 1]
};

// Exact formula on a clamped probability; the training path differentiates
// the logit form instead, which agrees to rounding.
double bce_loss(double p, int label);

double accuracy(const std::vector<double>& probs, const std::vector<int>& labels,
                double threshold = 0.5);

double sigmoid(double z);

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::vector<double> probs;
};

// Patched or unpatched evaluation; workers > 1 splits examples across threads
// with results placed by index, so the outcome never depends on scheduling.
EvalResult evaluate(const ClassifierModel& model, const std::vector<TokenSequence>& seqs,
                    const std::vector<int>& labels, const PatchSpec* patch = nullptr,
                    int workers = 1);

ClassifierModel train_classifier(const ModelConfig& config, const Corpus& corpus,
                                 const TrainConfig& train_config, TrainMetrics* metrics = nullptr,
                                 const Corpus* eval_corpus = nullptr);

void save_model(const ClassifierModel& model, const std::string& path);
ClassifierModel load_model(const std::string& path);

}  // namespace headpatch
