#include "model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <thread>

#include "error.hpp"
#include "rng.hpp"

namespace headpatch {

namespace {

constexpr double kMaskValue = -1e30;
constexpr double kLnEps = 1e-5;
constexpr double kProbClamp = 1e-12;
constexpr double kInitScale = 0.02;

Tensor attention_mask(const std::vector<bool>& is_pad) {
    const int t = static_cast<int>(is_pad.size());
    Tensor mask = Tensor::zeros({t, t});
    auto mv = mask.mutable_values();
    for (int j = 0; j < t; ++j) {
        if (!is_pad[static_cast<std::size_t>(j)]) continue;
        for (int i = 0; i < t; ++i) mv[static_cast<std::size_t>(i) * t + j] = kMaskValue;
    }
    return mask;
}

Tensor patch_replacement(const PatchSpec& patch, int layer, int head, int seq_len, int d_head) {
    if (patch.mode == AblationMode::Zero) return Tensor::zeros({seq_len, d_head});
    const auto& mean = patch.mean_stats->at(HeadIndex{layer, head});
    std::vector<double> tiled(static_cast<std::size_t>(seq_len) * static_cast<std::size_t>(d_head));
    for (int i = 0; i < seq_len; ++i)
        std::copy(mean.begin(), mean.end(), tiled.begin() + static_cast<long>(i) * d_head);
    return Tensor::from_values({seq_len, d_head}, std::move(tiled));
}

}  // namespace

void ModelConfig::validate() const {
    if (num_layers < 1 || num_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 ||
        max_seq_len < 1)
        fail(ErrorCode::Configuration, "all model dimensions must be positive");
    if (d_model % num_heads != 0)
        fail(ErrorCode::Configuration, "d_model " + std::to_string(d_model) +
                                           " is not divisible by num_heads " +
                                           std::to_string(num_heads));
}

void TrainConfig::validate() const {
    if (learning_rate <= 0.0) fail(ErrorCode::Configuration, "learning_rate must be > 0");
    if (weight_decay < 0.0) fail(ErrorCode::Configuration, "weight_decay must be >= 0");
    if (epochs < 1) fail(ErrorCode::Configuration, "epochs must be >= 1");
    if (batch_size < 1) fail(ErrorCode::Configuration, "batch_size must be >= 1");
}

const std::vector<double>& ActivationCache::head_output(int layer, int head) const {
    if (layer < 0 || layer >= layers || head < 0 || head >= heads)
        fail(ErrorCode::Index, "no cached output for " + head_name(HeadIndex{layer, head}));
    return head_outputs[static_cast<std::size_t>(layer) * static_cast<std::size_t>(heads) +
                        static_cast<std::size_t>(head)];
}

ClassifierModel::ClassifierModel(ModelConfig config, Vocabulary vocab)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
    config_.validate();
    if (vocab_.size() > config_.vocab_size)
        fail(ErrorCode::Configuration, "vocabulary has " + std::to_string(vocab_.size()) +
                                           " ids but vocab_size is " +
                                           std::to_string(config_.vocab_size));
    const int d = config_.d_model;
    const int dh = config_.d_head();
    Rng rng(config_.seed);

    auto weight = [&](std::vector<int> shape) {
        Tensor t = Tensor::zeros(std::move(shape), true);
        for (auto& v : t.mutable_values()) v = rng.normal() * kInitScale;
        return t;
    };
    auto zeros_param = [&](std::vector<int> shape) { return Tensor::zeros(std::move(shape), true); };
    auto ones_param = [&](std::vector<int> shape) { return Tensor::full(std::move(shape), 1.0, true); };

    token_embeddings_ = weight({vocab_.size(), d});
    pos_embeddings_ = weight({config_.max_seq_len, d});
    emb_ln_gain_ = ones_param({d});
    emb_ln_bias_ = zeros_param({d});

    layers_.resize(static_cast<std::size_t>(config_.num_layers));
    for (auto& layer : layers_) {
        layer.heads.resize(static_cast<std::size_t>(config_.num_heads));
        for (auto& head : layer.heads) {
            head.wq = weight({d, dh});
            head.bq = zeros_param({dh});
            head.wk = weight({d, dh});
            head.bk = zeros_param({dh});
            head.wv = weight({d, dh});
            head.bv = zeros_param({dh});
            head.wo = weight({dh, d});
        }
        layer.bo = zeros_param({d});
        layer.ln1_gain = ones_param({d});
        layer.ln1_bias = zeros_param({d});
        layer.ffn_w1 = weight({d, config_.d_ff});
        layer.ffn_b1 = zeros_param({config_.d_ff});
        layer.ffn_w2 = weight({config_.d_ff, d});
        layer.ffn_b2 = zeros_param({d});
        layer.ln2_gain = ones_param({d});
        layer.ln2_bias = zeros_param({d});
    }
    cls_w_ = weight({d, 1});
    cls_b_ = zeros_param({1, 1});
}

const ClassifierModel::LayerParams& ClassifierModel::layer(int l) const {
    if (l < 0 || l >= config_.num_layers)
        fail(ErrorCode::Index, "layer " + std::to_string(l) + " outside [0, " +
                                   std::to_string(config_.num_layers) + ")");
    return layers_[static_cast<std::size_t>(l)];
}

ClassifierModel::LayerParams& ClassifierModel::mutable_layer(int l) {
    return const_cast<LayerParams&>(static_cast<const ClassifierModel*>(this)->layer(l));
}

Tensor ClassifierModel::embed_tokens(const TokenSequence& seq) const {
    return gather_rows(token_embeddings_, seq);
}

void ClassifierModel::validate_patch(const PatchSpec& patch) const {
    for (const auto& h : patch.heads) {
        if (h.layer < 0 || h.layer >= config_.num_layers || h.head < 0 ||
            h.head >= config_.num_heads)
            fail(ErrorCode::Index, "patch head " + head_name(h) + " outside the " +
                                       std::to_string(config_.num_layers) + "x" +
                                       std::to_string(config_.num_heads) + " grid");
        if (patch.mode == AblationMode::Mean) {
            if (!patch.mean_stats || !patch.mean_stats->count(h))
                fail(ErrorCode::Configuration,
                     "mean ablation of " + head_name(h) + " lacks mean stats");
            if (static_cast<int>(patch.mean_stats->at(h).size()) != config_.d_head())
                fail(ErrorCode::Dimension, "mean stats for " + head_name(h) + " must have length " +
                                               std::to_string(config_.d_head()));
        }
    }
}

ExampleForward ClassifierModel::forward_tokens(const TokenSequence& seq, const PatchSpec* patch,
                                               bool want_cache) const {
    std::vector<bool> is_pad(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) is_pad[i] = seq[i] == Vocabulary::kPad;
    return forward_embeds(embed_tokens(seq), is_pad, patch, want_cache);
}

ExampleForward ClassifierModel::forward_embeds(const Tensor& token_embeds,
                                               const std::vector<bool>& is_pad,
                                               const PatchSpec* patch, bool want_cache) const {
    if (!token_embeds.defined() || token_embeds.rank() != 2 ||
        token_embeds.dim(1) != config_.d_model)
        fail(ErrorCode::Dimension, "input embeddings must be [seq_len x d_model]");
    const int t = token_embeds.dim(0);
    if (t < 1 || t > config_.max_seq_len)
        fail(ErrorCode::Dimension, "sequence length " + std::to_string(t) + " outside [1, " +
                                       std::to_string(config_.max_seq_len) + "]");
    if (static_cast<int>(is_pad.size()) != t)
        fail(ErrorCode::Dimension, "padding mask length does not match sequence length");
    if (patch) validate_patch(*patch);

    const int heads = config_.num_heads;
    const int dh = config_.d_head();

    ExampleForward out;
    if (want_cache) {
        out.cache.layers = config_.num_layers;
        out.cache.heads = heads;
        out.cache.seq_len = t;
        out.cache.d_head = dh;
        out.cache.head_outputs.resize(static_cast<std::size_t>(config_.num_layers) *
                                      static_cast<std::size_t>(heads));
        out.cache.is_pad = is_pad;
    }

    std::vector<int> positions(static_cast<std::size_t>(t));
    std::iota(positions.begin(), positions.end(), 0);
    Tensor x = add(token_embeds, gather_rows(pos_embeddings_, positions));
    x = layer_norm(x, emb_ln_gain_, emb_ln_bias_, kLnEps);

    Tensor mask = attention_mask(is_pad);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (int l = 0; l < config_.num_layers; ++l) {
        const LayerParams& lp = layers_[static_cast<std::size_t>(l)];
        Tensor attn_sum;
        for (int h = 0; h < heads; ++h) {
            const HeadParams& hp = lp.heads[static_cast<std::size_t>(h)];
            Tensor q = add_rows(matmul(x, hp.wq), hp.bq);
            Tensor k = add_rows(matmul(x, hp.wk), hp.bk);
            Tensor v = add_rows(matmul(x, hp.wv), hp.bv);
            Tensor scores = add(scale(matmul(q, transpose(k)), inv_sqrt_dh), mask);
            Tensor head_out = matmul(softmax_lastdim(scores), v);
            if (patch && patch->covers(l, h))
                head_out = patch_replacement(*patch, l, h, t, dh);
            if (want_cache) {
                auto hv = head_out.values();
                out.cache.head_outputs[static_cast<std::size_t>(l) * heads + h]
                    .assign(hv.begin(), hv.end());
            }
            Tensor contrib = matmul(head_out, hp.wo);
            attn_sum = attn_sum.defined() ? add(attn_sum, contrib) : contrib;
        }
        x = layer_norm(add(x, add_rows(attn_sum, lp.bo)), lp.ln1_gain, lp.ln1_bias, kLnEps);
        Tensor hidden = gelu(add_rows(matmul(x, lp.ffn_w1), lp.ffn_b1));
        Tensor ff = add_rows(matmul(hidden, lp.ffn_w2), lp.ffn_b2);
        x = layer_norm(add(x, ff), lp.ln2_gain, lp.ln2_bias, kLnEps);
    }

    Tensor cls = row(x, 0);
    out.logit = add(matmul(cls, cls_w_), cls_b_);
    out.prob = sigmoid(out.logit.values()[0]);

    if (want_cache) {
        auto cv = cls.values();
        out.cache.cls_hidden.assign(cv.begin(), cv.end());
        out.cache.mean_pooled.assign(static_cast<std::size_t>(config_.d_model), 0.0);
        auto xv = x.values();
        int kept = 0;
        for (int i = 0; i < t; ++i) {
            if (is_pad[static_cast<std::size_t>(i)]) continue;
            ++kept;
            for (int j = 0; j < config_.d_model; ++j)
                out.cache.mean_pooled[static_cast<std::size_t>(j)] +=
                    xv[static_cast<std::size_t>(i) * config_.d_model + j];
        }
        for (auto& v : out.cache.mean_pooled) v /= static_cast<double>(kept);
    }
    return out;
}

void ClassifierModel::visit_parameters(
    const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("token_embeddings", token_embeddings_);
    fn("pos_embeddings", pos_embeddings_);
    fn("emb_ln_gain", emb_ln_gain_);
    fn("emb_ln_bias", emb_ln_bias_);
    for (int l = 0; l < config_.num_layers; ++l) {
        LayerParams& lp = layers_[static_cast<std::size_t>(l)];
        const std::string prefix = "L" + std::to_string(l) + ".";
        for (int h = 0; h < config_.num_heads; ++h) {
            HeadParams& hp = lp.heads[static_cast<std::size_t>(h)];
            const std::string hp_prefix = prefix + "H" + std::to_string(h) + ".";
            fn(hp_prefix + "wq", hp.wq);
            fn(hp_prefix + "bq", hp.bq);
            fn(hp_prefix + "wk", hp.wk);
            fn(hp_prefix + "bk", hp.bk);
            fn(hp_prefix + "wv", hp.wv);
            fn(hp_prefix + "bv", hp.bv);
            fn(hp_prefix + "wo", hp.wo);
        }
        fn(prefix + "bo", lp.bo);
        fn(prefix + "ln1_gain", lp.ln1_gain);
        fn(prefix + "ln1_bias", lp.ln1_bias);
        fn(prefix + "ffn_w1", lp.ffn_w1);
        fn(prefix + "ffn_b1", lp.ffn_b1);
        fn(prefix + "ffn_w2", lp.ffn_w2);
        fn(prefix + "ffn_b2", lp.ffn_b2);
        fn(prefix + "ln2_gain", lp.ln2_gain);
        fn(prefix + "ln2_bias", lp.ln2_bias);
    }
    fn("cls_w", cls_w_);
    fn("cls_b", cls_b_);
}

void ClassifierModel::visit_parameters(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    const_cast<ClassifierModel*>(this)->visit_parameters(
        [&](const std::string& name, Tensor& t) { fn(name, t); });
}

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

double bce_loss(double p, int label) {
    if (label != 0 && label != 1)
        fail(ErrorCode::Label, "label must be 0 or 1, got " + std::to_string(label));
    p = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    return -(label * std::log(p) + (1 - label) * std::log(1.0 - p));
}

double accuracy(const std::vector<double>& probs, const std::vector<int>& labels,
                double threshold) {
    if (probs.empty()) fail(ErrorCode::Argument, "accuracy over an empty batch");
    if (probs.size() != labels.size())
        fail(ErrorCode::Argument, "probs and labels differ in length");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        int predicted = probs[i] >= threshold ? 1 : 0;  // ties predict class 1
        if (labels[i] != 0 && labels[i] != 1)
            fail(ErrorCode::Label, "label must be 0 or 1, got " + std::to_string(labels[i]));
        if (predicted == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(probs.size());
}

EvalResult evaluate(const ClassifierModel& model, const std::vector<TokenSequence>& seqs,
                    const std::vector<int>& labels, const PatchSpec* patch, int workers) {
    if (seqs.empty()) fail(ErrorCode::Argument, "evaluation over an empty dataset");
    if (seqs.size() != labels.size())
        fail(ErrorCode::Argument, "sequences and labels differ in length");
    if (workers < 1) fail(ErrorCode::Argument, "workers must be >= 1");
    if (patch) model.validate_patch(*patch);

    const std::size_t n = seqs.size();
    EvalResult result;
    result.probs.assign(n, 0.0);

    auto run_range = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i)
            result.probs[i] = model.forward_tokens(seqs[i], patch, false).prob;
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

    double loss_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) loss_sum += bce_loss(result.probs[i], labels[i]);
    result.loss = loss_sum / static_cast<double>(n);
    result.accuracy = accuracy(result.probs, labels);
    return result;
}

ClassifierModel train_classifier(const ModelConfig& config, const Corpus& corpus,
                                 const TrainConfig& train_config, TrainMetrics* metrics,
                                 const Corpus* eval_corpus) {
    config.validate();
    train_config.validate();
    if (corpus.examples.empty()) fail(ErrorCode::Training, "training corpus is empty");
    auto counts = corpus.label_counts();
    if (counts[0] == 0 || counts[1] == 0)
        fail(ErrorCode::Training, "training corpus must contain both classes");

    std::vector<std::string> texts;
    texts.reserve(corpus.size());
    for (const auto& ex : corpus.examples) texts.push_back(ex.text);
    Vocabulary vocab = Vocabulary::build(texts, config.vocab_size);

    std::vector<TokenSequence> seqs;
    std::vector<int> labels;
    seqs.reserve(corpus.size());
    for (const auto& ex : corpus.examples) {
        seqs.push_back(tokenize(ex.text, vocab, config.max_seq_len));
        labels.push_back(ex.label);
    }

    // index pool; minority oversampling duplicates indices deterministically
    std::vector<std::size_t> pool(seqs.size());
    std::iota(pool.begin(), pool.end(), 0);
    if (train_config.rebalance && counts[0] != counts[1]) {
        const int minority = counts[0] < counts[1] ? 0 : 1;
        std::vector<std::size_t> minority_indices;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == minority) minority_indices.push_back(i);
        Rng rng(mix_seed(train_config.seed, 0xB7));
        std::size_t deficit = std::max(counts[0], counts[1]) - std::min(counts[0], counts[1]);
        for (std::size_t k = 0; k < deficit; ++k)
            pool.push_back(minority_indices[rng.below(minority_indices.size())]);
    }

    ClassifierModel model(config, std::move(vocab));

    // adaptive-moment updates (beta1 0.9, beta2 0.999), bias-corrected, with
    // decoupled decay on weight matrices and embeddings only
    struct Slot {
        Tensor* param;
        bool decay;
        std::vector<double> m, v;
    };
    auto decayed = [](const std::string& name) {
        std::size_t dot = name.rfind('.');
        std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
        return (!leaf.empty() && leaf[0] == 'w') || leaf.rfind("ffn_w", 0) == 0 ||
               leaf == "cls_w" || leaf == "token_embeddings" || leaf == "pos_embeddings";
    };
    std::vector<Slot> slots;
    model.visit_parameters([&](const std::string& name, Tensor& t) {
        slots.push_back({&t, decayed(name), std::vector<double>(t.size(), 0.0),
                         std::vector<double>(t.size(), 0.0)});
    });
    const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    long step = 0;

    for (int epoch = 0; epoch < train_config.epochs; ++epoch) {
        Rng order(mix_seed(train_config.seed, 0x1000 + static_cast<std::uint64_t>(epoch)));
        std::vector<std::size_t> shuffled = pool;
        order.shuffle(shuffled);

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < shuffled.size();
             start += static_cast<std::size_t>(train_config.batch_size)) {
            std::size_t end =
                std::min(shuffled.size(), start + static_cast<std::size_t>(train_config.batch_size));
            const double batch_n = static_cast<double>(end - start);

            Tape tape;
            Tensor batch_loss;
            for (std::size_t i = start; i < end; ++i) {
                std::size_t idx = shuffled[i];
                ExampleForward fwd = model.forward_tokens(seqs[idx]);
                Tensor loss = bce_from_logit(fwd.logit, labels[idx]);
                batch_loss = batch_loss.defined() ? add(batch_loss, loss) : loss;
            }
            batch_loss = scale(batch_loss, 1.0 / batch_n);
            backward(batch_loss);
            loss_sum += batch_loss.item() * batch_n;

            ++step;
            const double corr1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double corr2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            for (auto& slot : slots) {
                if (!slot.param->has_grad()) continue;
                auto grad = slot.param->grad();
                auto values = slot.param->mutable_values();
                const double wd = slot.decay ? train_config.weight_decay : 0.0;
                for (std::size_t j = 0; j < values.size(); ++j) {
                    slot.m[j] = beta1 * slot.m[j] + (1.0 - beta1) * grad[j];
                    slot.v[j] = beta2 * slot.v[j] + (1.0 - beta2) * grad[j] * grad[j];
                    double mhat = slot.m[j] / corr1;
                    double vhat = slot.v[j] / corr2;
                    values[j] -= train_config.learning_rate *
                                 (mhat / (std::sqrt(vhat) + adam_eps) + wd * values[j]);
                }
                slot.param->zero_grad();
            }
        }

        if (metrics) {
            metrics->epoch_loss.push_back(loss_sum / static_cast<double>(shuffled.size()));
            EvalResult train_eval = evaluate(model, seqs, labels);
            metrics->epoch_accuracy.push_back(train_eval.accuracy);
            if (eval_corpus) {
                std::vector<TokenSequence> eval_seqs;
                std::vector<int> eval_labels;
                eval_seqs.reserve(eval_corpus->size());
                for (const auto& ex : eval_corpus->examples) {
                    eval_seqs.push_back(tokenize(ex.text, model.vocab(), config.max_seq_len));
                    eval_labels.push_back(ex.label);
                }
                EvalResult held_out = evaluate(model, eval_seqs, eval_labels);
                metrics->eval_accuracy.push_back(held_out.accuracy);
                metrics->eval_loss.push_back(held_out.loss);
            }
        }
    }
    return model;
}

// ---- Checkpoint -----------------------------------------------------------
// Layout (little-endian):
//   "HPCK" | u32 version | u32 L,H,d_model,d_ff,vocab_size,max_seq_len |
//   u64 seed | u32 vocab_count | vocab_count x (u32 len, bytes) |
//   u32 param_count | per param: (u32 len, name bytes, u32 rank,
//   rank x u32 dims, f64 values...) | u64 fnv1a checksum of everything above

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& buf, double v) { put_u64(buf, std::bit_cast<std::uint64_t>(v)); }

void put_string(std::string& buf, const std::string& s) {
    put_u32(buf, static_cast<std::uint32_t>(s.size()));
    buf += s;
}

struct Cursor {
    const std::string& buf;
    std::size_t off = 0;

    void need(std::size_t bytes, const char* what) const {
        if (off + bytes > buf.size())
            fail(ErrorCode::Format, std::string("truncated checkpoint: reading ") + what +
                                        " at offset " + std::to_string(off));
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
        off += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
        off += 8;
        return v;
    }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
    std::string str(const char* what) {
        std::uint32_t len = u32(what);
        need(len, what);
        std::string s = buf.substr(off, len);
        off += len;
        return s;
    }
};

}  // namespace

void save_model(const ClassifierModel& model, const std::string& path) {
    std::string buf;
    buf += "HPCK";
    put_u32(buf, kCheckpointVersion);
    const ModelConfig& c = model.config();
    put_u32(buf, static_cast<std::uint32_t>(c.num_layers));
    put_u32(buf, static_cast<std::uint32_t>(c.num_heads));
    put_u32(buf, static_cast<std::uint32_t>(c.d_model));
    put_u32(buf, static_cast<std::uint32_t>(c.d_ff));
    put_u32(buf, static_cast<std::uint32_t>(c.vocab_size));
    put_u32(buf, static_cast<std::uint32_t>(c.max_seq_len));
    put_u64(buf, c.seed);

    put_u32(buf, static_cast<std::uint32_t>(model.vocab().size()));
    for (const auto& tok : model.vocab().tokens()) put_string(buf, tok);

    std::uint32_t param_count = 0;
    model.visit_parameters([&](const std::string&, const Tensor&) { ++param_count; });
    put_u32(buf, param_count);
    model.visit_parameters([&](const std::string& name, const Tensor& t) {
        put_string(buf, name);
        put_u32(buf, static_cast<std::uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) put_u32(buf, static_cast<std::uint32_t>(t.dim(i)));
        for (double v : t.values()) put_f64(buf, v);
    });

    put_u64(buf, fnv1a(buf));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot open '" + path + "' for writing");
    out.write(buf.data(), static_cast<long>(buf.size()));
    if (!out) fail(ErrorCode::Io, "write to '" + path + "' failed");
}

ClassifierModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (buf.size() < 8) fail(ErrorCode::Format, "truncated checkpoint: no header at offset 0");
    if (buf.compare(0, 4, "HPCK") != 0)
        fail(ErrorCode::Format, "bad checkpoint magic at offset 0");
    if (buf.size() < 8 + 8)
        fail(ErrorCode::Format, "truncated checkpoint: missing checksum");

    // parse first so truncation reports a format error with its offset; the
    // checksum over the parsed payload is verified at the end
    const std::string payload = buf.substr(0, buf.size() - 8);
    Cursor cur{payload, 4};
    const std::uint32_t version = cur.u32("version");
    if (version != kCheckpointVersion)
        fail(ErrorCode::Format, "unsupported checkpoint version " + std::to_string(version) +
                                    " at offset 4");

    ModelConfig config;
    config.num_layers = static_cast<int>(cur.u32("num_layers"));
    config.num_heads = static_cast<int>(cur.u32("num_heads"));
    config.d_model = static_cast<int>(cur.u32("d_model"));
    config.d_ff = static_cast<int>(cur.u32("d_ff"));
    config.vocab_size = static_cast<int>(cur.u32("vocab_size"));
    config.max_seq_len = static_cast<int>(cur.u32("max_seq_len"));
    config.seed = cur.u64("seed");

    const std::uint32_t vocab_count = cur.u32("vocab_count");
    std::vector<std::string> tokens;
    tokens.reserve(vocab_count);
    for (std::uint32_t i = 0; i < vocab_count; ++i) tokens.push_back(cur.str("vocab token"));

    const std::uint32_t param_count = cur.u32("param_count");
    std::map<std::string, std::vector<double>> blobs;
    std::map<std::string, std::vector<int>> blob_shapes;
    for (std::uint32_t i = 0; i < param_count; ++i) {
        std::string name = cur.str("param name");
        const std::uint32_t rank = cur.u32("param rank");
        std::vector<int> shape;
        std::size_t count = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            shape.push_back(static_cast<int>(cur.u32("param dim")));
            count *= static_cast<std::size_t>(shape.back());
        }
        std::vector<double> values(count);
        for (auto& v : values) v = cur.f64("param value");
        if (!blobs.emplace(name, std::move(values)).second)
            fail(ErrorCode::Format, "duplicate parameter '" + name + "'");
        blob_shapes.emplace(name, std::move(shape));
    }
    if (cur.off != payload.size())
        fail(ErrorCode::Format,
             "trailing bytes in checkpoint at offset " + std::to_string(cur.off));

    Cursor tail{buf, buf.size() - 8};
    if (fnv1a(payload) != tail.u64("checksum"))
        fail(ErrorCode::Integrity, "checkpoint checksum mismatch for '" + path + "'");

    ClassifierModel model(config, Vocabulary::from_tokens(tokens));

    std::size_t filled = 0;
    model.visit_parameters([&](const std::string& name, Tensor& t) {
        auto it = blobs.find(name);
        if (it == blobs.end()) fail(ErrorCode::Format, "checkpoint lacks parameter '" + name + "'");
        if (blob_shapes.at(name) != t.shape())
            fail(ErrorCode::Format, "parameter '" + name + "' has shape mismatch");
        std::copy(it->second.begin(), it->second.end(), t.mutable_values().begin());
        ++filled;
    });
    if (filled != blobs.size())
        fail(ErrorCode::Format, "checkpoint has " + std::to_string(blobs.size()) +
                                    " parameters, model expects " + std::to_string(filled));
    return model;
}

}  // namespace headpatch
