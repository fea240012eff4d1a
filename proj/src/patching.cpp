#include "patching.hpp"

#include <algorithm>
#include <thread>

#include "error.hpp"
#include "rng.hpp"

namespace headpatch {

namespace {

std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

}  // namespace

EvalDataset make_eval_dataset(const Corpus& corpus, const Vocabulary& vocab, int max_len) {
    EvalDataset ds;
    ds.seqs.reserve(corpus.size());
    for (const auto& ex : corpus.examples) {
        ds.seqs.push_back(tokenize(ex.text, vocab, max_len));
        ds.labels.push_back(ex.label);
        ds.groups.push_back(ex.groups);
    }
    ds.fingerprint = corpus_fingerprint(corpus);
    return ds;
}

std::string corpus_fingerprint(const Corpus& corpus) {
    std::uint64_t h = fnv1a("corpus-v1");
    for (const auto& ex : corpus.examples) {
        h = fnv1a_accumulate(h, ex.id);
        h = fnv1a_accumulate(h, "\x1f");
        h = fnv1a_accumulate(h, ex.text);
        h = fnv1a_accumulate(h, "\x1f");
        h = fnv1a_accumulate(h, ex.label == 1 ? "1" : "0");
        for (const auto& g : ex.groups) {
            h = fnv1a_accumulate(h, "\x1f");
            h = fnv1a_accumulate(h, g);
        }
        h = fnv1a_accumulate(h, "\x1e");
    }
    return to_hex(h);
}

std::size_t SweepResult::cell(int layer, int head) const {
    if (layer < 0 || layer >= layers || head < 0 || head >= heads)
        fail(ErrorCode::Index, "sweep cell " + head_name(HeadIndex{layer, head}) + " outside " +
                                   std::to_string(layers) + "x" + std::to_string(heads));
    return static_cast<std::size_t>(layer) * static_cast<std::size_t>(heads) +
           static_cast<std::size_t>(head);
}

EvalResult run_with_patch(const ClassifierModel& model, const std::vector<TokenSequence>& seqs,
                          const std::vector<int>& labels, const PatchSpec& patch, int workers) {
    return evaluate(model, seqs, labels, &patch, workers);
}

HeadMeanStats mean_activation_stats(const ClassifierModel& model,
                                    const std::vector<TokenSequence>& seqs, int workers) {
    if (seqs.empty()) fail(ErrorCode::Argument, "mean stats over an empty dataset");
    if (workers < 1) fail(ErrorCode::Argument, "workers must be >= 1");

    const int layers = model.config().num_layers;
    const int heads = model.config().num_heads;
    const int dh = model.config().d_head();
    const std::size_t n = seqs.size();

    std::vector<ActivationCache> caches(n);
    auto run_range = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i)
            caches[i] = model.forward_tokens(seqs[i], nullptr, true).cache;
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

    // sequential reduction in example order keeps sums worker-independent
    HeadMeanStats stats;
    std::size_t positions = 0;
    for (int l = 0; l < layers; ++l)
        for (int h = 0; h < heads; ++h) stats[{l, h}] = std::vector<double>(dh, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const ActivationCache& cache = caches[i];
        for (int pos = 0; pos < cache.seq_len; ++pos) {
            if (cache.is_pad[static_cast<std::size_t>(pos)]) continue;
            ++positions;
            for (int l = 0; l < layers; ++l)
                for (int h = 0; h < heads; ++h) {
                    const auto& out = cache.head_output(l, h);
                    auto& acc = stats[{l, h}];
                    for (int j = 0; j < dh; ++j)
                        acc[static_cast<std::size_t>(j)] +=
                            out[static_cast<std::size_t>(pos) * dh + j];
                }
        }
    }
    for (auto& [head, acc] : stats)
        for (auto& v : acc) v /= static_cast<double>(positions);
    return stats;
}

SweepResult sweep_heads(const ClassifierModel& model, const std::vector<TokenSequence>& seqs,
                        const std::vector<int>& labels, const SweepOptions& options) {
    if (options.mode == AblationMode::Mean && !options.mean_stats)
        fail(ErrorCode::Configuration, "mean-mode sweep needs mean stats");

    SweepResult result;
    result.layers = model.config().num_layers;
    result.heads = model.config().num_heads;
    result.dataset_tag = options.dataset_tag;
    result.n_examples = static_cast<int>(seqs.size());
    result.delta_loss.assign(static_cast<std::size_t>(result.layers * result.heads), 0.0);
    result.delta_accuracy.assign(static_cast<std::size_t>(result.layers * result.heads), 0.0);

    EvalResult baseline = evaluate(model, seqs, labels, nullptr, options.workers);
    result.baseline_loss = baseline.loss;
    result.baseline_accuracy = baseline.accuracy;

    for (int l = 0; l < result.layers; ++l)
        for (int h = 0; h < result.heads; ++h) {
            PatchSpec patch;
            patch.heads = {{l, h}};
            patch.mode = options.mode;
            if (options.mode == AblationMode::Mean) patch.mean_stats = *options.mean_stats;
            EvalResult patched = evaluate(model, seqs, labels, &patch, options.workers);
            result.delta_loss[result.cell(l, h)] = patched.loss - baseline.loss;
            result.delta_accuracy[result.cell(l, h)] = patched.accuracy - baseline.accuracy;
        }
    return result;
}

std::vector<SweepResult> sweep_heads_by_group(const ClassifierModel& model,
                                              const EvalDataset& dataset,
                                              const SweepOptions& options) {
    std::vector<SweepResult> results;
    results.push_back(sweep_heads(model, dataset.seqs, dataset.labels, options));

    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < dataset.groups.size(); ++i)
        for (const auto& g : dataset.groups[i]) members[g].push_back(i);

    for (const auto& [tag, indices] : members) {
        std::vector<TokenSequence> seqs;
        std::vector<int> labels;
        seqs.reserve(indices.size());
        for (std::size_t i : indices) {
            seqs.push_back(dataset.seqs[i]);
            labels.push_back(dataset.labels[i]);
        }
        SweepResult group_result = sweep_heads(model, seqs, labels, options);
        group_result.group_tag = tag;
        results.push_back(std::move(group_result));
    }
    return results;
}

std::vector<HeadIndex> identify_crucial(const SweepResult& sweep_clean, double tau_c) {
    if (tau_c <= 0.0) fail(ErrorCode::Configuration, "tau_c must be > 0");
    std::vector<HeadIndex> crucial;
    for (int l = 0; l < sweep_clean.layers; ++l)
        for (int h = 0; h < sweep_clean.heads; ++h)
            if (sweep_clean.daccuracy(l, h) <= -tau_c) crucial.push_back({l, h});
    std::sort(crucial.begin(), crucial.end(), [&](const HeadIndex& a, const HeadIndex& b) {
        double da = sweep_clean.daccuracy(a.layer, a.head);
        double db = sweep_clean.daccuracy(b.layer, b.head);
        if (da != db) return da < db;  // larger drop first
        return a < b;
    });
    return crucial;
}

std::vector<VulnerableHead> identify_vulnerable(const SweepResult& sweep_adv) {
    std::vector<VulnerableHead> vulnerable;
    for (int l = 0; l < sweep_adv.layers; ++l)
        for (int h = 0; h < sweep_adv.heads; ++h)
            if (sweep_adv.dloss(l, h) < 0.0)
                vulnerable.push_back(
                    {{l, h}, sweep_adv.dloss(l, h), sweep_adv.daccuracy(l, h)});
    std::sort(vulnerable.begin(), vulnerable.end(),
              [](const VulnerableHead& a, const VulnerableHead& b) {
                  if (a.delta_loss != b.delta_loss) return a.delta_loss < b.delta_loss;
                  return a.head < b.head;
              });
    return vulnerable;
}

HeadClassification classify_heads(const SweepResult& sweep_clean, const SweepResult& sweep_adv,
                                  double tau_c) {
    if (sweep_clean.layers != sweep_adv.layers || sweep_clean.heads != sweep_adv.heads)
        fail(ErrorCode::Dimension, "clean and adversarial sweeps cover different grids");
    HeadClassification result;
    result.tau_c = tau_c;
    result.crucial = identify_crucial(sweep_clean, tau_c);
    result.vulnerable = identify_vulnerable(sweep_adv);
    for (const auto& c : result.crucial)
        for (const auto& v : result.vulnerable)
            if (c == v.head) result.intersection.push_back(c);
    std::sort(result.intersection.begin(), result.intersection.end());
    return result;
}

std::map<std::string, GroupBestHead> best_head_per_group(const std::vector<SweepResult>& sweeps) {
    std::map<std::string, GroupBestHead> best;
    bool any_group = false;
    for (const auto& sweep : sweeps) {
        if (sweep.group_tag.empty()) continue;
        any_group = true;
        GroupBestHead pick;
        bool first = true;
        for (int l = 0; l < sweep.layers; ++l)
            for (int h = 0; h < sweep.heads; ++h) {
                double gain = sweep.daccuracy(l, h);
                if (first || gain > pick.accuracy_gain) {
                    pick = {{l, h}, gain};
                    first = false;
                }
            }
        best[sweep.group_tag] = pick;
    }
    if (!any_group) fail(ErrorCode::Argument, "no per-group sweeps supplied");
    return best;
}

}  // namespace headpatch
