#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attack.hpp"
#include "model.hpp"
#include "patching.hpp"

namespace headpatch {

// Corpus acquisition: an explicit path wins; otherwise a synthetic corpus of
// synthetic_n examples over the given group tags is generated from the run
// seed and written into the workdir.
struct CorpusSpec {
    std::string path;
    int synthetic_n = 400;
    std::vector<std::string> groups = {"red", "blue"};
    double test_fraction = 0.3;

    void validate() const;
};

// Attack knobs as stored in the config file. epsilon_scale is relative to the
// median content-token embedding norm of the attacked checkpoint; step size
// is step_fraction of the resolved epsilon.
struct AttackSpec {
    AttackNorm norm = AttackNorm::L2;
    double epsilon_scale = 1.0;
    double step_fraction = 0.25;
    int iterations = 10;
    double similarity_threshold = 0.95;
    int reproject_every = 10;

    void validate() const;
};

struct SweepSpec {
    AblationMode mode = AblationMode::Zero;
    double tau_c = 0.10;

    void validate() const;
};

// One seed governs corpus synthesis, splitting, parameter init, and the
// attack; per-module seeds are derived from it during resolution.
struct PipelineConfig {
    std::uint64_t seed = 1;
    int workers = 1;
    CorpusSpec corpus;
    ModelConfig model;
    TrainConfig train;
    AttackSpec attack;
    SweepSpec sweep;
    int mitigate_k = 1;
    std::string workdir;

    void validate() const;
};

// Parses the JSON config text. Unknown keys, wrong types, and out-of-range
// values are all rejected before any stage runs; origin names the source in
// diagnostics. An empty object yields the documented defaults.
PipelineConfig parse_pipeline_config(const std::string& json_text, const std::string& origin);

PipelineConfig load_pipeline_config(const std::string& path);

// JSON echo of a resolved config; parsing it back reproduces the config.
std::string render_pipeline_config(const PipelineConfig& config);

void apply_overrides(PipelineConfig& config, const std::optional<std::string>& workdir,
                     const std::optional<std::uint64_t>& seed, const std::optional<int>& workers);

// Fixed artifact names under the workdir.
namespace artifact {
inline constexpr const char* kResolvedConfig = "config_resolved.json";
inline constexpr const char* kCorpus = "corpus.jsonl";
inline constexpr const char* kTrainSplit = "train_split.jsonl";
inline constexpr const char* kEvalSplit = "eval_split.jsonl";
inline constexpr const char* kCheckpoint = "model.ckpt";
inline constexpr const char* kTrainMetrics = "train_metrics.json";
inline constexpr const char* kAdversarial = "adversarial.jsonl";
inline constexpr const char* kAttackStats = "attack_stats.json";
inline constexpr const char* kHeads = "heads.json";
inline constexpr const char* kMitigation = "mitigation.json";
inline constexpr const char* kGroupReport = "group_report.csv";
inline constexpr const char* kGroupBars = "group_bars.svg";
inline constexpr const char* kSummary = "summary.json";

// sweep_<dataset>.csv / .json / .svg, plus per-group CSV and SVG files
// sweep_<dataset>_group_<tag>.csv when group tags are present.
std::string sweep_csv(const std::string& dataset_tag, const std::string& group_tag = "");
std::string sweep_json(const std::string& dataset_tag);
std::string sweep_svg(const std::string& dataset_tag, const std::string& group_tag = "");
}  // namespace artifact

// epsilon_scale times the median L2 norm over content-token embedding rows.
double resolve_epsilon(const ClassifierModel& model, double epsilon_scale);

// Acquires the corpus, splits it, trains, and writes checkpoint, per-epoch
// metrics, split files, and the resolved config echo.
void cmd_train(const PipelineConfig& config);

// Attacks the held-out split with the trained checkpoint; writes the filtered
// adversarial corpus and the stats file, and prints success_rate and
// filtered_rate. Returns the stats.
AttackStats cmd_attack(const PipelineConfig& config);

// Head-ablation sweep over the named dataset ("clean" = held-out split,
// "adversarial" = filtered attack output). Writes CSV, JSON, and heatmap SVG,
// plus per-group CSV/SVG files; SVGs are rendered from the re-read CSVs so
// the figures can never drift from the tabulated numbers.
void cmd_sweep(const PipelineConfig& config, const std::string& dataset_tag);

// Crucial/vulnerable classification from the two overall sweep CSVs.
void cmd_classify_heads(const PipelineConfig& config);

// Zero-ablates the top-k vulnerable heads and reports signed clean and
// adversarial accuracy deltas. k above the available count clamps with a
// warning on stderr; k = 0 reports exact zero deltas.
void cmd_mitigate(const PipelineConfig& config);

// Assembles summary.json plus the per-group mitigation figure, verifying
// that every referenced artifact exists.
void cmd_report(const PipelineConfig& config);

// All stages in order: train, attack, both sweeps, classify, mitigate,
// report.
void cmd_run(const PipelineConfig& config);

}  // namespace headpatch
