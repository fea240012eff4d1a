#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "attack.hpp"
#include "corpus.hpp"
#include "model.hpp"
#include "patching.hpp"

namespace headpatch {

// Writes the sweep as CSV: "# key: value" metadata lines, then a
// layer,head,delta_loss,delta_accuracy header and one row per cell in
// (layer-major, head-minor) order. Floats use %.17g so the reader recovers
// them exactly.
void export_sweep_csv(const SweepResult& sweep, const std::string& path);

// Inverse of export_sweep_csv.
SweepResult read_sweep_csv(const std::string& path);

// Fill color for one heatmap cell. Diverging palette anchored at zero: cool
// below, warm above, neutral at the center. Depends only on the arguments,
// so equal values always render alike.
std::string heatmap_color(double value, double vmin, double vmax);

// Cell annotation text; the same formatting is applied to CSV-loaded values
// in tests, so the rendered number always matches the artifact.
std::string format_cell_value(double value);

// Delta-accuracy grid as SVG: one rect per cell with id cell-L{l}-H{h},
// numeric annotations, Layer/Head axis labels and a min/0/max legend. A
// constant matrix renders in a single color with an explanatory note.
void render_heatmap_svg(const SweepResult& sweep, const std::string& path);

struct GroupAccuracyRow {
    std::string group;
    HeadIndex head;
    int n_examples = 0;
    double baseline_accuracy = 0.0;
    double ablated_accuracy = 0.0;
    double gain = 0.0;
};

struct GroupAccuracyReport {
    std::vector<GroupAccuracyRow> rows;  // sorted by group tag
    std::vector<std::string> warnings;   // one per requested group with no examples
};

// For every entry of best_heads, the group's accuracy on its slice of
// adv_corpus with and without that head zero-ablated. Groups absent from the
// corpus are skipped with a warning instead of a row.
GroupAccuracyReport group_accuracy_report(const ClassifierModel& model, const Corpus& adv_corpus,
                                          const std::map<std::string, GroupBestHead>& best_heads,
                                          int workers = 1);

void write_group_report_csv(const GroupAccuracyReport& report, const std::string& path);
GroupAccuracyReport read_group_report_csv(const std::string& path);

// Paired bars per group (baseline vs ablated accuracy) with numeric labels.
void render_group_bars_svg(const GroupAccuracyReport& report, const std::string& path);

inline constexpr int kSummarySchemaVersion = 1;

struct SummaryBaseline {
    double loss = 0.0;
    double accuracy = 0.0;
    int n_examples = 0;
};

struct MitigationOutcome {
    std::vector<HeadIndex> heads;
    double clean_before = 0.0;
    double clean_after = 0.0;
    double adv_before = 0.0;
    double adv_after = 0.0;
};

// One machine-readable record of a full run. Artifact paths are relative to
// the directory holding the summary file.
struct RunSummary {
    int schema_version = kSummarySchemaVersion;
    std::string model_fingerprint;
    std::string attack_fingerprint;
    std::string sweep_fingerprint;
    double tau_c = 0.0;
    std::optional<SummaryBaseline> clean;
    std::optional<SummaryBaseline> adversarial;
    std::vector<HeadIndex> crucial;
    std::vector<VulnerableHead> vulnerable;
    std::map<std::string, GroupBestHead> group_best_heads;
    std::optional<MitigationOutcome> mitigation;
    std::map<std::string, std::string> artifacts;
};

std::string model_config_fingerprint(const ModelConfig& config);
std::string attack_config_fingerprint(const AttackConfig& config);
std::string sweep_config_fingerprint(AblationMode mode, double tau_c);

// Refuses to write (integrity error) while any referenced artifact is
// missing on disk.
void write_summary(const RunSummary& summary, const std::string& path);

RunSummary load_summary(const std::string& path);

// Same artifact-existence check write_summary applies, for a loaded summary.
void verify_summary_artifacts(const RunSummary& summary, const std::string& summary_path);

}  // namespace headpatch
