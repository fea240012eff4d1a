#include "report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "error.hpp"
#include "rng.hpp"
#include "text.hpp"

namespace headpatch {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string to_hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string fmt_full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_double(const std::string& s, const std::string& what) {
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        fail(ErrorCode::Format, "cannot parse " + what + " from '" + s + "'");
    return v;
}

int parse_int(const std::string& s, const std::string& what) {
    char* end = nullptr;
    long v = std::strtol(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0')
        fail(ErrorCode::Format, "cannot parse " + what + " from '" + s + "'");
    return static_cast<int>(v);
}

std::string xml_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

std::ofstream open_for_write(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::Io, "cannot open '" + path + "' for writing");
    return out;
}

void finish_write(std::ofstream& out, const std::string& path) {
    out.flush();
    if (!out) fail(ErrorCode::Io, "write to '" + path + "' failed");
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(field);
            field.clear();
        } else {
            field.push_back(c);
        }
    }
    fields.push_back(field);
    return fields;
}

}  // namespace

void export_sweep_csv(const SweepResult& sweep, const std::string& path) {
    if (sweep.layers <= 0 || sweep.heads <= 0)
        fail(ErrorCode::Argument, "sweep has no cells to export");
    std::ofstream out = open_for_write(path);
    out << "# sweep_csv_version: 1\n";
    out << "# dataset_tag: " << sweep.dataset_tag << "\n";
    out << "# group_tag: " << sweep.group_tag << "\n";
    out << "# n_examples: " << sweep.n_examples << "\n";
    out << "# baseline_loss: " << fmt_full(sweep.baseline_loss) << "\n";
    out << "# baseline_accuracy: " << fmt_full(sweep.baseline_accuracy) << "\n";
    out << "layer,head,delta_loss,delta_accuracy\n";
    for (int l = 0; l < sweep.layers; ++l)
        for (int h = 0; h < sweep.heads; ++h)
            out << l << "," << h << "," << fmt_full(sweep.dloss(l, h)) << ","
                << fmt_full(sweep.daccuracy(l, h)) << "\n";
    finish_write(out, path);
}

SweepResult read_sweep_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open '" + path + "' for reading");

    std::map<std::string, std::string> meta;
    std::string line;
    bool saw_header = false;
    struct Row {
        int layer, head;
        double dl, da;
    };
    std::vector<Row> rows;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::size_t colon = line.find(':');
            if (colon == std::string::npos)
                fail(ErrorCode::Format, "malformed metadata line '" + line + "'");
            std::string key = line.substr(1, colon - 1);
            while (!key.empty() && key.front() == ' ') key.erase(key.begin());
            while (!key.empty() && key.back() == ' ') key.pop_back();
            std::string value = line.substr(colon + 1);
            if (!value.empty() && value.front() == ' ') value.erase(value.begin());
            meta[key] = value;
            continue;
        }
        if (!saw_header) {
            if (line != "layer,head,delta_loss,delta_accuracy")
                fail(ErrorCode::Schema, "unexpected sweep csv header '" + line + "'");
            saw_header = true;
            continue;
        }
        std::vector<std::string> f = split_csv_line(line);
        if (f.size() != 4) fail(ErrorCode::Format, "expected 4 fields in '" + line + "'");
        rows.push_back({parse_int(f[0], "layer"), parse_int(f[1], "head"),
                        parse_double(f[2], "delta_loss"), parse_double(f[3], "delta_accuracy")});
    }
    if (!saw_header) fail(ErrorCode::Schema, "sweep csv has no header row");
    if (rows.empty()) fail(ErrorCode::Schema, "sweep csv has no data rows");
    for (const char* key : {"sweep_csv_version", "dataset_tag", "group_tag", "n_examples",
                            "baseline_loss", "baseline_accuracy"})
        if (!meta.count(key)) fail(ErrorCode::Schema, std::string("missing metadata '") + key + "'");
    if (meta["sweep_csv_version"] != "1")
        fail(ErrorCode::Format, "unsupported sweep csv version " + meta["sweep_csv_version"]);

    SweepResult sweep;
    sweep.dataset_tag = meta["dataset_tag"];
    sweep.group_tag = meta["group_tag"];
    sweep.n_examples = parse_int(meta["n_examples"], "n_examples");
    sweep.baseline_loss = parse_double(meta["baseline_loss"], "baseline_loss");
    sweep.baseline_accuracy = parse_double(meta["baseline_accuracy"], "baseline_accuracy");
    int max_layer = 0, max_head = 0;
    for (const Row& r : rows) {
        max_layer = std::max(max_layer, r.layer);
        max_head = std::max(max_head, r.head);
    }
    sweep.layers = max_layer + 1;
    sweep.heads = max_head + 1;
    if (rows.size() != static_cast<std::size_t>(sweep.layers) * static_cast<std::size_t>(sweep.heads))
        fail(ErrorCode::Format, "sweep csv rows do not fill the grid");
    sweep.delta_loss.assign(rows.size(), 0.0);
    sweep.delta_accuracy.assign(rows.size(), 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Row& r = rows[i];
        std::size_t expect = static_cast<std::size_t>(r.layer) *
                                 static_cast<std::size_t>(sweep.heads) +
                             static_cast<std::size_t>(r.head);
        if (expect != i) fail(ErrorCode::Format, "sweep csv rows out of layer-major order");
        sweep.delta_loss[i] = r.dl;
        sweep.delta_accuracy[i] = r.da;
    }
    return sweep;
}

std::string heatmap_color(double value, double vmin, double vmax) {
    const double scale = std::max(std::fabs(vmin), std::fabs(vmax));
    double t = scale == 0.0 ? 0.0 : value / scale;
    t = std::clamp(t, -1.0, 1.0);
    // neutral f7f7f7, cool 2166ac, warm b2182b
    auto lerp = [](int a, int b, double u) {
        return static_cast<int>(std::lround(a + (b - a) * u));
    };
    int r, g, b;
    if (t < 0.0) {
        r = lerp(0xf7, 0x21, -t);
        g = lerp(0xf7, 0x66, -t);
        b = lerp(0xf7, 0xac, -t);
    } else {
        r = lerp(0xf7, 0xb2, t);
        g = lerp(0xf7, 0x18, t);
        b = lerp(0xf7, 0x2b, t);
    }
    char buf[8];
    std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
    return buf;
}

std::string format_cell_value(double value) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%+.3f", value);
    return buf;
}

void render_heatmap_svg(const SweepResult& sweep, const std::string& path) {
    if (sweep.layers <= 0 || sweep.heads <= 0)
        fail(ErrorCode::Argument, "sweep has no cells to render");

    const int cell = 56;
    const int left = 96, top = 56, right = 24, bottom = 110;
    const int grid_w = sweep.heads * cell;
    const int grid_h = sweep.layers * cell;
    const int width = left + grid_w + right;
    const int height = top + grid_h + bottom;

    double vmin = sweep.delta_accuracy[0], vmax = sweep.delta_accuracy[0];
    for (double v : sweep.delta_accuracy) {
        vmin = std::min(vmin, v);
        vmax = std::max(vmax, v);
    }

    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    svg << "  <rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
        << "\" fill=\"#ffffff\"/>\n";

    std::string title = "head ablation: delta accuracy";
    if (!sweep.dataset_tag.empty()) title += " on " + sweep.dataset_tag + " data";
    if (!sweep.group_tag.empty()) title += ", group " + sweep.group_tag;
    svg << "  <text x=\"" << left + grid_w / 2 << "\" y=\"28\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"15\">" << xml_escape(title) << "</text>\n";

    for (int l = 0; l < sweep.layers; ++l) {
        for (int h = 0; h < sweep.heads; ++h) {
            double v = sweep.daccuracy(l, h);
            int x = left + h * cell;
            int y = top + l * cell;
            svg << "  <rect id=\"cell-L" << l << "-H" << h << "\" x=\"" << x << "\" y=\"" << y
                << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
                << heatmap_color(v, vmin, vmax) << "\" stroke=\"#555555\"/>\n";
            svg << "  <text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4
                << "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"11\">"
                << format_cell_value(v) << "</text>\n";
        }
    }

    for (int h = 0; h < sweep.heads; ++h)
        svg << "  <text x=\"" << left + h * cell + cell / 2 << "\" y=\"" << top + grid_h + 20
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">H" << h
            << "</text>\n";
    for (int l = 0; l < sweep.layers; ++l)
        svg << "  <text x=\"" << left - 12 << "\" y=\"" << top + l * cell + cell / 2 + 4
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">L" << l
            << "</text>\n";
    svg << "  <text x=\"" << left + grid_w / 2 << "\" y=\"" << top + grid_h + 42
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">Head</text>\n";
    svg << "  <text x=\"22\" y=\"" << top + grid_h / 2
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
        << "transform=\"rotate(-90 22 " << top + grid_h / 2 << ")\">Layer</text>\n";

    int ly = top + grid_h + 58;
    struct Stop {
        const char* label;
        double value;
    };
    Stop stops[3] = {{"min", vmin}, {"zero", 0.0}, {"max", vmax}};
    for (int i = 0; i < 3; ++i) {
        int lx = left + i * 140;
        svg << "  <rect x=\"" << lx << "\" y=\"" << ly << "\" width=\"16\" height=\"16\" fill=\""
            << heatmap_color(stops[i].value, vmin, vmax) << "\" stroke=\"#555555\"/>\n";
        svg << "  <text x=\"" << lx + 22 << "\" y=\"" << ly + 13
            << "\" font-family=\"monospace\" font-size=\"11\">" << stops[i].label << " "
            << format_cell_value(stops[i].value) << "</text>\n";
    }
    if (vmin == vmax)
        svg << "  <text x=\"" << left << "\" y=\"" << ly + 36
            << "\" font-family=\"sans-serif\" font-size=\"11\">all cells share one value; "
            << "single-color rendering</text>\n";
    svg << "</svg>\n";

    std::ofstream out = open_for_write(path);
    out << svg.str();
    finish_write(out, path);
}

GroupAccuracyReport group_accuracy_report(const ClassifierModel& model, const Corpus& adv_corpus,
                                          const std::map<std::string, GroupBestHead>& best_heads,
                                          int workers) {
    GroupAccuracyReport report;
    const int max_len = model.config().max_seq_len;
    for (const auto& [tag, best] : best_heads) {
        std::vector<TokenSequence> seqs;
        std::vector<int> labels;
        for (const auto& ex : adv_corpus.examples) {
            if (std::find(ex.groups.begin(), ex.groups.end(), tag) == ex.groups.end()) continue;
            seqs.push_back(tokenize(ex.text, model.vocab(), max_len));
            labels.push_back(ex.label);
        }
        if (seqs.empty()) {
            report.warnings.push_back("group '" + tag +
                                      "' has no adversarial examples; row omitted");
            continue;
        }
        EvalResult base = evaluate(model, seqs, labels, nullptr, workers);
        PatchSpec patch = zero_patch({best.head});
        EvalResult ablated = run_with_patch(model, seqs, labels, patch, workers);
        GroupAccuracyRow row;
        row.group = tag;
        row.head = best.head;
        row.n_examples = static_cast<int>(seqs.size());
        row.baseline_accuracy = base.accuracy;
        row.ablated_accuracy = ablated.accuracy;
        row.gain = ablated.accuracy - base.accuracy;
        report.rows.push_back(row);
    }
    return report;
}

void write_group_report_csv(const GroupAccuracyReport& report, const std::string& path) {
    std::ofstream out = open_for_write(path);
    out << "# group_report_version: 1\n";
    for (const auto& w : report.warnings) out << "# warning: " << w << "\n";
    out << "group,layer,head,n_examples,baseline_accuracy,ablated_accuracy,gain\n";
    for (const auto& row : report.rows)
        out << row.group << "," << row.head.layer << "," << row.head.head << ","
            << row.n_examples << "," << fmt_full(row.baseline_accuracy) << ","
            << fmt_full(row.ablated_accuracy) << "," << fmt_full(row.gain) << "\n";
    finish_write(out, path);
}

GroupAccuracyReport read_group_report_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open '" + path + "' for reading");
    GroupAccuracyReport report;
    std::string line;
    bool saw_header = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line.rfind("# warning: ", 0) == 0) {
            report.warnings.push_back(line.substr(11));
            continue;
        }
        if (line[0] == '#') continue;
        if (!saw_header) {
            if (line != "group,layer,head,n_examples,baseline_accuracy,ablated_accuracy,gain")
                fail(ErrorCode::Schema, "unexpected group report header '" + line + "'");
            saw_header = true;
            continue;
        }
        std::vector<std::string> f = split_csv_line(line);
        if (f.size() != 7) fail(ErrorCode::Format, "expected 7 fields in '" + line + "'");
        GroupAccuracyRow row;
        row.group = f[0];
        row.head = HeadIndex{parse_int(f[1], "layer"), parse_int(f[2], "head")};
        row.n_examples = parse_int(f[3], "n_examples");
        row.baseline_accuracy = parse_double(f[4], "baseline_accuracy");
        row.ablated_accuracy = parse_double(f[5], "ablated_accuracy");
        row.gain = parse_double(f[6], "gain");
        report.rows.push_back(row);
    }
    if (!saw_header) fail(ErrorCode::Schema, "group report csv has no header row");
    return report;
}

void render_group_bars_svg(const GroupAccuracyReport& report, const std::string& path) {
    const int bar_w = 44, gap = 14, group_gap = 40;
    const int left = 70, top = 56, bottom = 70;
    const int plot_h = 220;
    const int n = static_cast<int>(report.rows.size());
    const int group_w = 2 * bar_w + gap;
    const int width = std::max(360, left + n * (group_w + group_gap) + 40);
    const int height = top + plot_h + bottom;

    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    svg << "  <rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
        << "\" fill=\"#ffffff\"/>\n";
    svg << "  <text x=\"" << width / 2 << "\" y=\"26\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"15\">adversarial accuracy by group, "
        << "with and without best-head ablation</text>\n";

    svg << "  <line x1=\"" << left - 10 << "\" y1=\"" << top + plot_h << "\" x2=\""
        << width - 20 << "\" y2=\"" << top + plot_h << "\" stroke=\"#555555\"/>\n";
    for (int tick = 0; tick <= 4; ++tick) {
        double frac = tick / 4.0;
        int y = top + plot_h - static_cast<int>(std::lround(frac * plot_h));
        svg << "  <text x=\"" << left - 16 << "\" y=\"" << y + 4
            << "\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"10\">"
            << format_cell_value(frac).substr(1) << "</text>\n";
    }

    auto bar = [&](int x, double value, const char* fill, const std::string& id) {
        int h = static_cast<int>(std::lround(value * plot_h));
        int y = top + plot_h - h;
        svg << "  <rect id=\"" << id << "\" x=\"" << x << "\" y=\"" << y << "\" width=\"" << bar_w
            << "\" height=\"" << h << "\" fill=\"" << fill << "\"/>\n";
        svg << "  <text x=\"" << x + bar_w / 2 << "\" y=\"" << y - 5
            << "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"10\">"
            << format_cell_value(value) << "</text>\n";
    };

    for (int i = 0; i < n; ++i) {
        const GroupAccuracyRow& row = report.rows[static_cast<std::size_t>(i)];
        int x0 = left + i * (group_w + group_gap);
        bar(x0, row.baseline_accuracy, "#7a8ca6", "bar-" + row.group + "-baseline");
        bar(x0 + bar_w + gap, row.ablated_accuracy, "#c46f4d", "bar-" + row.group + "-ablated");
        svg << "  <text x=\"" << x0 + group_w / 2 << "\" y=\"" << top + plot_h + 20
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
            << xml_escape(row.group) << " (" << head_name(row.head) << ")</text>\n";
    }

    int ly = top + plot_h + 44;
    svg << "  <rect x=\"" << left << "\" y=\"" << ly << "\" width=\"16\" height=\"16\" "
        << "fill=\"#7a8ca6\"/>\n";
    svg << "  <text x=\"" << left + 22 << "\" y=\"" << ly + 13
        << "\" font-family=\"sans-serif\" font-size=\"11\">baseline</text>\n";
    svg << "  <rect x=\"" << left + 110 << "\" y=\"" << ly << "\" width=\"16\" height=\"16\" "
        << "fill=\"#c46f4d\"/>\n";
    svg << "  <text x=\"" << left + 132 << "\" y=\"" << ly + 13
        << "\" font-family=\"sans-serif\" font-size=\"11\">best head ablated</text>\n";
    svg << "</svg>\n";

    std::ofstream out = open_for_write(path);
    out << svg.str();
    finish_write(out, path);
}

std::string model_config_fingerprint(const ModelConfig& config) {
    std::string s = "model-v1";
    s += "|num_layers=" + std::to_string(config.num_layers);
    s += "|num_heads=" + std::to_string(config.num_heads);
    s += "|d_model=" + std::to_string(config.d_model);
    s += "|d_ff=" + std::to_string(config.d_ff);
    s += "|vocab_size=" + std::to_string(config.vocab_size);
    s += "|max_seq_len=" + std::to_string(config.max_seq_len);
    s += "|seed=" + std::to_string(config.seed);
    return to_hex(fnv1a(s));
}

std::string attack_config_fingerprint(const AttackConfig& config) {
    std::string s = "attack-v1";
    s += std::string("|norm=") + (config.norm == AttackNorm::L2 ? "l2" : "linf");
    s += "|epsilon=" + fmt_full(config.epsilon);
    s += "|step_size=" + fmt_full(config.step_size);
    s += "|iterations=" + std::to_string(config.iterations);
    s += "|similarity_threshold=" + fmt_full(config.similarity_threshold);
    s += "|reproject_every=" + std::to_string(config.reproject_every);
    s += "|seed=" + std::to_string(config.seed);
    return to_hex(fnv1a(s));
}

std::string sweep_config_fingerprint(AblationMode mode, double tau_c) {
    std::string s = "sweep-v1";
    s += std::string("|mode=") + (mode == AblationMode::Zero ? "zero" : "mean");
    s += "|tau_c=" + fmt_full(tau_c);
    return to_hex(fnv1a(s));
}

namespace {

ordered_json head_to_json(const HeadIndex& head) {
    ordered_json j;
    j["layer"] = head.layer;
    j["head"] = head.head;
    j["name"] = head_name(head);
    return j;
}

HeadIndex head_from_json(const ordered_json& j, const std::string& where) {
    if (!j.contains("layer") || !j.contains("head"))
        fail(ErrorCode::Schema, "missing layer/head in " + where);
    return HeadIndex{j["layer"].get<int>(), j["head"].get<int>()};
}

void check_artifacts(const RunSummary& summary, const std::string& summary_path) {
    namespace fs = std::filesystem;
    fs::path base = fs::path(summary_path).parent_path();
    for (const auto& [name, rel] : summary.artifacts) {
        fs::path p = base / rel;
        if (!fs::exists(p))
            fail(ErrorCode::Integrity,
                 "summary artifact '" + name + "' points to missing file '" + p.string() + "'");
    }
}

ordered_json baseline_to_json(const SummaryBaseline& b) {
    ordered_json j;
    j["loss"] = b.loss;
    j["accuracy"] = b.accuracy;
    j["n_examples"] = b.n_examples;
    return j;
}

SummaryBaseline baseline_from_json(const ordered_json& j) {
    SummaryBaseline b;
    b.loss = j.at("loss").get<double>();
    b.accuracy = j.at("accuracy").get<double>();
    b.n_examples = j.at("n_examples").get<int>();
    return b;
}

}  // namespace

void write_summary(const RunSummary& summary, const std::string& path) {
    check_artifacts(summary, path);

    ordered_json doc;
    doc["schema_version"] = summary.schema_version;
    ordered_json fp;
    fp["model"] = summary.model_fingerprint;
    fp["attack"] = summary.attack_fingerprint;
    fp["sweep"] = summary.sweep_fingerprint;
    doc["fingerprints"] = fp;
    doc["tau_c"] = summary.tau_c;

    ordered_json baselines;
    baselines["clean"] = summary.clean ? baseline_to_json(*summary.clean) : ordered_json(nullptr);
    baselines["adversarial"] =
        summary.adversarial ? baseline_to_json(*summary.adversarial) : ordered_json(nullptr);
    doc["baselines"] = baselines;

    ordered_json crucial = ordered_json::array();
    for (const auto& head : summary.crucial) crucial.push_back(head_to_json(head));
    doc["crucial"] = crucial;

    ordered_json vulnerable = ordered_json::array();
    for (const auto& v : summary.vulnerable) {
        ordered_json j = head_to_json(v.head);
        j["delta_loss"] = v.delta_loss;
        j["delta_accuracy"] = v.delta_accuracy;
        vulnerable.push_back(j);
    }
    doc["vulnerable"] = vulnerable;

    ordered_json groups = ordered_json::object();
    for (const auto& [tag, best] : summary.group_best_heads) {
        ordered_json j = head_to_json(best.head);
        j["accuracy_gain"] = best.accuracy_gain;
        groups[tag] = j;
    }
    doc["group_best_heads"] = groups;

    if (summary.mitigation) {
        ordered_json m;
        ordered_json heads = ordered_json::array();
        for (const auto& head : summary.mitigation->heads) heads.push_back(head_to_json(head));
        m["heads"] = heads;
        m["clean_before"] = summary.mitigation->clean_before;
        m["clean_after"] = summary.mitigation->clean_after;
        m["clean_delta"] = summary.mitigation->clean_after - summary.mitigation->clean_before;
        m["adversarial_before"] = summary.mitigation->adv_before;
        m["adversarial_after"] = summary.mitigation->adv_after;
        m["adversarial_delta"] = summary.mitigation->adv_after - summary.mitigation->adv_before;
        doc["mitigation"] = m;
    } else {
        doc["mitigation"] = nullptr;
    }

    ordered_json artifacts = ordered_json::object();
    for (const auto& [name, rel] : summary.artifacts) artifacts[name] = rel;
    doc["artifacts"] = artifacts;

    std::ofstream out = open_for_write(path);
    out << doc.dump(2) << "\n";
    finish_write(out, path);
}

RunSummary load_summary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open '" + path + "' for reading");
    ordered_json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::Format, std::string("summary is not valid json: ") + e.what());
    }
    if (!doc.contains("schema_version") || !doc["schema_version"].is_number_integer())
        fail(ErrorCode::Schema, "summary lacks an integer schema_version");
    RunSummary summary;
    summary.schema_version = doc["schema_version"].get<int>();
    if (summary.schema_version != kSummarySchemaVersion)
        fail(ErrorCode::Format,
             "unsupported summary schema version " + std::to_string(summary.schema_version));
    for (const char* key : {"fingerprints", "tau_c", "baselines", "crucial", "vulnerable",
                            "group_best_heads", "mitigation", "artifacts"})
        if (!doc.contains(key)) fail(ErrorCode::Schema, std::string("summary lacks '") + key + "'");

    const auto& fp = doc["fingerprints"];
    for (const char* key : {"model", "attack", "sweep"})
        if (!fp.contains(key))
            fail(ErrorCode::Schema, std::string("summary fingerprints lack '") + key + "'");
    summary.model_fingerprint = fp["model"].get<std::string>();
    summary.attack_fingerprint = fp["attack"].get<std::string>();
    summary.sweep_fingerprint = fp["sweep"].get<std::string>();
    summary.tau_c = doc["tau_c"].get<double>();

    const auto& baselines = doc["baselines"];
    if (baselines.contains("clean") && !baselines["clean"].is_null())
        summary.clean = baseline_from_json(baselines["clean"]);
    if (baselines.contains("adversarial") && !baselines["adversarial"].is_null())
        summary.adversarial = baseline_from_json(baselines["adversarial"]);

    for (const auto& j : doc["crucial"]) summary.crucial.push_back(head_from_json(j, "crucial"));
    for (const auto& j : doc["vulnerable"]) {
        VulnerableHead v;
        v.head = head_from_json(j, "vulnerable");
        v.delta_loss = j.at("delta_loss").get<double>();
        v.delta_accuracy = j.at("delta_accuracy").get<double>();
        summary.vulnerable.push_back(v);
    }
    for (const auto& [tag, j] : doc["group_best_heads"].items()) {
        GroupBestHead best;
        best.head = head_from_json(j, "group_best_heads");
        best.accuracy_gain = j.at("accuracy_gain").get<double>();
        summary.group_best_heads[tag] = best;
    }
    if (!doc["mitigation"].is_null()) {
        const auto& m = doc["mitigation"];
        MitigationOutcome outcome;
        for (const auto& j : m.at("heads")) outcome.heads.push_back(head_from_json(j, "mitigation"));
        outcome.clean_before = m.at("clean_before").get<double>();
        outcome.clean_after = m.at("clean_after").get<double>();
        outcome.adv_before = m.at("adversarial_before").get<double>();
        outcome.adv_after = m.at("adversarial_after").get<double>();
        summary.mitigation = outcome;
    }
    for (const auto& [name, rel] : doc["artifacts"].items())
        summary.artifacts[name] = rel.get<std::string>();
    return summary;
}

void verify_summary_artifacts(const RunSummary& summary, const std::string& summary_path) {
    check_artifacts(summary, summary_path);
}

}  // namespace headpatch
