#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lgm/occupancy.hpp"
#include "lgm/victims.hpp"

namespace lgm {

// ---- core metrics -------------------------------------------------------------

inline double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.empty() || preds.size() != labels.size())
    throw std::invalid_argument("accuracy: empty or mismatched inputs");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

struct IoUResult {
  std::vector<double> per_class;       // IoU_c, 0 for absent classes
  std::vector<std::uint8_t> present;   // class seen in preds or labels
  double mean = 0.0;                   // over present classes only
};

/// IoU_c = TP / (TP + FP + FN); classes absent from both predictions and
/// labels are excluded from the mean.
inline IoUResult miou(std::span<const int> preds, std::span<const int> labels,
                      std::size_t n_classes) {
  if (preds.empty() || preds.size() != labels.size())
    throw std::invalid_argument("miou: empty or mismatched inputs");
  std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], l = labels[i];
    if (p < 0 || l < 0 || static_cast<std::size_t>(p) >= n_classes ||
        static_cast<std::size_t>(l) >= n_classes)
      throw std::invalid_argument("miou: class id out of range");
    if (p == l)
      ++tp[static_cast<std::size_t>(p)];
    else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(l)];
    }
  }
  IoUResult r;
  r.per_class.assign(n_classes, 0.0);
  r.present.assign(n_classes, 0);
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const std::size_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    r.present[c] = 1;
    r.per_class[c] = static_cast<double>(tp[c]) / static_cast<double>(denom);
    sum += r.per_class[c];
    ++present;
  }
  if (present == 0) throw std::invalid_argument("miou: no class present");
  r.mean = sum / static_cast<double>(present);
  return r;
}

// ---- architecture change ----------------------------------------------------------

/// Fraction of skippable layers whose hard gate differs between the two
/// inputs, over the changeable-layer census.
inline double architecture_change_ratio(LayerSkipNet& net, const std::vector<double>& x_clean,
                                        const std::vector<double>& x_adv) {
  if (net.census() == 0) throw std::invalid_argument("architecture_change_ratio: census is zero");
  LayerSkipNet::Trace a, b;
  predict_image(net, x_clean, &a);
  predict_image(net, x_adv, &b);
  std::size_t changed = 0;
  for (std::size_t l = 0; l < a.gates.size(); ++l)
    if (a.gates[l] != b.gates[l]) ++changed;
  return static_cast<double>(changed) / static_cast<double>(net.census());
}

/// Pixel-wise census, with and without counting the input image's pixels in
/// the denominator (the input itself carries no mask, so it only dilutes).
struct ArchRatio2d {
  double mask_only = 0.0;
  double with_input = 0.0;
};

inline ArchRatio2d architecture_change_ratio(SparseConv2dNet& net,
                                             const std::vector<double>& x_clean,
                                             const std::vector<double>& x_adv) {
  if (net.census() == 0) throw std::invalid_argument("architecture_change_ratio: census is zero");
  SparseConv2dNet::Trace a, b;
  predict_image(net, x_clean, &a);
  predict_image(net, x_adv, &b);
  std::size_t changed = 0;
  for (std::size_t u = 0; u < a.masks.size(); ++u)
    for (std::size_t p = 0; p < a.masks[u].size(); ++p)
      if (a.masks[u][p] != b.masks[u][p]) ++changed;
  ArchRatio2d r;
  r.mask_only = static_cast<double>(changed) / static_cast<double>(net.census());
  r.with_input = static_cast<double>(changed) / static_cast<double>(net.census_with_input());
  return r;
}

/// Symmetric difference of occupied voxel sets over their union. The sparse
/// layers share one occupancy pattern, so the input-layer sets carry the
/// whole change.
inline double architecture_change_ratio(const SparseVoxelGrid& clean, const SparseVoxelGrid& adv) {
  std::size_t inter = 0;
  for (const auto& v : clean.voxels)
    if (adv.voxel_index.count(v)) ++inter;
  const std::size_t uni = clean.voxels.size() + adv.voxels.size() - inter;
  if (uni == 0) throw std::invalid_argument("architecture_change_ratio: empty voxel sets");
  const std::size_t symdiff = clean.voxels.size() + adv.voxels.size() - 2 * inter;
  return static_cast<double>(symdiff) / static_cast<double>(uni);
}

/// Fraction of examples executing each skippable layer.
inline std::vector<double> layer_execution_rates(LayerSkipNet& net, const ImageDataset& data,
                                                 const std::vector<std::size_t>& idx) {
  return skip_execution_rates(net, data, idx);
}

// ---- attack report -------------------------------------------------------------------

struct AttackReport {
  std::string victim;     // layer_skip | sparse2d | sparse3d
  std::string algorithm;  // fgsm | ifgsm | point | random
  std::string mode;       // FGM | LGM | Random
  double epsilon = 0.0;   // 0-255 scale for images, meters for points
  double alpha = 0.0;
  double lambda = 0.0;
  std::string relation = "sigmoid_like";
  std::size_t iterations = 0;
  double valid_fraction = 1.0;
  std::uint64_t seed = 0;
  double pre_metric = 0.0;   // accuracy or mIoU before attack
  double post_metric = 0.0;  // after attack, always hard-gated inference
  std::vector<double> per_class_iou;  // 3-D victims
  double arch_change_ratio = 0.0;
  std::optional<double> arch_change_ratio_with_input;        // 2-D victims
  std::vector<double> layer_execution_rates;                 // skip victims, post-attack
  double max_linf = 0.0;
  double mean_linf = 0.0;
  std::string config_echo;

  bool operator==(const AttackReport&) const = default;
};

inline void to_json(nlohmann::json& j, const AttackReport& r) {
  j = nlohmann::json{{"victim", r.victim},
                     {"algorithm", r.algorithm},
                     {"mode", r.mode},
                     {"epsilon", r.epsilon},
                     {"alpha", r.alpha},
                     {"lambda", r.lambda},
                     {"relation", r.relation},
                     {"iterations", r.iterations},
                     {"valid_fraction", r.valid_fraction},
                     {"seed", r.seed},
                     {"pre_metric", r.pre_metric},
                     {"post_metric", r.post_metric},
                     {"per_class_iou", r.per_class_iou},
                     {"arch_change_ratio", r.arch_change_ratio},
                     {"layer_execution_rates", r.layer_execution_rates},
                     {"max_linf", r.max_linf},
                     {"mean_linf", r.mean_linf},
                     {"config_echo", r.config_echo}};
  if (r.arch_change_ratio_with_input)
    j["arch_change_ratio_with_input"] = *r.arch_change_ratio_with_input;
}

inline void from_json(const nlohmann::json& j, AttackReport& r) {
  j.at("victim").get_to(r.victim);
  j.at("algorithm").get_to(r.algorithm);
  j.at("mode").get_to(r.mode);
  j.at("epsilon").get_to(r.epsilon);
  j.at("alpha").get_to(r.alpha);
  j.at("lambda").get_to(r.lambda);
  j.at("relation").get_to(r.relation);
  j.at("iterations").get_to(r.iterations);
  j.at("valid_fraction").get_to(r.valid_fraction);
  j.at("seed").get_to(r.seed);
  j.at("pre_metric").get_to(r.pre_metric);
  j.at("post_metric").get_to(r.post_metric);
  j.at("per_class_iou").get_to(r.per_class_iou);
  j.at("arch_change_ratio").get_to(r.arch_change_ratio);
  j.at("layer_execution_rates").get_to(r.layer_execution_rates);
  j.at("max_linf").get_to(r.max_linf);
  j.at("mean_linf").get_to(r.mean_linf);
  j.at("config_echo").get_to(r.config_echo);
  if (j.contains("arch_change_ratio_with_input"))
    r.arch_change_ratio_with_input = j.at("arch_change_ratio_with_input").get<double>();
  else
    r.arch_change_ratio_with_input.reset();
}

// ---- csv ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    out += c;
  }
  out += "\"";
  return out;
}

inline std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ";";
    out += fmt_double(v[i]);
  }
  return out;
}

inline std::vector<double> split_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ';'))
    if (!tok.empty()) out.push_back(std::stod(tok));
  return out;
}

/// RFC-4180-style field splitter for one logical record.
inline std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline const char* attack_report_csv_header() {
  return "victim,algorithm,mode,epsilon,alpha,lambda,relation,iterations,valid_fraction,seed,"
         "pre_metric,post_metric,arch_change_ratio,arch_change_ratio_with_input,per_class_iou,"
         "layer_execution_rates,max_linf,mean_linf,config_echo";
}

inline std::string attack_report_csv_row(const AttackReport& r) {
  using detail::csv_quote;
  using detail::fmt_double;
  std::string row;
  row += r.victim + "," + r.algorithm + "," + r.mode + ",";
  row += fmt_double(r.epsilon) + "," + fmt_double(r.alpha) + "," + fmt_double(r.lambda) + ",";
  row += r.relation + "," + std::to_string(r.iterations) + "," + fmt_double(r.valid_fraction) + ",";
  row += std::to_string(r.seed) + "," + fmt_double(r.pre_metric) + "," + fmt_double(r.post_metric) +
         ",";
  row += fmt_double(r.arch_change_ratio) + ",";
  row += (r.arch_change_ratio_with_input ? fmt_double(*r.arch_change_ratio_with_input) : "") + ",";
  row += csv_quote(detail::join_doubles(r.per_class_iou)) + ",";
  row += csv_quote(detail::join_doubles(r.layer_execution_rates)) + ",";
  row += fmt_double(r.max_linf) + "," + fmt_double(r.mean_linf) + ",";
  row += csv_quote(r.config_echo);
  return row;
}

inline AttackReport attack_report_from_csv_row(const std::string& line) {
  const auto f = detail::csv_fields(line);
  if (f.size() != 19) throw std::runtime_error("attack report csv: wrong field count");
  AttackReport r;
  r.victim = f[0];
  r.algorithm = f[1];
  r.mode = f[2];
  r.epsilon = std::stod(f[3]);
  r.alpha = std::stod(f[4]);
  r.lambda = std::stod(f[5]);
  r.relation = f[6];
  r.iterations = std::stoul(f[7]);
  r.valid_fraction = std::stod(f[8]);
  r.seed = std::stoull(f[9]);
  r.pre_metric = std::stod(f[10]);
  r.post_metric = std::stod(f[11]);
  r.arch_change_ratio = std::stod(f[12]);
  if (!f[13].empty()) r.arch_change_ratio_with_input = std::stod(f[13]);
  r.per_class_iou = detail::split_doubles(f[14]);
  r.layer_execution_rates = detail::split_doubles(f[15]);
  r.max_linf = std::stod(f[16]);
  r.mean_linf = std::stod(f[17]);
  r.config_echo = f[18];
  return r;
}

enum class ReportFormat { json, csv };

inline ReportFormat report_format_from_string(const std::string& s) {
  if (s == "json") return ReportFormat::json;
  if (s == "csv") return ReportFormat::csv;
  throw std::invalid_argument("unknown report format '" + s + "'");
}

inline void serialize_report(const AttackReport& r, const std::string& path, ReportFormat format) {
  std::ofstream out(path, std::ios::binary);  // binary: byte-identical newlines
  if (!out) throw std::runtime_error("serialize_report: cannot write " + path);
  if (format == ReportFormat::json) {
    nlohmann::json j = r;
    out << j.dump(2) << "\n";
  } else {
    out << attack_report_csv_header() << "\n" << attack_report_csv_row(r) << "\n";
  }
  if (!out) throw std::runtime_error("serialize_report: write failed for " + path);
}

inline AttackReport parse_report(const std::string& path, ReportFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("parse_report: cannot read " + path);
  if (format == ReportFormat::json) {
    nlohmann::json j = nlohmann::json::parse(in);
    return j.get<AttackReport>();
  }
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  // one header line, then a single logical record (quoted fields may span lines)
  const auto nl = content.find('\n');
  if (nl == std::string::npos) throw std::runtime_error("parse_report: malformed csv");
  std::string body = content.substr(nl + 1);
  if (!body.empty() && body.back() == '\n') body.pop_back();
  return attack_report_from_csv_row(body);
}

/// Whitespace-delimited table for plotting epsilon-vs-metric curves.
inline void write_plot_table(const std::string& path, const std::vector<std::string>& columns,
                             const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_plot_table: cannot write " + path);
  out << "#";
  for (const auto& c : columns) out << " " << c;
  out << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? " " : "") << detail::fmt_double(row[i]);
    out << "\n";
  }
}

}  // namespace lgm
