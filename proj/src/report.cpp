#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "remi/error.hpp"
#include "remi/evaluation.hpp"

namespace remi {

using nlohmann::json;

std::optional<Real> RunCell::get(const std::string& name) const {
  const auto it = metrics.find(name);
  if (it == metrics.end()) return std::nullopt;
  return it->second;
}

bool RunReport::complete() const {
  for (const auto& c : cells)
    if (!c.complete) return false;
  return true;
}

const RunCell* RunReport::find(std::uint64_t seed, Real ratio) const {
  for (const auto& c : cells)
    if (c.seed == seed && c.ratio == ratio) return &c;
  return nullptr;
}

bool is_timing_metric(const std::string& name) { return name.rfind("time.", 0) == 0 || name == "speedup"; }

void to_json(json& j, const RunReport& r) {
  json cells = json::array();
  for (const auto& c : r.cells)
    cells.push_back({{"seed", c.seed},
                     {"ratio", c.ratio},
                     {"complete", c.complete},
                     {"failed_stage", c.failed_stage},
                     {"message", c.message},
                     {"metrics", c.metrics}});
  j = json{{"experiment", r.experiment}, {"architecture", r.architecture}, {"guide", r.guide}, {"cells", cells}};
}

void from_json(const json& j, RunReport& r) {
  r = RunReport{};
  j.at("experiment").get_to(r.experiment);
  j.at("architecture").get_to(r.architecture);
  j.at("guide").get_to(r.guide);
  for (const auto& c : j.at("cells")) {
    RunCell cell;
    c.at("seed").get_to(cell.seed);
    c.at("ratio").get_to(cell.ratio);
    c.at("complete").get_to(cell.complete);
    c.at("failed_stage").get_to(cell.failed_stage);
    c.at("message").get_to(cell.message);
    c.at("metrics").get_to(cell.metrics);
    r.cells.push_back(std::move(cell));
  }
}

namespace {

std::string num(Real v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + '"';
}

std::vector<std::string> metric_columns(const RunReport& r) {
  std::set<std::string> names;
  for (const auto& c : r.cells)
    for (const auto& [k, _] : c.metrics) names.insert(k);
  return {names.begin(), names.end()};
}

std::string render_csv(const RunReport& r) {
  const auto cols = metric_columns(r);
  std::ostringstream out;
  out << "experiment,architecture,guide,seed,ratio,complete,failed_stage,message";
  for (const auto& c : cols) out << ',' << c;
  out << '\n';
  for (const auto& c : r.cells) {
    out << quote(r.experiment) << ',' << quote(r.architecture) << ',' << quote(r.guide) << ',' << c.seed << ',' << num(c.ratio) << ','
        << (c.complete ? 1 : 0) << ',' << quote(c.failed_stage) << ',' << quote(c.message);
    for (const auto& name : cols) {
      out << ',';
      if (auto v = c.get(name)) out << num(*v);
    }
    out << '\n';
  }
  return out.str();
}

std::vector<std::vector<std::string>> parse_csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        field += ch;
      }
      continue;
    }
    any = true;
    if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (ch == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (ch != '\r') {
      field += ch;
    }
  }
  if (quoted) fail(ErrorCode::format, "unterminated quote in report csv");
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

Real parse_real(const std::string& s) {
  std::size_t used = 0;
  Real v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) fail(ErrorCode::format, "report csv: bad number '" + s + "'");
  return v;
}

// Markdown helpers.
std::string cellv(const RunCell& c, const std::string& name, int digits = 3) {
  const auto v = c.get(name);
  if (!v) return c.complete ? "n/a" : "incomplete";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, *v);
  return buf;
}

std::string row(std::initializer_list<std::string> parts) {
  std::string s = "|";
  for (const auto& p : parts) s += " " + p + " |";
  return s + "\n";
}

std::string evaluator_names[] = {"mf_white_box", "mf_black_box", "mia_white_box", "mia_black_box"};

std::vector<std::string> guides_in(const RunCell& c) {
  std::set<std::string> g;
  const std::string prefix = "attack.after.";
  for (const auto& [k, _] : c.metrics) {
    if (k.rfind(prefix, 0) != 0) continue;
    const auto rest = k.substr(prefix.size());
    for (const auto& e : evaluator_names) {
      const auto pos = rest.find("." + e + ".");
      if (pos != std::string::npos) g.insert(rest.substr(0, pos));
    }
  }
  return {g.begin(), g.end()};
}

std::string render_markdown(const RunReport& r) {
  std::ostringstream md;
  md << "# Report: " << r.experiment << "\n\n";
  md << "Guide: " << r.guide << "\n\n";
  md << "Status: " << (r.complete() ? "complete" : "incomplete") << "\n\n";
  for (const auto& c : r.cells)
    if (!c.complete)
      md << "- seed " << c.seed << ", ratio " << ratio_tag(c.ratio) << ": incomplete (stage " << c.failed_stage
         << "): " << c.message << "\n";
  if (!r.complete()) md << "\n";

  md << "## Accuracy\n\n";
  md << row({"Architecture", "Seed", "Ratio", "Phase", "D_f", "D_r", "Test"});
  md << "|---|---|---|---|---|---|---|\n";
  for (const auto& c : r.cells)
    for (const auto& [phase, label] : {std::pair{"before", "Original"}, {"after", "ReMI"}, {"retrain", "Retrain"}})
      md << row({r.architecture, std::to_string(c.seed), ratio_tag(c.ratio), label, cellv(c, std::string("acc.") + phase + ".df"),
                 cellv(c, std::string("acc.") + phase + ".dr"), cellv(c, std::string("acc.") + phase + ".test")});

  md << "\n## Attack accuracy on D_f (fraction flagged as member)\n\n";
  md << row({"Seed", "Ratio", "Evaluator", "Original", "ReMI", "Retrain", "D_o original", "D_o ReMI"});
  md << "|---|---|---|---|---|---|---|---|\n";
  const std::string& primary = r.guide;
  for (const auto& c : r.cells) {
    for (const auto& e : evaluator_names) {
      md << row({std::to_string(c.seed), ratio_tag(c.ratio), e, cellv(c, "attack.before." + e + ".df"),
                 cellv(c, "attack.after." + primary + "." + e + ".df"), cellv(c, "attack.retrain." + e + ".df"),
                 cellv(c, "attack.before." + e + ".do"), cellv(c, "attack.after." + primary + "." + e + ".do")});
    }
  }

  md << "\n## Cross-attack (guide x evaluator, D_f)\n\n";
  md << row({"Seed", "Ratio", "Guide", "Evaluator", "Before", "After", "D_o before", "D_o after"});
  md << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& c : r.cells)
    for (const auto& gn : guides_in(c))
      for (const auto& e : {std::string("mf_white_box"), std::string("mf_black_box")})
        md << row({std::to_string(c.seed), ratio_tag(c.ratio), gn, e, cellv(c, "attack.before." + e + ".df"),
                   cellv(c, "attack.after." + gn + "." + e + ".df"), cellv(c, "attack.before." + e + ".do"),
                   cellv(c, "attack.after." + gn + "." + e + ".do")});

  md << "\n## Distribution distance and efficacy proxy\n\n";
  md << row({"Seed", "Ratio", "KL original", "KL ReMI", "KL retrain", "efficacy_proxy original", "efficacy_proxy ReMI",
             "efficacy_proxy retrain"});
  md << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& c : r.cells)
    md << row({std::to_string(c.seed), ratio_tag(c.ratio), cellv(c, "kl.before", 4), cellv(c, "kl.after", 4),
               cellv(c, "kl.retrain", 4), cellv(c, "efficacy_proxy.before", 4), cellv(c, "efficacy_proxy.after", 4),
               cellv(c, "efficacy_proxy.retrain", 4)});

  md << "\n## Latency\n\n";
  md << row({"Seed", "Ratio", "|D_f|", "Unlearn (s)", "Privacy loss (s)", "Retrain (s)", "Speedup", "Epochs"});
  md << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& c : r.cells)
    md << row({std::to_string(c.seed), ratio_tag(c.ratio), cellv(c, "forget.size", 0), cellv(c, "time.unlearn"),
               cellv(c, "time.privacy_loss"), cellv(c, "time.retrain"), cellv(c, "speedup", 2), cellv(c, "unlearn.epochs", 0)});
  return md.str();
}

}  // namespace

std::string render_report(const RunReport& report, ReportFormat format) {
  return format == ReportFormat::csv ? render_csv(report) : render_markdown(report);
}

void emit_report(const RunReport& report, ReportFormat format, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out << render_report(report, format);
}

RunReport parse_report_csv(const std::string& text) {
  const auto rows = parse_csv_rows(text);
  if (rows.empty()) fail(ErrorCode::format, "empty report csv");
  const auto& head = rows.front();
  const std::vector<std::string> fixed{"experiment", "architecture", "guide", "seed", "ratio", "complete", "failed_stage", "message"};
  if (head.size() < fixed.size() || !std::equal(fixed.begin(), fixed.end(), head.begin()))
    fail(ErrorCode::format, "report csv: unexpected header");
  RunReport r;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() != head.size()) fail(ErrorCode::format, "report csv: row " + std::to_string(i) + " has wrong width");
    r.experiment = f[0];
    r.architecture = f[1];
    r.guide = f[2];
    RunCell c;
    try {
      c.seed = static_cast<std::uint64_t>(std::stoull(f[3]));
    } catch (const std::exception&) {
      fail(ErrorCode::format, "report csv: bad seed '" + f[3] + "'");
    }
    c.ratio = parse_real(f[4]);
    c.complete = f[5] == "1";
    c.failed_stage = f[6];
    c.message = f[7];
    for (std::size_t k = fixed.size(); k < head.size(); ++k)
      if (!f[k].empty()) c.metrics[head[k]] = parse_real(f[k]);
    r.cells.push_back(std::move(c));
  }
  return r;
}

}  // namespace remi
