#pragma once

// CSV and JSON input/output, key-value configuration files.
//
// CSV dialect: comma separated, '.' decimal, LF line endings, header row
// mandatory, no quoting. Floating point is written with 17 significant
// digits so every value reloads bit-identically.

#include <algorithm>
#include <array>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gridmix/errors.hpp"
#include "gridmix/model_core.hpp"
#include "gridmix/simulate.hpp"
#include "gridmix/theory.hpp"
#include "gridmix/tuning.hpp"
#include "json.hpp"

namespace gridmix {

namespace detail {

inline std::string formatDouble(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> splitFields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool parseDouble(const std::string& s, double& v) {
  if (s.empty()) return false;
  const char* first = s.data();
  if (*first == '+') ++first;
  const auto res = std::from_chars(first, s.data() + s.size(), v);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

/// Line-oriented CSV reader that remembers line numbers for error messages.
class CsvReader {
 public:
  explicit CsvReader(const std::filesystem::path& path) : path_(path), in_(path) {
    if (!in_) throw IOError(path_.string() + ": cannot open for reading");
    std::string line;
    if (!next(line)) throw ValidationError(path_.string() + ": missing header row");
    header_ = splitFields(line);
  }

  const std::vector<std::string>& header() const { return header_; }

  std::size_t column(const std::string& name) const {
    for (std::size_t c = 0; c < header_.size(); ++c)
      if (header_[c] == name) return c;
    throw ValidationError(path_.string() + ": missing column '" + name + "'");
  }

  /// Next nonblank record; false at end of file.
  bool row(std::vector<std::string>& fields) {
    std::string line;
    while (next(line)) {
      if (trim(line).empty()) continue;
      fields = splitFields(line);
      if (fields.size() != header_.size())
        throw ValidationError(where() + ": expected " + std::to_string(header_.size()) + " fields, found " +
                              std::to_string(fields.size()));
      return true;
    }
    return false;
  }

  double number(const std::vector<std::string>& fields, std::size_t c) const {
    double v = 0.0;
    if (!parseDouble(fields[c], v))
      throw ValidationError(where() + ": column '" + header_[c] + "' is not numeric ('" + fields[c] + "')");
    return v;
  }

  std::string where() const { return path_.string() + ":" + std::to_string(line_); }

 private:
  bool next(std::string& line) {
    if (!std::getline(in_, line)) return false;
    ++line_;
    return true;
  }

  std::filesystem::path path_;
  std::ifstream in_;
  std::vector<std::string> header_;
  std::size_t line_ = 0;
};

class CsvWriter {
 public:
  explicit CsvWriter(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IOError(path_.string() + ": cannot open for writing");
  }

  CsvWriter& field(const std::string& s) {
    if (!first_) out_ << ',';
    out_ << s;
    first_ = false;
    return *this;
  }
  CsvWriter& field(double v) { return field(formatDouble(v)); }
  CsvWriter& field(Index v) { return field(std::to_string(v)); }

  void endRow() {
    out_ << '\n';
    first_ = true;
  }

  void header(const std::vector<std::string>& names) {
    for (const auto& n : names) field(n);
    endRow();
  }

  void close() {
    out_.close();
    if (!out_) throw IOError(path_.string() + ": write failed");
  }

  ~CsvWriter() {
    if (out_.is_open()) out_.close();
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  bool first_ = true;
};

inline std::vector<std::string> coordinateNames(Index K) {
  std::vector<std::string> out;
  for (Index k = 0; k < K; ++k) out.push_back("beta_" + std::to_string(k + 1));
  return out;
}

}  // namespace detail

/// Column layout of a long-format choice file.
struct ChoiceSchema {
  std::vector<std::string> randomColumns;
  std::vector<std::string> fixedColumns;
  bool hasOutside = true;
};

/// Reads `unit_id, alt_id, chosen` plus the declared covariates. Rows of a unit
/// need not be adjacent; units keep first-appearance order and rows keep file
/// order within a unit.
inline ChoiceDataset loadChoiceCSV(const std::filesystem::path& path, const ChoiceSchema& schema) {
  detail::CsvReader rd(path);
  const std::size_t cUnit = rd.column("unit_id"), cAlt = rd.column("alt_id"), cChosen = rd.column("chosen");
  std::vector<std::size_t> cR, cF;
  for (const auto& n : schema.randomColumns) cR.push_back(rd.column(n));
  for (const auto& n : schema.fixedColumns) cF.push_back(rd.column(n));
  detail::require(!cR.empty(), "at least one random-coefficient covariate column required");

  struct Row {
    std::vector<double> xr, xf;
    double chosen;
  };
  std::vector<std::string> ids;
  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::vector<Row>> units;
  std::vector<std::string> f;
  while (rd.row(f)) {
    Row r;
    for (auto c : cR) r.xr.push_back(rd.number(f, c));
    for (auto c : cF) r.xf.push_back(rd.number(f, c));
    r.chosen = rd.number(f, cChosen);
    if (r.chosen != 0.0 && r.chosen != 1.0) throw ValidationError(rd.where() + ": chosen must be 0 or 1");
    if (f[cAlt].empty()) throw ValidationError(rd.where() + ": empty alt_id");
    const auto [it, fresh] = index.try_emplace(f[cUnit], units.size());
    if (fresh) {
      ids.push_back(f[cUnit]);
      units.emplace_back();
    }
    units[it->second].push_back(std::move(r));
  }
  detail::require(!units.empty(), path.string() + ": no data rows");

  const Index J = static_cast<Index>(units.front().size());
  const Index N = static_cast<Index>(units.size());
  for (std::size_t i = 0; i < units.size(); ++i)
    if (static_cast<Index>(units[i].size()) != J)
      throw ValidationError("unit " + ids[i] + ": has " + std::to_string(units[i].size()) +
                            " rows, expected " + std::to_string(J));

  Matrix xr(N * J, static_cast<Index>(cR.size())), xf(N * J, static_cast<Index>(cF.size()));
  Vector y(N * J);
  for (Index i = 0; i < N; ++i)
    for (Index j = 0; j < J; ++j) {
      const Row& r = units[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      for (Index k = 0; k < xr.cols(); ++k) xr(i * J + j, k) = r.xr[static_cast<std::size_t>(k)];
      for (Index k = 0; k < xf.cols(); ++k) xf(i * J + j, k) = r.xf[static_cast<std::size_t>(k)];
      y(i * J + j) = r.chosen;
    }
  return ChoiceDataset(std::move(ids), J, std::move(xr), std::move(xf), std::move(y), schema.hasOutside);
}

/// Writes the dataset in the long format read by loadChoiceCSV; alt_id runs 1..J.
inline void writeChoiceCSV(const ChoiceDataset& data, const std::filesystem::path& path,
                           const ChoiceSchema& schema) {
  detail::require(static_cast<Index>(schema.randomColumns.size()) == data.randomDim() &&
                      static_cast<Index>(schema.fixedColumns.size()) == data.fixedDim(),
                  "schema column names must match the dataset dimensions");
  detail::CsvWriter w(path);
  std::vector<std::string> head{"unit_id", "alt_id", "chosen"};
  head.insert(head.end(), schema.randomColumns.begin(), schema.randomColumns.end());
  head.insert(head.end(), schema.fixedColumns.begin(), schema.fixedColumns.end());
  w.header(head);
  const Index J = data.alternatives();
  for (Index i = 0; i < data.units(); ++i)
    for (Index j = 0; j < J; ++j) {
      const Index r = i * J + j;
      w.field(data.unitIds()[static_cast<std::size_t>(i)]).field(j + 1).field(static_cast<Index>(data.y()(r)));
      for (Index k = 0; k < data.randomDim(); ++k) w.field(data.xRandom()(r, k));
      for (Index k = 0; k < data.fixedDim(); ++k) w.field(data.xFixed()(r, k));
      w.endRow();
    }
  w.close();
}

/// Grid coordinates and weights: columns beta_1..beta_K, theta.
inline void writeWeightsCSV(const Matrix& points, const Vector& theta, const std::filesystem::path& path) {
  detail::require(points.rows() == theta.size(), "one weight per grid point required");
  detail::CsvWriter w(path);
  auto head = detail::coordinateNames(points.cols());
  head.push_back("theta");
  w.header(head);
  for (Index r = 0; r < points.rows(); ++r) {
    for (Index k = 0; k < points.cols(); ++k) w.field(points(r, k));
    w.field(theta(r)).endRow();
  }
  w.close();
}

struct PointTable {
  Matrix points;
  Vector values;
};

namespace detail {

inline PointTable readPointTable(const std::filesystem::path& path, const std::string& valueColumn) {
  CsvReader rd(path);
  const std::size_t cv = rd.column(valueColumn);
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < rd.header().size(); ++c)
    if (rd.header()[c].rfind("beta_", 0) == 0) cols.push_back(c);
  require(!cols.empty(), path.string() + ": no beta_ columns");
  std::vector<std::vector<double>> rows;
  std::vector<double> vals;
  std::vector<std::string> f;
  while (rd.row(f)) {
    std::vector<double> p;
    for (auto c : cols) p.push_back(rd.number(f, c));
    rows.push_back(std::move(p));
    vals.push_back(rd.number(f, cv));
  }
  PointTable t;
  t.points.resize(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
  t.values.resize(static_cast<Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t k = 0; k < cols.size(); ++k) t.points(static_cast<Index>(r), static_cast<Index>(k)) = rows[r][k];
    t.values(static_cast<Index>(r)) = vals[r];
  }
  return t;
}

}  // namespace detail

inline PointTable readWeightsCSV(const std::filesystem::path& path) {
  return detail::readPointTable(path, "theta");
}

/// Evaluation points and CDF values: columns beta_1..beta_K, cdf.
inline void writeCdfCSV(const Matrix& evalPoints, const Vector& cdf, const std::filesystem::path& path) {
  detail::require(evalPoints.rows() == cdf.size(), "one CDF value per evaluation point required");
  detail::CsvWriter w(path);
  auto head = detail::coordinateNames(evalPoints.cols());
  head.push_back("cdf");
  w.header(head);
  for (Index e = 0; e < evalPoints.rows(); ++e) {
    for (Index k = 0; k < evalPoints.cols(); ++k) w.field(evalPoints(e, k));
    w.field(cdf(e)).endRow();
  }
  w.close();
}

inline PointTable readCdfCSV(const std::filesystem::path& path) { return detail::readPointTable(path, "cdf"); }

inline void writeCvCSV(const CVResult& cv, const std::filesystem::path& path) {
  detail::CsvWriter w(path);
  w.header({"mu", "mse", "mse_se", "ll", "pred_out"});
  for (const auto& p : cv.points) w.field(p.mu).field(p.mseMean).field(p.mseSE).field(p.llMean).field(p.predOutMean).endRow();
  w.close();
}

/// Reloads the per-mu table; fold bookkeeping is not part of the file.
inline CVResult readCvCSV(const std::filesystem::path& path) {
  detail::CsvReader rd(path);
  const std::size_t c[] = {rd.column("mu"), rd.column("mse"), rd.column("mse_se"), rd.column("ll"),
                           rd.column("pred_out")};
  CVResult cv;
  std::vector<std::string> f;
  while (rd.row(f)) {
    CVPoint p;
    p.mu = rd.number(f, c[0]);
    p.mseMean = rd.number(f, c[1]);
    p.mseSE = rd.number(f, c[2]);
    p.llMean = rd.number(f, c[3]);
    p.predOutMean = rd.number(f, c[4]);
    cv.points.push_back(p);
  }
  return cv;
}

inline const std::vector<std::string>& summaryColumns() {
  static const std::vector<std::string> cols{"N",       "R",    "S",  "Estimator", "RMISE",
                                             "L1",      "Pos",  "TruePos", "Sign", "mu",
                                             "rho",     "replications", "failures"};
  return cols;
}

/// Monte Carlo table. TruePos and Sign are percentages, as in the published tables.
inline void writeSummaryCSV(const std::vector<SummaryRow>& rows, const std::filesystem::path& path) {
  detail::CsvWriter w(path);
  w.header(summaryColumns());
  for (const auto& r : rows) {
    w.field(r.units).field(r.gridSize).field(r.trueSupport).field(toString(r.estimator));
    w.field(r.rmise).field(r.l1).field(r.pos).field(100.0 * r.truePos).field(100.0 * r.sign);
    w.field(r.mu).field(r.rhoQ3).field(r.replications).field(r.failures).endRow();
  }
  w.close();
}

inline std::vector<SummaryRow> readSummaryCSV(const std::filesystem::path& path) {
  detail::CsvReader rd(path);
  std::vector<std::size_t> c;
  for (const auto& n : summaryColumns()) c.push_back(rd.column(n));
  std::vector<SummaryRow> out;
  std::vector<std::string> f;
  const std::array<Estimator, 5> all{Estimator::FKRB, Estimator::MinMSE, Estimator::OneSE, Estimator::MaxLL,
                                     Estimator::MaxPredOut};
  while (rd.row(f)) {
    SummaryRow r;
    r.units = static_cast<Index>(rd.number(f, c[0]));
    r.gridSize = static_cast<Index>(rd.number(f, c[1]));
    r.trueSupport = static_cast<Index>(rd.number(f, c[2]));
    bool known = false;
    for (auto e : all)
      if (toString(e) == f[c[3]]) {
        r.estimator = e;
        known = true;
      }
    if (!known) throw ValidationError(rd.where() + ": unknown estimator '" + f[c[3]] + "'");
    r.rmise = rd.number(f, c[4]);
    r.l1 = rd.number(f, c[5]);
    r.pos = rd.number(f, c[6]);
    r.truePos = rd.number(f, c[7]) / 100.0;
    r.sign = rd.number(f, c[8]) / 100.0;
    r.mu = rd.number(f, c[9]);
    r.rhoQ3 = rd.number(f, c[10]);
    r.replications = static_cast<Index>(rd.number(f, c[11]));
    r.failures = static_cast<Index>(rd.number(f, c[12]));
    out.push_back(r);
  }
  return out;
}

inline nlohmann::ordered_json toJson(const TheoryReport& r) {
  auto opt = [](const auto& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
  nlohmann::ordered_json j;
  j["gamma"] = r.gamma;
  j["lambda"] = r.lambda;
  j["mu"] = r.mu;
  j["k"] = r.k;
  j["xi_min"] = r.xiMin;
  j["xi_min_support"] = r.xiMinS;
  j["neic_margin"] = opt(r.neicMargin);
  j["rho"] = opt(r.rho);
  j["weight_bound"] = opt(r.weightBound);
  j["dist_bound"] = opt(r.distBound);
  j["corollary_holds"] = opt(r.corollaryHolds);
  j["notes"] = r.notes;
  return j;
}

inline TheoryReport theoryFromJson(const nlohmann::json& j) {
  auto optD = [&](const char* k) -> std::optional<double> {
    return j.at(k).is_null() ? std::nullopt : std::optional<double>(j.at(k).get<double>());
  };
  TheoryReport r;
  r.gamma = j.at("gamma").get<double>();
  r.lambda = j.at("lambda").get<double>();
  r.mu = j.at("mu").get<double>();
  r.k = j.at("k").get<double>();
  r.xiMin = j.at("xi_min").get<double>();
  r.xiMinS = j.at("xi_min_support").get<double>();
  r.neicMargin = optD("neic_margin");
  r.rho = optD("rho");
  r.weightBound = optD("weight_bound");
  r.distBound = optD("dist_bound");
  if (!j.at("corollary_holds").is_null()) r.corollaryHolds = j.at("corollary_holds").get<bool>();
  r.notes = j.at("notes").get<std::vector<std::string>>();
  return r;
}

inline void writeTheoryJSON(const TheoryReport& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IOError(path.string() + ": cannot open for writing");
  out << toJson(r).dump(2) << '\n';
  if (!out) throw IOError(path.string() + ": write failed");
}

inline TheoryReport readTheoryJSON(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IOError(path.string() + ": cannot open for reading");
  try {
    return theoryFromJson(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

/// First-stage fixed coefficients: two columns (name, value), comma or
/// whitespace separated. A first line whose value is not numeric is a header.
inline std::vector<std::pair<std::string, double>> readFirstStage(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IOError(path.string() + ": cannot open for reading");
  std::vector<std::pair<std::string, double>> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    std::string name, value, extra;
    if (!(ss >> name)) continue;
    if (!(ss >> value) || (ss >> extra))
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": expected two fields");
    double v = 0.0;
    if (!detail::parseDouble(value, v)) {
      if (n == 1) continue;
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": value is not numeric");
    }
    out.emplace_back(name, v);
  }
  return out;
}

/// Key-value configuration: `key = value` per line, '#' starts a comment.
inline std::map<std::string, std::string> readConfig(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IOError(path.string() + ": cannot open for reading");
  std::map<std::string, std::string> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ValidationError(path.string() + ":" + std::to_string(n) + ": empty key");
    out[key] = detail::trim(std::string_view(line).substr(eq + 1));
  }
  return out;
}

}  // namespace gridmix
