#include "raseg/learn/features.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace raseg::learn {

FeatureVector reduce_and_flatten(const nd::Tensor5<float>& featmap, std::string sample_id, std::optional<int> label) {
  const nd::Shape5 s = featmap.shape();
  if (s.n != 1) throw ValidationError("reduce_and_flatten: batch size must be 1, got " + std::to_string(s.n));
  FeatureVector fv{std::move(sample_id), std::vector<double>(static_cast<std::size_t>(s.c) * s.d), label};
  const double plane = static_cast<double>(s.h) * s.w;
  for (int c = 0; c < s.c; ++c) {
    for (int d = 0; d < s.d; ++d) {
      double acc = 0.0;
      const float* p = featmap.data() + featmap.offset(0, c, d, 0, 0);
      for (int i = 0; i < s.h * s.w; ++i) acc += p[i];
      fv.values[static_cast<std::size_t>(c) * s.d + d] = acc / plane;
    }
  }
  return fv;
}

std::vector<int> FeatureTable::y() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i]) throw ValidationError("feature row '" + ids[i] + "' has no label");
    out.push_back(*labels[i]);
  }
  return out;
}

FeatureTable to_table(const std::vector<FeatureVector>& rows) {
  if (rows.empty()) throw ValidationError("feature set is empty");
  const std::size_t d = rows.front().values.size();
  FeatureTable t;
  t.X.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].values.size() != d) {
      throw ValidationError("feature row '" + rows[i].sample_id + "' has " + std::to_string(rows[i].values.size()) +
                            " values, expected " + std::to_string(d));
    }
    for (std::size_t k = 0; k < d; ++k) {
      if (!std::isfinite(rows[i].values[k])) throw ValidationError("feature row '" + rows[i].sample_id + "' is not finite");
      t.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i].values[k];
    }
    t.ids.push_back(rows[i].sample_id);
    t.labels.push_back(rows[i].label);
  }
  return t;
}

void write_features_csv(const std::filesystem::path& path, const std::vector<FeatureVector>& rows) {
  if (rows.empty()) throw ValidationError("no feature rows to write");
  std::string out = "sample_id,label";
  for (std::size_t k = 0; k < rows.front().values.size(); ++k) out += ",f" + std::to_string(k);
  out += '\n';
  char buf[40];
  for (const auto& r : rows) {
    if (r.sample_id.find_first_of(",\n\"") != std::string::npos) {
      throw ValidationError("sample id '" + r.sample_id + "' cannot be written to CSV");
    }
    out += r.sample_id + ',';
    if (r.label) out += std::to_string(*r.label);
    for (double v : r.values) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out += ',';
      out += buf;
    }
    out += '\n';
  }
  write_text_file(path, out);
}

std::vector<FeatureVector> read_features_csv(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  std::istringstream in(text);
  std::string line;
  const std::string src = path.string();
  if (!std::getline(in, line) || line.rfind("sample_id,label", 0) != 0) {
    throw FormatError(src + ": missing 'sample_id,label,...' header");
  }
  std::size_t n_features = 0;
  for (char ch : line) n_features += ch == ',';
  n_features -= 1;
  std::vector<FeatureVector> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    const std::string where = src + ":" + std::to_string(line_no);
    if (cells.size() != n_features + 2) {
      throw FormatError(where + ": expected " + std::to_string(n_features + 2) + " fields, got " +
                        std::to_string(cells.size()));
    }
    FeatureVector fv;
    fv.sample_id = cells[0];
    if (!cells[1].empty()) {
      if (cells[1] != "0" && cells[1] != "1") throw FormatError(where + ": label must be 0, 1 or empty");
      fv.label = cells[1] == "1" ? 1 : 0;
    }
    for (std::size_t k = 2; k < cells.size(); ++k) {
      char* end = nullptr;
      const double v = std::strtod(cells[k].c_str(), &end);
      if (cells[k].empty() || *end != '\0' || !std::isfinite(v)) {
        throw FormatError(where + ": field " + std::to_string(k) + " is not a finite number");
      }
      fv.values.push_back(v);
    }
    rows.push_back(std::move(fv));
  }
  if (rows.empty()) throw FormatError(src + ": no feature rows");
  return rows;
}

}  // namespace raseg::learn
