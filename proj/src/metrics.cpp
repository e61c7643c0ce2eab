#include "drl/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "drl/error.hpp"

namespace drl {

StageMetrics evaluate_stage(const IncrementalState& state, const PrototypeStore& store,
                            std::span<const StageDataset> seen_stages) {
  store.require_complete(state.num_streams());
  StageMetrics m;
  m.stage = state.stage_index;
  for (const auto& ds : seen_stages) {
    m.seen_classes += static_cast<int>(ds.classes.size());
    for (const auto& s : ds.test) {
      m.correct += classify(state.forward(s.image).features, store).predicted == s.label;
      ++m.total;
    }
  }
  if (m.total == 0) throw DegenerateInputError("evaluate_stage: no test samples");
  m.accuracy = 100.0 * static_cast<double>(m.correct) / static_cast<double>(m.total);
  return m;
}

double accuracy_after_stage(const IncrementalState& state, const PrototypeStore& store,
                            std::span<const StageDataset> seen_stages) {
  return evaluate_stage(state, store, seen_stages).accuracy;
}

double average_accuracy(std::span<const double> accuracies) {
  if (accuracies.empty()) throw ConfigError("average_accuracy: empty sequence");
  double s = 0.0;
  for (double a : accuracies) s += a;
  return s / static_cast<double>(accuracies.size());
}

std::vector<double> MetricsTable::accuracies() const {
  std::vector<double> a;
  for (const auto& s : stages) a.push_back(s.accuracy);
  return a;
}

double MetricsTable::a_bar() const {
  const auto a = accuracies();
  return average_accuracy(a);
}

double MetricsTable::a_last() const {
  if (stages.empty()) throw ConfigError("MetricsTable: no stages");
  return stages.back().accuracy;
}

std::string MetricsTable::to_csv() const {
  std::ostringstream os;
  os << "stage,seen_classes,correct,total,accuracy\n";
  char buf[64];
  for (const auto& s : stages) {
    std::snprintf(buf, sizeof buf, "%.17g", s.accuracy);
    os << s.stage << ',' << s.seen_classes << ',' << s.correct << ',' << s.total << ',' << buf << '\n';
  }
  return os.str();
}

MetricsTable MetricsTable::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "stage,seen_classes,correct,total,accuracy")
    throw IoError("metrics csv: unexpected header");
  MetricsTable t;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    StageMetrics m;
    char comma[4];
    std::istringstream ls(line);
    if (!(ls >> m.stage >> comma[0] >> m.seen_classes >> comma[1] >> m.correct >> comma[2] >> m.total >> comma[3]))
      throw IoError("metrics csv: malformed row '" + line + "'");
    std::string acc;
    std::getline(ls, acc);
    m.accuracy = std::stod(acc);
    t.stages.push_back(m);
  }
  return t;
}

}  // namespace drl
