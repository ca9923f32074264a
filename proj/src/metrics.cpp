#include "saccader/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "saccader/errors.hpp"

namespace saccader {

std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DependencyError("cannot open for writing: " + path);
  return os;
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  auto os = open_out(path);
  os << "stage,epoch,split,loss,accuracy,lr\n";
  for (const auto& r : rows) {
    os << r.stage << ',' << r.epoch << ',' << r.split << ',' << format_metric(r.loss) << ','
       << format_metric(r.accuracy) << ',' << format_metric(r.lr) << '\n';
  }
}

void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows) {
  auto os = open_out(path);
  os << "policy,K,top1,top5,coverage,occluded_top1\n";
  for (const auto& r : rows) {
    os << r.policy << ',' << r.k << ',' << format_metric(r.top1) << ',' << format_metric(r.top5)
       << ',' << format_metric(r.coverage) << ',' << format_metric(r.occluded_top1) << '\n';
  }
}

void write_traces_csv(const std::string& path, const std::vector<TraceExportRow>& rows) {
  auto os = open_out(path);
  os << "image_id,t,i,j,prob,pred_after_t\n";
  for (const auto& r : rows) {
    os << r.image_id << ',' << r.t << ',' << r.i << ',' << r.j << ',' << format_metric(r.prob)
       << ',' << r.pred_after_t << '\n';
  }
}

}  // namespace saccader
