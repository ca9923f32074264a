#pragma once

#include <string>
#include <vector>

#include "saccader/policies.hpp"
#include "saccader/training.hpp"

namespace saccader {

// Shortest-round-trip style formatting shared by every CSV writer so reruns
// are byte-identical.
std::string format_metric(double v);

// Schema: stage,epoch,split,loss,accuracy,lr
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

// Schema: policy,K,top1,top5,coverage,occluded_top1
void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows);

struct TraceExportRow {
  int64_t image_id = 0;
  int64_t t = 0;
  int64_t i = 0;
  int64_t j = 0;
  double prob = 0;
  int64_t pred_after_t = 0;
};

// Schema: image_id,t,i,j,prob,pred_after_t
void write_traces_csv(const std::string& path, const std::vector<TraceExportRow>& rows);

}  // namespace saccader
