#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dynamics.hpp"
#include "error.hpp"

namespace reflplan {

// One executed decision (o_t, a_t*, f_t^e, e_t) plus what the policy update needs.
struct StepRecord {
  int step = 0;
  Observation observation;
  Intervention action;
  double external_score = 0.0;
  std::string external_feedback;
  ExecFeedback feedback;
  double logprob = 0.0;                 // log pi(a|ctx) at sampling time
  std::vector<double> context_features; // phi(ctx) at sampling time
};

// Working memory of at most K records, emptied after every retrospective flush.
class HindsightBuffer {
 public:
  explicit HindsightBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw Error(ErrorCode::ParamOutOfRange, "buffer capacity K must be >= 1");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  bool full() const { return records_.size() >= capacity_; }
  const std::vector<StepRecord>& records() const { return records_; }

  const StepRecord& at(std::size_t index) const {
    if (index >= records_.size())
      throw Error(ErrorCode::IndexOutOfBuffer,
                  "index " + std::to_string(index) + " in buffer of size " + std::to_string(records_.size()));
    return records_[index];
  }

  void push(StepRecord record) {
    if (full()) throw Error(ErrorCode::IndexOutOfBuffer, "buffer already holds K records");
    if (!records_.empty() && record.step <= records_.back().step)
      throw Error(ErrorCode::IndexOutOfBuffer, "records must arrive in step order");
    records_.push_back(std::move(record));
  }

  void flush() { records_.clear(); }

 private:
  std::size_t capacity_;
  std::vector<StepRecord> records_;
};

}  // namespace reflplan
