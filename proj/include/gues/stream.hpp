#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <vector>

#include "gues/image.hpp"

namespace gues {

/// One arriving batch. `ids` index the originating sample list so harnesses
/// that hold labels can score predictions; adapters only see `images`.
struct StreamBatch {
  Index index = 0;
  std::vector<std::size_t> ids;
  std::vector<Image> images;
};

class BatchSource {
 public:
  virtual ~BatchSource() = default;
  /// Next batch in arrival order, or nullopt once the stream is exhausted.
  virtual std::optional<StreamBatch> next() = 0;
};

/// Single-pass stream: shuffled once from the seed, partitioned into
/// batches (the last one may be short), each yielded exactly once.
class Stream : public BatchSource {
 public:
  Stream(std::shared_ptr<const std::vector<Image>> images, Index batch_size, std::uint64_t seed);

  std::optional<StreamBatch> next() override;

  Index batch_size() const { return batch_size_; }
  std::size_t batch_count() const;
  std::size_t batches_yielded() const { return cursor_; }
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  std::shared_ptr<const std::vector<Image>> images_;
  Index batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Records every batch index handed out by the wrapped source.
class InstrumentedSource : public BatchSource {
 public:
  explicit InstrumentedSource(BatchSource& inner) : inner_(inner) {}
  std::optional<StreamBatch> next() override;
  const std::vector<Index>& consumed() const { return consumed_; }
  std::size_t exhausted_calls() const { return exhausted_calls_; }

 private:
  BatchSource& inner_;
  std::vector<Index> consumed_;
  std::size_t exhausted_calls_ = 0;
};

}  // namespace gues
