#include "gues/stream.hpp"

#include <numeric>

namespace gues {

Stream::Stream(std::shared_ptr<const std::vector<Image>> images, Index batch_size, std::uint64_t seed)
    : images_(std::move(images)), batch_size_(batch_size) {
  if (!images_ || images_->empty()) throw Error("stream: empty sample list");
  if (batch_size_ < 1) throw Error("stream: batch size must be at least 1");
  order_.resize(images_->size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order_);
}

std::size_t Stream::batch_count() const {
  const auto b = static_cast<std::size_t>(batch_size_);
  return (order_.size() + b - 1) / b;
}

std::optional<StreamBatch> Stream::next() {
  if (cursor_ >= batch_count()) return std::nullopt;
  const auto b = static_cast<std::size_t>(batch_size_);
  const std::size_t begin = cursor_ * b;
  const std::size_t end = std::min(order_.size(), begin + b);
  StreamBatch batch;
  batch.index = static_cast<Index>(cursor_);
  for (std::size_t i = begin; i < end; ++i) {
    batch.ids.push_back(order_[i]);
    batch.images.push_back((*images_)[order_[i]]);
  }
  ++cursor_;
  return batch;
}

std::optional<StreamBatch> InstrumentedSource::next() {
  auto batch = inner_.next();
  if (batch) {
    consumed_.push_back(batch->index);
  } else {
    ++exhausted_calls_;
  }
  return batch;
}

}  // namespace gues
