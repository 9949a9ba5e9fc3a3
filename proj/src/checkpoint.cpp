#include "gues/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace gues {

namespace {

void put_le(std::ofstream& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(std::ifstream& in, int bytes, const std::filesystem::path& path) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int ch = in.get();
    if (ch == std::char_traits<char>::eof()) {
      throw CheckpointError(path.string() + ": truncated checkpoint");
    }
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(ch)) << (8 * i);
  }
  return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, std::string_view magic,
                      const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(path.string() + ": cannot open for writing");
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  for (const auto& [name, tensor] : tensors) {
    put_le(out, name.size(), 4);
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le(out, static_cast<std::uint64_t>(tensor.rank()), 4);
    for (Index e : tensor.shape()) put_le(out, static_cast<std::uint64_t>(e), 8);
    for (Index i = 0; i < tensor.numel(); ++i) put_le(out, std::bit_cast<std::uint64_t>(tensor[i]), 8);
  }
  if (!out) throw CheckpointError(path.string() + ": write failed");
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path.string() + ": cannot open for reading");
  std::string head(magic.size(), '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  if (!in || head != magic) {
    throw CheckpointError(path.string() + ": bad magic, expected " + std::string(magic));
  }
  std::vector<NamedTensor> out;
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto name_len = get_le(in, 4, path);
    if (name_len > 4096) throw CheckpointError(path.string() + ": implausible name length");
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!in) throw CheckpointError(path.string() + ": truncated checkpoint");
    const auto rank = get_le(in, 4, path);
    if (rank == 0 || rank > 8) throw CheckpointError(path.string() + ": implausible rank for " + name);
    Shape shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<Index>(get_le(in, 8, path)));
    Buffer data(numel_of(shape));
    for (Index i = 0; i < data.size(); ++i) data[i] = std::bit_cast<double>(get_le(in, 8, path));
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return out;
}

void load_into(const std::vector<NamedTensor>& loaded, const std::vector<NamedTensor>& targets) {
  if (loaded.size() != targets.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(loaded.size()) + " tensors, model has " +
                          std::to_string(targets.size()));
  }
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    if (loaded[i].name != targets[i].name || loaded[i].tensor.shape() != targets[i].tensor.shape()) {
      throw CheckpointError("checkpoint tensor " + loaded[i].name + shape_str(loaded[i].tensor.shape()) +
                            " does not match " + targets[i].name +
                            shape_str(targets[i].tensor.shape()));
    }
  }
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    Tensor t = targets[i].tensor;
    t.mutable_data() = loaded[i].tensor.data();
  }
}

void save_gues_model(const std::filesystem::path& path, const GuesModel& model) {
  write_checkpoint(path, kGuesMagic, model.named_parameters());
}

void load_gues_model(const std::filesystem::path& path, GuesModel& model) {
  load_into(read_checkpoint(path, kGuesMagic), model.named_parameters());
}

}  // namespace gues
