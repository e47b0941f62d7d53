#pragma once

#include <memory>
#include <string>
#include <string_view>

namespace effnet {

/// Incremental SHA-256.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(std::string_view bytes);
  Sha256& update(const void* data, std::size_t size);
  /// Raw 32-byte digest; the object cannot be updated afterwards.
  std::string finish();

 private:
  struct State;
  std::unique_ptr<State> state_;
};

std::string sha256(std::string_view bytes);
std::string to_hex(std::string_view bytes);

}  // namespace effnet
