#include "effnet/digest.hpp"

#include <openssl/evp.h>

#include "effnet/errors.hpp"

namespace effnet {

struct Sha256::State {
  EVP_MD_CTX* ctx = nullptr;
  bool done = false;
};

Sha256::Sha256() : state_(std::make_unique<State>()) {
  state_->ctx = EVP_MD_CTX_new();
  if (!state_->ctx || EVP_DigestInit_ex(state_->ctx, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256: OpenSSL digest initialization failed");
  }
}

Sha256::~Sha256() { EVP_MD_CTX_free(state_->ctx); }

Sha256& Sha256::update(const void* data, std::size_t size) {
  if (state_->done) throw UsageError("sha256: update after finish");
  if (EVP_DigestUpdate(state_->ctx, data, size) != 1) {
    throw Error("sha256: digest update failed");
  }
  return *this;
}

Sha256& Sha256::update(std::string_view bytes) { return update(bytes.data(), bytes.size()); }

std::string Sha256::finish() {
  if (state_->done) throw UsageError("sha256: finish called twice");
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(state_->ctx, out, &len) != 1) {
    throw Error("sha256: digest finalization failed");
  }
  state_->done = true;
  return std::string(reinterpret_cast<const char*>(out), len);
}

std::string sha256(std::string_view bytes) { return Sha256().update(bytes).finish(); }

std::string to_hex(std::string_view bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s;
  s.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    s += kDigits[c >> 4];
    s += kDigits[c & 15];
  }
  return s;
}

}  // namespace effnet
