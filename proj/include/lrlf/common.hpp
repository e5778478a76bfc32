#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lrlf {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// All recoverable failures carry a machine-parseable category; the CLI
// prints "<category>: <message>" on one line and exits non-zero.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(category + ": " + message),
        category_(std::move(category)) {}

  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

// One supervised training example, shared by the denoising and translation
// objectives: the decoder input is the label sequence shifted right behind
// the target-language LID.
struct Example {
  TokenSeq encoder_input;
  TokenSeq decoder_input;
  TokenSeq labels;
};

inline Error manifest_error(const std::string& msg) { return Error("manifest-error", msg); }
inline Error io_error(const std::string& msg) { return Error("io-error", msg); }
inline Error config_error(const std::string& msg) { return Error("config-error", msg); }
inline Error data_error(const std::string& msg) { return Error("data-error", msg); }
inline Error vocab_error(const std::string& msg) { return Error("vocab-error", msg); }
inline Error model_error(const std::string& msg) { return Error("model-error", msg); }
inline Error train_error(const std::string& msg) { return Error("train-error", msg); }
inline Error decode_error(const std::string& msg) { return Error("decode-error", msg); }
inline Error eval_error(const std::string& msg) { return Error("eval-error", msg); }

}  // namespace lrlf
