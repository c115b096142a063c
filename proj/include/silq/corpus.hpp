// SPDX-License-Identifier: Apache-2.0
//
// Byte-level synthetic corpora. Tokens are raw byte values 0..255 plus PAD
// and BOS; documents are BOS-prefixed byte strings, padded or truncated to a
// fixed length at batch time. Three deterministic generators stand in for
// real data: a markov chain over a small alphabet (pretraining role), sum
// equations (structured patterns), and templated Q/A turns (tuning role).
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "silq/error.hpp"
#include "silq/rng.hpp"

namespace silq {

inline constexpr std::size_t kByteVocab = 256;
inline constexpr std::size_t kPadToken = 256;
inline constexpr std::size_t kBosToken = 257;
inline constexpr std::size_t kVocabSize = 258;

struct Corpus {
  std::string generator;
  std::vector<std::vector<std::size_t>> docs;  // BOS-prefixed, unpadded
};

inline std::vector<std::size_t> encode_bytes(const std::string& text) {
  std::vector<std::size_t> out;
  out.reserve(text.size() + 1);
  out.push_back(kBosToken);
  for (unsigned char c : text) out.push_back(c);
  return out;
}

/// Fit a document to seq_len tokens: truncate, or right-pad with PAD.
inline std::vector<std::size_t> pad_doc(const std::vector<std::size_t>& doc,
                                        std::size_t seq_len) {
  std::vector<std::size_t> out(doc.begin(),
                               doc.begin() + std::min(doc.size(), seq_len));
  out.resize(seq_len, kPadToken);
  return out;
}

namespace detail {

inline std::string gen_markov(Rng& rng, const std::vector<float>& table,
                              std::size_t n_symbols, const char* alphabet,
                              std::size_t len) {
  std::string s;
  s.reserve(len);
  std::size_t cur = rng.index(n_symbols);
  for (std::size_t i = 0; i < len; ++i) {
    s.push_back(alphabet[cur]);
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t next = n_symbols - 1;
    for (std::size_t j = 0; j < n_symbols; ++j) {
      acc += table[cur * n_symbols + j];
      if (u < acc) {
        next = j;
        break;
      }
    }
    cur = next;
  }
  return s;
}

inline std::string gen_arithmetic(Rng& rng, std::size_t n_terms) {
  std::string s;
  for (std::size_t i = 0; i < n_terms; ++i) {
    const int a = static_cast<int>(rng.index(100));
    const int b = static_cast<int>(rng.index(100));
    s += std::to_string(a) + "+" + std::to_string(b) + "=" +
         std::to_string(a + b) + ";";
  }
  return s;
}

inline std::string gen_dialogue(Rng& rng, std::size_t n_turns) {
  static const char* kThings[] = {"sky",  "sea",  "fire", "moss", "iron",
                                  "snow", "wine", "coal", "sand", "leaf"};
  static const char* kColors[] = {"blue",  "green", "red",   "grey", "white",
                                  "black", "gold",  "brown", "pale", "dark"};
  std::string s;
  for (std::size_t i = 0; i < n_turns; ++i) {
    const char* thing = kThings[rng.index(10)];
    const char* color = kColors[rng.index(10)];
    s += std::string("Q: what color is the ") + thing + "? A: the " + thing +
         " is " + color + ".\n";
  }
  return s;
}

}  // namespace detail

/// Deterministic synthetic corpus with n_docs documents. Known generators:
/// markov-chain, arithmetic-patterns, template-dialogue.
inline Corpus make_synthetic_corpus(const std::string& id, std::uint64_t seed,
                                    std::size_t n_docs) {
  check_input(n_docs > 0, "corpus: need at least one document");
  Corpus c;
  c.generator = id;
  Rng rng(seed);
  if (id == "markov-chain") {
    static const char kAlphabet[] = "abcdefghijklmnopqrstuvwxyz .,;:!?";
    const std::size_t n = sizeof(kAlphabet) - 1;
    // Skewed rows make the chain mostly predictable with occasional
    // surprise jumps, so magnitude distributions grow real tails.
    std::vector<float> table(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double u = rng.uniform();
        table[i * n + j] = static_cast<float>(u * u * u * u);
        sum += table[i * n + j];
      }
      for (std::size_t j = 0; j < n; ++j)
        table[i * n + j] = static_cast<float>(table[i * n + j] / sum);
    }
    for (std::size_t d = 0; d < n_docs; ++d) {
      const std::size_t len = 48 + rng.index(72);
      c.docs.push_back(
          encode_bytes(detail::gen_markov(rng, table, n, kAlphabet, len)));
    }
  } else if (id == "arithmetic-patterns") {
    for (std::size_t d = 0; d < n_docs; ++d)
      c.docs.push_back(
          encode_bytes(detail::gen_arithmetic(rng, 4 + rng.index(8))));
  } else if (id == "template-dialogue") {
    for (std::size_t d = 0; d < n_docs; ++d)
      c.docs.push_back(encode_bytes(detail::gen_dialogue(rng, 1 + rng.index(3))));
  } else {
    throw InputError("unknown corpus generator: " + id);
  }
  return c;
}

}  // namespace silq
