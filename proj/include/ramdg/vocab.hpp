#pragma once

// Closed word vocabulary with stable integer ids, serialized as a JSON
// token-to-id map.

#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ramdg/common.hpp"

namespace ramdg {

class Vocab {
 public:
  /// Returns the existing id or appends the word.
  int add(const std::string& word) {
    auto it = ids_.find(word);
    if (it != ids_.end()) return it->second;
    int id = int(words_.size());
    words_.push_back(word);
    ids_.emplace(word, id);
    return id;
  }

  bool has(const std::string& word) const { return ids_.count(word) != 0; }

  int id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) throw DataError("vocab: unknown token '" + word + "'");
    return it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || size_t(id) >= words_.size()) throw DataError("vocab: id out of range");
    return words_[size_t(id)];
  }

  size_t size() const { return words_.size(); }

  std::vector<int> encode(const std::vector<std::string>& words) const {
    std::vector<int> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(word(i));
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (size_t i = 0; i < words_.size(); ++i) j[words_[i]] = int(i);
    return j;
  }

  static Vocab from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw DataError("vocab: expected a JSON object");
    std::vector<std::string> words(j.size());
    for (auto& [word, id] : j.items()) {
      if (!id.is_number_integer()) throw DataError("vocab: non-integer id for '" + word + "'");
      int i = id.get<int>();
      if (i < 0 || size_t(i) >= words.size() || !words[size_t(i)].empty())
        throw DataError("vocab: ids must form a dense 0..n-1 range");
      words[size_t(i)] = word;
    }
    Vocab v;
    for (auto& w : words) v.add(w);
    if (v.size() != j.size()) throw DataError("vocab: duplicate tokens");
    return v;
  }

  static Vocab load(const std::string& path) {
    return from_json(nlohmann::json::parse(read_text_file(path)));
  }

  void save(const std::string& path) const { write_text_file(path, to_json().dump(2) + "\n"); }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace ramdg
