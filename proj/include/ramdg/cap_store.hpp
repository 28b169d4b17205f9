#pragma once

// Celebrity attribute cards: JSONL load/save, name-based retrieval from
// captions, and serialization of card fields into note tokens.

#include <algorithm>
#include <cctype>
#include <string>
#include <vector>

#include <json.hpp>

#include "ramdg/common.hpp"
#include "ramdg/matcher.hpp"

namespace ramdg {

struct CelebrityCard {
  std::vector<std::string> name;  // 1-3 normalized tokens
  std::string gender;
  int birth_year = 0;
  std::string occupation;
  std::vector<std::string> achievements;
  std::vector<std::string> image_refs;

  std::string joined_name() const {
    std::string s;
    for (size_t i = 0; i < name.size(); ++i) {
      if (i) s += ' ';
      s += name[i];
    }
    return s;
  }
};

/// Which card fields are withheld from the model (knowledge ablations).
struct KnowledgeDrop {
  bool gender = false;
  bool birth_year = false;
  bool occupation = false;
  bool achievements = false;
  bool images = false;

  bool any() const { return gender || birth_year || occupation || achievements || images; }

  /// Parses a comma-separated field list, e.g. "gender,images".
  static KnowledgeDrop parse(const std::string& csv) {
    KnowledgeDrop d;
    std::string cur;
    auto apply = [&](const std::string& f) {
      if (f.empty()) return;
      if (f == "gender") d.gender = true;
      else if (f == "birth_year") d.birth_year = true;
      else if (f == "occupation") d.occupation = true;
      else if (f == "achievements") d.achievements = true;
      else if (f == "images") d.images = true;
      else throw ConfigError("unknown knowledge field: " + f);
    };
    for (char c : csv) {
      if (c == ',') {
        apply(cur);
        cur.clear();
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        cur.push_back(c);
      }
    }
    apply(cur);
    return d;
  }
};

/// Lowercases, strips punctuation, splits on whitespace.
inline std::vector<std::string> normalize_name(const std::string& raw) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : raw) {
    unsigned char u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      if (!cur.empty()) {
        tokens.push_back(cur);
        cur.clear();
      }
    } else if (std::isalnum(u) || c == '_') {
      cur.push_back(char(std::tolower(u)));
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  return tokens;
}

/// Buckets a year into its decade token, e.g. 1987 -> "1980s".
inline std::string decade_token(int year) {
  int decade = (year / 10) * 10;
  return std::to_string(decade) + "s";
}

class CapStore {
 public:
  CapStore() = default;

  static CapStore from_cards(std::vector<CelebrityCard> cards) {
    CapStore s;
    s.cards_ = std::move(cards);
    s.validate_and_index();
    return s;
  }

  static CapStore load(const std::string& path) {
    std::vector<std::string> lines = split_lines(read_text_file(path));
    std::vector<CelebrityCard> cards;
    std::unordered_map<std::string, size_t> seen;  // normalized name -> line
    for (size_t ln = 0; ln < lines.size(); ++ln) {
      if (lines[ln].empty()) continue;
      CelebrityCard c = parse_card(lines[ln], ln + 1);
      auto [it, inserted] = seen.emplace(c.joined_name(), ln + 1);
      if (!inserted)
        throw DataError(path + " line " + std::to_string(ln + 1) + ": duplicate name '" +
                        c.joined_name() + "' (first seen on line " + std::to_string(it->second) +
                        ")");
      cards.push_back(std::move(c));
    }
    CapStore s;
    s.cards_ = std::move(cards);
    s.validate_and_index(path);
    return s;
  }

  void save(const std::string& path) const {
    std::string out;
    for (const auto& c : cards_) {
      nlohmann::json j;
      j["name"] = c.joined_name();
      j["gender"] = c.gender;
      j["birth_year"] = c.birth_year;
      j["occupation"] = c.occupation;
      std::string ach;
      for (size_t i = 0; i < c.achievements.size(); ++i) {
        if (i) ach += ' ';
        ach += c.achievements[i];
      }
      j["achievements"] = ach;
      j["images"] = c.image_refs;
      out += j.dump();
      out += '\n';
    }
    write_text_file(path, out);
  }

  size_t size() const { return cards_.size(); }
  const CelebrityCard& card(size_t i) const { return cards_.at(i); }
  const std::vector<CelebrityCard>& cards() const { return cards_; }

  bool has_name(const std::string& raw_name) const {
    auto toks = normalize_name(raw_name);
    CelebrityCard probe;
    probe.name = toks;
    return by_name_.count(probe.joined_name()) != 0;
  }

  /// Card indices whose full names occur in the caption, in first-occurrence
  /// order, overlaps resolved longest-match-first, each card at most once.
  std::vector<size_t> retrieve(const std::vector<std::string>& caption_tokens) const {
    std::vector<size_t> out;
    if (cards_.empty()) return out;
    for (const auto& m : matcher_.find_nonoverlapping(caption_tokens)) {
      if (std::find(out.begin(), out.end(), m.pattern) == out.end()) out.push_back(m.pattern);
    }
    return out;
  }

  /// Serializes one card into note tokens: separator, gender, birth decade,
  /// occupation, achievements. Dropped fields are omitted entirely.
  static std::vector<std::string> note_tokens(const CelebrityCard& c, const KnowledgeDrop& drop,
                                              const std::string& separator = "[sep]") {
    std::vector<std::string> toks;
    toks.push_back(separator);
    if (!drop.gender) toks.push_back(c.gender);
    if (!drop.birth_year) toks.push_back(decade_token(c.birth_year));
    if (!drop.occupation) toks.push_back(c.occupation);
    if (!drop.achievements)
      for (const auto& a : c.achievements) toks.push_back(a);
    return toks;
  }

 private:
  static CelebrityCard parse_card(const std::string& line, size_t lineno) {
    auto fail = [&](const std::string& why) -> DataError {
      return DataError("cap line " + std::to_string(lineno) + ": " + why);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("malformed JSON (") + e.what() + ")");
    }
    if (!j.is_object()) throw fail("expected a JSON object");
    static const std::vector<std::string> kKeys = {"name",        "gender", "birth_year",
                                                   "occupation",  "achievements", "images"};
    for (const auto& k : kKeys)
      if (!j.contains(k)) throw fail("missing key '" + k + "'");
    for (auto& [k, _] : j.items())
      if (std::find(kKeys.begin(), kKeys.end(), k) == kKeys.end())
        throw fail("unexpected key '" + k + "'");
    if (!j["name"].is_string() || !j["gender"].is_string() || !j["occupation"].is_string() ||
        !j["achievements"].is_string() || !j["birth_year"].is_number_integer() ||
        !j["images"].is_array())
      throw fail("field with wrong type");

    CelebrityCard c;
    c.name = normalize_name(j["name"].get<std::string>());
    c.gender = j["gender"].get<std::string>();
    c.birth_year = j["birth_year"].get<int>();
    c.occupation = j["occupation"].get<std::string>();
    c.achievements = normalize_name(j["achievements"].get<std::string>());
    for (auto& p : j["images"]) {
      if (!p.is_string()) throw fail("images must be strings");
      c.image_refs.push_back(p.get<std::string>());
    }
    if (c.name.empty() || c.name.size() > 3) throw fail("name must have 1-3 tokens");
    if (c.birth_year < 1800 || c.birth_year > 2100) throw fail("birth_year out of [1800, 2100]");
    if (c.image_refs.empty()) throw fail("images must be non-empty");
    return c;
  }

  void validate_and_index(const std::string& source = "") {
    by_name_.clear();
    std::vector<std::vector<std::string>> patterns;
    for (size_t i = 0; i < cards_.size(); ++i) {
      const auto& c = cards_[i];
      if (c.name.empty() || c.name.size() > 3)
        throw DataError("card " + std::to_string(i) + ": name must have 1-3 tokens");
      if (c.birth_year < 1800 || c.birth_year > 2100)
        throw DataError("card " + std::to_string(i) + ": birth_year out of range");
      if (c.image_refs.empty()) throw DataError("card " + std::to_string(i) + ": no images");
      std::string key = c.joined_name();
      auto [it, inserted] = by_name_.emplace(key, i);
      if (!inserted)
        throw DataError((source.empty() ? std::string("cap") : source) + ": duplicate name '" +
                        key + "' (cards " + std::to_string(it->second + 1) + " and " +
                        std::to_string(i + 1) + ")");
      patterns.push_back(c.name);
    }
    if (!patterns.empty()) matcher_.build(patterns);
  }

  std::vector<CelebrityCard> cards_;
  std::unordered_map<std::string, size_t> by_name_;
  MultiPatternMatcher<std::string> matcher_;
};

}  // namespace ramdg
