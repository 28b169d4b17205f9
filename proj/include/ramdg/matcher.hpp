#pragma once

// Multi-pattern matcher (Aho-Corasick) over arbitrary symbol sequences,
// plus longest-match-first overlap resolution.

#include <algorithm>
#include <map>
#include <queue>
#include <vector>

#include "ramdg/common.hpp"

namespace ramdg {

struct PatternMatch {
  size_t pattern;  // index into the pattern list
  size_t start;    // inclusive
  size_t end;      // exclusive
  size_t length() const { return end - start; }
  bool operator==(const PatternMatch&) const = default;
};

template <class Sym>
class MultiPatternMatcher {
 public:
  MultiPatternMatcher() = default;

  explicit MultiPatternMatcher(const std::vector<std::vector<Sym>>& patterns) { build(patterns); }

  void build(const std::vector<std::vector<Sym>>& patterns) {
    nodes_.assign(1, Node{});
    lengths_.clear();
    for (size_t p = 0; p < patterns.size(); ++p) {
      if (patterns[p].empty()) throw ConfigError("matcher: empty pattern");
      int cur = 0;
      for (const Sym& s : patterns[p]) {
        auto it = nodes_[cur].next.find(s);
        if (it == nodes_[cur].next.end()) {
          nodes_[cur].next.emplace(s, int(nodes_.size()));
          cur = int(nodes_.size());
          nodes_.push_back(Node{});
        } else {
          cur = it->second;
        }
      }
      nodes_[cur].out.push_back(p);
      lengths_.push_back(patterns[p].size());
    }

    // breadth-first suffix links; ordered transitions keep construction
    // deterministic
    std::queue<int> bfs;
    for (auto& [sym, child] : nodes_[0].next) {
      nodes_[child].fail = 0;
      bfs.push(child);
    }
    while (!bfs.empty()) {
      int u = bfs.front();
      bfs.pop();
      for (auto& [sym, child] : nodes_[u].next) {
        int f = nodes_[u].fail;
        while (f != 0 && !nodes_[f].next.count(sym)) f = nodes_[f].fail;
        auto it = nodes_[f].next.find(sym);
        nodes_[child].fail = (it != nodes_[f].next.end() && it->second != child) ? it->second : 0;
        bfs.push(child);
      }
      int f = nodes_[u].fail;
      nodes_[u].dict = nodes_[f].out.empty() ? nodes_[f].dict : f;
    }
  }

  size_t pattern_count() const { return lengths_.size(); }

  /// Every occurrence of every pattern, ordered by (start, longer first,
  /// pattern index).
  std::vector<PatternMatch> find_all(const std::vector<Sym>& seq) const {
    std::vector<PatternMatch> matches;
    if (nodes_.empty()) return matches;
    int cur = 0;
    for (size_t i = 0; i < seq.size(); ++i) {
      const Sym& s = seq[i];
      while (cur != 0 && !nodes_[cur].next.count(s)) cur = nodes_[cur].fail;
      auto it = nodes_[cur].next.find(s);
      cur = it != nodes_[cur].next.end() ? it->second : 0;
      for (int v = cur; v != 0; v = nodes_[v].dict)
        for (size_t p : nodes_[v].out)
          matches.push_back({p, i + 1 - lengths_[p], i + 1});
    }
    std::sort(matches.begin(), matches.end(), [](const PatternMatch& a, const PatternMatch& b) {
      if (a.start != b.start) return a.start < b.start;
      if (a.end != b.end) return a.end > b.end;
      return a.pattern < b.pattern;
    });
    return matches;
  }

  /// Greedy longest-match-first, left-to-right resolution of overlaps.
  /// Input must be ordered as produced by find_all.
  static std::vector<PatternMatch> resolve_overlaps(const std::vector<PatternMatch>& all) {
    std::vector<PatternMatch> kept;
    size_t cursor = 0;
    for (const auto& m : all) {
      if (!kept.empty() && m.start < cursor) continue;
      kept.push_back(m);
      cursor = m.end;
    }
    return kept;
  }

  std::vector<PatternMatch> find_nonoverlapping(const std::vector<Sym>& seq) const {
    return resolve_overlaps(find_all(seq));
  }

 private:
  struct Node {
    std::map<Sym, int> next;
    int fail = 0;
    int dict = 0;  // nearest suffix node with output
    std::vector<size_t> out;
  };

  std::vector<Node> nodes_;
  std::vector<size_t> lengths_;
};

}  // namespace ramdg
