#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "ramdg/cap_store.hpp"

using namespace ramdg;

namespace {

CelebrityCard make_card(const std::string& name, const std::string& occupation,
                        int birth_year = 1980) {
  CelebrityCard c;
  c.name = normalize_name(name);
  c.gender = "female";
  c.birth_year = birth_year;
  c.occupation = occupation;
  c.achievements = {"gold_medal"};
  c.image_refs = {"a.ppm", "b.ppm", "c.ppm"};
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("round trip through jsonl") {
  auto path = temp_path("cap_roundtrip.jsonl");
  CapStore s = CapStore::from_cards({make_card("Alex Stone", "singer", 1975),
                                     make_card("Mia Park", "skater", 1991)});
  s.save(path);
  CapStore loaded = CapStore::load(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded.card(0).joined_name() == "alex stone");
  CHECK(loaded.card(0).occupation == "singer");
  CHECK(loaded.card(1).birth_year == 1991);
  CHECK(loaded.card(1).image_refs.size() == 3);
  std::remove(path.c_str());
}

TEST_CASE("empty file gives empty store") {
  auto path = temp_path("cap_empty.jsonl");
  write_text_file(path, "");
  CapStore s = CapStore::load(path);
  CHECK(s.size() == 0);
  CHECK(s.retrieve({"alex", "stone"}).empty());
  std::remove(path.c_str());
}

TEST_CASE("duplicate name cites the offending line") {
  auto path = temp_path("cap_dup.jsonl");
  CapStore a = CapStore::from_cards({make_card("Alex Stone", "singer")});
  CapStore b = CapStore::from_cards(
      {make_card("Mia Park", "skater"), make_card("Rui Chen", "boxer")});
  std::string line1, line23;
  a.save(path);
  line1 = read_text_file(path);
  b.save(path);
  line23 = read_text_file(path);
  write_text_file(path, line1 + line23 + line1);  // duplicate on line 4
  try {
    CapStore::load(path);
    FAIL("expected duplicate-entry error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 4") != std::string::npos);
    CHECK(std::string(e.what()).find("alex stone") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("malformed line cites line number") {
  auto path = temp_path("cap_bad.jsonl");
  write_text_file(path, "{\"name\": \"a b\", \"gender\": \"m\"}\n");
  try {
    CapStore::load(path);
    FAIL("expected parse error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }

  write_text_file(path, "not json at all\n");
  CHECK_THROWS_AS(CapStore::load(path), DataError);
  std::remove(path.c_str());
}

TEST_CASE("field validation") {
  CHECK_THROWS_AS(CapStore::from_cards({make_card("Alex Stone", "singer", 1700)}), DataError);
  auto no_images = make_card("Alex Stone", "singer");
  no_images.image_refs.clear();
  CHECK_THROWS_AS(CapStore::from_cards({no_images}), DataError);
  auto long_name = make_card("a b c d", "singer");
  CHECK_THROWS_AS(CapStore::from_cards({long_name}), DataError);
}

TEST_CASE("retrieval basics") {
  CapStore s = CapStore::from_cards({make_card("alex stone", "singer"),
                                     make_card("mia park", "skater")});

  SECTION("direct containment") {
    auto r = s.retrieve({"alex", "stone", "visited", "paris"});
    REQUIRE(r.size() == 1);
    CHECK(s.card(r[0]).joined_name() == "alex stone");
  }

  SECTION("caption order of first occurrence") {
    auto r = s.retrieve({"mia", "park", "met", "alex", "stone"});
    REQUIRE(r.size() == 2);
    CHECK(s.card(r[0]).joined_name() == "mia park");
    CHECK(s.card(r[1]).joined_name() == "alex stone");
  }

  SECTION("no match is empty, not an error") {
    CHECK(s.retrieve({"nobody", "here"}).empty());
    CHECK(s.retrieve({}).empty());
  }

  SECTION("each card at most once") {
    auto r = s.retrieve({"alex", "stone", "and", "alex", "stone"});
    CHECK(r.size() == 1);
  }

  SECTION("idempotence") {
    std::vector<std::string> cap = {"alex", "stone", "met", "mia", "park"};
    CHECK(s.retrieve(cap) == s.retrieve(cap));
  }
}

TEST_CASE("longest match shadows a nested shorter name") {
  CapStore s = CapStore::from_cards({make_card("alex stone", "singer"),
                                     make_card("stone", "boxer")});
  auto r = s.retrieve({"alex", "stone"});
  REQUIRE(r.size() == 1);
  CHECK(s.card(r[0]).joined_name() == "alex stone");

  auto r2 = s.retrieve({"stone", "spoke"});
  REQUIRE(r2.size() == 1);
  CHECK(s.card(r2[0]).joined_name() == "stone");
}

TEST_CASE("retrieval independent of card insertion order") {
  auto c1 = make_card("alex stone", "singer");
  auto c2 = make_card("mia park", "skater");
  auto c3 = make_card("stone", "boxer");
  CapStore a = CapStore::from_cards({c1, c2, c3});
  CapStore b = CapStore::from_cards({c3, c1, c2});
  std::vector<std::string> cap = {"mia", "park", "saw", "alex", "stone"};
  auto ra = a.retrieve(cap);
  auto rb = b.retrieve(cap);
  REQUIRE(ra.size() == rb.size());
  for (size_t i = 0; i < ra.size(); ++i)
    CHECK(a.card(ra[i]).joined_name() == b.card(rb[i]).joined_name());
}

TEST_CASE("name normalization") {
  CHECK(normalize_name("Alex  STONE!") == std::vector<std::string>{"alex", "stone"});
  CHECK(normalize_name("  mia-park ") == std::vector<std::string>{"miapark"});
  CHECK(normalize_name("") == std::vector<std::string>{});
}

TEST_CASE("decade buckets") {
  CHECK(decade_token(1987) == "1980s");
  CHECK(decade_token(1990) == "1990s");
  CHECK(decade_token(2001) == "2000s");
}

TEST_CASE("note serialization respects knowledge drops") {
  auto c = make_card("alex stone", "singer", 1975);
  c.achievements = {"gold_medal", "city_award"};

  auto full = CapStore::note_tokens(c, KnowledgeDrop{});
  CHECK(full == std::vector<std::string>{"[sep]", "female", "1970s", "singer", "gold_medal",
                                         "city_award"});

  KnowledgeDrop d;
  d.occupation = true;
  d.achievements = true;
  auto dropped = CapStore::note_tokens(c, d);
  CHECK(dropped == std::vector<std::string>{"[sep]", "female", "1970s"});

  auto drop_all = CapStore::note_tokens(c, KnowledgeDrop::parse("gender,birth_year,occupation,achievements,images"));
  CHECK(drop_all == std::vector<std::string>{"[sep]"});
}

TEST_CASE("knowledge drop parsing") {
  auto d = KnowledgeDrop::parse("gender, images");
  CHECK(d.gender);
  CHECK(d.images);
  CHECK_FALSE(d.occupation);
  CHECK_FALSE(KnowledgeDrop::parse("").any());
  CHECK_THROWS_AS(KnowledgeDrop::parse("bogus"), ConfigError);
}

TEST_CASE("retrieval equals naive scan on random stores") {
  Rng rng(424242);
  std::vector<std::string> name_pool = {"ana", "bo", "cy", "dee", "eli", "fay", "gus", "hal"};
  for (int trial = 0; trial < 100; ++trial) {
    // random store of 1-2 token names, unique
    std::vector<CelebrityCard> cards;
    std::vector<std::vector<std::string>> names;
    size_t n = 1 + rng.uniform_int(5);
    for (size_t i = 0; i < n && names.size() < n; ++i) {
      std::vector<std::string> nm;
      size_t len = 1 + rng.uniform_int(2);
      for (size_t k = 0; k < len; ++k) nm.push_back(name_pool[rng.uniform_int(name_pool.size())]);
      bool dup = false;
      for (auto& e : names)
        if (e == nm) dup = true;
      if (!dup) names.push_back(nm);
    }
    for (auto& nm : names) {
      CelebrityCard c = make_card("x", "singer");
      c.name = nm;
      cards.push_back(c);
    }
    CapStore store = CapStore::from_cards(cards);

    std::vector<std::string> caption;
    size_t len = rng.uniform_int(12);
    for (size_t i = 0; i < len; ++i) caption.push_back(name_pool[rng.uniform_int(name_pool.size())]);

    // oracle: scan every position, every name, longest-first greedy
    std::vector<size_t> expect;
    size_t pos = 0;
    while (pos < caption.size()) {
      size_t best = SIZE_MAX, best_len = 0;
      for (size_t ci = 0; ci < names.size(); ++ci) {
        const auto& nm = names[ci];
        if (pos + nm.size() > caption.size() || nm.size() <= best_len) continue;
        bool ok = true;
        for (size_t k = 0; k < nm.size(); ++k)
          if (caption[pos + k] != nm[k]) {
            ok = false;
            break;
          }
        if (ok) {
          best = ci;
          best_len = nm.size();
        }
      }
      if (best == SIZE_MAX) {
        ++pos;
      } else {
        if (std::find(expect.begin(), expect.end(), best) == expect.end()) expect.push_back(best);
        pos += best_len;
      }
    }

    auto got = store.retrieve(caption);
    REQUIRE(got.size() == expect.size());
    for (size_t i = 0; i < got.size(); ++i)
      CHECK(store.card(got[i]).joined_name() == cards[expect[i]].joined_name());
  }
}
