#include <doctest.h>

#include <barrier>
#include <filesystem>
#include <random>
#include <thread>

#include "fixtures.hpp"
#include "somrs/error.hpp"
#include "somrs/repository.hpp"
#include "somrs/world_io.hpp"

using namespace somrs;
using repository::Repository;
using repository::situation_to_delta;

namespace {

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error");
  return Errc::IoError;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("somrs-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  return p;
}

Repository lab_repo(std::filesystem::path dir = {}, std::size_t capacity = 10000) {
  auto doc = fixtures::lab();
  return Repository(doc.ontology, doc.map, std::move(dir), capacity);
}

ontology::MapDelta situation(const Repository& repo, const std::string& text) {
  return situation_to_delta(entish::parse(text), repo.snapshot(), repo.ontology());
}

// Random but valid situation over the lab world.
std::string random_situation(std::mt19937& rng) {
  static const std::vector<std::string> jars{"Jar001", "Jar002"};
  static const std::vector<std::string> supports{"Shelf03", "Platform001"};
  static const std::vector<std::string> colors{"Red", "Green", "Blue", "Clear"};
  std::vector<std::string> parts;
  const auto& jar = jars[rng() % 2];
  if (rng() % 2) parts.push_back(jar + " isOn " + supports[rng() % 2]);
  if (rng() % 2) parts.push_back(jar + ".PositionX = " + std::to_string(rng() % 25));
  if (rng() % 3 == 0) parts.push_back(jar + ".Color = " + colors[rng() % 4]);
  if (rng() % 4 == 0) parts.push_back("Robot001.PositionY = " + std::to_string(rng() % 5));
  if (parts.empty()) return "true";
  std::string out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out += " AND " + parts[i];
  return out;
}

}  // namespace

TEST_CASE("situation_to_delta supersedes relations and sets attributes") {
  auto repo = lab_repo();
  auto d = situation(repo, "Jar002 isOn Platform001 AND Jar002.PositionX = 20 AND Jar002.PositionZ > 1");
  REQUIRE(d.remove_relations.size() == 1);
  CHECK(d.remove_relations[0].relation == ontology::RelationInstance{"isOn", {"Jar002", "Shelf03"}});
  CHECK(d.remove_relations[0].owner == "Lab001");
  REQUIRE(d.add_relations.size() == 1);
  CHECK(d.add_relations[0].relation == ontology::RelationInstance{"isOn", {"Jar002", "Platform001"}});
  REQUIRE(d.set_attributes.size() == 1);
  CHECK(d.set_attributes[0].attribute == "PositionX");
  CHECK(d.set_attributes[0].prior == ontology::Value{2.0});

  repo.commit(d);
  auto m = repo.snapshot();
  CHECK(m.has_relation({"isOn", {"Jar002", "Platform001"}}));
  CHECK_FALSE(m.has_relation({"isOn", {"Jar002", "Shelf03"}}));
  CHECK(m.has_relation({"isOn", {"Jar001", "Shelf03"}}));
  CHECK(entish::holds(entish::parse("Jar002.PositionX = 20"), m, repo.ontology()));

  // Already true: nothing to do.
  CHECK(situation(repo, "Jar002 isOn Platform001 AND Jar002.PositionX = 20").empty());
  // Enumeration values given as text are coerced.
  auto c = situation(repo, "Jar002.Color = \"Blue\"");
  REQUIRE(c.set_attributes.size() == 1);
  CHECK(c.set_attributes[0].value == ontology::Value{ontology::Symbol{"Blue"}});

  CHECK(code_of([&] { situation(repo, "?X isOn Platform001"); }) == Errc::MalformedFormula);
  CHECK(code_of([&] { situation(repo, "Jar002 isOn Platform001 OR Jar002 isOn Shelf03"); }) ==
        Errc::MalformedFormula);
  CHECK(code_of([&] { situation(repo, "Jar009 isOn Platform001"); }) == Errc::UnknownObject);
}

TEST_CASE("commit versions, conflicts and rejected deltas") {
  auto repo = lab_repo();
  CHECK(repo.version() == 0);
  CHECK(repo.commit(situation(repo, "Jar001.PositionX = 3"), 0) == 1);
  CHECK(code_of([&] { repo.commit(situation(repo, "Jar001.PositionX = 4"), 0); }) == Errc::VersionConflict);
  CHECK(repo.version() == 1);

  ontology::MapDelta bad;
  bad.set_attributes.push_back({"Jar002", "Shape.Height", ontology::Value{9.0}, std::nullopt});
  CHECK(code_of([&] { repo.commit(bad); }) == Errc::TypeViolationAfterApply);
  ontology::MapDelta ghost;
  ghost.set_attributes.push_back({"Jar404", "PositionX", ontology::Value{1.0}, std::nullopt});
  CHECK(code_of([&] { repo.commit(ghost); }) == Errc::UnknownObject);
  CHECK(repo.version() == 1);
  CHECK(repo.log_since(0).size() == 1);
}

TEST_CASE("subscribe replays then streams without gaps") {
  auto repo = lab_repo({}, 5);
  for (int i = 0; i < 3; ++i) repo.commit(situation(repo, "Jar001.PositionX = " + std::to_string(10 + i)));
  std::vector<std::uint64_t> seen;
  auto id = repo.subscribe(1, [&](const repository::LoggedDelta& e) { seen.push_back(e.version); });
  CHECK(seen == std::vector<std::uint64_t>{2, 3});
  repo.commit(situation(repo, "Jar001.PositionX = 20"));
  CHECK(seen == std::vector<std::uint64_t>{2, 3, 4});
  repo.unsubscribe(id);
  for (int i = 0; i < 4; ++i) repo.commit(situation(repo, "Jar001.PositionX = " + std::to_string(i)));
  CHECK(seen.size() == 3);

  // Capacity 5 retains versions 4..8.
  CHECK(repo.version() == 8);
  CHECK(code_of([&] { repo.subscribe(2, [](const auto&) {}); }) == Errc::VersionTooOld);
  CHECK(code_of([&] { repo.subscribe(9, [](const auto&) {}); }) == Errc::VersionTooOld);
  CHECK(repo.log_since(3).size() == 5);
  CHECK(repo.log_since(8).empty());
}

TEST_CASE("log replay reproduces the map and inverse replay restores the base") {
  std::mt19937 rng(5);
  auto repo = lab_repo({}, 64);
  for (int i = 0; i < 200; ++i) {
    auto d = situation(repo, random_situation(rng));
    if (!d.empty()) repo.commit(d);
  }
  auto base = repo.base();
  auto replayed = base;
  const auto log = repo.log_since(base.version());
  for (const auto& e : log) {
    replayed = ontology::apply_delta(replayed, e.delta, repo.ontology());
    CHECK(replayed.version() == e.version);
  }
  auto final_map = repo.snapshot();
  CHECK(replayed.same_content(final_map));
  CHECK(replayed.version() == final_map.version());

  auto back = final_map;
  for (auto it = log.rbegin(); it != log.rend(); ++it) {
    back = ontology::apply_delta(back, ontology::invert(it->delta), repo.ontology());
  }
  CHECK(back.same_content(base));
}

TEST_CASE("racing commits on one version yield exactly one conflict") {
  for (int round = 0; round < 50; ++round) {
    auto repo = lab_repo();
    const auto d1 = situation(repo, "Jar001.PositionX = 5");
    const auto d2 = situation(repo, "Jar002.PositionX = 6");
    std::atomic<int> conflicts{0}, wins{0};
    std::barrier sync(2);
    auto racer = [&](const ontology::MapDelta& d) {
      sync.arrive_and_wait();
      try {
        repo.commit(d, 0);
        ++wins;
      } catch (const Error& e) {
        if (e.code() == Errc::VersionConflict) ++conflicts;
      }
    };
    std::thread a(racer, std::cref(d1)), b(racer, std::cref(d2));
    a.join();
    b.join();
    CHECK(wins == 1);
    CHECK(conflicts == 1);
    CHECK(repo.version() == 1);
  }
}

TEST_CASE("state directory survives restart and compaction") {
  auto dir = temp_dir("repo");
  std::mt19937 rng(9);
  ontology::WorldMap expected;
  {
    auto repo = lab_repo(dir, 4);
    for (int i = 0; i < 30; ++i) {
      auto d = situation(repo, random_situation(rng));
      if (!d.empty()) repo.commit(d);
    }
    expected = repo.snapshot();
  }
  auto again = lab_repo(dir, 4);
  auto got = again.snapshot();
  CHECK(got.same_content(expected));
  CHECK(got.version() == expected.version());
  auto replayed = again.base();
  for (const auto& e : again.log_since(replayed.version())) {
    replayed = ontology::apply_delta(replayed, e.delta, again.ontology());
  }
  CHECK(replayed.same_content(expected));
  again.commit(situation(again, "Jar002.PositionY = 4"));
  CHECK(again.version() == expected.version() + 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("handle and remote store") {
  auto repo = lab_repo();
  net::FrameServer server;
  server.start({"127.0.0.1", 0}, [&](const frp::Envelope& e, const std::shared_ptr<net::Connection>& c) {
    c->write(repo.handle(e));
  });
  repository::RemoteRepository remote({"127.0.0.1", server.port()}, repo.ontology());
  auto m = remote.snapshot();
  CHECK(m.same_content(repo.snapshot()));
  const auto d = situation_to_delta(entish::parse("Jar002 isOn Platform001"), m, repo.ontology());
  CHECK(remote.commit(d, 0) == 1);
  CHECK(code_of([&] { remote.commit(d, 0); }) == Errc::VersionConflict);
  CHECK(remote.commit(situation(repo, "Jar001.PositionX = 1")) == 2);

  auto sub = std::get<frp::Response>(
      repo.handle(frp::make_envelope("c", "repository", "s", "m", frp::Subscribe{1})).body);
  CHECK(sub.payload["version"] == 2);
  CHECK(sub.payload["events"].size() == 1);
  auto old = std::get<frp::Response>(repo.handle(frp::make_envelope("c", "repository", "s", "m", frp::Stop{})).body);
  CHECK(old.error == "UnknownMessageType");
  server.stop();
}
