#include <doctest.h>

#include <filesystem>
#include <random>
#include <thread>

#include "fixtures.hpp"
#include "somrs/error.hpp"
#include "somrs/registry.hpp"

using namespace somrs;
using registry::Registry;
using registry::ServiceKind;
using registry::ServiceRecord;

namespace {

ServiceRecord make(const std::string& id, const std::string& type, const std::string& pre, const std::string& eff,
                   ServiceKind kind = ServiceKind::Physical) {
  ServiceRecord r;
  r.service_id = id;
  r.type_name = type;
  r.kind = kind;
  r.precondition = entish::parse(pre);
  r.effect = entish::parse(eff);
  r.attributes = {5, 10, 60};
  r.manager_address = "sm-" + id;
  return r;
}

std::vector<std::string> ids(const std::vector<ServiceRecord>& v) {
  std::vector<std::string> out;
  for (const auto& r : v) out.push_back(r.service_id);
  return out;
}

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error");
  return Errc::IoError;
}

std::filesystem::path temp_file(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("somrs-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove(p);
  return p;
}

// Independent oracle for one-sided matching of relation atoms: every
// pattern variable maps to a single target term, objects must be equal.
bool oracle_match(const entish::RelationAtom& p, const entish::RelationAtom& t) {
  if (p.relation != t.relation || p.terms.size() != t.terms.size()) return false;
  std::map<std::string, std::string> bind;
  for (std::size_t i = 0; i < p.terms.size(); ++i) {
    const auto& pt = p.terms[i];
    const std::string target = entish::to_string(t.terms[i]);
    if (pt.is_variable()) {
      auto [it, fresh] = bind.emplace(pt.name, target);
      if (!fresh && it->second != target) return false;
    } else if (entish::to_string(pt) != target) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("discover matches by effect template and sorts by id") {
  auto doc = fixtures::lab();
  Registry reg(doc.ontology);
  reg.publish(registry::transfer_object_template("SM2", "sm2"));
  reg.publish(registry::transfer_object_template("SM1", "sm1"));
  reg.publish(registry::recognize_template("VIS1", "vis1"));

  auto found = reg.discover(entish::parse("Jar002 isOn Platform001"));
  CHECK(ids(found) == std::vector<std::string>{"SM1", "SM2"});
  CHECK(found[0].manager_address == "sm1");

  CHECK(ids(reg.discover(entish::parse("Jar002 isObservedBy Robot001"))) == std::vector<std::string>{"VIS1"});
  CHECK(reg.discover(entish::parse("Jar002.PositionX = 3")).empty());
  CHECK(ids(reg.discover(entish::parse("true"), std::nullopt, ServiceKind::Cognitive)) ==
        std::vector<std::string>{"VIS1"});
  CHECK(reg.discover(entish::parse("Jar002 isOn Platform001"), std::nullopt, ServiceKind::Software).empty());

  CHECK(code_of([&] { reg.discover(entish::parse("Jar002 isUnder Platform001")); }) == Errc::MalformedFormula);
}

TEST_CASE("publish validation") {
  auto doc = fixtures::lab();
  Registry reg(doc.ontology);
  reg.publish(registry::transfer_object_template("SM1", "sm1"));
  CHECK(code_of([&] { reg.publish(registry::transfer_object_template("SM1", "x")); }) == Errc::DuplicateServiceId);
  CHECK(code_of([&] { reg.publish(make("", "T", "true", "?A isOn ?B")); }) == Errc::MalformedTemplate);
  CHECK(code_of([&] { reg.publish(make("S", "T", "true", "?A flies ?B")); }) == Errc::MalformedTemplate);
  CHECK(code_of([&] { reg.publish(make("S", "T", "?A.Wings = 2", "?A isOn ?B")); }) == Errc::MalformedTemplate);
  auto neg = make("S", "T", "true", "?A isOn ?B");
  neg.attributes.cost = -1;
  CHECK(code_of([&] { reg.publish(neg); }) == Errc::MalformedTemplate);
  CHECK(reg.size() == 1);

  reg.unpublish("SM1");
  CHECK(reg.size() == 0);
  CHECK(code_of([&] { reg.unpublish("SM1"); }) == Errc::UnknownService);
  CHECK(reg.discover(entish::parse("Jar002 isOn Platform001")).empty());
}

TEST_CASE("record json roundtrip and malformed input") {
  auto r = make("S7", "Weld", "?A isOn ?B AND ?A.Size > 2", "?A isNear ?B OR ?B.Label = \"x y\"",
                ServiceKind::Software);
  CHECK(registry::record_from_json(registry::to_json(r)) == r);
  auto j = registry::to_json(r);
  j["effect"] = "?A isOn";
  CHECK(code_of([&] { registry::record_from_json(j); }) == Errc::MalformedTemplate);
  j = registry::to_json(r);
  j.erase("serviceType");
  CHECK(code_of([&] { registry::record_from_json(j); }) == Errc::MalformedTemplate);
  j = registry::to_json(r);
  j["kind"] = "magical";
  CHECK(code_of([&] { registry::record_from_json(j); }) == Errc::MalformedTemplate);
}

TEST_CASE("snapshot survives restart") {
  auto path = temp_file("registry.json");
  {
    Registry reg(std::nullopt, path);
    reg.publish(registry::transfer_object_template("SM1", "sm1"));
    reg.publish(registry::recognize_template("VIS1", "vis1"));
    reg.publish(registry::transfer_object_template("SM2", "sm2"));
    reg.unpublish("SM2");
  }
  Registry again(std::nullopt, path);
  CHECK(again.size() == 2);
  CHECK(again.find("SM1") == registry::transfer_object_template("SM1", "sm1"));
  CHECK(again.find("VIS1") == registry::recognize_template("VIS1", "vis1"));
  CHECK_FALSE(again.find("SM2"));
  std::filesystem::remove(path);
}

TEST_CASE("handle serves admin requests and reports errors") {
  Registry reg;
  auto req = [](frp::Body b) { return frp::make_envelope("tm", "registry", "s", "m", std::move(b)); };
  auto pub = reg.handle(req(frp::Publish{registry::to_json(registry::transfer_object_template("SM1", "sm1"))}));
  CHECK(std::get<frp::Response>(pub.body).ok);
  CHECK(pub.header.recipient == "tm");

  auto dup = std::get<frp::Response>(
      reg.handle(req(frp::Publish{registry::to_json(registry::transfer_object_template("SM1", "sm1"))})).body);
  CHECK_FALSE(dup.ok);
  CHECK(dup.error == "DuplicateServiceId");

  auto disc = std::get<frp::Response>(
      reg.handle(req(frp::Discover{entish::parse("A isOn B"), std::nullopt, std::nullopt})).body);
  REQUIRE(disc.payload["records"].size() == 1);
  CHECK(registry::record_from_json(disc.payload["records"][0]).service_id == "SM1");

  auto wrong = std::get<frp::Response>(reg.handle(req(frp::Stop{})).body);
  CHECK(wrong.error == "UnknownMessageType");
  auto gone = std::get<frp::Response>(reg.handle(req(frp::Unpublish{"nope"})).body);
  CHECK(gone.error == "UnknownService");
}

TEST_CASE("remote registry over TCP") {
  Registry reg;
  net::FrameServer server;
  server.start({"127.0.0.1", 0}, [&](const frp::Envelope& e, const std::shared_ptr<net::Connection>& c) {
    c->write(reg.handle(e));
  });
  registry::RemoteRegistry remote({"127.0.0.1", server.port()});
  CHECK(remote.publish(registry::transfer_object_template("SM1", "sm1")) == "SM1");
  CHECK(code_of([&] { remote.publish(registry::transfer_object_template("SM1", "sm1")); }) ==
        Errc::DuplicateServiceId);
  auto found = remote.discover(entish::parse("Jar002 isOn Platform001"));
  REQUIRE(found.size() == 1);
  CHECK(found[0] == registry::transfer_object_template("SM1", "sm1"));
  remote.unpublish("SM1");
  CHECK(reg.size() == 0);
  server.stop();
}

TEST_CASE("discover agrees with a brute-force matching oracle") {
  std::mt19937 rng(11);
  const std::vector<std::string> rels{"isOn", "isNear", "holds"};
  const std::vector<std::string> objs{"A", "B", "C"};
  const std::vector<std::string> vars{"X", "Y"};
  auto term = [&](bool allow_var) {
    if (allow_var && rng() % 2) return entish::Term::variable(vars[rng() % vars.size()]);
    return entish::Term::object(objs[rng() % objs.size()]);
  };
  auto atom = [&](bool allow_var) {
    return entish::RelationAtom{rels[rng() % rels.size()], {term(allow_var), term(allow_var)}};
  };
  for (int round = 0; round < 100; ++round) {
    Registry reg;
    std::vector<std::pair<std::string, std::vector<entish::RelationAtom>>> templates;
    const int n = 1 + rng() % 6;
    for (int i = 0; i < n; ++i) {
      std::vector<entish::RelationAtom> eff;
      std::vector<entish::Formula> parts;
      for (int k = 0, m = 1 + rng() % 2; k < m; ++k) {
        eff.push_back(atom(true));
        parts.push_back(entish::to_formula(eff.back()));
      }
      ServiceRecord r;
      r.service_id = "S" + std::to_string(i);
      r.type_name = "T";
      r.effect = entish::all_of(parts);
      reg.publish(r);
      templates.emplace_back(r.service_id, eff);
    }
    std::vector<entish::RelationAtom> goal;
    std::vector<entish::Formula> parts;
    for (int k = 0, m = 1 + rng() % 3; k < m; ++k) {
      goal.push_back(atom(false));
      parts.push_back(entish::to_formula(goal.back()));
    }
    std::vector<std::string> expected;
    for (const auto& [id, eff] : templates) {
      bool hit = false;
      for (const auto& p : eff)
        for (const auto& g : goal) hit = hit || oracle_match(p, g);
      if (hit) expected.push_back(id);
    }
    std::sort(expected.begin(), expected.end());
    CHECK(ids(reg.discover(entish::all_of(parts))) == expected);
  }
}

TEST_CASE("concurrent publish and discover stay consistent") {
  Registry reg;
  constexpr int kWriters = 4, kPerWriter = 50;
  std::atomic<bool> bad{false};
  std::vector<std::thread> threads;
  for (int w = 0; w < kWriters; ++w) {
    threads.emplace_back([&, w] {
      for (int i = 0; i < kPerWriter; ++i) {
        auto id = "W" + std::to_string(w) + "-" + std::to_string(i);
        reg.publish(registry::transfer_object_template(id, id));
        if (i % 3 == 0) reg.unpublish(id);
      }
    });
  }
  threads.emplace_back([&] {
    for (int i = 0; i < 200; ++i) {
      auto found = reg.discover(entish::parse("A isOn B"));
      if (!std::is_sorted(found.begin(), found.end(),
                          [](const auto& a, const auto& b) { return a.service_id < b.service_id; })) {
        bad = true;
      }
    }
  });
  for (auto& t : threads) t.join();
  CHECK_FALSE(bad);
  const int removed = kWriters * ((kPerWriter + 2) / 3);
  CHECK(reg.size() == static_cast<std::size_t>(kWriters * kPerWriter - removed));
}
