#include "somrs/simworld.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "somrs/error.hpp"

namespace somrs::sim {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kEps = 1e-9;

double axis(const Vec3& v, int a) { return a == 0 ? v.x : a == 1 ? v.y : v.z; }
void set_axis(Vec3& v, int a, double x) { (a == 0 ? v.x : a == 1 ? v.y : v.z) = x; }

double distance(const Vec3& a, const Vec3& b) { return std::hypot(a.x - b.x, a.y - b.y, a.z - b.z); }

std::optional<double> number(const ontology::WorldObject& o, const std::string& path) {
  auto it = o.attributes.find(path);
  if (it == o.attributes.end()) return std::nullopt;
  if (const auto* d = std::get_if<double>(&it->second)) return *d;
  return std::nullopt;
}

std::vector<std::string> split_caps(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text + ",") {
    if (c == ',' || c == ' ' || c == ';') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

entish::Formula position_formula(const std::string& id, const Vec3& p) {
  std::vector<entish::Formula> parts;
  const char* names[] = {"PositionX", "PositionY", "PositionZ"};
  for (int a = 0; a < 3; ++a) {
    entish::AttributeAtom at;
    at.object = entish::Term::object(id);
    at.path = names[a];
    at.cmp = entish::Comparator::Eq;
    at.value = axis(p, a);
    parts.emplace_back(at);
  }
  return entish::all_of(parts);
}

// Entry distance along the segment [0, len] from p in unit direction u.
std::optional<double> entry_along(const Region& r, const Vec3& p, const Vec3& u, double len) {
  double lo = 0, hi = len;
  for (int a = 0; a < 3; ++a) {
    const double pa = axis(p, a), ua = axis(u, a);
    const double mn = r.min[a].value_or(-kInf), mx = r.max[a].value_or(kInf);
    if (std::fabs(ua) < 1e-15) {
      if (pa < mn - kEps || pa > mx + kEps) return std::nullopt;
      continue;
    }
    double s1 = (mn - pa) / ua, s2 = (mx - pa) / ua;
    if (s1 > s2) std::swap(s1, s2);
    lo = std::max(lo, s1);
    hi = std::min(hi, s2);
  }
  if (lo > hi + kEps) return std::nullopt;
  return lo;
}

}  // namespace

std::string_view to_string(FaultKind k) { return k == FaultKind::DriveFailure ? "driveFailure" : "commLoss"; }

std::string_view to_string(WorldEvent::Kind k) {
  switch (k) {
    case WorldEvent::Kind::Arrival:
      return "arrival";
    case WorldEvent::Kind::Grip:
      return "grip";
    case WorldEvent::Kind::Release:
      return "release";
    case WorldEvent::Kind::Place:
      return "place";
    case WorldEvent::Kind::Fault:
      return "fault";
    case WorldEvent::Kind::Observe:
      return "observe";
  }
  return "?";
}

bool Region::contains(const Vec3& p) const {
  for (int a = 0; a < 3; ++a) {
    if (min[a] && axis(p, a) < *min[a] - kEps) return false;
    if (max[a] && axis(p, a) > *max[a] + kEps) return false;
  }
  return true;
}

SimWorld SimWorld::load(const ontology::WorldMap& map, const ontology::Ontology& ont, std::vector<Fault> faults) {
  auto report = ontology::validate_map(map, ont);
  if (!report.empty()) {
    throw Error(Errc::InvalidWorld, std::string(ontology::to_string(report.front().kind)) + " on " +
                                        report.front().object_id + ": " + report.front().detail);
  }
  SimWorld w;
  w.ont_ = ont;
  w.map_ = map;
  for (const auto& id : map.ids()) {
    const auto& obj = map.at(id);
    auto caps = obj.attributes.find("Capabilities");
    if (caps == obj.attributes.end()) continue;
    Robot r;
    r.id = id;
    auto x = number(obj, "PositionX"), y = number(obj, "PositionY"), z = number(obj, "PositionZ");
    auto speed = number(obj, "Speed");
    if (!x || !y || !z) throw Error(Errc::InvalidWorld, "robot " + id + " has no position");
    if (!speed || *speed <= 0) throw Error(Errc::InvalidWorld, "robot " + id + " needs a positive Speed");
    r.pos = {*x, *y, *z};
    r.speed = *speed;
    r.gripper = number(obj, "GripperRange").value_or(0);
    r.caps = split_caps(std::visit(
        [](const auto& v) -> std::string {
          using V = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<V, double>) {
            return "";
          } else if constexpr (std::is_same_v<V, std::string>) {
            return v;
          } else {
            return v.name;
          }
        },
        caps->second));
    w.robots_.emplace(id, std::move(r));
  }
  for (auto& f : faults) {
    if (!w.robots_.contains(f.robot)) throw Error(Errc::InvalidWorld, "fault targets unknown robot " + f.robot);
    w.faults_.push_back({std::move(f), false});
  }
  return w;
}

std::vector<std::string> SimWorld::robots() const {
  std::vector<std::string> out;
  for (const auto& [id, r] : robots_) out.push_back(id);
  return out;
}

const SimWorld::Robot* SimWorld::find_robot(const std::string& id) const {
  auto it = robots_.find(id);
  return it == robots_.end() ? nullptr : &it->second;
}

SimWorld::Robot& SimWorld::robot_ref(const std::string& id) {
  auto it = robots_.find(id);
  if (it == robots_.end()) throw Error(Errc::MissingCapability, "no robot " + id);
  return it->second;
}

RobotView SimWorld::robot(const std::string& id) const {
  const Robot* r = find_robot(id);
  if (r == nullptr) throw Error(Errc::UnknownObject, id);
  return {r->id, r->pos, r->speed, r->gripper, r->caps, r->carried, r->drive_ok, r->comm_ok, r->phase != Phase::Idle};
}

bool SimWorld::has_pose(const std::string& id) const {
  const auto* o = map_.find(id);
  return o != nullptr && number(*o, "PositionX") && number(*o, "PositionY") && number(*o, "PositionZ");
}

Vec3 SimWorld::position(const std::string& id) const {
  if (const Robot* r = find_robot(id)) return r->pos;
  for (const auto& [rid, r] : robots_) {
    if (r.carried == id) return r.pos;
  }
  if (!has_pose(id)) throw Error(Errc::ObjectMissing, id);
  const auto& o = map_.at(id);
  return {*number(o, "PositionX"), *number(o, "PositionY"), *number(o, "PositionZ")};
}

void SimWorld::set_pose(const std::string& id, const Vec3& p) {
  auto* o = map_.find_mutable(id);
  if (o == nullptr) return;
  o->attributes["PositionX"] = p.x;
  o->attributes["PositionY"] = p.y;
  o->attributes["PositionZ"] = p.z;
}

ontology::WorldMap SimWorld::state() const {
  ontology::WorldMap out = map_;
  for (const auto& [id, r] : robots_) {
    auto set = [&](const std::string& oid) {
      auto* o = out.find_mutable(oid);
      o->attributes["PositionX"] = r.pos.x;
      o->attributes["PositionY"] = r.pos.y;
      o->attributes["PositionZ"] = r.pos.z;
    };
    set(id);
    if (r.carried) set(*r.carried);
  }
  return out;
}

entish::Formula SimWorld::describe(const std::string& object) const {
  std::vector<entish::Formula> parts{position_formula(object, position(object))};
  for (const auto& [owner, inst] : map_.relations()) {
    if (inst.name != "isOn" || inst.args.empty() || inst.args.front() != object) continue;
    entish::RelationAtom r{inst.name, {}};
    for (const auto& a : inst.args) r.terms.push_back(entish::Term::object(a));
    parts.emplace_back(r);
  }
  return entish::all_of(parts);
}

void SimWorld::require_capability(const Robot& r, const std::string& cap) const {
  if (std::find(r.caps.begin(), r.caps.end(), cap) == r.caps.end()) {
    throw Error(Errc::MissingCapability, r.id + " cannot " + cap);
  }
}

double SimWorld::arrival_time(const Robot& r) const {
  if (!r.waypoint || !r.drive_ok || r.phase == Phase::Idle) return kInf;
  return now_ + distance(r.pos, *r.waypoint) / r.speed;
}

std::optional<double> SimWorld::fault_time(const PendingFault& f) const {
  if (f.fired) return std::nullopt;
  const Robot& r = robots_.at(f.fault.robot);
  const auto& t = f.fault.trigger;
  if (t.at_time) return std::max(*t.at_time, now_);
  if (t.while_carrying && !r.carried) return std::nullopt;
  if (!t.region) return now_;
  if (t.region->contains(r.pos)) return now_;
  if (!r.waypoint || !r.drive_ok || r.phase == Phase::Idle) return std::nullopt;
  const double len = distance(r.pos, *r.waypoint);
  if (len < kEps) return std::nullopt;
  Vec3 u{(r.waypoint->x - r.pos.x) / len, (r.waypoint->y - r.pos.y) / len, (r.waypoint->z - r.pos.z) / len};
  auto s = entry_along(*t.region, r.pos, u, len);
  if (!s) return std::nullopt;
  return now_ + *s / r.speed;
}

std::optional<double> SimWorld::next_event_time() const {
  double best = kInf;
  for (const auto& [id, r] : robots_) best = std::min(best, arrival_time(r));
  for (const auto& f : faults_) {
    if (auto t = fault_time(f)) best = std::min(best, *t);
  }
  if (best == kInf) return std::nullopt;
  return best;
}

void SimWorld::move_all(double t) {
  const double dt = t - now_;
  if (dt <= 0) return;
  for (auto& [id, r] : robots_) {
    if (!r.waypoint || !r.drive_ok || r.phase == Phase::Idle) continue;
    const double len = distance(r.pos, *r.waypoint);
    const double d = r.speed * dt;
    if (d >= len - 1e-12) {
      r.pos = *r.waypoint;
    } else {
      const double k = d / len;
      r.pos = {r.pos.x + (r.waypoint->x - r.pos.x) * k, r.pos.y + (r.waypoint->y - r.pos.y) * k,
               r.pos.z + (r.waypoint->z - r.pos.z) * k};
    }
  }
}

void SimWorld::emit(std::vector<WorldEvent>& ev, WorldEvent e) {
  if (listener_) listener_(e);
  ev.push_back(std::move(e));
}

void SimWorld::release(Robot& r, std::vector<WorldEvent>& ev) {
  if (!r.carried) return;
  const std::string obj = *r.carried;
  r.carried.reset();
  set_pose(obj, r.pos);
  emit(ev, {now_, WorldEvent::Kind::Release, r.id, obj, ""});
}

void SimWorld::finish(Robot& r, Outcome o) {
  auto done = std::move(r.done);
  r.done = nullptr;
  r.phase = Phase::Idle;
  r.waypoint.reset();
  // A robot out of contact cannot report back.
  if (!done || !r.comm_ok) return;
  auto call = [done = std::move(done), o = std::move(o)] { done(o); };
  if (in_advance_ || loop_ == nullptr) {
    deferred_.push_back(std::move(call));
  } else {
    loop_->post(std::move(call));
  }
}

void SimWorld::fire(PendingFault& f, std::vector<WorldEvent>& ev) {
  f.fired = true;
  Robot& r = robots_.at(f.fault.robot);
  if (f.fault.trigger.region) {
    for (int a = 0; a < 3; ++a) {
      for (const auto& bound : {f.fault.trigger.region->min[a], f.fault.trigger.region->max[a]}) {
        if (bound && std::fabs(axis(r.pos, a) - *bound) < 1e-6) set_axis(r.pos, a, *bound);
      }
    }
  }
  emit(ev, {now_, WorldEvent::Kind::Fault, r.id, r.carried.value_or(""), std::string(to_string(f.fault.kind))});
  const std::string subject = r.object;
  const bool active = r.phase != Phase::Idle;
  if (f.fault.kind == FaultKind::DriveFailure) {
    r.drive_ok = false;
    release(r, ev);
    if (active) finish(r, {false, describe(subject), "drive failure"});
  } else {
    r.comm_ok = false;
    release(r, ev);
    if (active) finish(r, {false, describe(subject), "communication lost"});
  }
}

void SimWorld::arrive(Robot& r, std::vector<WorldEvent>& ev) {
  r.pos = *r.waypoint;
  r.waypoint.reset();
  emit(ev, {now_, WorldEvent::Kind::Arrival, r.id, r.object, ""});
  switch (r.phase) {
    case Phase::Approach: {
      const Vec3 o = position(r.object);
      const bool held = std::any_of(robots_.begin(), robots_.end(),
                                    [&](const auto& kv) { return kv.second.carried == r.object; });
      if (held || std::fabs(o.z - r.pos.z) > r.gripper + kEps) {
        finish(r, {false, describe(r.object), "OutOfGripperRange"});
        return;
      }
      r.carried = r.object;
      for (const auto& [owner, inst] : map_.relations()) {
        if (inst.name == "isOn" && inst.args.front() == r.object) map_.find_mutable(owner)->relations.erase(inst);
      }
      map_.reindex();
      emit(ev, {now_, WorldEvent::Kind::Grip, r.id, r.object, ""});
      r.phase = Phase::Carry;
      const Vec3 dest = r.destination.empty() ? r.target : position(r.destination);
      r.waypoint = Vec3{dest.x, dest.y, r.pos.z};
      return;
    }
    case Phase::Carry: {
      Vec3 place = r.target;
      if (!r.destination.empty()) {
        const Vec3 d = position(r.destination);
        const double height = number(map_.at(r.destination), "Height").value_or(0);
        place = {d.x, d.y, d.z + height};
      }
      if (std::fabs(place.z - r.pos.z) > r.gripper + kEps) {
        release(r, ev);
        finish(r, {false, describe(r.object), "OutOfGripperRange"});
        return;
      }
      r.carried.reset();
      set_pose(r.object, place);
      if (!r.destination.empty()) {
        map_.root_mutable().relations.insert({"isOn", {r.object, r.destination}});
        map_.reindex();
      }
      emit(ev, {now_, WorldEvent::Kind::Place, r.id, r.object, r.destination});
      finish(r, {true, entish::all_of({describe(r.object), position_formula(r.id, r.pos)}), ""});
      return;
    }
    case Phase::Travel: {
      std::vector<entish::Formula> parts;
      for (const auto& id : entish::object_ids(r.query)) {
        if (find_robot(id) == nullptr && has_pose(id)) parts.push_back(describe(id));
      }
      emit(ev, {now_, WorldEvent::Kind::Observe, r.id, r.object, ""});
      finish(r, {true, entish::all_of(parts), ""});
      return;
    }
    default:
      r.phase = Phase::Idle;
  }
}

std::vector<WorldEvent> SimWorld::advance_to(double t) {
  std::vector<WorldEvent> ev;
  in_advance_ = true;
  for (int guard = 0; guard < 100000; ++guard) {
    double te = kInf;
    for (const auto& [id, r] : robots_) te = std::min(te, arrival_time(r));
    for (const auto& f : faults_) {
      if (auto ft = fault_time(f)) te = std::min(te, *ft);
    }
    if (te > t + 1e-12) {
      move_all(t);
      now_ = std::max(now_, t);
      break;
    }
    move_all(te);
    now_ = std::max(now_, te);
    bool fired = false;
    for (auto& f : faults_) {
      auto ft = fault_time(f);
      if (ft && *ft <= now_ + 1e-12) {
        fire(f, ev);
        fired = true;
      }
    }
    if (fired) continue;
    for (auto& [id, r] : robots_) {
      if (arrival_time(r) <= now_ + 1e-12) arrive(r, ev);
    }
  }
  in_advance_ = false;
  auto pending = std::move(deferred_);
  deferred_.clear();
  for (auto& fn : pending) fn();
  return ev;
}

std::vector<WorldEvent> SimWorld::step(double dt) {
  if (dt <= 0) throw Error(Errc::BadConfig, "step needs dt > 0");
  return advance_to(now_ + dt);
}

void SimWorld::attach(net::EventLoop& loop) {
  loop_ = &loop;
  now_ = std::max(now_, loop.now());
  reschedule();
}

void SimWorld::catch_up() {
  if (loop_ != nullptr && !in_advance_) advance_to(loop_->now());
}

void SimWorld::reschedule() {
  if (loop_ == nullptr) return;
  if (timer_ != 0) loop_->cancel(timer_);
  timer_ = 0;
  auto next = next_event_time();
  if (!next) return;
  timer_ = loop_->schedule(std::max(0.0, *next - loop_->now()), [this] {
    timer_ = 0;
    advance_to(loop_->now());
    reschedule();
  });
}

void SimWorld::execute_transfer(const std::string& robot, const std::string& object, const std::string& destination,
                                OutcomeHandler done) {
  catch_up();
  Robot& r = robot_ref(robot);
  require_capability(r, "TransferObject");
  if (!has_pose(object) && !std::any_of(robots_.begin(), robots_.end(),
                                        [&](const auto& kv) { return kv.second.carried == object; })) {
    throw Error(Errc::ObjectMissing, object);
  }
  if (!has_pose(destination)) throw Error(Errc::ObjectMissing, destination);
  r.done = std::move(done);
  r.object = object;
  r.destination = destination;
  if (r.phase != Phase::Idle && r.phase != Phase::Approach && r.phase != Phase::Carry) {
    finish(r, {false, describe(object), "robot busy"});
    return;
  }
  if (!r.drive_ok) {
    finish(r, {false, describe(object), "drive failure"});
    return;
  }
  const Vec3 o = position(object);
  if (r.carried == object) {
    r.phase = Phase::Carry;
    const Vec3 d = position(destination);
    r.waypoint = Vec3{d.x, d.y, r.pos.z};
  } else {
    r.phase = Phase::Approach;
    r.waypoint = Vec3{o.x, o.y, r.pos.z};
  }
  reschedule();
}

void SimWorld::execute_move_to(const std::string& robot, const std::string& object, const Vec3& target,
                               OutcomeHandler done) {
  catch_up();
  Robot& r = robot_ref(robot);
  require_capability(r, "TransferObject");
  const Vec3 o = position(object);
  r.done = std::move(done);
  r.object = object;
  r.destination.clear();
  r.target = target;
  if (!r.drive_ok) {
    finish(r, {false, describe(object), "drive failure"});
    return;
  }
  r.phase = r.carried == object ? Phase::Carry : Phase::Approach;
  r.waypoint = r.phase == Phase::Carry ? Vec3{target.x, target.y, r.pos.z} : Vec3{o.x, o.y, r.pos.z};
  reschedule();
}

void SimWorld::execute_recognize(const std::string& robot, const entish::Formula& query, OutcomeHandler done) {
  catch_up();
  Robot& r = robot_ref(robot);
  require_capability(r, "Recognize");
  std::vector<std::string> subjects;
  for (const auto& id : entish::object_ids(query)) {
    if (!map_.contains(id)) throw Error(Errc::UnknownObjectInQuery, id);
    if (find_robot(id) == nullptr && has_pose(id)) subjects.push_back(id);
  }
  if (subjects.empty()) throw Error(Errc::UnknownObjectInQuery, "query names no physical object");
  r.done = std::move(done);
  r.object = subjects.front();
  r.query = query;
  if (!r.drive_ok) {
    finish(r, {false, entish::True{}, "drive failure"});
    return;
  }
  const Vec3 o = position(subjects.front());
  r.phase = Phase::Travel;
  r.waypoint = Vec3{o.x, o.y, r.pos.z};
  reschedule();
}

void SimWorld::halt(const std::string& robot) {
  catch_up();
  Robot& r = robot_ref(robot);
  std::vector<WorldEvent> ev;
  release(r, ev);
  r.done = nullptr;
  r.phase = Phase::Idle;
  r.waypoint.reset();
  reschedule();
}

// ---------------------------------------------------------------------------
// Service Manager
// ---------------------------------------------------------------------------

registry::ServiceRecord record_for(const ServiceConfig& cfg) {
  const std::string address = cfg.address.empty() ? cfg.service_id : cfg.address;
  registry::ServiceRecord r;
  if (cfg.type_name == "TransferObject") {
    r = registry::transfer_object_template(cfg.service_id, address);
  } else if (cfg.type_name == "Recognize") {
    r = registry::recognize_template(cfg.service_id, address);
  } else {
    throw Error(Errc::BadConfig, "unsupported service type " + cfg.type_name);
  }
  r.attributes = {cfg.operation_range, cfg.price, cfg.max_time};
  return r;
}

ServiceManager::ServiceManager(ServiceConfig cfg, SimWorld& world, net::Transport& transport)
    : cfg_(std::move(cfg)), world_(world), transport_(transport), ids_(cfg_.address.empty() ? cfg_.service_id : cfg_.address) {
  if (cfg_.address.empty()) cfg_.address = cfg_.service_id;
  record_for(cfg_);
  world_.robot(cfg_.robot);
  transport_.bind(cfg_.address, [this](const frp::Envelope& e) { on_message(e); });
}

ServiceManager::~ServiceManager() { transport_.unbind(cfg_.address); }

registry::ServiceRecord ServiceManager::record() const { return record_for(cfg_); }

void ServiceManager::reply(const frp::Envelope& to, frp::Body body) {
  auto env = frp::make_envelope(cfg_.address, to.header.sender, to.header.session_id, ids_.next(), std::move(body));
  auto& s = sessions_[to.header.session_id];
  if (!s.on_send(env).ok()) return;
  transport_.send(env);
}

std::optional<std::string> ServiceManager::infeasible(const Context& c) const {
  const auto r = world_.robot(cfg_.robot);
  if (std::find(r.capabilities.begin(), r.capabilities.end(), cfg_.type_name) == r.capabilities.end()) {
    return "robot lacks " + cfg_.type_name;
  }
  if (!r.comm_ok) return "robot unreachable";
  if (!r.drive_ok) return "drive out of order";
  if (r.busy) return "robot busy";
  Vec3 o;
  try {
    o = world_.position(c.object);
  } catch (const Error&) {
    return "unknown object " + c.object;
  }
  if (cfg_.type_name == "TransferObject") {
    try {
      world_.position(c.destination);
    } catch (const Error&) {
      return "unknown destination " + c.destination;
    }
    if (r.carried != c.object && std::fabs(o.z - r.position.z) > r.gripper_range + kEps) return "OutOfGripperRange";
  }
  if (cfg_.operation_range > 0 && std::hypot(o.x - r.position.x, o.y - r.position.y) > cfg_.operation_range) {
    return "object outside operation range";
  }
  return std::nullopt;
}

void ServiceManager::on_message(const frp::Envelope& e) {
  auto [it, fresh] = sessions_.try_emplace(e.header.session_id, e.header.session_id, frp::Role::Participant);
  auto& session = it->second;
  const auto out = session.on_receive(e);
  if (out.kind == frp::Outcome::Kind::ProtocolViolation) {
    ++violations_;
    return;
  }
  if (out.kind == frp::Outcome::Kind::Duplicate) return;
  const std::string& sid = e.header.session_id;

  if (const auto* a = std::get_if<frp::Arrange>(&e.body)) {
    Context c;
    c.coordinator = e.header.sender;
    c.precondition = a->precondition;
    c.effect = a->effect;
    for (const auto& atom : entish::atoms(a->effect)) {
      const auto* r = std::get_if<entish::RelationAtom>(&atom);
      if (r == nullptr || r->terms.empty() || r->terms[0].is_variable()) continue;
      c.object = r->terms[0].name;
      if (r->relation == "isOn" && r->terms.size() == 2) c.destination = r->terms[1].name;
      break;
    }
    contexts_[sid] = c;
    if (cfg_.refuse_all) return reply(e, frp::Refuse{"refusing all requests"});
    if (c.object.empty() || (cfg_.type_name == "TransferObject" && c.destination.empty())) {
      return reply(e, frp::Refuse{"unsupported effect " + entish::print(a->effect)});
    }
    if (auto why = infeasible(c)) return reply(e, frp::Refuse{*why});
    // One robot, one commitment at a time.
    for (const auto& [other, s] : sessions_) {
      using S = frp::SessionState;
      const auto st = s.state();
      if (other != sid && (st == S::Quoted || st == S::Arranged || st == S::Executing || st == S::Compensating)) {
        return reply(e, frp::Refuse{"committed to session " + other});
      }
    }
    entish::Binding self;
    for (const auto& v : entish::variables(a->effect)) self[v] = entish::Term::object(cfg_.robot);
    return reply(e, frp::Terms{entish::substitute(a->effect, self), cfg_.price, cfg_.max_time});
  }
  if (std::holds_alternative<frp::Execute>(e.body)) {
    const auto env = e;
    const std::uint64_t epoch = ++epoch_;
    contexts_[sid].epoch = epoch;
    const Context& c = contexts_[sid];
    auto handler = [this, env, epoch](const Outcome& o) {
      auto& ctx = contexts_[env.header.session_id];
      if (ctx.epoch != epoch) return;
      if (sessions_[env.header.session_id].state() != frp::SessionState::Executing) return;
      if (o.ok) {
        entish::Formula result = o.situation;
        if (cfg_.type_name == "Recognize") {
          entish::Binding self;
          for (const auto& v : entish::variables(ctx.effect)) self[v] = entish::Term::object(cfg_.robot);
          result = entish::all_of({o.situation, entish::substitute(ctx.effect, self)});
        }
        reply(env, frp::Completed{result});
      } else {
        reply(env, frp::Failed{o.situation, o.reason});
      }
    };
    try {
      if (cfg_.type_name == "Recognize") {
        world_.execute_recognize(cfg_.robot, c.effect, handler);
      } else {
        world_.execute_transfer(cfg_.robot, c.object, c.destination, handler);
      }
    } catch (const Error& err) {
      reply(e, frp::Failed{std::nullopt, err.what()});
    }
    return;
  }
  if (std::holds_alternative<frp::Stop>(e.body)) {
    contexts_[sid].epoch = ++epoch_;
    if (world_.robot(cfg_.robot).busy) world_.halt(cfg_.robot);
    return;
  }
  if (const auto* comp = std::get_if<frp::Compensate>(&e.body)) {
    compensate(sid, comp->target_situation);
    // Compensation replies are sent from the behavior callback.
    return;
  }
}

void ServiceManager::compensate(const std::string& session, const frp::Formula& target) {
  auto& c = contexts_[session];
  const std::uint64_t epoch = ++epoch_;
  c.epoch = epoch;
  const auto coordinator = c.coordinator;
  auto respond = [this, session, coordinator](frp::Body body) {
    frp::Envelope to = frp::make_envelope(coordinator, cfg_.address, session, "", frp::End{});
    reply(to, std::move(body));
  };
  auto handler = [this, session, epoch, respond](const Outcome& o) {
    if (contexts_[session].epoch != epoch) return;
    if (sessions_[session].state() != frp::SessionState::Compensating) return;
    if (o.ok) {
      respond(frp::Compensated{o.situation});
    } else {
      respond(frp::Failed{o.situation, o.reason});
    }
  };
  std::string support;
  std::optional<Vec3> pos;
  Vec3 p;
  int seen = 0;
  for (const auto& atom : entish::atoms(target)) {
    if (const auto* r = std::get_if<entish::RelationAtom>(&atom)) {
      if (r->relation == "isOn" && r->terms.size() == 2 && r->terms[0].name == c.object) support = r->terms[1].name;
    } else {
      const auto& a = std::get<entish::AttributeAtom>(atom);
      const auto* v = std::get_if<double>(&a.value);
      if (a.object.name != c.object || a.cmp != entish::Comparator::Eq || v == nullptr) continue;
      if (a.path == "PositionX") p.x = *v, seen |= 1;
      if (a.path == "PositionY") p.y = *v, seen |= 2;
      if (a.path == "PositionZ") p.z = *v, seen |= 4;
    }
  }
  if (seen == 7) pos = p;
  try {
    if (!support.empty()) {
      world_.execute_transfer(cfg_.robot, c.object, support, handler);
    } else if (pos) {
      world_.execute_move_to(cfg_.robot, c.object, *pos, handler);
    } else {
      // Nothing physical to undo.
      respond(frp::Compensated{entish::True{}});
    }
  } catch (const Error& err) {
    respond(frp::Failed{std::nullopt, err.what()});
  }
}

}  // namespace somrs::sim
