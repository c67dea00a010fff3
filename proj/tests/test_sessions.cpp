// SPDX-License-Identifier: Apache-2.0
#include <thread>

#include <gtest/gtest.h>

#include "toolshed/desk_dataset.hpp"
#include "toolshed/process.hpp"
#include "toolshed/sessions.hpp"

namespace toolshed {
namespace {

const std::filesystem::path kDesk = std::filesystem::path(TOOLSHED_DATA_DIR) / "desk";

const char* kSlowTurn = "<think>wait</think><tool_call>{\"name\":\"diag.sleep\",\"arguments\":{\"ms\":150}}</tool_call>";

struct Server {
  std::shared_ptr<const FixtureIndex> fixtures = std::make_shared<FixtureIndex>(index_fixtures(load_dataset(kDesk)));
  Registry reg;
  std::unique_ptr<SessionService> svc;
  std::thread thread;
  int port = 0;

  explicit Server(std::shared_ptr<rollout::Policy> policy, int t_max = 10) {
    register_all(reg, default_specs(make_mock_toolbox()), make_mock_toolbox(), fixtures, {});
    SessionServiceConfig cfg;
    cfg.rollout.t_max = t_max;
    svc = std::make_unique<SessionService>(reg, fixtures, std::move(policy), cfg);
    port = svc->bind("127.0.0.1", 0);
    thread = std::thread([this] { svc->serve(); });
    svc->wait_until_ready();
  }
  ~Server() {
    svc->stop();
    thread.join();
  }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(20, 0);
    return c;
  }

  std::string create(const std::string& fixture) {
    auto r = client().Post("/sessions", json{{"fixture_id", fixture}}.dump(), "application/json");
    EXPECT_TRUE(r && r->status == 200);
    return json::parse(r->body).at("session_id");
  }

  void say(const std::string& sid, const std::string& text) {
    auto r = client().Post("/sessions/" + sid + "/message", json{{"text", text}}.dump(), "application/json");
    ASSERT_TRUE(r);
    ASSERT_EQ(r->status, 200) << r->body;
  }

  std::vector<json> events(const std::string& sid, std::uint64_t since = 0) {
    auto r = client().Get("/sessions/" + sid + "/events?since=" + std::to_string(since));
    std::vector<json> out;
    if (!r || r->status != 200) return out;
    std::stringstream ss(r->body);
    std::string line;
    while (std::getline(ss, line))
      if (!line.empty()) out.push_back(json::parse(line));
    return out;
  }
};

std::shared_ptr<rollout::Policy> perfect() {
  return std::make_shared<rollout::ScriptedPolicy>(rollout::ScriptedPolicy::from_file(kDesk / "perfect.jsonl"));
}

std::vector<std::string> types(const std::vector<json>& ev) {
  std::vector<std::string> out;
  for (const auto& e : ev) out.push_back(e.at("type"));
  return out;
}

TEST(Sessions, HappyPathStreamsInOrderAndEndsWithAnswer) {
  Server s(perfect());
  const auto sid = s.create("desk-01");
  s.say(sid, "Is the white cup to the left of the yellow block?");
  const auto ev = s.events(sid);
  EXPECT_EQ(types(ev), (std::vector<std::string>{"user", "think", "tool_call", "tool_result", "think", "answer"}));
  for (std::size_t i = 0; i < ev.size(); ++i) EXPECT_EQ(ev[i].at("seq"), i + 1);
  EXPECT_EQ(ev.back().at("payload").at("text"), "yes");

  // Resume after seq 3: only the rest, once.
  const auto tail = s.events(sid, 3);
  ASSERT_EQ(tail.size(), 3u);
  EXPECT_EQ(tail[0].at("seq"), 4);
  EXPECT_TRUE(s.events(sid, 6).empty());

  // The tool image is downloadable by digest.
  const auto digest = ev[3].at("payload").at("image").at("sha256").get<std::string>();
  auto img = s.client().Get("/sessions/" + sid + "/attachments/" + digest);
  ASSERT_TRUE(img);
  EXPECT_EQ(img->status, 200);
  EXPECT_EQ(img->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(decode_png(std::span(reinterpret_cast<const std::uint8_t*>(img->body.data()), img->body.size())).width,
            desk::kWidth);
}

TEST(Sessions, FollowUpContinuesSeq) {
  Server s(perfect());
  const auto sid = s.create("desk-02");
  s.say(sid, "first");
  ASSERT_TRUE(s.svc->wait_idle(sid, std::chrono::seconds(10)));
  s.say(sid, "second");
  ASSERT_TRUE(s.svc->wait_idle(sid, std::chrono::seconds(10)));
  const auto ev = s.events(sid, 6);
  ASSERT_EQ(ev.size(), 6u);
  EXPECT_EQ(ev[0].at("seq"), 7);
  EXPECT_EQ(ev[0].at("payload").at("text"), "second");
}

TEST(Sessions, UnknownSessionIs404) {
  Server s(perfect());
  auto c = s.client();
  auto check = [](const httplib::Result& r) {
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 404);
    EXPECT_TRUE(json::parse(r->body).contains("error"));
  };
  check(c.Get("/sessions/nope/events"));
  check(c.Post("/sessions/nope/abort", "", "application/json"));
  check(c.Post("/sessions/nope/message", R"({"text":"x"})", "application/json"));
  auto bad = c.Post("/sessions", R"({"fixture_id":"missing"})", "application/json");
  EXPECT_EQ(bad->status, 404);
  auto none = c.Post("/sessions", "{}", "application/json");
  EXPECT_EQ(none->status, 400);
}

TEST(Sessions, AbortEndsStreamAndFreesRegistrySession) {
  std::map<rollout::ScriptedPolicy::Key, std::string> m;
  for (int t = 1; t <= 10; ++t) m[{"*", -1, t}] = kSlowTurn;
  Server s(std::make_shared<rollout::ScriptedPolicy>(m));
  const auto sid = s.create("desk-03");
  s.say(sid, "go");
  // Wait for the first tool call to start.
  for (int i = 0; i < 200 && s.svc->events_since(sid, 0).size() < 3; ++i)
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  auto r = s.client().Post("/sessions/" + sid + "/abort", "", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(json::parse(r->body).at("aborted"), true);
  const auto ev = s.events(sid);
  ASSERT_FALSE(ev.empty());
  EXPECT_EQ(ev.back().at("type"), "aborted");
  // At most the in-flight call finishes after the abort.
  const auto ty = types(ev);
  EXPECT_LE(std::count(ty.begin(), ty.end(), std::string("tool_call")), 2);
  ASSERT_TRUE(s.svc->wait_idle(sid, std::chrono::seconds(5)));
  EXPECT_EQ(s.reg.sessions().size(), 0u);
  EXPECT_EQ(json::parse(s.client().Post("/sessions/" + sid + "/abort", "", "application/json")->body).at("aborted"), false);
}

TEST(Sessions, BusyWhileRunning) {
  std::map<rollout::ScriptedPolicy::Key, std::string> m;
  for (int t = 1; t <= 3; ++t) m[{"*", -1, t}] = kSlowTurn;
  Server s(std::make_shared<rollout::ScriptedPolicy>(m), 3);
  const auto sid = s.create("desk-01");
  s.say(sid, "go");
  auto r = s.client().Post("/sessions/" + sid + "/message", R"({"text":"again"})", "application/json");
  EXPECT_EQ(r->status, 409);
  const auto ev = s.events(sid);
  EXPECT_EQ(ev.back().at("type"), "exhausted");
}

TEST(Sessions, ConcurrentSessionsAreIndependent) {
  Server s(perfect());
  const auto a = s.create("desk-01");
  const auto b = s.create("desk-02");
  s.say(a, "qa");
  s.say(b, "qb");
  auto ea = s.events(a);
  auto eb = s.events(b);
  EXPECT_EQ(ea.back().at("payload").at("text"), "yes");
  EXPECT_EQ(eb.back().at("payload").at("text"), "no");
  EXPECT_EQ(ea.front().at("payload").at("text"), "qa");
  EXPECT_EQ(eb.front().at("payload").at("text"), "qb");
}

TEST(Sessions, UploadedImageAndStats) {
  Server s(perfect());
  const auto png = encode_png(s.fixtures->at("desk-01")->image);
  auto r = s.client().Post("/sessions", json{{"image", base64_encode(png)}}.dump(), "application/json");
  ASSERT_EQ(r->status, 200) << r->body;
  const auto sid = json::parse(r->body).at("session_id").get<std::string>();
  s.say(sid, "hello");
  const auto ev = s.events(sid);
  // The perfect script has no entry for an ad-hoc session, so the policy fails.
  EXPECT_EQ(ev.back().at("type"), "error");

  auto st = s.client().Get("/stats");
  ASSERT_EQ(st->status, 200);
  EXPECT_TRUE(json::parse(st->body).at("tools").contains("point1"));
  auto fx = s.client().Get("/fixtures");
  EXPECT_EQ(json::parse(fx->body).size(), 12u);
}

TEST(Sessions, StreamOpenedBeforeMessageWaitsForIt) {
  Server s(perfect());
  const auto sid = s.create("desk-04");
  std::vector<json> ev;
  std::thread reader([&] { ev = s.events(sid); });
  std::this_thread::sleep_for(std::chrono::milliseconds(100));
  s.say(sid, "q");
  reader.join();
  ASSERT_FALSE(ev.empty());
  EXPECT_EQ(ev.back().at("type"), "answer");
}

}  // namespace
}  // namespace toolshed
