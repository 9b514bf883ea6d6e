#include <regex>

#include "doctest.h"
#include "json.hpp"
#include "octo/profiler.hpp"

using namespace octo;
using namespace octo::prof;

namespace {

struct Fresh {
    Fresh() {
        Profiler::instance().reset();
        Profiler::instance().enable(true);
    }
    ~Fresh() { Profiler::instance().enable(false); }
};

void recurse(int depth) {
    Scope s("A");
    if (depth > 1) recurse(depth - 1);
}

std::size_t count_of(const std::string& s, const std::string& pat) {
    std::size_t n = 0;
    for (auto p = s.find(pat); p != std::string::npos; p = s.find(pat, p + 1)) ++n;
    return n;
}

}  // namespace

TEST_CASE("scope with no work produces a record") {
    Fresh f;
    { Scope s("idle"); }
    auto r = Profiler::instance().flush();
    REQUIRE(r.size() == 1);
    CHECK(r[0].stop_ns >= r[0].start_ns);
}

TEST_CASE("nested scopes extend the chain by one") {
    Fresh f;
    {
        Scope a("outer");
        Scope b("inner");
    }
    auto r = Profiler::instance().flush();
    REQUIRE(r.size() == 2);
    const auto& inner = r[0].type == Profiler::instance().intern_type("inner") ? r[0] : r[1];
    const auto& outer = &inner == &r[0] ? r[1] : r[0];
    CHECK(inner.parent == outer.chain);
    CHECK(Profiler::instance().chain(inner.chain).depth == Profiler::instance().chain(outer.chain).depth + 1);
}

TEST_CASE("unbalanced explicit close is dropped") {
    Fresh f;
    auto& p = Profiler::instance();
    const auto a = p.intern_type("a"), b = p.intern_type("b");
    p.close(a);
    CHECK(p.unbalanced() == 1);
    p.open(a);
    p.close(b);
    CHECK(p.unbalanced() == 2);
    CHECK(p.flush().empty());
    p.open(a);
    p.close(a);
    CHECK(p.flush().size() == 1);
}

TEST_CASE("linear chain tree and graph") {
    Fresh f;
    {
        Scope a("A");
        Scope b("B");
        Scope c("C");
    }
    auto r = Profiler::instance().flush();
    CHECK(task_tree(r).size() == 3);
    auto g = task_graph(r);
    CHECK(g.nodes.size() == 3);
    CHECK(g.edges.size() == 2);
}

TEST_CASE("recursion expands in the tree but not in the graph") {
    Fresh f;
    recurse(3);
    auto r = Profiler::instance().flush();
    CHECK(task_tree(r).size() == 3);
    auto g = task_graph(r);
    REQUIRE(g.nodes.size() == 1);
    REQUIRE(g.edges.size() == 1);
    CHECK(g.edges[0].from == g.edges[0].to);
    const auto tree = export_task_tree(r);
    const auto graph = export_task_graph(r);
    CHECK(count_of(tree, "label=") == 3);
    CHECK(count_of(graph, "fillcolor") == 1);
    CHECK(count_of(graph, "->") == 1);
}

TEST_CASE("chains propagate into spawned tasks") {
    Fresh f;
    rt::Scheduler s(2);
    {
        Scope a("parent");
        rt::async(s, [] { Scope b("child"); }).get();
    }
    auto r = Profiler::instance().flush();
    auto g = task_graph(r);
    REQUIRE(g.edges.size() == 1);
    CHECK(Profiler::instance().type_name(g.edges[0].from) == "parent");
}

TEST_CASE("counters") {
    Fresh f;
    for (int i = 0; i < 10; ++i) Profiler::instance().sample_counter("const", 3.5);
    auto c = Profiler::instance().counters();
    REQUIRE(c.size() == 10);
    for (auto& s : c) CHECK(s.value == 3.5);
    CHECK(process_cpu_seconds() >= 0);
    CHECK(process_rss_bytes() > 0);
    CounterSampler sampler(std::chrono::milliseconds(5));
    sampler.add("rss", process_rss_bytes);
    sampler.start();
    std::this_thread::sleep_for(std::chrono::milliseconds(60));
    sampler.stop();
    CHECK(Profiler::instance().counters().size() > 12);
}

TEST_CASE("scatter sampling") {
    std::size_t kept = 0;
    for (std::uint64_t i = 0; i < 1000000; ++i) kept += scatter_keep(i, 0.01);
    CHECK(kept >= 9000);
    CHECK(kept <= 11000);
    for (std::uint64_t i = 0; i < 1000; ++i) CHECK(scatter_keep(i, 1.0));
    CHECK_THROWS_AS(scatter_keep(1, 0.0), ConfigError);
}

TEST_CASE("trace export") {
    Fresh f;
    auto empty = nlohmann::json::parse(export_trace({}, {}));
    CHECK(empty["traceEvents"].size() == 0);

    rt::KernelRecord k1{"k", 2, 0, 100, 150, 200, 260};
    rt::KernelRecord k2{"k", 2, 0, 300, 300, 400, 450};
    auto epoch = Profiler::instance().epoch_ns();
    for (auto* k : {&k1, &k2}) {
        k->submit_ns += epoch;
        k->start_ns += epoch;
        k->compute_ns += epoch;
        k->stop_ns += epoch;
        k->ready_ns += epoch;
    }
    auto doc = nlohmann::json::parse(export_trace({}, {k1, k2}));
    std::map<int, std::vector<std::pair<double, double>>> by_tid;
    for (auto& e : doc["traceEvents"]) {
        if (e["ph"] == "M") continue;
        for (auto key : {"name", "ph", "ts", "dur", "pid", "tid"}) CHECK(e.contains(key));
        by_tid[e["tid"].get<int>()].emplace_back(e["ts"].get<double>(), e["dur"].get<double>());
    }
    CHECK(by_tid.count(lane_tid(2, 0)));
    CHECK(by_tid.count(lane_tid(2, 1)));
    CHECK(by_tid.count(lane_tid(2, 2)));
    for (auto& [tid, ev] : by_tid) {
        std::sort(ev.begin(), ev.end());
        for (std::size_t i = 1; i < ev.size(); ++i) CHECK(ev[i].first >= ev[i - 1].first + ev[i - 1].second);
    }
}
