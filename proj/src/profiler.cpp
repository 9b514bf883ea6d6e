#include "octo/profiler.hpp"

#include <sys/resource.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace octo::prof {

struct Profiler::ThreadBuffer {
    struct Open {
        TypeId type;
        ChainId chain, parent;
        std::int64_t start;
        rt::Context saved;
    };
    std::vector<TaskRecord> records;
    std::vector<Open> stack;
    std::unordered_map<std::uint64_t, ChainId> cache;
};

namespace {
thread_local Profiler::ThreadBuffer* tl_buffer = nullptr;
thread_local std::uint32_t tl_generation = ~0u;

std::uint64_t chain_key(ChainId parent, TypeId type) { return (std::uint64_t{parent} << 32) | type; }
}  // namespace

Profiler& Profiler::instance() {
    static Profiler p;
    return p;
}

Profiler::Profiler() {
    chains_.push_back(ChainEntry{root_chain, 0, 0});
    types_.push_back("<root>");
    epoch_ns_ = rt::now_ns();
}

void Profiler::enable(bool on) { enabled_ = on; }

void Profiler::reset() {
    std::lock_guard l(m_);
    for (auto& b : buffers_) {
        b->records.clear();
        b->stack.clear();
        b->cache.clear();
    }
    chains_.assign(1, ChainEntry{root_chain, 0, 0});
    chain_index_.clear();
    samples_.clear();
    unbalanced_ = 0;
    generation_.fetch_add(1);
    epoch_ns_ = rt::now_ns();
}

Profiler::ThreadBuffer& Profiler::local() {
    if (tl_buffer == nullptr) {
        std::lock_guard l(m_);
        buffers_.push_back(std::make_unique<ThreadBuffer>());
        tl_buffer = buffers_.back().get();
    }
    const auto gen = generation_.load(std::memory_order_relaxed);
    if (tl_generation != gen) {
        tl_buffer->cache.clear();
        tl_generation = gen;
    }
    return *tl_buffer;
}

TypeId Profiler::intern_type(std::string_view name) {
    std::lock_guard l(m_);
    std::string key(name);
    auto it = type_index_.find(key);
    if (it != type_index_.end()) {
        return it->second;
    }
    const auto id = static_cast<TypeId>(types_.size());
    types_.push_back(key);
    type_index_.emplace(std::move(key), id);
    return id;
}

std::string Profiler::type_name(TypeId t) const {
    std::lock_guard l(m_);
    return t < types_.size() ? types_[t] : "<unknown>";
}

std::vector<std::string> Profiler::type_names() const {
    std::lock_guard l(m_);
    return types_;
}

ChainId Profiler::intern_chain(ChainId parent, TypeId type) {
    auto& buf = local();
    const auto key = chain_key(parent, type);
    auto hit = buf.cache.find(key);
    if (hit != buf.cache.end()) {
        return hit->second;
    }
    std::lock_guard l(m_);
    auto it = chain_index_.find(key);
    ChainId id;
    if (it != chain_index_.end()) {
        id = it->second;
    } else {
        id = static_cast<ChainId>(chains_.size());
        const int depth = parent < chains_.size() ? chains_[parent].depth + 1 : 1;
        chains_.push_back(ChainEntry{parent, type, depth});
        chain_index_.emplace(key, id);
    }
    buf.cache.emplace(key, id);
    return id;
}

ChainEntry Profiler::chain(ChainId c) const {
    std::lock_guard l(m_);
    return chains_.at(c);
}

std::vector<ChainEntry> Profiler::chains() const {
    std::lock_guard l(m_);
    return chains_;
}

void Profiler::open(TypeId type) {
    if (!enabled()) {
        return;
    }
    auto& buf = local();
    const rt::Context parent = rt::current_context();
    const ChainId c = intern_chain(parent, type);
    buf.stack.push_back({type, c, parent, rt::now_ns(), parent});
    rt::set_current_context(c);
}

void Profiler::close(TypeId type) {
    if (!enabled()) {
        return;
    }
    auto& buf = local();
    if (buf.stack.empty()) {
        unbalanced_.fetch_add(1);
        return;
    }
    auto top = buf.stack.back();
    buf.stack.pop_back();
    rt::set_current_context(top.saved);
    if (top.type != type) {
        unbalanced_.fetch_add(1);
        return;
    }
    buf.records.push_back(TaskRecord{type, top.chain, top.parent, top.start, rt::now_ns(), rt::Scheduler::worker_id(), -1});
}

void Profiler::record(const TaskRecord& r) {
    if (!enabled()) {
        return;
    }
    local().records.push_back(r);
}

std::vector<TaskRecord> Profiler::flush() const {
    std::vector<TaskRecord> out;
    {
        std::lock_guard l(m_);
        for (const auto& b : buffers_) {
            out.insert(out.end(), b->records.begin(), b->records.end());
        }
    }
    std::stable_sort(out.begin(), out.end(), [](const TaskRecord& a, const TaskRecord& b) {
        return a.start_ns != b.start_ns ? a.start_ns < b.start_ns : a.worker < b.worker;
    });
    return out;
}

std::size_t Profiler::record_count() const {
    std::lock_guard l(m_);
    std::size_t n = 0;
    for (const auto& b : buffers_) {
        n += b->records.size();
    }
    return n;
}

void Profiler::sample_counter(std::string name, double value) {
    std::lock_guard l(m_);
    samples_.push_back(CounterSample{std::move(name), rt::now_ns(), value});
}

std::vector<CounterSample> Profiler::counters() const {
    std::lock_guard l(m_);
    return samples_;
}

// ---------------------------------------------------------------------------

Scope::Scope(TypeId type) : active_(Profiler::instance().enabled()) {
    if (!active_) {
        return;
    }
    auto& p = Profiler::instance();
    saved_ = rt::current_context();
    rec_.type = type;
    rec_.parent = saved_;
    rec_.chain = p.intern_chain(saved_, type);
    rec_.worker = rt::Scheduler::worker_id();
    rt::set_current_context(rec_.chain);
    rec_.start_ns = rt::now_ns();
}

Scope::~Scope() {
    if (!active_) {
        return;
    }
    rec_.stop_ns = rt::now_ns();
    rt::set_current_context(saved_);
    Profiler::instance().record(rec_);
}

// ---------------------------------------------------------------------------

CounterSampler::CounterSampler(std::chrono::milliseconds period) : period_(period) {}

CounterSampler::~CounterSampler() { stop(); }

void CounterSampler::add(std::string name, std::function<double()> read) {
    std::lock_guard l(m_);
    counters_.emplace_back(std::move(name), std::move(read));
}

void CounterSampler::sample_now() {
    std::vector<std::pair<std::string, std::function<double()>>> cs;
    {
        std::lock_guard l(m_);
        cs = counters_;
    }
    for (auto& [name, read] : cs) {
        Profiler::instance().sample_counter(name, read());
    }
}

void CounterSampler::start() {
    std::lock_guard l(m_);
    if (running_) {
        return;
    }
    running_ = true;
    thread_ = std::thread([this] {
        std::unique_lock lk(m_);
        while (running_) {
            if (cv_.wait_for(lk, period_, [this] { return !running_; })) {
                break;
            }
            lk.unlock();
            sample_now();
            lk.lock();
        }
    });
}

void CounterSampler::stop() {
    {
        std::lock_guard l(m_);
        if (!running_) {
            return;
        }
        running_ = false;
    }
    cv_.notify_all();
    thread_.join();
}

double process_cpu_seconds() {
    rusage u{};
    getrusage(RUSAGE_SELF, &u);
    return static_cast<double>(u.ru_utime.tv_sec + u.ru_stime.tv_sec) +
           1e-6 * static_cast<double>(u.ru_utime.tv_usec + u.ru_stime.tv_usec);
}

double process_rss_bytes() {
    std::ifstream f("/proc/self/statm");
    long pages = 0, resident = 0;
    f >> pages >> resident;
    return static_cast<double>(resident) * static_cast<double>(sysconf(_SC_PAGESIZE));
}

// ---------------------------------------------------------------------------

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}
}  // namespace

bool scatter_keep(std::uint64_t key, double fraction, std::uint64_t seed) {
    if (!(fraction > 0 && fraction <= 1)) {
        throw ConfigError("scatter fraction must lie in (0, 1]");
    }
    if (fraction >= 1) {
        return true;
    }
    const double u = static_cast<double>(splitmix64(key ^ splitmix64(seed)) >> 11) * 0x1.0p-53;
    return u < fraction;
}

std::vector<ScatterPoint> scatter_sample(const std::vector<TaskRecord>& records, double fraction, std::uint64_t seed) {
    std::vector<ScatterPoint> out;
    const auto names = Profiler::instance().type_names();
    const auto epoch = Profiler::instance().epoch_ns();
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (scatter_keep(i, fraction, seed)) {
            const auto& r = records[i];
            out.push_back(ScatterPoint{r.type < names.size() ? names[r.type] : "?", 1e-3 * double(r.start_ns - epoch),
                                       1e-3 * double(r.stop_ns - r.start_ns)});
        }
    }
    return out;
}

std::vector<TreeNode> task_tree(const std::vector<TaskRecord>& records) {
    const auto chains = Profiler::instance().chains();
    std::map<ChainId, TreeNode> nodes;
    for (const auto& r : records) {
        auto& n = nodes[r.chain];
        n.chain = r.chain;
        n.count += 1;
        n.total_ns += double(r.stop_ns - r.start_ns);
    }
    // ancestors without records of their own keep the tree connected
    std::vector<ChainId> pending;
    for (auto& [c, n] : nodes) {
        pending.push_back(c);
    }
    while (!pending.empty()) {
        const ChainId c = pending.back();
        pending.pop_back();
        const auto& e = chains.at(c);
        auto& n = nodes[c];
        n.chain = c;
        n.type = e.type;
        n.parent = e.parent;
        if (e.parent != root_chain && !nodes.count(e.parent)) {
            nodes[e.parent].chain = e.parent;
            pending.push_back(e.parent);
        }
    }
    std::vector<TreeNode> out;
    for (auto& [c, n] : nodes) {
        out.push_back(n);
    }
    return out;
}

TaskGraphSummary task_graph(const std::vector<TaskRecord>& records) {
    const auto chains = Profiler::instance().chains();
    std::map<TypeId, GraphNode> nodes;
    std::map<std::pair<TypeId, TypeId>, std::uint64_t> edges;
    for (const auto& r : records) {
        auto& n = nodes[r.type];
        n.type = r.type;
        n.count += 1;
        n.total_ns += double(r.stop_ns - r.start_ns);
        if (r.parent != root_chain) {
            edges[{chains.at(r.parent).type, r.type}] += 1;
        }
    }
    TaskGraphSummary g;
    for (auto& [t, n] : nodes) {
        g.nodes.push_back(n);
    }
    for (auto& [k, c] : edges) {
        g.edges.push_back(GraphEdge{k.first, k.second, c});
        if (!nodes.count(k.first)) {
            g.nodes.push_back(GraphNode{k.first, 0, 0});
            nodes[k.first] = g.nodes.back();
        }
    }
    return g;
}

namespace {

std::string red_fill(double total, double max_total) {
    const double share = max_total > 0 ? std::clamp(total / max_total, 0.0, 1.0) : 0.0;
    const int gb = static_cast<int>(std::lround(255.0 * (1.0 - share)));
    char buf[16];
    std::snprintf(buf, sizeof buf, "#ff%02x%02x", gb, gb);
    return buf;
}

std::string escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        if (c == '"' || c == '\\') {
            o += '\\';
        }
        o += c;
    }
    return o;
}

std::string node_label(const std::string& name, std::uint64_t count, double total_ns) {
    std::ostringstream os;
    os.precision(6);
    os << escape(name) << "\\ncount " << count << "\\ntime " << total_ns * 1e-6 << " ms";
    return os.str();
}

}  // namespace

std::string export_task_tree(const std::vector<TaskRecord>& records) {
    const auto names = Profiler::instance().type_names();
    const auto nodes = task_tree(records);
    double max_total = 0;
    for (const auto& n : nodes) {
        max_total = std::max(max_total, n.total_ns);
    }
    std::ostringstream os;
    os << "digraph task_tree {\n  node [shape=box, style=filled];\n";
    for (const auto& n : nodes) {
        os << "  c" << n.chain << " [label=\"" << node_label(names.at(n.type), n.count, n.total_ns)
           << "\", fillcolor=\"" << red_fill(n.total_ns, max_total) << "\"];\n";
    }
    for (const auto& n : nodes) {
        if (n.parent != root_chain) {
            os << "  c" << n.parent << " -> c" << n.chain << ";\n";
        }
    }
    os << "}\n";
    return os.str();
}

std::string export_task_graph(const std::vector<TaskRecord>& records) {
    const auto names = Profiler::instance().type_names();
    const auto g = task_graph(records);
    double max_total = 0;
    for (const auto& n : g.nodes) {
        max_total = std::max(max_total, n.total_ns);
    }
    std::ostringstream os;
    os << "digraph task_graph {\n  node [shape=ellipse, style=filled];\n";
    for (const auto& n : g.nodes) {
        os << "  t" << n.type << " [label=\"" << node_label(names.at(n.type), n.count, n.total_ns)
           << "\", fillcolor=\"" << red_fill(n.total_ns, max_total) << "\"];\n";
    }
    for (const auto& e : g.edges) {
        os << "  t" << e.from << " -> t" << e.to << " [label=\"" << e.count << "\"];\n";
    }
    os << "}\n";
    return os.str();
}

int lane_tid(int lane, int cls) { return 1000 + 3 * lane + cls; }

std::string export_trace(const std::vector<TaskRecord>& records, const std::vector<rt::KernelRecord>& kernels) {
    using nlohmann::json;
    const auto names = Profiler::instance().type_names();
    const auto epoch = Profiler::instance().epoch_ns();
    auto us = [epoch](std::int64_t t) { return 1e-3 * double(t - epoch); };
    json events = json::array();
    std::set<int> worker_tids;
    std::set<int> lanes;
    for (const auto& r : records) {
        const int tid = r.worker >= 0 ? r.worker : 900;
        worker_tids.insert(tid);
        events.push_back({{"name", r.type < names.size() ? names[r.type] : "?"},
                          {"cat", "task"},
                          {"ph", "X"},
                          {"ts", us(r.start_ns)},
                          {"dur", 1e-3 * double(r.stop_ns - r.start_ns)},
                          {"pid", 1},
                          {"tid", tid}});
    }
    for (const auto& k : kernels) {
        lanes.insert(k.lane);
        const std::int64_t compute = std::clamp(k.compute_ns, k.start_ns, k.stop_ns);
        if (compute > k.start_ns) {
            events.push_back({{"name", k.name + " staging"},
                              {"cat", "memory"},
                              {"ph", "X"},
                              {"ts", us(k.start_ns)},
                              {"dur", 1e-3 * double(compute - k.start_ns)},
                              {"pid", 1},
                              {"tid", lane_tid(k.lane, 1)}});
        }
        events.push_back({{"name", k.name},
                          {"cat", "kernel"},
                          {"ph", "X"},
                          {"ts", us(compute)},
                          {"dur", 1e-3 * double(k.stop_ns - compute)},
                          {"pid", 1},
                          {"tid", lane_tid(k.lane, 0)}});
        events.push_back({{"name", k.name + " event"},
                          {"cat", "sync"},
                          {"ph", "X"},
                          {"ts", us(k.stop_ns)},
                          {"dur", 1e-3 * double(std::max<std::int64_t>(0, k.ready_ns - k.stop_ns))},
                          {"pid", 1},
                          {"tid", lane_tid(k.lane, 2)}});
    }
    auto meta = [&](int tid, const std::string& name) {
        events.push_back({{"name", "thread_name"}, {"ph", "M"}, {"pid", 1}, {"tid", tid}, {"args", {{"name", name}}}});
    };
    for (int t : worker_tids) {
        meta(t, t == 900 ? "main" : "worker " + std::to_string(t));
    }
    static const char* cls[] = {"kernel", "memory", "sync"};
    for (int l : lanes) {
        for (int c = 0; c < 3; ++c) {
            meta(lane_tid(l, c), "lane " + std::to_string(l) + " " + cls[c]);
        }
    }
    json doc = {{"traceEvents", events}, {"displayTimeUnit", "ms"}};
    return doc.dump(1);
}

std::string export_counters_csv(const std::vector<CounterSample>& samples) {
    const auto epoch = Profiler::instance().epoch_ns();
    std::ostringstream os;
    os.precision(17);
    os << "name,time_seconds,value\n";
    for (const auto& s : samples) {
        os << s.name << ',' << 1e-9 * double(s.time_ns - epoch) << ',' << s.value << '\n';
    }
    return os.str();
}

std::string export_scatter_csv(const std::vector<ScatterPoint>& points) {
    std::ostringstream os;
    os.precision(12);
    os << "type,start_us,duration_us\n";
    for (const auto& p : points) {
        os << p.type << ',' << p.start_us << ',' << p.duration_us << '\n';
    }
    return os.str();
}

}  // namespace octo::prof
