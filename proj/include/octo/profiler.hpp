#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include "octo/runtime.hpp"

namespace octo::prof {

using TypeId = std::uint32_t;
using ChainId = std::uint32_t;
inline constexpr ChainId root_chain = 0;

/// One timed task instance.
struct TaskRecord {
    TypeId type = 0;
    ChainId chain = root_chain;   // chain ending in this task
    ChainId parent = root_chain;  // chain of the enclosing task
    std::int64_t start_ns = 0;
    std::int64_t stop_ns = 0;
    int worker = -1;
    int lane = -1;
};

struct CounterSample {
    std::string name;
    std::int64_t time_ns = 0;
    double value = 0;
};

/// Interned dependency chains: each chain is (parent chain, task type).
struct ChainEntry {
    ChainId parent = root_chain;
    TypeId type = 0;
    int depth = 0;
};

/// Process-wide task profiler. Recording is lock-free per thread once the
/// thread's buffer and chain cache are warm.
class Profiler {
public:
    static Profiler& instance();

    void enable(bool on);
    bool enabled() const { return enabled_.load(std::memory_order_relaxed); }
    /// Drops all records, samples and interned chains.
    void reset();

    TypeId intern_type(std::string_view name);
    std::string type_name(TypeId t) const;
    ChainId intern_chain(ChainId parent, TypeId type);
    ChainEntry chain(ChainId c) const;
    std::vector<ChainEntry> chains() const;
    std::vector<std::string> type_names() const;

    /// Explicit open/close. An unmatched close is counted and ignored; a
    /// close with a different type than the innermost open drops the record.
    void open(TypeId type);
    void close(TypeId type);
    void record(const TaskRecord& r);

    std::uint64_t unbalanced() const { return unbalanced_.load(); }
    /// Records from every thread, ordered by (start, worker).
    std::vector<TaskRecord> flush() const;
    std::size_t record_count() const;

    void sample_counter(std::string name, double value);
    std::vector<CounterSample> counters() const;

    std::int64_t epoch_ns() const { return epoch_ns_; }

    struct ThreadBuffer;

private:
    Profiler();
    ThreadBuffer& local();

    std::atomic<bool> enabled_{false};
    std::atomic<std::uint64_t> unbalanced_{0};
    std::atomic<std::uint32_t> generation_{0};
    mutable std::mutex m_;
    std::vector<std::string> types_;
    std::unordered_map<std::string, TypeId> type_index_;
    std::vector<ChainEntry> chains_;
    std::unordered_map<std::uint64_t, ChainId> chain_index_;
    std::vector<std::unique_ptr<ThreadBuffer>> buffers_;
    std::vector<CounterSample> samples_;
    std::int64_t epoch_ns_ = 0;
};

/// Times the enclosing block as one task of `type`; the task's chain is
/// the current runtime context extended by `type`.
class Scope {
public:
    explicit Scope(TypeId type);
    explicit Scope(std::string_view type) : Scope(Profiler::instance().intern_type(type)) {}
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

private:
    bool active_;
    TaskRecord rec_;
    rt::Context saved_ = 0;
};

/// Periodic sampler of registered counters on a background thread.
class CounterSampler {
public:
    explicit CounterSampler(std::chrono::milliseconds period = std::chrono::milliseconds(1000));
    ~CounterSampler();

    void add(std::string name, std::function<double()> read);
    void start();
    void stop();
    void sample_now();

private:
    std::chrono::milliseconds period_;
    std::mutex m_;
    std::condition_variable cv_;
    std::vector<std::pair<std::string, std::function<double()>>> counters_;
    std::thread thread_;
    bool running_ = false;
};

// Process statistics.
double process_cpu_seconds();
double process_rss_bytes();

/// Deterministic keep decision for scatter sampling.
bool scatter_keep(std::uint64_t key, double fraction, std::uint64_t seed = 0x5eed);
struct ScatterPoint {
    std::string type;
    double start_us = 0;
    double duration_us = 0;
};
std::vector<ScatterPoint> scatter_sample(const std::vector<TaskRecord>& records, double fraction,
                                         std::uint64_t seed = 0x5eed);

/// Aggregate per tree node (type + full chain).
struct TreeNode {
    ChainId chain = root_chain;
    ChainId parent = root_chain;
    TypeId type = 0;
    std::uint64_t count = 0;
    double total_ns = 0;
};
std::vector<TreeNode> task_tree(const std::vector<TaskRecord>& records);

struct GraphEdge {
    TypeId from = 0, to = 0;
    std::uint64_t count = 0;
};
struct GraphNode {
    TypeId type = 0;
    std::uint64_t count = 0;
    double total_ns = 0;
};
struct TaskGraphSummary {
    std::vector<GraphNode> nodes;
    std::vector<GraphEdge> edges;
};
TaskGraphSummary task_graph(const std::vector<TaskRecord>& records);

std::string export_task_tree(const std::vector<TaskRecord>& records);
std::string export_task_graph(const std::vector<TaskRecord>& records);

/// Google Trace Events JSON. Worker records use their worker id as tid;
/// kernel records expand into three virtual threads per lane.
std::string export_trace(const std::vector<TaskRecord>& records, const std::vector<rt::KernelRecord>& kernels);
int lane_tid(int lane, int cls);  // cls: 0 kernel, 1 memory, 2 sync

std::string export_counters_csv(const std::vector<CounterSample>& samples);
std::string export_scatter_csv(const std::vector<ScatterPoint>& points);

}  // namespace octo::prof
