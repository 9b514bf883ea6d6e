#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <type_traits>
#include <unordered_map>
#include <variant>
#include <vector>

#include "octo/common.hpp"

namespace octo::rt {

/// Opaque per-task context propagated from spawner to spawned task. The
/// profiler stores its dependency-chain id here.
using Context = std::uint32_t;
Context current_context();
void set_current_context(Context c);

/// Move-only nullary callable.
class Task {
public:
    Task() = default;
    template <class F, class = std::enable_if_t<!std::is_same_v<std::decay_t<F>, Task>>>
    Task(F&& f) : impl_(std::make_unique<Impl<std::decay_t<F>>>(std::forward<F>(f))), context_(current_context()) {}

    explicit operator bool() const { return impl_ != nullptr; }
    void operator()();

private:
    struct Base {
        virtual ~Base() = default;
        virtual void run() = 0;
    };
    template <class F>
    struct Impl final : Base {
        explicit Impl(F&& g) : f(std::move(g)) {}
        explicit Impl(const F& g) : f(g) {}
        void run() override { f(); }
        F f;
    };
    std::unique_ptr<Base> impl_;
    Context context_ = 0;
};

/// Something idle workers call repeatedly, e.g. an event poller.
struct PollHook {
    std::function<int()> poll;
    std::function<bool()> busy;
};

/// Work-stealing pool of worker threads.
class Scheduler {
public:
    explicit Scheduler(int workers);
    ~Scheduler();
    Scheduler(const Scheduler&) = delete;
    Scheduler& operator=(const Scheduler&) = delete;

    int workers() const { return static_cast<int>(workers_.size()); }
    void spawn(Task t);

    /// Runs one queued task or one round of poll hooks from the calling
    /// worker thread. Returns false if there was nothing to do.
    bool help_once();

    void add_poll_hook(PollHook hook);
    void clear_poll_hooks();

    std::uint64_t tasks_executed() const { return executed_.load(std::memory_order_relaxed); }

    /// Worker index of the calling thread, -1 outside any worker.
    static int worker_id();
    static Scheduler* current();

private:
    struct Queue {
        std::mutex m;
        std::deque<Task> q;
    };

    void worker_loop(int id);
    bool try_pop(int self, Task& out);
    bool hooks_busy();
    int run_hooks();
    void run_task(Task& t);

    std::vector<std::unique_ptr<Queue>> queues_;
    Queue inject_;
    std::vector<std::thread> workers_;
    std::mutex sleep_m_;
    std::condition_variable sleep_cv_;
    std::atomic<bool> stop_{false};
    std::atomic<std::int64_t> pending_{0};
    std::atomic<std::uint64_t> executed_{0};
    std::mutex hooks_m_;
    std::vector<PollHook> hooks_;
    std::atomic<int> hook_count_{0};
};

// ---------------------------------------------------------------------------
// futures

namespace detail {

template <class T>
using stored_t = std::conditional_t<std::is_void_v<T>, std::monostate, T>;

template <class T>
struct SharedState {
    enum class Status { pending, ready, failed };

    std::mutex m;
    std::condition_variable cv;
    Status status = Status::pending;
    std::optional<stored_t<T>> value;
    std::exception_ptr error;
    std::vector<std::function<void()>> continuations;
    Scheduler* sched = nullptr;

    bool done() {
        std::lock_guard l(m);
        return status != Status::pending;
    }

    void finish(std::optional<stored_t<T>> v, std::exception_ptr e) {
        std::vector<std::function<void()>> conts;
        {
            std::lock_guard l(m);
            if (status != Status::pending) {
                throw Error("future state set twice");
            }
            if (e) {
                error = e;
                status = Status::failed;
            } else {
                value = std::move(v);
                status = Status::ready;
            }
            conts.swap(continuations);
        }
        cv.notify_all();
        for (auto& c : conts) {
            c();
        }
    }

    void on_done(std::function<void()> c) {
        {
            std::lock_guard l(m);
            if (status == Status::pending) {
                continuations.push_back(std::move(c));
                return;
            }
        }
        c();
    }
};

bool on_worker();
bool help_current();

}  // namespace detail

template <class T>
class Future;

template <class T>
class Promise {
public:
    explicit Promise(Scheduler* s = nullptr) : st_(std::make_shared<detail::SharedState<T>>()) { st_->sched = s; }

    Future<T> get_future() const { return Future<T>(st_); }

    template <class U = T, class = std::enable_if_t<!std::is_void_v<U>>>
    void set_value(U v) {
        st_->finish(detail::stored_t<T>(std::move(v)), nullptr);
    }
    template <class U = T, class = std::enable_if_t<std::is_void_v<U>>>
    void set_value() {
        st_->finish(std::monostate{}, nullptr);
    }
    void set_exception(std::exception_ptr e) { st_->finish(std::nullopt, e); }

private:
    std::shared_ptr<detail::SharedState<T>> st_;
};

/// Single-assignment result of an asynchronous computation.
template <class T>
class Future {
public:
    Future() = default;
    explicit Future(std::shared_ptr<detail::SharedState<T>> st) : st_(std::move(st)) {}

    bool valid() const { return st_ != nullptr; }
    bool ready() const { return st_->done(); }
    bool failed() const {
        std::lock_guard l(st_->m);
        return st_->status == detail::SharedState<T>::Status::failed;
    }

    void wait() const {
        if (detail::on_worker()) {
            while (!st_->done()) {
                if (!detail::help_current()) {
                    std::this_thread::yield();
                }
            }
            return;
        }
        std::unique_lock l(st_->m);
        st_->cv.wait(l, [this] { return st_->status != detail::SharedState<T>::Status::pending; });
    }

    /// Blocks until ready, running other tasks meanwhile when called from a
    /// worker. Rethrows a stored failure.
    T get() const {
        wait();
        std::lock_guard l(st_->m);
        if (st_->error) {
            std::rethrow_exception(st_->error);
        }
        if constexpr (!std::is_void_v<T>) {
            return *st_->value;
        }
    }

    /// Runs f(value) (or f() for void) as a new task once this is ready.
    /// A failure skips f and propagates.
    template <class F>
    auto then(F&& f) const {
        using R = std::conditional_t<std::is_void_v<T>, std::invoke_result<F>, std::invoke_result<F, T>>;
        using U = typename R::type;
        Promise<U> p(st_->sched);
        auto out = p.get_future();
        auto st = st_;
        st_->on_done([st, p, fn = std::forward<F>(f)]() mutable {
            auto body = [st, p, fn = std::move(fn)]() mutable {
                if (st->error) {
                    p.set_exception(st->error);
                    return;
                }
                try {
                    if constexpr (std::is_void_v<T>) {
                        if constexpr (std::is_void_v<U>) {
                            fn();
                            p.set_value();
                        } else {
                            p.set_value(fn());
                        }
                    } else {
                        if constexpr (std::is_void_v<U>) {
                            fn(*st->value);
                            p.set_value();
                        } else {
                            p.set_value(fn(*st->value));
                        }
                    }
                } catch (...) {
                    p.set_exception(std::current_exception());
                }
            };
            if (st->sched) {
                st->sched->spawn(Task(std::move(body)));
            } else {
                body();
            }
        });
        return out;
    }

    std::shared_ptr<detail::SharedState<T>> state() const { return st_; }

private:
    std::shared_ptr<detail::SharedState<T>> st_;
};

template <class T>
Future<T> make_ready_future(T v, Scheduler* s = nullptr) {
    Promise<T> p(s);
    p.set_value(std::move(v));
    return p.get_future();
}
Future<void> make_ready_future(Scheduler* s = nullptr);

/// Runs f on the scheduler and returns its result as a future.
template <class F>
auto async(Scheduler& s, F&& f) {
    using R = std::invoke_result_t<F>;
    Promise<R> p(&s);
    auto out = p.get_future();
    s.spawn(Task([p, fn = std::forward<F>(f)]() mutable {
        try {
            if constexpr (std::is_void_v<R>) {
                fn();
                p.set_value();
            } else {
                p.set_value(fn());
            }
        } catch (...) {
            p.set_exception(std::current_exception());
        }
    }));
    return out;
}

/// Ready once every input is done; fails with the first stored failure.
template <class T>
Future<void> when_all(const std::vector<Future<T>>& futures, Scheduler* s = nullptr) {
    Promise<void> p(s);
    auto out = p.get_future();
    if (futures.empty()) {
        p.set_value();
        return out;
    }
    struct Join {
        std::atomic<std::size_t> left;
        std::mutex m;
        std::exception_ptr first;
    };
    auto join = std::make_shared<Join>();
    join->left = futures.size();
    for (const auto& f : futures) {
        auto st = f.state();
        st->on_done([join, st, p]() mutable {
            if (st->error) {
                std::lock_guard l(join->m);
                if (!join->first) {
                    join->first = st->error;
                }
            }
            if (join->left.fetch_sub(1) == 1) {
                if (join->first) {
                    p.set_exception(join->first);
                } else {
                    p.set_value();
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// static task graphs

/// Dependency graph of named tasks; validated (acyclic) on build.
class TaskGraph {
public:
    using NodeIndex = std::size_t;

    NodeIndex add(std::string name, std::function<void()> fn);
    /// Node that completes when the returned future does, e.g. a lane kernel.
    NodeIndex add_async(std::string name, std::function<Future<void>()> fn);
    /// `after` runs only once `before` has completed.
    void depend(NodeIndex after, NodeIndex before);

    /// Checks for cycles; throws StructuralError naming a node on a cycle.
    void build();
    std::size_t size() const { return nodes_.size(); }
    const std::string& name(NodeIndex i) const { return nodes_[i].name; }
    const std::vector<NodeIndex>& topological_order() const { return order_; }

    /// Spawns every node as its dependencies finish. A failing node fails
    /// the returned future; its dependents are skipped.
    Future<void> execute(Scheduler& s);

private:
    struct Node {
        std::string name;
        std::function<void()> fn;
        std::function<Future<void>()> afn;
        std::vector<NodeIndex> successors;
        std::size_t num_deps = 0;
    };
    std::vector<Node> nodes_;
    std::vector<NodeIndex> order_;
    bool built_ = false;
};

// ---------------------------------------------------------------------------
// simulated accelerator

struct KernelRecord {
    std::string name;
    int lane = 0;
    std::int64_t submit_ns = 0;
    std::int64_t start_ns = 0;
    std::int64_t compute_ns = 0;  // end of input staging inside the body
    std::int64_t stop_ns = 0;
    std::int64_t ready_ns = 0;  // when polling marked the future ready
};

/// Called from inside a kernel body once its inputs are staged; splits the
/// body into a memory phase and a compute phase. No-op outside kernels.
void kernel_compute_begin();

/// Fixed set of ordered lanes. Each lane runs one kernel at a time; the
/// kernel's future becomes ready only when a poll observes its completion
/// event (plus the configured artificial latency).
class LanePool {
public:
    LanePool(Scheduler& s, int lanes = 128, std::chrono::microseconds latency = std::chrono::microseconds{0});
    ~LanePool();
    LanePool(const LanePool&) = delete;
    LanePool& operator=(const LanePool&) = delete;

    int lanes() const { return static_cast<int>(lanes_.size()); }

    Future<void> submit(std::string name, std::function<void()> kernel);
    /// Completes fired events; returns how many futures became ready.
    int poll();
    /// Rejects further submissions; waits for queued kernels to finish.
    void shutdown();

    std::uint64_t submitted() const { return submitted_.load(); }
    std::uint64_t completed() const { return completed_.load(); }
    std::uint64_t poll_calls() const { return poll_calls_.load(); }
    int in_flight() const { return in_flight_.load(); }
    int max_in_flight() const { return max_in_flight_.load(); }
    int max_concurrent_bodies() const { return max_bodies_.load(); }

    void set_recording(bool on);
    std::vector<KernelRecord> take_records();

private:
    struct Pending {
        std::string name;
        std::function<void()> kernel;
        Promise<void> promise;
        std::int64_t submit_ns = 0;
    };
    struct Lane {
        std::deque<Pending> queue;  // front is in flight when active
        bool active = false;
        std::atomic<bool> done{false};
        std::int64_t start_ns = 0;
        std::int64_t compute_ns = 0;
        std::int64_t stop_ns = 0;
        std::exception_ptr error;
        std::size_t load() const { return queue.size(); }
    };

    void launch(int lane);  // requires m_

    Scheduler& sched_;
    std::chrono::microseconds latency_;
    std::mutex m_;
    std::vector<std::unique_ptr<Lane>> lanes_;
    bool shut_ = false;
    std::atomic<std::uint64_t> submitted_{0}, completed_{0}, poll_calls_{0};
    std::atomic<int> in_flight_{0}, max_in_flight_{0}, bodies_{0}, max_bodies_{0};
    bool recording_ = false;
    std::vector<KernelRecord> records_;
};

// ---------------------------------------------------------------------------
// buffer reuse

struct Buffer {
    real* data = nullptr;
    std::size_t size = 0;  // usable elements (size class)
};

/// Size-class free lists of scratch buffers. Released buffers are kept for
/// reuse, never freed before destruction.
class BufferManager {
public:
    BufferManager() = default;
    BufferManager(const BufferManager&) = delete;
    BufferManager& operator=(const BufferManager&) = delete;

    Buffer acquire(std::size_t elements);
    void release(Buffer b);

    static std::size_t size_class(std::size_t elements);

    std::uint64_t allocations() const;
    std::uint64_t reuses() const;
    std::size_t bytes_outstanding() const;
    std::size_t high_water() const;

private:
    mutable std::mutex m_;
    std::vector<std::unique_ptr<real[]>> storage_;
    std::unordered_map<std::size_t, std::vector<real*>> free_;
    std::unordered_map<real*, std::size_t> loaned_;
    std::uint64_t allocations_ = 0, reuses_ = 0;
    std::size_t outstanding_ = 0, high_water_ = 0;
};

/// RAII loan from a BufferManager.
class ScopedBuffer {
public:
    ScopedBuffer(BufferManager& m, std::size_t elements) : m_(&m), b_(m.acquire(elements)) {}
    ~ScopedBuffer() {
        if (m_) {
            m_->release(b_);
        }
    }
    ScopedBuffer(const ScopedBuffer&) = delete;
    ScopedBuffer& operator=(const ScopedBuffer&) = delete;
    real* data() const { return b_.data; }
    std::size_t size() const { return b_.size; }

private:
    BufferManager* m_;
    Buffer b_;
};

std::int64_t now_ns();

}  // namespace octo::rt
