#include "octo/runtime.hpp"

#include <algorithm>

namespace octo::rt {

namespace {
thread_local Context tl_context = 0;
thread_local int tl_worker = -1;
thread_local Scheduler* tl_sched = nullptr;
thread_local std::int64_t* tl_compute_mark = nullptr;
}  // namespace

void kernel_compute_begin() {
    if (tl_compute_mark) {
        *tl_compute_mark = now_ns();
    }
}

Context current_context() { return tl_context; }
void set_current_context(Context c) { tl_context = c; }

std::int64_t now_ns() {
    using namespace std::chrono;
    return duration_cast<nanoseconds>(steady_clock::now().time_since_epoch()).count();
}

void Task::operator()() {
    const Context saved = tl_context;
    tl_context = context_;
    try {
        impl_->run();
    } catch (...) {
        tl_context = saved;
        throw;
    }
    tl_context = saved;
}

// ---------------------------------------------------------------------------
// Scheduler

Scheduler::Scheduler(int workers) {
    if (workers < 1) {
        throw ConfigError("worker count must be >= 1");
    }
    for (int i = 0; i < workers; ++i) {
        queues_.push_back(std::make_unique<Queue>());
    }
    for (int i = 0; i < workers; ++i) {
        workers_.emplace_back([this, i] { worker_loop(i); });
    }
}

Scheduler::~Scheduler() {
    {
        std::lock_guard l(sleep_m_);
        stop_ = true;
    }
    sleep_cv_.notify_all();
    for (auto& t : workers_) {
        t.join();
    }
}

int Scheduler::worker_id() { return tl_worker; }
Scheduler* Scheduler::current() { return tl_sched; }

void Scheduler::spawn(Task t) {
    if (tl_sched == this && tl_worker >= 0) {
        auto& q = *queues_[static_cast<std::size_t>(tl_worker)];
        std::lock_guard l(q.m);
        q.q.push_back(std::move(t));
    } else {
        std::lock_guard l(inject_.m);
        inject_.q.push_back(std::move(t));
    }
    pending_.fetch_add(1);
    {
        std::lock_guard l(sleep_m_);
    }
    sleep_cv_.notify_one();
}

bool Scheduler::try_pop(int self, Task& out) {
    if (self >= 0) {
        auto& q = *queues_[static_cast<std::size_t>(self)];
        std::lock_guard l(q.m);
        if (!q.q.empty()) {
            out = std::move(q.q.back());
            q.q.pop_back();
            return true;
        }
    }
    {
        std::lock_guard l(inject_.m);
        if (!inject_.q.empty()) {
            out = std::move(inject_.q.front());
            inject_.q.pop_front();
            return true;
        }
    }
    const int n = workers();
    for (int k = 1; k <= n; ++k) {
        const int v = ((self < 0 ? 0 : self) + k) % n;
        if (v == self) {
            continue;
        }
        auto& q = *queues_[static_cast<std::size_t>(v)];
        std::lock_guard l(q.m);
        if (!q.q.empty()) {
            out = std::move(q.q.front());
            q.q.pop_front();
            return true;
        }
    }
    return false;
}

void Scheduler::add_poll_hook(PollHook hook) {
    std::lock_guard l(hooks_m_);
    hooks_.push_back(std::move(hook));
    hook_count_ = static_cast<int>(hooks_.size());
    sleep_cv_.notify_all();
}

void Scheduler::clear_poll_hooks() {
    std::lock_guard l(hooks_m_);
    hooks_.clear();
    hook_count_ = 0;
}

bool Scheduler::hooks_busy() {
    if (hook_count_.load(std::memory_order_relaxed) == 0) {
        return false;
    }
    std::lock_guard l(hooks_m_);
    for (auto& h : hooks_) {
        if (h.busy()) {
            return true;
        }
    }
    return false;
}

int Scheduler::run_hooks() {
    if (hook_count_.load(std::memory_order_relaxed) == 0) {
        return 0;
    }
    std::vector<PollHook> hooks;
    {
        std::lock_guard l(hooks_m_);
        hooks = hooks_;
    }
    int n = 0;
    for (auto& h : hooks) {
        n += h.poll();
    }
    return n;
}

void Scheduler::run_task(Task& t) {
    pending_.fetch_sub(1);
    t();
    executed_.fetch_add(1, std::memory_order_relaxed);
}

bool Scheduler::help_once() {
    Task t;
    if (try_pop(tl_sched == this ? tl_worker : -1, t)) {
        run_task(t);
        return true;
    }
    return run_hooks() > 0;
}

void Scheduler::worker_loop(int id) {
    tl_worker = id;
    tl_sched = this;
    while (!stop_.load()) {
        Task t;
        if (try_pop(id, t)) {
            run_task(t);
            if (hooks_busy()) {
                run_hooks();
            }
            continue;
        }
        if (hooks_busy()) {
            run_hooks();
            std::this_thread::yield();
            continue;
        }
        std::unique_lock l(sleep_m_);
        sleep_cv_.wait_for(l, std::chrono::milliseconds(2),
                           [&] { return stop_.load() || pending_.load() > 0 || hook_count_.load() > 0; });
        if (hook_count_.load() > 0 && pending_.load() == 0 && !stop_.load()) {
            // Hooks exist but are idle: back off briefly.
            sleep_cv_.wait_for(l, std::chrono::microseconds(200), [&] { return stop_.load() || pending_.load() > 0; });
        }
    }
    tl_worker = -1;
    tl_sched = nullptr;
}

namespace detail {

bool on_worker() { return tl_sched != nullptr && tl_worker >= 0; }
bool help_current() { return tl_sched->help_once(); }

}  // namespace detail

Future<void> make_ready_future(Scheduler* s) {
    Promise<void> p(s);
    p.set_value();
    return p.get_future();
}

// ---------------------------------------------------------------------------
// TaskGraph

TaskGraph::NodeIndex TaskGraph::add(std::string name, std::function<void()> fn) {
    nodes_.push_back(Node{std::move(name), std::move(fn), nullptr, {}, 0});
    built_ = false;
    return nodes_.size() - 1;
}

TaskGraph::NodeIndex TaskGraph::add_async(std::string name, std::function<Future<void>()> fn) {
    nodes_.push_back(Node{std::move(name), nullptr, std::move(fn), {}, 0});
    built_ = false;
    return nodes_.size() - 1;
}

void TaskGraph::depend(NodeIndex after, NodeIndex before) {
    if (after >= nodes_.size() || before >= nodes_.size()) {
        throw StructuralError("task graph edge refers to an unknown node");
    }
    nodes_[before].successors.push_back(after);
    nodes_[after].num_deps += 1;
    built_ = false;
}

void TaskGraph::build() {
    std::vector<std::size_t> indeg(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        indeg[i] = nodes_[i].num_deps;
    }
    order_.clear();
    std::deque<NodeIndex> ready;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (indeg[i] == 0) {
            ready.push_back(i);
        }
    }
    while (!ready.empty()) {
        const auto i = ready.front();
        ready.pop_front();
        order_.push_back(i);
        for (auto s : nodes_[i].successors) {
            if (--indeg[s] == 0) {
                ready.push_back(s);
            }
        }
    }
    if (order_.size() != nodes_.size()) {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (indeg[i] > 0) {
                throw StructuralError("dependency cycle through task '" + nodes_[i].name + "'");
            }
        }
    }
    built_ = true;
}

Future<void> TaskGraph::execute(Scheduler& s) {
    if (!built_) {
        build();
    }
    struct Run {
        std::vector<std::atomic<std::size_t>> left;
        std::atomic<std::size_t> outstanding;
        std::mutex m;
        std::exception_ptr error;
        Promise<void> done;
        explicit Run(std::size_t n, Scheduler* sp) : left(n), outstanding(n), done(sp) {}
    };
    auto run = std::make_shared<Run>(nodes_.size(), &s);
    auto out = run->done.get_future();
    if (nodes_.empty()) {
        run->done.set_value();
        return out;
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        run->left[i] = nodes_[i].num_deps;
    }
    // The graph must outlive the execution; callers wait on `out`.
    auto launch = std::make_shared<std::function<void(NodeIndex)>>();
    auto fail = [run](std::exception_ptr e) {
        std::lock_guard l(run->m);
        if (!run->error) {
            run->error = e;
        }
    };
    auto finish = [this, run, launch](NodeIndex i) {
        for (auto succ : nodes_[i].successors) {
            if (run->left[succ].fetch_sub(1) == 1) {
                (*launch)(succ);
            }
        }
        if (run->outstanding.fetch_sub(1) == 1) {
            if (run->error) {
                run->done.set_exception(run->error);
            } else {
                run->done.set_value();
            }
        }
    };
    *launch = [this, run, &s, fail, finish](NodeIndex i) {
        s.spawn(Task([this, run, fail, finish, i] {
            bool skip;
            {
                std::lock_guard l(run->m);
                skip = run->error != nullptr;
            }
            if (!skip && nodes_[i].afn) {
                Future<void> f;
                try {
                    f = nodes_[i].afn();
                } catch (...) {
                    fail(std::current_exception());
                    finish(i);
                    return;
                }
                auto st = f.state();
                st->on_done([st, fail, finish, i] {
                    if (st->error) {
                        fail(st->error);
                    }
                    finish(i);
                });
                return;
            }
            if (!skip) {
                try {
                    nodes_[i].fn();
                } catch (...) {
                    fail(std::current_exception());
                }
            }
            finish(i);
        }));
    };
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].num_deps == 0) {
            (*launch)(i);
        }
    }
    // Break the self-reference once every node has run.
    return out.then([launch] { *launch = nullptr; });
}

// ---------------------------------------------------------------------------
// LanePool

LanePool::LanePool(Scheduler& s, int lanes, std::chrono::microseconds latency) : sched_(s), latency_(latency) {
    if (lanes < 1) {
        throw ConfigError("lane count must be >= 1");
    }
    for (int i = 0; i < lanes; ++i) {
        lanes_.push_back(std::make_unique<Lane>());
    }
    sched_.add_poll_hook(PollHook{[this] { return poll(); }, [this] { return in_flight_.load() > 0; }});
}

LanePool::~LanePool() {
    shutdown();
    sched_.clear_poll_hooks();
}

Future<void> LanePool::submit(std::string name, std::function<void()> kernel) {
    std::lock_guard l(m_);
    if (shut_) {
        throw Error("lane pool is shut down");
    }
    int best = 0;
    for (int i = 1; i < lanes(); ++i) {
        if (lanes_[static_cast<std::size_t>(i)]->load() < lanes_[static_cast<std::size_t>(best)]->load()) {
            best = i;
        }
    }
    Pending p{std::move(name), std::move(kernel), Promise<void>(&sched_), now_ns()};
    auto fut = p.promise.get_future();
    auto& lane = *lanes_[static_cast<std::size_t>(best)];
    lane.queue.push_back(std::move(p));
    submitted_.fetch_add(1);
    if (!lane.active) {
        launch(best);
    }
    return fut;
}

void LanePool::launch(int li) {
    auto& lane = *lanes_[static_cast<std::size_t>(li)];
    lane.active = true;
    lane.done = false;
    lane.error = nullptr;
    const int f = in_flight_.fetch_add(1) + 1;
    int prev = max_in_flight_.load();
    while (f > prev && !max_in_flight_.compare_exchange_weak(prev, f)) {
    }
    Lane* lp = &lane;
    std::function<void()>* body = &lane.queue.front().kernel;
    sched_.spawn(Task([this, lp, body] {
        const int b = bodies_.fetch_add(1) + 1;
        int pb = max_bodies_.load();
        while (b > pb && !max_bodies_.compare_exchange_weak(pb, b)) {
        }
        lp->start_ns = now_ns();
        lp->compute_ns = lp->start_ns;
        tl_compute_mark = &lp->compute_ns;
        try {
            (*body)();
        } catch (...) {
            lp->error = std::current_exception();
        }
        tl_compute_mark = nullptr;
        lp->stop_ns = now_ns();
        bodies_.fetch_sub(1);
        lp->done.store(true, std::memory_order_release);
    }));
}

int LanePool::poll() {
    poll_calls_.fetch_add(1, std::memory_order_relaxed);
    if (in_flight_.load() == 0) {
        return 0;
    }
    std::vector<std::pair<Promise<void>, std::exception_ptr>> fire;
    {
        std::unique_lock l(m_, std::try_to_lock);
        if (!l.owns_lock()) {
            return 0;
        }
        const std::int64_t t = now_ns();
        const std::int64_t lat = std::chrono::duration_cast<std::chrono::nanoseconds>(latency_).count();
        for (int i = 0; i < lanes(); ++i) {
            auto& lane = *lanes_[static_cast<std::size_t>(i)];
            if (!lane.active || !lane.done.load(std::memory_order_acquire) || lane.stop_ns + lat > t) {
                continue;
            }
            auto p = std::move(lane.queue.front());
            lane.queue.pop_front();
            lane.active = false;
            in_flight_.fetch_sub(1);
            completed_.fetch_add(1);
            if (recording_) {
                records_.push_back(KernelRecord{p.name, i, p.submit_ns, lane.start_ns, lane.compute_ns, lane.stop_ns, t});
            }
            fire.emplace_back(p.promise, lane.error);
            if (!lane.queue.empty()) {
                launch(i);
            }
        }
    }
    for (auto& [p, e] : fire) {
        if (e) {
            p.set_exception(e);
        } else {
            p.set_value();
        }
    }
    return static_cast<int>(fire.size());
}

void LanePool::shutdown() {
    {
        std::lock_guard l(m_);
        if (shut_) {
            return;
        }
        shut_ = true;
    }
    while (in_flight_.load() > 0) {
        if (Scheduler::current() == &sched_) {
            sched_.help_once();
        } else {
            poll();
            std::this_thread::yield();
        }
    }
}

void LanePool::set_recording(bool on) {
    std::lock_guard l(m_);
    recording_ = on;
}

std::vector<KernelRecord> LanePool::take_records() {
    std::lock_guard l(m_);
    return std::exchange(records_, {});
}

// ---------------------------------------------------------------------------
// BufferManager

std::size_t BufferManager::size_class(std::size_t elements) {
    std::size_t c = 64;
    while (c < elements) {
        c <<= 1;
    }
    return c;
}

Buffer BufferManager::acquire(std::size_t elements) {
    if (elements == 0) {
        throw Error("buffer size must be positive");
    }
    const std::size_t cls = size_class(elements);
    std::lock_guard l(m_);
    real* p = nullptr;
    auto& fl = free_[cls];
    if (!fl.empty()) {
        p = fl.back();
        fl.pop_back();
        ++reuses_;
    } else {
        storage_.push_back(std::make_unique<real[]>(cls));
        p = storage_.back().get();
        ++allocations_;
    }
    loaned_.emplace(p, cls);
    outstanding_ += cls * sizeof(real);
    high_water_ = std::max(high_water_, outstanding_);
    return Buffer{p, cls};
}

void BufferManager::release(Buffer b) {
    std::lock_guard l(m_);
    auto it = loaned_.find(b.data);
    if (it == loaned_.end()) {
        throw Error("buffer released twice or not owned by this manager");
    }
    const std::size_t cls = it->second;
    loaned_.erase(it);
    outstanding_ -= cls * sizeof(real);
    free_[cls].push_back(b.data);
}

std::uint64_t BufferManager::allocations() const {
    std::lock_guard l(m_);
    return allocations_;
}
std::uint64_t BufferManager::reuses() const {
    std::lock_guard l(m_);
    return reuses_;
}
std::size_t BufferManager::bytes_outstanding() const {
    std::lock_guard l(m_);
    return outstanding_;
}
std::size_t BufferManager::high_water() const {
    std::lock_guard l(m_);
    return high_water_;
}

}  // namespace octo::rt
