#include "octo/cli.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "octo/gravity.hpp"
#include "octo/hydro.hpp"
#include "octo/profiler.hpp"
#include "octo/runtime.hpp"

namespace octo::cli {

namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// configuration

struct Key {
    const char* name;
    const char* help;
    bool flag;  // boolean switch on the command line
};

constexpr Key keys[] = {
    {"problem", "sedov | star", false},
    {"hydro", "old | new", false},
    {"subgrid", "cells per sub-grid side: 8, 16 or 32", false},
    {"level", "refinement level (uniform level for sedov, maximum for star)", false},
    {"theta", "FMM opening criterion", false},
    {"steps", "stop at this step index", false},
    {"end-time", "stop at this simulation time", false},
    {"workers", "worker threads", false},
    {"lanes", "kernel lanes (0 runs kernels inline)", false},
    {"cfl", "Courant number", false},
    {"boundary", "periodic | reflecting | outflow", false},
    {"profile", "comma list of tree, graph, trace, counters, scatter, all", false},
    {"scatter-fraction", "task sampling fraction for the scatter export", false},
    {"out", "output directory for metrics and profiler artifacts", false},
    {"checkpoint", "write a checkpoint here at the end of the run", false},
    {"resume", "continue from this checkpoint", false},
    {"seed", "seed of the sampling decisions", false},
    {"contact", "enable contact-discontinuity steepening", true},
    {"force-center-quadrature", "evaluate all face points with face-centre states", true},
    {"gravity-each-stage", "solve gravity before every RK stage", true},
};

const Key* find_key(const std::string& name) {
    for (const auto& k : keys)
        if (name == k.name) return &k;
    return nullptr;
}

std::string trim(std::string s) {
    auto sp = [](unsigned char ch) { return std::isspace(ch) != 0; };
    while (!s.empty() && sp(static_cast<unsigned char>(s.back()))) s.pop_back();
    std::size_t i = 0;
    while (i < s.size() && sp(static_cast<unsigned char>(s[i]))) ++i;
    return s.substr(i);
}

std::string normalise_key(std::string k) {
    std::replace(k.begin(), k.end(), '_', '-');
    std::transform(k.begin(), k.end(), k.begin(), [](unsigned char ch) { return std::tolower(ch); });
    return k;
}

std::string env_name(const std::string& key) {
    std::string e = "OCTOMINI_";
    for (char ch : key) e += ch == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return e;
}

[[noreturn]] void bad(const std::string& field, const std::string& what) {
    throw ConfigError("field '" + field + "': " + what);
}

std::int64_t to_int(const std::string& field, const std::string& v) {
    std::int64_t out = 0;
    const auto* end = v.data() + v.size();
    const auto r = std::from_chars(v.data(), end, out);
    if (v.empty() || r.ec != std::errc{} || r.ptr != end) bad(field, "expected an integer, got '" + v + "'");
    return out;
}

real to_real(const std::string& field, const std::string& v) {
    char* end = nullptr;
    const real out = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out))
        bad(field, "expected a number, got '" + v + "'");
    return out;
}

bool to_bool(const std::string& field, const std::string& v) {
    const auto s = normalise_key(v);
    if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
    if (s == "0" || s == "false" || s == "no" || s == "off") return false;
    bad(field, "expected true or false, got '" + v + "'");
}

void apply(RunConfig& c, const std::string& key, const std::string& v) {
    if (key == "problem") {
        if (v == "sedov") c.problem = Problem::sedov;
        else if (v == "star") c.problem = Problem::star;
        else bad(key, "unknown problem '" + v + "'");
    } else if (key == "hydro") {
        if (v == "old") c.scheme = hydro::Scheme::old_faces;
        else if (v == "new") c.scheme = hydro::Scheme::new_points;
        else bad(key, "expected old or new, got '" + v + "'");
    } else if (key == "subgrid") {
        c.n_per_side = static_cast<int>(to_int(key, v));
    } else if (key == "level") {
        c.max_level = static_cast<int>(to_int(key, v));
    } else if (key == "theta") {
        c.theta = to_real(key, v);
    } else if (key == "steps") {
        c.steps = static_cast<int>(to_int(key, v));
    } else if (key == "end-time") {
        c.end_time = to_real(key, v);
    } else if (key == "workers") {
        c.workers = static_cast<int>(to_int(key, v));
    } else if (key == "lanes") {
        c.lanes = static_cast<int>(to_int(key, v));
    } else if (key == "cfl") {
        c.cfl = to_real(key, v);
    } else if (key == "boundary") {
        if (v == "periodic") c.boundary = mesh::BoundaryKind::periodic;
        else if (v == "reflecting") c.boundary = mesh::BoundaryKind::reflecting;
        else if (v == "outflow") c.boundary = mesh::BoundaryKind::outflow;
        else bad(key, "unknown boundary '" + v + "'");
    } else if (key == "profile") {
        ProfileSwitches p;
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (item == "tree") p.tree = true;
            else if (item == "graph") p.graph = true;
            else if (item == "trace") p.trace = true;
            else if (item == "counters") p.counters = true;
            else if (item == "scatter") p.scatter = true;
            else if (item == "all") p = {true, true, true, true, true};
            else if (item == "none" || item.empty()) continue;
            else bad(key, "unknown artifact '" + item + "'");
        }
        c.profile = p;
    } else if (key == "scatter-fraction") {
        c.scatter_fraction = to_real(key, v);
    } else if (key == "out") {
        c.out_dir = v;
    } else if (key == "checkpoint") {
        c.checkpoint = v;
    } else if (key == "resume") {
        c.resume = v;
    } else if (key == "seed") {
        const auto s = to_int(key, v);
        if (s < 0) bad(key, "must be non-negative");
        c.seed = static_cast<std::uint64_t>(s);
    } else if (key == "contact") {
        c.contact_detection = to_bool(key, v);
    } else if (key == "force-center-quadrature") {
        c.force_center_quadrature = to_bool(key, v);
    } else if (key == "gravity-each-stage") {
        c.gravity_each_stage = to_bool(key, v);
    } else {
        throw ConfigError("unknown key '" + key + "'");
    }
}

std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("field 'config': cannot open '" + path.string() + "'");
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
        const auto key = normalise_key(trim(line.substr(0, eq)));
        if (!find_key(key)) throw ConfigError(where + ": unknown key '" + key + "'");
        out.emplace_back(key, trim(line.substr(eq + 1)));
    }
    return out;
}

}  // namespace

RunConfig parse_config(const std::vector<std::string>& args, const std::optional<fs::path>& file) {
    CLI::App app{"octree AMR hydrodynamics with FMM gravity", "octomini"};
    std::map<std::string, std::string> flag_values;
    std::map<std::string, bool> switches;
    std::vector<std::string> profile_items;
    std::string config_path;
    app.add_option("--config", config_path, "key = value configuration file");
    for (const auto& k : keys) {
        const std::string name = std::string("--") + k.name;
        if (k.flag) {
            app.add_flag_function(
                name, [&switches, key = std::string(k.name)](std::int64_t n) { switches[key] = n > 0; }, k.help);
        } else if (std::string(k.name) == "profile") {
            app.add_option(name, profile_items, k.help)->delimiter(',');
        } else {
            app.add_option_function<std::string>(
                name, [&flag_values, key = std::string(k.name)](const std::string& v) { flag_values[key] = v; },
                k.help);
        }
    }

    std::vector<const char*> argv{"octomini"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        throw HelpRequested{app.help()};
    } catch (const CLI::ParseError& e) {
        throw ConfigError(std::string("command line: ") + e.what());
    }

    RunConfig c;
    std::optional<fs::path> cfg = file;
    if (const char* e = std::getenv("OCTOMINI_CONFIG"); e && *e) cfg = fs::path(e);
    if (!config_path.empty()) cfg = fs::path(config_path);
    if (cfg) {
        for (const auto& [k, v] : read_config_file(*cfg)) apply(c, k, v);
    }
    for (const auto& k : keys) {
        if (const char* e = std::getenv(env_name(k.name).c_str()); e != nullptr) apply(c, k.name, e);
    }
    for (const auto& [k, v] : flag_values) apply(c, k, v);
    for (const auto& [k, on] : switches) apply(c, k, on ? "true" : "false");
    if (!profile_items.empty()) {
        std::string joined;
        for (const auto& p : profile_items) joined += p + ",";
        apply(c, "profile", joined);
    }
    validate(c);
    return c;
}

void validate(const RunConfig& c) {
    if (c.n_per_side != 8 && c.n_per_side != 16 && c.n_per_side != 32)
        bad("subgrid", "must be 8, 16 or 32, got " + std::to_string(c.n_per_side));
    if (c.max_level < 0 || c.max_level > 10) bad("level", "must lie in [0, 10]");
    if (c.problem == Problem::star && c.max_level < 1) bad("level", "star needs at least level 1");
    if (!(c.theta > 0 && c.theta < 1)) bad("theta", "must lie in (0, 1)");
    if (c.steps < 0) bad("steps", "must be non-negative");
    if (c.end_time && !(*c.end_time >= 0)) bad("end-time", "must be non-negative");
    if (c.workers < 1 || c.workers > 1024) bad("workers", "must lie in [1, 1024]");
    if (c.lanes < 0 || c.lanes > 4096) bad("lanes", "must lie in [0, 4096]");
    if (!(c.cfl > 0 && c.cfl <= 1)) bad("cfl", "must lie in (0, 1]");
    if (!(c.scatter_fraction > 0 && c.scatter_fraction <= 1)) bad("scatter-fraction", "must lie in (0, 1]");
    if (c.problem == Problem::star && c.boundary && *c.boundary != mesh::BoundaryKind::outflow)
        bad("boundary", "the star runs with outflow boundaries");
    if (c.profile.any() && c.out_dir.empty()) bad("out", "profiler artifacts need an output directory");
}

mesh::BoundaryKind effective_boundary(const RunConfig& c) {
    if (c.boundary) return *c.boundary;
    return c.problem == Problem::sedov ? mesh::BoundaryKind::reflecting : mesh::BoundaryKind::outflow;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char magic[8] = {'O', 'C', 'T', 'O', 'M', 'I', 'N', 'I'};
static_assert(std::endian::native == std::endian::little, "checkpoint layout assumes a little-endian host");

std::uint64_t fnv1a(const char* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ull;
    }
    return h;
}

class Writer {
public:
    template <class T>
    void put(const T& v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        buf.insert(buf.end(), p, p + sizeof(T));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf.insert(buf.end(), c, c + n);
    }
    std::vector<char> buf;
};

class Reader {
public:
    Reader(const char* d, std::size_t n) : data_(d), size_(n) {}
    template <class T>
    T get() {
        T v;
        std::memcpy(&v, take(sizeof(T)), sizeof(T));
        return v;
    }
    const char* take(std::size_t n) {
        if (n > size_ - pos_) throw IoError("checkpoint truncated");
        const char* p = data_ + pos_;
        pos_ += n;
        return p;
    }
    std::size_t remaining() const { return size_ - pos_; }

private:
    const char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

}  // namespace

void checkpoint_write(const mesh::Octree& tree, const fs::path& path, std::uint64_t step, real time) {
    Writer w;
    const auto& cfg = tree.config();
    w.bytes(magic, sizeof magic);
    w.put(checkpoint_version);
    w.put(static_cast<std::uint32_t>(cfg.n_per_side));
    w.put(static_cast<std::uint32_t>(cfg.boundary));
    w.put(std::uint32_t{0});
    w.put(cfg.domain.lower.x);
    w.put(cfg.domain.lower.y);
    w.put(cfg.domain.lower.z);
    w.put(cfg.domain.width);
    w.put(step);
    w.put(time);
    w.put(static_cast<std::uint64_t>(tree.leaves().size()));
    for (auto id : tree.leaves()) {
        const auto path_bytes = tree.octant_path(id);
        w.put(static_cast<std::uint32_t>(path_bytes.size()));
        w.bytes(path_bytes.data(), path_bytes.size());
        const auto fields = tree.grid(id).interior_copy();
        for (const auto& f : fields) w.bytes(f.data(), f.size() * sizeof(real));
    }
    w.put(fnv1a(w.buf.data(), w.buf.size()));

    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
        if (!out) throw IoError("write to '" + tmp.string() + "' failed");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

Checkpoint checkpoint_read(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < sizeof magic + 4 + 8) throw IoError("checkpoint truncated");
    if (std::memcmp(buf.data(), magic, sizeof magic) != 0) throw IoError("not an octomini checkpoint");
    std::uint32_t version = 0;
    std::memcpy(&version, buf.data() + sizeof magic, sizeof version);
    if (version != checkpoint_version)
        throw IoError("checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(checkpoint_version));
    const std::size_t body = buf.size() - sizeof(std::uint64_t);
    std::uint64_t stored = 0;
    std::memcpy(&stored, buf.data() + body, sizeof stored);
    if (stored != fnv1a(buf.data(), body)) throw IoError("checkpoint checksum mismatch (corrupted or truncated)");

    Reader r(buf.data(), body);
    r.take(sizeof magic + sizeof version);
    mesh::TreeConfig cfg;
    cfg.n_per_side = static_cast<int>(r.get<std::uint32_t>());
    const auto boundary = r.get<std::uint32_t>();
    r.get<std::uint32_t>();
    cfg.domain.lower.x = r.get<real>();
    cfg.domain.lower.y = r.get<real>();
    cfg.domain.lower.z = r.get<real>();
    cfg.domain.width = r.get<real>();
    const auto step = r.get<std::uint64_t>();
    const auto time = r.get<real>();
    const auto count = r.get<std::uint64_t>();
    if (cfg.n_per_side != 8 && cfg.n_per_side != 16 && cfg.n_per_side != 32)
        throw IoError("checkpoint sub-grid size " + std::to_string(cfg.n_per_side) + " unsupported");
    if (boundary > 2) throw IoError("checkpoint boundary kind out of range");
    cfg.boundary = static_cast<mesh::BoundaryKind>(boundary);

    const std::size_t cells = static_cast<std::size_t>(cfg.n_per_side) * cfg.n_per_side * cfg.n_per_side;
    const std::size_t leaf_bytes = cells * mesh::num_fields * sizeof(real);
    if (count == 0 || count > r.remaining() / leaf_bytes) throw IoError("checkpoint leaf count inconsistent");

    std::vector<std::vector<std::uint8_t>> paths(count);
    std::vector<std::array<std::vector<real>, mesh::num_fields>> data(count);
    for (std::uint64_t l = 0; l < count; ++l) {
        const auto depth = r.get<std::uint32_t>();
        if (depth > 30) throw IoError("checkpoint octant path too deep");
        const char* p = r.take(depth);
        paths[l].assign(p, p + depth);
        for (auto o : paths[l])
            if (o > 7) throw IoError("checkpoint octant index out of range");
        for (auto& f : data[l]) {
            f.resize(cells);
            std::memcpy(f.data(), r.take(cells * sizeof(real)), cells * sizeof(real));
        }
    }
    if (r.remaining() != 0) throw IoError("checkpoint has trailing bytes");

    Checkpoint cp{mesh::Octree(cfg)};
    auto& t = cp.tree;
    for (const auto& p : paths) {
        if (p.empty()) continue;
        std::vector<std::uint8_t> parent(p.begin(), p.end() - 1);
        const auto id = t.ensure_path(parent);
        if (t.node(id).is_leaf()) t.split_empty(id);
    }
    if (t.leaves().size() != count) throw IoError("checkpoint leaves do not form a complete octree");
    for (std::size_t l = 0; l < count; ++l) {
        if (t.octant_path(t.leaves()[l]) != paths[l]) throw IoError("checkpoint leaves out of order");
    }
    if (!t.is_balanced()) throw IoError("checkpoint tree is not 2:1 balanced");
    for (std::size_t l = 0; l < count; ++l) t.grid(t.leaves()[l]).assign_interior(data[l]);
    cp.step = step;
    cp.time = time;
    return cp;
}

// ---------------------------------------------------------------------------
// run

real MetricsReport::mass_drift() const {
    if (rows.empty() || rows.front().totals.mass == 0) return 0;
    return std::abs(rows.back().totals.mass - rows.front().totals.mass) / std::abs(rows.front().totals.mass);
}

real MetricsReport::energy_drift() const {
    if (rows.empty() || rows.front().totals.energy == 0) return 0;
    return std::abs(rows.back().totals.energy - rows.front().totals.energy) / std::abs(rows.front().totals.energy);
}

std::string metrics_csv(const MetricsReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << "step,time,dt,wall_seconds,cells,cells_per_second,mass,sx,sy,sz,egas,energy,rho_l1\n";
    for (const auto& row : r.rows) {
        os << row.step << ',' << row.time << ',' << row.dt << ',' << row.wall_seconds << ',' << row.cells << ','
           << row.cells_per_second << ',' << row.totals.mass << ',' << row.totals.momentum.x << ','
           << row.totals.momentum.y << ',' << row.totals.momentum.z << ',' << row.totals.egas << ','
           << row.totals.energy << ',';
        if (row.rho_l1) os << *row.rho_l1;
        os << '\n';
    }
    return os.str();
}

namespace {

void write_text(const fs::path& path, const std::string& text, std::vector<fs::path>& artifacts) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("write to '" + path.string() + "' failed");
    artifacts.push_back(path);
}

// Starts and stops the profiler around one run.
struct ProfilerSession {
    explicit ProfilerSession(bool on) : on(on) {
        if (on) {
            prof::Profiler::instance().reset();
            prof::Profiler::instance().enable(true);
        }
    }
    ~ProfilerSession() {
        if (on) prof::Profiler::instance().enable(false);
    }
    bool on;
};

}  // namespace

MetricsReport run(const RunConfig& c) {
    std::optional<mesh::Octree> unused;
    return run(c, unused);
}

MetricsReport run(const RunConfig& c, std::optional<mesh::Octree>& final_tree) {
    validate(c);
    MetricsReport report;
    ProfilerSession session(c.profile.any());

    std::unique_ptr<rt::Scheduler> sched;
    std::unique_ptr<rt::LanePool> lanes;
    rt::BufferManager buffers;
    if (c.workers > 1 || c.lanes > 0) sched = std::make_unique<rt::Scheduler>(c.workers);
    if (c.lanes > 0) {
        lanes = std::make_unique<rt::LanePool>(*sched, c.lanes);
        lanes->set_recording(c.profile.trace);
    }

    // problem setup
    std::optional<mesh::Octree> tree;
    std::optional<mesh::Octree> initial;  // star reference state
    hydro::EosConfig eos;
    real omega = 0;
    if (c.problem == Problem::sedov) {
        problems::SedovConfig sc;
        eos.gamma = sc.gamma;
        mesh::TreeConfig tc;
        tc.n_per_side = c.n_per_side;
        tc.boundary = effective_boundary(c);
        tree.emplace(mesh::build_uniform_tree(c.max_level, c.n_per_side, tc));
        problems::init_sedov(sc, *tree);
    } else {
        problems::StarConfig sc;
        sc.n_per_side = c.n_per_side;
        sc.max_level = c.max_level;
        auto star = problems::scf_build_star(sc, sched.get());
        eos = star.eos;
        omega = star.omega;
        initial.emplace(star.tree.clone());
        tree.emplace(std::move(star.tree));
    }
    report.omega = omega;

    int step = 0;
    real time = 0;
    if (!c.resume.empty()) {
        auto cp = checkpoint_read(c.resume);
        if (cp.tree.n() != c.n_per_side) bad("resume", "checkpoint sub-grid size does not match 'subgrid'");
        if (cp.tree.config().boundary != tree->config().boundary)
            bad("resume", "checkpoint boundary does not match 'boundary'");
        if (initial && cp.tree.leaves().size() != initial->leaves().size())
            bad("resume", "checkpoint tree does not match the star tree");
        tree.emplace(std::move(cp.tree));
        step = static_cast<int>(cp.step);
        time = cp.time;
    }

    std::optional<gravity::Solver> solver;
    hydro::SourceConfig src;
    if (c.problem == Problem::star) {
        gravity::FmmConfig fc;
        fc.theta = c.theta;
        solver.emplace(fc, sched.get());
        src.omega = omega;
        src.gravity = gravity::make_gravity_solve(*solver);
        src.gravity_each_stage = c.gravity_each_stage;
    }
    hydro::HydroMode mode;
    mode.scheme = c.scheme;
    mode.contact_detection = c.contact_detection;
    mode.force_center_quadrature = c.force_center_quadrature;
    hydro::Execution exec{sched.get(), lanes.get(), sched ? &buffers : nullptr};
    hydro::Integrator integ(*tree, eos, mode, src, exec);

    // The potential of the starting state so that row 0 carries the full energy.
    if (c.problem == Problem::star) integ.update_gravity();

    std::optional<prof::CounterSampler> sampler;
    if (c.profile.counters) {
        sampler.emplace(std::chrono::milliseconds(50));
        sampler->add("process.cpu_seconds", [] { return prof::process_cpu_seconds(); });
        sampler->add("process.rss_bytes", [] { return prof::process_rss_bytes(); });
        sampler->add("buffers.bytes_outstanding", [&buffers] { return static_cast<double>(buffers.bytes_outstanding()); });
        if (lanes) {
            auto* lp = lanes.get();
            sampler->add("lanes.in_flight", [lp] { return static_cast<double>(lp->in_flight()); });
            sampler->add("lanes.max_in_flight", [lp] { return static_cast<double>(lp->max_in_flight()); });
        }
        sampler->start();
    }

    const std::uint64_t cells = tree->interior_cells();
    auto make_row = [&](real dt, real wall, int done) {
        MetricsRow row;
        row.step = step;
        row.time = time;
        row.dt = dt;
        row.wall_seconds = wall;
        row.cells = cells;
        row.cells_per_second = wall > 0 ? static_cast<real>(cells) * done / wall : 0;
        row.totals = problems::conservation_totals(*tree, integ.gravity().empty() ? nullptr : &integ.gravity());
        if (initial) row.rho_l1 = problems::density_error_l1(*tree, *initial);
        return row;
    };
    report.rows.push_back(make_row(0, 0, 0));

    const auto t0 = std::chrono::steady_clock::now();
    int done = 0;
    real wall = 0;
    while (step < c.steps) {
        if (c.end_time && time >= *c.end_time) break;
        real dt = integ.cfl_dt(c.cfl);
        if (c.end_time) dt = std::min(dt, *c.end_time - time);
        try {
            const auto d = integ.step(dt);
            report.positivity_fallbacks += d.positivity_fallbacks;
        } catch (const NumericalError& e) {
            throw NumericalError("step " + std::to_string(step) + " (t = " + std::to_string(time) + "): " + e.what());
        } catch (const StructuralError& e) {
            throw StructuralError("step " + std::to_string(step) + ": " + e.what());
        }
        time += dt;
        ++step;
        ++done;
        wall = std::chrono::duration<real>(std::chrono::steady_clock::now() - t0).count();
        if (sampler) sampler->sample_now();
        report.rows.push_back(make_row(dt, wall, done));
    }
    if (sampler) sampler->stop();
    if (lanes) {
        lanes->shutdown();
        report.max_lanes_in_flight = lanes->max_in_flight();
    }

    report.steps_completed = done;
    report.final_time = time;
    report.wall_seconds = wall;
    report.cells = cells;
    report.leaves = tree->leaves().size();
    report.cells_per_second = wall > 0 ? static_cast<real>(cells) * done / wall : 0;
    report.kernel_launches = integ.total_kernel_launches();
    report.rho_l1 = report.rows.back().rho_l1;

    if (!c.out_dir.empty()) {
        std::error_code ec;
        fs::create_directories(c.out_dir, ec);
        if (ec) throw IoError("cannot create output directory '" + c.out_dir.string() + "': " + ec.message());
        write_text(c.out_dir / "metrics.csv", metrics_csv(report), report.artifacts);
        if (c.profile.any()) {
            auto& p = prof::Profiler::instance();
            const auto records = p.flush();
            if (c.profile.tree) write_text(c.out_dir / "task_tree.dot", prof::export_task_tree(records), report.artifacts);
            if (c.profile.graph)
                write_text(c.out_dir / "task_graph.dot", prof::export_task_graph(records), report.artifacts);
            if (c.profile.trace) {
                std::vector<rt::KernelRecord> kernels;
                if (lanes) kernels = lanes->take_records();
                write_text(c.out_dir / "trace.json", prof::export_trace(records, kernels), report.artifacts);
            }
            if (c.profile.counters)
                write_text(c.out_dir / "counters.csv", prof::export_counters_csv(p.counters()), report.artifacts);
            if (c.profile.scatter)
                write_text(c.out_dir / "scatter.csv",
                           prof::export_scatter_csv(prof::scatter_sample(records, c.scatter_fraction, c.seed)),
                           report.artifacts);
        }
    }
    if (!c.checkpoint.empty()) {
        checkpoint_write(*tree, c.checkpoint, static_cast<std::uint64_t>(step), time);
        report.artifacts.push_back(c.checkpoint);
    }
    final_tree = std::move(tree);
    return report;
}

// ---------------------------------------------------------------------------
// driver

int exit_code(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const IoError*>(&e)) return 4;
    if (dynamic_cast<const NumericalError*>(&e) || dynamic_cast<const StructuralError*>(&e)) return 3;
    if (dynamic_cast<const CapacityError*>(&e)) return 3;
    return 1;
}

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        const auto config = parse_config(args);
        const auto report = run(config);
        std::cout << "steps " << report.steps_completed << " time " << report.final_time << " leaves "
                  << report.leaves << " cells " << report.cells << " wall " << report.wall_seconds
                  << " cells/s " << report.cells_per_second << " mass drift " << report.mass_drift();
        if (report.rho_l1) std::cout << " rho_l1 " << *report.rho_l1;
        std::cout << '\n';
        return 0;
    } catch (const HelpRequested& h) {
        std::cout << h.text;
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "octomini: " << e.what() << '\n';
        return exit_code(e);
    }
}

}  // namespace octo::cli
