#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "doctest.h"
#include "octo/cli.hpp"

using namespace octo;
using namespace octo::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("octomini_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    return dir / name;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<char>& b) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

bool same_cells(const mesh::Octree& a, const mesh::Octree& b) {
    if (a.leaves().size() != b.leaves().size()) return false;
    for (std::size_t l = 0; l < a.leaves().size(); ++l) {
        if (a.node(a.leaves()[l]).block.level != b.node(b.leaves()[l]).block.level) return false;
        if (a.node(a.leaves()[l]).block.c != b.node(b.leaves()[l]).block.c) return false;
        const auto fa = a.grid(a.leaves()[l]).interior_copy();
        const auto fb = b.grid(b.leaves()[l]).interior_copy();
        for (int f = 0; f < mesh::num_fields; ++f)
            if (std::memcmp(fa[f].data(), fb[f].data(), fa[f].size() * sizeof(real)) != 0) return false;
    }
    return true;
}

// The metrics CSV with the two wall-clock columns blanked.
std::string without_wall(const std::string& csv) {
    std::istringstream in(csv);
    std::string line, out;
    while (std::getline(in, line)) {
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
        cols[3] = cols[5] = "";
        for (const auto& x : cols) out += x + ",";
        out += "\n";
    }
    return out;
}

RunConfig blast(int level, int steps) {
    RunConfig c;
    c.problem = Problem::sedov;
    c.max_level = level;
    c.steps = steps;
    return c;
}

}  // namespace

TEST_CASE("parse_config accepts the documented flags") {
    const auto c = parse_config({"--problem", "sedov", "--subgrid", "8", "--level", "3"});
    CHECK(c.problem == Problem::sedov);
    CHECK(c.n_per_side == 8);
    CHECK(c.max_level == 3);
    CHECK(effective_boundary(c) == mesh::BoundaryKind::reflecting);

    const auto d = parse_config({"--problem=star", "--hydro", "old", "--theta", "0.35", "--end-time", "2.5",
                                 "--workers", "4", "--lanes", "16", "--cfl", "0.3", "--profile", "tree,counters",
                                 "--out", "/tmp/x", "--seed", "7", "--gravity-each-stage"});
    CHECK(d.problem == Problem::star);
    CHECK(d.scheme == hydro::Scheme::old_faces);
    CHECK(d.theta == 0.35);
    CHECK(d.end_time.value() == 2.5);
    CHECK(d.workers == 4);
    CHECK(d.lanes == 16);
    CHECK(d.cfl == 0.3);
    CHECK(d.profile.tree);
    CHECK(d.profile.counters);
    CHECK_FALSE(d.profile.trace);
    CHECK(d.seed == 7);
    CHECK(d.gravity_each_stage);
    CHECK(effective_boundary(d) == mesh::BoundaryKind::outflow);
}

TEST_CASE("sub-grid 16 at level 4 gives 4096 leaves") {
    const auto c = parse_config({"--subgrid", "16", "--level", "4"});
    mesh::TreeConfig tc;
    tc.allocate_cells = false;
    const auto t = mesh::build_uniform_tree(c.max_level, c.n_per_side, tc);
    CHECK(t.leaves().size() == 4096);
    CHECK(t.interior_cells() == 16777216);
}

TEST_CASE("invalid configurations name the field") {
    auto message = [](std::vector<std::string> args) {
        try {
            parse_config(args);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string("accepted");
    };
    CHECK(message({"--subgrid", "9"}).find("subgrid") != std::string::npos);
    CHECK(message({"--theta", "1.5"}).find("theta") != std::string::npos);
    CHECK(message({"--workers", "0"}).find("workers") != std::string::npos);
    CHECK(message({"--cfl", "abc"}).find("cfl") != std::string::npos);
    CHECK(message({"--steps", "-1"}).find("steps") != std::string::npos);
    CHECK(message({"--hydro", "mid"}).find("hydro") != std::string::npos);
    CHECK(message({"--profile", "flame", "--out", "/tmp"}).find("profile") != std::string::npos);
    CHECK(message({"--profile", "tree"}).find("out") != std::string::npos);
    CHECK(message({"--problem", "star", "--boundary", "periodic"}).find("boundary") != std::string::npos);
    CHECK(message({"--no-such-flag"}) != "accepted");
    CHECK_THROWS_AS(parse_config({"--help"}), HelpRequested);
}

TEST_CASE("file, environment and flags layer in that order") {
    const auto file = scratch("run.cfg");
    write_file(file, "# comment\nsubgrid = 16\nlevel = 1\ncfl = 0.2   # trailing\nend_time = 3\n");
    const auto c = parse_config({"--level", "2"}, file);
    CHECK(c.n_per_side == 16);
    CHECK(c.max_level == 2);
    CHECK(c.cfl == 0.2);
    CHECK(c.end_time.value() == 3.0);

    ::setenv("OCTOMINI_CFL", "0.25", 1);
    ::setenv("OCTOMINI_LEVEL", "3", 1);
    const auto e = parse_config({"--level", "2"}, file);
    CHECK(e.cfl == 0.25);
    CHECK(e.max_level == 2);
    ::setenv("OCTOMINI_SUBGRID", "32", 1);
    CHECK(parse_config({}, file).n_per_side == 32);
    ::unsetenv("OCTOMINI_CFL");
    ::unsetenv("OCTOMINI_LEVEL");
    ::unsetenv("OCTOMINI_SUBGRID");

    const auto via_flag = parse_config({"--config", file.string()});
    CHECK(via_flag.n_per_side == 16);

    write_file(file, "subgrid = 8\ncolour = blue\n");
    CHECK_THROWS_AS(parse_config({}, file), ConfigError);
    write_file(file, "subgrid 8\n");
    CHECK_THROWS_AS(parse_config({}, file), ConfigError);
    CHECK_THROWS_AS(parse_config({}, scratch("missing.cfg")), ConfigError);
}

TEST_CASE("zero-step run reports the initial diagnostics") {
    const auto r = run(blast(1, 0));
    REQUIRE(r.rows.size() == 1);
    CHECK(r.steps_completed == 0);
    CHECK(r.rows[0].totals.mass == doctest::Approx(1.0).epsilon(1e-13));
    CHECK(r.cells == 4096);
    CHECK(r.mass_drift() == 0);
    CHECK_FALSE(r.rho_l1.has_value());
}

TEST_CASE("blast run conserves mass and reports throughput consistently") {
    auto c = blast(2, 10);
    c.out_dir = scratch("blast");
    const auto r = run(c);
    CHECK(r.steps_completed == 10);
    REQUIRE(r.rows.size() == 11);
    CHECK(r.mass_drift() <= 1e-12);
    CHECK(r.energy_drift() <= 1e-12);
    for (const auto& row : r.rows) {
        if (row.step == 0) continue;
        CHECK(row.dt > 0);
        CHECK(row.cells_per_second == static_cast<real>(row.cells) * row.step / row.wall_seconds);
    }
    CHECK(r.cells_per_second == static_cast<real>(r.cells) * 10 / r.wall_seconds);

    // the same identity holds for the values printed to the CSV
    std::ifstream in(c.out_dir / "metrics.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,time,dt,wall_seconds,cells,cells_per_second,mass,sx,sy,sz,egas,energy,rho_l1");
    int rows = 0;
    while (std::getline(in, line)) {
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string v;
        while (std::getline(ss, v, ',')) cols.push_back(v);
        const real step = std::stod(cols[0]), wall = std::stod(cols[3]), cells = std::stod(cols[4]);
        if (step > 0) CHECK(std::stod(cols[5]) == doctest::Approx(cells * step / wall).epsilon(1e-15));
        ++rows;
    }
    CHECK(rows == 11);
}

TEST_CASE("identical configurations give identical metrics") {
    const auto a = run(blast(1, 5));
    const auto b = run(blast(1, 5));
    CHECK(without_wall(metrics_csv(a)) == without_wall(metrics_csv(b)));
}

TEST_CASE("checkpoint round trip is bitwise") {
    std::optional<mesh::Octree> state;
    run(blast(2, 3), state);
    REQUIRE(state.has_value());
    const auto path = scratch("blast.ck");
    checkpoint_write(*state, path, 3, 0.125);
    const auto back = checkpoint_read(path);
    CHECK(back.step == 3);
    CHECK(back.time == 0.125);
    CHECK(back.tree.config().boundary == state->config().boundary);
    CHECK(same_cells(*state, back.tree));

    // adaptive tree
    auto t = mesh::build_uniform_tree(1, 8);
    t.split(t.leaves()[5]);
    for (auto id : t.leaves()) {
        auto rho = t.grid(id).field(mesh::Field::rho);
        for (std::size_t i = 0; i < rho.size(); ++i) rho[i] = 1.0 / (1.0 + i + id);
    }
    checkpoint_write(t, path);
    const auto adaptive = checkpoint_read(path);
    CHECK(adaptive.tree.leaves().size() == 15);
    CHECK(same_cells(t, adaptive.tree));
}

TEST_CASE("damaged checkpoints are rejected") {
    auto t = mesh::build_uniform_tree(1, 8);
    const auto path = scratch("damaged.ck");
    checkpoint_write(t, path);
    const auto good = slurp(path);

    auto flipped = good;
    flipped[flipped.size() / 2] ^= 0x10;
    spit(path, flipped);
    CHECK_THROWS_AS(checkpoint_read(path), IoError);

    spit(path, std::vector<char>(good.begin(), good.begin() + good.size() / 3));
    CHECK_THROWS_AS(checkpoint_read(path), IoError);

    auto version = good;
    version[8] = 9;
    spit(path, version);
    try {
        checkpoint_read(path);
        FAIL("accepted");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }

    auto magic = good;
    magic[0] = 'X';
    spit(path, magic);
    CHECK_THROWS_AS(checkpoint_read(path), IoError);
    CHECK_THROWS_AS(checkpoint_read(scratch("absent.ck")), IoError);
}

TEST_CASE("resuming matches the straight-through run") {
    std::optional<mesh::Octree> straight;
    const auto full = run(blast(2, 8), straight);

    auto first = blast(2, 4);
    first.checkpoint = scratch("resume.ck");
    run(first);
    auto second = blast(2, 8);
    second.resume = first.checkpoint;
    std::optional<mesh::Octree> resumed;
    const auto rest = run(second, resumed);
    CHECK(rest.steps_completed == 4);
    CHECK(rest.rows.front().step == 4);
    CHECK(rest.final_time == full.final_time);

    real worst = 0;
    for (std::size_t l = 0; l < straight->leaves().size(); ++l) {
        const auto a = straight->grid(straight->leaves()[l]).interior_copy();
        const auto b = resumed->grid(resumed->leaves()[l]).interior_copy();
        for (int f = 0; f < mesh::num_fields; ++f)
            for (std::size_t i = 0; i < a[f].size(); ++i)
                worst = std::max(worst, std::abs(a[f][i] - b[f][i]) / std::max<real>(1, std::abs(a[f][i])));
    }
    CHECK(worst <= 1e-13);
    CHECK(full.rows.back().totals.mass == rest.rows.back().totals.mass);
}

TEST_CASE("driver exit codes") {
    auto call = [](std::vector<std::string> args) {
        std::vector<char*> argv{const_cast<char*>("octomini")};
        for (auto& a : args) argv.push_back(a.data());
        return cli::main(static_cast<int>(argv.size()), argv.data());
    };
    CHECK(call({"--level", "1", "--steps", "0"}) == 0);
    CHECK(call({"--subgrid", "9"}) == 2);
    CHECK(call({"--resume", scratch("nothing.ck").string(), "--level", "1"}) == 4);
    CHECK(call({"--help"}) == 0);
    CHECK(exit_code(NumericalError("x")) == 3);
    CHECK(exit_code(StructuralError("x")) == 3);
    CHECK(exit_code(IoError("x")) == 4);
    CHECK(exit_code(ConfigError("x")) == 2);
}
