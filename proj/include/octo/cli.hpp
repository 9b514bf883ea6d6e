#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "octo/common.hpp"
#include "octo/mesh.hpp"
#include "octo/problems.hpp"

namespace octo::cli {

enum class Problem { sedov, star };

struct ProfileSwitches {
    bool tree = false;
    bool graph = false;
    bool trace = false;
    bool counters = false;
    bool scatter = false;
    bool any() const { return tree || graph || trace || counters || scatter; }
};

struct RunConfig {
    Problem problem = Problem::sedov;
    hydro::Scheme scheme = hydro::Scheme::new_points;
    bool contact_detection = false;
    bool force_center_quadrature = false;
    int n_per_side = 8;
    int max_level = 2;
    real theta = 0.5;
    int steps = 10;                 // target step index
    std::optional<real> end_time;   // stops at whichever comes first
    int workers = 1;
    int lanes = 0;                  // 0 runs kernels inline
    real cfl = 0.4;
    std::optional<mesh::BoundaryKind> boundary;  // problem default when unset
    bool gravity_each_stage = false;
    ProfileSwitches profile;
    real scatter_fraction = 0.01;
    std::filesystem::path out_dir;   // empty: no files
    std::filesystem::path checkpoint;
    std::filesystem::path resume;
    std::uint64_t seed = 0x5eed;
};

/// Thrown by parse_config for --help; `text` is the usage message.
struct HelpRequested {
    std::string text;
};

/// Layers defaults < config file < OCTOMINI_* environment < flags. The file
/// holds `key = value` lines (# comments); keys match the long flag names.
RunConfig parse_config(const std::vector<std::string>& args, const std::optional<std::filesystem::path>& file = {});
/// Range checks; throws ConfigError naming the field.
void validate(const RunConfig& c);

mesh::BoundaryKind effective_boundary(const RunConfig& c);

struct MetricsRow {
    int step = 0;
    real time = 0;
    real dt = 0;
    real wall_seconds = 0;  // since the timestep loop started
    std::uint64_t cells = 0;
    real cells_per_second = 0;
    problems::Totals totals;
    std::optional<real> rho_l1;
};

struct MetricsReport {
    std::vector<MetricsRow> rows;
    int steps_completed = 0;  // in this run, excluding resumed steps
    real final_time = 0;
    real wall_seconds = 0;
    std::uint64_t cells = 0;
    std::size_t leaves = 0;
    real cells_per_second = 0;
    std::uint64_t kernel_launches = 0;
    std::uint64_t positivity_fallbacks = 0;
    int max_lanes_in_flight = 0;
    real omega = 0;
    std::optional<real> rho_l1;
    std::vector<std::filesystem::path> artifacts;

    real mass_drift() const;
    real energy_drift() const;
};

MetricsReport run(const RunConfig& c);
/// Runs and also hands back the final tree.
MetricsReport run(const RunConfig& c, std::optional<mesh::Octree>& final_tree);

std::string metrics_csv(const MetricsReport& r);

// ---------------------------------------------------------------------------
// checkpoints

struct Checkpoint {
    explicit Checkpoint(mesh::Octree t) : tree(std::move(t)) {}
    mesh::Octree tree;
    std::uint64_t step = 0;
    real time = 0;
};

inline constexpr std::uint32_t checkpoint_version = 1;

void checkpoint_write(const mesh::Octree& tree, const std::filesystem::path& path, std::uint64_t step = 0,
                      real time = 0);
/// Validates the whole file before building the tree; throws IoError.
Checkpoint checkpoint_read(const std::filesystem::path& path);

/// Exit code of the driver for an exception.
int exit_code(const std::exception& e);
/// Entry point of the command-line tool.
int main(int argc, char** argv);

}  // namespace octo::cli
