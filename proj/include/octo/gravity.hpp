#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "octo/common.hpp"
#include "octo/hydro.hpp"
#include "octo/mesh.hpp"
#include "octo/runtime.hpp"

namespace octo::gravity {

using hydro::LeafGravity;
using mesh::NodeId;
using mesh::Octree;

/// Number of Cartesian multi-indices of order <= 3.
inline constexpr int num_terms = 20;

/// Multi-index exponents in the storage order
/// 0 | x y z | xx xy xz yy yz zz | xxx xxy xxz xyy xyz xzz yyy yyz yzz zzz.
const std::array<std::array<int, 3>, num_terms>& multi_indices();

/// Moments M_a = sum m (y - c)^a about `center`, a multi-index of order <= 3.
struct MultipoleExpansion {
    Vec3 center;
    std::array<real, num_terms> m{};

    real m0() const { return m[0]; }
    Vec3 m1() const { return {m[1], m[2], m[3]}; }
    /// Symmetric second-moment tensor entry (i, j), each in 0..2.
    real m2(int i, int j) const;
    /// Symmetric third-moment tensor entry.
    real m3(int i, int j, int k) const;
};

/// Moments of a point-mass set about `center`.
MultipoleExpansion moments_of(const std::vector<Vec3>& pos, const std::vector<real>& mass, const Vec3& center);
/// Shifts an expansion to a new centre (exact for order <= 3).
MultipoleExpansion translate(const MultipoleExpansion& e, const Vec3& new_center);

/// Derivatives d^a (1/|r|) for every multi-index of order <= 3.
std::array<real, num_terms> inverse_distance_derivatives(const Vec3& r);

/// Same-level multipole acceptance: (w_a + w_b) / 2 < theta * |c_a - c_b|.
bool mac_accept(real width_a, const Vec3& center_a, real width_b, const Vec3& center_b, real theta);

struct FmmConfig {
    real theta = 0.5;
    /// Reject every pair (the FMM then reduces to exact direct sums).
    bool always_reject = false;
    real G = 1.0;
};

struct FmmStats {
    std::uint64_t m2l = 0;     // accepted multipole interactions
    std::uint64_t direct = 0;  // cell-cell direct interactions
};

/// Cell-level fast multipole solver. Every octree node carries an n^3 grid
/// of expansion cells: leaf cells are point masses at cell centres, internal
/// cells hold order-3 moments of their eight children.
class Solver {
public:
    explicit Solver(FmmConfig config = {}, rt::Scheduler* scheduler = nullptr);
    ~Solver();
    Solver(Solver&&) noexcept;
    Solver& operator=(Solver&&) noexcept;

    const FmmConfig& config() const { return config_; }
    void set_theta(real theta);

    /// Potential and acceleration of the density field, per leaf.
    void solve(const Octree& tree, std::vector<LeafGravity>& out);
    /// Same for arbitrary cell masses (store[leaf][cell], x-fastest); only
    /// phi and g are written.
    void solve_masses(const Octree& tree, const std::vector<std::vector<real>>& masses, std::vector<LeafGravity>& out);

    /// Upward pass only; moments of node cell `cell` (x-fastest) after it.
    void compute_multipoles(const Octree& tree, const std::vector<std::vector<real>>& masses);
    MultipoleExpansion multipole(NodeId node, int cell) const;
    /// Moments of a whole node about its block centre.
    MultipoleExpansion node_multipole(NodeId node) const;

    const FmmStats& stats() const { return stats_; }

private:
    struct NodeData;
    struct Stencil;
    class Pass;
    friend class Pass;

    void prepare(const Octree& tree);
    void upward(const Octree& tree, const std::vector<std::vector<real>>& masses);
    void interactions(const Octree& tree);
    void gather(const Octree& tree, std::vector<LeafGravity>& out) const;

    FmmConfig config_;
    rt::Scheduler* scheduler_;
    FmmStats stats_;
    const Octree* tree_ = nullptr;
    std::vector<NodeData> nodes_;
    std::vector<std::vector<NodeId>> by_level_;
    std::vector<std::vector<Stencil>> stencils_;  // [level][parity]
    int stencil_n_ = 0;
    real stencil_theta_ = -1;
    bool stencil_reject_ = false;
    std::uint64_t topology_key_ = 0;
};

/// Cell masses rho dx^3 per leaf in leaf order.
std::vector<std::vector<real>> cell_masses(const Octree& tree);

/// Softening-free O(N^2) sums over point masses; throws on coincident points.
struct DirectField {
    std::vector<real> phi;
    std::vector<Vec3> g;
};
DirectField direct_sum(const std::vector<Vec3>& pos, const std::vector<real>& mass, real G = 1.0);
/// Direct sum over every leaf cell of a tree, returned per leaf.
void direct_sum(const Octree& tree, std::vector<LeafGravity>& out, real G = 1.0);

/// d(phi)/dt from the FMM with source -div(s) (central differences; fills
/// ghosts of the tree). Stored in out[leaf].dphi_dt.
void potential_time_derivative(Octree& tree, Solver& solver, std::vector<LeafGravity>& out);

/// GravitySolve adapter for the hydro integrator.
hydro::GravitySolve make_gravity_solve(Solver& solver);

}  // namespace octo::gravity
