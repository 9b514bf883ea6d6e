#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "octo/common.hpp"
#include "octo/mesh.hpp"
#include "octo/runtime.hpp"

namespace octo::hydro {

using mesh::ConservedState;
using mesh::Field;
using mesh::NodeId;
using mesh::Octree;
using mesh::SubGrid;

struct EosConfig {
    real gamma = 1.4;
    real dual_energy_eta = 1e-3;
    /// Densities below this are raised to it after each stage (0 disables).
    real rho_floor = 0;
};

void validate(const EosConfig& eos);

/// Primitive variables plus the passively advected entropy tracer.
struct PrimitiveState {
    real rho = 0;
    real vx = 0, vy = 0, vz = 0;
    real p = 0;
    real eint = 0;  // specific internal energy
    real tau = 0;

    real v(int axis) const { return axis == 0 ? vx : (axis == 1 ? vy : vz); }
};

enum class Scheme { old_faces, new_points };

struct HydroMode {
    Scheme scheme = Scheme::new_points;
    bool contact_detection = false;
    /// Evaluate every face quadrature point with the face-centre states.
    bool force_center_quadrature = false;
};

/// Internal energy density from the dual-energy switch.
real internal_energy_density(const ConservedState& u, const EosConfig& eos, bool* from_egas = nullptr);
PrimitiveState to_primitive(const ConservedState& u, const EosConfig& eos);
/// Conserved state with tau consistent with the internal energy.
ConservedState to_conserved(const PrimitiveState& w, const EosConfig& eos);
real sound_speed(const PrimitiveState& w, const EosConfig& eos);
/// True where the gas energy branch is selected.
bool egas_branch(const ConservedState& u, const EosConfig& eos);
/// Re-synchronises tau with egas where egas resolves the internal energy.
ConservedState dual_energy_sync(ConservedState u, const EosConfig& eos);

// ---------------------------------------------------------------------------
// reconstruction

/// Unlimited fourth-order interface value between a0 and a1.
real ppm_interface(real am1, real a0, real a1, real a2);

struct PpmFace {
    real minus = 0;  // value at the face toward -d
    real plus = 0;   // value at the face toward +d
};

/// Scalar PPM on a 5-cell stencil a[-2..2] (centre a[2]): interface values
/// clamped between their neighbours, optional contact steepening, then the
/// Colella-Woodward monotonicity constraints.
PpmFace ppm_cell(const std::array<real, 5>& a, bool limit = true, bool steepen = false);

inline constexpr int num_points = 26;
inline constexpr int num_recon_vars = 6;  // rho, vx, vy, vz, p, tau
/// Point index for a direction with components in {-1, 0, 1}, not all zero.
int point_index(int dx, int dy, int dz);
std::array<int, 3> point_direction(int point);
int opposite_point(int point);

/// Left/right reconstructed states at the 26 surface points of every cell
/// in [-1, n]^3 of one sub-grid (padded indexing of the sub-grid).
struct QuadraturePointSet {
    int n = 0;
    int padded = 0;
    std::vector<real> data;  // [point][var][padded^3]

    void resize(int n_per_side);
    std::size_t volume() const { return static_cast<std::size_t>(padded) * padded * padded; }
    real* var(int point, int v) { return data.data() + (static_cast<std::size_t>(point) * num_recon_vars + v) * volume(); }
    const real* var(int point, int v) const {
        return data.data() + (static_cast<std::size_t>(point) * num_recon_vars + v) * volume();
    }
    std::size_t index(int i, int j, int k) const {
        return static_cast<std::size_t>((i + 3) + padded * ((j + 3) + padded * (k + 3)));
    }
    PrimitiveState state(int point, int i, int j, int k, const EosConfig& eos) const;
};

struct KernelDiagnostics {
    std::uint64_t positivity_fallbacks = 0;
    real max_signal_speed = 0;
};

/// Reconstructs all points used by `mode` (26 in new mode, the 6 face
/// centres in old mode). Ghosts of `g` must be filled.
void reconstruct(const SubGrid& g, const HydroMode& mode, const EosConfig& eos, QuadraturePointSet& out,
                 KernelDiagnostics& diag);

// ---------------------------------------------------------------------------
// fluxes

using FluxVector = std::array<real, mesh::num_fields>;

/// Physical flux along `axis`.
FluxVector physical_flux(const PrimitiveState& w, int axis, const EosConfig& eos);
/// Central-upwind flux. Throws NumericalError on non-finite input.
FluxVector kt_flux(const PrimitiveState& left, const PrimitiveState& right, int axis, const EosConfig& eos,
                   real* max_speed = nullptr);

/// Quadrature weight of transverse offset (t1, t2) in {-1,0,1}^2.
real face_weight(int t1, int t2);
/// Simpson tensor-product average of 9 point fluxes, index (t1+1) + 3 (t2+1).
/// Written as centre plus weighted deviations, so equal inputs return the
/// centre value unchanged.
real face_flux(const std::array<real, 9>& point_fluxes);

// ---------------------------------------------------------------------------
// per-leaf right-hand side

/// Flux divergence and boundary fluxes of one leaf.
struct LeafRhs {
    int n = 0;
    std::array<std::vector<real>, mesh::num_fields> dudt;  // interior n^3
    /// Face fluxes on the six leaf faces, [face][field][n*n], face order -x,+x,-y,+y,-z,+z.
    std::array<std::vector<real>, 6> boundary;
    KernelDiagnostics diag;

    void resize(int n_per_side);
    real& face(int f, int field, int a, int b) {
        return boundary[static_cast<std::size_t>(f)][(static_cast<std::size_t>(field) * n + b) * n + a];
    }
    real face(int f, int field, int a, int b) const {
        return boundary[static_cast<std::size_t>(f)][(static_cast<std::size_t>(field) * n + b) * n + a];
    }
};

/// Scratch arrays for one kernel invocation.
struct KernelScratch {
    std::vector<real> prim;
    QuadraturePointSet q;
    std::vector<real> flux;
};

/// Computes -div F for the interior of `g` (ghosts filled). If `staged` is
/// non-null it is called once primitives are staged (memory phase done).
void compute_rhs(const SubGrid& g, const HydroMode& mode, const EosConfig& eos, KernelScratch& scratch, LeafRhs& out,
                 const std::function<void()>& staged = {});

// ---------------------------------------------------------------------------
// sources

/// Gravity on one leaf's interior, x-fastest n^3 arrays.
struct LeafGravity {
    std::vector<real> phi, gx, gy, gz, dphi_dt;
    void resize(std::size_t cells);
};

using GravitySolve = std::function<void(const Octree&, std::vector<LeafGravity>&)>;

struct SourceConfig {
    real omega = 0;  // frame rotation rate about +z
    GravitySolve gravity;
    /// Re-solve gravity before every stage; otherwise once per step.
    bool gravity_each_stage = true;
};

/// Source contributions for one cell at position x.
ConservedState rotating_frame_source(const ConservedState& u, const Vec3& x, real omega);
ConservedState gravity_source(const ConservedState& u, const Vec3& g);

// ---------------------------------------------------------------------------
// time integration

/// u_{s+1} = u0 + beta_s ((u_s - u0) + dt L(u_s)) with beta = 1, 1/4, 2/3:
/// the Shu-Osher SSP-RK3 stages written relative to u0.
inline constexpr std::array<real, 3> rk3_beta{1.0, 0.25, 2.0 / 3.0};
std::vector<real> ssp_rk3(const std::vector<real>& u0, real dt,
                          const std::function<std::vector<real>(const std::vector<real>&)>& rhs);

struct Execution {
    rt::Scheduler* scheduler = nullptr;  // serial when null
    rt::LanePool* lanes = nullptr;       // kernels run inline when null
    rt::BufferManager* buffers = nullptr;
};

struct StepDiagnostics {
    std::uint64_t kernel_launches = 0;
    std::uint64_t positivity_fallbacks = 0;
    real max_courant = 0;
};

/// Advances a tree with SSP-RK3. Each stage runs per leaf: ghost fill,
/// reconstruct + flux kernel, then reflux, sources, update and dual-energy
/// sync, ordered by task dependencies rather than barriers.
class Integrator {
public:
    Integrator(Octree& tree, EosConfig eos, HydroMode mode, SourceConfig sources = {}, Execution exec = {});

    /// Call after any change of tree topology.
    void rebuild();

    real cfl_dt(real cfl) const;
    StepDiagnostics step(real dt);

    const std::vector<LeafGravity>& gravity() const { return grav_; }
    /// Evaluates the gravity solve on the current state (no-op without one).
    void update_gravity();

    const EosConfig& eos() const { return eos_; }
    const HydroMode& mode() const { return mode_; }
    void set_mode(const HydroMode& m) { mode_ = m; }
    std::uint64_t total_kernel_launches() const { return total_launches_; }

private:
    struct Reflux {
        int face;
        std::size_t fine_slot;  // index into leaf_ of the fine neighbour
        std::array<int, 2> offset;
    };
    void stage_ghosts(std::size_t slot);
    void stage_kernel(std::size_t slot);
    void stage_update(std::size_t slot, int stage, real dt);
    void run_stage_serial(int stage, real dt);
    void build_graph();

    Octree& tree_;
    EosConfig eos_;
    HydroMode mode_;
    SourceConfig sources_;
    Execution exec_;

    std::vector<NodeId> leaf_;
    std::vector<LeafRhs> rhs_;
    std::vector<std::array<std::vector<real>, mesh::num_fields>> u0_;
    std::vector<std::vector<Reflux>> reflux_;
    std::vector<std::vector<std::size_t>> sources_of_;  // ghost sources, as slots
    std::vector<LeafGravity> grav_;

    std::unique_ptr<rt::TaskGraph> graph_;
    real graph_dt_ = 0;
    std::atomic<std::uint64_t> launches_{0};
    std::uint64_t total_launches_ = 0;
};

}  // namespace octo::hydro
