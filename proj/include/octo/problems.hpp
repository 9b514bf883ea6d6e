#pragma once

#include <utility>
#include <vector>

#include "octo/common.hpp"
#include "octo/gravity.hpp"
#include "octo/hydro.hpp"
#include "octo/mesh.hpp"

namespace octo::problems {

using mesh::Octree;

// ---------------------------------------------------------------------------
// Sedov-Taylor blast

struct SedovConfig {
    real E0 = 1.0;
    real rho0 = 1.0;
    real p0 = 1e-6;
    real gamma = 1.4;
    /// Radius of the energy deposit in cells of the (uniform) tree.
    real deposit_radius = 2.0;
};

void validate(const SedovConfig& c);

/// Ambient gas everywhere plus E0 spread evenly over the cells whose centres
/// lie within the deposit radius of the domain centre. Requires a uniform tree.
void init_sedov(const SedovConfig& c, Octree& tree);

struct SedovPoint {
    real rho = 0;
    real v = 0;  // radial velocity
    real p = 0;
};

/// Dimensionless shock position xi0 in R = xi0 (E0 t^2 / rho0)^(1/5).
real sedov_xi0(real gamma);
/// Similarity solution for a point explosion in cold gas of density rho0.
/// Outside the shock the ambient state (rho0, 0, 0) is returned.
SedovPoint sedov_analytic(real t, real r, real E0, real rho0, real gamma);
real sedov_shock_radius(real t, real E0, real rho0, real gamma);

/// sum |rho - rho_exact| dx^3 / V_domain at time t, centred on the domain centre.
real sedov_density_error(const Octree& tree, const SedovConfig& c, real t);

// ---------------------------------------------------------------------------
// self-consistent rotating polytrope

struct StarConfig {
    real n = 1.5;           // polytropic index
    real q = 0.75;          // polar / equatorial radius
    real rho_c = 1.0;
    real theta = 0.35;      // opening criterion of the SCF gravity solves
    real radius = 1.0;      // equatorial radius
    real half_width = 2.0;  // domain is [-half_width, half_width]^3
    int n_per_side = 8;
    int max_level = 3;
    /// No rotation; only the equatorial point pins the surface.
    bool static_star = false;
    /// Atmosphere density relative to rho_c.
    real atmosphere = 1e-7;
    real tolerance = 1e-6;
    int max_iterations = 100;
    real G = 1.0;
};

void validate(const StarConfig& c);

struct Star {
    explicit Star(Octree t) : tree(std::move(t)) {}

    Octree tree;
    real omega = 0;
    real K = 0;  // p = K rho^(1 + 1/n)
    real C = 0;  // Bernoulli constant
    int iterations = 0;
    std::vector<real> residuals;  // max |d rho| / rho_c per iteration
    hydro::EosConfig eos;
};

/// Hachisu SCF iteration on an adaptive tree; a leaf at `level` is split
/// where rho >= rho_c 4^(level - max_level). Cells hold the hydrostatic gas
/// at rest in the frame rotating with `omega`.
Star scf_build_star(const StarConfig& c, rt::Scheduler* scheduler = nullptr);

/// 1 / sqrt(G rho_c).
real dynamical_time(real rho_c, real G = 1.0);

// ---------------------------------------------------------------------------
// diagnostics

/// sum |rho_ic - rho| dx^3 / V with V the volume where rho_ic > 1e-6 rho_c.
/// `absolute = false` gives the signed sum.
real density_error_l1(const Octree& state, const Octree& initial, real rho_c = 1.0, bool absolute = true);

struct Totals {
    real mass = 0;
    Vec3 momentum;
    real egas = 0;
    /// egas plus rho phi / 2 when a potential was supplied.
    real energy = 0;
};

/// Fixed-order totals over the leaves.
Totals conservation_totals(const Octree& tree, const std::vector<hydro::LeafGravity>* gravity = nullptr);

}  // namespace octo::problems
