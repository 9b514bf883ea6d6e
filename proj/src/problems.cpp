#include "octo/problems.hpp"

#include <algorithm>
#include <boost/numeric/odeint.hpp>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <sstream>

#include "octo/profiler.hpp"

namespace octo::problems {

using mesh::Field;
using mesh::NodeId;

namespace {

constexpr real alpha = 0.4;  // shock radius grows as t^alpha

Vec3 domain_center(const Octree& tree) {
    const auto& d = tree.domain();
    const real h = 0.5 * d.width;
    return {d.lower.x + h, d.lower.y + h, d.lower.z + h};
}

void require_uniform(const Octree& tree) {
    const int level = tree.node(tree.leaves().front()).level();
    for (auto id : tree.leaves()) {
        if (tree.node(id).level() != level) {
            throw StructuralError("Sedov initialisation requires a uniform tree");
        }
    }
}

// Similarity profile: u = alpha (r/t) V, rho = rho0 R, p = rho0 (alpha r_s / t)^2 Q,
// all functions of xi = r / r_s, integrated in s = ln xi from the shock inward.
struct SedovTable {
    real gamma = 0;
    real xi0 = 0;
    std::vector<real> xi, V, R, Q, dV, dR, dQ;  // derivatives in xi
};

using SedovODEState = std::array<real, 4>;  // V, R, Q, energy integral

SedovODEState sedov_rhs(const SedovODEState& x, real s, real gamma) {
    const real xi = std::exp(s);
    const real V = x[0], R = x[1], Q = x[2];
    const real P = Q / (xi * xi);
    const real Z = P / R;
    const real Vm = V - 1;
    const real den = alpha * (Vm * Vm - gamma * Z);
    const real num = Vm * (V - alpha * V * V - 2 * alpha * Z) - Z * (2 - 2 * alpha * V) + 3 * alpha * gamma * Z * V;
    const real dV = num / den;
    const real dR = -R * (3 * V + dV) / Vm;
    const real dP = P * ((2 - 2 * alpha * V) / (alpha * Vm) + gamma * dR / R);
    const real dQ = xi * xi * (dP + 2 * P);
    const real dI = std::pow(xi, 5) * R * V * V / 2 + xi * xi * xi * Q / (gamma - 1);
    return {dV, dR, dQ, dI};
}

std::shared_ptr<const SedovTable> build_sedov_table(real gamma) {
    namespace ode = boost::numeric::odeint;
    constexpr int samples = 2000;
    constexpr real xi_min = 1e-3;
    auto t = std::make_shared<SedovTable>();
    t->gamma = gamma;

    SedovODEState x{2 / (gamma + 1), (gamma + 1) / (gamma - 1), 2 / (gamma + 1), 0.0};
    std::vector<real> times;
    for (int k = samples; k >= 1; --k) {
        times.push_back(std::log(std::max(xi_min, static_cast<real>(k) / samples)));
    }
    auto system = [gamma](const SedovODEState& y, SedovODEState& dy, real s) { dy = sedov_rhs(y, s, gamma); };
    std::vector<SedovODEState> out;
    auto observer = [&](const SedovODEState& y, real) { out.push_back(y); };
    auto stepper = ode::make_dense_output(1e-12, 1e-12, ode::runge_kutta_dopri5<SedovODEState>());
    ode::integrate_times(stepper, system, x, times.begin(), times.end(), -1e-4, observer);

    const std::size_t m = out.size();
    t->xi.resize(m);
    t->V.resize(m);
    t->R.resize(m);
    t->Q.resize(m);
    t->dV.resize(m);
    t->dR.resize(m);
    t->dQ.resize(m);
    // stored in increasing xi
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t j = m - 1 - i;
        const real s = times[j];
        const real xi = std::exp(s);
        const auto d = sedov_rhs(out[j], s, gamma);
        t->xi[i] = xi;
        t->V[i] = out[j][0];
        t->R[i] = out[j][1];
        t->Q[i] = out[j][2];
        t->dV[i] = d[0] / xi;
        t->dR[i] = d[1] / xi;
        t->dQ[i] = d[2] / xi;
    }
    const real energy = -out.back()[3];  // integrated towards the centre
    t->xi0 = std::pow(4 * std::numbers::pi * alpha * alpha * energy, -0.2);
    return t;
}

std::shared_ptr<const SedovTable> sedov_table(real gamma) {
    static std::mutex mutex;
    static std::map<real, std::shared_ptr<const SedovTable>> cache;
    std::lock_guard lock(mutex);
    auto& entry = cache[gamma];
    if (!entry) {
        entry = build_sedov_table(gamma);
    }
    return entry;
}

real hermite(real x0, real x1, real f0, real f1, real d0, real d1, real x) {
    const real h = x1 - x0;
    const real u = (x - x0) / h;
    const real u2 = u * u, u3 = u2 * u;
    return (2 * u3 - 3 * u2 + 1) * f0 + (u3 - 2 * u2 + u) * h * d0 + (-2 * u3 + 3 * u2) * f1 + (u3 - u2) * h * d1;
}

// ---------------------------------------------------------------------------
// SCF helpers

real potential_at(const Octree& tree, const Vec3& x, real G) {
    real phi = 0;
    for (auto id : tree.leaves()) {
        const auto& g = tree.grid(id);
        const real vol = g.dx() * g.dx() * g.dx();
        const int n = g.n();
        real s = 0;
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < n; ++i) {
                    const real m = g.at(Field::rho, i, j, k);
                    if (m != 0) {
                        s += m / norm(g.cell_center(i, j, k) - x);
                    }
                }
            }
        }
        phi -= G * s * vol;
    }
    return phi;
}

bool refine_star(Octree& tree, const StarConfig& c) {
    const std::size_t before = tree.leaves().size();
    const int n = tree.n();
    mesh::refine_by_criterion(
        tree,
        [&](const Octree& t, NodeId id) {
            const real threshold = c.rho_c * std::pow(4.0, t.node(id).level() - c.max_level);
            const auto& g = t.grid(id);
            for (int k = 0; k < n; ++k) {
                for (int j = 0; j < n; ++j) {
                    for (int i = 0; i < n; ++i) {
                        if (g.at(Field::rho, i, j, k) >= threshold) {
                            return true;
                        }
                    }
                }
            }
            return false;
        },
        c.max_level);
    return tree.leaves().size() != before;
}

std::string history(const std::vector<real>& r) {
    std::ostringstream os;
    os << "SCF did not converge; residuals:";
    for (auto v : r) {
        os << ' ' << v;
    }
    return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Sedov

void validate(const SedovConfig& c) {
    if (!(c.E0 > 0) || !(c.rho0 > 0) || !(c.p0 > 0) || !(c.gamma > 1)) {
        throw ConfigError("Sedov: E0, rho0, p0 must be positive and gamma > 1");
    }
    if (!(c.deposit_radius >= 1)) {
        throw ConfigError("Sedov: deposit radius smaller than one cell");
    }
}

void init_sedov(const SedovConfig& c, Octree& tree) {
    validate(c);
    require_uniform(tree);
    const Vec3 centre = domain_center(tree);
    const int n = tree.n();
    const real dx = tree.grid(tree.leaves().front()).dx();
    const real radius = c.deposit_radius * dx;

    std::size_t deposit_cells = 0;
    for (auto id : tree.leaves()) {
        const auto& g = tree.grid(id);
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < n; ++i) {
                    deposit_cells += norm(g.cell_center(i, j, k) - centre) < radius;
                }
            }
        }
    }
    const real e_blast = c.E0 / (static_cast<real>(deposit_cells) * dx * dx * dx);
    hydro::EosConfig eos;
    eos.gamma = c.gamma;
    hydro::PrimitiveState ambient;
    ambient.rho = c.rho0;
    ambient.p = c.p0;
    auto blast = ambient;
    blast.p = c.p0 + (c.gamma - 1) * e_blast;
    const auto ua = hydro::to_conserved(ambient, eos);
    const auto ub = hydro::to_conserved(blast, eos);
    for (auto id : tree.leaves()) {
        auto& g = tree.grid(id);
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < n; ++i) {
                    g.set_state(i, j, k, norm(g.cell_center(i, j, k) - centre) < radius ? ub : ua);
                }
            }
        }
    }
}

real sedov_xi0(real gamma) {
    if (!(gamma > 1)) {
        throw ConfigError("Sedov: gamma must exceed 1");
    }
    return sedov_table(gamma)->xi0;
}

real sedov_shock_radius(real t, real E0, real rho0, real gamma) {
    return sedov_xi0(gamma) * std::pow(E0 * t * t / rho0, 0.2);
}

SedovPoint sedov_analytic(real t, real r, real E0, real rho0, real gamma) {
    if (!(t > 0)) {
        throw ConfigError("Sedov: analytic solution needs t > 0");
    }
    const auto tab = sedov_table(gamma);
    const real rs = tab->xi0 * std::pow(E0 * t * t / rho0, 0.2);
    if (r >= rs) {
        return {rho0, 0, 0};
    }
    const real xi = r / rs;
    const real us = alpha * rs / t;
    real V, R, Q;
    const auto& xs = tab->xi;
    if (xi <= xs.front()) {
        V = tab->V.front();
        Q = tab->Q.front();
        R = tab->R.front() * std::pow(xi / xs.front(), 3 / (gamma - 1));
    } else {
        const auto it = std::upper_bound(xs.begin(), xs.end(), xi);
        const std::size_t i1 = std::min<std::size_t>(static_cast<std::size_t>(it - xs.begin()), xs.size() - 1);
        const std::size_t i0 = i1 - 1;
        V = hermite(xs[i0], xs[i1], tab->V[i0], tab->V[i1], tab->dV[i0], tab->dV[i1], xi);
        R = hermite(xs[i0], xs[i1], tab->R[i0], tab->R[i1], tab->dR[i0], tab->dR[i1], xi);
        Q = hermite(xs[i0], xs[i1], tab->Q[i0], tab->Q[i1], tab->dQ[i0], tab->dQ[i1], xi);
    }
    return {rho0 * std::max(R, real(0)), us * xi * V, rho0 * us * us * Q};
}

real sedov_density_error(const Octree& tree, const SedovConfig& c, real t) {
    const Vec3 centre = domain_center(tree);
    const int n = tree.n();
    real sum = 0;
    for (auto id : tree.leaves()) {
        const auto& g = tree.grid(id);
        const real vol = g.dx() * g.dx() * g.dx();
        real s = 0;
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < n; ++i) {
                    const real r = norm(g.cell_center(i, j, k) - centre);
                    s += std::abs(g.at(Field::rho, i, j, k) - sedov_analytic(t, r, c.E0, c.rho0, c.gamma).rho);
                }
            }
        }
        sum += s * vol;
    }
    const real w = tree.domain().width;
    return sum / (w * w * w);
}

// ---------------------------------------------------------------------------
// star

void validate(const StarConfig& c) {
    if (!(c.q > 0 && c.q <= 1)) {
        throw ConfigError("star: axis ratio q must lie in (0, 1]");
    }
    if (!(c.n > 0) || !(c.rho_c > 0) || !(c.radius > 0) || !(c.half_width > c.radius)) {
        throw ConfigError("star: n, rho_c, radius must be positive and the star inside the domain");
    }
    if (!mesh::valid_subgrid_size(c.n_per_side) || c.max_level < 1) {
        throw ConfigError("star: invalid sub-grid size or level");
    }
    if (!(c.theta > 0) || !(c.tolerance > 0) || c.max_iterations < 1 || !(c.atmosphere > 0)) {
        throw ConfigError("star: theta, tolerance, atmosphere and iteration limit must be positive");
    }
}

Star scf_build_star(const StarConfig& c, rt::Scheduler* scheduler) {
    validate(c);
    prof::Scope scope("problems.scf");
    mesh::TreeConfig tc;
    tc.n_per_side = c.n_per_side;
    tc.domain.lower = {-c.half_width, -c.half_width, -c.half_width};
    tc.domain.width = 2 * c.half_width;
    Star star{mesh::build_uniform_tree(1, c.n_per_side, tc)};
    auto& tree = star.tree;
    const int n = c.n_per_side;
    const real R = c.radius;
    const bool rotating = !c.static_star && c.q < 1;

    auto for_cells = [&](auto&& fn) {
        for (std::size_t l = 0; l < tree.leaves().size(); ++l) {
            auto& g = tree.grid(tree.leaves()[l]);
            for (int k = 0; k < n; ++k) {
                for (int j = 0; j < n; ++j) {
                    for (int i = 0; i < n; ++i) {
                        fn(l, g, i, j, k, static_cast<std::size_t>(i + n * (j + n * k)));
                    }
                }
            }
        }
    };
    for_cells([&](std::size_t, mesh::SubGrid& g, int i, int j, int k, std::size_t) {
        const Vec3 x = g.cell_center(i, j, k);
        const real s2 = (x.x * x.x + x.y * x.y) / (R * R) + x.z * x.z / (c.q * c.q * R * R);
        g.at(Field::rho, i, j, k) = c.rho_c * std::pow(std::max(real(0), 1 - s2), c.n);
    });

    gravity::FmmConfig fc;
    fc.theta = c.theta;
    fc.G = c.G;
    gravity::Solver solver(fc, scheduler);
    std::vector<hydro::LeafGravity> grav;
    const Vec3 A{R, 0, 0}, B{0, 0, c.q * R}, O{0, 0, 0};
    real omega2 = 0, C = 0, hc = 0;
    int refinements = 0;
    bool converged = false;
    refinements += refine_star(tree, c);

    for (int it = 0; it < c.max_iterations; ++it) {
        solver.solve(tree, grav);
        const real phiA = potential_at(tree, A, c.G);
        const real phiB = potential_at(tree, B, c.G);
        const real phiO = potential_at(tree, O, c.G);
        if (rotating) {
            C = phiB;
            omega2 = 2 * (phiA - phiB) / (R * R);
            if (!(omega2 >= 0)) {
                throw NumericalError("SCF: negative squared rotation rate");
            }
        } else {
            C = phiA;
            omega2 = 0;
        }
        hc = C - phiO;
        if (!(hc > 0) || !std::isfinite(hc)) {
            throw NumericalError("SCF: non-positive central enthalpy");
        }
        real residual = 0;
        for_cells([&](std::size_t l, mesh::SubGrid& g, int i, int j, int k, std::size_t q) {
            const Vec3 x = g.cell_center(i, j, k);
            const real rc2 = x.x * x.x + x.y * x.y;
            real rho = 0;
            if (rc2 <= R * R && std::abs(x.z) <= R) {
                const real H = C - grav[l].phi[q] + 0.5 * omega2 * rc2;
                rho = c.rho_c * std::pow(std::max(real(0), H / hc), c.n);
            }
            real& cur = g.at(Field::rho, i, j, k);
            residual = std::max(residual, std::abs(rho - cur) / c.rho_c);
            cur = rho;
        });
        star.residuals.push_back(residual);
        star.iterations = it + 1;
        if (residual < c.tolerance) {
            if (refinements < 4 && refine_star(tree, c)) {
                ++refinements;
                continue;
            }
            converged = true;
            break;
        }
    }
    if (!converged) {
        throw NumericalError(history(star.residuals));
    }

    star.omega = std::sqrt(omega2);
    star.C = C;
    star.K = hc / ((c.n + 1) * std::pow(c.rho_c, 1 / c.n));
    star.eos.gamma = 1 + 1 / c.n;
    const real rho_atm = c.atmosphere * c.rho_c;
    for_cells([&](std::size_t, mesh::SubGrid& g, int i, int j, int k, std::size_t) {
        hydro::PrimitiveState w;
        w.rho = std::max(g.at(Field::rho, i, j, k), rho_atm);
        w.p = star.K * std::pow(w.rho, 1 + 1 / c.n);
        g.set_state(i, j, k, hydro::to_conserved(w, star.eos));
    });
    return star;
}

real dynamical_time(real rho_c, real G) {
    if (!(rho_c > 0) || !(G > 0)) {
        throw ConfigError("dynamical time needs positive rho_c and G");
    }
    return 1 / std::sqrt(G * rho_c);
}

// ---------------------------------------------------------------------------
// diagnostics

real density_error_l1(const Octree& state, const Octree& initial, real rho_c, bool absolute) {
    const auto& la = state.leaves();
    const auto& lb = initial.leaves();
    if (la.size() != lb.size() || state.n() != initial.n()) {
        throw StructuralError("density error: tree topologies differ");
    }
    const int n = state.n();
    real sum = 0, volume = 0;
    for (std::size_t l = 0; l < la.size(); ++l) {
        if (!(state.node(la[l]).block == initial.node(lb[l]).block)) {
            throw StructuralError("density error: tree topologies differ");
        }
        const auto& a = state.grid(la[l]);
        const auto& b = initial.grid(lb[l]);
        const real vol = a.dx() * a.dx() * a.dx();
        real s = 0, v = 0;
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < n; ++i) {
                    const real ic = b.at(Field::rho, i, j, k);
                    const real d = ic - a.at(Field::rho, i, j, k);
                    s += absolute ? std::abs(d) : d;
                    v += ic > 1e-6 * rho_c ? 1.0 : 0.0;
                }
            }
        }
        sum += s * vol;
        volume += v * vol;
    }
    if (!(volume > 0)) {
        throw NumericalError("density error: initial star volume is zero");
    }
    return sum / volume;
}

Totals conservation_totals(const Octree& tree, const std::vector<hydro::LeafGravity>* gravity) {
    Totals t;
    const int n = tree.n();
    const auto& leaves = tree.leaves();
    for (std::size_t l = 0; l < leaves.size(); ++l) {
        const auto& g = tree.grid(leaves[l]);
        const real vol = g.dx() * g.dx() * g.dx();
        real m = 0, sx = 0, sy = 0, sz = 0, e = 0, pot = 0;
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < n; ++i) {
                    const real rho = g.at(Field::rho, i, j, k);
                    m += rho;
                    sx += g.at(Field::sx, i, j, k);
                    sy += g.at(Field::sy, i, j, k);
                    sz += g.at(Field::sz, i, j, k);
                    e += g.at(Field::egas, i, j, k);
                    if (gravity && !(*gravity)[l].phi.empty()) {
                        pot += 0.5 * rho * (*gravity)[l].phi[static_cast<std::size_t>(i + n * (j + n * k))];
                    }
                }
            }
        }
        t.mass += m * vol;
        t.momentum += Vec3{sx * vol, sy * vol, sz * vol};
        t.egas += e * vol;
        t.energy += (e + pot) * vol;
    }
    return t;
}

}  // namespace octo::problems
