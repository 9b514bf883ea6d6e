#include "octo/hydro.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>

#include "octo/profiler.hpp"

namespace octo::hydro {

void validate(const EosConfig& eos) {
    if (!(eos.gamma > 1)) {
        throw ConfigError("gamma must exceed 1");
    }
    if (!(eos.dual_energy_eta > 0 && eos.dual_energy_eta < 1)) {
        throw ConfigError("dual energy threshold must lie in (0, 1)");
    }
}

// ---------------------------------------------------------------------------
// equation of state

namespace {

inline real kinetic(real rho, real sx, real sy, real sz) {
    return rho > 0 ? 0.5 * (sx * sx + sy * sy + sz * sz) / rho : 0.0;
}

// Internal energy density via the dual-energy switch.
inline real rho_eint(real rho, real sx, real sy, real sz, real egas, real tau, real gamma, real eta) {
    const real ei = egas - kinetic(rho, sx, sy, sz);
    if (ei >= eta * egas) {
        return ei;
    }
    return std::pow(std::max(tau, real(0)), gamma);
}

}  // namespace

real internal_energy_density(const ConservedState& u, const EosConfig& eos, bool* from_egas) {
    const bool e = egas_branch(u, eos);
    if (from_egas) {
        *from_egas = e;
    }
    return rho_eint(u.rho, u.sx, u.sy, u.sz, u.egas, u.tau, eos.gamma, eos.dual_energy_eta);
}

bool egas_branch(const ConservedState& u, const EosConfig& eos) {
    return u.egas - kinetic(u.rho, u.sx, u.sy, u.sz) >= eos.dual_energy_eta * u.egas;
}

PrimitiveState to_primitive(const ConservedState& u, const EosConfig& eos) {
    PrimitiveState w;
    w.rho = u.rho;
    const real inv = 1.0 / u.rho;
    w.vx = u.sx * inv;
    w.vy = u.sy * inv;
    w.vz = u.sz * inv;
    const real re = rho_eint(u.rho, u.sx, u.sy, u.sz, u.egas, u.tau, eos.gamma, eos.dual_energy_eta);
    w.p = (eos.gamma - 1) * re;
    w.eint = re * inv;
    w.tau = u.tau;
    return w;
}

ConservedState to_conserved(const PrimitiveState& w, const EosConfig& eos) {
    ConservedState u;
    u.rho = w.rho;
    u.sx = w.rho * w.vx;
    u.sy = w.rho * w.vy;
    u.sz = w.rho * w.vz;
    const real re = w.p / (eos.gamma - 1);
    u.egas = re + 0.5 * w.rho * (w.vx * w.vx + w.vy * w.vy + w.vz * w.vz);
    u.tau = std::pow(re, 1.0 / eos.gamma);
    return u;
}

real sound_speed(const PrimitiveState& w, const EosConfig& eos) {
    return w.rho > 0 && w.p > 0 ? std::sqrt(eos.gamma * w.p / w.rho) : 0.0;
}

ConservedState dual_energy_sync(ConservedState u, const EosConfig& eos) {
    if (eos.rho_floor > 0 && u.rho < eos.rho_floor) {
        u.rho = eos.rho_floor;
        u.sx = u.sy = u.sz = 0;
        u.tau = std::max(u.tau, real(0));
        u.egas = std::pow(u.tau, eos.gamma);
        return u;
    }
    const real ei = u.egas - kinetic(u.rho, u.sx, u.sy, u.sz);
    if (ei >= eos.dual_energy_eta * u.egas) {
        u.tau = std::pow(std::max(ei, real(0)), 1.0 / eos.gamma);
    } else if (u.tau < 0) {
        u.tau = 0;
    }
    return u;
}

// ---------------------------------------------------------------------------
// PPM

real ppm_interface(real am1, real a0, real a1, real a2) {
    return (7.0 / 12.0) * (a0 + a1) - (1.0 / 12.0) * (am1 + a2);
}

namespace {

constexpr real steep_eta1 = 20.0;
constexpr real steep_eta2 = 0.05;
constexpr real steep_eps = 0.01;

inline real clamp_between(real v, real a, real b) {
    const real lo = std::min(a, b);
    const real hi = std::max(a, b);
    return std::min(std::max(v, lo), hi);
}

inline real mc_slope(real am, real a0, real ap) {
    const real dl = a0 - am;
    const real dr = ap - a0;
    const real dc = 0.5 * (ap - am);
    const real lim = std::min(std::abs(dc), 2.0 * std::min(std::abs(dl), std::abs(dr)));
    return dl * dr > 0 ? std::copysign(lim, dc) : 0.0;
}

inline void ppm_core(real am2, real am1, real a0, real ap1, real ap2, bool steepen, real& lo, real& hi) {
    real ar = clamp_between(ppm_interface(am1, a0, ap1, ap2), a0, ap1);
    real al = clamp_between(ppm_interface(am2, am1, a0, ap1), am1, a0);
    if (steepen) {
        const real dm = a0 - 2.0 * am1 + am2;
        const real dp = ap2 - 2.0 * ap1 + a0;
        const real da = ap1 - am1;
        const bool contact = dp * dm < 0 && std::abs(da) - steep_eps * std::min(std::abs(ap1), std::abs(am1)) > 0;
        const real etat = contact ? -(dp - dm) / (2.0 * da) : 0.0;
        const real eta = std::clamp(steep_eta1 * (etat - steep_eta2), real(0), real(1));
        if (eta > 0) {
            const real ald = am1 + 0.5 * mc_slope(am2, am1, a0);
            const real ard = ap1 - 0.5 * mc_slope(a0, ap1, ap2);
            al = al * (1.0 - eta) + ald * eta;
            ar = ar * (1.0 - eta) + ard * eta;
        }
    }
    if ((ar - a0) * (a0 - al) <= 0) {
        al = a0;
        ar = a0;
    } else {
        const real d = ar - al;
        const real m = a0 - 0.5 * (al + ar);
        const real d6 = d * d / 6.0;
        if (d * m > d6) {
            al = 3.0 * a0 - 2.0 * ar;
        } else if (-d6 > d * m) {
            ar = 3.0 * a0 - 2.0 * al;
        }
    }
    lo = al;
    hi = ar;
}

}  // namespace

PpmFace ppm_cell(const std::array<real, 5>& a, bool limit, bool steepen) {
    PpmFace f;
    if (!limit) {
        f.minus = ppm_interface(a[0], a[1], a[2], a[3]);
        f.plus = ppm_interface(a[1], a[2], a[3], a[4]);
        return f;
    }
    ppm_core(a[0], a[1], a[2], a[3], a[4], steepen, f.minus, f.plus);
    return f;
}

// ---------------------------------------------------------------------------
// quadrature points

int point_index(int dx, int dy, int dz) {
    const int b = (dx + 1) + 3 * (dy + 1) + 9 * (dz + 1);
    return b < 13 ? b : b - 1;
}

std::array<int, 3> point_direction(int point) {
    const int b = point < 13 ? point : point + 1;
    return {b % 3 - 1, (b / 3) % 3 - 1, b / 9 - 1};
}

int opposite_point(int point) {
    const int b = point < 13 ? point : point + 1;
    const int o = 26 - b;
    return o < 13 ? o : o - 1;
}

void QuadraturePointSet::resize(int n_per_side) {
    n = n_per_side;
    padded = n + 2 * mesh::ghost_width;
    data.assign(static_cast<std::size_t>(num_points) * num_recon_vars * volume(), 0.0);
}

PrimitiveState QuadraturePointSet::state(int point, int i, int j, int k, const EosConfig& eos) const {
    const auto idx = index(i, j, k);
    PrimitiveState w;
    w.rho = var(point, 0)[idx];
    w.vx = var(point, 1)[idx];
    w.vy = var(point, 2)[idx];
    w.vz = var(point, 3)[idx];
    w.p = var(point, 4)[idx];
    w.tau = var(point, 5)[idx];
    w.eint = w.p / ((eos.gamma - 1) * w.rho);
    return w;
}

namespace {

struct Layout {
    int n, P;
    std::size_t V;
    std::ptrdiff_t stride(const std::array<int, 3>& d) const { return d[0] + std::ptrdiff_t{P} * (d[1] + std::ptrdiff_t{P} * d[2]); }
    std::size_t index(int i, int j, int k) const {
        return static_cast<std::size_t>((i + 3) + P * ((j + 3) + P * (k + 3)));
    }
};

void compute_primitives(const SubGrid& g, const EosConfig& eos, real* prim, std::size_t V) {
    const auto rho = g.field(Field::rho);
    const auto sx = g.field(Field::sx);
    const auto sy = g.field(Field::sy);
    const auto sz = g.field(Field::sz);
    const auto eg = g.field(Field::egas);
    const auto tau = g.field(Field::tau);
    real* w0 = prim;
    real* w1 = prim + V;
    real* w2 = prim + 2 * V;
    real* w3 = prim + 3 * V;
    real* w4 = prim + 4 * V;
    real* w5 = prim + 5 * V;
    const real gm1 = eos.gamma - 1;
    for (std::size_t c = 0; c < V; ++c) {
        const real r = rho[c];
        const real inv = 1.0 / r;
        w0[c] = r;
        w1[c] = sx[c] * inv;
        w2[c] = sy[c] * inv;
        w3[c] = sz[c] * inv;
        w4[c] = gm1 * rho_eint(r, sx[c], sy[c], sz[c], eg[c], tau[c], eos.gamma, eos.dual_energy_eta);
        w5[c] = tau[c];
    }
}

// Reconstructs along the lines in `lines` (each a positive direction).
std::uint64_t reconstruct_raw(const Layout& L, const HydroMode& mode, const real* prim, real* q) {
    static const std::array<std::array<int, 3>, 3> axes{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    std::vector<std::array<int, 3>> lines;
    if (mode.scheme == Scheme::old_faces) {
        lines.assign(axes.begin(), axes.end());
    } else {
        for (int p = 0; p < num_points; ++p) {
            if (p >= 13) {
                lines.push_back(point_direction(p));
            }
        }
    }
    const int n = L.n;
    for (const auto& d : lines) {
        const int pp = point_index(d[0], d[1], d[2]);
        const int pm = opposite_point(pp);
        const std::ptrdiff_t s = L.stride(d);
        for (int v = 0; v < num_recon_vars; ++v) {
            const real* a = prim + static_cast<std::size_t>(v) * L.V;
            real* qp = q + (static_cast<std::size_t>(pp) * num_recon_vars + v) * L.V;
            real* qm = q + (static_cast<std::size_t>(pm) * num_recon_vars + v) * L.V;
            const bool steep = mode.contact_detection && v == 0;
            for (int k = -1; k <= n; ++k) {
                for (int j = -1; j <= n; ++j) {
                    const std::size_t base = L.index(-1, j, k);
                    if (steep) {
                        for (int i = 0; i < n + 2; ++i) {
                            const std::size_t c = base + static_cast<std::size_t>(i);
                            ppm_core(a[c - 2 * s], a[c - s], a[c], a[c + s], a[c + 2 * s], true, qm[c], qp[c]);
                        }
                    } else {
                        for (int i = 0; i < n + 2; ++i) {
                            const std::size_t c = base + static_cast<std::size_t>(i);
                            real lo, hi;
                            ppm_core(a[c - 2 * s], a[c - s], a[c], a[c + s], a[c + 2 * s], false, lo, hi);
                            qm[c] = lo;
                            qp[c] = hi;
                        }
                    }
                }
            }
        }
    }
    // Fall back to the cell average at points with non-positive density or
    // pressure, or whose p/rho exceeds four times that of both cells on the line.
    std::uint64_t fallbacks = 0;
    std::vector<int> used;
    for (const auto& d : lines) {
        used.push_back(point_index(d[0], d[1], d[2]));
        used.push_back(opposite_point(used.back()));
    }
    const real* pr = prim;
    const real* pp = prim + 4 * L.V;
    for (int p : used) {
        real* qr = q + (static_cast<std::size_t>(p) * num_recon_vars + 0) * L.V;
        real* qpr = q + (static_cast<std::size_t>(p) * num_recon_vars + 4) * L.V;
        real* qt = q + (static_cast<std::size_t>(p) * num_recon_vars + 5) * L.V;
        const std::ptrdiff_t s = L.stride(point_direction(p));
        for (int k = -1; k <= n; ++k) {
            for (int j = -1; j <= n; ++j) {
                const std::size_t base = L.index(-1, j, k);
                for (int i = 0; i < n + 2; ++i) {
                    const std::size_t c = base + static_cast<std::size_t>(i);
                    const std::size_t e = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(c) + s);
                    const real tmax = std::max(pp[c] / pr[c], pp[e] / pr[e]);
                    if (!(qr[c] > 0) || !(qpr[c] > 0) || qt[c] < 0 || qpr[c] > 4 * tmax * qr[c]) {
                        ++fallbacks;
                        for (int v = 0; v < num_recon_vars; ++v) {
                            q[(static_cast<std::size_t>(p) * num_recon_vars + v) * L.V + c] =
                                prim[static_cast<std::size_t>(v) * L.V + c];
                        }
                    }
                }
            }
        }
    }
    return fallbacks;
}

}  // namespace

void reconstruct(const SubGrid& g, const HydroMode& mode, const EosConfig& eos, QuadraturePointSet& out,
                 KernelDiagnostics& diag) {
    out.resize(g.n());
    Layout L{g.n(), g.padded(), g.padded_volume()};
    std::vector<real> prim(num_recon_vars * L.V);
    compute_primitives(g, eos, prim.data(), L.V);
    diag.positivity_fallbacks += reconstruct_raw(L, mode, prim.data(), out.data.data());
}

// ---------------------------------------------------------------------------
// fluxes

namespace {

// Flux of one state along `axis`; u holds the conserved vector.
inline void state_flux(real rho, real vx, real vy, real vz, real p, real tau, int axis, real gm1inv, real* f, real* u) {
    const real vn = axis == 0 ? vx : (axis == 1 ? vy : vz);
    const real E = p * gm1inv + 0.5 * rho * (vx * vx + vy * vy + vz * vz);
    u[0] = rho;
    u[1] = rho * vx;
    u[2] = rho * vy;
    u[3] = rho * vz;
    u[4] = E;
    u[5] = tau;
    f[0] = rho * vn;
    f[1] = u[1] * vn;
    f[2] = u[2] * vn;
    f[3] = u[3] * vn;
    f[1 + axis] += p;
    f[4] = (E + p) * vn;
    f[5] = tau * vn;
}

inline real safe_sound(real gamma, real p, real rho) { return (p > 0 && rho > 0) ? std::sqrt(gamma * p / rho) : 0.0; }

inline void kt_core(const real* wl, const real* wr, int axis, real gamma, real* out, real& speed) {
    const real gm1inv = 1.0 / (gamma - 1);
    real fl[6], ul[6], fr[6], ur[6];
    state_flux(wl[0], wl[1], wl[2], wl[3], wl[4], wl[5], axis, gm1inv, fl, ul);
    state_flux(wr[0], wr[1], wr[2], wr[3], wr[4], wr[5], axis, gm1inv, fr, ur);
    const real cl = safe_sound(gamma, wl[4], wl[0]);
    const real cr = safe_sound(gamma, wr[4], wr[0]);
    const real vl = wl[1 + axis];
    const real vr = wr[1 + axis];
    const real ap = std::max({real(0), vl + cl, vr + cr});
    const real am = std::min({real(0), vl - cl, vr - cr});
    speed = std::max(speed, std::max(ap, -am));
    if (ap == 0) {
        for (int f = 0; f < 6; ++f) {
            out[f] = fr[f];
        }
        return;
    }
    if (am == 0) {
        for (int f = 0; f < 6; ++f) {
            out[f] = fl[f];
        }
        return;
    }
    const real inv = 1.0 / (ap - am);
    const real apam = ap * am;
    for (int f = 0; f < 6; ++f) {
        out[f] = (ap * fl[f] - am * fr[f] + apam * (ur[f] - ul[f])) * inv;
    }
}

inline real combine9(const real* pts) {
    // deviation form: centre + sum of weighted differences
    static constexpr real wc = 1.0 / 36.0;
    static constexpr real we = 4.0 / 36.0;
    const real c = pts[4];
    const real dev = wc * ((pts[0] - c) + (pts[2] - c) + (pts[6] - c) + (pts[8] - c)) +
                     we * ((pts[1] - c) + (pts[3] - c) + (pts[5] - c) + (pts[7] - c));
    return dev == 0 ? c : c + dev;
}

}  // namespace

FluxVector physical_flux(const PrimitiveState& w, int axis, const EosConfig& eos) {
    FluxVector f{};
    real u[6];
    state_flux(w.rho, w.vx, w.vy, w.vz, w.p, w.tau, axis, 1.0 / (eos.gamma - 1), f.data(), u);
    return f;
}

FluxVector kt_flux(const PrimitiveState& left, const PrimitiveState& right, int axis, const EosConfig& eos,
                   real* max_speed) {
    const real wl[6] = {left.rho, left.vx, left.vy, left.vz, left.p, left.tau};
    const real wr[6] = {right.rho, right.vx, right.vy, right.vz, right.p, right.tau};
    for (int i = 0; i < 6; ++i) {
        if (!std::isfinite(wl[i]) || !std::isfinite(wr[i])) {
            throw NumericalError("non-finite state passed to the central-upwind flux");
        }
    }
    FluxVector out{};
    real s = 0;
    kt_core(wl, wr, axis, eos.gamma, out.data(), s);
    if (max_speed) {
        *max_speed = s;
    }
    return out;
}

real face_weight(int t1, int t2) {
    const int edges = (t1 != 0) + (t2 != 0);
    return edges == 0 ? 16.0 / 36.0 : (edges == 1 ? 4.0 / 36.0 : 1.0 / 36.0);
}

real face_flux(const std::array<real, 9>& p) { return combine9(p.data()); }

// ---------------------------------------------------------------------------
// leaf right-hand side

void LeafRhs::resize(int n_per_side) {
    n = n_per_side;
    const auto cells = static_cast<std::size_t>(n) * n * n;
    for (auto& d : dudt) {
        d.assign(cells, 0.0);
    }
    for (auto& b : boundary) {
        b.assign(static_cast<std::size_t>(mesh::num_fields) * n * n, 0.0);
    }
}

namespace {

void compute_rhs_raw(const SubGrid& g, const HydroMode& mode, const EosConfig& eos, real* prim, real* q, real* flux,
                     LeafRhs& out, const std::function<void()>& staged) {
    const int n = g.n();
    Layout L{n, g.padded(), g.padded_volume()};
    compute_primitives(g, eos, prim, L.V);
    if (staged) {
        staged();
    }
    out.diag = {};
    out.diag.positivity_fallbacks = reconstruct_raw(L, mode, prim, q);

    const bool old_mode = mode.scheme == Scheme::old_faces;
    real speed = 0;
    auto qv = [&](int point, int v) -> const real* {
        return q + (static_cast<std::size_t>(point) * num_recon_vars + v) * L.V;
    };
    for (int a = 0; a < 3; ++a) {
        const int b = a == 0 ? 1 : 0;
        const int c = 3 - a - b;
        std::array<int, 3> ea{0, 0, 0};
        ea[static_cast<std::size_t>(a)] = 1;
        const std::ptrdiff_t sa = L.stride(ea);
        // point indices: right state from cell i, left from i - e_a
        std::array<int, 9> pr{}, pl{};
        for (int t2 = -1; t2 <= 1; ++t2) {
            for (int t1 = -1; t1 <= 1; ++t1) {
                std::array<int, 3> dr{0, 0, 0}, dl{0, 0, 0};
                const bool use = !mode.force_center_quadrature;
                dr[static_cast<std::size_t>(a)] = -1;
                dl[static_cast<std::size_t>(a)] = 1;
                dr[static_cast<std::size_t>(b)] = dl[static_cast<std::size_t>(b)] = use ? t1 : 0;
                dr[static_cast<std::size_t>(c)] = dl[static_cast<std::size_t>(c)] = use ? t2 : 0;
                const int slot = (t1 + 1) + 3 * (t2 + 1);
                pr[static_cast<std::size_t>(slot)] = point_index(dr[0], dr[1], dr[2]);
                pl[static_cast<std::size_t>(slot)] = point_index(dl[0], dl[1], dl[2]);
            }
        }
        std::array<std::array<const real*, 6>, 9> QR{}, QL{};
        for (int s = 0; s < 9; ++s) {
            for (int v = 0; v < 6; ++v) {
                QR[static_cast<std::size_t>(s)][static_cast<std::size_t>(v)] = qv(pr[static_cast<std::size_t>(s)], v);
                QL[static_cast<std::size_t>(s)][static_cast<std::size_t>(v)] = qv(pl[static_cast<std::size_t>(s)], v);
            }
        }
        real* Fa = flux + static_cast<std::size_t>(a) * 6 * L.V;
        std::array<int, 3> hi{n, n, n};
        hi[static_cast<std::size_t>(a)] = n + 1;
        for (int k = 0; k < hi[2]; ++k) {
            for (int j = 0; j < hi[1]; ++j) {
                const std::size_t base = L.index(0, j, k);
                for (int i = 0; i < hi[0]; ++i) {
                    const std::size_t cr = base + static_cast<std::size_t>(i);
                    const std::size_t cl = cr - static_cast<std::size_t>(sa);
                    real wl[6], wr[6], f[6];
                    if (old_mode) {
                        for (int v = 0; v < 6; ++v) {
                            wl[v] = QL[4][static_cast<std::size_t>(v)][cl];
                            wr[v] = QR[4][static_cast<std::size_t>(v)][cr];
                        }
                        kt_core(wl, wr, a, eos.gamma, f, speed);
                        for (int v = 0; v < 6; ++v) {
                            Fa[static_cast<std::size_t>(v) * L.V + cr] = f[v];
                        }
                    } else {
                        real pts[6][9];
                        for (int s = 0; s < 9; ++s) {
                            for (int v = 0; v < 6; ++v) {
                                wl[v] = QL[static_cast<std::size_t>(s)][static_cast<std::size_t>(v)][cl];
                                wr[v] = QR[static_cast<std::size_t>(s)][static_cast<std::size_t>(v)][cr];
                            }
                            kt_core(wl, wr, a, eos.gamma, f, speed);
                            for (int v = 0; v < 6; ++v) {
                                pts[v][s] = f[v];
                            }
                        }
                        for (int v = 0; v < 6; ++v) {
                            Fa[static_cast<std::size_t>(v) * L.V + cr] = combine9(pts[v]);
                        }
                    }
                }
            }
        }
    }
    out.diag.max_signal_speed = speed;

    const real inv_dx = 1.0 / g.dx();
    const std::ptrdiff_t s0 = 1, s1 = L.P, s2 = std::ptrdiff_t{L.P} * L.P;
    for (int v = 0; v < mesh::num_fields; ++v) {
        const real* F0 = flux + (0 * 6 + static_cast<std::size_t>(v)) * L.V;
        const real* F1 = flux + (1 * 6 + static_cast<std::size_t>(v)) * L.V;
        const real* F2 = flux + (2 * 6 + static_cast<std::size_t>(v)) * L.V;
        real* d = out.dudt[static_cast<std::size_t>(v)].data();
        std::size_t m = 0;
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                const std::size_t base = L.index(0, j, k);
                for (int i = 0; i < n; ++i, ++m) {
                    const std::size_t cc = base + static_cast<std::size_t>(i);
                    const real div = (F0[cc + s0] - F0[cc]) + (F1[cc + s1] - F1[cc]) + (F2[cc + s2] - F2[cc]);
                    d[m] = -div * inv_dx;
                }
            }
        }
        // boundary faces, transverse indices in increasing axis order
        for (int a = 0; a < 3; ++a) {
            const real* Fa = flux + (static_cast<std::size_t>(a) * 6 + static_cast<std::size_t>(v)) * L.V;
            for (int side = 0; side < 2; ++side) {
                const int f = 2 * a + side;
                const int pos = side == 0 ? 0 : n;
                for (int tb = 0; tb < n; ++tb) {
                    for (int ta = 0; ta < n; ++ta) {
                        std::array<int, 3> ijk{};
                        ijk[static_cast<std::size_t>(a)] = pos;
                        ijk[static_cast<std::size_t>(a == 0 ? 1 : 0)] = ta;
                        ijk[static_cast<std::size_t>(a == 2 ? 1 : 2)] = tb;
                        out.face(f, v, ta, tb) = Fa[L.index(ijk[0], ijk[1], ijk[2])];
                    }
                }
            }
        }
    }
}

}  // namespace

void compute_rhs(const SubGrid& g, const HydroMode& mode, const EosConfig& eos, KernelScratch& scratch, LeafRhs& out,
                 const std::function<void()>& staged) {
    const std::size_t V = g.padded_volume();
    scratch.prim.resize(num_recon_vars * V);
    scratch.q.n = g.n();
    scratch.q.padded = g.padded();
    scratch.q.data.resize(static_cast<std::size_t>(num_points) * num_recon_vars * V);
    scratch.flux.resize(3 * 6 * V);
    if (out.n != g.n()) {
        out.resize(g.n());
    }
    compute_rhs_raw(g, mode, eos, scratch.prim.data(), scratch.q.data.data(), scratch.flux.data(), out, staged);
}

// ---------------------------------------------------------------------------
// sources

void LeafGravity::resize(std::size_t cells) {
    for (auto* v : {&phi, &gx, &gy, &gz, &dphi_dt}) {
        v->assign(cells, 0.0);
    }
}

ConservedState rotating_frame_source(const ConservedState& u, const Vec3& x, real omega) {
    ConservedState s;
    if (omega == 0) {
        return s;
    }
    const real w2 = omega * omega;
    // Coriolis -2 Omega x s, Omega along z; it does no work
    s.sx = 2 * omega * u.sy + u.rho * w2 * x.x;
    s.sy = -2 * omega * u.sx + u.rho * w2 * x.y;
    s.egas = w2 * (u.sx * x.x + u.sy * x.y);
    return s;
}

ConservedState gravity_source(const ConservedState& u, const Vec3& g) {
    ConservedState s;
    s.sx = u.rho * g.x;
    s.sy = u.rho * g.y;
    s.sz = u.rho * g.z;
    s.egas = u.sx * g.x + u.sy * g.y + u.sz * g.z;
    return s;
}

// ---------------------------------------------------------------------------
// time integration

std::vector<real> ssp_rk3(const std::vector<real>& u0, real dt,
                          const std::function<std::vector<real>(const std::vector<real>&)>& rhs) {
    std::vector<real> u = u0;
    for (int s = 0; s < 3; ++s) {
        const auto L = rhs(u);
        for (std::size_t i = 0; i < u.size(); ++i) {
            u[i] = u0[i] + rk3_beta[static_cast<std::size_t>(s)] * ((u[i] - u0[i]) + dt * L[i]);
        }
    }
    return u;
}

Integrator::Integrator(Octree& tree, EosConfig eos, HydroMode mode, SourceConfig sources, Execution exec)
    : tree_(tree), eos_(eos), mode_(mode), sources_(std::move(sources)), exec_(exec) {
    validate(eos_);
    rebuild();
}

void Integrator::rebuild() {
    leaf_ = tree_.leaves();
    const int n = tree_.n();
    const std::size_t cells = static_cast<std::size_t>(n) * n * n;
    rhs_.assign(leaf_.size(), LeafRhs{});
    u0_.assign(leaf_.size(), {});
    grav_.assign(leaf_.size(), LeafGravity{});
    std::unordered_map<NodeId, std::size_t> slot;
    for (std::size_t i = 0; i < leaf_.size(); ++i) {
        slot[leaf_[i]] = i;
        rhs_[i].resize(n);
        for (auto& f : u0_[i]) {
            f.assign(cells, 0.0);
        }
        if (sources_.gravity) {
            grav_[i].resize(cells);
        }
    }
    sources_of_.assign(leaf_.size(), {});
    reflux_.assign(leaf_.size(), {});
    for (std::size_t i = 0; i < leaf_.size(); ++i) {
        for (auto s : tree_.ghost_sources(leaf_[i])) {
            sources_of_[i].push_back(slot.at(s));
        }
        const auto& xb = tree_.node(leaf_[i]).block;
        for (int f = 0; f < 6; ++f) {
            for (auto y : tree_.face_neighbors(leaf_[i], f)) {
                const auto& yb = tree_.node(y).block;
                if (yb.level != xb.level + 1) {
                    continue;
                }
                const int a = f / 2;
                const int b0 = a == 0 ? 1 : 0;
                const int b1 = a == 2 ? 1 : 2;
                reflux_[i].push_back(Reflux{f, slot.at(y),
                                            {static_cast<int>(yb.c[static_cast<std::size_t>(b0)] & 1),
                                             static_cast<int>(yb.c[static_cast<std::size_t>(b1)] & 1)}});
            }
        }
    }
    graph_.reset();
}

real Integrator::cfl_dt(real cfl) const {
    real dt = std::numeric_limits<real>::infinity();
    const int n = tree_.n();
    for (auto id : tree_.leaves()) {
        const auto& g = tree_.grid(id);
        real smax = 0;
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < n; ++i) {
                    const auto w = to_primitive(g.state(i, j, k), eos_);
                    const real s =
                        std::max({std::abs(w.vx), std::abs(w.vy), std::abs(w.vz)}) + sound_speed(w, eos_);
                    if (!std::isfinite(s)) {
                        throw NumericalError("non-finite wave speed in leaf " + std::to_string(id));
                    }
                    smax = std::max(smax, s);
                }
            }
        }
        if (smax > 0) {
            dt = std::min(dt, cfl * g.dx() / smax);
        }
    }
    if (!std::isfinite(dt)) {
        throw NumericalError("no finite time step: all wave speeds vanish");
    }
    return dt;
}

void Integrator::update_gravity() {
    if (!sources_.gravity) {
        return;
    }
    prof::Scope scope("gravity.solve");
    sources_.gravity(tree_, grav_);
}

void Integrator::stage_ghosts(std::size_t slot) {
    prof::Scope scope("hydro.ghost_fill");
    mesh::fill_ghosts(tree_, leaf_[slot]);
}

void Integrator::stage_kernel(std::size_t slot) {
    prof::Scope scope("hydro.kernel");
    const auto& g = tree_.grid(leaf_[slot]);
    const std::size_t V = g.padded_volume();
    auto staged = [] { rt::kernel_compute_begin(); };
    if (exec_.buffers) {
        rt::ScopedBuffer prim(*exec_.buffers, num_recon_vars * V);
        rt::ScopedBuffer q(*exec_.buffers, static_cast<std::size_t>(num_points) * num_recon_vars * V);
        rt::ScopedBuffer f(*exec_.buffers, 3 * 6 * V);
        compute_rhs_raw(g, mode_, eos_, prim.data(), q.data(), f.data(), rhs_[slot], staged);
    } else {
        thread_local KernelScratch scratch;
        compute_rhs(g, mode_, eos_, scratch, rhs_[slot], staged);
    }
    launches_.fetch_add(1, std::memory_order_relaxed);
}

void Integrator::stage_update(std::size_t slot, int stage, real dt) {
    prof::Scope scope("hydro.update");
    auto& g = tree_.grid(leaf_[slot]);
    auto& r = rhs_[slot];
    const int n = g.n();
    const int half = n / 2;
    const real inv_dx = 1.0 / g.dx();
    const real courant = dt * r.diag.max_signal_speed * inv_dx;
    if (!(courant <= 1.0)) {
        throw NumericalError("Courant number " + std::to_string(courant) + " exceeds 1 in leaf " +
                             std::to_string(leaf_[slot]) + " during stage " + std::to_string(stage + 1));
    }
    // coarse-fine faces take the mean of the four fine fluxes
    for (const auto& rf : reflux_[slot]) {
        const auto& fine = rhs_[rf.fine_slot];
        const int a = rf.face / 2;
        const int side = rf.face % 2;
        const int ff = 2 * a + (1 - side);
        for (int v = 0; v < mesh::num_fields; ++v) {
            auto& d = r.dudt[static_cast<std::size_t>(v)];
            for (int tb = 0; tb < half; ++tb) {
                for (int ta = 0; ta < half; ++ta) {
                    const real fnew = 0.25 * ((fine.face(ff, v, 2 * ta, 2 * tb) + fine.face(ff, v, 2 * ta + 1, 2 * tb)) +
                                              (fine.face(ff, v, 2 * ta, 2 * tb + 1) +
                                               fine.face(ff, v, 2 * ta + 1, 2 * tb + 1)));
                    const int ca = ta + rf.offset[0] * half;
                    const int cb = tb + rf.offset[1] * half;
                    const real delta = (fnew - r.face(rf.face, v, ca, cb)) * inv_dx;
                    std::array<int, 3> ijk{};
                    ijk[static_cast<std::size_t>(a)] = side == 0 ? 0 : n - 1;
                    ijk[static_cast<std::size_t>(a == 0 ? 1 : 0)] = ca;
                    ijk[static_cast<std::size_t>(a == 2 ? 1 : 2)] = cb;
                    const std::size_t m = static_cast<std::size_t>(ijk[0] + n * (ijk[1] + n * ijk[2]));
                    d[m] += side == 0 ? delta : -delta;
                }
            }
        }
    }
    const real beta = rk3_beta[static_cast<std::size_t>(stage)];
    const bool grav = static_cast<bool>(sources_.gravity);
    const auto& lg = grav_[slot];
    const auto& u0 = u0_[slot];
    std::size_t m = 0;
    for (int k = 0; k < n; ++k) {
        for (int j = 0; j < n; ++j) {
            for (int i = 0; i < n; ++i, ++m) {
                ConservedState u = g.state(i, j, k);
                ConservedState L;
                for (int v = 0; v < mesh::num_fields; ++v) {
                    L[v] = r.dudt[static_cast<std::size_t>(v)][m];
                }
                if (sources_.omega != 0) {
                    const auto s = rotating_frame_source(u, g.cell_center(i, j, k), sources_.omega);
                    for (int v = 0; v < mesh::num_fields; ++v) {
                        L[v] += s[v];
                    }
                }
                if (grav) {
                    const auto s = gravity_source(u, Vec3{lg.gx[m], lg.gy[m], lg.gz[m]});
                    for (int v = 0; v < mesh::num_fields; ++v) {
                        L[v] += s[v];
                    }
                }
                ConservedState out;
                for (int v = 0; v < mesh::num_fields; ++v) {
                    const real base = u0[static_cast<std::size_t>(v)][m];
                    out[v] = base + beta * ((u[v] - base) + dt * L[v]);
                }
                out = dual_energy_sync(out, eos_);
                if (!std::isfinite(out.rho) || !std::isfinite(out.egas) || !(out.rho > 0)) {
                    throw NumericalError("invalid state in leaf " + std::to_string(leaf_[slot]) + " cell (" +
                                         std::to_string(i) + "," + std::to_string(j) + "," + std::to_string(k) + ")");
                }
                g.set_state(i, j, k, out);
            }
        }
    }
}

void Integrator::run_stage_serial(int stage, real dt) {
    if (stage == 0 || sources_.gravity_each_stage) {
        update_gravity();
    }
    for (std::size_t s = 0; s < leaf_.size(); ++s) {
        stage_ghosts(s);
    }
    for (std::size_t s = 0; s < leaf_.size(); ++s) {
        stage_kernel(s);
    }
    for (std::size_t s = 0; s < leaf_.size(); ++s) {
        stage_update(s, stage, dt);
    }
}

void Integrator::build_graph() {
    graph_ = std::make_unique<rt::TaskGraph>();
    auto& G = *graph_;
    const std::size_t N = leaf_.size();
    // readers[x]: leaves whose ghosts read x
    std::vector<std::vector<std::size_t>> readers(N);
    for (std::size_t y = 0; y < N; ++y) {
        for (auto x : sources_of_[y]) {
            readers[x].push_back(y);
        }
    }
    std::vector<std::size_t> prev_u;
    for (int s = 0; s < 3; ++s) {
        std::vector<std::size_t> g(N), r(N), u(N);
        std::size_t grav = 0;
        const bool has_grav = sources_.gravity && (s == 0 || sources_.gravity_each_stage);
        if (has_grav) {
            grav = G.add("gravity", [this] { update_gravity(); });
            for (auto p : prev_u) {
                G.depend(grav, p);
            }
        }
        for (std::size_t x = 0; x < N; ++x) {
            g[x] = G.add("ghost", [this, x] { stage_ghosts(x); });
            if (exec_.lanes) {
                r[x] = G.add_async("kernel", [this, x] {
                    return exec_.lanes->submit("hydro", [this, x] { stage_kernel(x); });
                });
            } else {
                r[x] = G.add("kernel", [this, x] { stage_kernel(x); });
            }
            u[x] = G.add("update", [this, x, s] { stage_update(x, s, graph_dt_); });
        }
        for (std::size_t x = 0; x < N; ++x) {
            G.depend(r[x], g[x]);
            G.depend(u[x], r[x]);
            if (has_grav) {
                G.depend(u[x], grav);
            }
            for (auto y : readers[x]) {
                G.depend(u[x], g[y]);
            }
            for (const auto& rf : reflux_[x]) {
                G.depend(u[x], r[rf.fine_slot]);
            }
            if (!prev_u.empty()) {
                G.depend(g[x], prev_u[x]);
                for (auto y : sources_of_[x]) {
                    G.depend(g[x], prev_u[y]);
                }
            }
        }
        prev_u = u;
    }
    G.build();
}

StepDiagnostics Integrator::step(real dt) {
    if (leaf_ != tree_.leaves()) {
        rebuild();
    }
    prof::Scope scope("rk3.step");
    const int n = tree_.n();
    for (std::size_t s = 0; s < leaf_.size(); ++s) {
        u0_[s] = tree_.grid(leaf_[s]).interior_copy();
    }
    (void)n;
    launches_ = 0;
    try {
        if (exec_.scheduler) {
            if (!graph_) {
                build_graph();
            }
            graph_dt_ = dt;
            graph_->execute(*exec_.scheduler).get();
        } else {
            for (int s = 0; s < 3; ++s) {
                run_stage_serial(s, dt);
            }
        }
    } catch (...) {
        for (std::size_t s = 0; s < leaf_.size(); ++s) {
            tree_.grid(leaf_[s]).assign_interior(u0_[s]);
        }
        throw;
    }
    StepDiagnostics d;
    d.kernel_launches = launches_.load();
    for (std::size_t s = 0; s < leaf_.size(); ++s) {
        d.positivity_fallbacks += rhs_[s].diag.positivity_fallbacks;
        d.max_courant = std::max(d.max_courant, dt * rhs_[s].diag.max_signal_speed / tree_.grid(leaf_[s]).dx());
    }
    total_launches_ += d.kernel_launches;
    return d;
}

}  // namespace octo::hydro
