#include "octo/gravity.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include "octo/profiler.hpp"

namespace octo::gravity {

namespace {

using Exps = std::array<int, 3>;

int order_of(const Exps& e) { return e[0] + e[1] + e[2]; }

struct Tables {
    std::array<Exps, num_terms> exps{};
    std::array<int, 64> lookup{};  // code(e) -> index, -1 if order > 3
    std::array<real, num_terms> inv_fact{};
    std::array<real, num_terms> sign{};  // (-1)^|a|
    // (beta, alpha, alpha+beta) with |alpha| + |beta| <= 3
    struct Term {
        int beta, alpha, sum;
    };
    std::vector<Term> m2l_full, m2l_leaf;
    // (alpha, beta <= alpha, alpha - beta)
    struct Shift {
        int hi, lo, diff;
    };
    std::vector<Shift> shifts, shifts_leaf;

    static int code(const Exps& e) { return e[0] + 4 * e[1] + 16 * e[2]; }
    int index(const Exps& e) const {
        if (e[0] < 0 || e[1] < 0 || e[2] < 0 || order_of(e) > 3) {
            return -1;
        }
        return lookup[static_cast<std::size_t>(code(e))];
    }

    Tables() {
        // storage order: by order, then lexicographic on (x desc, y desc)
        int n = 0;
        for (int ord = 0; ord <= 3; ++ord) {
            for (int a = ord; a >= 0; --a) {
                for (int b = ord - a; b >= 0; --b) {
                    exps[static_cast<std::size_t>(n++)] = {a, b, ord - a - b};
                }
            }
        }
        lookup.fill(-1);
        for (int i = 0; i < num_terms; ++i) {
            const auto& e = exps[static_cast<std::size_t>(i)];
            lookup[static_cast<std::size_t>(code(e))] = i;
            real f = 1;
            for (int v : e) {
                for (int k = 2; k <= v; ++k) {
                    f *= k;
                }
            }
            inv_fact[static_cast<std::size_t>(i)] = 1.0 / f;
            sign[static_cast<std::size_t>(i)] = order_of(e) % 2 ? -1.0 : 1.0;
        }
        for (int b = 0; b < num_terms; ++b) {
            for (int a = 0; a < num_terms; ++a) {
                const auto& eb = exps[static_cast<std::size_t>(b)];
                const auto& ea = exps[static_cast<std::size_t>(a)];
                const int s = index({ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2]});
                if (s < 0) {
                    continue;
                }
                m2l_full.push_back({b, a, s});
                if (order_of(eb) <= 1) {
                    m2l_leaf.push_back({b, a, s});
                }
            }
        }
        for (int hi = 0; hi < num_terms; ++hi) {
            for (int lo = 0; lo < num_terms; ++lo) {
                const auto& eh = exps[static_cast<std::size_t>(hi)];
                const auto& el = exps[static_cast<std::size_t>(lo)];
                const int d = index({eh[0] - el[0], eh[1] - el[1], eh[2] - el[2]});
                if (d < 0) {
                    continue;
                }
                shifts.push_back({hi, lo, d});
                if (order_of(el) <= 1) {
                    shifts_leaf.push_back({hi, lo, d});
                }
            }
        }
    }
};

const Tables& tables() {
    static const Tables t;
    return t;
}

// d^a / a! for every multi-index a.
std::array<real, num_terms> scaled_powers(const Vec3& d) {
    const auto& T = tables();
    std::array<real, num_terms> p{};
    const real v[3] = {d.x, d.y, d.z};
    for (int i = 0; i < num_terms; ++i) {
        real x = 1;
        for (int ax = 0; ax < 3; ++ax) {
            for (int k = 0; k < T.exps[static_cast<std::size_t>(i)][static_cast<std::size_t>(ax)]; ++k) {
                x *= v[ax];
            }
        }
        p[static_cast<std::size_t>(i)] = x * T.inv_fact[static_cast<std::size_t>(i)];
    }
    return p;
}

inline real dist(const Vec3& a, const Vec3& b) {
    const real dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

template <class F>
void for_each_index(rt::Scheduler* s, std::size_t count, F&& f) {
    if (!s || count < 2) {
        for (std::size_t i = 0; i < count; ++i) {
            f(i);
        }
        return;
    }
    const std::size_t chunks = std::min<std::size_t>(count, 4 * static_cast<std::size_t>(s->workers()));
    std::vector<rt::Future<void>> fs;
    fs.reserve(chunks);
    for (std::size_t c = 0; c < chunks; ++c) {
        const std::size_t b = count * c / chunks, e = count * (c + 1) / chunks;
        fs.push_back(rt::async(*s, [&f, b, e] {
            for (std::size_t i = b; i < e; ++i) {
                f(i);
            }
        }));
    }
    rt::when_all(fs, s).get();
}

}  // namespace

const std::array<std::array<int, 3>, num_terms>& multi_indices() { return tables().exps; }

real MultipoleExpansion::m2(int i, int j) const {
    Exps e{0, 0, 0};
    ++e[static_cast<std::size_t>(i)];
    ++e[static_cast<std::size_t>(j)];
    return m[static_cast<std::size_t>(tables().index(e))];
}

real MultipoleExpansion::m3(int i, int j, int k) const {
    Exps e{0, 0, 0};
    ++e[static_cast<std::size_t>(i)];
    ++e[static_cast<std::size_t>(j)];
    ++e[static_cast<std::size_t>(k)];
    return m[static_cast<std::size_t>(tables().index(e))];
}

MultipoleExpansion moments_of(const std::vector<Vec3>& pos, const std::vector<real>& mass, const Vec3& center) {
    const auto& T = tables();
    MultipoleExpansion e;
    e.center = center;
    for (std::size_t p = 0; p < pos.size(); ++p) {
        const real v[3] = {pos[p].x - center.x, pos[p].y - center.y, pos[p].z - center.z};
        for (int i = 0; i < num_terms; ++i) {
            real x = mass[p];
            for (int ax = 0; ax < 3; ++ax) {
                for (int k = 0; k < T.exps[static_cast<std::size_t>(i)][static_cast<std::size_t>(ax)]; ++k) {
                    x *= v[ax];
                }
            }
            e.m[static_cast<std::size_t>(i)] += x;
        }
    }
    return e;
}

MultipoleExpansion translate(const MultipoleExpansion& e, const Vec3& c) {
    // M_a(c) = sum_{b <= a} a!/(b!(a-b)!) d^(a-b) M_b, d = old centre - new centre
    const auto& T = tables();
    const auto p = scaled_powers({e.center.x - c.x, e.center.y - c.y, e.center.z - c.z});
    MultipoleExpansion out;
    out.center = c;
    for (const auto& s : T.shifts) {
        const auto hi = static_cast<std::size_t>(s.hi), lo = static_cast<std::size_t>(s.lo);
        out.m[hi] += p[static_cast<std::size_t>(s.diff)] * e.m[lo] * T.inv_fact[lo] / T.inv_fact[hi];
    }
    return out;
}

std::array<real, num_terms> inverse_distance_derivatives(const Vec3& r) {
    const auto& T = tables();
    const real x[3] = {r.x, r.y, r.z};
    const real r2 = r.x * r.x + r.y * r.y + r.z * r.z;
    const real ir = 1.0 / std::sqrt(r2);
    const real ir2 = ir * ir;
    const real ir3 = ir * ir2;
    const real ir5 = ir3 * ir2;
    const real ir7 = ir5 * ir2;
    std::array<real, num_terms> d{};
    for (int i = 0; i < num_terms; ++i) {
        const auto& e = T.exps[static_cast<std::size_t>(i)];
        int ax[3];
        int n = 0;
        for (int a = 0; a < 3; ++a) {
            for (int k = 0; k < e[static_cast<std::size_t>(a)]; ++k) {
                ax[n++] = a;
            }
        }
        real v = 0;
        switch (n) {
            case 0: v = ir; break;
            case 1: v = -x[ax[0]] * ir3; break;
            case 2: v = 3 * x[ax[0]] * x[ax[1]] * ir5 - (ax[0] == ax[1] ? ir3 : 0.0); break;
            default: {
                const int i0 = ax[0], i1 = ax[1], i2 = ax[2];
                real delta = 0;
                if (i1 == i2) delta += x[i0];
                if (i0 == i2) delta += x[i1];
                if (i0 == i1) delta += x[i2];
                v = -15 * x[i0] * x[i1] * x[i2] * ir7 + 3 * delta * ir5;
            }
        }
        d[static_cast<std::size_t>(i)] = v;
    }
    return d;
}

bool mac_accept(real wa, const Vec3& ca, real wb, const Vec3& cb, real theta) {
    return 0.5 * (wa + wb) < theta * dist(ca, cb);
}

// ---------------------------------------------------------------------------
// solver state

struct Solver::NodeData {
    NodeId id = mesh::no_node;
    int level = 0;
    bool leaf = false;
    std::array<std::int64_t, 3> c{};
    std::array<NodeId, 8> children{};
    NodeId parent = mesh::no_node;
    Vec3 origin;  // centre of cell (0,0,0)
    real dx = 0;
    // leaf: mass per cell; internal: tilde moments (-1)^|a| M_a / a!, 20 per cell
    std::vector<real> mt;
    // leaf: 4 per cell (phi, grad); internal: 20 per cell
    std::vector<real> L;
    std::vector<std::vector<std::pair<NodeId, int>>> inherit;  // leaf sources, internal only
    std::array<NodeId, 27> nbr{};

    int stride() const { return leaf ? 4 : num_terms; }
    Vec3 center(int i, int j, int k) const { return {origin.x + i * dx, origin.y + j * dx, origin.z + k * dx}; }
};

struct Solver::Stencil {
    struct Entry {
        int dx, dy, dz;
        bool accept;
        std::array<real, num_terms> D;
    };
    std::vector<Entry> entries;
};

Solver::Solver(FmmConfig config, rt::Scheduler* scheduler) : config_(config), scheduler_(scheduler) {
    if (!(config_.theta > 0 && config_.theta <= 1)) {
        throw ConfigError("opening criterion theta must lie in (0, 1]");
    }
}

Solver::~Solver() = default;
Solver::Solver(Solver&&) noexcept = default;
Solver& Solver::operator=(Solver&&) noexcept = default;

void Solver::set_theta(real theta) {
    if (!(theta > 0 && theta <= 1)) {
        throw ConfigError("opening criterion theta must lie in (0, 1]");
    }
    config_.theta = theta;
}

namespace {

// Largest |offset| component of a same-level pair whose parents fail.
int zone_radius(real theta) { return 2 * static_cast<int>(std::floor(1.0 / theta)) + 3; }

bool stencil_usable(const FmmConfig& c, int n) {
    // beyond ~0.577 a failing child pair can have accepted parents
    return !c.always_reject && c.theta <= 0.55 && zone_radius(c.theta) <= n;
}

std::uint64_t topology_hash(const Octree& t) {
    std::uint64_t h = 1469598103934665603ull ^ t.node_count();
    for (auto id : t.leaves()) {
        h = (h ^ static_cast<std::uint64_t>(id)) * 1099511628211ull;
    }
    return h ^ (static_cast<std::uint64_t>(t.n()) << 40);
}

}  // namespace

void Solver::prepare(const Octree& tree) {
    const auto key = topology_hash(tree);
    const int n = tree.n();
    const std::size_t cells = static_cast<std::size_t>(n) * n * n;
    if (tree_ != &tree || key != topology_key_ || nodes_.size() != tree.node_count()) {
        if (!tree.is_balanced()) {
            throw StructuralError("gravity solve requires a 2:1 balanced tree");
        }
        tree_ = &tree;
        topology_key_ = key;
        nodes_.assign(tree.node_count(), NodeData{});
        by_level_.assign(static_cast<std::size_t>(tree.max_level() + 1), {});
        for (std::size_t i = 0; i < tree.node_count(); ++i) {
            const auto id = static_cast<NodeId>(i);
            const auto& on = tree.node(id);
            auto& d = nodes_[i];
            d.id = id;
            d.level = on.block.level;
            d.leaf = on.is_leaf();
            d.c = on.block.c;
            d.children = on.children;
            d.parent = on.parent;
            const real w = tree.block_width(d.level);
            d.dx = w / n;
            const auto& lo = tree.domain().lower;
            d.origin = {lo.x + d.c[0] * w + 0.5 * d.dx, lo.y + d.c[1] * w + 0.5 * d.dx, lo.z + d.c[2] * w + 0.5 * d.dx};
            d.mt.assign(cells * (d.leaf ? 1 : num_terms), 0.0);
            d.L.assign(cells * static_cast<std::size_t>(d.stride()), 0.0);
            d.inherit.assign(d.leaf ? 0 : cells, {});
            for (int dz = -1, q = 0; dz <= 1; ++dz) {
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx, ++q) {
                        mesh::BlockCoord b{d.level, {d.c[0] + dx, d.c[1] + dy, d.c[2] + dz}};
                        d.nbr[static_cast<std::size_t>(q)] = tree.find(b);
                    }
                }
            }
            by_level_[static_cast<std::size_t>(d.level)].push_back(id);
        }
    }
    const bool rebuild_stencils = stencil_n_ != n || stencil_theta_ != config_.theta ||
                                  stencil_reject_ != config_.always_reject ||
                                  stencils_.size() < by_level_.size();
    if (rebuild_stencils) {
        stencils_.assign(by_level_.size(), {});
        stencil_n_ = n;
        stencil_theta_ = config_.theta;
        stencil_reject_ = config_.always_reject;
        const real theta = config_.theta;
        for (std::size_t lvl = 0; lvl < by_level_.size(); ++lvl) {
            const bool root = lvl == 0;
            if (!root && !stencil_usable(config_, n)) {
                continue;
            }
            const real w = tree.cell_width(static_cast<int>(lvl));
            auto& per_parity = stencils_[lvl];
            per_parity.assign(root ? 1 : 8, {});
            const int R = root ? n - 1 : zone_radius(theta);
            for (std::size_t p = 0; p < per_parity.size(); ++p) {
                const int px = static_cast<int>(p & 1), py = static_cast<int>((p >> 1) & 1),
                          pz = static_cast<int>((p >> 2) & 1);
                for (int dz = -R; dz <= R; ++dz) {
                    for (int dy = -R; dy <= R; ++dy) {
                        for (int dx = -R; dx <= R; ++dx) {
                            if (!dx && !dy && !dz) {
                                continue;
                            }
                            if (!root) {
                                // parents at unit width 2
                                auto fl = [](int v) { return v >= 0 ? v / 2 : -((1 - v) / 2); };
                                const Vec3 pc{2.0 * fl(px + dx), 2.0 * fl(py + dy), 2.0 * fl(pz + dz)};
                                if (mac_accept(2, {0, 0, 0}, 2, pc, theta)) {
                                    continue;
                                }
                            }
                            Stencil::Entry e;
                            e.dx = dx;
                            e.dy = dy;
                            e.dz = dz;
                            e.accept = !config_.always_reject &&
                                       mac_accept(1, {0, 0, 0}, 1, Vec3{real(dx), real(dy), real(dz)}, theta);
                            e.D = inverse_distance_derivatives({-dx * w, -dy * w, -dz * w});
                            per_parity[p].entries.push_back(e);
                        }
                    }
                }
            }
        }
    }
}

void Solver::upward(const Octree& tree, const std::vector<std::vector<real>>& masses) {
    const auto& T = tables();
    const int n = tree.n();
    const std::size_t cells = static_cast<std::size_t>(n) * n * n;
    if (masses.size() != tree.leaves().size()) {
        throw Error("mass array does not match the leaf count");
    }
    for (std::size_t s = 0; s < tree.leaves().size(); ++s) {
        auto& d = nodes_[static_cast<std::size_t>(tree.leaves()[s])];
        if (masses[s].size() != cells) {
            throw Error("mass array of leaf " + std::to_string(d.id) + " has the wrong size");
        }
        d.mt = masses[s];
    }
    for (int lvl = static_cast<int>(by_level_.size()) - 1; lvl >= 0; --lvl) {
        const auto& ids = by_level_[static_cast<std::size_t>(lvl)];
        for_each_index(scheduler_, ids.size(), [&](std::size_t q) {
            auto& X = nodes_[static_cast<std::size_t>(ids[q])];
            if (X.leaf) {
                return;
            }
            std::fill(X.mt.begin(), X.mt.end(), 0.0);
            const real hc = 0.25 * X.dx;  // child centre offset magnitude
            std::array<std::array<real, num_terms>, 8> P;
            for (int o = 0; o < 8; ++o) {
                // (-d)^a / a! with d = child centre - parent centre
                const auto off = mesh::octant_offset(o);
                P[static_cast<std::size_t>(o)] =
                    scaled_powers({-(off[0] ? hc : -hc), -(off[1] ? hc : -hc), -(off[2] ? hc : -hc)});
            }
            for (int k = 0; k < n; ++k) {
                for (int j = 0; j < n; ++j) {
                    for (int i = 0; i < n; ++i) {
                        real* mp = &X.mt[static_cast<std::size_t>(i + n * (j + n * k)) * num_terms];
                        for (int o = 0; o < 8; ++o) {
                            const auto off = mesh::octant_offset(o);
                            const std::int64_t gx = 2 * (X.c[0] * n + i) + off[0];
                            const std::int64_t gy = 2 * (X.c[1] * n + j) + off[1];
                            const std::int64_t gz = 2 * (X.c[2] * n + k) + off[2];
                            const int oct = static_cast<int>((gx / n - 2 * X.c[0]) + 2 * (gy / n - 2 * X.c[1]) +
                                                             4 * (gz / n - 2 * X.c[2]));
                            const auto& C = nodes_[static_cast<std::size_t>(X.children[static_cast<std::size_t>(oct)])];
                            const std::size_t cc =
                                static_cast<std::size_t>((gx % n) + n * ((gy % n) + n * (gz % n)));
                            const auto& p = P[static_cast<std::size_t>(o)];
                            if (C.leaf) {
                                const real m = C.mt[cc];
                                for (int a = 0; a < num_terms; ++a) {
                                    mp[a] += p[static_cast<std::size_t>(a)] * m;
                                }
                            } else {
                                const real* mc = &C.mt[cc * num_terms];
                                for (const auto& s : T.shifts) {
                                    mp[s.hi] += p[static_cast<std::size_t>(s.diff)] * mc[s.lo];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

// One level of interactions for one target node.
class Solver::Pass {
public:
    Pass(Solver& s, const Octree& tree) : S(s), n(tree.n()), theta(s.config_.theta), reject(s.config_.always_reject) {}

    std::uint64_t m2l = 0, direct = 0;

    void run(NodeData& X) {
        std::fill(X.L.begin(), X.L.end(), 0.0);
        for (auto& v : X.inherit) {
            v.clear();
        }
        const bool use_stencil = X.level == 0 || stencil_usable(S.config_, n);
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < n; ++i) {
                    const int t = i + n * (j + n * k);
                    real* Lt = &X.L[static_cast<std::size_t>(t) * X.stride()];
                    if (X.parent != mesh::no_node) {
                        from_parent(X, i, j, k, Lt);
                    }
                    if (use_stencil) {
                        sweep_stencil(X, i, j, k, Lt);
                    } else {
                        sweep_enumerate(X, i, j, k, Lt);
                    }
                }
            }
        }
    }

private:
    Solver& S;
    int n;
    real theta;
    bool reject;

    const NodeData& node(NodeId id) const { return S.nodes_[static_cast<std::size_t>(id)]; }

    bool accept(real wa, const Vec3& a, real wb, const Vec3& b) const { return !reject && mac_accept(wa, a, wb, b, theta); }

    static Vec3 center_of(const NodeData& Y, int cell, int n) {
        return Y.center(cell % n, (cell / n) % n, cell / (n * n));
    }

    // L at target from one source cell, D = derivatives at (target - source).
    void m2l_apply(const NodeData& X, real* Lt, const NodeData& Y, int b, const real* D) {
        const auto& T = tables();
        if (Y.leaf) {
            const real m = Y.mt[static_cast<std::size_t>(b)];
            const int nb = X.leaf ? 4 : num_terms;
            for (int q = 0; q < nb; ++q) {
                Lt[q] -= m * D[q];
            }
            return;
        }
        const real* M = &Y.mt[static_cast<std::size_t>(b) * num_terms];
        const auto& terms = X.leaf ? T.m2l_leaf : T.m2l_full;
        for (const auto& tm : terms) {
            Lt[tm.beta] -= M[tm.alpha] * D[tm.sum];
        }
    }

    void m2l_geom(const NodeData& X, const Vec3& zt, real* Lt, const NodeData& Y, int b) {
        const Vec3 zb = center_of(Y, b, n);
        if (zb.x == zt.x && zb.y == zt.y && zb.z == zt.z) {
            throw StructuralError("coincident cell centres in gravity interaction");
        }
        const auto D = inverse_distance_derivatives({zt.x - zb.x, zt.y - zb.y, zt.z - zb.z});
        m2l_apply(X, Lt, Y, b, D.data());
    }

    // Leaf target t receives from the subtree of internal source cell (Y, b).
    void recv_recursive(const NodeData& X, const Vec3& zt, real* Lt, const NodeData& Y, int b) {
        const int bi = b % n, bj = (b / n) % n, bk = b / (n * n);
        for (int o = 0; o < 8; ++o) {
            const auto off = mesh::octant_offset(o);
            const std::int64_t gx = 2 * (Y.c[0] * n + bi) + off[0];
            const std::int64_t gy = 2 * (Y.c[1] * n + bj) + off[1];
            const std::int64_t gz = 2 * (Y.c[2] * n + bk) + off[2];
            const int oct = static_cast<int>((gx / n - 2 * Y.c[0]) + 2 * (gy / n - 2 * Y.c[1]) + 4 * (gz / n - 2 * Y.c[2]));
            const auto& C = node(Y.children[static_cast<std::size_t>(oct)]);
            const int cc = static_cast<int>((gx % n) + n * ((gy % n) + n * (gz % n)));
            const Vec3 zc = center_of(C, cc, n);
            if (accept(X.dx, zt, C.dx, zc)) {
                m2l_geom(X, zt, Lt, C, cc);
                ++m2l;
            } else if (C.leaf) {
                m2l_geom(X, zt, Lt, C, cc);
                ++direct;
            } else {
                recv_recursive(X, zt, Lt, C, cc);
            }
        }
    }

    void from_parent(NodeData& X, int i, int j, int k, real* Lt) {
        const auto& T = tables();
        const auto& P = node(X.parent);
        const std::int64_t gx = X.c[0] * n + i, gy = X.c[1] * n + j, gz = X.c[2] * n + k;
        const int pi = static_cast<int>((gx >> 1) - P.c[0] * n);
        const int pj = static_cast<int>((gy >> 1) - P.c[1] * n);
        const int pk = static_cast<int>((gz >> 1) - P.c[2] * n);
        const int pc = pi + n * (pj + n * pk);
        const real* Lp = &P.L[static_cast<std::size_t>(pc) * num_terms];
        const real h = 0.5 * X.dx;
        const auto pw = scaled_powers({(gx & 1) ? h : -h, (gy & 1) ? h : -h, (gz & 1) ? h : -h});
        // L_b(child) = sum_{c >= b} L_c(parent) d^(c-b)/(c-b)!
        for (const auto& s : (X.leaf ? T.shifts_leaf : T.shifts)) {
            Lt[s.lo] += Lp[s.hi] * pw[static_cast<std::size_t>(s.diff)];
        }
        const auto& inh = P.inherit[static_cast<std::size_t>(pc)];
        if (inh.empty()) {
            return;
        }
        const Vec3 zt = X.center(i, j, k);
        const int t = i + n * (j + n * k);
        for (const auto& [yid, b] : inh) {
            const auto& Y = node(yid);
            const Vec3 zb = center_of(Y, b, n);
            if (accept(X.dx, zt, Y.dx, zb)) {
                m2l_geom(X, zt, Lt, Y, b);
                ++m2l;
            } else if (X.leaf) {
                m2l_geom(X, zt, Lt, Y, b);
                ++direct;
            } else {
                X.inherit[static_cast<std::size_t>(t)].push_back({yid, b});
            }
        }
    }

    // Same-level pair (target cell t of X, source cell b of Y).
    void same_level(NodeData& X, int t, real* Lt, const NodeData& Y, int b, bool acc, const real* D,
                    const Vec3* zt_cache) {
        if (acc) {
            m2l_apply(X, Lt, Y, b, D);
            ++m2l;
            return;
        }
        if (X.leaf && Y.leaf) {
            m2l_apply(X, Lt, Y, b, D);
            ++direct;
        } else if (X.leaf) {
            const Vec3 zt = zt_cache ? *zt_cache : center_of(X, t, n);
            recv_recursive(X, zt, Lt, Y, b);
        } else if (Y.leaf) {
            X.inherit[static_cast<std::size_t>(t)].push_back({Y.id, b});
        }
    }

    void sweep_stencil(NodeData& X, int i, int j, int k, real* Lt) {
        const std::int64_t gx = X.c[0] * n + i, gy = X.c[1] * n + j, gz = X.c[2] * n + k;
        const std::size_t parity = X.level == 0 ? 0 : static_cast<std::size_t>((gx & 1) + 2 * (gy & 1) + 4 * (gz & 1));
        const auto& st = S.stencils_[static_cast<std::size_t>(X.level)][parity];
        const int t = i + n * (j + n * k);
        const Vec3 zt = X.center(i, j, k);
        for (const auto& e : st.entries) {
            int lx = i + e.dx, ly = j + e.dy, lz = k + e.dz;
            const int bx = lx < 0 ? -1 : (lx >= n ? 1 : 0);
            const int by = ly < 0 ? -1 : (ly >= n ? 1 : 0);
            const int bz = lz < 0 ? -1 : (lz >= n ? 1 : 0);
            const NodeId yid = X.nbr[static_cast<std::size_t>((bx + 1) + 3 * (by + 1) + 9 * (bz + 1))];
            if (yid == mesh::no_node) {
                continue;
            }
            lx -= bx * n;
            ly -= by * n;
            lz -= bz * n;
            same_level(X, t, Lt, node(yid), lx + n * (ly + n * lz), e.accept, e.D.data(), &zt);
        }
    }

    void sweep_enumerate(NodeData& X, int i, int j, int k, real* Lt) {
        const std::int64_t g[3] = {X.c[0] * n + i, X.c[1] * n + j, X.c[2] * n + k};
        const int t = i + n * (j + n * k);
        const Vec3 zt = X.center(i, j, k);
        auto visit = [&](const NodeData& Y) {
            for (int bk = 0; bk < n; ++bk) {
                for (int bj = 0; bj < n; ++bj) {
                    for (int bi = 0; bi < n; ++bi) {
                        const std::int64_t h[3] = {Y.c[0] * n + bi, Y.c[1] * n + bj, Y.c[2] * n + bk};
                        if (h[0] == g[0] && h[1] == g[1] && h[2] == g[2]) {
                            continue;
                        }
                        if (!in_zone(X.level, g, h)) {
                            continue;
                        }
                        const Vec3 o{real(h[0] - g[0]), real(h[1] - g[1]), real(h[2] - g[2])};
                        const bool acc = accept(1, {0, 0, 0}, 1, o);
                        const auto D = inverse_distance_derivatives({-o.x * X.dx, -o.y * X.dx, -o.z * X.dx});
                        same_level(X, t, Lt, Y, bi + n * (bj + n * bk), acc, D.data(), &zt);
                    }
                }
            }
        };
        if (reject) {
            for (auto id : S.by_level_[static_cast<std::size_t>(X.level)]) {
                visit(node(id));
            }
            return;
        }
        const int R = (zone_radius(theta) + n - 1) / n;
        for (int dz = -R; dz <= R; ++dz) {
            for (int dy = -R; dy <= R; ++dy) {
                for (int dx = -R; dx <= R; ++dx) {
                    const NodeId y = S.tree_->find({X.level, {X.c[0] + dx, X.c[1] + dy, X.c[2] + dz}});
                    if (y != mesh::no_node) {
                        visit(node(y));
                    }
                }
            }
        }
    }

    // All ancestor pairs of (g, h) at `level` fail the acceptance test.
    bool in_zone(int level, const std::int64_t* g, const std::int64_t* h) const {
        if (reject) {
            return true;
        }
        real scale = 1;
        std::int64_t a[3] = {g[0], g[1], g[2]}, b[3] = {h[0], h[1], h[2]};
        for (int l = level - 1; l >= 0; --l) {
            scale *= 2;
            Vec3 d{0, 0, 0};
            for (int ax = 0; ax < 3; ++ax) {
                a[ax] >>= 1;
                b[ax] >>= 1;
            }
            d = {real(b[0] - a[0]) * scale, real(b[1] - a[1]) * scale, real(b[2] - a[2]) * scale};
            if (mac_accept(scale, {0, 0, 0}, scale, d, theta)) {
                return false;
            }
        }
        return true;
    }
};

void Solver::interactions(const Octree& tree) {
    std::atomic<std::uint64_t> m2l{0}, direct{0};
    for (std::size_t lvl = 0; lvl < by_level_.size(); ++lvl) {
        const auto& ids = by_level_[lvl];
        for_each_index(scheduler_, ids.size(), [&](std::size_t q) {
            Pass p(*this, tree);
            p.run(nodes_[static_cast<std::size_t>(ids[q])]);
            m2l += p.m2l;
            direct += p.direct;
        });
    }
    stats_.m2l = m2l.load();
    stats_.direct = direct.load();
}

void Solver::gather(const Octree& tree, std::vector<LeafGravity>& out) const {
    const int n = tree.n();
    const std::size_t cells = static_cast<std::size_t>(n) * n * n;
    out.resize(tree.leaves().size());
    const real G = config_.G;
    for (std::size_t s = 0; s < tree.leaves().size(); ++s) {
        const auto& d = nodes_[static_cast<std::size_t>(tree.leaves()[s])];
        auto& o = out[s];
        if (o.phi.size() != cells) {
            o.resize(cells);
        }
        for (std::size_t c = 0; c < cells; ++c) {
            const real* L = &d.L[c * 4];
            o.phi[c] = G * L[0];
            o.gx[c] = -G * L[1];
            o.gy[c] = -G * L[2];
            o.gz[c] = -G * L[3];
        }
    }
}

void Solver::compute_multipoles(const Octree& tree, const std::vector<std::vector<real>>& masses) {
    prepare(tree);
    upward(tree, masses);
}

MultipoleExpansion Solver::multipole(NodeId node, int cell) const {
    const auto& T = tables();
    const auto& d = nodes_.at(static_cast<std::size_t>(node));
    const int n = tree_->n();
    MultipoleExpansion e;
    e.center = d.center(cell % n, (cell / n) % n, cell / (n * n));
    if (d.leaf) {
        e.m[0] = d.mt[static_cast<std::size_t>(cell)];
        return e;
    }
    for (int a = 0; a < num_terms; ++a) {
        const auto ua = static_cast<std::size_t>(a);
        e.m[ua] = d.mt[static_cast<std::size_t>(cell) * num_terms + ua] * T.sign[ua] / T.inv_fact[ua];
    }
    return e;
}

MultipoleExpansion Solver::node_multipole(NodeId node) const {
    const auto& b = tree_->node(node).block;
    const Vec3 c = tree_->block_center(b);
    MultipoleExpansion sum;
    sum.center = c;
    const int n = tree_->n();
    for (int cell = 0; cell < n * n * n; ++cell) {
        const auto t = translate(multipole(node, cell), c);
        for (int a = 0; a < num_terms; ++a) {
            sum.m[static_cast<std::size_t>(a)] += t.m[static_cast<std::size_t>(a)];
        }
    }
    return sum;
}

void Solver::solve_masses(const Octree& tree, const std::vector<std::vector<real>>& masses,
                          std::vector<LeafGravity>& out) {
    prepare(tree);
    upward(tree, masses);
    interactions(tree);
    gather(tree, out);
}

void Solver::solve(const Octree& tree, std::vector<LeafGravity>& out) { solve_masses(tree, cell_masses(tree), out); }

std::vector<std::vector<real>> cell_masses(const Octree& tree) {
    const int n = tree.n();
    std::vector<std::vector<real>> m(tree.leaves().size());
    for (std::size_t s = 0; s < m.size(); ++s) {
        const auto& g = tree.grid(tree.leaves()[s]);
        const real vol = g.dx() * g.dx() * g.dx();
        auto& v = m[s];
        v.resize(static_cast<std::size_t>(n) * n * n);
        std::size_t c = 0;
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < n; ++i) {
                    v[c++] = g.at(mesh::Field::rho, i, j, k) * vol;
                }
            }
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// direct sums

DirectField direct_sum(const std::vector<Vec3>& pos, const std::vector<real>& mass, real G) {
    const std::size_t N = pos.size();
    DirectField f;
    f.phi.assign(N, 0.0);
    f.g.assign(N, Vec3{0, 0, 0});
    for (std::size_t a = 0; a < N; ++a) {
        real phi = 0, gx = 0, gy = 0, gz = 0;
        for (std::size_t b = 0; b < N; ++b) {
            if (a == b) {
                continue;
            }
            const real dx = pos[b].x - pos[a].x, dy = pos[b].y - pos[a].y, dz = pos[b].z - pos[a].z;
            const real r2 = dx * dx + dy * dy + dz * dz;
            if (r2 == 0) {
                throw StructuralError("coincident cell centres in direct sum");
            }
            const real ir = 1.0 / std::sqrt(r2);
            const real ir3 = ir * ir * ir;
            phi -= mass[b] * ir;
            gx += mass[b] * dx * ir3;
            gy += mass[b] * dy * ir3;
            gz += mass[b] * dz * ir3;
        }
        f.phi[a] = G * phi;
        f.g[a] = {G * gx, G * gy, G * gz};
    }
    return f;
}

void direct_sum(const Octree& tree, std::vector<LeafGravity>& out, real G) {
    const int n = tree.n();
    const std::size_t cells = static_cast<std::size_t>(n) * n * n;
    std::vector<Vec3> pos;
    std::vector<real> mass;
    const auto masses = cell_masses(tree);
    for (std::size_t s = 0; s < tree.leaves().size(); ++s) {
        const auto& g = tree.grid(tree.leaves()[s]);
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < n; ++i) {
                    pos.push_back(g.cell_center(i, j, k));
                }
            }
        }
        mass.insert(mass.end(), masses[s].begin(), masses[s].end());
    }
    const auto f = direct_sum(pos, mass, G);
    out.resize(tree.leaves().size());
    for (std::size_t s = 0; s < out.size(); ++s) {
        out[s].resize(cells);
        for (std::size_t c = 0; c < cells; ++c) {
            const std::size_t q = s * cells + c;
            out[s].phi[c] = f.phi[q];
            out[s].gx[c] = f.g[q].x;
            out[s].gy[c] = f.g[q].y;
            out[s].gz[c] = f.g[q].z;
        }
    }
}

// ---------------------------------------------------------------------------

void potential_time_derivative(Octree& tree, Solver& solver, std::vector<LeafGravity>& out) {
    mesh::exchange_ghosts(tree);
    const int n = tree.n();
    std::vector<std::vector<real>> rate(tree.leaves().size());
    for (std::size_t s = 0; s < rate.size(); ++s) {
        const auto& g = tree.grid(tree.leaves()[s]);
        const real vol = g.dx() * g.dx() * g.dx();
        const real inv2dx = 0.5 / g.dx();
        auto& v = rate[s];
        v.resize(static_cast<std::size_t>(n) * n * n);
        std::size_t c = 0;
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < n; ++i) {
                    const real div = (g.at(mesh::Field::sx, i + 1, j, k) - g.at(mesh::Field::sx, i - 1, j, k)) +
                                     (g.at(mesh::Field::sy, i, j + 1, k) - g.at(mesh::Field::sy, i, j - 1, k)) +
                                     (g.at(mesh::Field::sz, i, j, k + 1) - g.at(mesh::Field::sz, i, j, k - 1));
                    v[c++] = -div * inv2dx * vol;
                }
            }
        }
    }
    std::vector<LeafGravity> tmp;
    solver.solve_masses(tree, rate, tmp);
    out.resize(tmp.size());
    for (std::size_t s = 0; s < tmp.size(); ++s) {
        if (out[s].dphi_dt.size() != tmp[s].phi.size()) {
            out[s].resize(tmp[s].phi.size());
        }
        out[s].dphi_dt = tmp[s].phi;
    }
}

hydro::GravitySolve make_gravity_solve(Solver& solver) {
    return [&solver](const Octree& tree, std::vector<LeafGravity>& out) { solver.solve(tree, out); };
}

}  // namespace octo::gravity
