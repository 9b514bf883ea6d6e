#include "octo/mesh.hpp"

#include <algorithm>
#include <set>
#include <unordered_set>
#include <string>

namespace octo::mesh {

// ---------------------------------------------------------------------------
// SubGrid

SubGrid::SubGrid(int n, Vec3 origin, real dx, int level, bool allocate)
    : n_(n), origin_(origin), dx_(dx), level_(level) {
    if (!valid_subgrid_size(n)) {
        throw ConfigError("sub-grid size must be 8, 16 or 32, got " + std::to_string(n));
    }
    if (allocate) {
        for (auto& f : data_) {
            f.assign(padded_volume(), 0.0);
        }
    }
}

ConservedState SubGrid::state(int i, int j, int k) const {
    const auto idx = index(i, j, k);
    ConservedState s;
    for (int f = 0; f < num_fields; ++f) {
        s[f] = data_[f][idx];
    }
    return s;
}

void SubGrid::set_state(int i, int j, int k, const ConservedState& s) {
    const auto idx = index(i, j, k);
    for (int f = 0; f < num_fields; ++f) {
        data_[f][idx] = s[f];
    }
}

std::array<std::vector<real>, num_fields> SubGrid::interior_copy() const {
    std::array<std::vector<real>, num_fields> out;
    const auto cells = static_cast<std::size_t>(n_) * n_ * n_;
    for (int f = 0; f < num_fields; ++f) {
        out[f].resize(cells);
        std::size_t m = 0;
        for (int k = 0; k < n_; ++k) {
            for (int j = 0; j < n_; ++j) {
                const real* row = &data_[f][index(0, j, k)];
                std::copy(row, row + n_, out[f].begin() + static_cast<std::ptrdiff_t>(m));
                m += static_cast<std::size_t>(n_);
            }
        }
    }
    return out;
}

void SubGrid::assign_interior(const std::array<std::vector<real>, num_fields>& values) {
    for (int f = 0; f < num_fields; ++f) {
        std::size_t m = 0;
        for (int k = 0; k < n_; ++k) {
            for (int j = 0; j < n_; ++j) {
                std::copy(values[f].begin() + static_cast<std::ptrdiff_t>(m),
                          values[f].begin() + static_cast<std::ptrdiff_t>(m + n_), &data_[f][index(0, j, k)]);
                m += static_cast<std::size_t>(n_);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// transfer operators

real minmod(real a, real b) {
    if (a * b <= 0.0) {
        return 0.0;
    }
    return std::abs(a) < std::abs(b) ? a : b;
}

std::array<real, 8> prolong(real parent, const std::array<real, 6>& nb) {
    std::array<real, 3> slope{};
    for (int d = 0; d < 3; ++d) {
        slope[d] = minmod(nb[2 * d + 1] - parent, parent - nb[2 * d]);
    }
    std::array<real, 8> out{};
    for (int o = 0; o < 8; ++o) {
        const auto off = octant_offset(o);
        real v = parent;
        for (int d = 0; d < 3; ++d) {
            v += (off[d] ? 0.25 : -0.25) * slope[d];
        }
        out[o] = v;
    }
    return out;
}

real restrict_average(const std::array<real, 8>& c) {
    return ((c[0] + c[1]) + (c[2] + c[3]) + ((c[4] + c[5]) + (c[6] + c[7]))) * 0.125;
}

// ---------------------------------------------------------------------------
// Octree

std::size_t BlockCoordHash::operator()(const BlockCoord& b) const noexcept {
    std::uint64_t h = 1469598103934665603ull ^ static_cast<std::uint64_t>(b.level);
    for (auto v : b.c) {
        h ^= static_cast<std::uint64_t>(v) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return static_cast<std::size_t>(h);
}

Octree::Octree(TreeConfig config) : config_(config) {
    if (!valid_subgrid_size(config_.n_per_side)) {
        throw ConfigError("sub-grid size must be 8, 16 or 32, got " + std::to_string(config_.n_per_side));
    }
    if (!(config_.domain.width > 0)) {
        throw ConfigError("domain width must be positive");
    }
    check_budget(1);
    OctreeNode root;
    root.block = BlockCoord{0, {0, 0, 0}};
    root.subgrid = make_subgrid(root.block);
    nodes_.push_back(std::move(root));
    index_.emplace(nodes_[0].block, 0);
    rebuild_leaf_list();
}

Vec3 Octree::block_center(const BlockCoord& b) const {
    const real w = block_width(b.level);
    const auto& lo = config_.domain.lower;
    return {lo.x + (b.c[0] + 0.5) * w, lo.y + (b.c[1] + 0.5) * w, lo.z + (b.c[2] + 0.5) * w};
}

Octree Octree::clone() const {
    Octree t(config_);
    t.nodes_.clear();
    t.nodes_.reserve(nodes_.size());
    for (const auto& nd : nodes_) {
        OctreeNode c;
        c.parent = nd.parent;
        c.children = nd.children;
        c.block = nd.block;
        if (nd.subgrid) {
            c.subgrid = std::make_unique<SubGrid>(*nd.subgrid);
        }
        t.nodes_.push_back(std::move(c));
    }
    t.index_ = index_;
    t.leaves_ = leaves_;
    return t;
}

std::unique_ptr<SubGrid> Octree::make_subgrid(const BlockCoord& b) const {
    const real w = block_width(b.level);
    const real dx = w / n();
    const auto& lo = config_.domain.lower;
    Vec3 origin{lo.x + b.c[0] * w + 0.5 * dx, lo.y + b.c[1] * w + 0.5 * dx, lo.z + b.c[2] * w + 0.5 * dx};
    return std::make_unique<SubGrid>(n(), origin, dx, b.level, config_.allocate_cells);
}

void Octree::check_budget(std::size_t extra_leaves) const {
    if (!config_.allocate_cells) {
        return;
    }
    const auto p = static_cast<std::size_t>(n() + 2 * ghost_width);
    const std::size_t per_leaf = p * p * p * num_fields * sizeof(real);
    const std::size_t total = (leaves_.size() + extra_leaves) * per_leaf;
    if (total > config_.memory_budget) {
        throw CapacityError("octree needs " + std::to_string(total) + " bytes of cell storage, budget is " +
                            std::to_string(config_.memory_budget));
    }
}

int Octree::max_level() const {
    int m = 0;
    for (auto id : leaves_) {
        m = std::max(m, node(id).level());
    }
    return m;
}

NodeId Octree::find(const BlockCoord& b) const {
    auto it = index_.find(b);
    return it == index_.end() ? no_node : it->second;
}

NodeId Octree::covering_leaf(const BlockCoord& b) const {
    BlockCoord q = b;
    while (true) {
        const NodeId id = find(q);
        if (id != no_node) {
            return node(id).is_leaf() ? id : no_node;
        }
        if (q.level == 0) {
            return no_node;
        }
        q.level -= 1;
        for (auto& v : q.c) {
            v >>= 1;
        }
    }
}

std::optional<CellRef> Octree::locate(const Vec3& x) const {
    const auto& lo = config_.domain.lower;
    const real w = config_.domain.width;
    for (int d = 0; d < 3; ++d) {
        if (x[d] < lo[d] || x[d] >= lo[d] + w) {
            return std::nullopt;
        }
    }
    NodeId id = root();
    while (!node(id).is_leaf()) {
        const auto& b = node(id).block;
        const Vec3 c = block_center(b);
        int o = 0;
        for (int d = 0; d < 3; ++d) {
            if (x[d] >= c[d]) {
                o |= 1 << d;
            }
        }
        id = node(id).children[static_cast<std::size_t>(o)];
    }
    const auto& b = node(id).block;
    const real bw = block_width(b.level);
    const real dx = bw / n();
    CellRef ref;
    ref.leaf = id;
    for (int d = 0; d < 3; ++d) {
        const real rel = x[d] - (lo[d] + b.c[static_cast<std::size_t>(d)] * bw);
        ref.local[static_cast<std::size_t>(d)] = std::clamp(static_cast<int>(std::floor(rel / dx)), 0, n() - 1);
    }
    return ref;
}

void Octree::rebuild_leaf_list() {
    leaves_.clear();
    std::vector<NodeId> stack{root()};
    while (!stack.empty()) {
        const NodeId id = stack.back();
        stack.pop_back();
        const auto& nd = node(id);
        if (nd.is_leaf()) {
            leaves_.push_back(id);
        } else {
            for (int o = 7; o >= 0; --o) {
                stack.push_back(nd.children[static_cast<std::size_t>(o)]);
            }
        }
    }
}

std::vector<std::uint8_t> Octree::octant_path(NodeId id) const {
    std::vector<std::uint8_t> path;
    while (node(id).parent != no_node) {
        const auto& b = node(id).block;
        path.push_back(static_cast<std::uint8_t>((b.c[0] & 1) | ((b.c[1] & 1) << 1) | ((b.c[2] & 1) << 2)));
        id = node(id).parent;
    }
    std::reverse(path.begin(), path.end());
    return path;
}

namespace {

// Creates eight children below a leaf; cell contents left zero.
void split_topology(std::vector<OctreeNode>& nodes, std::unordered_map<BlockCoord, NodeId, BlockCoordHash>& index,
                    NodeId leaf, const std::function<std::unique_ptr<SubGrid>(const BlockCoord&)>& make) {
    const BlockCoord pb = nodes[static_cast<std::size_t>(leaf)].block;
    std::array<NodeId, 8> kids{};
    for (int o = 0; o < 8; ++o) {
        const auto off = octant_offset(o);
        OctreeNode child;
        child.parent = leaf;
        child.block.level = pb.level + 1;
        for (int d = 0; d < 3; ++d) {
            child.block.c[static_cast<std::size_t>(d)] = 2 * pb.c[static_cast<std::size_t>(d)] + off[static_cast<std::size_t>(d)];
        }
        child.subgrid = make(child.block);
        kids[static_cast<std::size_t>(o)] = static_cast<NodeId>(nodes.size());
        index.emplace(child.block, kids[static_cast<std::size_t>(o)]);
        nodes.push_back(std::move(child));
    }
    nodes[static_cast<std::size_t>(leaf)].children = kids;
}

}  // namespace

void Octree::split(NodeId leaf) {
    if (!node(leaf).is_leaf()) {
        throw StructuralError("split called on a refined node");
    }
    check_budget(7);
    std::unique_ptr<SubGrid> parent = std::move(node(leaf).subgrid);
    split_topology(nodes_, index_, leaf, [this](const BlockCoord& b) { return make_subgrid(b); });
    if (parent && parent->allocated()) {
        const int nn = n();
        const int half = nn / 2;
        for (int o = 0; o < 8; ++o) {
            const auto off = octant_offset(o);
            SubGrid& child = grid(node(leaf).children[static_cast<std::size_t>(o)]);
            for (int f = 0; f < num_fields; ++f) {
                const auto pf = parent->field(static_cast<Field>(f));
                auto cf = child.field(static_cast<Field>(f));
                for (int k = 0; k < nn; ++k) {
                    for (int j = 0; j < nn; ++j) {
                        for (int i = 0; i < nn; ++i) {
                            const int pi = off[0] * half + i / 2;
                            const int pj = off[1] * half + j / 2;
                            const int pk = off[2] * half + k / 2;
                            const auto pc = parent->index(pi, pj, pk);
                            const real c = pf[pc];
                            const std::array<int, 3> sub{i & 1, j & 1, k & 1};
                            real v = c;
                            for (int d = 0; d < 3; ++d) {
                                const auto s = parent->stride(d);
                                const real slope = minmod(pf[pc + static_cast<std::size_t>(s)] - c,
                                                          c - pf[pc - static_cast<std::size_t>(s)]);
                                v += (sub[static_cast<std::size_t>(d)] ? 0.25 : -0.25) * slope;
                            }
                            cf[child.index(i, j, k)] = v;
                        }
                    }
                }
            }
        }
    }
    rebuild_leaf_list();
}

void Octree::split_empty(NodeId leaf, bool update_leaves) {
    if (!node(leaf).is_leaf()) {
        throw StructuralError("split called on a refined node");
    }
    check_budget(7);
    node(leaf).subgrid.reset();
    split_topology(nodes_, index_, leaf, [this](const BlockCoord& b) { return make_subgrid(b); });
    if (update_leaves) {
        rebuild_leaf_list();
    }
}

NodeId Octree::ensure_path(std::span<const std::uint8_t> path) {
    NodeId id = root();
    for (auto o : path) {
        if (o > 7) {
            throw StructuralError("octant index out of range in path");
        }
        if (node(id).is_leaf()) {
            split_empty(id, false);
        }
        id = node(id).children[o];
    }
    rebuild_leaf_list();
    return id;
}

// ---------------------------------------------------------------------------
// ghost sampling

namespace {

struct Mapped {
    std::array<std::int64_t, 3> g;
    std::array<bool, 3> flip{false, false, false};
};

// Maps a cell index at `level` into the domain per the boundary rule.
Mapped map_index(const Octree& tree, int level, std::array<std::int64_t, 3> g) {
    const std::int64_t N = tree.cells_per_axis(level);
    Mapped m{g, {false, false, false}};
    for (std::size_t d = 0; d < 3; ++d) {
        auto& v = m.g[d];
        if (v >= 0 && v < N) {
            continue;
        }
        switch (tree.boundary()) {
            case BoundaryKind::periodic:
                v = ((v % N) + N) % N;
                break;
            case BoundaryKind::reflecting:
                v = v < 0 ? -1 - v : 2 * N - 1 - v;
                m.flip[d] = !m.flip[d];
                break;
            case BoundaryKind::outflow:
                v = v < 0 ? 0 : N - 1;
                break;
        }
    }
    return m;
}

inline real apply_flip(real v, int f, const std::array<bool, 3>& flip) {
    if (f >= 1 && f <= 3 && flip[static_cast<std::size_t>(f - 1)]) {
        return -v;
    }
    return v;
}

class Sampler {
public:
    explicit Sampler(const Octree& tree, std::vector<NodeId>* record = nullptr) : tree_(tree), record_(record) {}

    // Node at (level, block of g) or no_node; cached.
    NodeId node_for(int level, const std::array<std::int64_t, 3>& g) {
        const std::int64_t n = tree_.n();
        BlockCoord b{level, {g[0] / n, g[1] / n, g[2] / n}};
        if (b == last_block_) {
            return last_node_;
        }
        last_block_ = b;
        last_node_ = tree_.find(b);
        return last_node_;
    }

    void note(NodeId leaf) {
        if (record_) {
            record_->push_back(leaf);
        }
    }

    // All fields of cell g (inside domain) at `level`, restricting from finer
    // leaves and injecting from coarser ones. Returns the level of the leaf
    // that supplied the value.
    int value(int level, const std::array<std::int64_t, 3>& g, std::array<real, num_fields>& out) {
        const NodeId id = node_for(level, g);
        if (id != no_node) {
            const auto& nd = tree_.node(id);
            if (nd.is_leaf()) {
                read_leaf(id, g, out);
                return level;
            }
            std::array<real, num_fields> acc{};
            std::array<std::array<real, 8>, num_fields> kids{};
            int deepest = level + 1;
            for (int o = 0; o < 8; ++o) {
                const auto off = octant_offset(o);
                std::array<std::int64_t, 3> gc{2 * g[0] + off[0], 2 * g[1] + off[1], 2 * g[2] + off[2]};
                std::array<real, num_fields> v{};
                deepest = std::max(deepest, value(level + 1, gc, v));
                for (int f = 0; f < num_fields; ++f) {
                    kids[static_cast<std::size_t>(f)][static_cast<std::size_t>(o)] = v[static_cast<std::size_t>(f)];
                }
            }
            for (int f = 0; f < num_fields; ++f) {
                acc[static_cast<std::size_t>(f)] = restrict_average(kids[static_cast<std::size_t>(f)]);
            }
            out = acc;
            return deepest;
        }
        // covered by a coarser leaf: inject
        std::array<std::int64_t, 3> h = g;
        int l = level;
        while (l > 0) {
            --l;
            for (auto& v : h) {
                v >>= 1;
            }
            const NodeId c = node_for(l, h);
            if (c != no_node) {
                if (!tree_.node(c).is_leaf()) {
                    throw StructuralError("inconsistent octree index");
                }
                read_leaf(c, h, out);
                return l;
            }
        }
        throw StructuralError("cell not covered by any leaf");
    }

    // Ghost value for a mapped fine cell at `level`, prolonging when the
    // covering leaf is one level coarser.
    void ghost_value(int level, const Mapped& m, std::array<real, num_fields>& out) {
        const NodeId id = node_for(level, m.g);
        if (id != no_node) {
            const int src = value(level, m.g, out);
            if (src > level + 1) {
                throw StructuralError("octree not 2:1 balanced: ghost source two levels finer");
            }
        } else {
            std::array<std::int64_t, 3> gc{m.g[0] >> 1, m.g[1] >> 1, m.g[2] >> 1};
            const NodeId c = node_for(level - 1, gc);
            if (c == no_node || !tree_.node(c).is_leaf()) {
                throw StructuralError("octree not 2:1 balanced: ghost source two levels coarser");
            }
            std::array<real, num_fields> centre{};
            read_leaf(c, gc, centre);
            std::array<std::array<real, num_fields>, 6> nb{};
            for (int d = 0; d < 3; ++d) {
                for (int s = 0; s < 2; ++s) {
                    auto h = gc;
                    h[static_cast<std::size_t>(d)] += s ? 1 : -1;
                    const Mapped hm = map_index(tree_, level - 1, h);
                    std::array<real, num_fields> v{};
                    value(level - 1, hm.g, v);
                    for (int f = 0; f < num_fields; ++f) {
                        nb[static_cast<std::size_t>(2 * d + s)][static_cast<std::size_t>(f)] =
                            apply_flip(v[static_cast<std::size_t>(f)], f, hm.flip);
                    }
                }
            }
            for (int f = 0; f < num_fields; ++f) {
                const auto fs = static_cast<std::size_t>(f);
                real v = centre[fs];
                for (int d = 0; d < 3; ++d) {
                    const auto ds = static_cast<std::size_t>(d);
                    const real slope = minmod(nb[2 * ds + 1][fs] - centre[fs], centre[fs] - nb[2 * ds][fs]);
                    v += ((m.g[ds] & 1) ? 0.25 : -0.25) * slope;
                }
                out[fs] = v;
            }
        }
        for (int f = 0; f < num_fields; ++f) {
            out[static_cast<std::size_t>(f)] = apply_flip(out[static_cast<std::size_t>(f)], f, m.flip);
        }
    }

private:
    void read_leaf(NodeId id, const std::array<std::int64_t, 3>& g, std::array<real, num_fields>& out) {
        note(id);
        const auto& nd = tree_.node(id);
        const std::int64_t n = tree_.n();
        const auto& sg = *nd.subgrid;
        if (!sg.allocated()) {
            out.fill(0.0);
            return;
        }
        const auto idx = sg.index(static_cast<int>(g[0] - nd.block.c[0] * n), static_cast<int>(g[1] - nd.block.c[1] * n),
                                  static_cast<int>(g[2] - nd.block.c[2] * n));
        for (int f = 0; f < num_fields; ++f) {
            out[static_cast<std::size_t>(f)] = sg.field(static_cast<Field>(f))[idx];
        }
    }

    const Octree& tree_;
    std::vector<NodeId>* record_;
    BlockCoord last_block_{-1, {0, 0, 0}};
    NodeId last_node_ = no_node;
};

template <class Visit>
void for_each_ghost(int n, Visit&& visit) {
    for (int k = -ghost_width; k < n + ghost_width; ++k) {
        for (int j = -ghost_width; j < n + ghost_width; ++j) {
            const bool jk_inside = j >= 0 && j < n && k >= 0 && k < n;
            for (int i = -ghost_width; i < n + ghost_width; ++i) {
                if (jk_inside && i == 0) {
                    i = n - 1;  // skip interior run
                    continue;
                }
                visit(i, j, k);
            }
        }
    }
}

}  // namespace

void fill_ghosts(Octree& tree, NodeId leaf) {
    auto& nd = tree.node(leaf);
    SubGrid& sg = *nd.subgrid;
    if (!sg.allocated()) {
        return;
    }
    const int n = tree.n();
    const int level = nd.level();
    Sampler sampler(tree);
    std::array<std::span<real>, num_fields> out;
    for (int f = 0; f < num_fields; ++f) {
        out[static_cast<std::size_t>(f)] = sg.field(static_cast<Field>(f));
    }
    std::array<real, num_fields> v{};
    for_each_ghost(n, [&](int i, int j, int k) {
        const std::array<std::int64_t, 3> g{nd.block.c[0] * n + i, nd.block.c[1] * n + j, nd.block.c[2] * n + k};
        const Mapped m = map_index(tree, level, g);
        sampler.ghost_value(level, m, v);
        const auto idx = sg.index(i, j, k);
        for (int f = 0; f < num_fields; ++f) {
            out[static_cast<std::size_t>(f)][idx] = v[static_cast<std::size_t>(f)];
        }
    });
}

void exchange_ghosts(Octree& tree) {
    for (auto id : tree.leaves()) {
        fill_ghosts(tree, id);
    }
}

std::vector<NodeId> Octree::ghost_sources(NodeId leaf) const {
    std::vector<NodeId> rec;
    Sampler sampler(*this, &rec);
    const auto& nd = node(leaf);
    const int nn = n();
    std::array<real, num_fields> v{};
    // Only cell storage is needed for values; topology-only trees read zeros.
    for_each_ghost(nn, [&](int i, int j, int k) {
        const std::array<std::int64_t, 3> g{nd.block.c[0] * nn + i, nd.block.c[1] * nn + j, nd.block.c[2] * nn + k};
        sampler.ghost_value(nd.level(), map_index(*this, nd.level(), g), v);
    });
    std::sort(rec.begin(), rec.end());
    rec.erase(std::unique(rec.begin(), rec.end()), rec.end());
    rec.erase(std::remove(rec.begin(), rec.end(), leaf), rec.end());
    return rec;
}

std::vector<NodeId> Octree::face_neighbors(NodeId leaf, int face) const {
    const auto& nd = node(leaf);
    const int axis = face / 2;
    const int dir = (face % 2) ? 1 : -1;
    BlockCoord b = nd.block;
    const std::int64_t nb = std::int64_t{1} << b.level;
    auto& v = b.c[static_cast<std::size_t>(axis)];
    v += dir;
    if (v < 0 || v >= nb) {
        if (boundary() != BoundaryKind::periodic) {
            return {};
        }
        v = (v + nb) % nb;
    }
    const NodeId id = find(b);
    if (id == no_node) {
        const NodeId c = covering_leaf(b);
        if (c == no_node) {
            throw StructuralError("face neighbour not covered");
        }
        return {c};
    }
    if (node(id).is_leaf()) {
        return {id};
    }
    std::vector<NodeId> out;
    for (int o = 0; o < 8; ++o) {
        const auto off = octant_offset(o);
        // children of the neighbour on the side facing `leaf`
        if (off[static_cast<std::size_t>(axis)] == (dir > 0 ? 0 : 1)) {
            out.push_back(node(id).children[static_cast<std::size_t>(o)]);
        }
    }
    return out;
}

bool Octree::is_balanced() const {
    for (auto id : leaves_) {
        const auto& nd = node(id);
        const std::int64_t nb = std::int64_t{1} << nd.level();
        for (int dz = -1; dz <= 1; ++dz) {
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dx == 0 && dy == 0 && dz == 0) {
                        continue;
                    }
                    const std::array<int, 3> d{dx, dy, dz};
                    BlockCoord b = nd.block;
                    bool outside = false;
                    for (std::size_t a = 0; a < 3; ++a) {
                        b.c[a] += d[a];
                        if (b.c[a] < 0 || b.c[a] >= nb) {
                            if (boundary() == BoundaryKind::periodic) {
                                b.c[a] = (b.c[a] + nb) % nb;
                            } else {
                                outside = true;
                            }
                        }
                    }
                    if (outside) {
                        continue;
                    }
                    const NodeId nbid = find(b);
                    if (nbid == no_node || node(nbid).is_leaf()) {
                        continue;
                    }
                    for (int o = 0; o < 8; ++o) {
                        const auto off = octant_offset(o);
                        bool touches = true;
                        for (std::size_t a = 0; a < 3; ++a) {
                            if (d[a] == 1 && off[a] != 0) {
                                touches = false;
                            }
                            if (d[a] == -1 && off[a] != 1) {
                                touches = false;
                            }
                        }
                        if (touches && !node(node(nbid).children[static_cast<std::size_t>(o)]).is_leaf()) {
                            return false;
                        }
                    }
                }
            }
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// tree builders

Octree build_uniform_tree(int level, int n_per_side, TreeConfig base) {
    if (level < 0) {
        throw ConfigError("refinement level must be >= 0");
    }
    base.n_per_side = n_per_side;
    if (base.allocate_cells) {
        const auto p = static_cast<std::size_t>(n_per_side + 2 * ghost_width);
        const std::size_t leaves = std::size_t{1} << (3 * level);
        const std::size_t bytes = leaves * p * p * p * num_fields * sizeof(real);
        if (level > 20 || bytes > base.memory_budget) {
            throw CapacityError("uniform tree of level " + std::to_string(level) + " with " +
                                std::to_string(n_per_side) + "^3 sub-grids exceeds the memory budget");
        }
    }
    Octree tree(base);
    for (int l = 0; l < level; ++l) {
        const auto current = tree.leaves();
        for (auto id : current) {
            tree.split_empty(id, false);
        }
        tree.rebuild_leaf_list();
    }
    return tree;
}

namespace {

bool needs_balance_split(const Octree& tree, NodeId id) {
    const auto& nd = tree.node(id);
    const std::int64_t nb = std::int64_t{1} << nd.level();
    for (int dz = -1; dz <= 1; ++dz) {
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                if (dx == 0 && dy == 0 && dz == 0) {
                    continue;
                }
                const std::array<int, 3> d{dx, dy, dz};
                BlockCoord b = nd.block;
                bool outside = false;
                for (std::size_t a = 0; a < 3; ++a) {
                    b.c[a] += d[a];
                    if (b.c[a] < 0 || b.c[a] >= nb) {
                        if (tree.boundary() == BoundaryKind::periodic) {
                            b.c[a] = (b.c[a] + nb) % nb;
                        } else {
                            outside = true;
                        }
                    }
                }
                if (outside) {
                    continue;
                }
                const NodeId nbid = tree.find(b);
                if (nbid == no_node || tree.node(nbid).is_leaf()) {
                    continue;
                }
                for (int o = 0; o < 8; ++o) {
                    const auto off = octant_offset(o);
                    bool touches = true;
                    for (std::size_t a = 0; a < 3; ++a) {
                        if ((d[a] == 1 && off[a] != 0) || (d[a] == -1 && off[a] != 1)) {
                            touches = false;
                        }
                    }
                    if (touches && !tree.node(tree.node(nbid).children[static_cast<std::size_t>(o)]).is_leaf()) {
                        return true;
                    }
                }
            }
        }
    }
    return false;
}

void split_batch(Octree& tree, const std::vector<NodeId>& batch) {
    // Ghosts of every leaf in the batch are filled before any split so that
    // prolongation sees the pre-split state.
    for (auto id : batch) {
        fill_ghosts(tree, id);
    }
    for (auto id : batch) {
        tree.split(id);
    }
}

// Adds coarser neighbours of flagged leaves so splitting keeps 2:1 balance.
void close_batch(const Octree& tree, std::vector<NodeId>& batch) {
    std::unordered_set<NodeId> flagged(batch.begin(), batch.end());
    std::vector<NodeId> work = batch;
    while (!work.empty()) {
        const NodeId id = work.back();
        work.pop_back();
        const auto& nd = tree.node(id);
        if (nd.level() == 0) {
            continue;
        }
        const std::int64_t nb = std::int64_t{1} << nd.level();
        for (int dz = -1; dz <= 1; ++dz) {
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    BlockCoord b = nd.block;
                    const std::array<int, 3> d{dx, dy, dz};
                    bool outside = false;
                    for (std::size_t a = 0; a < 3; ++a) {
                        b.c[a] += d[a];
                        if (b.c[a] < 0 || b.c[a] >= nb) {
                            if (tree.boundary() == BoundaryKind::periodic) {
                                b.c[a] = (b.c[a] + nb) % nb;
                            } else {
                                outside = true;
                            }
                        }
                    }
                    if (outside) {
                        continue;
                    }
                    const NodeId c = tree.covering_leaf(b);
                    if (c == no_node || tree.node(c).level() >= nd.level()) {
                        continue;
                    }
                    if (flagged.insert(c).second) {
                        batch.push_back(c);
                        work.push_back(c);
                    }
                }
            }
        }
    }
}

}  // namespace

void refine_by_criterion(Octree& tree, const LeafPredicate& refine, int max_level) {
    bool changed = true;
    while (changed) {
        changed = false;
        std::vector<NodeId> batch;
        for (auto id : tree.leaves()) {
            if (tree.node(id).level() < max_level && refine(tree, id)) {
                batch.push_back(id);
            }
        }
        close_batch(tree, batch);
        if (!batch.empty()) {
            split_batch(tree, batch);
            changed = true;
        }
        bool balanced = false;
        while (!balanced) {
            std::vector<NodeId> forced;
            for (auto id : tree.leaves()) {
                if (needs_balance_split(tree, id)) {
                    forced.push_back(id);
                }
            }
            balanced = forced.empty();
            if (!balanced) {
                split_batch(tree, forced);
                changed = true;
            }
        }
    }
}

real field_total(const Octree& tree, Field f) {
    real total = 0;
    const int n = tree.n();
    for (auto id : tree.leaves()) {
        const auto& sg = tree.grid(id);
        const auto fs = sg.field(f);
        real s = 0;
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < n; ++i) {
                    s += fs[sg.index(i, j, k)];
                }
            }
        }
        total += s * sg.dx() * sg.dx() * sg.dx();
    }
    return total;
}

}  // namespace octo::mesh
