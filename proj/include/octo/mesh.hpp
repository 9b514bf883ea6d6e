#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "octo/common.hpp"

namespace octo::mesh {

enum class Field : int { rho = 0, sx = 1, sy = 2, sz = 3, egas = 4, tau = 5 };
inline constexpr int num_fields = 6;
inline constexpr int ghost_width = 3;

/// Evolved per-cell variables.
struct ConservedState {
    real rho = 0;
    real sx = 0, sy = 0, sz = 0;
    real egas = 0;
    real tau = 0;

    real& operator[](int f) { return (&rho)[f]; }
    real operator[](int f) const { return (&rho)[f]; }
    Vec3 momentum() const { return {sx, sy, sz}; }
    friend bool operator==(const ConservedState&, const ConservedState&) = default;
};

enum class BoundaryKind { periodic, reflecting, outflow };

/// Axis-aligned cubic computational domain.
struct Domain {
    Vec3 lower{-0.5, -0.5, -0.5};
    real width = 1.0;
};

inline bool valid_subgrid_size(int n) { return n == 8 || n == 16 || n == 32; }

/// A cubic block of n^3 cells with a ghost halo of width 3, stored
/// field-major with x fastest. Local indices run over [-3, n + 3).
class SubGrid {
public:
    SubGrid(int n, Vec3 origin, real dx, int level, bool allocate = true);

    int n() const { return n_; }
    int padded() const { return n_ + 2 * ghost_width; }
    std::size_t padded_volume() const {
        auto p = static_cast<std::size_t>(padded());
        return p * p * p;
    }
    real dx() const { return dx_; }
    int level() const { return level_; }
    const Vec3& origin() const { return origin_; }
    bool allocated() const { return !data_[0].empty(); }

    std::size_t index(int i, int j, int k) const {
        const int p = padded();
        return static_cast<std::size_t>((i + ghost_width) + p * ((j + ghost_width) + p * (k + ghost_width)));
    }
    /// Linear stride between neighbouring cells along axis d.
    std::ptrdiff_t stride(int d) const {
        const std::ptrdiff_t p = padded();
        return d == 0 ? 1 : (d == 1 ? p : p * p);
    }

    std::span<real> field(Field f) { return data_[static_cast<int>(f)]; }
    std::span<const real> field(Field f) const { return data_[static_cast<int>(f)]; }
    real& at(Field f, int i, int j, int k) { return data_[static_cast<int>(f)][index(i, j, k)]; }
    real at(Field f, int i, int j, int k) const { return data_[static_cast<int>(f)][index(i, j, k)]; }

    ConservedState state(int i, int j, int k) const;
    void set_state(int i, int j, int k, const ConservedState& s);

    Vec3 cell_center(int i, int j, int k) const {
        return {origin_.x + i * dx_, origin_.y + j * dx_, origin_.z + k * dx_};
    }

    /// Copies of the interior cells only, x fastest, one vector per field.
    std::array<std::vector<real>, num_fields> interior_copy() const;
    void assign_interior(const std::array<std::vector<real>, num_fields>& values);

private:
    int n_;
    Vec3 origin_;
    real dx_;
    int level_;
    std::array<std::vector<real>, num_fields> data_;
};

using NodeId = std::int32_t;
inline constexpr NodeId no_node = -1;

struct BlockCoord {
    int level = 0;
    std::array<std::int64_t, 3> c{0, 0, 0};
    friend bool operator==(const BlockCoord&, const BlockCoord&) = default;
};

struct BlockCoordHash {
    std::size_t operator()(const BlockCoord& b) const noexcept;
};

struct OctreeNode {
    NodeId parent = no_node;
    std::array<NodeId, 8> children{no_node, no_node, no_node, no_node, no_node, no_node, no_node, no_node};
    BlockCoord block;
    std::unique_ptr<SubGrid> subgrid;  // present iff leaf

    bool is_leaf() const { return children[0] == no_node; }
    int level() const { return block.level; }
};

/// Octant index of a child: bit 0 = x, bit 1 = y, bit 2 = z.
inline std::array<int, 3> octant_offset(int octant) { return {octant & 1, (octant >> 1) & 1, (octant >> 2) & 1}; }

struct TreeConfig {
    int n_per_side = 8;
    Domain domain;
    BoundaryKind boundary = BoundaryKind::outflow;
    /// Upper bound on bytes held by leaf cell arrays (ghosts included).
    std::size_t memory_budget = std::size_t{3} << 30;
    /// False builds topology only (sub-grids without cell storage).
    bool allocate_cells = true;
};

/// Reference to one cell on one leaf.
struct CellRef {
    NodeId leaf = no_node;
    std::array<int, 3> local{0, 0, 0};
};

class Octree {
public:
    explicit Octree(TreeConfig config);
    Octree(Octree&&) noexcept = default;
    Octree& operator=(Octree&&) noexcept = default;

    /// Deep copy of topology and cell data.
    Octree clone() const;

    const TreeConfig& config() const { return config_; }
    int n() const { return config_.n_per_side; }
    BoundaryKind boundary() const { return config_.boundary; }
    const Domain& domain() const { return config_.domain; }

    NodeId root() const { return 0; }
    std::size_t node_count() const { return nodes_.size(); }
    const OctreeNode& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    OctreeNode& node(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
    SubGrid& grid(NodeId leaf) { return *nodes_[static_cast<std::size_t>(leaf)].subgrid; }
    const SubGrid& grid(NodeId leaf) const { return *nodes_[static_cast<std::size_t>(leaf)].subgrid; }

    /// Leaves in depth-first octant order; stable between structural changes.
    const std::vector<NodeId>& leaves() const { return leaves_; }
    int max_level() const;
    std::size_t interior_cells() const { return leaves_.size() * static_cast<std::size_t>(n() * n() * n()); }

    real block_width(int level) const { return config_.domain.width / static_cast<real>(std::int64_t{1} << level); }
    real cell_width(int level) const { return block_width(level) / n(); }
    std::int64_t cells_per_axis(int level) const { return (std::int64_t{1} << level) * n(); }
    Vec3 block_center(const BlockCoord& b) const;

    NodeId find(const BlockCoord& b) const;
    /// Leaf whose block covers the given block (which may be finer than the leaf);
    /// no_node if the covering node is refined below b.level.
    NodeId covering_leaf(const BlockCoord& b) const;
    /// Leaf and local index of the cell containing point x (inside the domain).
    std::optional<CellRef> locate(const Vec3& x) const;

    /// Splits a leaf into eight children. Child cells are filled by limited
    /// linear prolongation from the parent's interior and (filled) ghosts.
    void split(NodeId leaf);
    /// Splits a leaf leaving child cells zero.
    void split_empty(NodeId leaf, bool update_leaves = true);

    std::vector<std::uint8_t> octant_path(NodeId id) const;
    /// Creates nodes along the path as needed; returns the node at the end.
    NodeId ensure_path(std::span<const std::uint8_t> path);

    /// Distinct leaves read when filling the ghosts of `leaf`.
    std::vector<NodeId> ghost_sources(NodeId leaf) const;

    /// Leaves sharing face `face` (0..5 = -x,+x,-y,+y,-z,+z) with `leaf`,
    /// empty on a non-periodic domain boundary.
    std::vector<NodeId> face_neighbors(NodeId leaf, int face) const;

    /// True if every pair of leaves touching in a face, edge or corner
    /// differs by at most one level.
    bool is_balanced() const;

    void rebuild_leaf_list();

private:
    void check_budget(std::size_t extra_leaves) const;
    std::unique_ptr<SubGrid> make_subgrid(const BlockCoord& b) const;

    TreeConfig config_;
    std::vector<OctreeNode> nodes_;
    std::unordered_map<BlockCoord, NodeId, BlockCoordHash> index_;
    std::vector<NodeId> leaves_;
};

/// Complete octree with 8^level leaves.
Octree build_uniform_tree(int level, int n_per_side, TreeConfig base = {});

using LeafPredicate = std::function<bool(const Octree&, NodeId)>;

/// Splits leaves below max_level for which the predicate holds, repeating on
/// new children, then restores 2:1 balance by forced refinement.
void refine_by_criterion(Octree& tree, const LeafPredicate& refine, int max_level);

/// Fills the ghost layer of every leaf (or of one leaf) from leaf interiors.
void exchange_ghosts(Octree& tree);
void fill_ghosts(Octree& tree, NodeId leaf);

/// Eight children of a parent cell, from the parent and its six face
/// neighbours: centre value plus minmod-limited slope times +-1/4 per axis.
/// `neighbors` = {-x, +x, -y, +y, -z, +z}. Children in octant order.
std::array<real, 8> prolong(real parent, const std::array<real, 6>& neighbors);

/// Arithmetic mean of eight children.
real restrict_average(const std::array<real, 8>& children);

real minmod(real a, real b);

/// Sum over leaves of field * dx^3, in leaf order.
real field_total(const Octree& tree, Field f);

}  // namespace octo::mesh
