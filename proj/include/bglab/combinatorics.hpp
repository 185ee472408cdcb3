#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

// Exact combinatorics of cluster expansions: set partitions, moment/cumulant
// transforms, truncated functions of connection relations, Penrose's tree
// scheme and labeled-tree counting. Vertices and ground-set elements are
// 0-based; subsets are bitmasks.

namespace bglab::comb {

using Integer = boost::multiprecision::cpp_int;
using Rational = boost::multiprecision::cpp_rational;
using Mask = std::uint32_t;
using EdgeMask = std::uint64_t;

struct Partition {
    int n = 0;
    std::vector<Mask> blocks;  // ordered by smallest element
};

struct LabeledTree {
    int n = 0;
    std::vector<std::pair<int, int>> edges;  // u < v, sorted
};

bool operator==(const LabeledTree& a, const LabeledTree& b);

// Symmetric irreflexive relation on {0..n-1}.
class ConnectionRelation {
public:
    explicit ConnectionRelation(int n);
    int size() const { return n_; }
    void connect(int i, int j);
    bool connected(int i, int j) const;
    EdgeMask edges() const;

private:
    int n_;
    std::vector<Mask> adj_;
};

// Values G(S) on every nonempty subset S of {0..n-1}; index 0 is unused.
class MomentFamily {
public:
    explicit MomentFamily(int n);
    int size() const { return n_; }
    Rational& operator[](Mask s) { return values_.at(s); }
    const Rational& operator[](Mask s) const { return values_.at(s); }
    bool operator==(const MomentFamily& other) const;

private:
    int n_;
    std::vector<Rational> values_;
};

// Edge index of the unordered pair {i,j} in the canonical pair ordering.
int pair_index(int i, int j, int n);
std::pair<int, int> pair_of_index(int k, int n);
int pair_count(int n);
bool graph_connected(EdgeMask g, int n);

// Calls f on every partition of the set `s` (lexicographic restricted growth
// order over the members of s).
void for_each_partition(Mask s, const std::function<void(const std::vector<Mask>&)>& f);

std::vector<Partition> enumerate_partitions(int n, std::optional<int> s = std::nullopt);

MomentFamily moments_to_cumulants(const MomentFamily& G);
MomentFamily cumulants_to_moments(const MomentFamily& g);

std::pair<Rational, Rational> combinatorial_identity_sums(int n);

std::vector<LabeledTree> enumerate_trees(int n);
Integer count_trees_with_degrees(const std::vector<int>& degrees);

Rational truncated_function(const ConnectionRelation& rel);
Rational tree_inequality_bound(const ConnectionRelation& rel);

// Cumulant family of the disconnection indicator Phi(S) = 1 iff no pair of S is
// connected; its top entry equals truncated_function(rel).
MomentFamily disconnection_family(const ConnectionRelation& rel);

EdgeMask tree_edges(const LabeledTree& t);
LabeledTree tree_from_edges(EdgeMask e, int n);

LabeledTree penrose_map(EdgeMask g, int n, int root);
EdgeMask penrose_escape_edges(const LabeledTree& t, int root);

struct SelftestRow {
    std::string check;
    int n;
    std::string expected;
    std::string got;
    bool pass;
};

std::vector<SelftestRow> selftest(int max_n);

}  // namespace bglab::comb
