#include "bglab/combinatorics.hpp"

#include <algorithm>
#include <bit>
#include <map>
#include <random>
#include <stdexcept>

namespace bglab::comb {

namespace {

Integer factorial(int k) {
    Integer r = 1;
    for (int i = 2; i <= k; ++i) r *= i;
    return r;
}

void partition_rec(const std::vector<int>& elems, std::size_t i, std::vector<Mask>& blocks,
                   const std::function<void(const std::vector<Mask>&)>& f) {
    if (i == elems.size()) {
        f(blocks);
        return;
    }
    const Mask bit = Mask{1} << elems[i];
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        blocks[b] |= bit;
        partition_rec(elems, i + 1, blocks, f);
        blocks[b] &= ~bit;
    }
    blocks.push_back(bit);
    partition_rec(elems, i + 1, blocks, f);
    blocks.pop_back();
}

// BFS labeling used by the Penrose scheme. pos[v] is the rank of v inside its
// generation: members are ordered by (rank of parent, vertex index).
struct PenroseLabels {
    std::vector<int> parent, depth, pos;
    std::vector<std::pair<int, int>> tree;
};

PenroseLabels penrose_labels(EdgeMask g, int n, int root) {
    auto adjacent = [&](int a, int b) { return (g >> pair_index(a, b, n)) & 1u; };
    PenroseLabels L;
    L.parent.assign(n, -1);
    L.depth.assign(n, -1);
    L.pos.assign(n, -1);
    std::vector<int> gen{root};
    L.depth[root] = 0;
    L.pos[root] = 0;
    int d = 0;
    while (!gen.empty()) {
        std::vector<std::pair<int, int>> next;  // (rank of parent, child)
        for (int i = 0; i < n; ++i) {
            if (L.depth[i] >= 0) continue;
            for (std::size_t j = 0; j < gen.size(); ++j) {
                if (adjacent(gen[j], i)) {
                    next.emplace_back(static_cast<int>(j), i);
                    break;
                }
            }
        }
        std::sort(next.begin(), next.end());
        ++d;
        std::vector<int> ngen;
        for (std::size_t k = 0; k < next.size(); ++k) {
            const int i = next[k].second;
            const int p = gen[next[k].first];
            L.parent[i] = p;
            L.depth[i] = d;
            L.pos[i] = static_cast<int>(k);
            L.tree.emplace_back(std::min(p, i), std::max(p, i));
            ngen.push_back(i);
        }
        gen = std::move(ngen);
    }
    std::sort(L.tree.begin(), L.tree.end());
    return L;
}

const std::vector<EdgeMask>& tree_masks(int n) {
    static const std::vector<std::vector<EdgeMask>> cache = [] {
        std::vector<std::vector<EdgeMask>> c(8);
        c[1] = {0};
        for (int k = 2; k <= 7; ++k)
            for (const auto& t : enumerate_trees(k)) c[k].push_back(tree_edges(t));
        return c;
    }();
    if (n < 1 || n > 7) throw std::invalid_argument("tree cache supports 1 <= n <= 7");
    return cache[n];
}

std::string to_str(const Rational& q) { return q.str(); }

}  // namespace

bool operator==(const LabeledTree& a, const LabeledTree& b) {
    return a.n == b.n && a.edges == b.edges;
}

ConnectionRelation::ConnectionRelation(int n) : n_(n), adj_(n, 0) {
    if (n < 1 || n > 8) throw std::invalid_argument("ConnectionRelation supports 1 <= n <= 8");
}

void ConnectionRelation::connect(int i, int j) {
    if (i == j) throw std::invalid_argument("relation must be irreflexive");
    adj_.at(i) |= Mask{1} << j;
    adj_.at(j) |= Mask{1} << i;
}

bool ConnectionRelation::connected(int i, int j) const { return (adj_.at(i) >> j) & 1u; }

EdgeMask ConnectionRelation::edges() const {
    EdgeMask e = 0;
    for (int i = 0; i < n_; ++i)
        for (int j = i + 1; j < n_; ++j)
            if (connected(i, j)) e |= EdgeMask{1} << pair_index(i, j, n_);
    return e;
}

MomentFamily::MomentFamily(int n) : n_(n), values_(std::size_t{1} << n) {
    if (n < 1 || n > 12) throw std::invalid_argument("MomentFamily supports 1 <= n <= 12");
}

bool MomentFamily::operator==(const MomentFamily& other) const {
    return n_ == other.n_ && values_ == other.values_;
}

int pair_count(int n) { return n * (n - 1) / 2; }

int pair_index(int i, int j, int n) {
    if (i > j) std::swap(i, j);
    // rows i=0..n-2, each holding the pairs (i, j>i)
    return i * (2 * n - i - 1) / 2 + (j - i - 1);
}

std::pair<int, int> pair_of_index(int k, int n) {
    for (int i = 0; i < n; ++i) {
        const int row = n - i - 1;
        if (k < row) return {i, i + 1 + k};
        k -= row;
    }
    throw std::out_of_range("pair index");
}

bool graph_connected(EdgeMask g, int n) {
    if (n <= 1) return true;
    std::vector<Mask> adj(n, 0);
    for (int k = 0; k < pair_count(n); ++k) {
        if ((g >> k) & 1u) {
            auto [i, j] = pair_of_index(k, n);
            adj[i] |= Mask{1} << j;
            adj[j] |= Mask{1} << i;
        }
    }
    Mask seen = 1, frontier = 1;
    while (frontier) {
        Mask next = 0;
        for (int v = 0; v < n; ++v)
            if ((frontier >> v) & 1u) next |= adj[v];
        frontier = next & ~seen;
        seen |= next;
    }
    return seen == (Mask{1} << n) - 1;
}

void for_each_partition(Mask s, const std::function<void(const std::vector<Mask>&)>& f) {
    std::vector<int> elems;
    for (int i = 0; i < 32; ++i)
        if ((s >> i) & 1u) elems.push_back(i);
    std::vector<Mask> blocks;
    partition_rec(elems, 0, blocks, f);
}

std::vector<Partition> enumerate_partitions(int n, std::optional<int> s) {
    if (n < 1 || n > 12) throw std::invalid_argument("enumerate_partitions supports 1 <= n <= 12");
    if (s && (*s < 1 || *s > n)) throw std::invalid_argument("part count out of range");
    std::vector<Partition> out;
    for_each_partition((Mask{1} << n) - 1, [&](const std::vector<Mask>& b) {
        if (!s || static_cast<int>(b.size()) == *s) out.push_back(Partition{n, b});
    });
    return out;
}

MomentFamily moments_to_cumulants(const MomentFamily& G) {
    const int n = G.size();
    std::vector<Integer> coef(n + 1);
    for (int k = 1; k <= n; ++k) coef[k] = (k % 2 ? 1 : -1) * factorial(k - 1);
    MomentFamily g(n);
    for (Mask S = 1; S < (Mask{1} << n); ++S) {
        Rational acc = 0;
        for_each_partition(S, [&](const std::vector<Mask>& blocks) {
            Rational term = Rational(coef[blocks.size()]);
            for (Mask b : blocks) term *= G[b];
            acc += term;
        });
        g[S] = acc;
    }
    return g;
}

MomentFamily cumulants_to_moments(const MomentFamily& g) {
    const int n = g.size();
    MomentFamily G(n);
    for (Mask S = 1; S < (Mask{1} << n); ++S) {
        Rational acc = 0;
        for_each_partition(S, [&](const std::vector<Mask>& blocks) {
            Rational term = 1;
            for (Mask b : blocks) term *= g[b];
            acc += term;
        });
        G[S] = acc;
    }
    return G;
}

std::pair<Rational, Rational> combinatorial_identity_sums(int n) {
    if (n < 2 || n > 10) throw std::invalid_argument("identity sums support 2 <= n <= 10");
    std::vector<Integer> fact(n + 1);
    for (int k = 0; k <= n; ++k) fact[k] = factorial(k);
    Integer s1 = 0, s2 = 0;
    for_each_partition((Mask{1} << n) - 1, [&](const std::vector<Mask>& blocks) {
        const int k = static_cast<int>(blocks.size());
        const int sign = k % 2 ? -1 : 1;
        s1 += sign * fact[k - 1];
        Integer prod = sign;
        for (Mask b : blocks) prod *= fact[std::popcount(b) - 1];
        s2 += prod;
    });
    return {Rational(s1), Rational(s2)};
}

EdgeMask tree_edges(const LabeledTree& t) {
    EdgeMask e = 0;
    for (auto [u, v] : t.edges) e |= EdgeMask{1} << pair_index(u, v, t.n);
    return e;
}

LabeledTree tree_from_edges(EdgeMask e, int n) {
    LabeledTree t{n, {}};
    for (int k = 0; k < pair_count(n); ++k)
        if ((e >> k) & 1u) t.edges.push_back(pair_of_index(k, n));
    return t;
}

std::vector<LabeledTree> enumerate_trees(int n) {
    if (n < 2 || n > 8) throw std::invalid_argument("enumerate_trees supports 2 <= n <= 8");
    std::vector<LabeledTree> out;
    if (n == 2) {
        out.push_back(LabeledTree{2, {{0, 1}}});
        return out;
    }
    // Pruefer sequences of length n-2 in lexicographic order.
    std::vector<int> seq(n - 2, 0);
    while (true) {
        std::vector<int> degree(n, 1);
        for (int a : seq) ++degree[a];
        LabeledTree t{n, {}};
        for (int a : seq) {
            int leaf = 0;
            while (degree[leaf] != 1) ++leaf;
            t.edges.emplace_back(std::min(leaf, a), std::max(leaf, a));
            --degree[leaf];
            --degree[a];
        }
        int u = -1, v = -1;
        for (int i = 0; i < n; ++i) {
            if (degree[i] == 1) (u < 0 ? u : v) = i;
        }
        t.edges.emplace_back(u, v);
        std::sort(t.edges.begin(), t.edges.end());
        out.push_back(std::move(t));

        int k = n - 3;
        while (k >= 0 && seq[k] == n - 1) seq[k--] = 0;
        if (k < 0) break;
        ++seq[k];
    }
    return out;
}

Integer count_trees_with_degrees(const std::vector<int>& degrees) {
    const int n = static_cast<int>(degrees.size());
    if (n < 2) throw std::invalid_argument("need at least two vertices");
    int sum = 0;
    for (int d : degrees) {
        if (d < 1) throw std::invalid_argument("degrees must be >= 1");
        sum += d;
    }
    if (sum != 2 * (n - 1)) throw std::invalid_argument("degree sum must equal 2(n-1)");
    Integer den = 1;
    for (int d : degrees) den *= factorial(d - 1);
    return factorial(n - 2) / den;
}

Rational truncated_function(const ConnectionRelation& rel) {
    const int n = rel.size();
    if (n > 7) throw std::invalid_argument("truncated_function supports n <= 7");
    const EdgeMask E = rel.edges();
    long long acc = 0;
    // Connected graphs with an edge outside the relation contribute zero.
    EdgeMask sub = E;
    while (true) {
        if (graph_connected(sub, n)) acc += (std::popcount(sub) % 2 ? -1 : 1);
        if (sub == 0) break;
        sub = (sub - 1) & E;
    }
    return Rational(acc);
}

Rational tree_inequality_bound(const ConnectionRelation& rel) {
    const int n = rel.size();
    const EdgeMask E = rel.edges();
    long long count = 0;
    for (EdgeMask t : tree_masks(n))
        if ((t & ~E) == 0) ++count;
    return Rational(count);
}

MomentFamily disconnection_family(const ConnectionRelation& rel) {
    const int n = rel.size();
    MomentFamily phi(n);
    for (Mask S = 1; S < (Mask{1} << n); ++S) {
        bool free = true;
        for (int i = 0; i < n && free; ++i)
            for (int j = i + 1; j < n && free; ++j)
                if (((S >> i) & 1u) && ((S >> j) & 1u) && rel.connected(i, j)) free = false;
        phi[S] = free ? 1 : 0;
    }
    return moments_to_cumulants(phi);
}

LabeledTree penrose_map(EdgeMask g, int n, int root) {
    if (n < 1 || n > 8) throw std::invalid_argument("penrose_map supports n <= 8");
    if (root < 0 || root >= n) throw std::invalid_argument("root out of range");
    if (!graph_connected(g, n)) throw std::invalid_argument("penrose_map requires a connected graph");
    auto L = penrose_labels(g, n, root);
    return LabeledTree{n, std::move(L.tree)};
}

EdgeMask penrose_escape_edges(const LabeledTree& t, int root) {
    const int n = t.n;
    const EdgeMask te = tree_edges(t);
    if (static_cast<int>(t.edges.size()) != n - 1 || !graph_connected(te, n))
        throw std::invalid_argument("penrose_escape_edges requires a tree");
    const auto L = penrose_labels(te, n, root);
    EdgeMask out = 0;
    for (int a = 0; a < n; ++a) {
        for (int b = a + 1; b < n; ++b) {
            bool keep = false;
            if (L.depth[a] == L.depth[b]) {
                keep = true;
            } else {
                int i = a, j = b;  // i one generation above j
                if (L.depth[i] > L.depth[j]) std::swap(i, j);
                if (L.depth[j] == L.depth[i] + 1 && L.parent[j] != i)
                    keep = L.pos[L.parent[j]] < L.pos[i];
            }
            if (keep) out |= EdgeMask{1} << pair_index(a, b, n);
        }
    }
    return out;
}

std::vector<SelftestRow> selftest(int max_n) {
    std::vector<SelftestRow> rows;
    auto add = [&](std::string check, int n, const std::string& e, const std::string& g) {
        rows.push_back({std::move(check), n, e, g, e == g});
    };

    // Bell numbers from the Bell triangle, independent of the enumerator.
    {
        std::vector<Integer> row{1};
        for (int n = 1; n <= std::min(max_n, 10); ++n) {
            std::vector<Integer> next{row.back()};
            for (const auto& x : row) next.push_back(next.back() + x);
            add("partition_count", n, row.back().str(),
                std::to_string(enumerate_partitions(n).size()));
            row = std::move(next);
        }
    }
    for (int n = 2; n <= std::min(max_n, 7); ++n) {
        Integer cayley = boost::multiprecision::pow(Integer(n), n - 2);
        add("cayley", n, cayley.str(), std::to_string(enumerate_trees(n).size()));
    }
    for (int n = 3; n <= std::min(max_n, 7); ++n) {
        std::map<std::vector<int>, long long> filtered;
        for (const auto& t : enumerate_trees(n)) {
            std::vector<int> deg(n, 0);
            for (auto [u, v] : t.edges) ++deg[u], ++deg[v];
            ++filtered[deg];
        }
        long long mismatches = 0;
        Integer total = 0;
        // all degree vectors with entries >= 1 summing to 2(n-1)
        std::vector<int> deg(n, 1);
        std::function<void(int, int)> rec = [&](int i, int left) {
            if (i == n - 1) {
                deg[i] = 1 + left;
                Integer c = count_trees_with_degrees(deg);
                total += c;
                auto it = filtered.find(deg);
                if (c != Integer(it == filtered.end() ? 0 : it->second)) ++mismatches;
                return;
            }
            for (int extra = 0; extra <= left; ++extra) {
                deg[i] = 1 + extra;
                rec(i + 1, left - extra);
            }
        };
        rec(0, n - 2);
        add("degree_count_mismatches", n, "0", std::to_string(mismatches));
        add("degree_count_total", n, Integer(boost::multiprecision::pow(Integer(n), n - 2)).str(), total.str());
    }
    for (int n = 2; n <= std::min(max_n, 10); ++n) {
        auto [a, b] = combinatorial_identity_sums(n);
        add("identity_sum_1", n, "0", to_str(a));
        add("identity_sum_2", n, "0", to_str(b));
    }
    std::mt19937_64 rng(20240611);
    for (int n = 1; n <= std::min(max_n, 8); ++n) {
        MomentFamily G(n);
        for (Mask S = 1; S < (Mask{1} << n); ++S)
            G[S] = Rational(static_cast<long long>(rng() % 41) - 20, 1 + static_cast<long long>(rng() % 9));
        add("moment_cumulant_roundtrip", n, "exact",
            cumulants_to_moments(moments_to_cumulants(G)) == G ? "exact" : "mismatch");
    }
    for (int n = 2; n <= std::min(max_n, 6); ++n) {
        const int P = pair_count(n);
        long long bad = 0;
        const EdgeMask limit = EdgeMask{1} << P;
        const EdgeMask stride = n <= 5 ? 1 : 97;  // 338 of the 32768 relations at n=6
        for (EdgeMask e = 0; e < limit; e += stride) {
            ConnectionRelation rel(n);
            for (int k = 0; k < P; ++k)
                if ((e >> k) & 1u) {
                    auto [i, j] = pair_of_index(k, n);
                    rel.connect(i, j);
                }
            Rational phi = truncated_function(rel);
            Rational cum = disconnection_family(rel)[(Mask{1} << n) - 1];
            if (phi != cum || abs(phi) > tree_inequality_bound(rel)) ++bad;
        }
        add("truncated_function_vs_cumulant", n, "0", std::to_string(bad));
    }
    for (int n = 2; n <= std::min(max_n, 6); ++n) {
        const int P = pair_count(n);
        long long connected = 0, violations = 0;
        std::map<EdgeMask, long long> hits;
        for (EdgeMask g = 0; g < (EdgeMask{1} << P); ++g) {
            if (!graph_connected(g, n)) continue;
            ++connected;
            const auto T = penrose_map(g, n, 0);
            const EdgeMask te = tree_edges(T);
            const EdgeMask esc = penrose_escape_edges(T, 0);
            if ((te & ~g) != 0 || (g & ~(te | esc)) != 0) ++violations;
            ++hits[te];
        }
        Integer fiber_total = 0;
        for (EdgeMask t : tree_masks(n)) {
            const EdgeMask esc = penrose_escape_edges(tree_from_edges(t, n), 0);
            const long long size = 1LL << std::popcount(esc);
            fiber_total += size;
            if (hits[t] != size) ++violations;
        }
        add("penrose_fiber_total", n, std::to_string(connected), fiber_total.str());
        add("penrose_interval_violations", n, "0", std::to_string(violations));
    }
    return rows;
}

}  // namespace bglab::comb
