#include "gluadfl/topology.hpp"

#include <algorithm>
#include <ostream>

#include "gluadfl/errors.hpp"
#include "gluadfl/rng.hpp"

namespace gluadfl {

namespace {

constexpr std::uint64_t kGraphTag = 0x47524150ULL;

CommGraph make_empty(int n) {
    CommGraph g;
    g.n_nodes = n;
    g.in_neighbors.resize(static_cast<std::size_t>(n));
    return g;
}

void add_undirected(CommGraph& g, int a, int b) {
    auto& in_a = g.in_neighbors[static_cast<std::size_t>(a)];
    auto& in_b = g.in_neighbors[static_cast<std::size_t>(b)];
    if (std::find(in_a.begin(), in_a.end(), b) == in_a.end()) in_a.push_back(b);
    if (std::find(in_b.begin(), in_b.end(), a) == in_b.end()) in_b.push_back(a);
}

void sort_all(CommGraph& g) {
    for (auto& v : g.in_neighbors) std::sort(v.begin(), v.end());
}

} // namespace

CommGraph build_ring(int n) {
    require(n >= 3, Errc::InvalidArgument, "ring needs at least 3 nodes");
    CommGraph g = make_empty(n);
    for (int i = 0; i < n; ++i) add_undirected(g, i, (i + 1) % n);
    sort_all(g);
    return g;
}

CommGraph build_cluster(int n, int cluster_size) {
    require(n >= 4, Errc::InvalidArgument, "cluster topology needs at least 4 nodes");
    require(cluster_size >= 2 && cluster_size < n, Errc::InvalidArgument,
            "cluster_size must be in [2, n_nodes)");
    CommGraph g = make_empty(n);

    // Consecutive-id clusters, each complete; the last may be smaller.
    const int n_clusters = (n + cluster_size - 1) / cluster_size;
    for (int c = 0; c < n_clusters; ++c) {
        const int lo = c * cluster_size;
        const int hi = std::min(lo + cluster_size, n);
        for (int a = lo; a < hi; ++a) {
            for (int b = a + 1; b < hi; ++b) add_undirected(g, a, b);
        }
    }
    // Ring of clusters bridged through each cluster's first node.
    for (int c = 0; c < n_clusters; ++c) {
        const int next = (c + 1) % n_clusters;
        if (next == c) continue;
        add_undirected(g, c * cluster_size, next * cluster_size);
    }
    sort_all(g);
    return g;
}

CommGraph build_star(int n) {
    require(n >= 2, Errc::InvalidArgument, "star needs at least 2 nodes");
    CommGraph g = make_empty(n);
    for (int i = 1; i < n; ++i) add_undirected(g, 0, i);
    sort_all(g);
    return g;
}

CommGraph sample_round_graph(const TopologySpec& spec, const std::vector<std::uint8_t>& active,
                             std::uint64_t graph_seed, int round) {
    const int n = static_cast<int>(active.size());
    require(spec.comm_batch >= 1, Errc::InvalidArgument, "comm_batch must be >= 1");
    CommGraph g = make_empty(n);

    if (spec.kind == TopologyKind::Random) {
        if (spec.undirected_random) {
            // Non-default variant: draw undirected edges greedily under a
            // shared degree cap, from a single per-round stream.
            Rng rng(derive_stream({graph_seed, kGraphTag, static_cast<std::uint64_t>(round)}));
            std::vector<int> act;
            for (int i = 0; i < n; ++i) {
                if (active[static_cast<std::size_t>(i)]) act.push_back(i);
            }
            std::vector<std::pair<int, int>> pairs;
            for (std::size_t a = 0; a < act.size(); ++a) {
                for (std::size_t b = a + 1; b < act.size(); ++b) pairs.emplace_back(act[a], act[b]);
            }
            rng.shuffle(pairs);
            std::vector<int> degree(static_cast<std::size_t>(n), 0);
            for (const auto& [a, b] : pairs) {
                if (degree[static_cast<std::size_t>(a)] >= spec.comm_batch) continue;
                if (degree[static_cast<std::size_t>(b)] >= spec.comm_batch) continue;
                add_undirected(g, a, b);
                ++degree[static_cast<std::size_t>(a)];
                ++degree[static_cast<std::size_t>(b)];
            }
        } else {
            // Directed receive sets, one independent stream per (round, node).
            std::vector<int> others;
            for (int i = 0; i < n; ++i) {
                if (!active[static_cast<std::size_t>(i)]) continue;
                others.clear();
                for (int j = 0; j < n; ++j) {
                    if (j != i && active[static_cast<std::size_t>(j)]) others.push_back(j);
                }
                if (others.empty()) continue;
                const int take = std::min<int>(spec.comm_batch, static_cast<int>(others.size()));
                Rng rng(derive_stream({graph_seed, kGraphTag, static_cast<std::uint64_t>(round),
                                       static_cast<std::uint64_t>(i)}));
                auto picks = rng.sample_without_replacement(static_cast<int>(others.size()), take);
                auto& in = g.in_neighbors[static_cast<std::size_t>(i)];
                for (int idx : picks) in.push_back(others[static_cast<std::size_t>(idx)]);
            }
        }
        sort_all(g);
        return g;
    }

    CommGraph templ;
    switch (spec.kind) {
    case TopologyKind::Ring: templ = build_ring(n); break;
    case TopologyKind::Cluster: templ = build_cluster(n, spec.cluster_size); break;
    case TopologyKind::Star: templ = build_star(n); break;
    default: raise(Errc::InvalidArgument, "unreachable topology kind");
    }

    for (int i = 0; i < n; ++i) {
        if (!active[static_cast<std::size_t>(i)]) continue;
        auto& in = g.in_neighbors[static_cast<std::size_t>(i)];
        for (int src : templ.in_neighbors[static_cast<std::size_t>(i)]) {
            if (!active[static_cast<std::size_t>(src)]) continue;
            in.push_back(src); // template is sorted, so the cap keeps lowest ids
            if (static_cast<int>(in.size()) == spec.comm_batch) break;
        }
    }
    return g;
}

void dump_graph_jsonl(std::ostream& out, const CommGraph& graph, int round) {
    for (int i = 0; i < graph.n_nodes; ++i) {
        out << "{\"t\":" << round << ",\"node\":" << i << ",\"in\":[";
        const auto& in = graph.in_neighbors[static_cast<std::size_t>(i)];
        for (std::size_t k = 0; k < in.size(); ++k) {
            if (k > 0) out << ',';
            out << in[k];
        }
        out << "]}\n";
    }
}

const char* to_string(TopologyKind kind) noexcept {
    switch (kind) {
    case TopologyKind::Ring: return "ring";
    case TopologyKind::Cluster: return "cluster";
    case TopologyKind::Random: return "random";
    case TopologyKind::Star: return "star";
    }
    return "?";
}

TopologyKind topology_kind_from_string(const std::string& name) {
    if (name == "ring") return TopologyKind::Ring;
    if (name == "cluster") return TopologyKind::Cluster;
    if (name == "random") return TopologyKind::Random;
    if (name == "star") return TopologyKind::Star;
    raise(Errc::Config, "unknown topology '" + name + "'");
}

} // namespace gluadfl
