#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace gluadfl {

enum class TopologyKind { Ring, Cluster, Random, Star };

struct TopologySpec {
    TopologyKind kind = TopologyKind::Random;
    int cluster_size = 4;         // Cluster only
    int comm_batch = 7;           // B, hard cap on received models per round
    bool undirected_random = false; // sample undirected edges instead of per-node receive sets
};

// Directed receive sets: in_neighbors[n] lists the nodes whose parameters n
// aggregates this round. Static templates store the symmetric potential
// neighbor sets before activity filtering and the B cap.
struct CommGraph {
    int n_nodes = 0;
    std::vector<std::vector<int>> in_neighbors;

    int in_edge_count() const noexcept {
        std::size_t n = 0;
        for (const auto& v : in_neighbors) n += v.size();
        return static_cast<int>(n);
    }
};

CommGraph build_ring(int n_nodes);                    // n >= 3
CommGraph build_cluster(int n_nodes, int cluster_size); // n >= 4, 2 <= cluster_size < n
CommGraph build_star(int n_nodes);                    // n >= 2, node 0 is the server

// Per-round graph under the activity mask. Random draws each active node's
// receive set from a stream keyed on (seed, round, node); static kinds filter
// their template to active sources and truncate to B by ascending id.
// Inactive nodes neither send nor receive.
CommGraph sample_round_graph(const TopologySpec& spec, const std::vector<std::uint8_t>& active_mask,
                             std::uint64_t graph_seed, int round);

// One JSON object per node: {"t":t,"node":n,"in":[...]}
void dump_graph_jsonl(std::ostream& out, const CommGraph& graph, int round);

const char* to_string(TopologyKind kind) noexcept;
TopologyKind topology_kind_from_string(const std::string& name);

} // namespace gluadfl
