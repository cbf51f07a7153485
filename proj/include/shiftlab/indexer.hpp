#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "shiftlab/encoder.hpp"
#include "shiftlab/linalg.hpp"

namespace shiftlab {

inline constexpr const char* kIdLabel = "id";

// Cluster prototypes for routing. The reserved "id" entry is the reject
// option; id_bias scales its distance in the routing score (bias < 1 makes
// rejection easier, > 1 harder).
struct ClusterSet {
    struct Entry {
        std::string label;
        Vec centroid;
    };
    std::vector<Entry> entries;
    double id_bias = 1.0;

    const Entry* find(const std::string& label) const {
        for (const Entry& e : entries)
            if (e.label == label) return &e;
        return nullptr;
    }

    void validate() const {
        if (id_bias <= 0.0) throw ConfigError("ClusterSet: id_bias must be > 0");
        if (!find(kIdLabel)) throw ConfigError("ClusterSet: missing reserved 'id' entry");
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (entries[i].centroid.size() != entries[0].centroid.size())
                throw ConfigError("ClusterSet: centroid dimensions disagree");
            for (std::size_t j = i + 1; j < entries.size(); ++j)
                if (entries[i].label == entries[j].label)
                    throw ConfigError("ClusterSet: duplicate label '" + entries[i].label + "'");
        }
    }

    // Sub-setting supports the routing variants: a set with only the wanted
    // entries is an ordinary ClusterSet, no special mode needed.
    ClusterSet subset(std::span<const std::string> labels) const {
        ClusterSet out;
        out.id_bias = id_bias;
        const Entry* id_entry = find(kIdLabel);
        if (id_entry) out.entries.push_back(*id_entry);
        for (const std::string& l : labels) {
            if (l == kIdLabel) continue;
            const Entry* e = find(l);
            if (!e) throw ConfigError("ClusterSet::subset: unknown label '" + l + "'");
            out.entries.push_back(*e);
        }
        return out;
    }
};

inline Vec compute_centroid(std::span<const Embedding> embeddings) {
    if (embeddings.empty()) throw std::invalid_argument("compute_centroid: empty set");
    Vec c(embeddings.front().values.size(), 0.0);
    for (const Embedding& e : embeddings) {
        if (e.values.size() != c.size()) throw std::invalid_argument("compute_centroid: dimension mismatch");
        for (std::size_t i = 0; i < c.size(); ++i) c[i] += e.values[i];
    }
    for (double& v : c) v /= static_cast<double>(embeddings.size());
    return c;
}

// Outcome of one routing query. `distances` holds the scores the argmin ran
// on (the id entry carries the bias factor).
struct RoutingDecision {
    std::string assigned;
    std::map<std::string, double> distances;
};

// Nearest-centroid assignment with the id reject option. Ties prefer id,
// then the lexicographically smallest label.
inline RoutingDecision route(const Embedding& h, const ClusterSet& clusters) {
    clusters.validate();
    RoutingDecision out;
    bool have_best = false;
    double best_score = 0.0;
    for (const ClusterSet::Entry& e : clusters.entries) {
        if (e.centroid.size() != h.values.size()) throw std::invalid_argument("route: dimension mismatch");
        double score = distance(h.values, e.centroid);
        if (e.label == kIdLabel) score *= clusters.id_bias;
        out.distances[e.label] = score;
        bool better = !have_best || score < best_score;
        if (!better && score == best_score) {
            bool cur_id = (e.label == kIdLabel);
            bool best_id = (out.assigned == kIdLabel);
            better = (cur_id && !best_id) || (cur_id == best_id && e.label < out.assigned);
        }
        if (better) {
            have_best = true;
            best_score = score;
            out.assigned = e.label;
        }
    }
    return out;
}

// Per-true-label routing fractions.
struct RoutingStatsRow {
    double reject_to_id = 0.0;
    std::map<std::string, double> assign_frac;  // non-id clusters
    double total_activation = 0.0;              // 1 - reject_to_id
    std::size_t count = 0;
};

using LabeledEmbedding = std::pair<std::string, Embedding>;

inline std::map<std::string, RoutingStatsRow> routing_stats(std::span<const LabeledEmbedding> data,
                                                            const ClusterSet& clusters) {
    if (data.empty()) throw std::invalid_argument("routing_stats: empty input");
    std::map<std::string, RoutingStatsRow> table;
    for (const LabeledEmbedding& item : data) {
        RoutingStatsRow& row = table[item.first];
        RoutingDecision dec = route(item.second, clusters);
        ++row.count;
        if (dec.assigned == kIdLabel)
            row.reject_to_id += 1.0;
        else
            row.assign_frac[dec.assigned] += 1.0;
    }
    for (auto& [label, row] : table) {
        double n = static_cast<double>(row.count);
        row.reject_to_id /= n;
        for (const ClusterSet::Entry& e : clusters.entries)
            if (e.label != kIdLabel) row.assign_frac[e.label] /= n;  // creates missing keys as 0
        row.total_activation = 1.0 - row.reject_to_id;
    }
    return table;
}

// Mean distance from each label's embeddings to every centroid, plus the
// nearest-centroid verdict per label.
struct CentroidDistanceRow {
    std::map<std::string, double> mean_distance;
    std::string nearest;
};

inline std::map<std::string, CentroidDistanceRow> centroid_distance_table(
    const ClusterSet& clusters, const std::map<std::string, std::vector<Embedding>>& per_label) {
    clusters.validate();
    std::map<std::string, CentroidDistanceRow> table;
    for (const auto& [label, embeddings] : per_label) {
        if (embeddings.empty()) throw std::invalid_argument("centroid_distance_table: empty set for '" + label + "'");
        CentroidDistanceRow row;
        for (const ClusterSet::Entry& e : clusters.entries) {
            double sum = 0.0;
            for (const Embedding& h : embeddings) sum += distance(h.values, e.centroid);
            row.mean_distance[e.label] = sum / static_cast<double>(embeddings.size());
        }
        row.nearest = row.mean_distance.begin()->first;
        for (const auto& [cl, d] : row.mean_distance)
            if (d < row.mean_distance.at(row.nearest)) row.nearest = cl;
        table[label] = row;
    }
    return table;
}

}  // namespace shiftlab
