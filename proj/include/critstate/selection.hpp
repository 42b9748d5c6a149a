#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "critstate/binary_io.hpp"
#include "critstate/criticality.hpp"
#include "critstate/env.hpp"
#include "critstate/policy.hpp"
#include "critstate/rng.hpp"
#include "critstate/rollout.hpp"

namespace critstate {

/// T visited states with their criticality scores. Observations are stored
/// row-major; scenes (renderer input) are optional but, when present, cover
/// every row.
struct StateBuffer {
    std::string env_name;
    std::string policy_hash;
    CriticalityMethod method = CriticalityMethod::value_based;
    std::uint64_t seed = 0;
    std::size_t obs_dim = 0;
    std::vector<double> observations;
    std::vector<double> scores;
    std::vector<std::string> scenes;  // JSON text per row, or empty

    std::size_t size() const noexcept { return scores.size(); }
    bool empty() const noexcept { return scores.empty(); }

    std::span<const double> observation(std::size_t i) const {
        if (i >= size()) throw std::out_of_range("StateBuffer: row out of range");
        return {observations.data() + i * obs_dim, obs_dim};
    }

    nlohmann::json scene(std::size_t i) const {
        if (scenes.empty()) throw std::logic_error("StateBuffer: scenes were not kept");
        return nlohmann::json::parse(scenes.at(i));
    }

    void push(std::span<const double> obs, double score, const std::string* scene = nullptr) {
        if (empty() && observations.empty()) obs_dim = obs.size();
        if (obs.size() != obs_dim) throw std::invalid_argument("StateBuffer: observation width changed");
        if (!std::isfinite(score)) throw std::invalid_argument("StateBuffer: non-finite score");
        if (size() > 0 && (scene != nullptr) != !scenes.empty())
            throw std::invalid_argument("StateBuffer: scenes must cover every row or none");
        observations.insert(observations.end(), obs.begin(), obs.end());
        scores.push_back(score);
        if (scene) scenes.push_back(*scene);
    }

    void validate() const {
        if (observations.size() != size() * obs_dim) throw std::invalid_argument("StateBuffer: row count mismatch");
        if (!scenes.empty() && scenes.size() != size()) throw std::invalid_argument("StateBuffer: scene count mismatch");
        for (double s : scores)
            if (!std::isfinite(s)) throw std::invalid_argument("StateBuffer: non-finite score");
    }

    bool operator==(const StateBuffer&) const = default;

    // Binary container: "CSB1", version, header strings and sizes, then the
    // observation matrix, the score vector and the scene texts.
    std::vector<std::uint8_t> serialize() const {
        validate();
        ByteWriter w;
        w.bytes("CSB1", 4);
        w.u32(1);
        w.str(env_name);
        w.str(policy_hash);
        w.str(to_string(method));
        w.u64(seed);
        w.u64(size());
        w.u64(obs_dim);
        w.f64s(observations);
        w.f64s(scores);
        w.u64(scenes.size());
        for (const auto& s : scenes) w.str(s);
        return std::move(w.buffer());
    }

    static StateBuffer deserialize(std::span<const std::uint8_t> bytes) {
        ByteReader r(bytes);
        char magic[4];
        r.bytes(magic, 4);
        if (std::string(magic, 4) != "CSB1") throw std::runtime_error("not a CSB1 state buffer");
        if (r.u32() != 1) throw std::runtime_error("unsupported state buffer version");
        StateBuffer b;
        b.env_name = r.str();
        b.policy_hash = r.str();
        b.method = criticality_method_from_string(r.str());
        b.seed = r.u64();
        const std::size_t t = r.u64();
        b.obs_dim = r.u64();
        b.observations = r.f64s(t * b.obs_dim);
        b.scores = r.f64s(t);
        b.scenes.resize(r.u64());
        for (auto& s : b.scenes) s = r.str();
        if (r.remaining() != 0) throw std::runtime_error("trailing bytes in state buffer");
        b.validate();
        return b;
    }

    void save(const std::string& path) const {
        const auto bytes = serialize();
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + path);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }

    static StateBuffer load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot read " + path);
        std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return deserialize(bytes);
    }
};

/// Thrown when the environment fails mid-collection; carries what was gathered.
class PartialBufferError : public std::runtime_error {
public:
    PartialBufferError(const std::string& what, StateBuffer partial)
        : std::runtime_error(what), partial_(std::move(partial)) {}
    const StateBuffer& partial() const noexcept { return partial_; }

private:
    StateBuffer partial_;
};

struct CollectOptions {
    CriticalityMethod method = CriticalityMethod::value_based;
    EntropyOptions entropy;
    bool keep_scenes = true;
};

/// T on-policy steps from a clone of `env`; row t is the state the policy
/// acted in at step t.
inline StateBuffer collect_states(const Environment& env, const PolicySnapshot& policy, std::size_t T,
                                  std::uint64_t seed, const CollectOptions& opt = {}) {
    StateBuffer buf;
    buf.env_name = env.name();
    buf.policy_hash = policy.id();
    buf.method = opt.method;
    buf.seed = seed;
    buf.obs_dim = env.spec().observation_dim;
    if (T == 0) return buf;

    auto sim = env.clone();
    RolloutCursor cursor(*sim, policy, seed);
    buf.observations.reserve(T * buf.obs_dim);
    buf.scores.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        try {
            const auto& obs = cursor.observation();
            const double score = score_state(policy, obs, opt.method, t, opt.entropy).value;
            if (opt.keep_scenes) {
                const std::string scene = cursor.env().scene().dump();
                buf.push(obs, score, &scene);
            } else {
                buf.push(obs, score);
            }
            cursor.step();
        } catch (const std::exception& e) {
            throw PartialBufferError("collect_states: failed at step " + std::to_string(t) + ": " + e.what(),
                                     std::move(buf));
        }
    }
    return buf;
}

/// The ceil(frac * T) highest-scoring rows; ties go to the lower index.
inline std::vector<std::size_t> top_fraction(std::span<const double> scores, double frac) {
    if (scores.empty()) throw std::invalid_argument("top_fraction: empty buffer");
    if (!(frac > 0.0 && frac <= 1.0)) throw std::invalid_argument("top_fraction: frac must be in (0, 1]");
    const double want = frac * static_cast<double>(scores.size());
    auto count = static_cast<std::size_t>(std::ceil(want - 1e-9 * std::max(1.0, want)));
    count = std::clamp<std::size_t>(count, 1, scores.size());
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    idx.resize(count);
    return idx;
}

inline std::vector<std::size_t> top_fraction(const StateBuffer& buf, double frac) { return top_fraction(buf.scores, frac); }

using FeatureMatrix = std::vector<std::vector<double>>;

/// Penultimate-layer activations when the policy has them, the raw
/// observation otherwise.
inline FeatureMatrix features(const PolicySnapshot& policy, const StateBuffer& buf, std::span<const std::size_t> rows) {
    FeatureMatrix out;
    out.reserve(rows.size());
    for (std::size_t r : rows) {
        const auto obs = buf.observation(r);
        auto f = policy.features(obs);
        out.push_back(f ? std::move(*f) : std::vector<double>(obs.begin(), obs.end()));
        if (out.back().size() != out.front().size()) throw std::invalid_argument("features: dimension mismatch");
    }
    return out;
}

// k-means++ -----------------------------------------------------------------------

struct Clustering {
    std::size_t k = 0;  // effective k
    std::vector<std::size_t> assignments;
    FeatureMatrix centroids;
    double inertia = 0.0;
    std::vector<double> inertia_history;  // after each Lloyd assignment step of the kept restart
    std::size_t restart = 0;              // index of the kept restart
    std::vector<std::string> warnings;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
}

inline double inertia_of(const FeatureMatrix& x, const FeatureMatrix& centroids, std::span<const std::size_t> assign) {
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) total += squared_distance(x[i], centroids[assign[i]]);
    return total;
}

struct KMeansOptions {
    std::size_t k = 10;
    std::uint64_t seed = 0;
    std::size_t max_iters = 300;
    std::size_t restarts = 10;
};

namespace detail {

inline std::size_t nearest_centroid(std::span<const double> x, const FeatureMatrix& centroids, double* dist = nullptr) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        const double d = squared_distance(x, centroids[c]);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    if (dist) *dist = best_d;
    return best;
}

// D^2 seeding; stops early when every point coincides with a chosen centroid.
inline FeatureMatrix seed_centroids(const FeatureMatrix& x, std::size_t k, Rng& rng) {
    FeatureMatrix c{x[rng.index(x.size())]};
    std::vector<double> d2(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) d2[i] = squared_distance(x[i], c[0]);
    while (c.size() < k) {
        double total = 0.0;
        for (double d : d2) total += d;
        if (!(total > 0.0)) break;
        c.push_back(x[rng.categorical(d2)]);
        for (std::size_t i = 0; i < x.size(); ++i) d2[i] = std::min(d2[i], squared_distance(x[i], c.back()));
    }
    return c;
}

inline Clustering lloyd(const FeatureMatrix& x, FeatureMatrix centroids, std::size_t max_iters) {
    Clustering cl;
    cl.k = centroids.size();
    const std::size_t dim = x.front().size();
    std::vector<std::size_t> assign(x.size(), std::numeric_limits<std::size_t>::max());
    for (std::size_t it = 0; it <= max_iters; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const std::size_t a = nearest_centroid(x[i], centroids);
            changed = changed || a != assign[i];
            assign[i] = a;
        }
        cl.inertia_history.push_back(inertia_of(x, centroids, assign));
        if (!changed || it == max_iters) break;

        FeatureMatrix next(centroids.size(), std::vector<double>(dim, 0.0));
        std::vector<std::size_t> counts(centroids.size(), 0);
        for (std::size_t i = 0; i < x.size(); ++i) {
            ++counts[assign[i]];
            for (std::size_t d = 0; d < dim; ++d) next[assign[i]][d] += x[i][d];
        }
        for (std::size_t c = 0; c < centroids.size(); ++c) {
            if (counts[c] > 0) {
                for (double& v : next[c]) v /= static_cast<double>(counts[c]);
                continue;
            }
            // an emptied cluster restarts at the point farthest from its centroid
            std::size_t far = 0;
            double far_d = -1.0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                if (counts[assign[i]] < 2) continue;
                const double d = squared_distance(x[i], centroids[assign[i]]);
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            next[c] = far_d < 0.0 ? centroids[c] : x[far];
        }
        centroids = std::move(next);
    }
    cl.assignments = std::move(assign);
    cl.centroids = std::move(centroids);
    cl.inertia = inertia_of(x, cl.centroids, cl.assignments);
    return cl;
}

}  // namespace detail

/// k-means++ seeding plus Lloyd iterations, repeated `restarts` times with
/// seeds derived from opt.seed; the lowest-inertia run is kept (earliest on
/// ties).
inline Clustering kmeanspp(const FeatureMatrix& x, const KMeansOptions& opt) {
    if (x.empty()) throw std::invalid_argument("kmeanspp: empty feature set");
    if (opt.k == 0) throw std::invalid_argument("kmeanspp: k must be positive");
    const std::size_t dim = x.front().size();
    for (const auto& row : x)
        if (row.size() != dim) throw std::invalid_argument("kmeanspp: ragged feature matrix");
    Clustering best;
    best.inertia = std::numeric_limits<double>::infinity();
    const std::size_t restarts = std::max<std::size_t>(1, opt.restarts);
    for (std::size_t r = 0; r < restarts; ++r) {
        Rng rng(derive_seed(opt.seed, r));
        Clustering cl = detail::lloyd(x, detail::seed_centroids(x, opt.k, rng), opt.max_iters);
        cl.restart = r;
        if (cl.inertia < best.inertia) best = std::move(cl);
    }
    if (best.k < opt.k)
        best.warnings.push_back("only " + std::to_string(best.k) + " distinct points for k=" + std::to_string(opt.k) +
                                "; surplus centroids dropped");
    return best;
}

inline Clustering kmeanspp(const FeatureMatrix& x, std::size_t k, std::uint64_t seed, std::size_t max_iters = 300,
                           std::size_t restarts = 10) {
    return kmeanspp(x, KMeansOptions{k, seed, max_iters, restarts});
}

// Representatives -----------------------------------------------------------------

struct Representative {
    std::size_t row = 0;      // buffer row
    std::size_t cluster = 0;
    double score = 0.0;
};

inline double linf_distance(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

/// Most critical member of every cluster, by descending score. `rows[i]` is
/// the buffer row of clustered point i. A candidate whose observation lies
/// within `duplicate_tolerance` (L-infinity) of an accepted representative is
/// replaced by the next member of its own cluster.
inline std::vector<Representative> select_representatives(const StateBuffer& buf, std::span<const std::size_t> rows,
                                                          const Clustering& cl, double duplicate_tolerance = 1e-6) {
    if (rows.size() != cl.assignments.size()) throw std::invalid_argument("select_representatives: size mismatch");
    auto before = [&](std::size_t a, std::size_t b) {
        return buf.scores[a] > buf.scores[b] || (buf.scores[a] == buf.scores[b] && a < b);
    };
    std::vector<std::vector<std::size_t>> members(cl.k);
    for (std::size_t i = 0; i < rows.size(); ++i) members.at(cl.assignments[i]).push_back(rows[i]);
    for (auto& m : members) std::sort(m.begin(), m.end(), before);

    std::vector<std::size_t> cursor(cl.k, 0);
    std::vector<bool> done(cl.k, false);
    std::vector<Representative> out;
    while (true) {
        std::size_t pick = cl.k;
        for (std::size_t c = 0; c < cl.k; ++c) {
            if (done[c] || cursor[c] >= members[c].size()) continue;
            if (pick == cl.k || before(members[c][cursor[c]], members[pick][cursor[pick]])) pick = c;
        }
        if (pick == cl.k) break;
        const std::size_t row = members[pick][cursor[pick]];
        bool duplicate = false;
        for (const auto& r : out)
            if (linf_distance(buf.observation(row), buf.observation(r.row)) < duplicate_tolerance) duplicate = true;
        if (duplicate) {
            ++cursor[pick];
            continue;
        }
        out.push_back({row, pick, buf.scores[row]});
        done[pick] = true;
    }
    return out;
}

// Pipeline ------------------------------------------------------------------------

struct SelectionConfig {
    std::size_t T = 10'000;
    double frac = 0.1;
    std::size_t k = 10;
    CriticalityMethod method = CriticalityMethod::value_based;
    CriticalityThreshold threshold{};
    std::uint64_t rollout_seed = 0;
    std::uint64_t cluster_seed = 0;
    std::size_t restarts = 10;
    std::size_t max_iters = 300;
    bool exclude_boundary_actions = false;
    double duplicate_tolerance = 1e-6;

    void validate() const {
        if (T == 0) throw std::invalid_argument("SelectionConfig: T must be positive");
        if (!(frac > 0.0 && frac <= 1.0)) throw std::invalid_argument("SelectionConfig: frac must be in (0, 1]");
        if (k == 0) throw std::invalid_argument("SelectionConfig: k must be positive");
        if (restarts == 0) throw std::invalid_argument("SelectionConfig: restarts must be positive");
        threshold.validate();
    }
};

inline void to_json(nlohmann::json& j, const SelectionConfig& c) {
    j = {{"T", c.T},
         {"frac", c.frac},
         {"k", c.k},
         {"method", to_string(c.method)},
         {"threshold", c.threshold},
         {"rollout_seed", c.rollout_seed},
         {"cluster_seed", c.cluster_seed},
         {"restarts", c.restarts},
         {"max_iters", c.max_iters},
         {"exclude_boundary_actions", c.exclude_boundary_actions},
         {"duplicate_tolerance", c.duplicate_tolerance}};
}

inline void from_json(const nlohmann::json& j, SelectionConfig& c) {
    c.T = j.value("T", c.T);
    c.frac = j.value("frac", c.frac);
    c.k = j.value("k", c.k);
    if (j.contains("method")) c.method = criticality_method_from_string(j["method"].get<std::string>());
    if (j.contains("threshold")) c.threshold = j["threshold"].get<CriticalityThreshold>();
    c.rollout_seed = j.value("rollout_seed", c.rollout_seed);
    c.cluster_seed = j.value("cluster_seed", c.cluster_seed);
    c.restarts = j.value("restarts", c.restarts);
    c.max_iters = j.value("max_iters", c.max_iters);
    c.exclude_boundary_actions = j.value("exclude_boundary_actions", c.exclude_boundary_actions);
    c.duplicate_tolerance = j.value("duplicate_tolerance", c.duplicate_tolerance);
    c.validate();
}

struct SelectionResult {
    StateBuffer buffer;
    std::vector<std::size_t> filtered;  // buffer rows, descending score
    double cutoff = 0.0;                // resolved threshold over all buffer scores
    Clustering clustering;              // over `filtered`
    std::vector<Representative> representatives;
};

/// Rollout -> top fraction -> k-means++ on policy features -> one state per cluster.
inline SelectionResult select_critical_states(const Environment& env, const PolicySnapshot& policy,
                                              const SelectionConfig& cfg) {
    cfg.validate();
    SelectionResult res;
    res.buffer = collect_states(env, policy, cfg.T, cfg.rollout_seed,
                                {cfg.method, {cfg.exclude_boundary_actions}, true});
    res.cutoff = resolve_threshold(res.buffer.scores, cfg.threshold);
    res.filtered = top_fraction(res.buffer, cfg.frac);
    const FeatureMatrix f = features(policy, res.buffer, res.filtered);
    res.clustering = kmeanspp(f, {cfg.k, cfg.cluster_seed, cfg.max_iters, cfg.restarts});
    res.representatives = select_representatives(res.buffer, res.filtered, res.clustering, cfg.duplicate_tolerance);
    return res;
}

}  // namespace critstate
