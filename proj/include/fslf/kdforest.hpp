#ifndef FSLF_KDFOREST_HPP
#define FSLF_KDFOREST_HPP

#include <algorithm>
#include <cstdint>
#include <limits>
#include <queue>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "fslf/feature.hpp"

namespace fslf {

struct AnnError : std::runtime_error {
  explicit AnnError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Neighbor {
  uint32_t index;  // index into the point set / bank
  double dist_sq;
};

// Forest of randomized k-d trees over one feature segment. Each split picks
// a dimension uniformly from the five highest-variance dimensions of the
// node's points and splits at the mean.
class KdForest {
 public:
  static constexpr int kLeafSize = 16;
  static constexpr int kTopVarianceDims = 5;

  KdForest(std::vector<float> points, int dim, int n_trees, uint32_t seed,
           int max_checks = 256)
      : data_(std::move(points)), dim_(dim), max_checks_(max_checks) {
    if (dim_ <= 0) throw AnnError("KdForest: non-positive dimension");
    if (data_.empty() || data_.size() % dim_ != 0)
      throw AnnError("KdForest: empty or misshapen point set");
    n_points_ = data_.size() / dim_;
    std::mt19937 rng(seed);
    trees_.resize(std::max(1, n_trees));
    for (auto& tree : trees_) {
      tree.order.resize(n_points_);
      for (size_t i = 0; i < n_points_; ++i) tree.order[i] = uint32_t(i);
      build(tree, 0, n_points_, rng);
    }
  }

  size_t size() const { return n_points_; }
  int dim() const { return dim_; }
  int max_checks() const { return max_checks_; }
  size_t n_trees() const { return trees_.size(); }

  const float* point(size_t i) const { return data_.data() + i * dim_; }

  // Best-first search across all trees with a shared branch queue, bounded
  // by max_checks leaf visits. A budget >= the point count makes the search
  // exhaustive (every point inspected exactly once).
  std::vector<Neighbor> knn(const float* query, int k) const {
    if (k < 1) throw AnnError("knn: k must be >= 1");
    const bool exhaustive = size_t(max_checks_) >= n_points_;
    std::vector<uint8_t> seen(n_points_, 0);

    // Max-heap of the k best so far.
    auto worse = [](const Neighbor& a, const Neighbor& b) {
      return a.dist_sq < b.dist_sq;
    };
    std::priority_queue<Neighbor, std::vector<Neighbor>, decltype(worse)>
        best(worse);

    struct Branch {
      double bound;
      uint32_t tree;
      int32_t node;
    };
    auto farther = [](const Branch& a, const Branch& b) {
      return a.bound > b.bound;
    };
    std::priority_queue<Branch, std::vector<Branch>, decltype(farther)>
        branches(farther);
    for (uint32_t t = 0; t < trees_.size(); ++t)
      branches.push({0.0, t, 0});

    int checks = 0;
    while (!branches.empty()) {
      Branch br = branches.top();
      branches.pop();
      if (!exhaustive && checks >= max_checks_) break;
      if (!exhaustive && int(best.size()) == k && br.bound > best.top().dist_sq)
        continue;
      const Tree& tree = trees_[br.tree];
      int32_t node = br.node;
      double bound = br.bound;
      // Descend to the closest leaf, queueing the far side of each split.
      while (!tree.nodes[node].is_leaf()) {
        const Node& n = tree.nodes[node];
        double diff = double(query[n.split_dim]) - n.split_val;
        int32_t near = diff < 0 ? n.left : n.right;
        int32_t far = diff < 0 ? n.right : n.left;
        branches.push({bound + diff * diff, br.tree, far});
        node = near;
      }
      const Node& leaf = tree.nodes[node];
      ++checks;
      for (int32_t i = leaf.begin; i < leaf.end; ++i) {
        uint32_t idx = tree.order[i];
        if (seen[idx]) continue;
        seen[idx] = 1;
        if (int(best.size()) < k) {
          best.push({idx, dist_sq(query, point(idx))});
        } else {
          double d = dist_sq_bounded(query, point(idx), best.top().dist_sq);
          if (d < best.top().dist_sq) {
            best.pop();
            best.push({idx, d});
          }
        }
      }
    }

    std::vector<Neighbor> out;
    out.reserve(best.size());
    while (!best.empty()) {
      out.push_back(best.top());
      best.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

 private:
  struct Node {
    int split_dim = -1;
    double split_val = 0.0;
    int32_t left = -1, right = -1;
    int32_t begin = 0, end = 0;  // valid for leaves
    bool is_leaf() const { return split_dim < 0; }
  };
  struct Tree {
    std::vector<Node> nodes;
    std::vector<uint32_t> order;
  };

  double dist_sq(const float* a, const float* b) const {
    double acc = 0.0;
    for (int i = 0; i < dim_; ++i) {
      double d = double(a[i]) - double(b[i]);
      acc += d * d;
    }
    return acc;
  }

  // Early exit once the partial sum already exceeds the cutoff; a point
  // rejected this way cannot enter the k-best set, so results are exact.
  double dist_sq_bounded(const float* a, const float* b, double cutoff) const {
    double acc = 0.0;
    int i = 0;
    for (; i + 16 <= dim_; i += 16) {
      for (int u = 0; u < 16; ++u) {
        double d = double(a[i + u]) - double(b[i + u]);
        acc += d * d;
      }
      if (acc > cutoff) return acc;
    }
    for (; i < dim_; ++i) {
      double d = double(a[i]) - double(b[i]);
      acc += d * d;
    }
    return acc;
  }

  int32_t build(Tree& tree, size_t begin, size_t end, std::mt19937& rng) {
    int32_t id = int32_t(tree.nodes.size());
    tree.nodes.emplace_back();
    if (end - begin <= kLeafSize) {
      tree.nodes[id].begin = int32_t(begin);
      tree.nodes[id].end = int32_t(end);
      return id;
    }

    // Mean and variance per dimension over this node's points.
    std::vector<double> mean(dim_, 0.0), var(dim_, 0.0);
    for (size_t i = begin; i < end; ++i) {
      const float* p = point(tree.order[i]);
      for (int d = 0; d < dim_; ++d) mean[d] += p[d];
    }
    double inv_n = 1.0 / double(end - begin);
    for (int d = 0; d < dim_; ++d) mean[d] *= inv_n;
    for (size_t i = begin; i < end; ++i) {
      const float* p = point(tree.order[i]);
      for (int d = 0; d < dim_; ++d) {
        double diff = p[d] - mean[d];
        var[d] += diff * diff;
      }
    }

    // Candidate split dims: top-5 by variance, excluding constant dims.
    std::vector<int> dims(dim_);
    for (int d = 0; d < dim_; ++d) dims[d] = d;
    int top = std::min(kTopVarianceDims, dim_);
    std::partial_sort(dims.begin(), dims.begin() + top, dims.end(),
                      [&](int a, int b) { return var[a] > var[b]; });
    std::vector<int> viable;
    for (int i = 0; i < top; ++i)
      if (var[dims[i]] > 0.0) viable.push_back(dims[i]);
    if (viable.empty()) {
      // All candidate dims constant: treat as duplicates, keep one leaf.
      tree.nodes[id].begin = int32_t(begin);
      tree.nodes[id].end = int32_t(end);
      return id;
    }
    int split_dim =
        viable[std::uniform_int_distribution<size_t>(0, viable.size() - 1)(rng)];
    double split_val = mean[split_dim];

    auto* order = tree.order.data();
    auto mid_it = std::partition(
        order + begin, order + end,
        [&](uint32_t idx) { return point(idx)[split_dim] < split_val; });
    size_t mid = size_t(mid_it - order);
    if (mid == begin || mid == end) {
      // Mean landed outside the value spread; fall back to a median split.
      std::nth_element(order + begin, order + begin + (end - begin) / 2,
                       order + end, [&](uint32_t a, uint32_t b) {
                         return point(a)[split_dim] < point(b)[split_dim];
                       });
      mid = begin + (end - begin) / 2;
      if (mid == begin) ++mid;
      split_val = point(order[mid])[split_dim];
    }

    tree.nodes[id].split_dim = split_dim;
    tree.nodes[id].split_val = split_val;
    int32_t left = build(tree, begin, mid, rng);
    int32_t right = build(tree, mid, end, rng);
    tree.nodes[id].left = left;
    tree.nodes[id].right = right;
    return id;
  }

  std::vector<float> data_;
  int dim_;
  size_t n_points_ = 0;
  int max_checks_;
  std::vector<Tree> trees_;
};

// Forest over one segment of a feature bank.
inline KdForest build_forest(const FeatureBank& bank, int segment, int n_trees,
                             uint32_t seed, int max_checks = 256) {
  if (bank.features.empty()) throw AnnError("build_forest: empty bank");
  if (segment < 0 || segment > 2) throw AnnError("build_forest: bad segment");
  int off = kSegmentOffsets[segment];
  int len = kSegmentLengths[segment];
  std::vector<float> pts;
  pts.reserve(bank.features.size() * size_t(len));
  for (const auto& f : bank.features)
    pts.insert(pts.end(), f.values.begin() + off, f.values.begin() + off + len);
  return KdForest(std::move(pts), len, n_trees, seed, max_checks);
}

struct CandidateSet {
  std::vector<uint32_t> bank_indices;  // deduplicated union over segments
};

// Per-segment ANN queries followed by the spatial constraint: an atlas
// origin must lie within the window centred at the target voxel (images are
// pre-aligned, so origins compare directly to target coordinates).
inline CandidateSet select_candidates(const FeatureBank& bank,
                                      const std::vector<KdForest>& forests,
                                      const AugmentedFeature& target_feature,
                                      int tx, int ty, int tz, int dims_nx,
                                      int dims_ny, int k_per_feature = 32,
                                      int window = 9) {
  if (forests.size() != 3)
    throw AnnError("select_candidates: expected one forest per segment");
  if (window < 1 || window % 2 == 0)
    throw AnnError("select_candidates: window must be odd");
  int half = (window - 1) / 2;
  std::vector<uint8_t> taken(bank.features.size(), 0);
  CandidateSet out;
  for (int seg = 0; seg < 3; ++seg) {
    const float* q = target_feature.values.data() + kSegmentOffsets[seg];
    auto nn = forests[seg].knn(q, k_per_feature);
    for (const auto& n : nn) {
      if (taken[n.index]) continue;
      const auto& f = bank.features[n.index];
      int ox = int(f.voxel % uint32_t(dims_nx));
      int oy = int((f.voxel / uint32_t(dims_nx)) % uint32_t(dims_ny));
      int oz = int(f.voxel / (uint32_t(dims_nx) * uint32_t(dims_ny)));
      if (std::abs(ox - tx) > half || std::abs(oy - ty) > half ||
          std::abs(oz - tz) > half)
        continue;
      taken[n.index] = 1;
      out.bank_indices.push_back(n.index);
    }
  }
  return out;
}

}  // namespace fslf

#endif  // FSLF_KDFOREST_HPP
