#ifndef FSLF_PIPELINE_HPP
#define FSLF_PIPELINE_HPP

#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "fslf/cnn.hpp"
#include "fslf/feature.hpp"
#include "fslf/fslp.hpp"
#include "fslf/grid.hpp"
#include "fslf/kdforest.hpp"
#include "fslf/metrics.hpp"
#include "fslf/parallel.hpp"
#include "fslf/rw.hpp"
#include "fslf/volume_ops.hpp"

namespace fslf {

struct PipelineConfig {
  int k_per_feature = 32;
  int window = 9;
  double d_threshold = 2.0;
  double epsilon = 1.0;
  double delta = 5.0;
  int n_iters = 3;
  double roi_radius = 4.0;
  int ann_trees = 4;
  int ann_max_checks = 256;
  uint32_t seed = 0;
};

// Per-candidate diagnostics for the coefficient visualization / CSV dump.
struct CoefficientRecord {
  uint32_t voxel;
  double alpha[3];
  double e_fg, e_bg;
};

struct StructureResult {
  LabelVolume labels;            // final binary map for the structure
  VolumeF probability;           // RW probability; labels cast elsewhere
  std::vector<double> dice_trace;
  std::vector<LabelVolume> iteration_maps;      // map after each iteration
  std::vector<CoefficientRecord> coefficients;  // from the last iteration
  bool degenerate_seeding = false;
};

// One structure through the full loop: SDM banding, per-candidate FSLP via
// ANN matching, reduced-graph random walker, label update, repeat.
inline StructureResult iterate_segmentation(
    const VolumeF& target_intensity, const std::vector<AtlasImage>& atlases,
    int structure, const SignatureNet& net, const LabelVolume& initial_labels,
    const PipelineConfig& cfg,
    const LabelVolume* truth_binary = nullptr) {
  StructureResult res;
  res.labels = initial_labels;
  res.probability = VolumeF(target_intensity.nx(), target_intensity.ny(),
                            target_intensity.nz());
  for (size_t i = 0; i < res.labels.size(); ++i)
    res.probability[i] = res.labels[i] ? 1.0f : 0.0f;

  FeatureBank bank = build_bank(atlases, structure, net, cfg.roi_radius);
  std::vector<KdForest> forests;
  for (int seg = 0; seg < 3; ++seg)
    forests.push_back(build_forest(bank, seg, cfg.ann_trees,
                                   cfg.seed + uint32_t(seg),
                                   cfg.ann_max_checks));
  VolumeF target_gradient = gradient_magnitude(target_intensity);

  for (int iter = 0; iter < cfg.n_iters; ++iter) {
    Sdm sdm = signed_distance_map(res.labels, 1);
    NodeSelection sel;
    try {
      sel = select_nodes(sdm, cfg.d_threshold, cfg.epsilon);
    } catch (const DegenerateSeedingError&) {
      if (iter == 0) res.degenerate_seeding = true;
      break;
    }

    size_t n = sel.candidates.size();
    std::vector<double> term_fg(n, 0.5), term_bg(n, 0.5);
    std::vector<CoefficientRecord> coeffs(n);
    parallel_for(n, [&](size_t ci) {
      uint32_t voxel = sel.candidates[ci];
      int x, y, z;
      target_intensity.coords(voxel, x, y, z);
      AugmentedFeature tf =
          build_feature(target_intensity, target_gradient, net, x, y, z);
      CandidateSet cands = select_candidates(
          bank, forests, tf, x, y, z, target_intensity.nx(),
          target_intensity.ny(), cfg.k_per_feature, cfg.window);
      CoefficientRecord rec{voxel, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 0.0, 0.0};
      if (!cands.bank_indices.empty()) {
        FslpProblem prob;
        prob.segment_lengths = {kIntensityDim, kGradientDim, kSignatureDim};
        prob.y = Eigen::Map<const Eigen::VectorXf>(tf.values.data(),
                                                   kFeatureDim)
                     .cast<double>();
        prob.A.resize(kFeatureDim, long(cands.bank_indices.size()));
        prob.labels.resize(cands.bank_indices.size());
        for (size_t c = 0; c < cands.bank_indices.size(); ++c) {
          const auto& f = bank.features[cands.bank_indices[c]];
          prob.A.col(long(c)) =
              Eigen::Map<const Eigen::VectorXf>(f.values.data(), kFeatureDim)
                  .cast<double>();
          prob.labels[c] = f.label;
        }
        AlternateOptions opts;
        opts.adaptive_lambda = true;
        FslpSolution sol = alternate(prob, opts);
        reconstruction_errors(prob, sol);
        auto [wf, wb] = terminal_weights(sol.e_fg, sol.e_bg);
        term_fg[ci] = wf;
        term_bg[ci] = wb;
        for (int j = 0; j < 3; ++j) rec.alpha[j] = sol.alpha[j];
        rec.e_fg = sol.e_fg;
        rec.e_bg = sol.e_bg;
      }
      coeffs[ci] = rec;
    });

    FusionGraph graph = build_graph(sel, target_intensity, res.labels, term_fg,
                                    term_bg, cfg.delta);
    std::vector<double> x = solve_random_walker(graph);
    res.labels = update_labels(x, graph, res.labels);
    for (size_t i = 0; i < res.labels.size(); ++i)
      res.probability[i] = res.labels[i] ? 1.0f : 0.0f;
    for (size_t i = 0; i < x.size(); ++i)
      res.probability[graph.candidates[i]] = float(x[i]);
    res.coefficients = std::move(coeffs);
    res.iteration_maps.push_back(res.labels);
    if (truth_binary) res.dice_trace.push_back(dice(res.labels, *truth_binary));
  }
  return res;
}

inline LabelVolume binarize(const LabelVolume& labels, int structure) {
  LabelVolume out(labels.nx(), labels.ny(), labels.nz());
  for (size_t i = 0; i < labels.size(); ++i)
    out[i] = labels[i] == structure ? 1 : 0;
  return out;
}

struct SegmentationResult {
  LabelVolume fused;                          // multi-class final map
  LabelVolume initial;                        // majority-vote initialization
  std::vector<StructureResult> per_structure; // indexed by structure-1
  bool any_degenerate = false;
};

// Full pipeline: histogram match the target to the first atlas, majority
// vote for the initial map, per-structure iterative RW, softmax combine.
inline SegmentationResult run_segmentation(
    const VolumeF& target_intensity_raw, const std::vector<AtlasImage>& atlases,
    const std::vector<SignatureNet>& nets, int n_structures,
    const PipelineConfig& cfg, const LabelVolume* truth = nullptr) {
  if (atlases.empty()) throw GridError("run_segmentation: no atlases");
  if (int(nets.size()) != n_structures)
    throw GridError("run_segmentation: one net per structure required");

  VolumeF target =
      histogram_match(target_intensity_raw, atlases[0].intensity, 256);

  std::vector<LabelVolume> atlas_maps;
  for (const auto& a : atlases) atlas_maps.push_back(a.labels);
  SegmentationResult out;
  out.initial = majority_vote(atlas_maps);

  ProbabilityStack stack;
  for (int s = 1; s <= n_structures; ++s) {
    LabelVolume init_bin = binarize(out.initial, s);
    std::optional<LabelVolume> truth_bin;
    if (truth) truth_bin = binarize(*truth, s);
    StructureResult r = iterate_segmentation(
        target, atlases, s, nets[size_t(s) - 1], init_bin, cfg,
        truth ? &*truth_bin : nullptr);
    out.any_degenerate = out.any_degenerate || r.degenerate_seeding;
    stack.structure_probs.push_back(r.probability);
    out.per_structure.push_back(std::move(r));
  }
  out.fused = multiclass_combine(stack);
  return out;
}

// Training patches for one structure: 20x20 axial patches sampled from the
// atlas ROI bands, labeled by structure membership.
inline void sample_training_patches(const std::vector<AtlasImage>& atlases,
                                    int structure, double roi_radius,
                                    size_t max_patches, uint32_t seed,
                                    std::vector<std::vector<double>>& patches,
                                    std::vector<int>& labels) {
  std::vector<std::pair<size_t, size_t>> roi;  // (atlas, voxel)
  for (size_t a = 0; a < atlases.size(); ++a) {
    Sdm sdm = signed_distance_map(atlases[a].labels, structure);
    for (size_t i = 0; i < sdm.volume.size(); ++i)
      if (std::abs(sdm.volume[i]) <= roi_radius) roi.emplace_back(a, i);
  }
  std::mt19937 rng(seed);
  std::shuffle(roi.begin(), roi.end(), rng);
  if (roi.size() > max_patches) roi.resize(max_patches);
  for (const auto& [a, idx] : roi) {
    const auto& img = atlases[a];
    int x, y, z;
    img.intensity.coords(idx, x, y, z);
    auto p = extract_patch2(img.intensity, x, y, z, 20);
    patches.emplace_back(p.begin(), p.end());
    labels.push_back(img.labels[idx] == structure ? 1 : 0);
  }
}

}  // namespace fslf

#endif  // FSLF_PIPELINE_HPP
