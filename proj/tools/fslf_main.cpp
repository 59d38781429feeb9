// Command line front end: phantom synthesis, signature training,
// segmentation, evaluation, and slice exports.

#include <CLI11.hpp>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "fslf/pipeline.hpp"

namespace fs = std::filesystem;
using namespace fslf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Manifest {
  std::vector<AtlasImage> atlases;
  VolumeF target_intensity;
  LabelVolume target_labels;
  bool has_target = false;
};

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("manifest not found: " + path);
  Manifest m;
  std::string line;
  fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path fp(p);
    return fp.is_absolute() ? fp.string() : (base / fp).string();
  };
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kind, ipath, lpath;
    if (!(ls >> kind >> ipath >> lpath)) continue;
    if (kind == "atlas") {
      m.atlases.push_back(
          {load_svol_f32(resolve(ipath)), load_svol_u8(resolve(lpath))});
    } else if (kind == "target") {
      m.target_intensity = load_svol_f32(resolve(ipath));
      m.target_labels = load_svol_u8(resolve(lpath));
      m.has_target = true;
    } else {
      throw ConfigError("manifest: unknown entry kind '" + kind + "'");
    }
  }
  if (m.atlases.empty()) throw ConfigError("manifest lists no atlases");
  return m;
}

// Flat key=value config support: the file's entries become option tokens
// inserted before the user's flags, so explicit flags win under a take-last
// policy.
std::vector<std::string> expand_config_args(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::string config_path;
  std::vector<std::string> out;
  out.push_back(args[0]);
  size_t i = 1;
  if (args.size() > 1 && !args[1].empty() && args[1][0] != '-') {
    out.push_back(args[1]);  // subcommand verb
    i = 2;
  }
  std::vector<std::string> rest;
  for (; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("config file not found: " + config_path);
    std::string line;
    while (std::getline(in, line)) {
      size_t start = line.find_first_not_of(" \t");
      if (start == std::string::npos || line[start] == '#') continue;
      size_t eq = line.find('=', start);
      if (eq == std::string::npos)
        throw ConfigError("config: expected key=value, got '" + line + "'");
      std::string key = line.substr(start, eq - start);
      std::string value = line.substr(eq + 1);
      auto trim = [](std::string& s) {
        size_t a = s.find_first_not_of(" \t");
        size_t b = s.find_last_not_of(" \t\r");
        s = a == std::string::npos ? "" : s.substr(a, b - a + 1);
      };
      trim(key);
      trim(value);
      if (key.empty()) throw ConfigError("config: empty key in '" + line + "'");
      out.push_back("--" + key + "=" + value);
    }
  }
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

int count_structures(const Manifest& m) {
  int k = 0;
  for (const auto& a : m.atlases)
    for (auto l : a.labels.data()) k = std::max(k, int(l));
  return k;
}

void write_csv_header(std::ofstream& out, const std::string& header) {
  out << header << "\n";
}

// --------------------------------------------------------------------------

int cmd_synth(const std::string& out_dir, int n_atlases, int dim,
              int n_structures, double noise, double deform, uint32_t seed) {
  if (n_atlases < 1) throw ConfigError("synth: --n-atlases must be >= 1");
  if (dim < 8) throw ConfigError("synth: --dim must be >= 8");
  if (n_structures < 1) throw ConfigError("synth: --structures must be >= 1");
  fs::create_directories(out_dir);
  PhantomOptions opt;
  opt.dim = dim;
  opt.n_structures = n_structures;
  opt.noise_sigma = noise;
  opt.deform = deform;

  std::ofstream manifest(fs::path(out_dir) / "manifest.txt");
  for (int a = 0; a < n_atlases; ++a) {
    auto [intensity, labels] = generate_phantom(seed + uint32_t(a) + 1, opt);
    std::string iname = "atlas_" + std::to_string(a) + "_intensity.svol";
    std::string lname = "atlas_" + std::to_string(a) + "_labels.svol";
    save_svol((fs::path(out_dir) / iname).string(), intensity);
    save_svol((fs::path(out_dir) / lname).string(), labels);
    manifest << "atlas " << iname << " " << lname << "\n";
  }
  auto [ti, tl] = generate_phantom(seed, opt);
  save_svol((fs::path(out_dir) / "target_intensity.svol").string(), ti);
  save_svol((fs::path(out_dir) / "target_labels.svol").string(), tl);
  manifest << "target target_intensity.svol target_labels.svol\n";
  std::cout << "wrote " << n_atlases << " atlases and 1 target to " << out_dir
            << "\n";
  return kExitOk;
}

int cmd_train_signature(const std::string& manifest_path,
                        const std::string& out_dir, int epochs, double lr,
                        int batch, int max_patches, double roi_radius,
                        uint32_t seed) {
  Manifest m = load_manifest(manifest_path);
  int n_structures = count_structures(m);
  if (n_structures < 1) throw ConfigError("train-signature: atlases have no labels");
  fs::create_directories(out_dir);

  for (int s = 1; s <= n_structures; ++s) {
    std::vector<std::vector<double>> patches;
    std::vector<int> labels;
    sample_training_patches(m.atlases, s, roi_radius, size_t(max_patches),
                            seed + uint32_t(s), patches, labels);
    SignatureNet net = make_default_net(seed + uint32_t(s));
    TrainOptions opt;
    opt.epochs = epochs;
    opt.lr = lr;
    opt.batch_size = batch;
    opt.seed = seed + uint32_t(s);
    std::vector<double> trace = train(net, patches, labels, opt);

    int correct = 0;
    for (size_t i = 0; i < patches.size(); ++i) {
      auto r = forward(net, patches[i]);
      correct += (r.probs[1] > r.probs[0]) == (labels[i] == 1);
    }
    double acc = patches.empty() ? 0.0 : double(correct) / double(patches.size());

    std::string tag = std::to_string(s);
    save_net((fs::path(out_dir) / ("net_s" + tag + ".snet")).string(), net);
    std::ofstream csv(fs::path(out_dir) / ("train_loss_s" + tag + ".csv"));
    write_csv_header(csv, "epoch,loss");
    for (size_t e = 0; e < trace.size(); ++e)
      csv << e + 1 << "," << trace[e] << "\n";
    std::cout << "structure " << s << ": " << patches.size()
              << " patches, final loss " << (trace.empty() ? 0.0 : trace.back())
              << ", train accuracy " << acc << "\n";
  }
  return kExitOk;
}

// Quantize a simplex triple to RGB with the sum pinned to 255 +/- 1.
void alpha_to_rgb(const double a[3], int rgb[3]) {
  for (int j = 0; j < 3; ++j)
    rgb[j] = int(std::lround(std::clamp(a[j], 0.0, 1.0) * 255.0));
}

void write_coefficient_slice(const std::string& path,
                             const std::vector<CoefficientRecord>& coeffs,
                             const VolumeF& like, int z) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  std::vector<int> rgb(size_t(like.nx()) * like.ny() * 3, 0);
  for (const auto& c : coeffs) {
    int x, y, zz;
    like.coords(c.voxel, x, y, zz);
    if (zz != z) continue;
    int px[3];
    alpha_to_rgb(c.alpha, px);
    size_t base = (size_t(y) * like.nx() + x) * 3;
    for (int j = 0; j < 3; ++j) rgb[base + j] = px[j];
  }
  out << "P3\n" << like.nx() << " " << like.ny() << "\n255\n";
  for (size_t i = 0; i < rgb.size(); i += 3)
    out << rgb[i] << " " << rgb[i + 1] << " " << rgb[i + 2] << "\n";
}

int cmd_segment(const std::string& manifest_path, const std::string& nets_dir,
                const std::string& out_dir, PipelineConfig cfg,
                bool with_truth, int slice_z) {
  Manifest m = load_manifest(manifest_path);
  if (!m.has_target) throw ConfigError("segment: manifest lists no target");
  int n_structures = count_structures(m);
  fs::create_directories(out_dir);

  std::vector<SignatureNet> nets;
  for (int s = 1; s <= n_structures; ++s)
    nets.push_back(load_net(
        (fs::path(nets_dir) / ("net_s" + std::to_string(s) + ".snet"))
            .string()));

  SegmentationResult r = run_segmentation(
      m.target_intensity, m.atlases, nets, n_structures, cfg,
      with_truth ? &m.target_labels : nullptr);

  save_svol((fs::path(out_dir) / "fused_labels.svol").string(), r.fused);
  save_svol((fs::path(out_dir) / "initial_labels.svol").string(), r.initial);
  for (int s = 1; s <= n_structures; ++s) {
    const StructureResult& sr = r.per_structure[size_t(s) - 1];
    std::string tag = std::to_string(s);
    for (size_t it = 0; it < sr.iteration_maps.size(); ++it)
      save_svol((fs::path(out_dir) /
                 ("structure" + tag + "_iter" + std::to_string(it + 1) +
                  ".svol"))
                    .string(),
                sr.iteration_maps[it]);
    std::ofstream coeff(fs::path(out_dir) / ("coefficients_s" + tag + ".csv"));
    write_csv_header(coeff, "voxel,alpha1,alpha2,alpha3,e_fg,e_bg");
    for (const auto& c : sr.coefficients)
      coeff << c.voxel << "," << c.alpha[0] << "," << c.alpha[1] << ","
            << c.alpha[2] << "," << c.e_fg << "," << c.e_bg << "\n";
    if (slice_z >= 0)
      write_coefficient_slice(
          (fs::path(out_dir) / ("coefficients_s" + tag + "_z" +
                                std::to_string(slice_z) + ".ppm"))
              .string(),
          sr.coefficients, m.target_intensity, slice_z);
  }
  if (with_truth) {
    std::ofstream csv(fs::path(out_dir) / "dice_trace.csv");
    write_csv_header(csv, "structure,iteration,dice");
    for (int s = 1; s <= n_structures; ++s) {
      const auto& trace = r.per_structure[size_t(s) - 1].dice_trace;
      for (size_t it = 0; it < trace.size(); ++it)
        csv << s << "," << it + 1 << "," << trace[it] << "\n";
    }
  }
  if (r.any_degenerate)
    std::cerr << "warning: degenerate seeding; initial map kept for at least "
                 "one structure\n";
  std::cout << "segmentation written to " << out_dir << "\n";
  return kExitOk;
}

int cmd_evaluate(const std::string& pred_path, const std::string& truth_path,
                 const std::string& manifest_path, const std::string& out_csv) {
  LabelVolume pred = load_svol_u8(pred_path);
  LabelVolume truth = load_svol_u8(truth_path);
  int n_structures = 0;
  for (auto l : truth.data()) n_structures = std::max(n_structures, int(l));
  if (n_structures < 1) throw IoError("evaluate: truth map has no structures");

  std::optional<LabelVolume> baseline;
  if (!manifest_path.empty()) {
    Manifest m = load_manifest(manifest_path);
    std::vector<LabelVolume> maps;
    for (const auto& a : m.atlases) maps.push_back(a.labels);
    baseline = majority_vote(maps);
  }

  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!out_csv.empty()) {
    file.open(out_csv);
    if (!file) throw IoError("cannot write " + out_csv);
    out = &file;
  }
  *out << "method,structure,dice,hausdorff\n";
  auto emit = [&](const std::string& method, const LabelVolume& map) {
    for (int s = 1; s <= n_structures; ++s) {
      LabelVolume pb = binarize(map, s);
      LabelVolume tb = binarize(truth, s);
      *out << method << "," << s << "," << dice(pb, tb) << ","
           << hausdorff(pb, tb) << "\n";
    }
  };
  emit("fslf", pred);
  if (baseline) emit("majority_vote", *baseline);
  return kExitOk;
}

int cmd_export_slice(const std::string& input, int z, const std::string& out,
                     bool as_labels) {
  if (z < 0) throw ConfigError("export-slice: --z must be >= 0");
  std::ofstream o(out);
  if (!o) throw IoError("cannot write " + out);
  if (as_labels) {
    LabelVolume v = load_svol_u8(input);
    if (z >= v.nz()) throw ConfigError("export-slice: z out of range");
    int maxl = 1;
    for (auto l : v.data()) maxl = std::max(maxl, int(l));
    o << "P2\n" << v.nx() << " " << v.ny() << "\n255\n";
    for (int y = 0; y < v.ny(); ++y) {
      for (int x = 0; x < v.nx(); ++x)
        o << (int(v.at(x, y, z)) * 255) / maxl << (x + 1 < v.nx() ? " " : "\n");
    }
  } else {
    VolumeF v = load_svol_f32(input);
    if (z >= v.nz()) throw ConfigError("export-slice: z out of range");
    float lo = v[0], hi = v[0];
    for (float x : v.data()) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    float range = hi > lo ? hi - lo : 1.0f;
    o << "P2\n" << v.nx() << " " << v.ny() << "\n255\n";
    for (int y = 0; y < v.ny(); ++y) {
      for (int x = 0; x < v.nx(); ++x) {
        int g = int(std::lround((v.at(x, y, z) - lo) / range * 255.0f));
        o << g << (x + 1 < v.nx() ? " " : "\n");
      }
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature sensitive label fusion for volumetric segmentation"};
  app.require_subcommand(1);
  std::string config_dummy;

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a phantom atlas set");
  std::string synth_out = "data";
  int n_atlases = 5, dim = 48, structures = 2;
  double noise = 0.05, deform = 0.5;
  uint32_t seed = 0;
  synth->add_option("--config", config_dummy, "Flat key=value config file");
  synth->add_option("--out", synth_out, "Output directory");
  synth->add_option("--n-atlases", n_atlases, "Number of atlases");
  synth->add_option("--dim", dim, "Cubic volume side");
  synth->add_option("--structures", structures, "Structure count");
  synth->add_option("--noise", noise, "Gaussian noise sigma");
  synth->add_option("--deform", deform, "Deformation amplitude");
  synth->add_option("--seed", seed, "Base RNG seed");

  // train-signature
  auto* tr = app.add_subcommand("train-signature",
                                "Train the structural signature network");
  std::string tr_manifest, tr_out = "nets";
  int epochs = 30, batch = 32, max_patches = 2000;
  double lr = 0.01, tr_roi = 4.0;
  uint32_t tr_seed = 0;
  tr->add_option("--config", config_dummy, "Flat key=value config file");
  tr->add_option("--manifest", tr_manifest, "Atlas manifest")->required();
  tr->add_option("--out", tr_out, "Checkpoint directory");
  tr->add_option("--epochs", epochs, "Training epochs");
  tr->add_option("--lr", lr, "Learning rate");
  tr->add_option("--batch", batch, "Mini-batch size");
  tr->add_option("--max-patches", max_patches, "Patch budget per structure");
  tr->add_option("--roi-radius", tr_roi, "ROI band half-width");
  tr->add_option("--seed", tr_seed, "RNG seed");

  // segment
  auto* seg = app.add_subcommand("segment", "Segment the manifest target");
  std::string seg_manifest, seg_nets = "nets", seg_out = "seg";
  PipelineConfig cfg;
  bool seg_truth = false;
  int slice_z = -1;
  seg->add_option("--config", config_dummy, "Flat key=value config file");
  seg->add_option("--manifest", seg_manifest, "Atlas manifest")->required();
  seg->add_option("--nets", seg_nets, "Checkpoint directory");
  seg->add_option("--out", seg_out, "Output directory");
  seg->add_option("--k-per-feature", cfg.k_per_feature, "ANN matches per feature");
  seg->add_option("--window", cfg.window, "Spatial window side (odd)");
  seg->add_option("--d-threshold", cfg.d_threshold, "SDM candidate band half-width");
  seg->add_option("--epsilon", cfg.epsilon, "Seed shell thickness");
  seg->add_option("--delta", cfg.delta, "Lattice weight sharpness");
  seg->add_option("--iters", cfg.n_iters, "Random-walker iterations");
  seg->add_option("--roi-radius", cfg.roi_radius, "Bank ROI half-width");
  seg->add_option("--ann-trees", cfg.ann_trees, "Randomized trees per forest");
  seg->add_option("--ann-max-checks", cfg.ann_max_checks, "ANN leaf-visit budget");
  seg->add_option("--seed", cfg.seed, "RNG seed");
  seg->add_flag("--with-truth", seg_truth, "Score against the manifest truth");
  seg->add_option("--slice-z", slice_z, "Export a coefficient RGB slice at z");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score a prediction against truth");
  std::string ev_pred, ev_truth, ev_manifest, ev_out;
  ev->add_option("--config", config_dummy, "Flat key=value config file");
  ev->add_option("--pred", ev_pred, "Predicted label SVOL")->required();
  ev->add_option("--truth", ev_truth, "Ground-truth label SVOL")->required();
  ev->add_option("--manifest", ev_manifest,
                 "Atlas manifest for the majority-vote baseline");
  ev->add_option("--out", ev_out, "CSV path (default stdout)");

  // export-slice
  auto* ex = app.add_subcommand("export-slice", "Write an axial slice image");
  std::string ex_in, ex_out = "slice.pgm";
  int ex_z = 0;
  bool ex_labels = false;
  ex->add_option("--config", config_dummy, "Flat key=value config file");
  ex->add_option("--input", ex_in, "SVOL volume")->required();
  ex->add_option("--z", ex_z, "Axial slice index");
  ex->add_option("--out", ex_out, "Output PGM path");
  ex->add_flag("--labels", ex_labels, "Input is a label map");

  // Config values may repeat options given on the command line; the last
  // occurrence (the explicit flag) wins.
  for (CLI::App* sub : app.get_subcommands({}))
    for (CLI::Option* opt : sub->get_options())
      opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  std::vector<std::string> expanded;
  try {
    expanded = expand_config_args(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  std::vector<const char*> eargv;
  for (const auto& a : expanded) eargv.push_back(a.c_str());
  try {
    app.parse(int(eargv.size()), eargv.data());
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*synth)
      return cmd_synth(synth_out, n_atlases, dim, structures, noise, deform,
                       seed);
    if (*tr)
      return cmd_train_signature(tr_manifest, tr_out, epochs, lr, batch,
                                 max_patches, tr_roi, tr_seed);
    if (*seg) {
      if (cfg.k_per_feature < 1 || cfg.window < 1 || cfg.window % 2 == 0 ||
          cfg.d_threshold <= 0 || cfg.epsilon <= 0 || cfg.delta < 0 ||
          cfg.n_iters < 1 || cfg.roi_radius <= 0 || cfg.ann_trees < 1 ||
          cfg.ann_max_checks < 1)
        throw ConfigError("segment: all numeric parameters must be positive "
                          "and the window odd");
      return cmd_segment(seg_manifest, seg_nets, seg_out, cfg, seg_truth,
                         slice_z);
    }
    if (*ev) return cmd_evaluate(ev_pred, ev_truth, ev_manifest, ev_out);
    if (*ex) return cmd_export_slice(ex_in, ex_z, ex_out, ex_labels);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const FeatureError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const CnnError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const MetricError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const GridError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const AnnError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const FslpError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const RwError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}
