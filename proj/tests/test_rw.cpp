#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "fslf/rw.hpp"

using namespace fslf;

namespace {

Sdm ramp_sdm(int n, double shift) {
  Sdm sdm;
  sdm.volume = VolumeF(n, 1, 1);
  for (int x = 0; x < n; ++x) sdm.volume.at(x, 0, 0) = float(x - shift);
  return sdm;
}

// Random reduced graph on a path skeleton plus extra chords, with random
// boundary and terminal weights.
FusionGraph random_graph(int n, uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> uw(0.05, 1.0);
  std::bernoulli_distribution flip(0.3);
  FusionGraph g;
  g.candidates.resize(size_t(n));
  for (int i = 0; i < n; ++i) g.candidates[size_t(i)] = uint32_t(i);
  for (int i = 0; i + 1 < n; ++i)
    g.lattice.push_back({i, i + 1, uw(rng)});
  for (int i = 0; i + 3 < n; i += 2)
    if (flip(rng)) g.lattice.push_back({i, i + 3, uw(rng)});
  for (int i = 0; i < n; ++i) {
    if (flip(rng)) g.boundary.push_back({i, 1.0, uw(rng)});
    if (flip(rng)) g.boundary.push_back({i, 0.0, uw(rng)});
  }
  g.w_fg.resize(size_t(n));
  g.w_bg.resize(size_t(n));
  for (int i = 0; i < n; ++i) {
    double wf = flip(rng) ? uw(rng) : 0.0;
    g.w_fg[size_t(i)] = wf;
    g.w_bg[size_t(i)] = flip(rng) ? uw(rng) : (wf > 0.0 ? 0.0 : uw(rng));
  }
  return g;
}

// Dense assembly of the same stationarity system, for the oracle.
Eigen::VectorXd dense_solve(const FusionGraph& g) {
  int n = int(g.candidates.size());
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
  for (const auto& e : g.lattice) {
    double w2 = e.w * e.w;
    L(e.i, e.i) += w2;
    L(e.j, e.j) += w2;
    L(e.i, e.j) -= w2;
    L(e.j, e.i) -= w2;
  }
  for (const auto& b : g.boundary) {
    double w2 = b.w * b.w;
    L(b.i, b.i) += w2;
    rhs[b.i] += w2 * b.value;
  }
  for (int i = 0; i < n; ++i) {
    L(i, i) += g.w_fg[size_t(i)] * g.w_fg[size_t(i)] +
               g.w_bg[size_t(i)] * g.w_bg[size_t(i)];
    rhs[i] += g.w_fg[size_t(i)] * g.w_fg[size_t(i)];
  }
  return L.ldlt().solve(rhs);
}

}  // namespace

TEST_CASE("band membership on the linear ramp") {
  Sdm sdm = ramp_sdm(11, 5.0);
  NodeSelection sel = select_nodes(sdm, 2.0, 1.0);
  CHECK(sel.candidates == std::vector<uint32_t>{4, 5, 6});
  CHECK(sel.fg_seeds == std::vector<uint32_t>{2, 3});
  CHECK(sel.bg_seeds == std::vector<uint32_t>{7, 8});
}

TEST_CASE("selection bands are pairwise disjoint on random SDMs") {
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> u(-6.0f, 6.0f);
  Sdm sdm;
  sdm.volume = VolumeF(8, 8, 8);
  for (auto& v : sdm.volume.data()) v = u(rng);
  NodeSelection sel = select_nodes(sdm);
  std::vector<int> owner(sdm.volume.size(), 0);
  for (uint32_t v : sel.candidates) owner[v] += 1;
  for (uint32_t v : sel.fg_seeds) owner[v] += 1;
  for (uint32_t v : sel.bg_seeds) owner[v] += 1;
  for (int c : owner) CHECK(c <= 1);
}

TEST_CASE("thin structures raise a degenerate-seeding error") {
  Sdm sdm;
  sdm.volume = VolumeF(4, 4, 4, 5.0f);  // far outside every band
  CHECK_THROWS_AS(select_nodes(sdm), DegenerateSeedingError);
  CHECK_THROWS_AS(select_nodes(ramp_sdm(5, 2.0), 0.0, 1.0), RwError);
}

TEST_CASE("lattice weight hand values") {
  CHECK(lattice_weight(0.7, 0.7, 5.0) == 1.0);
  CHECK(lattice_weight(0.1, 0.9, 0.0) == 1.0);
  CHECK(lattice_weight(1.0, 0.0, 5.0) ==
        doctest::Approx(6.7379e-3).epsilon(1e-4));
  CHECK_THROWS_AS(lattice_weight(0.0, 0.0, -1.0), RwError);
}

TEST_CASE("terminal weights from grouped errors") {
  auto symmetric = terminal_weights(2.5, 2.5);
  CHECK(symmetric.first == 0.5);
  CHECK(symmetric.second == 0.5);
  auto perfect = terminal_weights(0.0, 4.0);
  CHECK(perfect.first == 1.0);
  CHECK(perfect.second == 0.0);
  auto skew = terminal_weights(1.0, 3.0);
  CHECK(skew.first == doctest::Approx(0.75));
  CHECK(skew.second == doctest::Approx(0.25));
  auto degenerate = terminal_weights(0.0, 0.0);
  CHECK(degenerate.first == 0.5);
  CHECK(degenerate.second == 0.5);
  CHECK_THROWS_AS(terminal_weights(-1.0, 2.0), RwError);
}

TEST_CASE("single candidate with symmetric terminals settles at one half") {
  FusionGraph g;
  g.candidates = {0};
  g.w_fg = {0.5};
  g.w_bg = {0.5};
  auto x = solve_random_walker(g);
  REQUIRE(x.size() == 1);
  CHECK(x[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("two-candidate chain between the terminals") {
  FusionGraph g;
  g.candidates = {0, 1};
  g.lattice = {{0, 1, 1.0}};
  g.boundary = {{0, 1.0, 1.0}, {1, 0.0, 1.0}};
  g.w_fg = {0.0, 0.0};
  g.w_bg = {0.0, 0.0};
  auto x = solve_random_walker(g);
  CHECK(x[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(x[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("harmonic solution is linear on a path of three") {
  FusionGraph g;
  g.candidates = {0, 1, 2};
  g.lattice = {{0, 1, 1.0}, {1, 2, 1.0}};
  g.boundary = {{0, 1.0, 1.0}, {2, 0.0, 1.0}};
  g.w_fg = {0.0, 0.0, 0.0};
  g.w_bg = {0.0, 0.0, 0.0};
  auto x = solve_random_walker(g);
  CHECK(x[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(x[1] == doctest::Approx(0.50).epsilon(1e-12));
  CHECK(x[2] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("built graph on a uniform line reproduces the path solution") {
  VolumeF intensity(11, 1, 1, 0.4f);
  LabelVolume labels(11, 1, 1);
  for (int x = 0; x <= 5; ++x) labels.at(x, 0, 0) = 1;
  NodeSelection sel = select_nodes(ramp_sdm(11, 5.0), 2.0, 1.0);
  std::vector<double> zero(sel.candidates.size(), 0.0);
  FusionGraph g = build_graph(sel, intensity, labels, zero, zero);
  CHECK(g.lattice.size() == 2);  // 4-5 and 5-6
  CHECK(g.boundary.size() == 2);  // 3->4 (fg), 7->6 (bg)
  auto x = solve_random_walker(g);
  CHECK(x[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(x[1] == doctest::Approx(0.50).epsilon(1e-12));
  CHECK(x[2] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("candidates touching only foreground seeds saturate at one") {
  VolumeF intensity(5, 1, 1, 0.2f);
  LabelVolume labels(5, 1, 1);
  NodeSelection sel;
  sel.candidates = {1, 3};
  sel.fg_seeds = {0, 2, 4};
  std::vector<double> zero(2, 0.0);
  FusionGraph g = build_graph(sel, intensity, labels, zero, zero);
  auto x = solve_random_walker(g);
  CHECK(x[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(x[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("out-of-band neighbours clamp to their current label") {
  VolumeF intensity(3, 1, 1, 0.0f);
  LabelVolume labels(3, 1, 1);
  labels.at(0, 0, 0) = 1;  // left neighbour currently foreground
  NodeSelection sel;
  sel.candidates = {1};
  sel.bg_seeds = {2};
  std::vector<double> zero(1, 0.0);
  FusionGraph g = build_graph(sel, intensity, labels, zero, zero);
  auto x = solve_random_walker(g);
  // Clamped value 1 on the left, seed value 0 on the right, equal weights.
  CHECK(x[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("sparse solve matches the dense oracle on random graphs") {
  for (uint32_t seed : {2u, 3u, 4u, 5u, 6u}) {
    FusionGraph g = random_graph(30, seed);
    auto x = solve_random_walker(g);
    Eigen::VectorXd oracle = dense_solve(g);
    for (int i = 0; i < 30; ++i)
      CHECK(x[size_t(i)] == doctest::Approx(oracle[i]).epsilon(1e-8));
  }
}

TEST_CASE("maximum principle bounds the solution by the boundary values") {
  for (uint32_t seed : {7u, 8u, 9u, 10u}) {
    FusionGraph g = random_graph(25, seed);
    auto x = solve_random_walker(g);
    for (double v : x) {
      CHECK(v >= -1e-10);
      CHECK(v <= 1.0 + 1e-10);
    }
  }
}

TEST_CASE("interior harmonicity with terminal augmentation") {
  FusionGraph g = random_graph(20, 11);
  auto x = solve_random_walker(g);
  // Each x_i must equal the weighted average of neighbour and boundary
  // values, all weights squared.
  for (int i = 0; i < 20; ++i) {
    double num = g.w_fg[size_t(i)] * g.w_fg[size_t(i)];
    double den = g.w_fg[size_t(i)] * g.w_fg[size_t(i)] +
                 g.w_bg[size_t(i)] * g.w_bg[size_t(i)];
    for (const auto& e : g.lattice) {
      if (e.i != i && e.j != i) continue;
      double other = x[size_t(e.i == i ? e.j : e.i)];
      num += e.w * e.w * other;
      den += e.w * e.w;
    }
    for (const auto& b : g.boundary) {
      if (b.i != i) continue;
      num += b.w * b.w * b.value;
      den += b.w * b.w;
    }
    CHECK(x[size_t(i)] == doctest::Approx(num / den).epsilon(1e-8));
  }
}

TEST_CASE("reduced terminals equal explicit atlas-seed nodes") {
  // Five candidates; each one linked to a few atlas seed nodes per class.
  // Merging the seeds into the two terminals sums the squared weights, so
  // the reduced terminal weight is the root of that sum.
  std::mt19937 rng(12);
  std::uniform_real_distribution<double> uw(0.1, 1.0);
  std::uniform_int_distribution<int> cnt(1, 3);
  const int n = 5;

  FusionGraph reduced;
  reduced.candidates = {0, 1, 2, 3, 4};
  for (int i = 0; i + 1 < n; ++i) reduced.lattice.push_back({i, i + 1, uw(rng)});
  reduced.boundary = {{0, 1.0, uw(rng)}, {4, 0.0, uw(rng)}};
  std::vector<std::vector<double>> fg_links(n), bg_links(n);
  for (int i = 0; i < n; ++i) {
    for (int k = cnt(rng); k-- > 0;) fg_links[size_t(i)].push_back(uw(rng));
    for (int k = cnt(rng); k-- > 0;) bg_links[size_t(i)].push_back(uw(rng));
  }
  reduced.w_fg.resize(n);
  reduced.w_bg.resize(n);
  for (int i = 0; i < n; ++i) {
    double sf = 0.0, sb = 0.0;
    for (double w : fg_links[size_t(i)]) sf += w * w;
    for (double w : bg_links[size_t(i)]) sb += w * w;
    reduced.w_fg[size_t(i)] = std::sqrt(sf);
    reduced.w_bg[size_t(i)] = std::sqrt(sb);
  }
  auto x_reduced = solve_random_walker(reduced);

  // Explicit form: every atlas seed is its own Dirichlet node at 1 or 0.
  FusionGraph explicit_g = reduced;
  explicit_g.w_fg.assign(n, 0.0);
  explicit_g.w_bg.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (double w : fg_links[size_t(i)]) explicit_g.boundary.push_back({i, 1.0, w});
    for (double w : bg_links[size_t(i)]) explicit_g.boundary.push_back({i, 0.0, w});
  }
  auto x_explicit = solve_random_walker(explicit_g);
  for (int i = 0; i < n; ++i)
    CHECK(x_reduced[size_t(i)] ==
          doctest::Approx(x_explicit[size_t(i)]).epsilon(1e-10));
}

TEST_CASE("solved potentials never exceed the initial labeling energy") {
  for (uint32_t seed : {13u, 14u, 15u}) {
    FusionGraph g = random_graph(24, seed);
    auto x = solve_random_walker(g);
    std::mt19937 rng(seed + 100);
    std::bernoulli_distribution b(0.5);
    std::vector<double> init(x.size());
    for (auto& v : init) v = b(rng) ? 1.0 : 0.0;
    CHECK(rw_energy(g, x) <= rw_energy(g, init) + 1e-12);
  }
}

TEST_CASE("isolated zero-weight node is reported by voxel") {
  FusionGraph g;
  g.candidates = {42};
  g.w_fg = {0.0};
  g.w_bg = {0.0};
  try {
    solve_random_walker(g);
    FAIL("expected RwError");
  } catch (const RwError& e) {
    CHECK(std::string(e.what()).find("42") != std::string::npos);
  }
}

TEST_CASE("label update threshold includes one half") {
  FusionGraph g;
  g.candidates = {0, 1, 2};
  g.w_fg = {1.0, 1.0, 1.0};
  g.w_bg = {1.0, 1.0, 1.0};
  LabelVolume current(3, 1, 1);
  LabelVolume out = update_labels({0.5, 0.49999, 1.0}, g, current);
  CHECK(out[0] == 1);
  CHECK(out[1] == 0);
  CHECK(out[2] == 1);

  FusionGraph empty;
  LabelVolume same = update_labels({}, empty, current);
  CHECK(same.data() == current.data());

  CHECK_THROWS_AS(update_labels({0.1}, g, current), RwError);
}

TEST_CASE("multiclass combination") {
  ProbabilityStack one;
  one.structure_probs.push_back(VolumeF(2, 1, 1, 0.7f));
  LabelVolume a = multiclass_combine(one);
  CHECK(a[0] == 1);

  ProbabilityStack zero;
  zero.structure_probs.push_back(VolumeF(2, 1, 1, 0.0f));
  LabelVolume b = multiclass_combine(zero);
  CHECK(b[0] == 0);

  ProbabilityStack tie;
  tie.structure_probs.push_back(VolumeF(1, 1, 1, 0.6f));
  tie.structure_probs.push_back(VolumeF(1, 1, 1, 0.6f));
  LabelVolume c = multiclass_combine(tie);
  CHECK(c[0] == 1);  // lowest structure id wins the tie

  ProbabilityStack mixed;
  mixed.structure_probs.push_back(VolumeF(1, 1, 1, 0.3f));
  mixed.structure_probs.push_back(VolumeF(1, 1, 1, 0.55f));
  LabelVolume d = multiclass_combine(mixed);
  CHECK(d[0] == 2);

  CHECK_THROWS_AS(multiclass_combine(ProbabilityStack{}), RwError);
  ProbabilityStack bad;
  bad.structure_probs.push_back(VolumeF(2, 1, 1, 0.1f));
  bad.structure_probs.push_back(VolumeF(3, 1, 1, 0.1f));
  CHECK_THROWS_AS(multiclass_combine(bad), RwError);
}
