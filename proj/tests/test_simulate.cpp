#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "neuraldrop/simulate.hpp"
#include "neuraldrop/training.hpp"
#include "oracles.hpp"
#include "scripted_scene.hpp"
#include "test_support.hpp"

using namespace nd;
using nd::testing::circle_contour;
using nd::testing::dumbbell;
using nd::testing::random_blob;

namespace {

GradientProfile constant_gradient(double v) {
  GradientProfile g;
  g.mags.fill(v);
  return g;
}

void zero_weights(nn::Model& m) {
  for (nn::Mat* p : nn::parameters(m)) p->setZero();
}

// Small networks whose output ignores the input: the contour net emits `step`, the
// gradient net `g`.
Models constant_models(const std::array<double, kStepDim>& step, const GradientProfile& g) {
  Models m{nn::build_contour_net(8, 0.0, 1), nn::build_gradient_net(8, 0.0, 1), nn::build_breakage_net(8, 0.0, 1)};
  zero_weights(m.contour);
  zero_weights(m.gradient);
  zero_weights(m.breakage);
  for (int r = 0; r < kStepDim; ++r) m.contour.layers.back().b(r, 0) = step[r];
  for (int r = 0; r < kControlPoints; ++r) m.gradient.layers.back().b(r, 0) = g.mags[r];
  return m;
}

double max_ctrl_distance(const Contour& a, const Contour& b) {
  double d = 0.0;
  for (int i = 0; i < kControlPoints; ++i) d = std::max(d, distance(a.ctrl()[i], b.ctrl()[i]));
  return d;
}

std::string temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("nd_sim_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace

TEST_SUITE("simulate") {
  TEST_CASE("incline scale") {
    CHECK(incline_scale(90.0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(std::abs(incline_scale(30.0) - std::cbrt(0.5)) < 1e-12);
    CHECK(incline_scale(1e-6) < 0.01);
    CHECK_THROWS_AS(incline_scale(0.0), Error);
    try {
      incline_scale(-5.0);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::DegenerateIncline);
    }
    double prev = 0.0;
    for (double t = 0.5; t <= 90.0; t += 0.5) {
      const double s = incline_scale(t);
      CHECK(s > prev);
      prev = s;
    }
  }

  TEST_CASE("database lookup") {
    std::mt19937_64 rng(11);
    InitDatabase db("blobs");
    std::vector<Contour> shapes;
    for (int k = 0; k < 40; ++k) {
      shapes.push_back(random_blob(rng, {0.5, 0.5}, 0.05 + 0.002 * k, 0.3));
      db.add(shapes.back(), constant_gradient(k + 1.0));
    }
    REQUIRE(db.size() == 40);

    SUBCASE("an entry finds itself") {
      const auto [idx, d] = db.nearest(shapes[17]);
      CHECK(idx == 17);
      CHECK(d == 0.0);
      // Translation and scale do not matter.
      const auto [idx2, d2] = db.nearest(shapes[17].scaled(1.7, {0.2, 0.1}).translated({0.1, -0.05}));
      CHECK(idx2 == 17);
      CHECK(d2 < 1e-9);
    }
    SUBCASE("near-duplicates are skipped") {
      CHECK_FALSE(db.add(shapes[3].translated({0.01, 0.0}), constant_gradient(99)));
      CHECK(db.size() == 40);
    }
    SUBCASE("nearest equals an exhaustive scan") {
      for (int q = 0; q < 100; ++q) {
        const Contour query = random_blob(rng, {0.4, 0.6}, 0.06, 0.3);
        const auto qn = InitDatabase::normalize(query);
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t i = 0; i < shapes.size(); ++i) {
          const auto en = InitDatabase::normalize(shapes[i]);
          double s = 0.0;
          for (int r = 0; r < kShapeDim; ++r) s += (en[r] - qn[r]) * (en[r] - qn[r]);
          if (std::sqrt(s) < best_d) {
            best_d = std::sqrt(s);
            best = i;
          }
        }
        CHECK(db.nearest(query).first == best);
      }
    }
    SUBCASE("cold start") {
      const DropState d = init_drop(shapes[5], 2e-4, db, 5, 7);
      CHECK(d.id == 7);
      REQUIRE(d.history.size() == 5);
      for (const auto& e : d.history) {
        CHECK(e.contour == shapes[5]);
        CHECK(e.gradient.mags[0] == 6.0);
        CHECK(e.center == shapes[5].centroid());
      }
      CHECK_NOTHROW(d.validate(5));
    }
    SUBCASE("empty database") {
      InitDatabase empty;
      try {
        init_drop(shapes[0], 1e-4, empty, 5);
        FAIL("expected EmptyDatabase");
      } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::EmptyDatabase);
      }
    }
  }

  TEST_CASE("split pair equals brute force") {
    std::mt19937_64 rng(5);
    const SplitConfig cfg;
    int compared = 0;
    for (int k = 0; k < 100; ++k) {
      const Contour c = random_blob(rng, {0.5, 0.5}, 0.08, 0.5);
      const auto oracle = oracle::split_pair_brute_force(c, cfg);
      if (oracle.first < 0) {
        CHECK_THROWS_AS(find_split_pair(c, cfg), Error);
        continue;
      }
      CHECK(find_split_pair(c, cfg) == oracle);
      ++compared;
    }
    CHECK(compared > 80);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 10; ++k) {
      const Contour c = dumbbell({0.5, 0.5}, 0.1, 0.12 + 0.04 * u(rng), 0.02 + 0.02 * u(rng), 3.0 * u(rng));
      CHECK(find_split_pair(c, cfg) == oracle::split_pair_brute_force(c, cfg));
    }
  }

  TEST_CASE("split pair lands on the neck") {
    const double neck = 0.03;
    const Contour c = dumbbell({0.5, 0.5}, 0.1, 0.15, neck);
    const auto [i, j] = find_split_pair(c);
    for (int k : {i, j}) {
      const Vec2 p = c.eval(k);
      CHECK(std::abs(p.x - 0.5) < 0.05);
      CHECK(std::abs(std::abs(p.y - 0.5) - neck) < 0.01);
    }
  }

  TEST_CASE("split pair on a circle follows the tie rule") {
    const Contour c = circle_contour({0.5, 0.5}, 0.1);
    const auto got = find_split_pair(c);
    CHECK(got == oracle::split_pair_brute_force(c, SplitConfig{}));
    // All opposite pairs are near-ties; the winner is one of them.
    CHECK(std::abs(got.second - got.first) == doctest::Approx(26).epsilon(0.1));
  }

  TEST_CASE("split pair constraints") {
    const Contour c = circle_contour({0.5, 0.5}, 0.1);
    std::mt19937_64 rng(8);
    try {
      find_split_pair(random_blob(rng, {0.5, 0.5}, 0.1, 0.3), SplitConfig{-1.0, 6});
      FAIL("expected NoValidPair");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NoValidPair);
    }
    // A tight normal constraint leaves only nearly antipodal pairs.
    const auto [i, j] = find_split_pair(c, SplitConfig{-0.999, 6});
    const NormalSet n = inward_normals(c);
    CHECK(dot(n[i], n[j]) < -0.999);
  }

  TEST_CASE("splitting a symmetric dumbbell") {
    const Contour c = dumbbell({0.5, 0.5}, 0.1, 0.15, 0.03);
    const int K = 5;
    const DropState parent = init_drop(c, constant_gradient(3.0), 7e-4, K, 1);
    const auto [a, b] = split_drop(parent, SplitConfig{}, 2, 3);
    CHECK(a.id == 2);
    CHECK(b.id == 3);
    CHECK(a.history.size() == K);
    CHECK(b.history.size() == K);
    CHECK(a.volume + b.volume == doctest::Approx(parent.volume).epsilon(1e-12));
    const double area_a = enclosed_area(a.current().contour), area_b = enclosed_area(b.current().contour);
    CHECK(std::abs(area_a - area_b) / std::max(area_a, area_b) < 0.02);
    CHECK(area_a + area_b == doctest::Approx(enclosed_area(c)).epsilon(0.03));
    // Constant parent gradient gives constant children.
    for (double g : a.current().gradient.mags) CHECK(g == doctest::Approx(3.0));
    CHECK_NOTHROW(a.validate(K));
    CHECK_NOTHROW(b.validate(K));
    // Children sit on either side of the neck.
    CHECK((a.current().center.x - 0.5) * (b.current().center.x - 0.5) < 0);
  }

  TEST_CASE("split rewrites every history entry") {
    // History with a drop that moved: each entry is cut separately.
    const int K = 4;
    DropState d = init_drop(dumbbell({0.5, 0.5}, 0.1, 0.15, 0.03), constant_gradient(1.0), 1e-3, K);
    for (int k = 1; k < K; ++k) {
      const Contour c = dumbbell({0.5, 0.5 - 0.01 * k}, 0.1, 0.15, 0.03);
      d.push({c, constant_gradient(1.0), c.centroid()});
    }
    const auto [a, b] = split_drop(d);
    for (int k = 0; k < K; ++k) {
      CHECK(a.history[k].center.y == doctest::Approx(0.5 - 0.01 * k).epsilon(1e-3));
      CHECK(b.history[k].center.y == doctest::Approx(0.5 - 0.01 * k).epsilon(1e-3));
    }
  }

  TEST_CASE("merging") {
    const int K = 5;
    SUBCASE("identical contours") {
      const Contour c = circle_contour({0.5, 0.5}, 0.08);
      const DropState a = init_drop(c, constant_gradient(2.0), 1e-4, K, 0);
      const DropState m = merge_drops(a, a, K, 9);
      CHECK(m.id == 9);
      CHECK(m.volume == 2e-4);
      double worst = 0.0;
      for (const Vec2& p : m.current().contour.dense()) worst = std::max(worst, distance(c.eval(closest_param(c, p)), p));
      CHECK(worst < 1e-3);
      for (double g : m.current().gradient.mags) CHECK(g == doctest::Approx(2.0));
    }
    SUBCASE("disjoint contours") {
      const DropState a = init_drop(circle_contour({0.3, 0.5}, 0.05), constant_gradient(1.0), 1e-4, K);
      const DropState b = init_drop(circle_contour({0.7, 0.5}, 0.05), constant_gradient(1.0), 1e-4, K);
      try {
        merge_drops(a, b, K);
        FAIL("expected NoOverlap");
      } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NoOverlap);
      }
    }
    SUBCASE("offset circles") {
      for (double off : {0.03, 0.06, 0.09}) {
        const Contour ca = circle_contour({0.5, 0.5}, 0.06), cb = circle_contour({0.5 + off, 0.52}, 0.045);
        const DropState a = init_drop(ca, constant_gradient(1.0), 1.25e-4, K, 0);
        const DropState b = init_drop(cb, constant_gradient(4.0), 0.5e-4, K, 1);
        const DropState m = merge_drops(a, b, K, 2);
        CHECK(m.volume == 1.25e-4 + 0.5e-4);
        const double am = enclosed_area(m.current().contour);
        const double aa = enclosed_area(ca), ab = enclosed_area(cb);
        CHECK(am >= std::max(aa, ab));
        CHECK(am <= aa + ab);
        CHECK(am == doctest::Approx(oracle::union_area_sampled(ca, cb)).epsilon(0.02));
        CHECK(m.history.size() == K);
        for (const auto& e : m.history) CHECK(e.contour == m.current().contour);
        for (double g : m.current().gradient.mags) {
          CHECK(g >= 1.0 - 1e-9);
          CHECK(g <= 4.0 + 1e-9);
        }
      }
    }
  }

  TEST_CASE("prediction with fixed network outputs") {
    const Contour target = random_blob(*std::make_unique<std::mt19937_64>(3), {0.5, 0.5}, 0.06, 0.2);
    const Contour start = circle_contour({0.45, 0.6}, 0.05);
    const int K = 5;
    const DropState d = init_drop(start, constant_gradient(2.0), 1e-4, K);
    // Offsets relative to the current drop, center moves by (0, -0.01).
    const auto step = step_features(target, target.centroid(), {0.0, -0.01});
    GradientProfile g = constant_gradient(0.5);
    Models m = constant_models(step, g);

    SUBCASE("training incline reproduces the raw output") {
      const TrackEntry e = predict_step(d, m, 30.0);
      const Contour expected = target.translated(start.centroid() + Vec2{0.0, -0.01} - target.centroid());
      CHECK(max_ctrl_distance(e.contour, expected) < 1e-12);
      CHECK(e.center.y == doctest::Approx(0.59).epsilon(1e-9));
      for (double v : e.gradient.mags) CHECK(v == doctest::Approx(0.5));
    }
    SUBCASE("other inclines rescale the output") {
      const double s_rel = incline_scale(60.0) / incline_scale(30.0);
      const TrackEntry e = predict_step(d, m, 60.0);
      CHECK(enclosed_area(e.contour) == doctest::Approx(enclosed_area(target) / (s_rel * s_rel)).epsilon(1e-6));
      for (double v : e.gradient.mags) CHECK(v == doctest::Approx(0.5 / s_rel));
    }
    SUBCASE("negative gradients are clamped") {
      Models neg = constant_models(step, constant_gradient(-1.0));
      for (double v : predict_step(d, neg, 30.0).gradient.mags) CHECK(v == 0.0);
    }
    SUBCASE("step_drop pushes") {
      DropState s = d;
      const TrackEntry e = step_drop(s, m, 30.0);
      CHECK(s.history.size() == K);
      CHECK(s.current().contour == e.contour);
      CHECK(s.history[K - 2].contour == start);
    }
    SUBCASE("non-finite output") {
      auto bad = step;
      bad[3] = std::nan("");
      Models nm = constant_models(bad, g);
      try {
        predict_step(d, nm, 30.0);
        FAIL("expected NonFinitePrediction");
      } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NonFinitePrediction);
      }
    }
    SUBCASE("breakage threshold is strict") {
      CHECK(breakage_probability(d, m.breakage) == 0.5);
      CHECK_FALSE(predict_breakage(d, m.breakage));
      m.breakage.layers.back().b(0, 0) = 1e-9;
      CHECK(predict_breakage(d, m.breakage));
      CHECK(predict_breakage(d, m.breakage));
    }
  }

  TEST_CASE("a drop trained to stay put stays put") {
    // Static sequences: every frame of a sequence is the same blob.
    std::mt19937_64 rng(21);
    std::vector<TrackedSequence> seqs;
    for (int s = 0; s < 6; ++s) {
      TrackedSequence q;
      q.id = s;
      const Contour c = random_blob(rng, {0.3 + 0.08 * s, 0.5}, 0.04, 0.2);
      for (int f = 0; f < 8; ++f) q.frames.push_back({c, constant_gradient(1.0), c.centroid()});
      seqs.push_back(q);
    }
    const Dataset ds = build_dataset(seqs, 5);
    Models m{nn::build_contour_net(16, 0.0, 3), nn::build_gradient_net(8, 0.0, 3), nn::build_breakage_net(8, 0.0, 3)};
    nn::TrainConfig cfg;
    cfg.epochs = 300;
    cfg.batch_size = 18;
    cfg.optimizer = nn::Optimizer::Adam;
    cfg.lr = 3e-3;
    cfg.lr_decay = 1e-3;
    nn::train(m.contour, contour_train_data(ds), cfg);

    Scene scene;
    scene.terrain = Terrain::plane(30.0);
    const Contour c0 = random_blob(rng, {0.5, 0.5}, 0.04, 0.2);
    scene.add_drop(init_drop(c0, constant_gradient(1.0), 1e-4, 5));
    NeuralPredictor p(m);
    Vec2 prev = scene.drops[0].current().center;
    for (int t = 0; t < 10; ++t) {
      step_scene(scene, p);
      REQUIRE(scene.drops.size() == 1);
      const Vec2 c = scene.drops[0].current().center;
      CHECK(distance(c, prev) < 1e-3);
      prev = c;
    }
  }

  TEST_CASE("scripted scene conserves volume") {
    scripted::StretchPredictor p;
    Scene s = scripted::conservation_scene(5);
    const double v0 = s.total_volume();
    int splits = 0, merges = 0;
    double worst = 0.0;
    bool lengths_ok = true, canonical = true;
    for (int t = 0; t < 200; ++t) {
      const StepReport r = step_scene(s, p);
      splits += r.splits;
      merges += r.merges;
      worst = std::max(worst, std::abs(s.total_volume() - v0) / v0);
      for (const auto& d : s.drops) {
        lengths_ok = lengths_ok && d.history.size() == 5;
        for (const auto& e : d.history) canonical = canonical && canonicalize(e.contour.ctrl()) == e.contour;
      }
    }
    CHECK(splits >= 3);
    CHECK(merges >= 2);
    CHECK(worst <= 1e-9);
    CHECK(lengths_ok);
    CHECK(canonical);
    CHECK_FALSE(s.flagged);
  }

  TEST_CASE("scene runs are deterministic") {
    auto run = [] {
      scripted::StretchPredictor p;
      Scene s = scripted::conservation_scene(5);
      std::ostringstream os;
      write_trajectory_header(os);
      for (int t = 0; t < 60; ++t) write_trajectory_rows(os, s, step_scene(s, p));
      return os.str();
    };
    const std::string a = run();
    CHECK(a == run());
    CHECK(a.rfind("step,drop,cx,cy,area,volume,event\n", 0) == 0);
    CHECK(a.find(",split\n") != std::string::npos);
  }

  TEST_CASE("drops leaving the domain") {
    scripted::StretchPredictor p;
    p.speed_per_area = 20.0;
    Scene s;
    s.add_drop(init_drop(circle_contour({0.5, 0.1}, 0.03), constant_gradient(1.0), 3e-4, 3));
    int exits = 0;
    for (int t = 0; t < 20 && !s.drops.empty(); ++t) exits += step_scene(s, p).exits;
    CHECK(exits == 1);
    CHECK(s.drops.empty());
    CHECK(s.exited_volume == 3e-4);
    CHECK(s.total_volume() == 3e-4);
  }

  TEST_CASE("average incline") {
    const Contour c = circle_contour({0.5, 0.5}, 0.1);
    CHECK(average_incline(Terrain::plane(25.0), c) == 25.0);
    Terrain t;
    t.kind = Terrain::Kind::Field;
    t.grid = GridSpec{128, 128, 1.0 / 128, {0, 0}};
    for (int j = 0; j < 128; ++j)
      for (int i = 0; i < 128; ++i) {
        const Vec2 p = t.grid.center(i, j);
        t.heights.push_back(p.x * p.x);
      }
    // Mean of atan(2x) over the disc, by fine sampling.
    double sum = 0.0;
    int n = 0;
    for (int j = 0; j < 400; ++j)
      for (int i = 0; i < 400; ++i) {
        const Vec2 p{0.4 + 0.2 * (i + 0.5) / 400, 0.4 + 0.2 * (j + 0.5) / 400};
        if (distance(p, {0.5, 0.5}) > 0.1) continue;
        sum += std::atan(2 * p.x) * 180 / M_PI;
        ++n;
      }
    CHECK(average_incline(t, c) == doctest::Approx(sum / n).epsilon(0.01));
  }

  TEST_CASE("scene config") {
    const std::string dir = temp_dir("config");
    save_contour(dir + "/drop.txt", circle_contour({0.4, 0.6}, 0.05));
    save_gradient(dir + "/drop_g.txt", constant_gradient(2.0));
    {
      std::ofstream(dir + "/scene.json") << R"({
        "terrain": {"type": "plane", "incline_deg": 45},
        "drops": [{"contour": "drop.txt", "gradient": "drop_g.txt", "volume": 1e-4},
                  {"circle": {"center": [0.7, 0.7], "radius": 0.04}, "volume": 2e-4}],
        "models": {"contour": "c.json", "gradient": "g.json", "breakage": "b.json"},
        "database": "tracks.json", "K": 4, "steps": 7, "split_delta": -0.6, "output": "out"
      })";
    }
    const SceneConfig cfg = load_scene_config(dir + "/scene.json");
    CHECK(cfg.terrain.incline_deg == 45.0);
    REQUIRE(cfg.drops.size() == 2);
    CHECK(cfg.drops[0].gradient.has_value());
    CHECK_FALSE(cfg.drops[1].gradient.has_value());
    CHECK(cfg.drops[1].contour->centroid().x == doctest::Approx(0.7).epsilon(1e-6));
    CHECK(cfg.K == 4);
    CHECK(cfg.steps == 7);
    CHECK(cfg.split.delta == -0.6);
    CHECK(cfg.contour_model == (std::filesystem::path(dir) / "c.json").string());
    CHECK(cfg.output == (std::filesystem::path(dir) / "out").string());

    InitDatabase db("test");
    db.add(circle_contour({0.1, 0.1}, 0.02), constant_gradient(5.0));
    const Scene s = make_scene(cfg, &db);
    REQUIRE(s.drops.size() == 2);
    CHECK(s.drops[0].current().gradient.mags[0] == 2.0);
    CHECK(s.drops[1].current().gradient.mags[0] == 5.0);
    CHECK(s.drops[1].history.size() == 4);
    CHECK_THROWS_AS(make_scene(cfg, nullptr), Error);

    auto expect_invalid = [&](const std::string& body) {
      std::ofstream(dir + "/bad.json") << body;
      try {
        load_scene_config(dir + "/bad.json");
        FAIL("expected InvalidConfig for " << body);
      } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InvalidConfig);
      }
    };
    expect_invalid(R"({"terrain": {"type": "plane", "incline_deg": 0}})");
    expect_invalid(R"({"steps": 0})");
    expect_invalid(R"({"dt": -1})");
    expect_invalid(R"({"drops": [{"contour": "missing.txt", "volume": 1}]})");
    expect_invalid(R"({"drops": [{"circle": {"center": [0.5, 0.5], "radius": 0.1}, "volume": 0}]})");
    expect_invalid(R"({"terrain": {"type": "sphere"}})");
    expect_invalid("{not json");
    try {
      load_scene_config(dir + "/nope.json");
      FAIL("expected InvalidConfig");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::InvalidConfig);
    }
  }

  TEST_CASE("mesh output") {
    CHECK(mesh_file_name(3, 12) == "step_00003_drop_012.obj");
    CHECK(mesh_file_name(12345, 7) == "step_12345_drop_007.obj");
    Scene s;
    s.terrain = Terrain::plane(30.0);
    s.step = 2;
    s.add_drop(init_drop(circle_contour({0.3, 0.5}, 0.05), constant_gradient(1.0), 1e-4, 3));
    s.add_drop(init_drop(circle_contour({0.7, 0.5}, 0.05), constant_gradient(1.0), 1e-4, 3));
    const std::string dir = temp_dir("mesh");
    std::vector<std::string> skipped;
    CHECK(export_scene_meshes(s, dir, 32, 3, &skipped) == 2);
    CHECK(skipped.empty());
    CHECK(std::filesystem::exists(dir + "/step_00002_drop_000.obj"));
    CHECK(std::filesystem::exists(dir + "/step_00002_drop_001.obj"));
  }
}
