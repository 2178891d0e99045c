#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "neuraldrop/neural.hpp"
#include "neuraldrop/training.hpp"
#include "oracles.hpp"
#include "random_nets.hpp"

using namespace nd;
using namespace nd::nn;
using nd::testing::random_mat;
using nd::testing::random_seq;
using nd::testing::toy_net;

namespace {

Model tiny_dense(int in, int hidden, int out, Activation act, double dropout = 0.0) {
  GraphBuilder g("tiny", in);
  int h = g.input("x", 0, in);
  h = g.dense(h, hidden, act);
  g.dense(h, out, Activation::Linear);
  return g.finish(dropout, 3);
}

}  // namespace

TEST_SUITE("neural") {
  TEST_CASE("zero weights give zero linear outputs and one half from a sigmoid") {
    std::mt19937_64 rng(1);
    for (auto build : {build_gradient_net, build_breakage_net}) {
      Model m = build(16, 0.2, 1);
      for (auto* p : parameters(m)) p->setZero();
      const Mat y = forward(m, random_seq(rng, m.net == "breakage" ? 1 : 5, m.input_dim, 3), false);
      if (m.net == "breakage") CHECK((y.array() == 0.5).all());
      else CHECK((y.array() == 0.0).all());
    }
  }

  TEST_CASE("single LSTM cell matches the scalar recurrence") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-1, 1);
    for (Activation act : {Activation::Linear, Activation::Tanh}) {
      GraphBuilder g("cell", 1);
      g.lstm(g.input("x", 0, 1), 1, false, act);
      Model m = g.finish(0.0, 1);
      double W[4], U[4], b[4];
      for (int k = 0; k < 4; ++k) {
        W[k] = u(rng);
        U[k] = u(rng);
        b[k] = u(rng);
        m.layers[0].W(k, 0) = W[k];
        m.layers[0].U(k, 0) = U[k];
        m.layers[0].b(k, 0) = b[k];
      }
      const double x = 0.7;
      Sequence in(6, Mat::Constant(1, 1, x));
      const double expected = oracle::scalar_lstm(W, U, b, x, 6,
                                                  act == Activation::Linear ? +[](double v) { return v; }
                                                                            : +[](double v) { return std::tanh(v); });
      CHECK(forward(m, in, false)(0, 0) == doctest::Approx(expected).epsilon(1e-14));
    }
  }

  TEST_CASE("inference forward is deterministic and rejects wrong widths") {
    std::mt19937_64 rng(3);
    Model m = build_contour_net(8);
    const Sequence x = random_seq(rng, 5, 106, 4);
    const Mat a = forward(m, x, false), b = forward(m, x, false);
    CHECK(a == b);
    CHECK(a.rows() == 106);
    try {
      forward(m, random_seq(rng, 5, 104, 4), false);
      FAIL("expected DimMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::DimMismatch);
    }
  }

  TEST_CASE("backward matches central differences on random toy nets") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
      Model m = toy_net(rng);
      const Sequence x = random_seq(rng, 4, 5, 3);
      const Mat w = random_mat(rng, 2, 3);
      const double err = oracle::max_gradient_error(m, x, w);
      CAPTURE(trial);
      CHECK(err < 1e-4);
    }
  }

  TEST_CASE("backward is linear in the output gradient") {
    std::mt19937_64 rng(5);
    Model m = toy_net(rng);
    ForwardCache cache;
    const Mat y = forward(m, random_seq(rng, 3, 5, 2), false, &cache);
    for (const Mat& g : backward(m, cache, Mat::Zero(y.rows(), y.cols()))) CHECK(g.isZero(0.0));
    const Mat w = random_mat(rng, 2, 2);
    const auto g1 = backward(m, cache, w);
    const auto g2 = backward(m, cache, 2.0 * w);
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK((g2[i] - 2.0 * g1[i]).cwiseAbs().maxCoeff() <= 1e-12);
    try {
      backward(m, ForwardCache{}, w);
      FAIL("expected MissingCache");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::MissingCache);
    }
  }

  TEST_CASE("Nesterov step") {
    SUBCASE("zero momentum is plain SGD") {
      Mat theta = Mat::Constant(2, 2, 1.5);
      const Mat g = Mat::Constant(2, 2, 0.25);
      NesterovState st;
      sgd_nesterov_step({&theta}, {g}, st, 0.1, 0.0);
      CHECK(theta == Mat::Constant(2, 2, 1.5 - 0.1 * 0.25));
    }
    SUBCASE("quadratic bowl matches the scalar recurrence") {
      Mat theta = Mat::Constant(1, 1, 1.0);
      NesterovState st;
      // Classic form: v <- mu v - lr f'(x + mu v); x <- x + v. Our parameters hold the
      // look-ahead point x + mu v.
      double x = 1.0, v = 0.0;
      for (int k = 0; k < 100; ++k) {
        sgd_nesterov_step({&theta}, {Mat::Constant(1, 1, 2.0 * theta(0, 0))}, st, 0.1, 0.9);
        v = 0.9 * v - 0.1 * 2.0 * (x + 0.9 * v);
        x += v;
      }
      CHECK(std::abs(x) < 1e-3);
      CHECK(theta(0, 0) == doctest::Approx(x + 0.9 * v).epsilon(1e-12));
      CHECK(std::abs(theta(0, 0)) < 1e-3);
    }
    SUBCASE("zero gradient leaves parameters unchanged") {
      Mat theta = Mat::Constant(3, 1, -0.4);
      NesterovState st;
      for (int k = 0; k < 10; ++k) sgd_nesterov_step({&theta}, {Mat::Zero(3, 1)}, st, 0.1, 0.9);
      CHECK(theta == Mat::Constant(3, 1, -0.4));
    }
    SUBCASE("shape mismatch") {
      Mat theta = Mat::Zero(2, 2);
      NesterovState st;
      CHECK_THROWS_AS(sgd_nesterov_step({&theta}, {Mat::Zero(2, 1)}, st, 0.1, 0.9), Error);
    }
  }

  TEST_CASE("Adam step") {
    SUBCASE("first step has magnitude lr regardless of gradient scale") {
      for (double g : {1e-3, 1.0, 1e3}) {
        Mat theta = Mat::Zero(1, 1);
        AdamState st;
        adam_step({&theta}, {Mat::Constant(1, 1, g)}, st, 0.01);
        CHECK(theta(0, 0) == doctest::Approx(-0.01 * g / (g + 1e-8)).epsilon(1e-12));
      }
    }
    SUBCASE("zero gradient stream") {
      Mat theta = Mat::Constant(2, 1, 0.3);
      AdamState st;
      for (int k = 0; k < 20; ++k) adam_step({&theta}, {Mat::Zero(2, 1)}, st, 0.01);
      CHECK(theta == Mat::Constant(2, 1, 0.3));
    }
    SUBCASE("scalar quadratic converges") {
      Mat theta = Mat::Constant(1, 1, 1.0);
      AdamState st;
      for (int k = 0; k < 500; ++k) adam_step({&theta}, {Mat::Constant(1, 1, 2.0 * theta(0, 0))}, st, 0.05);
      CHECK(std::abs(theta(0, 0)) < 1e-3);
    }
  }

  TEST_CASE("learning-rate decay schedule") {
    CHECK(decayed_lr(1e-2, 1e-6, 0) == 1e-2);
    CHECK(decayed_lr(1e-2, 1e-6, 1000000) == doctest::Approx(5e-3));
  }

  TEST_CASE("inverted dropout keeps the expectation") {
    Model m = tiny_dense(4, 6, 2, Activation::Linear, 0.3);
    std::mt19937_64 rng(6);
    const Mat x = random_mat(rng, 4, 1);
    const Mat clean = forward(m, {x}, false);
    const Mat batch = x.replicate(1, 100000);
    std::mt19937_64 drng(7);
    const Mat noisy = forward(m, {batch}, true, nullptr, &drng);
    const Eigen::VectorXd mean = noisy.rowwise().mean();
    for (int r = 0; r < 2; ++r) CHECK(std::abs(mean(r) - clean(r, 0)) <= 0.01 * std::abs(clean(r, 0)) + 1e-3);
    CHECK(forward(m, {x}, false) == clean);
  }

  TEST_CASE("losses") {
    Mat g;
    CHECK(loss_value(Loss::Mse, Mat::Constant(2, 2, 1.0), Mat::Zero(2, 2), &g) == 1.0);
    CHECK(g == Mat::Constant(2, 2, 0.5));
    const double bce0 = loss_value(Loss::Bce, Mat::Zero(1, 2), Mat::Ones(1, 2), &g);
    CHECK(std::isfinite(bce0));
    CHECK(bce0 == doctest::Approx(-std::log(1e-7)));
    CHECK(g.allFinite());
    CHECK(std::isfinite(loss_value(Loss::Bce, Mat::Ones(1, 2), Mat::Zero(1, 2))));
  }

  TEST_CASE("training is seeded and lr 0 is inert") {
    std::mt19937_64 rng(8);
    TrainData data;
    data.inputs = random_seq(rng, 3, 5, 20);
    data.targets = random_mat(rng, 2, 20, 0.5);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 6;
    std::mt19937_64 r1(9), r2(9);
    Model a = toy_net(r1), b = toy_net(r2);
    a.dropout_rate = b.dropout_rate = 0.2;
    const auto ra = train(a, data, cfg), rb = train(b, data, cfg);
    CHECK(ra.epoch_loss == rb.epoch_loss);
    for (std::size_t i = 0; i < a.layers.size(); ++i) CHECK(a.layers[i].W == b.layers[i].W);

    std::mt19937_64 r3(9);
    Model c = toy_net(r3);
    const Model before = c;
    cfg.lr = 0.0;
    train(c, data, cfg);
    for (std::size_t i = 0; i < c.layers.size(); ++i) {
      CHECK(c.layers[i].W == before.layers[i].W);
      CHECK(c.layers[i].U == before.layers[i].U);
      CHECK(c.layers[i].b == before.layers[i].b);
    }
  }

  TEST_CASE("training reduces loss and reports bad input") {
    std::mt19937_64 rng(10);
    Model m = tiny_dense(3, 8, 1, Activation::Tanh);
    TrainData data;
    data.inputs = {random_mat(rng, 3, 64)};
    data.targets = data.inputs[0].colwise().sum() * 0.3;
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.batch_size = 16;
    cfg.lr = 0.05;
    const auto r = train(m, data, cfg);
    CHECK(r.epoch_loss.back() < 0.1 * r.epoch_loss.front());

    TrainData empty;
    CHECK_THROWS_AS(train(m, empty, cfg), Error);
    TrainData bad = data;
    bad.targets(0, 0) = std::nan("");
    try {
      train(m, bad, cfg);
      FAIL("expected NonFiniteLoss");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NonFiniteLoss);
      CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
    }
  }

  TEST_CASE("near-miss undersampling") {
    std::mt19937_64 rng(11);
    SUBCASE("10 positives and 100 negatives") {
      const Mat s = random_mat(rng, 110, 4);
      std::vector<int> labels(110, 0);
      for (int i = 0; i < 10; ++i) labels[i * 11] = 1;
      const auto kept = near_miss_undersample(s, labels);
      int pos = 0;
      for (int k : kept) pos += labels[k];
      CHECK(kept.size() == 20);
      CHECK(pos == 10);
    }
    SUBCASE("balanced input is unchanged") {
      const Mat s = random_mat(rng, 8, 3);
      const std::vector<int> labels = {1, 0, 1, 0, 0, 1, 1, 0};
      CHECK(near_miss_undersample(s, labels) == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
    }
    SUBCASE("matches the exhaustive ranking") {
      for (int trial = 0; trial < 20; ++trial) {
        const Mat s = random_mat(rng, 200, 5);
        std::vector<int> labels(200, 0);
        std::uniform_int_distribution<int> pick(0, 199);
        for (int k = 0; k < 15 + trial; ++k) labels[pick(rng)] = 1;
        CHECK(near_miss_undersample(s, labels) == oracle::near_miss_exhaustive(s, labels, 1.0));
      }
    }
    SUBCASE("no positives") {
      try {
        near_miss_undersample(Mat::Zero(3, 2), {0, 0, 0});
        FAIL("expected NoPositives");
      } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NoPositives);
      }
    }
  }

  TEST_CASE("subnets follow the published layer inventory") {
    const Model c = build_contour_net();
    CHECK(c.input_dim == 106);
    CHECK(c.output_dim() == 106);
    int lstm = 0;
    for (const auto& l : c.layers) {
      if (l.kind == LayerKind::Lstm) {
        ++lstm;
        CHECK(l.out_dim == 260);
        CHECK(l.activation == Activation::Linear);
      }
    }
    CHECK(lstm == 11);
    const std::vector<std::string> expected = {
        "x: Input-52",
        "y: Input-52",
        "center: Input-2",
        "lstm1: LSTM(Lin)-260 <- x",
        "lstm2: LSTM(Lin)-260 <- y",
        "merge5: Merge <- lstm1,lstm2",
        "lstm3: LSTM(Lin)-260 <- merge5",
        "lstm4: LSTM(Lin)-260 <- lstm3",
        "lstm5: LSTM(Lin)-260 <- lstm4",
        "lstm6: LSTM(Lin)-260 <- lstm5",
        "lstm7: LSTM(Lin)-260 <- center",
        "lstm8: LSTM(Lin)-260 <- lstm7",
        "lstm9: LSTM(Lin)-260 <- lstm8",
        "merge13: Merge <- lstm6,lstm9",
        "lstm10: LSTM(Lin)-260 <- merge13",
        "lstm11: LSTM(Lin)-260 last <- lstm10",
        "dense12: Dense(Lin)-106 <- lstm11",
    };
    CHECK(describe(c) == expected);

    const Model g = build_gradient_net();
    CHECK(g.input_dim == 52);
    CHECK(g.output_dim() == 52);
    CHECK(g.layers.size() == 7);
    for (int k = 0; k < 6; ++k) {
      CHECK(g.layers[k].kind == LayerKind::Lstm);
      CHECK(g.layers[k].out_dim == 250);
      CHECK(g.layers[k].returns_sequence == (k < 5));
    }

    const Model b = build_breakage_net();
    CHECK(b.input_dim == 104);
    CHECK(b.layers.size() == 7);
    for (int k = 0; k < 6; ++k) {
      CHECK(b.layers[k].kind == LayerKind::Dense);
      CHECK(b.layers[k].out_dim == 150);
      CHECK(b.layers[k].activation == Activation::Relu);
    }
    CHECK(b.layers[6].activation == Activation::Sigmoid);
    CHECK(b.output_dim() == 1);
  }

  TEST_CASE("initialization bounds and forget bias") {
    const Model m = build_gradient_net(10);
    const Layer& l = m.layers[1];
    CHECK(l.W.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / (10 + 40)));
    CHECK(l.U.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / (10 + 40)));
    CHECK(l.b.middleRows(10, 10) == Mat::Ones(10, 1));
    CHECK(l.b.topRows(10).isZero(0.0));
  }

  TEST_CASE("model files round trip bitwise") {
    const auto dir = std::filesystem::temp_directory_path() / "nd_test_neural";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "m.json").string();
    std::mt19937_64 rng(12);
    Model m = toy_net(rng);
    m.feature_scale = 1.0 / 3.0;
    save_model(path, m);
    const Model r = load_model(path);
    CHECK(model_to_json(r) == model_to_json(m));
    CHECK(r.feature_scale == m.feature_scale);
    for (int k = 0; k < 100; ++k) {
      const Sequence x = random_seq(rng, 3, 5, 1);
      CHECK(forward(r, x, false) == forward(m, x, false));
    }

    const std::string text = model_to_json(m);
    try {
      model_from_json(text.substr(0, text.size() / 2));
      FAIL("expected CorruptFile");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::CorruptFile);
    }
    std::string wrong = text;
    wrong.replace(wrong.find("nd-model v1"), 11, "nd-model v9");
    try {
      model_from_json(wrong);
      FAIL("expected VersionMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::VersionMismatch);
    }
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("dataset adapters") {
    Dataset ds;
    ds.K = 2;
    for (int s = 0; s < 3; ++s) {
      TrainingSample t;
      t.seq_id = s;
      t.inputs.assign(2, {});
      t.grad_inputs.assign(2, {});
      for (int k = 0; k < 2; ++k) {
        t.inputs[k].fill(0.1 * (s + k));
        t.grad_inputs[k].fill(10.0 * (s + 1));
      }
      t.target.fill(-0.5);
      t.grad_target.fill(40.0);
      t.breakage_input.fill(0.2);
      t.breakage = s == 1;
      ds.samples.push_back(t);
    }
    const TrainData c = contour_train_data(ds);
    CHECK(c.inputs.size() == 2);
    CHECK(c.inputs[1](5, 2) == doctest::Approx(0.3));
    CHECK(c.targets.rows() == kStepDim);
    const double scale = gradient_scale(ds);
    CHECK(scale == 40.0);
    const TrainData g = gradient_train_data(ds, scale);
    CHECK(g.inputs[0](0, 0) == 0.25);
    CHECK(g.targets(7, 1) == 1.0);
    const TrainData b = breakage_train_data(ds);
    CHECK(b.inputs.size() == 1);
    CHECK(b.targets == (Mat(1, 3) << 0, 1, 0).finished());
  }
}
