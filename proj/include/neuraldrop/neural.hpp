#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "neuraldrop/common.hpp"

namespace nd::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
/// One matrix per time step, each (features x batch).
using Sequence = std::vector<Mat>;

enum class Activation { Linear, Relu, Sigmoid, Tanh };
enum class LayerKind { Dense, Lstm };

const char* to_string(Activation a);
const char* to_string(LayerKind k);

/// Dense: W (out x in), b. LSTM: W (4H x in), U (4H x H), b (4H); gate blocks are
/// input, forget, cell candidate, output. Gates use sigmoid, the candidate tanh and
/// `activation` is applied to the cell state to form h.
struct Layer {
  LayerKind kind = LayerKind::Dense;
  int in_dim = 0;
  int out_dim = 0;
  Activation activation = Activation::Linear;
  bool returns_sequence = true;
  Mat W;
  Mat U;
  Mat b;  // column vector

  void validate() const;
};

enum class NodeKind { Input, Layer, Concat };

struct Node {
  NodeKind kind = NodeKind::Input;
  std::string name;
  std::vector<int> inputs;
  int layer = -1;
  // Input nodes read rows [offset, offset + dim) of the model input.
  int offset = 0;
  int dim = 0;
};

struct Model {
  std::string net = "custom";
  int input_dim = 0;
  std::vector<Layer> layers;
  /// Topologically ordered; the last node is the output.
  std::vector<Node> nodes;
  double dropout_rate = 0.0;
  std::uint64_t seed = 0;
  /// Divisor applied to inputs and targets by the data adapters (gradient net).
  double feature_scale = 1.0;

  int output_dim() const;
  std::size_t parameter_count() const;
  /// Throws DimMismatch / InvalidArgument on an inconsistent graph.
  void validate() const;
};

/// Appends nodes while building a graph.
class GraphBuilder {
 public:
  GraphBuilder(std::string net, int input_dim);
  int input(const std::string& name, int offset, int dim);
  int lstm(int from, int width, bool returns_sequence, Activation act = Activation::Linear);
  int dense(int from, int width, Activation act);
  int concat(const std::vector<int>& from);
  /// Glorot-uniform weights, forget-gate bias 1; the last node becomes the output.
  Model finish(double dropout_rate, std::uint64_t seed);

 private:
  int width_of(int node) const;
  Model m_;
  std::vector<int> widths_;
};

/// Initializes every layer from `seed`: uniform in +-sqrt(6/(fan_in+fan_out)), zero
/// biases except the LSTM forget gate (+1).
void initialize(Model& model, std::uint64_t seed);

/// Table 1 structures. `width` overrides the hidden width (0 = paper width).
Model build_contour_net(int width = 0, double dropout = 0.2, std::uint64_t seed = 1);
Model build_gradient_net(int width = 0, double dropout = 0.2, std::uint64_t seed = 1);
Model build_breakage_net(int width = 0, double dropout = 0.2, std::uint64_t seed = 1);

/// One line per node, e.g. "x: Input-52", "LSTM(Lin)-260 <- x", "Merge <- a,b".
std::vector<std::string> describe(const Model& model);

// ---------------------------------------------------------------- forward / backward

struct LstmTrace {
  Sequence gates;   // activated i,f,g,o stacked (4H x B) per step
  Sequence cells;   // c_t per step
  Sequence hidden;  // h_t per step before dropout
};

struct ForwardCache {
  bool valid = false;
  Sequence input;
  std::vector<Sequence> values;            // node outputs after dropout
  std::vector<Sequence> pre_dropout;       // layer outputs before dropout
  std::vector<Sequence> masks;             // dropout masks (empty when off)
  std::vector<LstmTrace> lstm;             // by node index
};

/// Runs the graph on `input` (K steps of input_dim x batch) and returns the output at
/// the last step. In train mode dropout masks are drawn from `rng`, or from the model
/// seed when rng is null. LSTM state starts at zero.
Mat forward(const Model& model, const Sequence& input, bool train_mode, ForwardCache* cache = nullptr,
            std::mt19937_64* rng = nullptr);

/// Parameter tensors in a fixed order: per layer W, (U), b.
std::vector<Mat*> parameters(Model& model);
std::vector<const Mat*> parameters(const Model& model);
std::vector<Mat> zero_gradients(const Model& model);

/// Backpropagation through time; gradients summed over the batch, matching parameters().
std::vector<Mat> backward(const Model& model, const ForwardCache& cache, const Mat& output_grad);

// ---------------------------------------------------------------- losses

enum class Loss { Mse, Bce };
const char* to_string(Loss l);

/// Mean over batch (and output dims for MSE). `grad` receives dLoss/dOutput.
double loss_value(Loss loss, const Mat& output, const Mat& target, Mat* grad = nullptr);

// ---------------------------------------------------------------- optimizers

struct NesterovState {
  std::vector<Mat> velocity;
};

/// Parameters are kept at the look-ahead point theta + mu v, so `grads` is the
/// gradient there: v <- mu v - lr g; params <- params + mu v - lr g.
void sgd_nesterov_step(const std::vector<Mat*>& params, const std::vector<Mat>& grads, NesterovState& state,
                       double lr, double momentum);

struct AdamState {
  std::vector<Mat> m;
  std::vector<Mat> v;
  long long t = 0;
};

void adam_step(const std::vector<Mat*>& params, const std::vector<Mat>& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// lr_0 / (1 + decay * iteration).
inline double decayed_lr(double lr0, double decay, long long iteration) {
  return lr0 / (1.0 + decay * static_cast<double>(iteration));
}

// ---------------------------------------------------------------- training

enum class Optimizer { SgdNesterov, Adam };
const char* to_string(Optimizer o);

struct TrainConfig {
  int epochs = 1000;
  int batch_size = 128;
  double lr = 1e-2;
  double lr_decay = 1e-6;
  Optimizer optimizer = Optimizer::SgdNesterov;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Loss loss = Loss::Mse;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Samples as columns: inputs[t] is (input_dim x N), targets (target_dim x N).
struct TrainData {
  Sequence inputs;
  Mat targets;

  int size() const { return static_cast<int>(targets.cols()); }
  TrainData subset(const std::vector<int>& cols) const;
};

struct TrainResult {
  std::vector<double> epoch_loss;
};

using EpochCallback = std::function<void(int epoch, double loss)>;

/// Mini-batch training, shuffled per epoch by a seeded RNG. Throws EmptyDataset,
/// DimMismatch, NonFiniteLoss (naming epoch and batch).
TrainResult train(Model& model, const TrainData& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Inference-mode loss over the whole set.
double evaluate(const Model& model, const TrainData& data, Loss loss);

void write_loss_csv(const std::string& path, const std::vector<double>& epoch_loss);

// ---------------------------------------------------------------- undersampling

/// NearMiss-1: keeps every positive and the round(ratio * positives) negatives with the
/// smallest mean distance to their 3 nearest positives (ties by index). Rows are samples.
/// Returns kept row indices in ascending order. Throws NoPositives.
std::vector<int> near_miss_undersample(const Mat& samples, const std::vector<int>& labels, double ratio = 1.0);

// ---------------------------------------------------------------- persistence

void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);
std::string model_to_json(const Model& model);
Model model_from_json(const std::string& text);

}  // namespace nd::nn
