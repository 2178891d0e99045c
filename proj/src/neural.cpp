#include "neuraldrop/neural.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace nd::nn {

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

Mat apply(Activation a, const Mat& z) {
  switch (a) {
    case Activation::Linear: return z;
    case Activation::Relu: return z.cwiseMax(0.0);
    case Activation::Sigmoid: return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    case Activation::Tanh: return z.array().tanh().matrix();
  }
  return z;
}

// Derivative expressed through the activation output y.
Mat derivative_from_output(Activation a, const Mat& y) {
  switch (a) {
    case Activation::Linear: return Mat::Ones(y.rows(), y.cols());
    case Activation::Relu: return (y.array() > 0.0).cast<double>().matrix();
    case Activation::Sigmoid: return (y.array() * (1.0 - y.array())).matrix();
    case Activation::Tanh: return (1.0 - y.array().square()).matrix();
  }
  return Mat::Ones(y.rows(), y.cols());
}

Mat sigmoid(const Mat& z) { return apply(Activation::Sigmoid, z); }

Mat hcat(const Sequence& seq) {
  if (seq.empty()) return Mat();
  Mat out(seq[0].rows(), seq[0].cols() * static_cast<Eigen::Index>(seq.size()));
  for (std::size_t t = 0; t < seq.size(); ++t) out.middleCols(static_cast<Eigen::Index>(t) * seq[0].cols(), seq[0].cols()) = seq[t];
  return out;
}

const char* short_name(Activation a) {
  switch (a) {
    case Activation::Linear: return "Lin";
    case Activation::Relu: return "ReLu";
    case Activation::Sigmoid: return "Sig";
    case Activation::Tanh: return "Tanh";
  }
  return "?";
}

}  // namespace

const char* to_string(Activation a) {
  switch (a) {
    case Activation::Linear: return "linear";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Tanh: return "tanh";
  }
  return "?";
}

const char* to_string(LayerKind k) { return k == LayerKind::Dense ? "dense" : "lstm"; }
const char* to_string(Loss l) { return l == Loss::Mse ? "mse" : "bce"; }
const char* to_string(Optimizer o) { return o == Optimizer::Adam ? "adam" : "sgd_nesterov"; }

void Layer::validate() const {
  if (in_dim <= 0 || out_dim <= 0) throw Error(ErrorCode::DimMismatch, "layer dimensions must be positive");
  const int rows = kind == LayerKind::Lstm ? 4 * out_dim : out_dim;
  if (W.rows() != rows || W.cols() != in_dim || b.rows() != rows || b.cols() != 1)
    throw Error(ErrorCode::DimMismatch, "layer weight shapes do not match its dimensions");
  if (kind == LayerKind::Lstm && (U.rows() != rows || U.cols() != out_dim))
    throw Error(ErrorCode::DimMismatch, "LSTM recurrent weight shape mismatch");
  if (!W.allFinite() || !b.allFinite() || (kind == LayerKind::Lstm && !U.allFinite()))
    throw Error(ErrorCode::InvalidArgument, "layer weights must be finite");
}

int Model::output_dim() const {
  if (nodes.empty()) return 0;
  const Node& n = nodes.back();
  if (n.kind != NodeKind::Layer) throw Error(ErrorCode::InvalidArgument, "output node must be a layer");
  return layers[n.layer].out_dim;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.W.size() + l.U.size() + l.b.size());
  return n;
}

void Model::validate() const {
  if (nodes.empty()) throw Error(ErrorCode::InvalidArgument, "model has no nodes");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw Error(ErrorCode::InvalidArgument, "dropout rate must be in [0,1)");
  if (nodes.back().kind != NodeKind::Layer) throw Error(ErrorCode::InvalidArgument, "output node must be a layer");
  std::vector<int> width(nodes.size(), 0);
  std::vector<int> used_layers(layers.size(), 0);
  std::vector<int> consumers(nodes.size(), 0);
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const Node& n = nodes[k];
    for (int src : n.inputs) {
      if (src < 0 || src >= static_cast<int>(k)) throw Error(ErrorCode::InvalidArgument, "graph is not topologically ordered");
      ++consumers[src];
    }
    switch (n.kind) {
      case NodeKind::Input:
        if (n.dim <= 0 || n.offset < 0 || n.offset + n.dim > input_dim)
          throw Error(ErrorCode::DimMismatch, "input slice outside model input");
        width[k] = n.dim;
        break;
      case NodeKind::Concat:
        if (n.inputs.size() < 2) throw Error(ErrorCode::InvalidArgument, "merge needs two inputs");
        for (int src : n.inputs) width[k] += width[src];
        break;
      case NodeKind::Layer: {
        if (n.layer < 0 || n.layer >= static_cast<int>(layers.size()) || n.inputs.size() != 1)
          throw Error(ErrorCode::InvalidArgument, "layer node must reference one layer and one input");
        const Layer& l = layers[n.layer];
        l.validate();
        if (l.in_dim != width[n.inputs[0]]) throw Error(ErrorCode::DimMismatch, "layer input width mismatch at " + n.name);
        ++used_layers[n.layer];
        width[k] = l.out_dim;
        break;
      }
    }
  }
  for (int u : used_layers)
    if (u != 1) throw Error(ErrorCode::InvalidArgument, "every layer must be used exactly once");
  for (std::size_t k = 0; k + 1 < nodes.size(); ++k)
    if (consumers[k] == 0) throw Error(ErrorCode::InvalidArgument, "dangling node " + nodes[k].name);
}

// ---------------------------------------------------------------- builders

GraphBuilder::GraphBuilder(std::string net, int input_dim) {
  m_.net = std::move(net);
  m_.input_dim = input_dim;
}

int GraphBuilder::width_of(int node) const { return widths_.at(node); }

int GraphBuilder::input(const std::string& name, int offset, int dim) {
  Node n;
  n.kind = NodeKind::Input;
  n.name = name;
  n.offset = offset;
  n.dim = dim;
  m_.nodes.push_back(n);
  widths_.push_back(dim);
  return static_cast<int>(m_.nodes.size()) - 1;
}

int GraphBuilder::lstm(int from, int width, bool returns_sequence, Activation act) {
  Layer l;
  l.kind = LayerKind::Lstm;
  l.in_dim = width_of(from);
  l.out_dim = width;
  l.activation = act;
  l.returns_sequence = returns_sequence;
  l.W = Mat::Zero(4 * width, l.in_dim);
  l.U = Mat::Zero(4 * width, width);
  l.b = Mat::Zero(4 * width, 1);
  m_.layers.push_back(std::move(l));
  Node n;
  n.kind = NodeKind::Layer;
  n.name = "lstm" + std::to_string(m_.layers.size());
  n.inputs = {from};
  n.layer = static_cast<int>(m_.layers.size()) - 1;
  m_.nodes.push_back(n);
  widths_.push_back(width);
  return static_cast<int>(m_.nodes.size()) - 1;
}

int GraphBuilder::dense(int from, int width, Activation act) {
  Layer l;
  l.kind = LayerKind::Dense;
  l.in_dim = width_of(from);
  l.out_dim = width;
  l.activation = act;
  l.W = Mat::Zero(width, l.in_dim);
  l.b = Mat::Zero(width, 1);
  m_.layers.push_back(std::move(l));
  Node n;
  n.kind = NodeKind::Layer;
  n.name = "dense" + std::to_string(m_.layers.size());
  n.inputs = {from};
  n.layer = static_cast<int>(m_.layers.size()) - 1;
  m_.nodes.push_back(n);
  widths_.push_back(width);
  return static_cast<int>(m_.nodes.size()) - 1;
}

int GraphBuilder::concat(const std::vector<int>& from) {
  Node n;
  n.kind = NodeKind::Concat;
  n.name = "merge" + std::to_string(m_.nodes.size());
  n.inputs = from;
  int w = 0;
  for (int f : from) w += width_of(f);
  m_.nodes.push_back(n);
  widths_.push_back(w);
  return static_cast<int>(m_.nodes.size()) - 1;
}

Model GraphBuilder::finish(double dropout_rate, std::uint64_t seed) {
  m_.dropout_rate = dropout_rate;
  m_.seed = seed;
  initialize(m_, seed);
  m_.validate();
  return m_;
}

void initialize(Model& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto glorot = [&](Mat& w, int fan_in, int fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = (2.0 * uniform01(rng) - 1.0) * limit;
  };
  for (auto& l : model.layers) {
    if (l.kind == LayerKind::Dense) {
      glorot(l.W, l.in_dim, l.out_dim);
      l.b.setZero();
    } else {
      const int H = l.out_dim;
      glorot(l.W, l.in_dim, 4 * H);
      glorot(l.U, H, 4 * H);
      l.b.setZero();
      l.b.middleRows(H, H).setOnes();
    }
  }
}

namespace {

int paper_width(int width, int fallback) { return width > 0 ? width : fallback; }

}  // namespace

Model build_contour_net(int width, double dropout, std::uint64_t seed) {
  const int w = paper_width(width, 260);
  GraphBuilder g("contour", 106);
  const int x = g.input("x", 0, 52);
  const int y = g.input("y", 52, 52);
  const int c = g.input("center", 104, 2);
  const int xl = g.lstm(x, w, true);
  const int yl = g.lstm(y, w, true);
  int s = g.concat({xl, yl});
  for (int k = 0; k < 4; ++k) s = g.lstm(s, w, true);
  int cl = c;
  for (int k = 0; k < 3; ++k) cl = g.lstm(cl, w, true);
  int m = g.concat({s, cl});
  m = g.lstm(m, w, true);
  m = g.lstm(m, w, false);
  g.dense(m, 106, Activation::Linear);
  return g.finish(dropout, seed);
}

Model build_gradient_net(int width, double dropout, std::uint64_t seed) {
  const int w = paper_width(width, 250);
  GraphBuilder g("gradient", 52);
  int h = g.input("gradient", 0, 52);
  for (int k = 0; k < 6; ++k) h = g.lstm(h, w, k < 5);
  g.dense(h, 52, Activation::Linear);
  return g.finish(dropout, seed);
}

Model build_breakage_net(int width, double dropout, std::uint64_t seed) {
  const int w = paper_width(width, 150);
  GraphBuilder g("breakage", 104);
  int h = g.input("shape", 0, 104);
  for (int k = 0; k < 6; ++k) h = g.dense(h, w, Activation::Relu);
  g.dense(h, 1, Activation::Sigmoid);
  return g.finish(dropout, seed);
}

std::vector<std::string> describe(const Model& model) {
  std::vector<std::string> out;
  for (const auto& n : model.nodes) {
    std::string line = n.name + ": ";
    switch (n.kind) {
      case NodeKind::Input: line += "Input-" + std::to_string(n.dim); break;
      case NodeKind::Concat: line += "Merge"; break;
      case NodeKind::Layer: {
        const Layer& l = model.layers[n.layer];
        line += std::string(l.kind == LayerKind::Lstm ? "LSTM(" : "Dense(") + short_name(l.activation) + ")-" +
                std::to_string(l.out_dim);
        if (l.kind == LayerKind::Lstm && !l.returns_sequence) line += " last";
        break;
      }
    }
    if (!n.inputs.empty()) {
      line += " <- ";
      for (std::size_t i = 0; i < n.inputs.size(); ++i) line += (i ? "," : "") + model.nodes[n.inputs[i]].name;
    }
    out.push_back(line);
  }
  return out;
}

// ---------------------------------------------------------------- forward

Mat forward(const Model& model, const Sequence& input, bool train_mode, ForwardCache* cache, std::mt19937_64* rng) {
  if (input.empty()) throw Error(ErrorCode::DimMismatch, "empty input sequence");
  const Eigen::Index batch = input[0].cols();
  for (const auto& x : input)
    if (x.rows() != model.input_dim || x.cols() != batch)
      throw Error(ErrorCode::DimMismatch, "input has " + std::to_string(x.rows()) + " features, model expects " +
                                              std::to_string(model.input_dim));
  const std::size_t n = model.nodes.size();
  const bool dropout = train_mode && model.dropout_rate > 0.0;
  std::mt19937_64 local_rng(model.seed);
  std::mt19937_64& drng = rng ? *rng : local_rng;

  ForwardCache local;
  ForwardCache& fc = cache ? *cache : local;
  fc = ForwardCache{};
  fc.input = input;
  fc.values.assign(n, {});
  fc.pre_dropout.assign(n, {});
  fc.masks.assign(n, {});
  fc.lstm.assign(n, {});

  for (std::size_t k = 0; k < n; ++k) {
    const Node& node = model.nodes[k];
    Sequence out;
    switch (node.kind) {
      case NodeKind::Input:
        for (const auto& x : input) out.push_back(x.middleRows(node.offset, node.dim));
        break;
      case NodeKind::Concat: {
        const std::size_t T = fc.values[node.inputs[0]].size();
        for (int src : node.inputs)
          if (fc.values[src].size() != T) throw Error(ErrorCode::DimMismatch, "merge inputs differ in sequence length");
        for (std::size_t t = 0; t < T; ++t) {
          Eigen::Index rows = 0;
          for (int src : node.inputs) rows += fc.values[src][t].rows();
          Mat m(rows, batch);
          Eigen::Index r = 0;
          for (int src : node.inputs) {
            m.middleRows(r, fc.values[src][t].rows()) = fc.values[src][t];
            r += fc.values[src][t].rows();
          }
          out.push_back(std::move(m));
        }
        break;
      }
      case NodeKind::Layer: {
        const Layer& l = model.layers[node.layer];
        const Sequence& in = fc.values[node.inputs[0]];
        if (l.kind == LayerKind::Dense) {
          for (const auto& x : in) out.push_back(apply(l.activation, (l.W * x).colwise() + l.b.col(0)));
        } else {
          const int H = l.out_dim;
          const std::size_t T = in.size();
          const Mat wx = l.W * hcat(in);
          LstmTrace& tr = fc.lstm[k];
          Mat h = Mat::Zero(H, batch), c = Mat::Zero(H, batch);
          for (std::size_t t = 0; t < T; ++t) {
            Mat z = wx.middleCols(static_cast<Eigen::Index>(t) * batch, batch) + l.U * h;
            z.colwise() += l.b.col(0);
            Mat gates(4 * H, batch);
            gates.topRows(2 * H) = sigmoid(z.topRows(2 * H));
            gates.middleRows(2 * H, H) = z.middleRows(2 * H, H).array().tanh().matrix();
            gates.bottomRows(H) = sigmoid(z.bottomRows(H));
            c = gates.middleRows(H, H).cwiseProduct(c) + gates.topRows(H).cwiseProduct(gates.middleRows(2 * H, H));
            h = gates.bottomRows(H).cwiseProduct(apply(l.activation, c));
            tr.gates.push_back(std::move(gates));
            tr.cells.push_back(c);
            tr.hidden.push_back(h);
          }
          if (l.returns_sequence) out = tr.hidden;
          else out.push_back(tr.hidden.back());
        }
        fc.pre_dropout[k] = out;
        if (dropout && k + 1 < n) {
          const double keep = 1.0 - model.dropout_rate;
          for (auto& v : out) {
            Mat mask(v.rows(), v.cols());
            for (Eigen::Index j = 0; j < mask.cols(); ++j)
              for (Eigen::Index i = 0; i < mask.rows(); ++i)
                mask(i, j) = uniform01(drng) >= model.dropout_rate ? 1.0 / keep : 0.0;
            v = v.cwiseProduct(mask);
            fc.masks[k].push_back(std::move(mask));
          }
        }
        break;
      }
    }
    fc.values[k] = std::move(out);
  }
  fc.valid = true;
  return fc.values.back().back();
}

std::vector<Mat*> parameters(Model& model) {
  std::vector<Mat*> p;
  for (auto& l : model.layers) {
    p.push_back(&l.W);
    if (l.kind == LayerKind::Lstm) p.push_back(&l.U);
    p.push_back(&l.b);
  }
  return p;
}

std::vector<const Mat*> parameters(const Model& model) {
  std::vector<const Mat*> p;
  for (const auto& l : model.layers) {
    p.push_back(&l.W);
    if (l.kind == LayerKind::Lstm) p.push_back(&l.U);
    p.push_back(&l.b);
  }
  return p;
}

std::vector<Mat> zero_gradients(const Model& model) {
  std::vector<Mat> g;
  for (const Mat* p : parameters(model)) g.push_back(Mat::Zero(p->rows(), p->cols()));
  return g;
}

// ---------------------------------------------------------------- backward

std::vector<Mat> backward(const Model& model, const ForwardCache& cache, const Mat& output_grad) {
  if (!cache.valid) throw Error(ErrorCode::MissingCache, "backward called without a forward cache");
  const std::size_t n = model.nodes.size();
  if (cache.values.size() != n) throw Error(ErrorCode::MissingCache, "forward cache belongs to a different model");
  const Mat& out = cache.values.back().back();
  if (output_grad.rows() != out.rows() || output_grad.cols() != out.cols())
    throw Error(ErrorCode::DimMismatch, "output gradient shape mismatch");

  // Offsets of each layer's tensors in the parameters() order.
  std::vector<int> first_param(model.layers.size());
  {
    int idx = 0;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      first_param[i] = idx;
      idx += model.layers[i].kind == LayerKind::Lstm ? 3 : 2;
    }
  }
  std::vector<Mat> grads = zero_gradients(model);
  std::vector<Sequence> d(n);

  auto accumulate = [&](int node, std::size_t t, const Mat& g) {
    Sequence& dn = d[node];
    if (dn.empty()) {
      for (const auto& v : cache.values[node]) dn.push_back(Mat::Zero(v.rows(), v.cols()));
    }
    dn[t] += g;
  };
  accumulate(static_cast<int>(n) - 1, cache.values.back().size() - 1, output_grad);

  for (std::size_t kk = n; kk-- > 0;) {
    if (d[kk].empty()) continue;
    const Node& node = model.nodes[kk];
    if (node.kind == NodeKind::Input) continue;
    if (node.kind == NodeKind::Concat) {
      for (std::size_t t = 0; t < d[kk].size(); ++t) {
        Eigen::Index r = 0;
        for (int src : node.inputs) {
          const Eigen::Index rows = cache.values[src][t].rows();
          accumulate(src, t, d[kk][t].middleRows(r, rows));
          r += rows;
        }
      }
      continue;
    }
    const Layer& l = model.layers[node.layer];
    const int src = node.inputs[0];
    const Sequence& in = cache.values[src];
    Sequence dy = d[kk];
    if (!cache.masks[kk].empty())
      for (std::size_t t = 0; t < dy.size(); ++t) dy[t] = dy[t].cwiseProduct(cache.masks[kk][t]);
    const int p0 = first_param[node.layer];

    if (l.kind == LayerKind::Dense) {
      Mat& gW = grads[p0];
      Mat& gb = grads[p0 + 1];
      for (std::size_t t = 0; t < dy.size(); ++t) {
        const Mat dz = dy[t].cwiseProduct(derivative_from_output(l.activation, cache.pre_dropout[kk][t]));
        gW.noalias() += dz * in[t].transpose();
        gb += dz.rowwise().sum();
        accumulate(src, t, l.W.transpose() * dz);
      }
      continue;
    }

    const int H = l.out_dim;
    const LstmTrace& tr = cache.lstm[kk];
    const std::size_t T = tr.hidden.size();
    const Eigen::Index B = tr.hidden[0].cols();
    Mat dZ(4 * H, static_cast<Eigen::Index>(T) * B);
    Mat dh_next = Mat::Zero(H, B), dc_next = Mat::Zero(H, B);
    Mat& gW = grads[p0];
    Mat& gU = grads[p0 + 1];
    Mat& gb = grads[p0 + 2];
    for (std::size_t t = T; t-- > 0;) {
      Mat dh = dh_next;
      if (l.returns_sequence) dh += dy[t];
      else if (t == T - 1) dh += dy[0];
      const Mat& gates = tr.gates[t];
      const auto i = gates.topRows(H).array();
      const auto f = gates.middleRows(H, H).array();
      const auto g = gates.middleRows(2 * H, H).array();
      const auto o = gates.bottomRows(H).array();
      const Mat& c = tr.cells[t];
      const Mat c_prev = t > 0 ? tr.cells[t - 1] : Mat::Zero(H, B);
      const Mat a = apply(l.activation, c);
      Mat dadc;
      switch (l.activation) {
        case Activation::Linear: dadc = Mat::Ones(H, B); break;
        case Activation::Tanh: dadc = (1.0 - a.array().square()).matrix(); break;
        case Activation::Relu: dadc = (c.array() > 0.0).cast<double>().matrix(); break;
        case Activation::Sigmoid: dadc = (a.array() * (1.0 - a.array())).matrix(); break;
      }
      const Eigen::ArrayXXd dc = dh.array() * o * dadc.array() + dc_next.array();
      auto block = dZ.middleCols(static_cast<Eigen::Index>(t) * B, B);
      block.topRows(H) = (dc * g * i * (1.0 - i)).matrix();
      block.middleRows(H, H) = (dc * c_prev.array() * f * (1.0 - f)).matrix();
      block.middleRows(2 * H, H) = (dc * i * (1.0 - g.square())).matrix();
      block.bottomRows(H) = (dh.array() * a.array() * o * (1.0 - o)).matrix();
      dc_next = (dc * f).matrix();
      dh_next.noalias() = l.U.transpose() * block;
      if (t > 0) gU.noalias() += block * tr.hidden[t - 1].transpose();
    }
    gb += dZ.rowwise().sum();
    gW.noalias() += dZ * hcat(in).transpose();
    const Mat dX = l.W.transpose() * dZ;
    for (std::size_t t = 0; t < T; ++t) accumulate(src, t, dX.middleCols(static_cast<Eigen::Index>(t) * B, B));
  }
  return grads;
}

// ---------------------------------------------------------------- losses

double loss_value(Loss loss, const Mat& output, const Mat& target, Mat* grad) {
  if (output.rows() != target.rows() || output.cols() != target.cols())
    throw Error(ErrorCode::DimMismatch, "loss: output and target shapes differ");
  const double count = static_cast<double>(output.size());
  if (loss == Loss::Mse) {
    const Mat diff = output - target;
    if (grad) *grad = diff * (2.0 / count);
    return diff.squaredNorm() / count;
  }
  const Mat y = output.cwiseMax(1e-7).cwiseMin(1.0 - 1e-7);
  const Eigen::ArrayXXd ya = y.array(), ta = target.array();
  const double l = -(ta * ya.log() + (1.0 - ta) * (1.0 - ya).log()).sum() / count;
  if (grad) *grad = ((ya - ta) / (ya * (1.0 - ya)) / count).matrix();
  return l;
}

// ---------------------------------------------------------------- optimizers

namespace {

void check_shapes(const std::vector<Mat*>& params, const std::vector<Mat>& grads) {
  if (params.size() != grads.size()) throw Error(ErrorCode::ShapeMismatch, "parameter and gradient counts differ");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->rows() != grads[i].rows() || params[i]->cols() != grads[i].cols())
      throw Error(ErrorCode::ShapeMismatch, "parameter and gradient shapes differ");
}

template <typename State>
void ensure_state(std::vector<Mat>& slot, const std::vector<Mat*>& params) {
  if (slot.empty())
    for (const Mat* p : params) slot.push_back(Mat::Zero(p->rows(), p->cols()));
  if (slot.size() != params.size()) throw Error(ErrorCode::ShapeMismatch, "optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (slot[i].rows() != params[i]->rows() || slot[i].cols() != params[i]->cols())
      throw Error(ErrorCode::ShapeMismatch, "optimizer state does not match parameters");
}

}  // namespace

void sgd_nesterov_step(const std::vector<Mat*>& params, const std::vector<Mat>& grads, NesterovState& state, double lr,
                       double momentum) {
  check_shapes(params, grads);
  ensure_state<NesterovState>(state.velocity, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& v = state.velocity[i];
    v = momentum * v - lr * grads[i];
    *params[i] += momentum * v - lr * grads[i];
  }
}

void adam_step(const std::vector<Mat*>& params, const std::vector<Mat>& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  check_shapes(params, grads);
  ensure_state<AdamState>(state.m, params);
  ensure_state<AdamState>(state.v, params);
  ++state.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i].cwiseProduct(grads[i]);
    const Eigen::ArrayXXd mhat = state.m[i].array() / c1;
    const Eigen::ArrayXXd vhat = state.v[i].array() / c2;
    *params[i] -= (lr * mhat / (vhat.sqrt() + eps)).matrix();
  }
}

// ---------------------------------------------------------------- training

void TrainConfig::validate() const {
  if (epochs < 0) throw Error(ErrorCode::InvalidArgument, "epochs must be >= 0");
  if (batch_size < 1) throw Error(ErrorCode::InvalidArgument, "batch size must be >= 1");
  if (!(lr >= 0 && std::isfinite(lr))) throw Error(ErrorCode::InvalidArgument, "learning rate must be >= 0");
  if (!(lr_decay >= 0)) throw Error(ErrorCode::InvalidArgument, "learning rate decay must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw Error(ErrorCode::InvalidArgument, "momentum must be in [0,1)");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0))
    throw Error(ErrorCode::InvalidArgument, "invalid Adam hyperparameters");
}

TrainData TrainData::subset(const std::vector<int>& cols) const {
  TrainData out;
  for (const auto& x : inputs) out.inputs.push_back(x(Eigen::all, cols));
  out.targets = targets(Eigen::all, cols);
  return out;
}

TrainResult train(Model& model, const TrainData& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  model.validate();
  if (data.inputs.empty() || data.size() == 0) throw Error(ErrorCode::EmptyDataset, "training set is empty");
  for (const auto& x : data.inputs)
    if (x.rows() != model.input_dim || x.cols() != data.size())
      throw Error(ErrorCode::DimMismatch, "training inputs do not match the model input width");
  if (data.targets.rows() != model.output_dim())
    throw Error(ErrorCode::DimMismatch, "training targets do not match the model output width");

  const int N = data.size();
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
  const std::vector<Mat*> params = parameters(model);
  NesterovState nesterov;
  AdamState adam;
  TrainResult result;
  std::vector<int> order(N);
  long long iteration = 0;
  ForwardCache cache;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (int i = N - 1; i > 0; --i) {
      const int j = static_cast<int>(uniform01(shuffle_rng) * (i + 1));
      std::swap(order[i], order[std::min(j, i)]);
    }
    double total = 0.0;
    int batch_index = 0;
    for (int start = 0; start < N; start += cfg.batch_size, ++batch_index) {
      const int end = std::min(N, start + cfg.batch_size);
      const std::vector<int> cols(order.begin() + start, order.begin() + end);
      Sequence x;
      for (const auto& in : data.inputs) x.push_back(in(Eigen::all, cols));
      const Mat target = data.targets(Eigen::all, cols);
      const Mat y = forward(model, x, true, &cache, &dropout_rng);
      Mat g;
      const double l = loss_value(cfg.loss, y, target, &g);
      if (!std::isfinite(l))
        throw Error(ErrorCode::NonFiniteLoss, "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                                  std::to_string(batch_index));
      const std::vector<Mat> grads = backward(model, cache, g);
      const double lr = decayed_lr(cfg.lr, cfg.lr_decay, iteration);
      if (cfg.optimizer == Optimizer::Adam) adam_step(params, grads, adam, lr, cfg.beta1, cfg.beta2, cfg.eps);
      else sgd_nesterov_step(params, grads, nesterov, lr, cfg.momentum);
      ++iteration;
      total += l * (end - start);
    }
    result.epoch_loss.push_back(total / N);
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back());
  }
  return result;
}

double evaluate(const Model& model, const TrainData& data, Loss loss) {
  if (data.size() == 0) throw Error(ErrorCode::EmptyDataset, "evaluation set is empty");
  return loss_value(loss, forward(model, data.inputs, false), data.targets);
}

void write_loss_csv(const std::string& path, const std::vector<double>& epoch_loss) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path);
  os << "epoch,loss\n";
  for (std::size_t e = 0; e < epoch_loss.size(); ++e) os << e << ',' << format_double(epoch_loss[e]) << '\n';
  if (!os) throw Error(ErrorCode::IoError, "write failed: " + path);
}

// ---------------------------------------------------------------- undersampling

std::vector<int> near_miss_undersample(const Mat& samples, const std::vector<int>& labels, double ratio) {
  if (static_cast<Eigen::Index>(labels.size()) != samples.rows())
    throw Error(ErrorCode::DimMismatch, "one label per sample row required");
  if (!(ratio > 0)) throw Error(ErrorCode::InvalidArgument, "ratio must be > 0");
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(static_cast<int>(i));
  if (pos.empty()) throw Error(ErrorCode::NoPositives, "near-miss undersampling needs at least one positive");
  const std::size_t want = std::min(neg.size(), static_cast<std::size_t>(std::llround(ratio * pos.size())));
  const std::size_t k = std::min<std::size_t>(3, pos.size());

  std::vector<std::pair<double, int>> score;
  for (int ni : neg) {
    std::vector<double> dist;
    for (int pi : pos) {
      double s = 0;
      for (Eigen::Index k = 0; k < samples.cols(); ++k) {
        const double d = samples(ni, k) - samples(pi, k);
        s += d * d;
      }
      dist.push_back(std::sqrt(s));
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    double mean = 0;
    for (std::size_t j = 0; j < k; ++j) mean += dist[j];
    score.emplace_back(mean / static_cast<double>(k), ni);
  }
  std::sort(score.begin(), score.end());
  std::vector<int> kept = pos;
  for (std::size_t j = 0; j < want; ++j) kept.push_back(score[j].second);
  std::sort(kept.begin(), kept.end());
  return kept;
}

// ---------------------------------------------------------------- persistence

namespace {

constexpr const char* kModelFormat = "nd-model v1";

void append_number(std::string& out, double v) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  out.append(buf, static_cast<std::size_t>(n));
}

void append_matrix(std::string& out, const Mat& m) {
  out += '[';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out += i ? ",[" : "[";
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out += ',';
      append_number(out, m(i, j));
    }
    out += ']';
  }
  out += ']';
}

void append_vector(std::string& out, const Mat& v) {
  out += '[';
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    append_number(out, v(i));
  }
  out += ']';
}

std::string quoted(const std::string& s) { return nlohmann::json(s).dump(); }

Mat read_matrix(const nlohmann::json& j, int rows, int cols) {
  if (!j.is_array() || static_cast<int>(j.size()) != rows) throw Error(ErrorCode::CorruptFile, "weight matrix row count");
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    const auto& r = j[i];
    if (!r.is_array() || static_cast<int>(r.size()) != cols) throw Error(ErrorCode::CorruptFile, "weight matrix column count");
    for (int c = 0; c < cols; ++c) m(i, c) = r[c].get<double>();
  }
  return m;
}

Activation activation_from(const std::string& s) {
  if (s == "linear") return Activation::Linear;
  if (s == "relu") return Activation::Relu;
  if (s == "sigmoid") return Activation::Sigmoid;
  if (s == "tanh") return Activation::Tanh;
  throw Error(ErrorCode::CorruptFile, "unknown activation '" + s + "'");
}

}  // namespace

std::string model_to_json(const Model& model) {
  std::string out;
  out.reserve(model.parameter_count() * 24 + 4096);
  out += "{\"format\":" + quoted(kModelFormat);
  out += ",\"net\":" + quoted(model.net);
  out += ",\"input_dim\":" + std::to_string(model.input_dim);
  out += ",\"dropout_rate\":";
  append_number(out, model.dropout_rate);
  out += ",\"seed\":" + std::to_string(model.seed);
  out += ",\"feature_scale\":";
  append_number(out, model.feature_scale);
  out += ",\n\"nodes\":[";
  for (std::size_t k = 0; k < model.nodes.size(); ++k) {
    const Node& n = model.nodes[k];
    if (k) out += ',';
    out += "\n{\"name\":" + quoted(n.name) + ",\"kind\":";
    out += n.kind == NodeKind::Input ? "\"input\"" : n.kind == NodeKind::Concat ? "\"merge\"" : "\"layer\"";
    out += ",\"inputs\":[";
    for (std::size_t i = 0; i < n.inputs.size(); ++i) out += (i ? "," : "") + std::to_string(n.inputs[i]);
    out += "],\"layer\":" + std::to_string(n.layer) + ",\"offset\":" + std::to_string(n.offset) +
           ",\"dim\":" + std::to_string(n.dim) + "}";
  }
  out += "],\n\"layers\":[";
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    const Layer& l = model.layers[k];
    if (k) out += ',';
    out += "\n{\"kind\":" + quoted(to_string(l.kind)) + ",\"in_dim\":" + std::to_string(l.in_dim) +
           ",\"out_dim\":" + std::to_string(l.out_dim) + ",\"activation\":" + quoted(to_string(l.activation)) +
           ",\"returns_sequence\":" + (l.returns_sequence ? "true" : "false") + ",\n\"W\":";
    append_matrix(out, l.W);
    if (l.kind == LayerKind::Lstm) {
      out += ",\n\"U\":";
      append_matrix(out, l.U);
    }
    out += ",\n\"b\":";
    append_vector(out, l.b);
    out += '}';
  }
  out += "]}\n";
  return out;
}

Model model_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw Error(ErrorCode::CorruptFile, std::string("model file is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("format")) throw Error(ErrorCode::CorruptFile, "model file has no format header");
  if (j["format"] != kModelFormat)
    throw Error(ErrorCode::VersionMismatch, "expected model format '" + std::string(kModelFormat) + "'");
  Model m;
  try {
    m.net = j.at("net").get<std::string>();
    m.input_dim = j.at("input_dim").get<int>();
    m.dropout_rate = j.at("dropout_rate").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.feature_scale = j.at("feature_scale").get<double>();
    for (const auto& jn : j.at("nodes")) {
      Node n;
      n.name = jn.at("name").get<std::string>();
      const std::string kind = jn.at("kind").get<std::string>();
      n.kind = kind == "input" ? NodeKind::Input : kind == "merge" ? NodeKind::Concat : NodeKind::Layer;
      if (kind != "input" && kind != "merge" && kind != "layer") throw Error(ErrorCode::CorruptFile, "unknown node kind");
      n.inputs = jn.at("inputs").get<std::vector<int>>();
      n.layer = jn.at("layer").get<int>();
      n.offset = jn.at("offset").get<int>();
      n.dim = jn.at("dim").get<int>();
      m.nodes.push_back(n);
    }
    for (const auto& jl : j.at("layers")) {
      Layer l;
      const std::string kind = jl.at("kind").get<std::string>();
      if (kind != "dense" && kind != "lstm") throw Error(ErrorCode::CorruptFile, "unknown layer kind");
      l.kind = kind == "lstm" ? LayerKind::Lstm : LayerKind::Dense;
      l.in_dim = jl.at("in_dim").get<int>();
      l.out_dim = jl.at("out_dim").get<int>();
      l.activation = activation_from(jl.at("activation").get<std::string>());
      l.returns_sequence = jl.at("returns_sequence").get<bool>();
      const int rows = l.kind == LayerKind::Lstm ? 4 * l.out_dim : l.out_dim;
      l.W = read_matrix(jl.at("W"), rows, l.in_dim);
      if (l.kind == LayerKind::Lstm) l.U = read_matrix(jl.at("U"), rows, l.out_dim);
      const auto& jb = jl.at("b");
      if (!jb.is_array() || static_cast<int>(jb.size()) != rows) throw Error(ErrorCode::CorruptFile, "bias length");
      l.b.resize(rows, 1);
      for (int i = 0; i < rows; ++i) l.b(i) = jb[i].get<double>();
      m.layers.push_back(std::move(l));
    }
    m.validate();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CorruptFile) throw;
    throw Error(ErrorCode::CorruptFile, std::string("inconsistent model file: ") + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorCode::CorruptFile, std::string("bad model file: ") + e.what());
  }
  return m;
}

void save_model(const std::string& path, const Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path);
  const std::string text = model_to_json(model);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw Error(ErrorCode::IoError, "write failed: " + path);
}

Model load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return model_from_json(ss.str());
}

}  // namespace nd::nn
