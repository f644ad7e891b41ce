#include "driftlab/net.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

namespace driftlab {

namespace {

void conv_forward(const Conv2dLayer& l, const Matrix& in, Matrix& out) {
  const int oh = l.out_h(), ow = l.out_w();
  out.setZero(in.rows(), l.out_size());
  for (Eigen::Index n = 0; n < in.rows(); ++n) {
    const float* x = in.row(n).data();
    float* y = out.row(n).data();
    for (int oc = 0; oc < l.out_c; ++oc) {
      const float* k = l.kernel.row(oc).data();
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = l.bias[oc];
          for (int ic = 0; ic < l.in_c; ++ic) {
            for (int ky = 0; ky < l.kh; ++ky) {
              const float* xr = x + (ic * l.in_h + oy + ky) * l.in_w + ox;
              const float* kr = k + (ic * l.kh + ky) * l.kw;
              for (int kx = 0; kx < l.kw; ++kx) acc += double(xr[kx]) * double(kr[kx]);
            }
          }
          y[(oc * oh + oy) * ow + ox] = static_cast<float>(acc);
        }
      }
    }
  }
}

void conv_backward(const Conv2dLayer& l, const Matrix& in, const Matrix& dout, Matrix& din,
                   GradientSet::LayerGrad* g) {
  const int oh = l.out_h(), ow = l.out_w();
  din.setZero(in.rows(), in.cols());
  if (g) {
    g->weight.setZero(l.kernel.rows(), l.kernel.cols());
    g->bias.setZero(l.bias.size());
  }
  for (Eigen::Index n = 0; n < in.rows(); ++n) {
    const float* x = in.row(n).data();
    const float* dy = dout.row(n).data();
    float* dx = din.row(n).data();
    for (int oc = 0; oc < l.out_c; ++oc) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const float go = dy[(oc * oh + oy) * ow + ox];
          if (g) g->bias[oc] += go;
          for (int ic = 0; ic < l.in_c; ++ic) {
            for (int ky = 0; ky < l.kh; ++ky) {
              const int xoff = (ic * l.in_h + oy + ky) * l.in_w + ox;
              const int koff = (ic * l.kh + ky) * l.kw;
              for (int kx = 0; kx < l.kw; ++kx) {
                dx[xoff + kx] += go * l.kernel(oc, koff + kx);
                if (g) g->weight(oc, koff + kx) += go * x[xoff + kx];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

int NetworkConfig::flat_input_dim() const {
  int d = 1;
  for (int s : input_shape) d *= s;
  return d;
}

bool GradientSet::finite() const {
  for (const auto& g : layers) {
    if (g.weight.size() && !g.weight.allFinite()) return false;
    if (g.bias.size() && !g.bias.allFinite()) return false;
  }
  if (head.size() && !head.allFinite()) return false;
  return true;
}

Network Network::create(const NetworkConfig& cfg, uint64_t seed) {
  if (cfg.input_shape.empty()) throw std::invalid_argument("network: empty input shape");
  if (cfg.feature_dim <= 0) throw std::invalid_argument("network: feature_dim must be positive");
  Network net;
  net.cfg_ = cfg;
  std::mt19937_64 rng(seed);
  auto init_dense = [&rng](int out, int in) {
    DenseLayer l;
    const float s = std::sqrt(6.0f / static_cast<float>(in));
    std::uniform_real_distribution<float> w(-s, s);
    std::uniform_real_distribution<float> b(-0.1f, 0.1f);
    l.weight.resize(out, in);
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = w(rng);
    l.bias.resize(out);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = b(rng);
    return l;
  };

  int cur = cfg.flat_input_dim();
  if (cfg.conv_front) {
    if (cfg.input_shape.size() != 3)
      throw std::invalid_argument("network: conv front requires a (c,h,w) input shape");
    Conv2dLayer c;
    c.in_c = cfg.input_shape[0];
    c.in_h = cfg.input_shape[1];
    c.in_w = cfg.input_shape[2];
    c.out_c = cfg.conv_channels;
    c.kh = c.kw = cfg.conv_kernel;
    if (c.out_h() <= 0 || c.out_w() <= 0)
      throw std::invalid_argument("network: conv kernel larger than input");
    const int fan_in = c.in_c * c.kh * c.kw;
    const float s = std::sqrt(6.0f / static_cast<float>(fan_in));
    std::uniform_real_distribution<float> w(-s, s);
    std::uniform_real_distribution<float> b(-0.1f, 0.1f);
    c.kernel.resize(c.out_c, fan_in);
    for (Eigen::Index i = 0; i < c.kernel.rows(); ++i)
      for (Eigen::Index j = 0; j < c.kernel.cols(); ++j) c.kernel(i, j) = w(rng);
    c.bias.resize(c.out_c);
    for (Eigen::Index i = 0; i < c.bias.size(); ++i) c.bias[i] = b(rng);
    cur = c.out_size();
    net.layers_.push_back(std::move(c));
    net.layers_.push_back(ReluLayer{});
  }
  for (int h : cfg.hidden_dims) {
    net.layers_.push_back(init_dense(h, cur));
    net.layers_.push_back(ReluLayer{});
    cur = h;
  }
  net.layers_.push_back(init_dense(cfg.feature_dim, cur));  // linear feature tail
  net.head_.resize(0, cfg.feature_dim);
  return net;
}

void Network::grow_head(int n_new) {
  if (n_new < 0) throw std::invalid_argument("grow_head: negative class count");
  Matrix grown(head_.rows() + n_new, cfg_.feature_dim);
  if (head_.rows() > 0) grown.topRows(head_.rows()) = head_;
  grown.bottomRows(n_new).setZero();
  head_ = std::move(grown);
}

void Network::check_input(const Matrix& batch) const {
  if (batch.cols() != cfg_.flat_input_dim()) {
    throw std::invalid_argument("network: input has " + std::to_string(batch.cols()) +
                                " features, expected " + std::to_string(cfg_.flat_input_dim()));
  }
}

ForwardTrace Network::forward_trace(const Matrix& batch) const {
  check_input(batch);
  ForwardTrace t;
  t.acts.reserve(layers_.size() + 1);
  t.acts.push_back(batch);
  for (const Layer& layer : layers_) {
    const Matrix& x = t.acts.back();
    Matrix y;
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      y.noalias() = x * d->weight.transpose();
      y.rowwise() += d->bias.transpose();
    } else if (std::get_if<ReluLayer>(&layer)) {
      y = x.cwiseMax(0.0f);
    } else {
      conv_forward(std::get<Conv2dLayer>(layer), x, y);
    }
    t.acts.push_back(std::move(y));
  }
  if (!t.acts.back().allFinite()) throw std::runtime_error("network: non-finite features");
  return t;
}

Matrix Network::forward_features(const Matrix& batch) const {
  return forward_trace(batch).acts.back();
}

Matrix Network::forward_logits(const Matrix& batch) const {
  if (head_.rows() == 0) throw std::runtime_error("network: classifier head not initialized");
  Matrix logits = forward_features(batch) * head_.transpose();
  if (!logits.allFinite()) throw std::runtime_error("network: non-finite logits");
  return logits;
}

Matrix Network::backward(const ForwardTrace& trace, const Matrix& dfeatures,
                         GradientSet* grads) const {
  if (trace.acts.size() != layers_.size() + 1)
    throw std::invalid_argument("backward: trace does not match network");
  if (grads) grads->layers.assign(layers_.size(), {});
  Matrix g = dfeatures;
  for (size_t i = layers_.size(); i-- > 0;) {
    const Matrix& x = trace.acts[i];
    if (const auto* d = std::get_if<DenseLayer>(&layers_[i])) {
      if (grads) {
        auto& lg = grads->layers[i];
        lg.weight.noalias() = g.transpose() * x;
        lg.bias = g.colwise().sum().transpose();
      }
      g = (g * d->weight).eval();
    } else if (std::get_if<ReluLayer>(&layers_[i])) {
      // subgradient at 0 fixed to 0
      g = (x.array() > 0.0f).select(g, Matrix::Zero(g.rows(), g.cols()));
    } else {
      Matrix din;
      conv_backward(std::get<Conv2dLayer>(layers_[i]), x, g,
                    din, grads ? &grads->layers[i] : nullptr);
      g = std::move(din);
    }
  }
  return g;
}

Matrix input_gradient(const Network& net, const Matrix& batch, const ObjectiveSpec& objective) {
  if (objective.prototype.size() != net.feature_dim())
    throw std::invalid_argument("input_gradient: prototype dim " +
                                std::to_string(objective.prototype.size()) + " != feature dim " +
                                std::to_string(net.feature_dim()));
  const ForwardTrace trace = net.forward_trace(batch);
  const float inv_n = 1.0f / static_cast<float>(batch.rows());
  Matrix dfeat = trace.features();
  dfeat.rowwise() -= objective.prototype.transpose();
  dfeat *= 2.0f * inv_n;
  Matrix g = net.backward(trace, dfeat, nullptr);
  if (!g.allFinite()) throw std::runtime_error("input_gradient: non-finite gradient");
  return g;
}

LossBreakdown loss_with_gradients(const Network& net, const Matrix& batch,
                                  const std::vector<int>& labels, const LossSpec& loss,
                                  GradientSet* grads) {
  if (static_cast<Eigen::Index>(labels.size()) != batch.rows())
    throw std::invalid_argument("loss: labels/batch size mismatch");
  if (net.num_classes() == 0) throw std::runtime_error("loss: classifier head not initialized");
  const int num_classes = net.num_classes();
  for (int y : labels) {
    if (y < 0 || y >= num_classes)
      throw std::invalid_argument("loss: label " + std::to_string(y) + " outside head range [0," +
                                  std::to_string(num_classes) + ")");
  }
  const ForwardTrace trace = net.forward_trace(batch);
  const Matrix& feats = trace.features();
  const Matrix logits = feats * net.head().transpose();
  const Eigen::Index n = batch.rows();
  const float inv_n = 1.0f / static_cast<float>(n);

  LossBreakdown out;
  Matrix dlogits = softmax_rows(logits);
  {
    const auto logp = log_softmax_rows_f64(logits);
    double ce = 0.0;
    for (Eigen::Index r = 0; r < n; ++r) ce -= logp(r, labels[r]);
    out.ce = ce / static_cast<double>(n);
    for (Eigen::Index r = 0; r < n; ++r) dlogits(r, labels[r]) -= 1.0f;
    dlogits *= inv_n;
  }

  if (loss.lambda > 0.0 && loss.teacher_logits) {
    const Matrix& tl = *loss.teacher_logits;
    if (tl.rows() != n || tl.cols() > logits.cols())
      throw std::invalid_argument("loss: teacher logits shape mismatch");
    const Eigen::Index c_old = tl.cols();
    const float inv_t = 1.0f / static_cast<float>(loss.temperature);
    const Matrix q = softmax_rows(tl * inv_t);
    const Matrix student_old = logits.leftCols(c_old);
    const Matrix p = softmax_rows(student_old * inv_t);
    const auto logp = log_softmax_rows_f64(student_old * inv_t);
    double kd = 0.0;
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 0; c < c_old; ++c) kd -= double(q(r, c)) * logp(r, c);
    out.distill = kd / static_cast<double>(n);
    dlogits.leftCols(c_old) +=
        (p - q) * (static_cast<float>(loss.lambda) * inv_t * inv_n);
  } else if (loss.lambda > 0.0) {
    throw std::invalid_argument("loss: lambda > 0 requires teacher logits");
  }

  out.total = out.ce + loss.lambda * out.distill;
  if (!std::isfinite(out.total)) throw std::runtime_error("loss: non-finite value");

  if (grads) {
    grads->head.noalias() = dlogits.transpose() * feats;
    const Matrix dfeat = dlogits * net.head();
    net.backward(trace, dfeat, grads);
  }
  return out;
}

GradientSet param_gradient(const Network& net, const Matrix& batch, const std::vector<int>& labels,
                           const LossSpec& loss) {
  GradientSet grads;
  loss_with_gradients(net, batch, labels, loss, &grads);
  return grads;
}

SgdState::SgdState(const Network& net) {
  vel_.reserve(net.layers().size());
  for (const Layer& layer : net.layers()) {
    GradientSet::LayerGrad v;
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      v.weight = Matrix::Zero(d->weight.rows(), d->weight.cols());
      v.bias = Vector::Zero(d->bias.size());
    } else if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
      v.weight = Matrix::Zero(c->kernel.rows(), c->kernel.cols());
      v.bias = Vector::Zero(c->bias.size());
    }
    vel_.push_back(std::move(v));
  }
  vel_head_ = Matrix::Zero(net.head().rows(), net.head().cols());
}

void SgdState::step(Network& net, const GradientSet& grads, const SgdHyper& hp) {
  if (hp.lr <= 0.0f) throw std::invalid_argument("sgd: lr must be positive");
  if (hp.momentum < 0.0f || hp.momentum >= 1.0f)
    throw std::invalid_argument("sgd: momentum must be in [0,1)");
  if (hp.weight_decay < 0.0f) throw std::invalid_argument("sgd: negative weight decay");
  if (!grads.finite()) throw std::runtime_error("sgd: non-finite gradient");
  if (grads.layers.size() != net.layers().size())
    throw std::invalid_argument("sgd: gradient/network mismatch");

  auto update = [&hp](Matrix& param, Matrix& vel, const Matrix& g) {
    Matrix eff = g;
    if (hp.weight_decay > 0.0f) eff += hp.weight_decay * param;
    vel = hp.momentum * vel + eff;
    param -= hp.lr * vel;
  };
  auto update_vec = [&hp](Vector& param, Vector& vel, const Vector& g) {
    Vector eff = g;
    if (hp.weight_decay > 0.0f) eff += hp.weight_decay * param;
    vel = hp.momentum * vel + eff;
    param -= hp.lr * vel;
  };

  for (size_t i = 0; i < net.layers().size(); ++i) {
    const auto& g = grads.layers[i];
    if (auto* d = std::get_if<DenseLayer>(&net.layers()[i])) {
      if (!g.weight.size()) continue;
      update(d->weight, vel_[i].weight, g.weight);
      update_vec(d->bias, vel_[i].bias, g.bias);
    } else if (auto* c = std::get_if<Conv2dLayer>(&net.layers()[i])) {
      if (!g.weight.size()) continue;
      update(c->kernel, vel_[i].weight, g.weight);
      update_vec(c->bias, vel_[i].bias, g.bias);
    }
  }
  if (grads.head.size()) {
    if (vel_head_.rows() != net.head().rows()) {
      // head grown since state construction: extend velocity with zeros
      Matrix grown = Matrix::Zero(net.head().rows(), net.head().cols());
      grown.topRows(vel_head_.rows()) = vel_head_;
      vel_head_ = std::move(grown);
    }
    update(net.head(), vel_head_, grads.head);
  }
}

uint64_t weights_hash(const Network& net) {
  uint64_t h = 1469598103934665603ull;
  for (const Layer& layer : net.layers()) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      h = hash_bytes(d->weight, h);
      h = hash_bytes(d->bias, h);
    } else if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
      h = hash_bytes(c->kernel, h);
      h = hash_bytes(c->bias, h);
    }
  }
  h = hash_bytes(net.head(), h);
  return h;
}

namespace {

constexpr uint32_t kCheckpointMagic = 0x444c4e31;  // "DLN1"

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_i32(std::ostream& os, int32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
uint32_t read_u32(std::istream& is) {
  uint32_t v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
int32_t read_i32(std::istream& is) {
  int32_t v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
void write_mat(std::ostream& os, const Matrix& m) {
  write_i32(os, static_cast<int32_t>(m.rows()));
  write_i32(os, static_cast<int32_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()), sizeof(float) * m.size());
}
Matrix read_mat(std::istream& is) {
  const int32_t r = read_i32(is), c = read_i32(is);
  Matrix m(r, c);
  is.read(reinterpret_cast<char*>(m.data()), sizeof(float) * m.size());
  return m;
}
void write_vec(std::ostream& os, const Vector& v) {
  write_i32(os, static_cast<int32_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()), sizeof(float) * v.size());
}
Vector read_vec(std::istream& is) {
  const int32_t n = read_i32(is);
  Vector v(n);
  is.read(reinterpret_cast<char*>(v.data()), sizeof(float) * v.size());
  return v;
}

}  // namespace

void save_network(const Network& net, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_network: cannot open " + path.string());
  write_u32(os, kCheckpointMagic);
  const auto& cfg = net.config();
  write_i32(os, static_cast<int32_t>(cfg.input_shape.size()));
  for (int s : cfg.input_shape) write_i32(os, s);
  write_i32(os, static_cast<int32_t>(cfg.hidden_dims.size()));
  for (int h : cfg.hidden_dims) write_i32(os, h);
  write_i32(os, cfg.feature_dim);
  write_i32(os, cfg.conv_front ? 1 : 0);
  write_i32(os, cfg.conv_channels);
  write_i32(os, cfg.conv_kernel);
  write_i32(os, static_cast<int32_t>(net.layers().size()));
  for (const Layer& layer : net.layers()) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      write_i32(os, 0);
      write_mat(os, d->weight);
      write_vec(os, d->bias);
    } else if (std::get_if<ReluLayer>(&layer)) {
      write_i32(os, 1);
    } else {
      const auto& c = std::get<Conv2dLayer>(layer);
      write_i32(os, 2);
      write_i32(os, c.in_c);
      write_i32(os, c.in_h);
      write_i32(os, c.in_w);
      write_i32(os, c.out_c);
      write_i32(os, c.kh);
      write_i32(os, c.kw);
      write_mat(os, c.kernel);
      write_vec(os, c.bias);
    }
  }
  write_mat(os, net.head());
  if (!os) throw std::runtime_error("save_network: write failed for " + path.string());
}

Network load_network(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_network: cannot open " + path.string());
  if (read_u32(is) != kCheckpointMagic)
    throw std::runtime_error("load_network: bad magic in " + path.string());
  NetworkConfig cfg;
  cfg.input_shape.resize(read_i32(is));
  for (int& s : cfg.input_shape) s = read_i32(is);
  cfg.hidden_dims.resize(read_i32(is));
  for (int& h : cfg.hidden_dims) h = read_i32(is);
  cfg.feature_dim = read_i32(is);
  cfg.conv_front = read_i32(is) != 0;
  cfg.conv_channels = read_i32(is);
  cfg.conv_kernel = read_i32(is);
  Network net = Network::create(cfg, 0);
  const int n_layers = read_i32(is);
  if (n_layers != static_cast<int>(net.layers().size()))
    throw std::runtime_error("load_network: layer count mismatch in " + path.string());
  for (Layer& layer : net.layers()) {
    const int kind = read_i32(is);
    if (kind == 0) {
      auto& d = std::get<DenseLayer>(layer);
      d.weight = read_mat(is);
      d.bias = read_vec(is);
    } else if (kind == 2) {
      auto& c = std::get<Conv2dLayer>(layer);
      c.in_c = read_i32(is);
      c.in_h = read_i32(is);
      c.in_w = read_i32(is);
      c.out_c = read_i32(is);
      c.kh = read_i32(is);
      c.kw = read_i32(is);
      c.kernel = read_mat(is);
      c.bias = read_vec(is);
    }
  }
  net.head() = read_mat(is);
  if (!is) throw std::runtime_error("load_network: truncated file " + path.string());
  return net;
}

}  // namespace driftlab
