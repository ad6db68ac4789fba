#include "viewlab/modelzoo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "viewlab/binary_io.hpp"

namespace viewlab {

using nlohmann::json;

// ---------------------------------------------------------------------------
// DifferentiableMap

DifferentiableMap::Linearization DifferentiableMap::linearize(const Vector& x) const {
  Linearization lin;
  lin.value = evaluate(x);
  lin.pullback = [this, x](const Vector& g, Vector* pg) { return pullback(x, g, pg); };
  return lin;
}

const Vector& DifferentiableMap::parameters() const {
  static const Vector empty;
  return empty;
}

void DifferentiableMap::set_parameters(const Vector& p) {
  if (p.size() != 0) throw ConfigError(architecture_id() + " has no parameters");
}

void DifferentiableMap::check_input(const Vector& x) const {
  if (static_cast<std::size_t>(x.size()) != input_size()) {
    throw ConfigError(architecture_id() + ": input size " + std::to_string(x.size()) +
                      " does not match shape " + shape_to_string(input_shape()));
  }
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::silu: return "silu";
    case Activation::tanh: return "tanh";
    case Activation::softplus: return "softplus";
    case Activation::sigmoid: return "sigmoid";
    case Activation::leaky_relu: return "leaky_relu";
  }
  return "identity";
}

Activation activation_from_string(const std::string& s) {
  for (auto a : {Activation::identity, Activation::silu, Activation::tanh, Activation::softplus,
                 Activation::sigmoid, Activation::leaky_relu}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown activation: " + s);
}

// ---------------------------------------------------------------------------
// Layers

namespace detail {

class Layer {
 public:
  Layer(Shape in, Shape out, std::size_t nparams)
      : in_(std::move(in)), out_(std::move(out)), nparams_(nparams) {}
  virtual ~Layer() = default;

  const Shape& in_shape() const { return in_; }
  const Shape& out_shape() const { return out_; }
  std::size_t param_count() const { return nparams_; }

  virtual void forward(const double* p, const double* x, double* y) const = 0;
  // gp accumulates; may be null.
  virtual void backward(const double* p, const double* x, const double* y, const double* gy,
                        double* gx, double* gp) const = 0;
  virtual void init(double*, Rng&) const {}
  virtual json describe() const = 0;

 private:
  Shape in_, out_;
  std::size_t nparams_;
};

namespace {

class Dense final : public Layer {
 public:
  Dense(std::size_t in, std::size_t out) : Layer({in}, {out}, out * in + out), in_(in), out_(out) {}

  void forward(const double* p, const double* x, double* y) const override {
    Eigen::Map<const Matrix> w(p, out_, in_);
    Eigen::Map<const Vector> b(p + out_ * in_, out_);
    Eigen::Map<const Vector> xv(x, in_);
    Eigen::Map<Vector> yv(y, out_);
    yv.noalias() = w * xv + b;
  }

  void backward(const double* p, const double* x, const double*, const double* gy, double* gx,
                double* gp) const override {
    Eigen::Map<const Matrix> w(p, out_, in_);
    Eigen::Map<const Vector> gyv(gy, out_);
    Eigen::Map<Vector> gxv(gx, in_);
    gxv.noalias() = w.transpose() * gyv;
    if (gp) {
      Eigen::Map<const Vector> xv(x, in_);
      Eigen::Map<Matrix> gw(gp, out_, in_);
      Eigen::Map<Vector> gb(gp + out_ * in_, out_);
      gw.noalias() += gyv * xv.transpose();
      gb += gyv;
    }
  }

  void init(double* p, Rng& rng) const override {
    const double bound = std::sqrt(6.0 / static_cast<double>(in_ + out_));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < out_ * in_; ++i) p[i] = u(rng);
    std::fill(p + out_ * in_, p + out_ * in_ + out_, 0.0);
  }

  json describe() const override { return {{"type", "dense"}, {"out", out_}}; }

 private:
  std::size_t in_, out_;
};

class Conv final : public Layer {
 public:
  Conv(std::size_t cin, std::size_t h, std::size_t w, std::size_t cout, std::size_t k)
      : Layer({cin, h, w}, {cout, h, w}, cout * cin * k * k + cout),
        cin_(cin), cout_(cout), h_(h), w_(w), k_(k) {}

  void forward(const double* p, const double* x, double* y) const override {
    const double* bias = p + cout_ * cin_ * k_ * k_;
    const std::size_t hw = h_ * w_;
    const long r = static_cast<long>(k_ / 2);
    for (std::size_t co = 0; co < cout_; ++co) {
      double* yo = y + co * hw;
      std::fill(yo, yo + hw, bias[co]);
      for (std::size_t ci = 0; ci < cin_; ++ci) {
        const double* xi = x + ci * hw;
        const double* wk = p + ((co * cin_ + ci) * k_) * k_;
        for (long ky = 0; ky < static_cast<long>(k_); ++ky) {
          const long dy = ky - r;
          const long y0 = std::max(0L, -dy), y1 = std::min<long>(h_, static_cast<long>(h_) - dy);
          for (long kx = 0; kx < static_cast<long>(k_); ++kx) {
            const long dx = kx - r;
            const long x0 = std::max(0L, -dx), x1 = std::min<long>(w_, static_cast<long>(w_) - dx);
            const double wv = wk[ky * static_cast<long>(k_) + kx];
            for (long yy = y0; yy < y1; ++yy) {
              double* row = yo + yy * static_cast<long>(w_);
              const double* src = xi + (yy + dy) * static_cast<long>(w_) + dx;
              for (long xx = x0; xx < x1; ++xx) row[xx] += wv * src[xx];
            }
          }
        }
      }
    }
  }

  void backward(const double* p, const double* x, const double*, const double* gy, double* gx,
                double* gp) const override {
    const std::size_t hw = h_ * w_;
    const long r = static_cast<long>(k_ / 2);
    std::fill(gx, gx + cin_ * hw, 0.0);
    for (std::size_t co = 0; co < cout_; ++co) {
      const double* go = gy + co * hw;
      if (gp) {
        double& gb = gp[cout_ * cin_ * k_ * k_ + co];
        for (std::size_t i = 0; i < hw; ++i) gb += go[i];
      }
      for (std::size_t ci = 0; ci < cin_; ++ci) {
        const double* xi = x + ci * hw;
        double* gxi = gx + ci * hw;
        const std::size_t woff = ((co * cin_ + ci) * k_) * k_;
        for (long ky = 0; ky < static_cast<long>(k_); ++ky) {
          const long dy = ky - r;
          const long y0 = std::max(0L, -dy), y1 = std::min<long>(h_, static_cast<long>(h_) - dy);
          for (long kx = 0; kx < static_cast<long>(k_); ++kx) {
            const long dx = kx - r;
            const long x0 = std::max(0L, -dx), x1 = std::min<long>(w_, static_cast<long>(w_) - dx);
            const double wv = p[woff + ky * static_cast<long>(k_) + kx];
            double gw = 0.0;
            for (long yy = y0; yy < y1; ++yy) {
              const double* grow = go + yy * static_cast<long>(w_);
              const long soff = (yy + dy) * static_cast<long>(w_) + dx;
              const double* src = xi + soff;
              double* dst = gxi + soff;
              for (long xx = x0; xx < x1; ++xx) {
                dst[xx] += wv * grow[xx];
                gw += grow[xx] * src[xx];
              }
            }
            if (gp) gp[woff + ky * static_cast<long>(k_) + kx] += gw;
          }
        }
      }
    }
  }

  void init(double* p, Rng& rng) const override {
    const double fan_in = static_cast<double>(cin_ * k_ * k_);
    const double fan_out = static_cast<double>(cout_ * k_ * k_);
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> u(-bound, bound);
    const std::size_t nw = cout_ * cin_ * k_ * k_;
    for (std::size_t i = 0; i < nw; ++i) p[i] = u(rng);
    std::fill(p + nw, p + nw + cout_, 0.0);
  }

  json describe() const override {
    return {{"type", "conv"}, {"out", cout_}, {"kernel", k_}};
  }

 private:
  std::size_t cin_, cout_, h_, w_, k_;
};

class AvgPool final : public Layer {
 public:
  AvgPool(std::size_t c, std::size_t h, std::size_t w)
      : Layer({c, h, w}, {c, h / 2, w / 2}, 0), c_(c), h_(h), w_(w) {}

  void forward(const double*, const double* x, double* y) const override {
    const std::size_t oh = h_ / 2, ow = w_ / 2;
    for (std::size_t c = 0; c < c_; ++c) {
      const double* xi = x + c * h_ * w_;
      double* yo = y + c * oh * ow;
      for (std::size_t yy = 0; yy < oh; ++yy) {
        const double* r0 = xi + (2 * yy) * w_;
        const double* r1 = r0 + w_;
        for (std::size_t xx = 0; xx < ow; ++xx)
          yo[yy * ow + xx] = 0.25 * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
      }
    }
  }

  void backward(const double*, const double*, const double*, const double* gy, double* gx,
                double*) const override {
    const std::size_t oh = h_ / 2, ow = w_ / 2;
    for (std::size_t c = 0; c < c_; ++c) {
      double* gi = gx + c * h_ * w_;
      const double* go = gy + c * oh * ow;
      for (std::size_t yy = 0; yy < h_; ++yy)
        for (std::size_t xx = 0; xx < w_; ++xx) gi[yy * w_ + xx] = 0.25 * go[(yy / 2) * ow + xx / 2];
    }
  }

  json describe() const override { return {{"type", "avg_pool"}}; }

 private:
  std::size_t c_, h_, w_;
};

class Elementwise final : public Layer {
 public:
  Elementwise(const Shape& s, Activation a) : Layer(s, s, 0), n_(shape_size(s)), act_(a) {}

  void forward(const double*, const double* x, double* y) const override {
    for (std::size_t i = 0; i < n_; ++i) y[i] = apply(x[i]);
  }

  void backward(const double*, const double* x, const double* y, const double* gy, double* gx,
                double*) const override {
    for (std::size_t i = 0; i < n_; ++i) gx[i] = gy[i] * derivative(x[i], y[i]);
  }

  json describe() const override { return {{"type", "act"}, {"fn", to_string(act_)}}; }

 private:
  static double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

  double apply(double t) const {
    switch (act_) {
      case Activation::identity: return t;
      case Activation::silu: return t * sigmoid(t);
      case Activation::tanh: return std::tanh(t);
      case Activation::softplus: return t > 30.0 ? t : std::log1p(std::exp(t));
      case Activation::sigmoid: return sigmoid(t);
      case Activation::leaky_relu: return t > 0.0 ? t : 0.01 * t;
    }
    return t;
  }

  double derivative(double t, double y) const {
    switch (act_) {
      case Activation::identity: return 1.0;
      case Activation::silu: {
        const double s = sigmoid(t);
        return s * (1.0 + t * (1.0 - s));
      }
      case Activation::tanh: return 1.0 - y * y;
      case Activation::softplus: return sigmoid(t);
      case Activation::sigmoid: return y * (1.0 - y);
      case Activation::leaky_relu: return t > 0.0 ? 1.0 : 0.01;
    }
    return 1.0;
  }

  std::size_t n_;
  Activation act_;
};

}  // namespace
}  // namespace detail

// ---------------------------------------------------------------------------
// Network

Network::Network(std::string architecture_id, Shape input_shape)
    : arch_id_(std::move(architecture_id)), input_shape_(std::move(input_shape)) {
  if (input_shape_.empty() || shape_size(input_shape_) == 0)
    throw ConfigError("network input shape must be non-empty");
}

const Shape& Network::current_shape() const {
  return layers_.empty() ? input_shape_ : layers_.back()->out_shape();
}

const Shape& Network::output_shape() const { return current_shape(); }

void Network::push(std::shared_ptr<const detail::Layer> layer) {
  const auto old = params_.size();
  layers_.push_back(std::move(layer));
  params_.conservativeResize(old + static_cast<Eigen::Index>(layers_.back()->param_count()));
  params_.tail(static_cast<Eigen::Index>(layers_.back()->param_count())).setZero();
}

Network& Network::dense(std::size_t out) {
  push(std::make_shared<detail::Dense>(shape_size(current_shape()), out));
  return *this;
}

Network& Network::conv(std::size_t out_channels, std::size_t kernel) {
  const Shape s = current_shape();
  if (s.size() != 3) throw ConfigError("conv layer needs a CHW input, got " + shape_to_string(s));
  if (kernel % 2 == 0) throw ConfigError("conv kernel must be odd");
  push(std::make_shared<detail::Conv>(s[0], s[1], s[2], out_channels, kernel));
  return *this;
}

Network& Network::avg_pool() {
  const Shape s = current_shape();
  if (s.size() != 3 || s[1] % 2 || s[2] % 2)
    throw ConfigError("avg_pool needs a CHW input with even sides, got " + shape_to_string(s));
  push(std::make_shared<detail::AvgPool>(s[0], s[1], s[2]));
  return *this;
}

Network& Network::activation(Activation a) {
  push(std::make_shared<detail::Elementwise>(current_shape(), a));
  return *this;
}

Network& Network::mark_backbone() {
  backbone_depth_ = layers_.size();
  return *this;
}

void Network::initialize(std::uint64_t seed) {
  Rng rng = make_stream(seed, {tag(StreamTag::init)});
  std::size_t off = 0;
  for (const auto& l : layers_) {
    l->init(params_.data() + off, rng);
    off += l->param_count();
  }
}

void Network::set_parameters(const Vector& p) {
  if (p.size() != params_.size())
    throw ConfigError(arch_id_ + ": expected " + std::to_string(params_.size()) + " parameters, got " +
                      std::to_string(p.size()));
  params_ = p;
}

std::vector<Vector> Network::forward_all(const Vector& x) const {
  check_input(x);
  std::vector<Vector> acts;
  acts.reserve(layers_.size() + 1);
  acts.push_back(x);
  std::size_t off = 0;
  for (const auto& l : layers_) {
    Vector y(static_cast<Eigen::Index>(shape_size(l->out_shape())));
    l->forward(params_.data() + off, acts.back().data(), y.data());
    acts.push_back(std::move(y));
    off += l->param_count();
  }
  return acts;
}

Vector Network::backward_all(const std::vector<Vector>& acts, const Vector& grad_out,
                             Vector* param_grad) const {
  if (static_cast<std::size_t>(grad_out.size()) != output_size())
    throw ConfigError(arch_id_ + ": output gradient size mismatch");
  if (param_grad && param_grad->size() != params_.size()) {
    if (param_grad->size() != 0) throw ConfigError(arch_id_ + ": parameter gradient size mismatch");
    *param_grad = Vector::Zero(params_.size());
  }
  Vector g = grad_out;
  std::size_t off = static_cast<std::size_t>(params_.size());
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const auto& l = layers_[li];
    off -= l->param_count();
    Vector gx(static_cast<Eigen::Index>(shape_size(l->in_shape())));
    l->backward(params_.data() + off, acts[li].data(), acts[li + 1].data(), g.data(), gx.data(),
                param_grad ? param_grad->data() + off : nullptr);
    g = std::move(gx);
  }
  return g;
}

Vector Network::evaluate(const Vector& x) const {
  check_input(x);
  Vector cur = x;
  std::size_t off = 0;
  for (const auto& l : layers_) {
    Vector y(static_cast<Eigen::Index>(shape_size(l->out_shape())));
    l->forward(params_.data() + off, cur.data(), y.data());
    cur = std::move(y);
    off += l->param_count();
  }
  return cur;
}

Vector Network::features(const Vector& x) const {
  check_input(x);
  Vector cur = x;
  std::size_t off = 0;
  for (std::size_t i = 0; i < backbone_depth_; ++i) {
    const auto& l = layers_[i];
    Vector y(static_cast<Eigen::Index>(shape_size(l->out_shape())));
    l->forward(params_.data() + off, cur.data(), y.data());
    cur = std::move(y);
    off += l->param_count();
  }
  return cur;
}

std::size_t Network::feature_size() const {
  return backbone_depth_ == 0 ? input_size() : shape_size(layers_[backbone_depth_ - 1]->out_shape());
}

Vector Network::pullback(const Vector& x, const Vector& grad_out, Vector* param_grad) const {
  return backward_all(forward_all(x), grad_out, param_grad);
}

DifferentiableMap::Linearization Network::linearize(const Vector& x) const {
  auto acts = std::make_shared<std::vector<Vector>>(forward_all(x));
  Linearization lin;
  lin.value = acts->back();
  lin.pullback = [this, acts](const Vector& g, Vector* pg) { return backward_all(*acts, g, pg); };
  return lin;
}

json Network::describe() const {
  json layers = json::array();
  for (const auto& l : layers_) layers.push_back(l->describe());
  return {{"kind", "network"},
          {"architecture_id", arch_id_},
          {"input_shape", input_shape_},
          {"layers", layers},
          {"backbone_depth", backbone_depth_},
          {"trainable", trainable()}};
}

Network Network::from_description(const json& j) {
  if (j.at("kind") != "network") throw FormatError("not a network description");
  Network net(j.at("architecture_id").get<std::string>(), j.at("input_shape").get<Shape>());
  for (const auto& l : j.at("layers")) {
    const auto type = l.at("type").get<std::string>();
    if (type == "dense") net.dense(l.at("out").get<std::size_t>());
    else if (type == "conv") net.conv(l.at("out").get<std::size_t>(), l.at("kernel").get<std::size_t>());
    else if (type == "avg_pool") net.avg_pool();
    else if (type == "act") net.activation(activation_from_string(l.at("fn").get<std::string>()));
    else throw FormatError("unknown layer type: " + type);
  }
  net.backbone_depth_ = j.value("backbone_depth", std::size_t{0});
  net.set_trainable(j.value("trainable", true));
  return net;
}

// ---------------------------------------------------------------------------
// LinearMap / IdentityMap

LinearMap::LinearMap(std::size_t in, std::size_t out, bool bias)
    : in_{in}, out_{out}, bias_(bias),
      params_(Vector::Zero(static_cast<Eigen::Index>(in * out + (bias ? out : 0)))) {}

LinearMap::LinearMap(const Matrix& a)
    : LinearMap(static_cast<std::size_t>(a.cols()), static_cast<std::size_t>(a.rows()), false) {
  Eigen::Map<Matrix>(params_.data(), a.rows(), a.cols()) = a;
}

Matrix LinearMap::matrix() const {
  return Eigen::Map<const Matrix>(params_.data(), static_cast<Eigen::Index>(out_[0]),
                                  static_cast<Eigen::Index>(in_[0]));
}

Vector LinearMap::evaluate(const Vector& x) const {
  check_input(x);
  const auto o = static_cast<Eigen::Index>(out_[0]), i = static_cast<Eigen::Index>(in_[0]);
  Eigen::Map<const Matrix> a(params_.data(), o, i);
  Vector y = a * x;
  if (bias_) y += params_.segment(o * i, o);
  return y;
}

Vector LinearMap::pullback(const Vector& x, const Vector& grad_out, Vector* param_grad) const {
  check_input(x);
  const auto o = static_cast<Eigen::Index>(out_[0]), i = static_cast<Eigen::Index>(in_[0]);
  Eigen::Map<const Matrix> a(params_.data(), o, i);
  if (param_grad) {
    if (param_grad->size() == 0) *param_grad = Vector::Zero(params_.size());
    Eigen::Map<Matrix>(param_grad->data(), o, i).noalias() += grad_out * x.transpose();
    if (bias_) param_grad->segment(o * i, o) += grad_out;
  }
  return a.transpose() * grad_out;
}

void LinearMap::set_parameters(const Vector& p) {
  if (p.size() != params_.size()) throw ConfigError("linear: parameter size mismatch");
  params_ = p;
}

json LinearMap::describe() const {
  return {{"kind", "linear"}, {"in", in_[0]}, {"out", out_[0]}, {"bias", bias_}};
}

Vector IdentityMap::evaluate(const Vector& x) const {
  check_input(x);
  return x;
}

Vector IdentityMap::pullback(const Vector& x, const Vector& grad_out, Vector*) const {
  check_input(x);
  return grad_out;
}

json IdentityMap::describe() const { return {{"kind", "identity"}, {"dim", shape_[0]}}; }

// ---------------------------------------------------------------------------
// BlobGenerator

namespace {
constexpr double kBlobGain = 8.0;
constexpr double kCentreRange = 0.35;
constexpr double kBaseScale = 0.12;
constexpr double kScaleRange = 0.6;
constexpr double kColourBias = 1.0;
constexpr double kBackgroundBias = -1.5;

double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }
}  // namespace

struct BlobGenerator::Decoded {
  std::vector<double> cx, cy, s, tx, ty, ts;  // ts = tanh of log-scale input
  std::vector<double> colour;                 // blobs x 3
  double bg[3];
};

BlobGenerator::BlobGenerator(ImageShape image, std::size_t blobs)
    : image_(image), blobs_(blobs), in_{latent_dim_for(blobs)}, out_(image.as_shape()) {
  if (image.channels != 3) throw ConfigError("blob generator renders RGB images");
  if (blobs == 0) throw ConfigError("blob generator needs at least one blob");
}

BlobGenerator::Decoded BlobGenerator::decode(const Vector& w) const {
  Decoded d;
  d.cx.resize(blobs_);
  d.cy.resize(blobs_);
  d.s.resize(blobs_);
  d.tx.resize(blobs_);
  d.ty.resize(blobs_);
  d.ts.resize(blobs_);
  d.colour.resize(3 * blobs_);
  for (int c = 0; c < 3; ++c) d.bg[c] = sigmoid(w[c] + kBackgroundBias);
  for (std::size_t b = 0; b < blobs_; ++b) {
    const auto o = static_cast<Eigen::Index>(3 + 6 * b);
    d.tx[b] = std::tanh(w[o]);
    d.ty[b] = std::tanh(w[o + 1]);
    d.ts[b] = std::tanh(w[o + 2]);
    d.cx[b] = 0.5 + kCentreRange * d.tx[b];
    d.cy[b] = 0.5 + kCentreRange * d.ty[b];
    d.s[b] = kBaseScale * std::exp(kScaleRange * d.ts[b]);
    for (int c = 0; c < 3; ++c) d.colour[3 * b + c] = sigmoid(w[o + 3 + c] + kColourBias);
  }
  return d;
}

Vector BlobGenerator::evaluate(const Vector& w) const {
  check_input(w);
  const Decoded d = decode(w);
  const std::size_t H = image_.height, W = image_.width, hw = H * W;
  Vector out(static_cast<Eigen::Index>(3 * hw));
  std::vector<double> a(blobs_);
  for (std::size_t y = 0; y < H; ++y) {
    const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
    for (std::size_t x = 0; x < W; ++x) {
      const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
      double den = 1.0;
      double num[3] = {d.bg[0], d.bg[1], d.bg[2]};
      for (std::size_t b = 0; b < blobs_; ++b) {
        const double dx = px - d.cx[b], dy = py - d.cy[b];
        a[b] = kBlobGain * std::exp(-(dx * dx + dy * dy) / (2.0 * d.s[b] * d.s[b]));
        den += a[b];
        for (int c = 0; c < 3; ++c) num[c] += a[b] * d.colour[3 * b + c];
      }
      for (int c = 0; c < 3; ++c) out[static_cast<Eigen::Index>(c * hw + y * W + x)] = num[c] / den;
    }
  }
  return out;
}

Vector BlobGenerator::pullback(const Vector& w, const Vector& grad_out, Vector*) const {
  check_input(w);
  if (static_cast<std::size_t>(grad_out.size()) != output_size())
    throw ConfigError("blob generator: output gradient size mismatch");
  const Decoded d = decode(w);
  const std::size_t H = image_.height, W = image_.width, hw = H * W;
  std::vector<double> g_cx(blobs_, 0.0), g_cy(blobs_, 0.0), g_s(blobs_, 0.0), g_col(3 * blobs_, 0.0);
  double g_bg[3] = {0.0, 0.0, 0.0};
  std::vector<double> a(blobs_);
  for (std::size_t y = 0; y < H; ++y) {
    const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
    for (std::size_t x = 0; x < W; ++x) {
      const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
      double den = 1.0;
      double num[3] = {d.bg[0], d.bg[1], d.bg[2]};
      for (std::size_t b = 0; b < blobs_; ++b) {
        const double dx = px - d.cx[b], dy = py - d.cy[b];
        a[b] = kBlobGain * std::exp(-(dx * dx + dy * dy) / (2.0 * d.s[b] * d.s[b]));
        den += a[b];
        for (int c = 0; c < 3; ++c) num[c] += a[b] * d.colour[3 * b + c];
      }
      double out[3], go[3];
      for (int c = 0; c < 3; ++c) {
        out[c] = num[c] / den;
        go[c] = grad_out[static_cast<Eigen::Index>(c * hw + y * W + x)];
        g_bg[c] += go[c] / den;
      }
      for (std::size_t b = 0; b < blobs_; ++b) {
        double ga = 0.0;
        for (int c = 0; c < 3; ++c) {
          ga += go[c] * (d.colour[3 * b + c] - out[c]) / den;
          g_col[3 * b + c] += go[c] * a[b] / den;
        }
        const double dx = px - d.cx[b], dy = py - d.cy[b];
        const double s2 = d.s[b] * d.s[b];
        g_cx[b] += ga * a[b] * dx / s2;
        g_cy[b] += ga * a[b] * dy / s2;
        g_s[b] += ga * a[b] * (dx * dx + dy * dy) / (s2 * d.s[b]);
      }
    }
  }
  Vector gw(w.size());
  for (int c = 0; c < 3; ++c) gw[c] = g_bg[c] * d.bg[c] * (1.0 - d.bg[c]);
  for (std::size_t b = 0; b < blobs_; ++b) {
    const auto o = static_cast<Eigen::Index>(3 + 6 * b);
    gw[o] = g_cx[b] * kCentreRange * (1.0 - d.tx[b] * d.tx[b]);
    gw[o + 1] = g_cy[b] * kCentreRange * (1.0 - d.ty[b] * d.ty[b]);
    gw[o + 2] = g_s[b] * d.s[b] * kScaleRange * (1.0 - d.ts[b] * d.ts[b]);
    for (int c = 0; c < 3; ++c) {
      const double col = d.colour[3 * b + c];
      gw[o + 3 + c] = g_col[3 * b + c] * col * (1.0 - col);
    }
  }
  return gw;
}

json BlobGenerator::describe() const {
  return {{"kind", "blob_generator"},
          {"image", {image_.channels, image_.height, image_.width}},
          {"blobs", blobs_}};
}

// ---------------------------------------------------------------------------
// Factories

namespace {

Network& pool_to_16(Network& net) {
  while (net.output_shape()[1] > 16) net.avg_pool();
  return net;
}

void check_image(const ImageShape& image, const char* what) {
  std::size_t h = image.height, w = image.width;
  while (h > 16) {
    if (h % 2 || w % 2) break;
    h /= 2;
    w /= 2;
  }
  if (h % 4 || w % 4 || h < 4 || w < 4)
    throw ConfigError(std::string(what) + ": image sides must reduce to a multiple of 4 (got " +
                      std::to_string(image.height) + "x" + std::to_string(image.width) + ")");
}

}  // namespace

Network make_encoder(const ImageShape& image, std::size_t embedding_dim, std::uint64_t seed) {
  check_image(image, "encoder");
  Network net("toy_conv_encoder", image.as_shape());
  pool_to_16(net)
      .conv(8).activation(Activation::silu).avg_pool()
      .conv(16).activation(Activation::silu).avg_pool()
      .dense(64).activation(Activation::silu)
      .mark_backbone()
      .dense(64).activation(Activation::silu)
      .dense(embedding_dim);
  net.initialize(seed);
  return net;
}

Network make_inverter(const ImageShape& image, std::size_t latent_dim, std::uint64_t seed) {
  check_image(image, "inverter");
  Network net("toy_inverter", image.as_shape());
  pool_to_16(net)
      .conv(8).activation(Activation::silu).avg_pool()
      .conv(16).activation(Activation::silu).avg_pool()
      .dense(128).activation(Activation::silu)
      .dense(latent_dim);
  net.initialize(seed);
  return net;
}

Network make_discriminator(const ImageShape& image, std::uint64_t seed) {
  check_image(image, "discriminator");
  Network net("toy_discriminator", image.as_shape());
  pool_to_16(net)
      .conv(8).activation(Activation::silu).avg_pool()
      .dense(32).activation(Activation::silu)
      .dense(1);
  net.initialize(seed);
  return net;
}

Network make_perceptual(const ImageShape& image, std::uint64_t seed) {
  check_image(image, "perceptual net");
  Network net("toy_perceptual", image.as_shape());
  pool_to_16(net).conv(8).activation(Activation::tanh).avg_pool().conv(8).activation(Activation::tanh);
  net.initialize(seed);
  net.set_trainable(false);
  return net;
}

Network make_predictor(std::size_t embedding_dim, std::size_t hidden, std::uint64_t seed) {
  return make_mlp("toy_predictor", embedding_dim, {hidden}, embedding_dim, Activation::silu, seed);
}

Network make_style_mapping(std::size_t latent_dim, std::uint64_t seed) {
  Network net = make_mlp("toy_style_mapping", latent_dim, {latent_dim}, latent_dim,
                         Activation::tanh, seed);
  net.set_trainable(false);
  return net;
}

Network make_mlp(std::string arch_id, std::size_t in, const std::vector<std::size_t>& hidden,
                 std::size_t out, Activation act, std::uint64_t seed) {
  Network net(std::move(arch_id), Shape{in});
  for (auto h : hidden) net.dense(h).activation(act);
  net.mark_backbone();
  net.dense(out);
  net.initialize(seed);
  return net;
}

// ---------------------------------------------------------------------------
// encode / generate

UnitEmbedding encode(const DifferentiableMap& f, const ImageTensor& x) {
  return normalize(f.evaluate(x));
}

EncodedView encode_linearized(const DifferentiableMap& f, const ImageTensor& x) {
  auto lin = std::make_shared<DifferentiableMap::Linearization>(f.linearize(x));
  EncodedView ev;
  ev.z = normalize(lin->value);
  ev.pullback = [lin](const Vector& gz, Vector* pg) {
    return lin->pullback(normalize_pullback(lin->value, gz), pg);
  };
  return ev;
}

ImageTensor generate(const DifferentiableMap& g, const LatentCode& w) {
  if (!all_finite(w)) throw NumericalError("generate: latent has non-finite entries");
  return g.evaluate(w);
}

// ---------------------------------------------------------------------------
// Gradient checks

GradCheckReport grad_check(const std::function<double(const Vector&)>& objective,
                           const Vector& point, const Vector& analytic,
                           const GradCheckOptions& opt) {
  if (analytic.size() != point.size()) throw ConfigError("grad_check: gradient size mismatch");
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    if (!std::isfinite(analytic[i]))
      throw NumericalError("grad_check: non-finite analytic gradient at coordinate " +
                           std::to_string(i));
  }
  std::vector<std::size_t> coords(static_cast<std::size_t>(point.size()));
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (opt.max_coordinates > 0 && opt.max_coordinates < coords.size()) {
    Rng rng = make_stream(opt.seed, {0x67636b});
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.max_coordinates);
    std::sort(coords.begin(), coords.end());
  }
  GradCheckReport rep;
  const double h = opt.step;
  Vector x = point;
  for (auto i : coords) {
    const auto ii = static_cast<Eigen::Index>(i);
    const double x0 = x[ii];
    auto at = [&](double dx) {
      x[ii] = x0 + dx;
      return objective(x);
    };
    const double numeric = (at(-2 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2 * h)) / (12.0 * h);
    x[ii] = x0;
    if (!std::isfinite(numeric))
      throw NumericalError("grad_check: non-finite numeric derivative at coordinate " +
                           std::to_string(i));
    const double err = std::abs(analytic[ii] - numeric) / (std::abs(numeric) + 1e-8);
    if (rep.coordinates_checked == 0 || err > rep.max_relative_error) {
      rep.max_relative_error = err;
      rep.worst_coordinate = i;
    }
    ++rep.coordinates_checked;
  }
  return rep;
}

GradCheckReport grad_check(const DifferentiableMap& map, const Vector& x, const Vector& probe,
                           const GradCheckOptions& opt) {
  const Vector analytic = map.pullback(x, probe);
  return grad_check([&](const Vector& v) { return probe.dot(map.evaluate(v)); }, x, analytic, opt);
}

GradCheckReport grad_check_parameters(DifferentiableMap& map, const Vector& x, const Vector& probe,
                                      const GradCheckOptions& opt) {
  const Vector original = map.parameters();
  Vector analytic = Vector::Zero(original.size());
  map.pullback(x, probe, &analytic);
  GradCheckReport rep;
  try {
    rep = grad_check(
        [&](const Vector& p) {
          map.set_parameters(p);
          return probe.dot(map.evaluate(x));
        },
        original, analytic, opt);
  } catch (...) {
    map.set_parameters(original);
    throw;
  }
  map.set_parameters(original);
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, const DifferentiableMap& map,
                     std::uint64_t seed, const json& extra) {
  json header = {{"architecture", map.describe()},
                 {"architecture_id", map.architecture_id()},
                 {"input_shape", map.input_shape()},
                 {"output_shape", map.output_shape()},
                 {"parameter_count", map.parameter_count()},
                 {"seed", seed}};
  if (!extra.is_null()) header["extra"] = extra;
  const std::string text = header.dump();
  const Vector& p = map.parameters();
  io::atomic_write(path, [&](std::ostream& os) {
    os.write("VLCK", 4);
    io::write_u32(os, kCheckpointVersion);
    io::write_string(os, text);
    io::write_u64(os, static_cast<std::uint64_t>(p.size()));
    io::write_f32(os, std::span<const double>(p.data(), static_cast<std::size_t>(p.size())));
  });
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "VLCK")
    throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  const auto version = io::read_u32(is);
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.header = json::parse(io::read_string(is));
  const auto n = io::read_u64(is);
  if (n != ck.header.at("parameter_count").get<std::uint64_t>())
    throw FormatError(path.string() + ": parameter count disagrees with header");
  ck.parameters.resize(static_cast<Eigen::Index>(n));
  io::read_f32(is, std::span<double>(ck.parameters.data(), n));
  return ck;
}

std::unique_ptr<DifferentiableMap> load_map(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  const json& arch = ck.header.at("architecture");
  const auto kind = arch.at("kind").get<std::string>();
  std::unique_ptr<DifferentiableMap> map;
  if (kind == "network") {
    map = std::make_unique<Network>(Network::from_description(arch));
  } else if (kind == "linear") {
    map = std::make_unique<LinearMap>(arch.at("in").get<std::size_t>(), arch.at("out").get<std::size_t>(),
                                      arch.at("bias").get<bool>());
  } else if (kind == "identity") {
    map = std::make_unique<IdentityMap>(arch.at("dim").get<std::size_t>());
  } else if (kind == "blob_generator") {
    const auto img = arch.at("image").get<std::vector<std::size_t>>();
    map = std::make_unique<BlobGenerator>(ImageShape{img.at(0), img.at(1), img.at(2)},
                                          arch.at("blobs").get<std::size_t>());
  } else {
    throw FormatError("unknown architecture kind: " + kind);
  }
  map->set_parameters(ck.parameters);
  return map;
}

Network load_network(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  Network net = Network::from_description(ck.header.at("architecture"));
  net.set_parameters(ck.parameters);
  return net;
}

}  // namespace viewlab
