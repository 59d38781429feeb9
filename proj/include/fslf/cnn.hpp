#ifndef FSLF_CNN_HPP
#define FSLF_CNN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "fslf/grid.hpp"

namespace fslf {

struct CnnError : std::runtime_error {
  explicit CnnError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::vector<double> relu(const std::vector<double>& x) {
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = std::max(0.0, x[i]);
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
  double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

// Valid convolution layer followed by ReLU. Weights are stored per output
// map over all input maps, kernel row-major.
struct ConvLayer {
  int in_maps = 1, out_maps = 1, kernel = 3;
  std::vector<double> W;  // [out][in][kernel*kernel]
  std::vector<double> b;  // [out]

  size_t widx(int o, int i, int ky, int kx) const {
    return ((size_t(o) * in_maps + i) * kernel + ky) * kernel + kx;
  }
};

// Network stages alternate valid conv (+ReLU) and 2x2 average pooling, then
// one affine layer to 2 class logits. The activation feeding the affine
// layer is the structural signature.
struct SignatureNet {
  struct Stage {
    enum Kind { conv, pool } kind;
    ConvLayer layer;  // valid when kind == conv
  };
  int input_side = 20;
  std::vector<Stage> stages;
  std::vector<double> fc_W;  // [2][signature_dim]
  std::vector<double> fc_b;  // [2]
  int signature_dim = 18;
};

namespace cnn_detail {

struct Map3 {
  int maps = 1, h = 0, w = 0;
  std::vector<double> data;
  double& at(int m, int y, int x) {
    return data[(size_t(m) * h + y) * w + x];
  }
  double at(int m, int y, int x) const {
    return data[(size_t(m) * h + y) * w + x];
  }
};

inline Map3 conv_forward(const ConvLayer& l, const Map3& in) {
  int oh = in.h - l.kernel + 1, ow = in.w - l.kernel + 1;
  if (oh < 1 || ow < 1) throw CnnError("conv: kernel larger than input");
  if (in.maps != l.in_maps) throw CnnError("conv: input map count mismatch");
  Map3 out{l.out_maps, oh, ow,
           std::vector<double>(size_t(l.out_maps) * oh * ow)};
  for (int o = 0; o < l.out_maps; ++o)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double acc = l.b[o];
        for (int i = 0; i < l.in_maps; ++i)
          for (int ky = 0; ky < l.kernel; ++ky)
            for (int kx = 0; kx < l.kernel; ++kx)
              acc += l.W[l.widx(o, i, ky, kx)] * in.at(i, y + ky, x + kx);
        out.at(o, y, x) = acc;
      }
  return out;
}

inline Map3 relu_forward(const Map3& in) {
  Map3 out = in;
  for (double& v : out.data) v = std::max(0.0, v);
  return out;
}

inline Map3 pool_forward(const Map3& in) {
  if (in.h % 2 || in.w % 2) throw CnnError("pool: odd spatial dims");
  Map3 out{in.maps, in.h / 2, in.w / 2,
           std::vector<double>(size_t(in.maps) * (in.h / 2) * (in.w / 2))};
  for (int m = 0; m < in.maps; ++m)
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x)
        out.at(m, y, x) = 0.25 * (in.at(m, 2 * y, 2 * x) +
                                  in.at(m, 2 * y, 2 * x + 1) +
                                  in.at(m, 2 * y + 1, 2 * x) +
                                  in.at(m, 2 * y + 1, 2 * x + 1));
  return out;
}

struct ForwardTrace {
  std::vector<Map3> pre_act;   // per conv stage: pre-ReLU responses
  std::vector<Map3> stage_in;  // input to every stage
  std::vector<double> signature;
  std::vector<double> logits;
  std::vector<double> probs;
};

inline ForwardTrace run_forward(const SignatureNet& net,
                                const std::vector<double>& patch) {
  if (int(patch.size()) != net.input_side * net.input_side)
    throw CnnError("forward: patch size mismatch");
  ForwardTrace tr;
  Map3 cur{1, net.input_side, net.input_side, patch};
  for (const auto& st : net.stages) {
    tr.stage_in.push_back(cur);
    if (st.kind == SignatureNet::Stage::conv) {
      Map3 pre = conv_forward(st.layer, cur);
      tr.pre_act.push_back(pre);
      cur = relu_forward(pre);
    } else {
      tr.pre_act.emplace_back();
      cur = pool_forward(cur);
    }
  }
  tr.signature = cur.data;
  if (int(tr.signature.size()) != net.signature_dim)
    throw CnnError("forward: signature dimension mismatch");
  tr.logits.assign(2, 0.0);
  for (int c = 0; c < 2; ++c) {
    double acc = net.fc_b[c];
    for (int j = 0; j < net.signature_dim; ++j)
      acc += net.fc_W[size_t(c) * net.signature_dim + j] * tr.signature[j];
    tr.logits[c] = acc;
  }
  tr.probs = softmax(tr.logits);
  return tr;
}

}  // namespace cnn_detail

struct ForwardResult {
  std::vector<double> signature;
  std::vector<double> probs;
};

inline ForwardResult forward(const SignatureNet& net,
                             const std::vector<double>& patch) {
  auto tr = cnn_detail::run_forward(net, patch);
  return {tr.signature, tr.probs};
}

inline ForwardResult forward(const SignatureNet& net,
                             const std::vector<float>& patch) {
  std::vector<double> p(patch.begin(), patch.end());
  return forward(net, p);
}

// Flat view of all trainable parameters, in a fixed order.
struct NetGradients {
  std::vector<std::vector<double>> conv_dW;  // per conv stage
  std::vector<std::vector<double>> conv_db;
  std::vector<double> fc_dW;
  std::vector<double> fc_db;
  double loss = 0.0;
};

namespace cnn_detail {

// Cross-entropy loss and full backprop for one (patch, label) pair.
inline NetGradients backward(const SignatureNet& net,
                             const std::vector<double>& patch, int label) {
  ForwardTrace tr = run_forward(net, patch);
  NetGradients g;
  for (const auto& st : net.stages) {
    if (st.kind == SignatureNet::Stage::conv) {
      g.conv_dW.emplace_back(st.layer.W.size(), 0.0);
      g.conv_db.emplace_back(st.layer.b.size(), 0.0);
    } else {
      g.conv_dW.emplace_back();
      g.conv_db.emplace_back();
    }
  }
  g.fc_dW.assign(net.fc_W.size(), 0.0);
  g.fc_db.assign(net.fc_b.size(), 0.0);
  g.loss = -std::log(std::max(tr.probs[label], 1e-300));

  // Softmax + cross-entropy: dL/dlogit = p - onehot.
  std::vector<double> dlogits = tr.probs;
  dlogits[label] -= 1.0;

  std::vector<double> dsig(net.signature_dim, 0.0);
  for (int c = 0; c < 2; ++c) {
    g.fc_db[c] = dlogits[c];
    for (int j = 0; j < net.signature_dim; ++j) {
      g.fc_dW[size_t(c) * net.signature_dim + j] =
          dlogits[c] * tr.signature[j];
      dsig[j] += dlogits[c] * net.fc_W[size_t(c) * net.signature_dim + j];
    }
  }

  // Gradient w.r.t. the output of the final stage; rebuild the stage output
  // shapes by replaying the forward dims.
  Map3 dcur;
  if (net.stages.empty()) return g;  // affine-only net
  std::vector<Map3> outs(net.stages.size());
  {
    Map3 cur{1, net.input_side, net.input_side, {}};
    cur.data.assign(size_t(net.input_side) * net.input_side, 0.0);
    for (size_t s = 0; s < net.stages.size(); ++s) {
      const auto& st = net.stages[s];
      if (st.kind == SignatureNet::Stage::conv) {
        cur.maps = st.layer.out_maps;
        cur.h = cur.h - st.layer.kernel + 1;
        cur.w = cur.w - st.layer.kernel + 1;
      } else {
        cur.h /= 2;
        cur.w /= 2;
      }
      outs[s].maps = cur.maps;
      outs[s].h = cur.h;
      outs[s].w = cur.w;
    }
  }
  dcur.maps = outs.back().maps;
  dcur.h = outs.back().h;
  dcur.w = outs.back().w;
  dcur.data = dsig;

  for (int s = int(net.stages.size()) - 1; s >= 0; --s) {
    const auto& st = net.stages[s];
    const Map3& in = tr.stage_in[s];
    if (st.kind == SignatureNet::Stage::conv) {
      const ConvLayer& l = st.layer;
      const Map3& pre = tr.pre_act[s];
      // ReLU gate.
      for (size_t i = 0; i < dcur.data.size(); ++i)
        if (pre.data[i] <= 0.0) dcur.data[i] = 0.0;
      Map3 din{l.in_maps, in.h, in.w,
               std::vector<double>(size_t(l.in_maps) * in.h * in.w, 0.0)};
      auto& dW = g.conv_dW[s];
      auto& db = g.conv_db[s];
      for (int o = 0; o < l.out_maps; ++o)
        for (int y = 0; y < dcur.h; ++y)
          for (int x = 0; x < dcur.w; ++x) {
            double d = dcur.at(o, y, x);
            if (d == 0.0) continue;
            db[o] += d;
            for (int i = 0; i < l.in_maps; ++i)
              for (int ky = 0; ky < l.kernel; ++ky)
                for (int kx = 0; kx < l.kernel; ++kx) {
                  dW[l.widx(o, i, ky, kx)] += d * in.at(i, y + ky, x + kx);
                  din.at(i, y + ky, x + kx) += d * l.W[l.widx(o, i, ky, kx)];
                }
          }
      dcur = std::move(din);
    } else {
      Map3 din{in.maps, in.h, in.w,
               std::vector<double>(size_t(in.maps) * in.h * in.w, 0.0)};
      for (int m = 0; m < dcur.maps; ++m)
        for (int y = 0; y < dcur.h; ++y)
          for (int x = 0; x < dcur.w; ++x) {
            double d = 0.25 * dcur.at(m, y, x);
            din.at(m, 2 * y, 2 * x) += d;
            din.at(m, 2 * y, 2 * x + 1) += d;
            din.at(m, 2 * y + 1, 2 * x) += d;
            din.at(m, 2 * y + 1, 2 * x + 1) += d;
          }
      dcur = std::move(din);
    }
  }
  return g;
}

}  // namespace cnn_detail

// Default architecture: 20x20 -> conv5 x4 -> pool -> conv5 x6 -> pool ->
// conv2 x18 -> 1x1x18 signature -> affine to 2 logits.
inline SignatureNet make_default_net(uint32_t seed) {
  SignatureNet net;
  net.input_side = 20;
  net.signature_dim = 18;
  std::mt19937 rng(seed);
  auto add_conv = [&](int in_maps, int out_maps, int kernel) {
    ConvLayer l;
    l.in_maps = in_maps;
    l.out_maps = out_maps;
    l.kernel = kernel;
    int fan_in = in_maps * kernel * kernel;
    int fan_out = out_maps * kernel * kernel;
    double r = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> u(-r, r);
    l.W.resize(size_t(out_maps) * in_maps * kernel * kernel);
    for (double& w : l.W) w = u(rng);
    l.b.assign(out_maps, 0.0);
    net.stages.push_back({SignatureNet::Stage::conv, std::move(l)});
  };
  auto add_pool = [&] {
    net.stages.push_back({SignatureNet::Stage::pool, {}});
  };
  add_conv(1, 4, 5);   // 20 -> 16
  add_pool();          // 16 -> 8
  add_conv(4, 6, 5);   // 8 -> 4
  add_pool();          // 4 -> 2
  add_conv(6, 18, 2);  // 2 -> 1
  {
    double r = std::sqrt(6.0 / (18 + 2));
    std::uniform_real_distribution<double> u(-r, r);
    net.fc_W.resize(2 * 18);
    for (double& w : net.fc_W) w = u(rng);
    net.fc_b.assign(2, 0.0);
  }
  return net;
}

struct TrainOptions {
  int epochs = 30;
  double lr = 0.01;
  int batch_size = 32;
  uint32_t seed = 0;
};

// Mini-batch SGD on softmax cross-entropy. Returns per-epoch mean loss.
inline std::vector<double> train(SignatureNet& net,
                                 const std::vector<std::vector<double>>& patches,
                                 const std::vector<int>& labels,
                                 const TrainOptions& opt) {
  if (patches.size() != labels.size() || patches.empty())
    throw CnnError("train: patches/labels size mismatch or empty");
  bool has0 = false, has1 = false;
  for (int l : labels) (l == 0 ? has0 : has1) = true;
  if (!has0 || !has1)
    throw CnnError("train: training set contains a single class");

  std::mt19937 rng(opt.seed);
  std::vector<size_t> order(patches.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> trace;

  for (int ep = 0; ep < opt.epochs; ++ep) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (size_t start = 0; start < order.size(); start += opt.batch_size) {
      size_t end = std::min(order.size(), start + opt.batch_size);
      NetGradients acc;
      bool first = true;
      for (size_t k = start; k < end; ++k) {
        NetGradients g =
            cnn_detail::backward(net, patches[order[k]], labels[order[k]]);
        epoch_loss += g.loss;
        if (first) {
          acc = std::move(g);
          first = false;
        } else {
          for (size_t s = 0; s < acc.conv_dW.size(); ++s) {
            for (size_t i = 0; i < acc.conv_dW[s].size(); ++i)
              acc.conv_dW[s][i] += g.conv_dW[s][i];
            for (size_t i = 0; i < acc.conv_db[s].size(); ++i)
              acc.conv_db[s][i] += g.conv_db[s][i];
          }
          for (size_t i = 0; i < acc.fc_dW.size(); ++i)
            acc.fc_dW[i] += g.fc_dW[i];
          for (size_t i = 0; i < acc.fc_db.size(); ++i)
            acc.fc_db[i] += g.fc_db[i];
        }
      }
      double scale = opt.lr / double(end - start);
      for (size_t s = 0; s < net.stages.size(); ++s) {
        if (net.stages[s].kind != SignatureNet::Stage::conv) continue;
        ConvLayer& l = net.stages[s].layer;
        for (size_t i = 0; i < l.W.size(); ++i)
          l.W[i] -= scale * acc.conv_dW[s][i];
        for (size_t i = 0; i < l.b.size(); ++i)
          l.b[i] -= scale * acc.conv_db[s][i];
      }
      for (size_t i = 0; i < net.fc_W.size(); ++i)
        net.fc_W[i] -= scale * acc.fc_dW[i];
      for (size_t i = 0; i < net.fc_b.size(); ++i)
        net.fc_b[i] -= scale * acc.fc_db[i];
    }
    trace.push_back(epoch_loss / double(patches.size()));
  }
  return trace;
}

// Analytic vs central finite-difference gradients; returns the max relative
// error over all parameters.
inline double gradient_check(SignatureNet net, const std::vector<double>& patch,
                             int label, double step = 1e-4) {
  NetGradients g = cnn_detail::backward(net, patch, label);
  auto loss_at = [&] {
    auto tr = cnn_detail::run_forward(net, patch);
    return -std::log(std::max(tr.probs[label], 1e-300));
  };
  double max_rel = 0.0;
  auto check_param = [&](double& p, double analytic) {
    double orig = p;
    p = orig + step;
    double lp = loss_at();
    p = orig - step;
    double lm = loss_at();
    p = orig;
    double numeric = (lp - lm) / (2.0 * step);
    double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
  };
  for (size_t s = 0; s < net.stages.size(); ++s) {
    if (net.stages[s].kind != SignatureNet::Stage::conv) continue;
    ConvLayer& l = net.stages[s].layer;
    for (size_t i = 0; i < l.W.size(); ++i) check_param(l.W[i], g.conv_dW[s][i]);
    for (size_t i = 0; i < l.b.size(); ++i) check_param(l.b[i], g.conv_db[s][i]);
  }
  for (size_t i = 0; i < net.fc_W.size(); ++i)
    check_param(net.fc_W[i], g.fc_dW[i]);
  for (size_t i = 0; i < net.fc_b.size(); ++i)
    check_param(net.fc_b[i], g.fc_db[i]);
  return max_rel;
}

// ---------------------------------------------------------------------------
// SNET checkpoint: magic "SNET", u32 version, architecture, then weights as
// little-endian f64 arrays.

inline void save_net(const std::string& path, const SignatureNet& net) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("SNET", 4);
  detail::write_u32(os, 1);
  detail::write_u32(os, uint32_t(net.input_side));
  detail::write_u32(os, uint32_t(net.signature_dim));
  detail::write_u32(os, uint32_t(net.stages.size()));
  auto write_f64s = [&](const std::vector<double>& v) {
    detail::write_u32(os, uint32_t(v.size()));
    os.write(reinterpret_cast<const char*>(v.data()),
             std::streamsize(v.size() * 8));
  };
  for (const auto& st : net.stages) {
    detail::write_u32(os, st.kind == SignatureNet::Stage::conv ? 0 : 1);
    if (st.kind == SignatureNet::Stage::conv) {
      detail::write_u32(os, uint32_t(st.layer.in_maps));
      detail::write_u32(os, uint32_t(st.layer.out_maps));
      detail::write_u32(os, uint32_t(st.layer.kernel));
      write_f64s(st.layer.W);
      write_f64s(st.layer.b);
    }
  }
  write_f64s(net.fc_W);
  write_f64s(net.fc_b);
  if (!os) throw IoError("short write: " + path);
}

inline SignatureNet load_net(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SNET", 4) != 0)
    throw IoError("not an SNET file: " + path);
  if (detail::read_u32(is) != 1)
    throw IoError("unsupported SNET version in " + path);
  SignatureNet net;
  net.input_side = int(detail::read_u32(is));
  net.signature_dim = int(detail::read_u32(is));
  uint32_t n_stages = detail::read_u32(is);
  auto read_f64s = [&](std::vector<double>& v) {
    uint32_t n = detail::read_u32(is);
    v.resize(n);
    is.read(reinterpret_cast<char*>(v.data()), std::streamsize(n * 8));
  };
  for (uint32_t s = 0; s < n_stages; ++s) {
    uint32_t kind = detail::read_u32(is);
    SignatureNet::Stage st;
    st.kind = kind == 0 ? SignatureNet::Stage::conv : SignatureNet::Stage::pool;
    if (st.kind == SignatureNet::Stage::conv) {
      st.layer.in_maps = int(detail::read_u32(is));
      st.layer.out_maps = int(detail::read_u32(is));
      st.layer.kernel = int(detail::read_u32(is));
      read_f64s(st.layer.W);
      read_f64s(st.layer.b);
    }
    net.stages.push_back(std::move(st));
  }
  read_f64s(net.fc_W);
  read_f64s(net.fc_b);
  if (!is) throw IoError("truncated SNET file: " + path);
  return net;
}

}  // namespace fslf

#endif  // FSLF_CNN_HPP
