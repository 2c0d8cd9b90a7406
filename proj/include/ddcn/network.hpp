#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ddcn/arch.hpp"
#include "ddcn/conv.hpp"
#include "ddcn/errors.hpp"
#include "ddcn/layers.hpp"
#include "ddcn/tensor.hpp"

namespace ddcn {

// Mutable view of one trainable blob.
template <Real T>
struct ParamRef {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::span<T> value;
  std::span<T> grad;
};

struct InitOptions {
  std::uint64_t seed = 0;
  bool zero_final = false;  // zero weights in the stack's last parametric layer
};

// Executable form of a StackSpec. forward() optionally records a tape;
// backward() then accumulates parameter gradients and returns the input
// gradient (and the gradient of the concatenated auxiliary input, if any).
template <Real T>
class Network {
 public:
  struct Tape {
    std::vector<std::function<Tensor4<T>(const Tensor4<T>&)>> steps;
    std::optional<Tensor4<T>> aux_grad;
  };

  explicit Network(StackSpec spec, InitOptions init = {}) : spec_(std::move(spec)) {
    validate(spec_);
    Rng rng(init.seed);
    Size2 cur = spec_.input;
    const auto geometry = geometry_report(spec_, spec_.input);
    std::size_t last_param_node = 0;
    for (std::size_t li = 0; li < spec_.layers.size(); ++li) {
      const auto& l = spec_.layers[li];
      switch (l.kind) {
        case LayerKind::Conv: {
          std::size_t in = l.in_channels;
          for (std::size_t k = 0; k < l.conv_count; ++k) {
            ConvNode node;
            node.name = l.name + "/conv" + std::to_string(k + 1);
            const std::size_t fan_in = in * l.kernel.h * l.kernel.w;
            node.params.weights =
                init_uniform_fanin<T>(Shape4{l.out_channels, in, l.kernel.h, l.kernel.w}, fan_in, rng);
            node.params.bias.assign(l.out_channels, T(0));
            node.params.dilation = l.dilation;
            node.params.padding = same_padding(l.kernel.h, l.kernel.w, l.dilation);
            node.d_weights = Tensor4<T>(node.params.weights.shape());
            node.d_bias.assign(l.out_channels, T(0));
            nodes_.push_back(std::move(node));
            last_param_node = nodes_.size() - 1;
            if (l.relu) nodes_.push_back(ReluNode{});
            in = l.out_channels;
          }
          break;
        }
        case LayerKind::FcAsConv: {
          DenseNode node;
          node.name = l.name + "/fc";
          const std::size_t fan_in = l.in_channels * cur.h * cur.w;
          node.params.weights =
              init_uniform_fanin<T>(Shape4{l.out_channels, l.in_channels, cur.h, cur.w}, fan_in, rng);
          node.params.bias.assign(l.out_channels, T(0));
          node.d_weights = Tensor4<T>(node.params.weights.shape());
          node.d_bias.assign(l.out_channels, T(0));
          nodes_.push_back(std::move(node));
          last_param_node = nodes_.size() - 1;
          if (l.relu) nodes_.push_back(ReluNode{});
          break;
        }
        case LayerKind::Concat:
          aux_channels_ = l.out_channels - l.in_channels;
          nodes_.push_back(ConcatNode{l.name, aux_channels_});
          break;
        case LayerKind::Reshape:
          nodes_.push_back(ReshapeNode{Shape4{1, l.out_channels, l.target.h, l.target.w}});
          break;
        case LayerKind::Upsample:
          nodes_.push_back(UpsampleNode{Window2{l.target.h / cur.h, l.target.w / cur.w}});
          break;
      }
      if (l.pool) {
        const auto& p = *l.pool;
        const Padding pad = p.same ? Padding{(p.window.h - 1) / 2, (p.window.w - 1) / 2} : Padding{};
        nodes_.push_back(PoolNode{Window2{p.window.h, p.window.w}, Window2{p.stride, p.stride}, pad});
      }
      cur = geometry[li].out;
    }
    output_size_ = cur;
    output_channels_ = spec_.layers.back().out_channels;
    if (init.zero_final) {
      std::visit(
          [](auto& node) {
            if constexpr (requires { node.params.weights; })
              for (auto& v : node.params.weights.data()) v = T(0);
          },
          nodes_[last_param_node]);
    }
  }

  const StackSpec& spec() const { return spec_; }
  std::size_t aux_channels() const { return aux_channels_; }
  Size2 output_size() const { return output_size_; }
  std::size_t output_channels() const { return output_channels_; }

  Tensor4<T> forward(const Tensor4<T>& input, const Tensor4<T>* aux = nullptr) const {
    return run(input, aux, nullptr, nullptr);
  }

  // Forward pass that records the tape for backward().
  Tensor4<T> forward(const Tensor4<T>& input, const Tensor4<T>* aux, Tape& tape) {
    return run(input, aux, &tape, this);
  }

 private:
  Tensor4<T> run(const Tensor4<T>& input, const Tensor4<T>* aux, Tape* tape, Network* self) const {
    const Shape4 s = input.shape();
    if (s.c != spec_.input_channels || s.h != spec_.input.h || s.w != spec_.input.w)
      throw ShapeError(spec_.name + " expects input (n," + std::to_string(spec_.input_channels) + "," +
                       std::to_string(spec_.input.h) + "," + std::to_string(spec_.input.w) + "), got " +
                       s.str());
    if (aux_channels_ > 0 && aux == nullptr)
      throw ShapeError(spec_.name + " needs an auxiliary input for its concat layer");
    Tensor4<T> x = input;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      x = std::visit([&](const auto& node) { return apply(node, i, x, aux, tape, self); }, nodes_[i]);
    }
    return x;
  }

 public:
  // Accumulates parameter gradients into the grad buffers.
  Tensor4<T> backward(Tape& tape, const Tensor4<T>& upstream) {
    Tensor4<T> g = upstream;
    for (std::size_t i = tape.steps.size(); i-- > 0;) g = tape.steps[i](g);
    return g;
  }

  void zero_grad() {
    for (auto& p : parameters())
      for (auto& v : p.grad) v = T(0);
  }

  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> out;
    for (auto& node : nodes_) {
      std::visit(
          [&](auto& n) {
            if constexpr (requires { n.params.weights; }) {
              const Shape4 ws = n.params.weights.shape();
              out.push_back({n.name + "/weight",
                             {static_cast<std::uint32_t>(ws.n), static_cast<std::uint32_t>(ws.c),
                              static_cast<std::uint32_t>(ws.h), static_cast<std::uint32_t>(ws.w)},
                             n.params.weights.data(),
                             n.d_weights.data()});
              out.push_back({n.name + "/bias",
                             {static_cast<std::uint32_t>(n.params.bias.size())},
                             std::span<T>(n.params.bias),
                             std::span<T>(n.d_bias)});
            }
          },
          node);
    }
    return out;
  }

  std::size_t parameter_count() {
    std::size_t total = 0;
    for (const auto& p : parameters()) total += p.value.size();
    return total;
  }

  // Dilation factors of the convolutions, in order.
  std::vector<std::size_t> dilations() const {
    std::vector<std::size_t> out;
    for (const auto& node : nodes_)
      if (const auto* c = std::get_if<ConvNode>(&node)) out.push_back(c->params.dilation);
    return out;
  }

 private:
  struct ConvNode {
    std::string name;
    ConvParams<T> params;
    Tensor4<T> d_weights;
    std::vector<T> d_bias;
  };
  struct DenseNode {
    std::string name;
    DenseParams<T> params;
    Tensor4<T> d_weights;
    std::vector<T> d_bias;
  };
  struct ReluNode {};
  struct PoolNode {
    Window2 window, stride;
    Padding padding;
  };
  struct ConcatNode {
    std::string name;
    std::size_t aux_channels;
  };
  struct ReshapeNode {
    Shape4 per_sample;
  };
  struct UpsampleNode {
    Window2 factor;
  };
  using Node = std::variant<ConvNode, DenseNode, ReluNode, PoolNode, ConcatNode, ReshapeNode, UpsampleNode>;

  Tensor4<T> apply(const ConvNode& node, std::size_t i, const Tensor4<T>& x, const Tensor4<T>*, Tape* tape, Network* self) const {
    Tensor4<T> y = conv2d_forward(x, node.params);
    if (tape) {
      tape->steps.push_back([self, i, x](const Tensor4<T>& g) {
        auto& n = std::get<ConvNode>(self->nodes_[i]);
        auto grads = conv2d_backward(g, x, n.params);
        accumulate(n.d_weights.data(), grads.d_weights.data());
        accumulate(std::span<T>(n.d_bias), std::span<const T>(grads.d_bias));
        return std::move(grads.d_input);
      });
    }
    return y;
  }
  Tensor4<T> apply(const DenseNode& node, std::size_t i, const Tensor4<T>& x, const Tensor4<T>*, Tape* tape, Network* self) const {
    Tensor4<T> y = dense_forward(x, node.params);
    if (tape) {
      tape->steps.push_back([self, i, x](const Tensor4<T>& g) {
        auto& n = std::get<DenseNode>(self->nodes_[i]);
        auto grads = dense_backward(g, x, n.params);
        accumulate(n.d_weights.data(), grads.d_weights.data());
        accumulate(std::span<T>(n.d_bias), std::span<const T>(grads.d_bias));
        return std::move(grads.d_input);
      });
    }
    return y;
  }
  Tensor4<T> apply(const ReluNode&, std::size_t, const Tensor4<T>& x, const Tensor4<T>*, Tape* tape, Network*) const {
    auto r = relu(x);
    if (tape) tape->steps.push_back(std::move(r.backward));
    return std::move(r.output);
  }
  Tensor4<T> apply(const PoolNode& node, std::size_t, const Tensor4<T>& x, const Tensor4<T>*, Tape* tape, Network*) const {
    auto r = maxpool2d(x, node.window, node.stride, node.padding);
    if (tape) tape->steps.push_back(std::move(r.backward));
    return std::move(r.output);
  }
  Tensor4<T> apply(const ConcatNode& node, std::size_t, const Tensor4<T>& x, const Tensor4<T>* aux, Tape* tape, Network*) const {
    if (aux->shape().c != node.aux_channels)
      throw ShapeError("layer " + node.name + " expects a " + std::to_string(node.aux_channels) +
                       "-channel auxiliary input, got " + aux->shape().str());
    auto r = concat_channels(x, *aux);
    if (tape) {
      tape->steps.push_back([tape, back = std::move(r.backward)](const Tensor4<T>& g) {
        auto [da, db] = back(g);
        tape->aux_grad = std::move(db);
        return std::move(da);
      });
    }
    return std::move(r.output);
  }
  Tensor4<T> apply(const ReshapeNode& node, std::size_t, const Tensor4<T>& x, const Tensor4<T>*, Tape* tape, Network*) const {
    const Shape4 to{x.shape().n, node.per_sample.c, node.per_sample.h, node.per_sample.w};
    auto r = reshape(x, to);
    if (tape) tape->steps.push_back(std::move(r.backward));
    return std::move(r.output);
  }
  Tensor4<T> apply(const UpsampleNode& node, std::size_t, const Tensor4<T>& x, const Tensor4<T>*, Tape* tape, Network*) const {
    auto r = upsample_nearest(x, node.factor);
    if (tape) tape->steps.push_back(std::move(r.backward));
    return std::move(r.output);
  }

  static void accumulate(std::span<T> dst, std::span<const T> src) {
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }

  StackSpec spec_;
  std::vector<Node> nodes_;
  std::size_t aux_channels_ = 0;
  Size2 output_size_;
  std::size_t output_channels_ = 1;
};

template <Real T>
Network<T> build_coarse_dilated(double width_scale, InitOptions init = {}) {
  return Network<T>(coarse_dilated_spec(width_scale), init);
}

template <Real T>
Network<T> build_coarse_vgg_baseline(double width_scale, InitOptions init = {}, Size2 input = {160, 120}) {
  return Network<T>(coarse_vgg_spec(width_scale, input), init);
}

template <Real T>
Network<T> build_fine_stack(double width_scale, InitOptions init = {}) {
  return Network<T>(fine_spec(width_scale), init);
}

}  // namespace ddcn
