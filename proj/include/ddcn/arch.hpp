#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ddcn/errors.hpp"
#include "ddcn/receptive_field.hpp"

namespace ddcn {

// Column kinds of the architecture table. Activations and pooling ride on the
// conv/fc columns they follow (relu / pool fields).
enum class LayerKind { Conv, FcAsConv, Concat, Reshape, Upsample };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::FcAsConv: return "fc";
    case LayerKind::Concat: return "concat";
    case LayerKind::Reshape: return "reshape";
    case LayerKind::Upsample: return "upsample";
  }
  return "?";
}

inline LayerKind parse_layer_kind(const std::string& s) {
  if (s == "conv") return LayerKind::Conv;
  if (s == "fc") return LayerKind::FcAsConv;
  if (s == "concat") return LayerKind::Concat;
  if (s == "reshape") return LayerKind::Reshape;
  if (s == "upsample") return LayerKind::Upsample;
  throw FormatError("unknown layer kind '" + s + "'");
}

struct Size2 {
  std::size_t h = 1;
  std::size_t w = 1;
  friend bool operator==(const Size2&, const Size2&) = default;
  std::string str() const { return std::to_string(h) + "x" + std::to_string(w); }
};

inline Size2 parse_size2(const std::string& text) {
  const auto x = text.find('x');
  if (x == std::string::npos || x == 0 || x + 1 == text.size())
    throw FormatError("expected <H>x<W>, got '" + text + "'");
  try {
    std::size_t used = 0;
    const auto h = std::stoull(text.substr(0, x), &used);
    if (used != x) throw FormatError("");
    const auto w = std::stoull(text.substr(x + 1), &used);
    if (used != text.size() - x - 1) throw FormatError("");
    return {static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
  } catch (const std::exception&) {
    throw FormatError("expected <H>x<W>, got '" + text + "'");
  }
}

struct PoolSpec {
  Size2 window{2, 2};
  std::size_t stride = 2;
  bool same = false;  // zero-extended so a stride-1 pool keeps the size
  friend bool operator==(const PoolSpec&, const PoolSpec&) = default;
};

// One column of the architecture table.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Conv;
  std::size_t conv_count = 1;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  Size2 kernel{1, 1};
  std::size_t dilation = 1;
  bool relu = false;
  std::optional<PoolSpec> pool;
  Size2 target{1, 1};  // reshape/upsample output size
  std::string notes;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct StackSpec {
  std::string name;
  std::size_t input_channels = 3;
  Size2 input{80, 60};
  std::vector<LayerSpec> layers;

  friend bool operator==(const StackSpec&, const StackSpec&) = default;
};

struct ArchSpec {
  std::vector<StackSpec> stacks;
  double width_scale = 1.0;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;

  const StackSpec& stack(const std::string& name) const {
    for (const auto& s : stacks)
      if (s.name == name) return s;
    throw ConfigError("no stack named '" + name + "'");
  }
};

inline const std::string kStackOurs = "Stack 1 (OUR)";
inline const std::string kStackVgg = "Stack 1 (VGG)";
inline const std::string kStackFine = "Stack 2";

inline std::size_t scale_channels(std::size_t channels, double width_scale, const std::string& layer) {
  if (!(width_scale > 0.0 && width_scale <= 1.0))
    throw ConfigError("width_scale must lie in (0, 1], got " + std::to_string(width_scale));
  const auto scaled = static_cast<std::size_t>(std::llround(static_cast<double>(channels) * width_scale));
  if (scaled < 1)
    throw ConfigError("width_scale " + std::to_string(width_scale) + " leaves layer " + layer +
                      " with no channels");
  return scaled;
}

// ---------------------------------------------------------------------------
// Geometry

struct LayerGeometry {
  std::string name;
  Size2 size;   // resolution the layer operates at (the table's size row)
  Size2 out;    // after any pooling
  std::optional<ReceptiveField> rf;  // undefined once features are flattened
};

namespace detail {

inline void require_positive(const Size2& s, const std::string& layer) {
  if (s.h < 1 || s.w < 1) throw GeometryError("layer " + layer + " produces an empty feature map");
}

inline std::size_t pooled_extent(std::size_t in, const PoolSpec& p, std::size_t window, const std::string& layer) {
  const std::size_t pad = p.same ? (window - 1) / 2 : 0;
  if (in + 2 * pad < window)
    throw GeometryError("pooling after layer " + layer + " does not fit a " + std::to_string(in) +
                        "-pixel extent");
  return (in + 2 * pad - window) / p.stride + 1;
}

}  // namespace detail

// Sizes by the same-padding / pooling rules and receptive fields of every
// column, for the given input resolution.
inline std::vector<LayerGeometry> geometry_report(const StackSpec& stack, Size2 input) {
  std::vector<LayerGeometry> report;
  std::vector<RfLayer> chain;
  bool flattened = false;
  Size2 cur = input;
  detail::require_positive(cur, "input");
  for (const auto& l : stack.layers) {
    LayerGeometry g{l.name, cur, cur, std::nullopt};
    switch (l.kind) {
      case LayerKind::Conv:
        for (std::size_t i = 0; i < l.conv_count; ++i)
          chain.push_back(RfLayer{l.kernel.h, l.kernel.w, l.dilation, 1, 1});
        break;
      case LayerKind::FcAsConv:
        chain.push_back(RfLayer{cur.h, cur.w, 1, 1, 1});
        g.size = Size2{1, 1};
        g.out = Size2{1, 1};
        break;
      case LayerKind::Concat:
        break;
      case LayerKind::Reshape:
      case LayerKind::Upsample:
        flattened = flattened || l.kind == LayerKind::Reshape;
        g.size = l.target;
        g.out = l.target;
        break;
    }
    if (l.pool) {
      const auto& p = *l.pool;
      g.out = Size2{detail::pooled_extent(g.size.h, p, p.window.h, l.name),
                    detail::pooled_extent(g.size.w, p, p.window.w, l.name)};
      chain.push_back(RfLayer{p.window.h, p.window.w, 1, p.stride, p.stride});
    }
    detail::require_positive(g.out, l.name);
    if (!flattened && !chain.empty()) g.rf = receptive_field(chain);
    report.push_back(g);
    cur = g.out;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Validation and parameter counting

// Checks channel chaining and geometry; a spec that fails cannot be built.
inline void validate(const StackSpec& stack) {
  std::size_t channels = stack.input_channels;
  const auto geometry = geometry_report(stack, stack.input);
  Size2 cur = stack.input;
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    const auto& l = stack.layers[i];
    if (l.in_channels != channels)
      throw ConfigError("layer " + l.name + " expects " + std::to_string(l.in_channels) +
                        " input channels but receives " + std::to_string(channels));
    if (l.out_channels < 1) throw ConfigError("layer " + l.name + " has no output channels");
    if (l.dilation < 1) throw ConfigError("layer " + l.name + " has dilation 0");
    if (l.dilation > 1 && l.kind != LayerKind::Conv)
      throw ConfigError("layer " + l.name + ": dilation only applies to convolutions");
    switch (l.kind) {
      case LayerKind::Conv:
        if (l.conv_count < 1) throw ConfigError("layer " + l.name + " has no convolutions");
        if (l.kernel.h % 2 == 0 || l.kernel.w % 2 == 0)
          throw ConfigError("layer " + l.name + " needs an odd kernel");
        break;
      case LayerKind::Concat:
        if (l.out_channels <= l.in_channels)
          throw ConfigError("concat layer " + l.name + " must add at least one channel");
        break;
      case LayerKind::Reshape:
        if (l.in_channels * cur.h * cur.w != l.out_channels * l.target.h * l.target.w)
          throw GeometryError("reshape " + l.name + " changes the element count");
        break;
      case LayerKind::Upsample:
        if (l.out_channels != l.in_channels || l.target.h % cur.h != 0 || l.target.w % cur.w != 0)
          throw GeometryError("upsample " + l.name + " needs an integer factor");
        break;
      case LayerKind::FcAsConv:
        break;
    }
    channels = l.out_channels;
    cur = geometry[i].out;
  }
}

// Parameters of one table column given its input resolution.
inline std::uint64_t layer_parameters(const LayerSpec& l, Size2 input) {
  switch (l.kind) {
    case LayerKind::Conv: {
      const std::uint64_t k = l.kernel.h * l.kernel.w;
      std::uint64_t total = (l.out_channels * l.in_channels * k) + l.out_channels;
      total += (l.conv_count - 1) * (l.out_channels * l.out_channels * k + l.out_channels);
      return total;
    }
    case LayerKind::FcAsConv:
      return static_cast<std::uint64_t>(l.in_channels) * input.h * input.w * l.out_channels +
             l.out_channels;
    default:
      return 0;
  }
}

struct ParamReport {
  struct Entry {
    std::string stack;
    std::string layer;
    std::uint64_t params;
  };
  std::vector<Entry> per_layer;
  std::map<std::string, std::uint64_t> stack_totals;
  std::optional<double> ratio_vgg_over_ours;  // coarse stacks, when both are present

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& [name, count] : stack_totals) t += count;
    return t;
  }
};

inline ParamReport count_parameters(const ArchSpec& arch) {
  ParamReport report;
  for (const auto& stack : arch.stacks) {
    validate(stack);
    Size2 cur = stack.input;
    const auto geometry = geometry_report(stack, stack.input);
    std::uint64_t total = 0;
    for (std::size_t i = 0; i < stack.layers.size(); ++i) {
      const std::uint64_t p = layer_parameters(stack.layers[i], cur);
      report.per_layer.push_back({stack.name, stack.layers[i].name, p});
      total += p;
      cur = geometry[i].out;
    }
    report.stack_totals[stack.name] = total;
  }
  const auto vgg = report.stack_totals.find(kStackVgg);
  const auto ours = report.stack_totals.find(kStackOurs);
  if (vgg != report.stack_totals.end() && ours != report.stack_totals.end())
    report.ratio_vgg_over_ours = static_cast<double>(vgg->second) / static_cast<double>(ours->second);
  return report;
}

// ---------------------------------------------------------------------------
// Built-in stacks

// Dilated coarse stack: five 3x3 blocks with dilations 1,2,3,2,3, a 7x7
// dilation-4 layer, a 1x1 layer and a 1x1 prediction, all same-padded.
inline StackSpec coarse_dilated_spec(double width_scale = 1.0, Size2 input = {80, 60}) {
  struct Row {
    const char* name;
    std::size_t convs, channels, kernel, dilation;
  };
  const Row rows[] = {{"1.1", 2, 64, 3, 1},  {"1.2", 2, 128, 3, 2}, {"1.3", 3, 256, 3, 3},
                      {"1.4", 3, 512, 3, 2}, {"1.5", 3, 512, 3, 3}, {"1.6", 1, 512, 7, 4},
                      {"1.7", 1, 512, 1, 1}};
  StackSpec s{kStackOurs, 3, input, {}};
  std::size_t channels = 3;
  for (const Row& r : rows) {
    LayerSpec l;
    l.name = r.name;
    l.kind = LayerKind::Conv;
    l.conv_count = r.convs;
    l.in_channels = channels;
    l.out_channels = scale_channels(r.channels, width_scale, r.name);
    l.kernel = {r.kernel, r.kernel};
    l.dilation = r.dilation;
    l.relu = true;
    s.layers.push_back(l);
    channels = l.out_channels;
  }
  LayerSpec predict;
  predict.name = "1.8";
  predict.kind = LayerKind::Conv;
  predict.in_channels = channels;
  predict.out_channels = 1;
  s.layers.push_back(predict);
  validate(s);
  return s;
}

// VGG-16 style coarse baseline: 2x2/2 pooling between conv blocks, three
// fully connected layers, and the 4800-wide output laid out as 1x80x60.
// With upsample_nearest the last layer emits a quarter-resolution map that
// is upsampled by 2 instead.
inline StackSpec coarse_vgg_spec(double width_scale = 1.0, Size2 input = {160, 120},
                                 bool upsample_nearest = false) {
  struct Row {
    const char* name;
    std::size_t convs, channels;
    bool pool;
  };
  const Row rows[] = {{"1.1", 2, 64, true},   {"1.2", 2, 128, true}, {"1.3", 3, 256, true},
                      {"1.4", 3, 512, true},  {"1.5", 3, 512, false}};
  StackSpec s{kStackVgg, 3, input, {}};
  std::size_t channels = 3;
  for (const Row& r : rows) {
    LayerSpec l;
    l.name = r.name;
    l.kind = LayerKind::Conv;
    l.conv_count = r.convs;
    l.in_channels = channels;
    l.out_channels = scale_channels(r.channels, width_scale, r.name);
    l.kernel = {3, 3};
    l.relu = true;
    if (r.pool) l.pool = PoolSpec{{2, 2}, 2, false};
    s.layers.push_back(l);
    channels = l.out_channels;
  }
  const Size2 output{input.h / 2, input.w / 2};
  for (const char* name : {"1.6", "1.7"}) {
    LayerSpec fc;
    fc.name = name;
    fc.kind = LayerKind::FcAsConv;
    fc.in_channels = channels;
    fc.out_channels = scale_channels(4096, width_scale, name);
    fc.relu = true;
    s.layers.push_back(fc);
    channels = fc.out_channels;
  }
  LayerSpec last;
  last.name = "1.8";
  last.kind = LayerKind::FcAsConv;
  last.in_channels = channels;
  const Size2 coarse = upsample_nearest ? Size2{output.h / 2, output.w / 2} : output;
  last.out_channels = coarse.h * coarse.w;
  s.layers.push_back(last);

  LayerSpec layout;
  layout.kind = LayerKind::Reshape;
  layout.in_channels = last.out_channels;
  layout.out_channels = 1;
  layout.target = coarse;
  if (upsample_nearest) {
    layout.name = "reshape";
    s.layers.push_back(layout);
    LayerSpec up;
    up.name = "upsamp";
    up.kind = LayerKind::Upsample;
    up.in_channels = 1;
    up.out_channels = 1;
    up.target = output;
    s.layers.push_back(up);
  } else {
    layout.name = "upsamp";
    s.layers.push_back(layout);
  }
  validate(s);
  return s;
}

// Fine stack: 9x9 conv (63) with a size-preserving 3x3 max pool, concat with
// the 1-channel coarse prediction, then two 5x5 convs down to 1 channel.
inline StackSpec fine_spec(double width_scale = 1.0, Size2 input = {80, 60}, bool pool = true) {
  StackSpec s{kStackFine, 3, input, {}};
  LayerSpec edge;
  edge.name = "2.1";
  edge.in_channels = 3;
  edge.out_channels = scale_channels(63, width_scale, "2.1");
  edge.kernel = {9, 9};
  edge.relu = true;
  if (pool) edge.pool = PoolSpec{{3, 3}, 1, true};
  s.layers.push_back(edge);

  LayerSpec join;
  join.name = "2.2";
  join.kind = LayerKind::Concat;
  join.in_channels = edge.out_channels;
  join.out_channels = edge.out_channels + 1;
  s.layers.push_back(join);

  LayerSpec refine;
  refine.name = "2.3";
  refine.in_channels = join.out_channels;
  refine.out_channels = scale_channels(64, width_scale, "2.3");
  refine.kernel = {5, 5};
  refine.relu = true;
  s.layers.push_back(refine);

  LayerSpec predict;
  predict.name = "2.4";
  predict.in_channels = refine.out_channels;
  predict.out_channels = 1;
  predict.kernel = {5, 5};
  s.layers.push_back(predict);
  validate(s);
  return s;
}

// ---------------------------------------------------------------------------
// Text form

namespace detail {

inline std::string pool_cell(const std::optional<PoolSpec>& p) {
  if (!p) return "-";
  std::string s = p->window.str() + "/" + std::to_string(p->stride);
  if (p->same) s += "s";
  return s;
}

inline std::optional<PoolSpec> parse_pool_cell(const std::string& cell) {
  if (cell == "-") return std::nullopt;
  const auto slash = cell.find('/');
  if (slash == std::string::npos) throw FormatError("bad pool cell '" + cell + "'");
  PoolSpec p;
  p.window = parse_size2(cell.substr(0, slash));
  std::string rest = cell.substr(slash + 1);
  if (!rest.empty() && rest.back() == 's') {
    p.same = true;
    rest.pop_back();
  }
  try {
    p.stride = static_cast<std::size_t>(std::stoull(rest));
  } catch (const std::exception&) {
    throw FormatError("bad pool stride in '" + cell + "'");
  }
  return p;
}

inline std::string format_scale(double scale) {
  std::ostringstream out;
  out << std::setprecision(17) << scale;
  return out.str();
}

inline std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> cells;
  if (line.size() < 2 || line.front() != '|' || line.back() != '|')
    throw FormatError("table row must start and end with '|': " + line);
  std::string cell;
  for (std::size_t i = 1; i < line.size(); ++i) {
    if (line[i] == '|') {
      const auto b = cell.find_first_not_of(' ');
      const auto e = cell.find_last_not_of(' ');
      cells.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
      cell.clear();
    } else {
      cell += line[i];
    }
  }
  return cells;
}

}  // namespace detail

// Table with one column per layer and one row per attribute, including the
// kind/relu/pool rows needed to rebuild the stack. render_table ->
// parse_table is the identity.
inline std::string render_table(const ArchSpec& arch) {
  std::ostringstream out;
  out << "width_scale=" << detail::format_scale(arch.width_scale) << "\n";
  for (const auto& stack : arch.stacks) {
    const auto geometry = geometry_report(stack, stack.input);
    std::vector<std::vector<std::string>> rows = {{"Layer"}, {"kind"}, {"size"}, {"conv"},
                                                  {"chan"},  {"ker.sz"}, {"dilation"}, {"relu"},
                                                  {"pool"}};
    for (std::size_t i = 0; i < stack.layers.size(); ++i) {
      const auto& l = stack.layers[i];
      const bool conv = l.kind == LayerKind::Conv;
      rows[0].push_back(l.name);
      rows[1].push_back(to_string(l.kind));
      rows[2].push_back(geometry[i].size.str());
      rows[3].push_back(conv ? std::to_string(l.conv_count) : "-");
      rows[4].push_back(std::to_string(l.out_channels));
      rows[5].push_back(conv ? l.kernel.str() : "-");
      rows[6].push_back(conv && l.kernel.h > 1 ? std::to_string(l.dilation) : "-");
      rows[7].push_back(l.relu ? "yes" : "-");
      rows[8].push_back(detail::pool_cell(l.pool));
    }
    std::vector<std::size_t> width(rows[0].size(), 0);
    for (const auto& r : rows)
      for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
    out << "stack " << stack.name << " input=" << stack.input_channels << "x" << stack.input.str()
        << "\n";
    for (const auto& r : rows) {
      out << "|";
      for (std::size_t c = 0; c < r.size(); ++c)
        out << " " << r[c] << std::string(width[c] - r[c].size(), ' ') << " |";
      out << "\n";
    }
  }
  return out.str();
}

inline ArchSpec parse_table(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  ArchSpec arch;
  if (!std::getline(in, line) || line.rfind("width_scale=", 0) != 0)
    throw FormatError("architecture table must start with width_scale=");
  try {
    arch.width_scale = std::stod(line.substr(12));
  } catch (const std::exception&) {
    throw FormatError("bad width_scale line '" + line + "'");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("stack ", 0) != 0) throw FormatError("expected 'stack' header, got '" + line + "'");
    const auto at = line.rfind(" input=");
    if (at == std::string::npos) throw FormatError("stack header without input=");
    StackSpec stack;
    stack.name = line.substr(6, at - 6);
    const std::string dims = line.substr(at + 7);
    const auto x = dims.find('x');
    if (x == std::string::npos) throw FormatError("bad stack input '" + dims + "'");
    try {
      stack.input_channels = static_cast<std::size_t>(std::stoull(dims.substr(0, x)));
    } catch (const std::exception&) {
      throw FormatError("bad stack input '" + dims + "'");
    }
    stack.input = parse_size2(dims.substr(x + 1));

    std::vector<std::vector<std::string>> rows;
    for (int r = 0; r < 9; ++r) {
      if (!std::getline(in, line)) throw FormatError("truncated table for " + stack.name);
      rows.push_back(detail::split_row(line));
    }
    const char* labels[] = {"Layer", "kind", "size", "conv", "chan", "ker.sz", "dilation", "relu", "pool"};
    for (int r = 0; r < 9; ++r) {
      if (rows[r].empty() || rows[r][0] != labels[r] || rows[r].size() != rows[0].size())
        throw FormatError("malformed row '" + std::string(labels[r]) + "' in " + stack.name);
    }
    std::size_t channels = stack.input_channels;
    for (std::size_t c = 1; c < rows[0].size(); ++c) {
      LayerSpec l;
      l.name = rows[0][c];
      l.kind = parse_layer_kind(rows[1][c]);
      l.in_channels = channels;
      try {
        l.out_channels = static_cast<std::size_t>(std::stoull(rows[4][c]));
        if (l.kind == LayerKind::Conv) {
          l.conv_count = static_cast<std::size_t>(std::stoull(rows[3][c]));
          l.kernel = parse_size2(rows[5][c]);
          l.dilation = rows[6][c] == "-" ? 1 : static_cast<std::size_t>(std::stoull(rows[6][c]));
        }
      } catch (const FormatError&) {
        throw;
      } catch (const std::exception&) {
        throw FormatError("bad numeric cell in column " + l.name + " of " + stack.name);
      }
      if (l.kind == LayerKind::Reshape || l.kind == LayerKind::Upsample) l.target = parse_size2(rows[2][c]);
      l.relu = rows[7][c] == "yes";
      l.pool = detail::parse_pool_cell(rows[8][c]);
      stack.layers.push_back(l);
      channels = l.out_channels;
    }
    validate(stack);
    const auto geometry = geometry_report(stack, stack.input);
    for (std::size_t i = 0; i < geometry.size(); ++i)
      if (geometry[i].size.str() != rows[2][i + 1])
        throw FormatError("size cell of " + stack.name + " layer " + stack.layers[i].name +
                          " disagrees with the geometry (" + geometry[i].size.str() + ")");
    arch.stacks.push_back(std::move(stack));
  }
  return arch;
}

// FNV-1a over the text form.
inline std::uint64_t fingerprint(const ArchSpec& arch) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : render_table(arch)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ddcn
