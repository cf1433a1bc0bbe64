#include "simplerob/models.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "simplerob/common.hpp"

namespace simplerob::models {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string layer_key(std::size_t index, const char* what) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "layer%02zu.%s", index, what);
  return buf;
}

// Per-example shape after applying `layer` to `in`.
ad::Shape propagate(const ad::Shape& in, const Layer& layer, std::size_t index) {
  auto fail = [&](const std::string& why) {
    return ad::ShapeError("layer " + std::to_string(index) + ": " + why + " (input " + ad::shape_str(in) + ")");
  };
  return std::visit(
      overloaded{
          [&](const Dense& d) -> ad::Shape {
            if (d.in == 0 || d.out == 0) throw fail("dense sizes must be positive");
            if (in.size() != 1 || in[0] != d.in) {
              throw fail("dense expects [" + std::to_string(d.in) + "]");
            }
            return {d.out};
          },
          [&](const Conv& c) -> ad::Shape {
            if (c.in_channels == 0 || c.out_channels == 0 || c.kernel == 0) throw fail("conv sizes must be positive");
            if (in.size() != 3 || in[0] != c.in_channels) {
              throw fail("conv expects " + std::to_string(c.in_channels) + " input channels");
            }
            if (in[1] + 2 * c.padding < c.kernel || in[2] + 2 * c.padding < c.kernel) {
              throw fail("conv kernel larger than padded input");
            }
            return {c.out_channels, in[1] + 2 * c.padding - c.kernel + 1, in[2] + 2 * c.padding - c.kernel + 1};
          },
          [&](const Relu&) -> ad::Shape { return in; },
          [&](const Flatten&) -> ad::Shape { return {ad::numel(in)}; },
      },
      layer);
}

std::vector<std::size_t> parse_numbers(std::string_view args, std::string_view token) {
  std::vector<std::size_t> out;
  std::string buf(args);
  std::stringstream ss(buf);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument("trailing");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw PreconditionError("model spec: bad number '" + item + "' in '" + std::string(token) + "'");
    }
  }
  return out;
}

}  // namespace

// ---- ModelSpec -------------------------------------------------------------

std::size_t ModelSpec::output_dim() const {
  if (input_shape.empty()) throw ad::ShapeError("model spec: empty input shape");
  ad::Shape s = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) s = propagate(s, layers[i], i);
  if (s.size() != 1) throw ad::ShapeError("model spec: output is not a vector but " + ad::shape_str(s));
  return s[0];
}

void ModelSpec::validate() const {
  if (output_dim() < 1) throw ad::ShapeError("model spec: output_dim must be >= 1");
}

std::string ModelSpec::describe() const {
  std::ostringstream out;
  out << "in=";
  for (std::size_t i = 0; i < input_shape.size(); ++i) out << (i ? "x" : "") << input_shape[i];
  for (const auto& layer : layers) {
    out << ';';
    std::visit(overloaded{
                   [&](const Dense& d) { out << "dense(" << d.in << ',' << d.out << ')'; },
                   [&](const Conv& c) {
                     out << "conv(" << c.in_channels << ',' << c.out_channels << ',' << c.kernel << ','
                         << c.padding << ')';
                   },
                   [&](const Relu&) { out << "relu"; },
                   [&](const Flatten&) { out << "flatten"; },
               },
               layer);
  }
  return out.str();
}

ModelSpec ModelSpec::parse(std::string_view text) {
  ModelSpec spec;
  std::string buf(text);
  std::stringstream ss(buf);
  std::string token;
  bool first = true;
  while (std::getline(ss, token, ';')) {
    if (first) {
      if (token.rfind("in=", 0) != 0) throw PreconditionError("model spec: must start with in=..., got '" + token + "'");
      std::string dims = token.substr(3);
      for (char& c : dims)
        if (c == 'x') c = ',';
      for (auto d : parse_numbers(dims, token)) spec.input_shape.push_back(d);
      first = false;
      continue;
    }
    const auto open = token.find('(');
    const std::string name = token.substr(0, open);
    std::vector<std::size_t> args;
    if (open != std::string::npos) {
      if (token.back() != ')') throw PreconditionError("model spec: unbalanced '" + token + "'");
      args = parse_numbers(std::string_view(token).substr(open + 1, token.size() - open - 2), token);
    }
    if (name == "dense" && args.size() == 2) {
      spec.layers.emplace_back(Dense{args[0], args[1]});
    } else if (name == "conv" && args.size() == 4) {
      spec.layers.emplace_back(Conv{args[0], args[1], args[2], args[3]});
    } else if (name == "relu" && args.empty()) {
      spec.layers.emplace_back(Relu{});
    } else if (name == "flatten" && args.empty()) {
      spec.layers.emplace_back(Flatten{});
    } else {
      throw PreconditionError("model spec: unknown layer '" + token + "'");
    }
  }
  if (first) throw PreconditionError("model spec: empty description");
  spec.validate();
  return spec;
}

bool ModelSpec::operator==(const ModelSpec& other) const { return describe() == other.describe(); }

ModelSpec mlp(std::size_t inputs, std::span<const std::size_t> hidden, std::size_t outputs) {
  ModelSpec spec;
  spec.input_shape = {inputs};
  std::size_t width = inputs;
  for (auto h : hidden) {
    spec.layers.emplace_back(Dense{width, h});
    spec.layers.emplace_back(Relu{});
    width = h;
  }
  spec.layers.emplace_back(Dense{width, outputs});
  spec.validate();
  return spec;
}

ModelSpec small_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t outputs) {
  ModelSpec spec;
  spec.input_shape = {channels, height, width};
  spec.layers = {Conv{channels, 8, 3, 0}, Relu{}, Conv{8, 16, 3, 0}, Relu{}, Flatten{}};
  spec.layers.emplace_back(Dense{16 * (height - 4) * (width - 4), outputs});
  spec.validate();
  return spec;
}

ModelSpec with_outputs(ModelSpec spec, std::size_t outputs) {
  if (outputs == 0) throw PreconditionError("with_outputs: outputs must be positive");
  if (spec.layers.empty() || !std::holds_alternative<Dense>(spec.layers.back())) {
    throw PreconditionError("with_outputs: architecture must end in a dense layer");
  }
  std::get<Dense>(spec.layers.back()).out = outputs;
  spec.validate();
  return spec;
}

// ---- parameters ------------------------------------------------------------

Parameters init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  Parameters params;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& layer = spec.layers[i];
    ad::Shape wshape, bshape;
    std::size_t fan_in = 0;
    if (const auto* d = std::get_if<Dense>(&layer)) {
      wshape = {d->in, d->out};
      bshape = {d->out};
      fan_in = d->in;
    } else if (const auto* c = std::get_if<Conv>(&layer)) {
      wshape = {c->out_channels, c->in_channels, c->kernel, c->kernel};
      bshape = {c->out_channels};
      fan_in = c->in_channels * c->kernel * c->kernel;
    } else {
      continue;
    }
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<double> w(ad::numel(wshape));
    for (double& v : w) v = normal(rng);
    params.emplace(layer_key(i, "weight"), ad::Tensor(wshape, std::move(w)));
    params.emplace(layer_key(i, "bias"), ad::Tensor::zeros(bshape));
  }
  return params;
}

void check_parameters(const ModelSpec& spec, const Parameters& params) {
  std::size_t expected = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    ad::Shape wshape, bshape;
    if (const auto* d = std::get_if<Dense>(&spec.layers[i])) {
      wshape = {d->in, d->out};
      bshape = {d->out};
    } else if (const auto* c = std::get_if<Conv>(&spec.layers[i])) {
      wshape = {c->out_channels, c->in_channels, c->kernel, c->kernel};
      bshape = {c->out_channels};
    } else {
      continue;
    }
    for (const auto& [key, shape] : {std::pair{layer_key(i, "weight"), wshape}, std::pair{layer_key(i, "bias"), bshape}}) {
      const auto it = params.find(key);
      if (it == params.end()) throw ad::ShapeError("parameters: missing tensor " + key);
      if (it->second.shape() != shape) {
        throw ad::ShapeError("parameters: " + key + " has shape " + ad::shape_str(it->second.shape()) +
                             " but the model expects " + ad::shape_str(shape));
      }
      ++expected;
    }
  }
  if (params.size() != expected) {
    throw ad::ShapeError("parameters: " + std::to_string(params.size()) + " tensors, model expects " +
                         std::to_string(expected));
  }
}

ad::Tensor forward(const ModelSpec& spec, const Parameters& params, const ad::Tensor& x) {
  ad::Shape per_example(x.shape().begin() + 1, x.shape().end());
  if (x.rank() < 2 || per_example != spec.input_shape) {
    throw ad::ShapeError("forward: input " + ad::shape_str(x.shape()) + " does not match model input [batch]" +
                         ad::shape_str(spec.input_shape));
  }
  const std::size_t batch = x.dim(0);
  ad::Tensor h = x;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& layer = spec.layers[i];
    if (std::holds_alternative<Dense>(layer)) {
      h = ad::add_bias(ad::matmul(h, params.at(layer_key(i, "weight"))), params.at(layer_key(i, "bias")));
    } else if (const auto* c = std::get_if<Conv>(&layer)) {
      h = ad::conv2d(h, params.at(layer_key(i, "weight")), params.at(layer_key(i, "bias")), c->padding);
    } else if (std::holds_alternative<Relu>(layer)) {
      h = ad::relu(h);
    } else {
      h = ad::reshape(h, {batch, h.size() / batch});
    }
  }
  return h;
}

std::vector<std::size_t> argmax_rows(const ad::Tensor& logits) {
  if (logits.rank() != 2) throw ad::ShapeError("argmax_rows: expected rank 2, got " + ad::shape_str(logits.shape()));
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  const auto v = logits.data();
  std::vector<std::size_t> out(b, 0);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t j = 1; j < k; ++j) {
      if (v[r * k + j] > v[r * k + out[r]]) out[r] = j;
    }
  }
  return out;
}

ad::Tensor Model::logits(const ad::Tensor& x) const {
  ad::Tensor z = forward(spec, params, x);
  return z.dim(1) == 1 ? ad::lift_binary(z) : z;
}

std::vector<std::size_t> Model::predict(const ad::Tensor& x) const { return argmax_rows(logits(x)); }

std::size_t Model::num_classes() const {
  const std::size_t k = spec.output_dim();
  return k == 1 ? 2 : k;
}

LogitFn logit_fn(const Model& model) {
  return [&model](const ad::Tensor& x) { return model.logits(x); };
}

// ---- checkpoint --------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'R', 'B', 'N', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::Truncated,
                            std::string("checkpoint truncated while reading ") + what + " at byte " +
                                std::to_string(pos_));
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(s[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64(const char* what) {
    auto s = take(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
    return v;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> save_checkpoint(const Parameters& params) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
    for (auto d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Parameters load_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  const auto magic = in.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::BadMagic, "checkpoint: bad magic (expected RBN1)");
  }
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                          "checkpoint: version " + std::to_string(version) + ", this build reads " +
                              std::to_string(kCheckpointVersion));
  }
  const std::uint32_t count = in.u32("tensor count");
  Parameters params;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = in.u32("name length");
    const auto name_bytes = in.take(name_len, "name");
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::uint32_t rank = in.u32("rank");
    if (rank == 0) throw CheckpointError(CheckpointError::Kind::Malformed, "checkpoint: tensor " + name + " has rank 0");
    ad::Shape shape;
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint32_t d = in.u32("dimension");
      if (d == 0) throw CheckpointError(CheckpointError::Kind::Malformed, "checkpoint: tensor " + name + " has a zero dimension");
      shape.push_back(d);
      n *= d;
      if (n > in.remaining() / 8 + 1) {
        throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint: payload of " + name + " exceeds file size");
      }
    }
    std::vector<double> data(n);
    for (double& v : data) v = std::bit_cast<double>(in.u64("payload"));
    if (!params.emplace(name, ad::Tensor(std::move(shape), std::move(data))).second) {
      throw CheckpointError(CheckpointError::Kind::Malformed, "checkpoint: duplicate tensor " + name);
    }
  }
  if (!in.done()) {
    throw CheckpointError(CheckpointError::Kind::Malformed,
                          "checkpoint: " + std::to_string(in.remaining()) + " trailing bytes");
  }
  return params;
}

void write_checkpoint(const std::filesystem::path& path, const Parameters& params) {
  const auto bytes = save_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::Io, "write failed: " + path.string());
}

Parameters read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return load_checkpoint(bytes);
}

}  // namespace simplerob::models
