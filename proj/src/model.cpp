#include "hvgg/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "hvgg/error.hpp"
#include "hvgg/hash.hpp"

namespace hvgg {

std::string to_string(Preset preset) { return preset == Preset::full ? "full" : "desk"; }

Preset preset_from_string(const std::string& name) {
  if (name == "full") return Preset::full;
  if (name == "desk") return Preset::desk;
  throw std::invalid_argument("unknown preset '" + name + "' (expected full or desk)");
}

ModelSpec ModelSpec::full() {
  ModelSpec s;
  s.height = s.width = 224;
  s.blocks = {{2, 64}, {2, 128}, {3, 256}, {3, 512}, {3, 512}};
  s.branch_attach = 3;
  s.branch_widths = {256, 256};
  s.head_widths = {4096, 4096};
  s.preset = Preset::full;
  return s;
}

ModelSpec ModelSpec::desk() {
  ModelSpec s;
  s.height = s.width = 32;
  s.blocks = {{1, 8}, {1, 16}, {1, 32}};
  s.branch_attach = 2;
  s.branch_widths = {32, 32};
  s.head_widths = {64};
  s.preset = Preset::desk;
  return s;
}

ModelSpec ModelSpec::for_preset(Preset preset) {
  return preset == Preset::full ? full() : desk();
}

void ModelSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model spec: " + what); };
  if (channels == 0 || height == 0 || width == 0) fail("input extents must be positive");
  if (blocks.size() < 2) fail("at least two conv blocks are required");
  for (const auto& b : blocks) {
    if (b.convs == 0 || b.filters == 0) fail("every block needs >= 1 conv and >= 1 filter");
  }
  const std::size_t factor = std::size_t{1} << blocks.size();
  if (height % factor != 0 || width % factor != 0) {
    fail("input " + std::to_string(height) + "x" + std::to_string(width) +
         " does not halve cleanly through " + std::to_string(blocks.size()) + " pools");
  }
  if (branch_attach < 1 || branch_attach > blocks.size() - 1) {
    fail("branch_attach " + std::to_string(branch_attach) + " outside [1, " +
         std::to_string(blocks.size() - 1) + "]");
  }
  for (auto w : branch_widths)
    if (w == 0) fail("branch widths must be positive");
  for (auto w : head_widths)
    if (w == 0) fail("head widths must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0,1)");
  hierarchy.validate();
  if (hierarchy.fine_count() < 2 || hierarchy.coarse_count() < 2) {
    fail("hierarchy needs at least two classes per level");
  }
}

std::size_t ModelSpec::extent_after(std::size_t blocks_done) const {
  return height >> blocks_done;
}

nlohmann::json ModelSpec::to_json() const {
  nlohmann::json b = nlohmann::json::array();
  for (const auto& blk : blocks) b.push_back({blk.convs, blk.filters});
  return {{"input", {channels, height, width}},
          {"blocks", b},
          {"branch_attach", branch_attach},
          {"branch_widths", branch_widths},
          {"head_widths", head_widths},
          {"hierarchy", hierarchy.to_json()},
          {"preset", to_string(preset)},
          {"dropout", dropout}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec s;
  const auto input = j.at("input").get<std::vector<std::size_t>>();
  if (input.size() != 3) throw std::invalid_argument("model spec: input needs 3 extents");
  s.channels = input[0];
  s.height = input[1];
  s.width = input[2];
  s.blocks.clear();
  for (const auto& b : j.at("blocks")) s.blocks.push_back({b.at(0).get<std::size_t>(), b.at(1).get<std::size_t>()});
  s.branch_attach = j.at("branch_attach").get<std::size_t>();
  s.branch_widths = j.at("branch_widths").get<std::vector<std::size_t>>();
  s.head_widths = j.at("head_widths").get<std::vector<std::size_t>>();
  s.hierarchy = ClassHierarchy::from_json(j.at("hierarchy"));
  s.preset = preset_from_string(j.at("preset").get<std::string>());
  s.dropout = j.at("dropout").get<double>();
  s.validate();
  return s;
}

std::string ModelSpec::hash() const { return hex_digest(to_json().dump()); }

namespace {

Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape), Real(0), true);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / double(fan_in)));
  for (auto& v : t.data()) v = static_cast<Real>(normal(rng));
  return t;
}

Tensor zeros_param(std::size_t n) { return Tensor(Shape{n}, Real(0), true); }

}  // namespace

Network::Head Network::make_head(std::size_t in, const std::vector<std::size_t>& widths,
                                 std::size_t out, Rng& rng) {
  Head head;
  for (auto w : widths) {
    head.hidden.push_back(DenseUnit{kaiming(Shape{in, w}, in, rng), zeros_param(w),
                                    BatchNormState::create(w)});
    in = w;
  }
  head.out_weight = kaiming(Shape{in, out}, in, rng);
  head.out_bias = zeros_param(out);
  return head;
}

Network::Network(ModelSpec spec, bool hierarchical, Rng& rng) : spec_(std::move(spec)) {
  spec_.validate();
  // Trunk, fine head, then branch: flat and branched builds from one seed
  // share every trunk and fine-head value.
  std::size_t channels = spec_.channels;
  for (const auto& blk : spec_.blocks) {
    std::vector<ConvUnit> units;
    for (std::size_t i = 0; i < blk.convs; ++i) {
      units.push_back(ConvUnit{kaiming(Shape{blk.filters, channels, 3, 3}, channels * 9, rng),
                               zeros_param(blk.filters), BatchNormState::create(blk.filters)});
      channels = blk.filters;
    }
    blocks_.push_back(std::move(units));
  }
  const std::size_t last = spec_.extent_after(spec_.blocks.size());
  fine_head_ = make_head(channels * last * last, spec_.head_widths, spec_.hierarchy.fine_count(),
                         rng);
  if (hierarchical) {
    const std::size_t tap = spec_.extent_after(spec_.branch_attach);
    const std::size_t tap_channels = spec_.blocks[spec_.branch_attach - 1].filters;
    coarse_head_ = make_head(tap_channels * tap * tap, spec_.branch_widths,
                             spec_.hierarchy.coarse_count(), rng);
  }
}

Tensor Network::run_head(Tape& tape, Head& head, const Tensor& features, Mode mode, Rng& rng) {
  Tensor x = ops::flatten(tape, features);
  for (auto& unit : head.hidden) {
    x = ops::add_bias(tape, ops::matmul(tape, x, unit.weight), unit.bias);
    x = ops::relu(tape, x);
    x = ops::batch_norm(tape, x, unit.bn, mode);
    x = ops::dropout(tape, x, static_cast<Real>(spec_.dropout), mode, rng);
  }
  return ops::add_bias(tape, ops::matmul(tape, x, head.out_weight), head.out_bias);
}

Network::Output Network::forward(Tape& tape, const Tensor& images, Mode mode, Rng& rng) {
  if (images.rank() != 4 || images.dim(1) != spec_.channels || images.dim(2) != spec_.height ||
      images.dim(3) != spec_.width) {
    throw std::invalid_argument("network expects [N," + std::to_string(spec_.channels) + "," +
                                std::to_string(spec_.height) + "," + std::to_string(spec_.width) +
                                "] input, got " + shape_to_string(images.shape()));
  }
  Tensor x = images;
  Tensor tap;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (auto& unit : blocks_[b]) {
      x = ops::add_bias(tape, ops::conv2d(tape, x, unit.kernel), unit.bias);
      x = ops::relu(tape, x);
      x = ops::batch_norm(tape, x, unit.bn, mode);
    }
    x = ops::maxpool2d(tape, x);
    if (b + 1 == spec_.branch_attach) tap = x;
  }
  Output out;
  out.fine = run_head(tape, fine_head_, x, mode, rng);
  if (coarse_head_) out.coarse = run_head(tape, *coarse_head_, tap, mode, rng);
  return out;
}

void Network::collect(Head& head, const std::string& prefix, std::vector<NamedTensor>& out) {
  for (std::size_t i = 0; i < head.hidden.size(); ++i) {
    const std::string p = prefix + ".fc" + std::to_string(i + 1);
    auto& u = head.hidden[i];
    out.push_back({p + ".weight", u.weight});
    out.push_back({p + ".bias", u.bias});
    out.push_back({p + ".bn.gamma", u.bn.gamma});
    out.push_back({p + ".bn.beta", u.bn.beta});
  }
  out.push_back({prefix + ".out.weight", head.out_weight});
  out.push_back({prefix + ".out.bias", head.out_bias});
}

std::vector<NamedTensor> Network::parameters() {
  std::vector<NamedTensor> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b)
    for (std::size_t i = 0; i < blocks_[b].size(); ++i) {
      const std::string p = "block" + std::to_string(b + 1) + ".conv" + std::to_string(i + 1);
      auto& u = blocks_[b][i];
      out.push_back({p + ".weight", u.kernel});
      out.push_back({p + ".bias", u.bias});
      out.push_back({p + ".bn.gamma", u.bn.gamma});
      out.push_back({p + ".bn.beta", u.bn.beta});
    }
  collect(fine_head_, "head", out);
  if (coarse_head_) collect(*coarse_head_, "branch", out);
  return out;
}

std::vector<NamedTensor> Network::branch_parameters() {
  std::vector<NamedTensor> out;
  if (coarse_head_) collect(*coarse_head_, "branch", out);
  return out;
}

std::vector<NamedBuffer> Network::buffers() {
  std::vector<NamedBuffer> out;
  auto add = [&out](const std::string& p, BatchNormState& bn) {
    out.push_back({p + ".bn.running_mean", &bn.running_mean});
    out.push_back({p + ".bn.running_var", &bn.running_var});
  };
  for (std::size_t b = 0; b < blocks_.size(); ++b)
    for (std::size_t i = 0; i < blocks_[b].size(); ++i)
      add("block" + std::to_string(b + 1) + ".conv" + std::to_string(i + 1), blocks_[b][i].bn);
  for (std::size_t i = 0; i < fine_head_.hidden.size(); ++i)
    add("head.fc" + std::to_string(i + 1), fine_head_.hidden[i].bn);
  if (coarse_head_)
    for (std::size_t i = 0; i < coarse_head_->hidden.size(); ++i)
      add("branch.fc" + std::to_string(i + 1), coarse_head_->hidden[i].bn);
  return out;
}

std::size_t Network::trainable_layer_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.size();
  n += fine_head_.hidden.size() + 1;
  if (coarse_head_) n += coarse_head_->hidden.size() + 1;
  return n;
}

std::size_t Network::parameter_count() {
  std::size_t n = 0;
  for (auto& p : parameters()) n += p.tensor.size();
  return n;
}

void Network::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

Network build_flat(const ModelSpec& spec, Rng& rng) { return Network(spec, false, rng); }

Network build_hierarchical(const ModelSpec& spec, Rng& rng) { return Network(spec, true, rng); }

std::size_t lift_to_coarse(std::size_t fine_index, const ClassHierarchy& hierarchy) {
  if (fine_index >= hierarchy.fine_count()) {
    throw std::out_of_range("fine index " + std::to_string(fine_index) + " out of range");
  }
  return hierarchy.parent[fine_index];
}

std::vector<double> lift_to_coarse(std::span<const double> fine_probs,
                                   const ClassHierarchy& hierarchy) {
  if (fine_probs.size() != hierarchy.fine_count()) {
    throw std::invalid_argument("lift_to_coarse: " + std::to_string(fine_probs.size()) +
                                " fine probabilities for " +
                                std::to_string(hierarchy.fine_count()) + " classes");
  }
  std::vector<double> coarse(hierarchy.coarse_count(), 0.0);
  for (std::size_t f = 0; f < fine_probs.size(); ++f) coarse[hierarchy.parent[f]] += fine_probs[f];
  return coarse;
}

namespace {

constexpr std::string_view kMagic = "HVGGCKPT1\n";

void write_u64(std::ostream& os, std::uint64_t v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host expected");
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_values(std::ostream& os, std::span<const Real> values) {
  std::vector<double> buf(values.begin(), values.end());
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(double)));
}

void read_values(std::istream& is, std::span<Real> values, const std::string& name) {
  std::vector<double> buf(values.size());
  is.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(double)));
  if (!is) throw DataError("checkpoint: truncated payload for " + name);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<Real>(buf[i]);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Network& network,
                     const std::string& config_hash) {
  nlohmann::json header;
  header["spec"] = network.spec().to_json();
  header["spec_hash"] = network.spec().hash();
  header["hierarchical"] = network.hierarchical();
  header["config_hash"] = config_hash;
  auto params = network.parameters();
  auto bufs = network.buffers();
  nlohmann::json entries = nlohmann::json::array();
  for (auto& p : params) entries.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  for (auto& b : bufs) entries.push_back({{"name", b.name}, {"shape", {b.values->size()}}});
  header["tensors"] = entries;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
  write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (auto& p : params) write_values(os, p.tensor.data());
  for (auto& b : bufs) write_values(os, *b.values);
  if (!os) throw DataError("failed writing checkpoint " + path.string());
}

std::pair<Network, CheckpointInfo> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  std::string magic(kMagic.size(), '\0');
  is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (magic != kMagic) throw DataError(path.string() + " is not a checkpoint");
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw DataError("checkpoint header truncated: " + path.string());
  const auto header = nlohmann::json::parse(text);

  CheckpointInfo info;
  info.spec = ModelSpec::from_json(header.at("spec"));
  if (info.spec.hash() != header.at("spec_hash").get<std::string>()) {
    throw DataError("checkpoint " + path.string() + ": stored spec hash does not match its spec");
  }
  info.hierarchical = header.at("hierarchical").get<bool>();
  info.config_hash = header.value("config_hash", std::string{});

  Rng scratch(0);
  Network net(info.spec, info.hierarchical, scratch);
  auto params = net.parameters();
  auto bufs = net.buffers();
  const auto& entries = header.at("tensors");
  if (entries.size() != params.size() + bufs.size()) {
    throw DataError("checkpoint " + path.string() + ": tensor count does not match the spec");
  }
  std::size_t i = 0;
  for (auto& p : params) {
    const auto& e = entries[i++];
    if (e.at("name") != p.name || e.at("shape").get<Shape>() != p.tensor.shape()) {
      throw DataError("checkpoint " + path.string() + ": unexpected tensor " +
                      e.at("name").get<std::string>());
    }
    read_values(is, p.tensor.data(), p.name);
  }
  for (auto& b : bufs) {
    const auto& e = entries[i++];
    if (e.at("name") != b.name) {
      throw DataError("checkpoint " + path.string() + ": unexpected buffer " +
                      e.at("name").get<std::string>());
    }
    read_values(is, *b.values, b.name);
  }
  return {std::move(net), std::move(info)};
}

std::pair<Network, CheckpointInfo> load_checkpoint(const std::filesystem::path& path,
                                                   const ModelSpec& expected) {
  auto loaded = load_checkpoint(path);
  if (loaded.second.spec.hash() != expected.hash()) {
    throw DataError("checkpoint " + path.string() + " was written for spec " +
                    loaded.second.spec.hash() + ", expected " + expected.hash());
  }
  return loaded;
}

}  // namespace hvgg
