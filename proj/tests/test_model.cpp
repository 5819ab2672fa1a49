#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "hvgg/error.hpp"
#include "hvgg/model.hpp"

using namespace hvgg;

namespace {

// Closed-form counts: conv = 9*in*out + out, dense = in*out + out, and every
// hidden unit carries a batch-norm scale and shift per channel.
std::size_t conv_params(std::size_t in, std::size_t out) { return 9 * in * out + out + 2 * out; }
std::size_t dense_params(std::size_t in, std::size_t out, bool bn) {
  return in * out + out + (bn ? 2 * out : 0);
}

Tensor random_images(std::size_t n, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t({n, 1, size, size});
  for (auto& v : t.data()) v = static_cast<Real>(u(rng));
  return t;
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("hierarchy") {
  const auto h = ClassHierarchy::gastrointestinal();
  CHECK(h.coarse_count() == 3);
  CHECK(h.fine_count() == 7);
  CHECK(h.parent == std::vector<std::size_t>{0, 0, 0, 1, 1, 2, 2});
  CHECK(ClassHierarchy::parse(h.to_string()) == h);
  CHECK(ClassHierarchy::from_json(h.to_json()) == h);
  CHECK(*h.fine_index("Crohn's") == 5);
  CHECK_FALSE(h.coarse_index("Colon").has_value());
  CHECK_THROWS(ClassHierarchy::parse("A:x|y;B:"));
  CHECK_THROWS(ClassHierarchy::parse("A:x;B:x"));
}

TEST_CASE("lift_to_coarse") {
  const auto h = ClassHierarchy::gastrointestinal();
  CHECK(lift_to_coarse(5, h) == 2);
  const std::vector<double> uniform(7, 1.0 / 7);
  const auto lifted = lift_to_coarse(uniform, h);
  CHECK(lifted[0] == doctest::Approx(3.0 / 7));
  CHECK(lifted[1] == doctest::Approx(2.0 / 7));
  CHECK(lifted[2] == doctest::Approx(2.0 / 7));
  std::vector<double> onehot(7, 0.0);
  onehot[3] = 1.0;
  CHECK(lift_to_coarse(onehot, h) == std::vector<double>{0.0, 1.0, 0.0});
  const std::vector<double> short_vec(6, 1.0 / 6);
  CHECK_THROWS(lift_to_coarse(short_vec, h));
  CHECK_THROWS(lift_to_coarse(7, h));
}

TEST_CASE("spec invariants") {
  const auto full = ModelSpec::full();
  CHECK(full.extent_after(5) == 7);
  CHECK(full.extent_after(3) == 28);
  std::size_t convs = 0;
  for (const auto& b : full.blocks) convs += b.convs;
  CHECK(convs == 13);
  CHECK(full.head_widths.size() + 1 == 3);

  auto bad = ModelSpec::desk();
  bad.branch_attach = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.branch_attach = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ModelSpec::desk();
  bad.height = 30;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK(ModelSpec::from_json(full.to_json()) == full);
  CHECK(full.hash() != ModelSpec::desk().hash());
}

TEST_CASE("desk networks") {
  const auto spec = ModelSpec::desk();
  Rng rng(7);
  auto flat = build_flat(spec, rng);
  Rng rng2(7);
  auto hier = build_hierarchical(spec, rng2);

  SUBCASE("shape contract") {
    for (std::size_t n : {2u, 5u}) {
      const auto x = random_images(n, 32, n);
      Tape tape;
      Rng r(1);
      const auto fo = flat.forward(tape, x, Mode::train, r);
      CHECK(fo.fine.shape() == Shape{n, 7});
      CHECK_FALSE(fo.coarse.defined());
      const auto ho = hier.forward(tape, x, Mode::infer, r);
      CHECK(ho.fine.shape() == Shape{n, 7});
      CHECK(ho.coarse.shape() == Shape{n, 3});
    }
    Tape tape;
    Rng r(1);
    CHECK_THROWS_AS(flat.forward(tape, random_images(2, 16, 0), Mode::train, r),
                    std::invalid_argument);
  }

  SUBCASE("parameter counts") {
    // Trunk 1->8->16->32 channels, 32/2^3 = 4 extent, fine head [64].
    const std::size_t trunk = conv_params(1, 8) + conv_params(8, 16) + conv_params(16, 32);
    const std::size_t head = dense_params(32 * 4 * 4, 64, true) + dense_params(64, 7, false);
    CHECK(trunk + head == 39415);
    CHECK(flat.parameter_count() == trunk + head);
    // Branch taps after block 2: 16 channels at 8x8.
    const std::size_t branch =
        dense_params(16 * 8 * 8, 32, true) + dense_params(32, 32, true) + dense_params(32, 3, false);
    CHECK(hier.parameter_count() == trunk + head + branch);
    CHECK(flat.trainable_layer_count() == 5);
    CHECK(hier.trainable_layer_count() == 8);
  }

  SUBCASE("equal seeds build identical networks; trunk shared with flat") {
    Rng again(7);
    auto flat2 = build_flat(spec, again);
    auto a = flat.parameters(), b = flat2.parameters(), h = hier.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].name == b[i].name);
      CHECK(same_values(a[i].tensor, b[i].tensor));
      CHECK(a[i].name == h[i].name);
      CHECK(same_values(a[i].tensor, h[i].tensor));
    }
    CHECK(h.size() == a.size() + hier.branch_parameters().size());
  }

  SUBCASE("kaiming scale on the first conv") {
    Rng big(3);
    auto wide = spec;
    wide.blocks[0].filters = 256;
    auto net = build_flat(wide, big);
    const auto w = net.parameters()[0].tensor;
    double ss = 0;
    for (Real v : w.data()) ss += double(v) * v;
    CHECK(ss / double(w.size()) == doctest::Approx(2.0 / 9.0).epsilon(0.15));
  }
}

TEST_CASE("checkpoint round trip") {
  const auto spec = ModelSpec::desk();
  Rng rng(11);
  auto net = build_hierarchical(spec, rng);
  // Give the running statistics non-default values.
  {
    Tape tape;
    Rng r(2);
    net.forward(tape, random_images(4, 32, 9), Mode::train, r);
  }
  const auto path = std::filesystem::temp_directory_path() / "hvgg_test_model.ckpt";
  save_checkpoint(path, net, "cafebabecafebabe");
  auto [loaded, info] = load_checkpoint(path, spec);
  CHECK(info.hierarchical);
  CHECK(info.config_hash == "cafebabecafebabe");
  CHECK(info.spec == spec);

  auto a = net.parameters(), b = loaded.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(same_values(a[i].tensor, b[i].tensor));
  auto ba = net.buffers(), bb = loaded.buffers();
  for (std::size_t i = 0; i < ba.size(); ++i) CHECK(*ba[i].values == *bb[i].values);

  const auto x = random_images(3, 32, 5);
  Tape tape(false);
  Rng r(0);
  CHECK(same_values(net.forward(tape, x, Mode::infer, r).fine,
                    loaded.forward(tape, x, Mode::infer, r).fine));

  auto other = spec;
  other.branch_widths = {16};
  CHECK_THROWS_AS(load_checkpoint(path, other), DataError);
  CHECK_THROWS_AS(load_checkpoint(path.string() + ".missing"), DataError);
  std::filesystem::remove(path);
}
