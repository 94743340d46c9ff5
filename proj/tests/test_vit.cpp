#include <cmath>
#include <cstring>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "npath/checkpoint.hpp"
#include "npath/dataset.hpp"
#include "npath/error.hpp"
#include "npath/trainer.hpp"
#include "npath/verify.hpp"
#include "npath/vit.hpp"
#include "reference.hpp"

using namespace npath;

namespace {

const VitModel& init7() {
  static const VitModel m = initial_model(VitConfig{}, 7);
  return m;
}

// Splits an encoded checkpoint into its JSON header and blob, lets `edit`
// change the header, and reassembles it.
template <class Edit>
std::vector<std::uint8_t> rewrite_header(const std::vector<std::uint8_t>& bytes, Edit edit) {
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= std::uint32_t(bytes[8 + i]) << (8 * i);
  auto header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
  edit(header);
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(bytes.begin(), bytes.begin() + 8);
  const auto n = static_cast<std::uint32_t>(text.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), bytes.begin() + 12 + len, bytes.end());
  return out;
}

}  // namespace

TEST_SUITE("vit-model") {
  TEST_CASE("toy geometry") {
    const VitConfig c;
    CHECK(c.seq_len() == 17);
    CHECK(c.patch_dim() == 16);
    CHECK(c.head_dim() == 8);
    VitConfig bad;
    bad.patch_size = 5;
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);
    bad = VitConfig{};
    bad.heads = 5;
    CHECK_THROWS_AS(bad.validate(), InvalidParameter);
  }

  TEST_CASE("forward agrees with the straight-line reference") {
    const VitModel& m = init7();
    for (std::size_t i = 0; i < 3; ++i) {
      const Sample s = generate_toy_sample(kDefaultTestSeed, i);
      const auto r = ref::run(m, s.x);
      const ForwardResult f = forward(m, s.x);
      for (std::size_t k = 0; k < 10; ++k) {
        CHECK(std::abs(f.logits[k] - r.logits[k]) < 1e-12);
        CHECK(std::abs(f.probabilities[k] - r.probs[k]) < 1e-12);
      }
      for (std::size_t l = 0; l < 4; ++l)
        for (std::size_t t = 0; t < 17; ++t)
          for (std::size_t c = 0; c < 64; ++c) CHECK(std::abs(f.intermediates[l].at(t, c) - r.hidden[l][t][c]) < 1e-12);
    }
  }

  TEST_CASE("golden logits of the seed-7 initialization") {
    // Frozen from the reference forward on test sample 0.
    const double expected[10] = {-1.1955175661833917, -0.66305220616685479, -0.72287747575760819,
                                 -1.7470872498205205, 0.78377789079868432,  0.34453731301706797,
                                 -2.8595622122321003, -0.40262863060522464, -0.50038706787055109,
                                 -1.1034864108238887};
    const Sample s = generate_toy_sample(kDefaultTestSeed, 0);
    CHECK(s.y == 0);
    const ForwardResult f = forward(init7(), s.x);
    for (std::size_t k = 0; k < 10; ++k) CHECK(f.logits[k] == doctest::Approx(expected[k]).epsilon(1e-12));
    CHECK(f.intermediates[0].at(0, 0) == doctest::Approx(0.69713249820602519).epsilon(1e-12));
    CHECK(f.intermediates[3].at(5, 17) == doctest::Approx(-0.11225294652615399).epsilon(1e-12));
    CHECK(f.intermediates[2].at(16, 63) == doctest::Approx(0.19006831636806207).epsilon(1e-12));
  }

  TEST_CASE("softmax output is normalized") {
    const ForwardResult f = forward(init7(), generate_toy_sample(kDefaultTestSeed, 4).x);
    double s = 0.0;
    for (double p : f.probabilities) s += p;
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }

  TEST_CASE("image validation") {
    CHECK_THROWS_AS(forward(init7(), Tensor({1, 15, 16})), DimensionError);
  }

  TEST_CASE("checkpoint round trip is bit-identical") {
    const auto bytes = encode_checkpoint(init7());
    const VitModel back = decode_checkpoint(bytes);
    CHECK(back == init7());
    CHECK(encode_checkpoint(back) == bytes);
  }

  TEST_CASE("checkpoint error variants") {
    const auto bytes = encode_checkpoint(init7());

    auto magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(magic), BadMagicError);

    auto version = bytes;
    version[7] = '2';
    CHECK_THROWS_AS(decode_checkpoint(version), VersionMismatchError);
    CHECK_THROWS_AS(decode_checkpoint(rewrite_header(bytes, [](auto& h) { h["format_version"] = 9; })),
                    VersionMismatchError);

    const auto shape = rewrite_header(bytes, [](auto& h) {
      h["tensors"]["patch_embed.weight"]["shape"] = nlohmann::json::array({16, 31});
    });
    CHECK_THROWS_AS(decode_checkpoint(shape), ShapeMismatchError);

    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 8);
    try {
      decode_checkpoint(cut);
      FAIL("expected TruncatedError");
    } catch (const TruncatedError& e) {
      CHECK(e.tensor() == "head.bias");
    }
    CHECK_THROWS_AS(decode_checkpoint(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10)), TruncatedError);

    const auto garbage = rewrite_header(bytes, [](auto& h) { h.erase("config"); });
    CHECK_THROWS_AS(decode_checkpoint(garbage), FormatError);
  }

  TEST_CASE("dataset is deterministic and class balanced") {
    const auto a = generate_toy_dataset(5, 40);
    const auto b = generate_toy_dataset(5, 50);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].x == b[i].x);
      CHECK(a[i].y == i % 10);
    }
    CHECK(generate_toy_dataset(6, 1)[0].x != a[0].x);
    const auto h = class_histogram(b, 10);
    for (auto v : h) CHECK(v == 5);
    CHECK_THROWS_AS(generate_toy_dataset(5, 0), InvalidParameter);
    CHECK(toy_class_names().size() == 10);
  }

  TEST_CASE("dataset NDJSON round trip") {
    const auto a = generate_toy_dataset(3, 7);
    std::stringstream ss;
    write_dataset_ndjson(ss, a);
    const auto b = read_dataset_ndjson(ss);
    REQUIRE(b.size() == a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(b[i].x == a[i].x);
      CHECK(b[i].y == a[i].y);
    }
    std::stringstream bad("{\"y\": 1, \"x\": [1, 2]}\n");
    CHECK_THROWS_AS(read_dataset_ndjson(bad), FormatError);
  }

  TEST_CASE("empty intervention and identity scale are bit-identical") {
    const Sample s = generate_toy_sample(kDefaultTestSeed, 1);
    const ForwardResult plain = forward(init7(), s.x);
    const ForwardResult empty = forward(init7(), s.x, InterventionSpec{});
    CHECK(plain.logits == empty.logits);
    InterventionSpec one;
    one.add({2, 5}, InterventionMode::scale(1.0));
    CHECK(forward(init7(), s.x, one).logits == plain.logits);
  }

  TEST_CASE("intervention equivalences") {
    const VitModel& m = init7();
    const Sample s = generate_toy_sample(kDefaultTestSeed, 2);
    const NeuronId id{3, 11};

    InterventionSpec zero, set0;
    zero.add(id, InterventionMode::zero());
    set0.add(id, InterventionMode::set(0.0));
    CHECK(forward(m, s.x, zero).logits == forward(m, s.x, set0).logits);

    InterventionSpec twice, scale2;
    twice.add(id, InterventionMode::twice());
    scale2.add(id, InterventionMode::scale(2.0));
    CHECK(forward(m, s.x, twice).logits == forward(m, s.x, scale2).logits);

    // Under the class-token scope one value covers the neuron, so setting it
    // to twice its clean value equals doubling.
    const double clean = forward(m, s.x).intermediates[2].at(0, 11);
    InterventionSpec cls_twice(TokenScope::cls_only), cls_set(TokenScope::cls_only);
    cls_twice.add(id, InterventionMode::twice());
    cls_set.add(id, InterventionMode::set(2.0 * clean));
    CHECK(forward(m, s.x, cls_twice).logits == forward(m, s.x, cls_set).logits);

    // The reference forward with the same edit agrees.
    const auto r = ref::run(m, s.x, [&](std::size_t layer, ref::Mat& h) {
      if (layer == 3)
        for (auto& row : h) row[11] *= 2.0;
    });
    const ForwardResult f = forward(m, s.x, twice);
    for (std::size_t k = 0; k < 10; ++k) CHECK(std::abs(f.logits[k] - r.logits[k]) < 1e-12);
  }

  TEST_CASE("interventions leave earlier layers untouched") {
    const Sample s = generate_toy_sample(kDefaultTestSeed, 3);
    InterventionSpec spec;
    spec.add({3, 0}, InterventionMode::zero());
    const ForwardResult a = forward(init7(), s.x), b = forward(init7(), s.x, spec);
    CHECK(a.intermediates[0] == b.intermediates[0]);
    CHECK(a.intermediates[1] == b.intermediates[1]);
    CHECK(a.intermediates[2] != b.intermediates[2]);
  }

  TEST_CASE("intervention validation") {
    InterventionSpec spec;
    spec.add({1, 2}, InterventionMode::zero());
    CHECK_THROWS_AS(spec.add({1, 2}, InterventionMode::twice()), UsageError);
    InterventionSpec out_of_range;
    out_of_range.add({5, 0}, InterventionMode::zero());
    CHECK_THROWS_AS(forward(init7(), generate_toy_sample(2, 0).x, out_of_range), IndexError);
    InterventionSpec late;
    late.add({3, 0}, InterventionMode::zero());
    CHECK_THROWS_AS(forward(init7(), generate_toy_sample(2, 0).x, late, 2), IndexError);
    CHECK_THROWS_AS(forward(init7(), generate_toy_sample(2, 0).x, {}, 0), IndexError);
    CHECK_THROWS_AS(parse_scope("middle"), UsageError);
    CHECK(parse_scope("cls") == TokenScope::cls_only);
    CHECK(parse_output_mode("logit") == OutputMode::logit);
  }

  TEST_CASE("neuron gradients match finite differences of the reference") {
    const VitModel& m = init7();
    const Sample s = generate_toy_sample(kDefaultTestSeed, 5);
    const std::vector<NeuronId> path{{1, 3}, {2, 40}, {4, 9}};
    for (TokenScope scope : {TokenScope::all_tokens, TokenScope::cls_only}) {
      const double alpha = 0.6, h = 1e-5;
      const NeuronGradients g = grad_wrt_neurons(m, s.x, s.y, path, alpha, scope);
      // d F / d alpha is the sum of the contracted terms.
      double total = 0.0;
      for (std::size_t i = 0; i < path.size(); ++i) total += g.contracted(i);
      const double fd = (ref::clamped_output(m, s, path, alpha + h, scope) -
                         ref::clamped_output(m, s, path, alpha - h, scope)) /
                        (2 * h);
      CHECK(total == doctest::Approx(fd).epsilon(1e-6));
      CHECK(g.output == doctest::Approx(ref::clamped_output(m, s, path, alpha, scope)).epsilon(1e-12));
    }
    const std::vector<NeuronId> same_layer{{1, 3}, {1, 4}};
    CHECK_THROWS_AS(grad_wrt_neurons(m, s.x, s.y, same_layer, 0.5, TokenScope::all_tokens), UsageError);
    CHECK_NOTHROW(grad_wrt_neurons(m, s.x, s.y, same_layer, 0.5, TokenScope::all_tokens, OutputMode::probability,
                                   false));
  }

  TEST_CASE("training is reproducible and learns") {
    const auto train = generate_toy_dataset(kDefaultTrainSeed, 200);
    const VitModel a = train_toy(micro_config(), train, 3, 1);
    const VitModel b = train_toy(micro_config(), train, 3, 1);
    CHECK(a == b);
    CHECK(a != initial_model(micro_config(), 3));
    CHECK(initial_model(micro_config(), 3) == initial_model(micro_config(), 3));
  }

  TEST_CASE("model gradients on the seeded initialization") {
    const Sample s = generate_toy_sample(kDefaultTestSeed, 0);
    const GradCheckResult r = model_gradient_check(init7(), s, 20, 3);
    CHECK(r.max_relative_error < 1e-5);
  }
}
