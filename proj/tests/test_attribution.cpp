#include <algorithm>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "json.hpp"
#include "npath/attribution.hpp"
#include "npath/error.hpp"
#include "npath/oracle.hpp"
#include "npath/tangent.hpp"
#include "npath/trainer.hpp"
#include "npath/verify.hpp"
#include "reference.hpp"

using namespace npath;

namespace {

const VitModel& micro() {
  static const VitModel m = micro_model(5);
  return m;
}

const VitModel& toy_init() {
  static const VitModel m = initial_model(VitConfig{}, 7);
  return m;
}

VitModel one_layer_model() {
  VitConfig c = micro_config();
  c.layers = 1;
  return initial_model(c, 4);
}

IntegrationConfig integ(std::size_t m, TokenScope scope = TokenScope::all_tokens,
                        OutputMode mode = OutputMode::probability) {
  IntegrationConfig c;
  c.m = m;
  c.scope = scope;
  c.output_mode = mode;
  return c;
}

}  // namespace

TEST_SUITE("attribution") {
  TEST_CASE("right Riemann sums") {
    CHECK(riemann_right([](double) { return 1.0; }, 7) == doctest::Approx(1.0).epsilon(1e-15));
    for (std::size_t m : {1, 2, 8, 20}) {
      // f(a) = 3a + 1 has right sum 3(m + 1) / (2m) + 1.
      const double expected = 3.0 * static_cast<double>(m + 1) / (2.0 * static_cast<double>(m)) + 1.0;
      CHECK(riemann_right([](double a) { return 3.0 * a + 1.0; }, m) == doctest::Approx(expected).epsilon(1e-14));
    }
    CHECK_THROWS_AS(riemann_right([](double) { return 0.0; }, 0), InvalidParameter);
  }

  TEST_CASE("criterion names") {
    CHECK(parse_criterion("jas") == Criterion::jas);
    CHECK(parse_criterion("neuron_path") == Criterion::jas);
    CHECK(parse_criterion("neuron-path") == Criterion::jas);
    CHECK(parse_criterion("influence-pattern") == Criterion::influence_pattern);
    CHECK(parse_criterion("activation") == Criterion::activation);
    CHECK_THROWS_AS(parse_criterion("saliency"), UsageError);
    CHECK(std::string(method_name(Criterion::jas)) == "neuron_path");
  }

  TEST_CASE("path validation") {
    const VitConfig c;
    const std::vector<NeuronId> ok{{1, 0}, {2, 63}};
    CHECK_NOTHROW(validate_path(ok, c));
    const std::vector<NeuronId> gap{{1, 0}, {3, 0}};
    CHECK_THROWS_AS(validate_path(gap, c), UsageError);
    const std::vector<NeuronId> channel{{1, 64}};
    CHECK_THROWS_AS(validate_path(channel, c), IndexError);
    const std::vector<NeuronId> too_long{{1, 0}, {2, 0}, {3, 0}, {4, 0}, {5, 0}};
    CHECK_THROWS(validate_path(too_long, c));
  }

  TEST_CASE("trivial joint attribution cases") {
    const Sample s = generate_toy_sample(kDefaultTestSeed, 0);
    CHECK(jas(toy_init(), s, std::vector<NeuronId>{}, integ(20)) == 0.0);
    const std::vector<NeuronId> dup{{1, 0}, {1, 1}};
    CHECK_THROWS_AS(jas(toy_init(), s, dup, integ(20)), UsageError);
    CHECK_THROWS_AS(jas(toy_init(), s, std::vector<NeuronId>{{1, 0}}, integ(0)), InvalidParameter);
  }

  TEST_CASE("neurons with zero activation have zero joint attribution") {
    // Cutting the FC1 column and bias makes the post-GELU value exactly zero.
    VitModel m = micro();
    const std::vector<NeuronId> path{{1, 2}, {2, 5}};
    for (const auto& id : path) {
      auto& layer = m.layers[id.layer - 1];
      for (std::size_t r = 0; r < layer.fc1_weight.rows(); ++r) layer.fc1_weight.at(r, id.channel) = 0.0;
      layer.fc1_bias[id.channel] = 0.0;
    }
    const Sample s = generate_toy_sample(kDefaultTestSeed, 2);
    for (TokenScope scope : {TokenScope::all_tokens, TokenScope::cls_only})
      for (std::size_t steps : {1, 7, 20}) CHECK(jas(m, s, path, integ(steps, scope)) == 0.0);
  }

  TEST_CASE("a neuron the output ignores scores zero for any m") {
    // With its FC2 row cut, F is constant (linear with slope zero) in the neuron.
    VitModel m = micro();
    const NeuronId id{2, 3};
    auto& layer = m.layers[1];
    for (std::size_t c = 0; c < layer.fc2_weight.cols(); ++c) layer.fc2_weight.at(id.channel, c) = 0.0;
    const Sample s = generate_toy_sample(kDefaultTestSeed, 4);
    for (std::size_t steps : {1, 3, 20}) CHECK(jas(m, s, std::vector<NeuronId>{id}, integ(steps)) == 0.0);
  }

  TEST_CASE("non-finite gradients name the step") {
    VitModel bad = micro();
    bad.head_bias[0] = std::numeric_limits<double>::infinity();
    const Sample s = generate_toy_sample(kDefaultTestSeed, 0);
    const std::vector<NeuronId> path{{1, 0}};
    try {
      jas(bad, s, path, integ(4));
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("k=1") != std::string::npos);
    }
    CHECK_THROWS_AS(locate_path(bad, s, integ(4)), NumericError);
  }

  TEST_CASE("tangent line points match the reference forward") {
    const VitModel& m = toy_init();
    const Sample s = generate_toy_sample(kDefaultTestSeed, 3);
    const NeuronActivations clean = neuron_activations(m, s.x);
    const std::vector<NeuronId> path{{1, 7}, {2, 30}, {3, 2}, {4, 51}};
    for (TokenScope scope : {TokenScope::all_tokens, TokenScope::cls_only}) {
      for (OutputMode mode : {OutputMode::probability, OutputMode::logit}) {
        TangentEngine engine(m, scope, mode);
        for (double alpha : {0.0, 0.35, 1.0}) {
          const auto p = engine.line_point(s.x, s.y, clean, path, alpha);
          CHECK(p.value == doctest::Approx(ref::clamped_output(m, s, path, alpha, scope, mode)).epsilon(1e-12));
          const double h = 1e-5;
          const double fd = (ref::clamped_output(m, s, path, alpha + h, scope, mode) -
                             ref::clamped_output(m, s, path, alpha - h, scope, mode)) /
                            (2 * h);
          CHECK(p.derivative == doctest::Approx(fd).epsilon(1e-6).scale(1e-9));
        }
      }
    }
  }

  TEST_CASE("forward-mode scores equal the reverse-mode tape") {
    const VitModel& m = toy_init();
    const Sample s = generate_toy_sample(kDefaultTestSeed, 6);
    const NeuronActivations clean = neuron_activations(m, s.x);
    for (TokenScope scope : {TokenScope::all_tokens, TokenScope::cls_only}) {
      TangentEngine engine(m, scope, OutputMode::probability);
      const std::vector<NeuronId> prefix{{1, 9}, {2, 14}};
      const auto scores = engine.scan_layer(s.x, s.y, clean, prefix, 3, 6);
      REQUIRE(scores.size() == 64);
      for (std::size_t c : {0, 17, 63}) {
        auto path = prefix;
        path.push_back({3, c});
        CHECK(std::abs(scores[c] - jas(m, s, path, integ(6, scope))) < 1e-14);
        CHECK(std::abs(engine.joint_attribution(s.x, s.y, clean, path, 6) - scores[c]) < 1e-15);
      }
    }
  }

  TEST_CASE("joint attribution approaches the output difference") {
    const VitModel& m = micro();
    const Sample s = generate_toy_sample(kDefaultTestSeed, 1);
    const std::vector<NeuronId> path{{1, 2}, {2, 4}};
    for (TokenScope scope : {TokenScope::all_tokens, TokenScope::cls_only}) {
      const double delta = ref::clamped_output(m, s, path, 1.0, scope) - ref::clamped_output(m, s, path, 0.0, scope);
      const double coarse = std::abs(jas(m, s, path, integ(8, scope)) - delta);
      const double fine = std::abs(jas(m, s, path, integ(512, scope)) - delta);
      CHECK(fine <= 1e-3);
      CHECK(fine < coarse);
    }
  }

  TEST_CASE("searches match the naive oracles on the micro model") {
    const VitModel& m = micro();
    for (std::size_t i = 0; i < 3; ++i) {
      const Sample s = generate_toy_sample(kDefaultTestSeed, i);
      for (TokenScope scope : {TokenScope::all_tokens, TokenScope::cls_only}) {
        const IntegrationConfig c = integ(10, scope);
        const PathSearch fast = search_path(m, s, c), naive = naive_search_path(m, s, c);
        CHECK(fast.path.neurons == naive.path.neurons);
        for (std::size_t l = 0; l < fast.scores.size(); ++l)
          for (std::size_t ch = 0; ch < fast.scores[l].size(); ++ch)
            CHECK(std::abs(fast.scores[l][ch] - naive.scores[l][ch]) <= 1e-9);

        const PathSearch ip = search_influence_pattern(m, s, c), ip_naive = naive_search_influence_pattern(m, s, c);
        CHECK(ip.path.neurons == ip_naive.path.neurons);
        CHECK(std::abs(ip.path.criterion_value - ip_naive.path.criterion_value) <= 1e-9);
        for (std::size_t l = 0; l < ip.scores.size(); ++l)
          for (std::size_t ch = 0; ch < ip.scores[l].size(); ++ch)
            CHECK(std::abs(ip.scores[l][ch] - ip_naive.scores[l][ch]) <= 1e-9);

        const KnowledgeReport k = knowledge_attribution(m, s, c);
        const Tensor kn = naive_knowledge_scores(m, s, c);
        for (std::size_t j = 0; j < kn.numel(); ++j) CHECK(std::abs(k.scores[j] - kn[j]) <= 1e-9);
      }
    }
  }

  TEST_CASE("influence factors match the tape") {
    const VitModel& m = micro();
    const Sample s = generate_toy_sample(kDefaultTestSeed, 2);
    const NeuronId from{1, 3};
    for (TokenScope scope : {TokenScope::all_tokens, TokenScope::cls_only}) {
      TangentEngine engine(m, scope, OutputMode::probability);
      const auto f = engine.influence_factors(s.x, from, 4);
      REQUIRE(f.size() == 4);
      for (std::size_t k = 1; k <= 4; ++k) {
        const auto naive = naive_influence_factor(m, s.x, from, static_cast<double>(k) / 4.0, scope);
        for (std::size_t w = 0; w < naive.size(); ++w) CHECK(std::abs(f[k - 1][w] - naive[w]) <= 1e-12);
      }
    }
  }

  TEST_CASE("greedy search is optimal at every step") {
    const VitModel& m = micro();
    const Sample s = generate_toy_sample(kDefaultTestSeed, 4);
    const PathSearch r = search_path(m, s, integ(12));
    for (std::size_t l = 0; l < r.scores.size(); ++l) {
      const auto& row = r.scores[l];
      const std::size_t best = std::max_element(row.begin(), row.end()) - row.begin();
      CHECK(r.path.neurons[l].channel == best);
    }
    CHECK(r.path.score == r.scores.back()[r.path.neurons.back().channel]);
    CHECK(r.path.criterion_value == r.path.score);
    const ExhaustiveResult all = exhaustive_paths(m, s, integ(12));
    CHECK(all.paths.size() == 36);
    CHECK(all.scores[all.best] >= r.path.score - 1e-15);
  }

  TEST_CASE("top-k reporting") {
    const VitModel& m = micro();
    const Sample s = generate_toy_sample(kDefaultTestSeed, 0);
    const std::size_t n = m.config.ffn;
    const TopkResult all = locate_topk(m, s, integ(6), n);
    const NeuronPath chain = locate_path(m, s, integ(6));
    CHECK(all.chain.neurons == chain.neurons);
    for (std::size_t l = 0; l < all.per_layer.size(); ++l) {
      REQUIRE(all.per_layer[l].size() == n);
      CHECK(all.per_layer[l][0] == chain.neurons[l]);
      CHECK(std::is_sorted(all.scores[l].begin(), all.scores[l].end(), std::greater<>()));
      std::vector<std::size_t> channels;
      for (const auto& id : all.per_layer[l]) channels.push_back(id.channel);
      std::sort(channels.begin(), channels.end());
      for (std::size_t c = 0; c < n; ++c) CHECK(channels[c] == c);
    }
    const TopkResult one = locate_topk(m, s, integ(6), 1);
    for (std::size_t l = 0; l < one.per_layer.size(); ++l) CHECK(one.per_layer[l] == std::vector{chain.neurons[l]});
    CHECK_THROWS_AS(locate_topk(m, s, integ(6), 0), UsageError);
    CHECK_THROWS_AS(locate_topk(m, s, integ(6), n + 1), UsageError);
  }

  TEST_CASE("activation path takes the largest summary") {
    const VitModel& m = toy_init();
    const Sample s = generate_toy_sample(kDefaultTestSeed, 8);
    const auto r = ref::run(m, s.x);
    for (TokenScope scope : {TokenScope::all_tokens, TokenScope::cls_only}) {
      const NeuronPath p = activation_path(m, s, integ(5, scope));
      double total = 0.0;
      for (std::size_t l = 0; l < 4; ++l) {
        std::vector<double> summary(64, 0.0);
        for (std::size_t c = 0; c < 64; ++c) {
          if (scope == TokenScope::cls_only) {
            summary[c] = r.hidden[l][0][c];
          } else {
            for (std::size_t t = 0; t < 17; ++t) summary[c] += r.hidden[l][t][c];
            summary[c] /= 17.0;
          }
        }
        const std::size_t best = std::max_element(summary.begin(), summary.end()) - summary.begin();
        CHECK(p.neurons[l] == NeuronId{l + 1, best});
        total += summary[best];
      }
      CHECK(p.criterion_value == doctest::Approx(total).epsilon(1e-12));
      CHECK(p.score == doctest::Approx(jas(m, s, p.neurons, integ(5, scope))).epsilon(1e-12));
    }
  }

  TEST_CASE("single-layer models") {
    const VitModel m = one_layer_model();
    const Sample s = generate_toy_sample(kDefaultTestSeed, 5);
    const NeuronPath a = locate_path(m, s, integ(8));
    REQUIRE(a.neurons.size() == 1);
    const NeuronPath ip = influence_pattern_path(m, s, integ(8));
    REQUIRE(ip.neurons.size() == 1);
    CHECK(ip.criterion_value == 1.0);
    CHECK(activation_path(m, s, integ(8)).neurons.size() == 1);
    const KnowledgeReport k = knowledge_attribution(m, s, integ(8));
    CHECK(k.histogram.size() == 1);
    CHECK(k.histogram[0] == k.top.size());
  }

  TEST_CASE("knowledge attribution top list and histogram") {
    const VitModel& m = micro();
    const Sample s = generate_toy_sample(kDefaultTestSeed, 3);
    const KnowledgeReport k = knowledge_attribution(m, s, integ(6));
    REQUIRE(k.top.size() == 5);
    std::size_t total = 0;
    for (auto h : k.histogram) total += h;
    CHECK(total == 5);
    for (std::size_t i = 1; i < k.top.size(); ++i) {
      const auto& a = k.top[i - 1];
      const auto& b = k.top[i];
      CHECK(k.scores.at(a.layer - 1, a.channel) >= k.scores.at(b.layer - 1, b.channel));
    }
  }

  TEST_CASE("path records") {
    const NeuronPath p{{{1, 3}, {2, 0}}, 0.25, Criterion::jas, 0.25};
    const auto j = nlohmann::json::parse(path_record(7, p, integ(20, TokenScope::cls_only)));
    CHECK(j["sample_id"] == 7);
    CHECK(j["method"] == "neuron_path");
    CHECK(j["path"][0]["layer"] == 1);
    CHECK(j["path"][0]["channel"] == 3);
    CHECK(j["score"] == 0.25);
    CHECK(j["config"]["m"] == 20);
    CHECK(j["config"]["scope"] == "cls");
  }
}
