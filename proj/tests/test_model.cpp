#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "gradcheck.hpp"
#include "metafc/data.hpp"
#include "metafc/losses.hpp"
#include "metafc/model.hpp"

using namespace metafc;
using namespace metafc::model;
using metafc::ad::Var;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) { return a.shape() == b.shape() && std::ranges::equal(a.data(), b.data()); }

ModelConfig tiny_config() {
  ModelConfig c;
  c.height = 16;
  c.width = 16;
  c.channels = 3;
  c.message_len = 4;
  c.hidden_channels = 3;
  c.num_blocks = 1;
  c.feature_dim = 5;
  c.embed_strength = 0.05;
  return c;
}

// Layer-by-layer count written out independently of the layout tables.
int64_t expected_param_count(const ModelConfig& c) {
  const int64_t C = c.channels, h = c.hidden_channels, L = c.message_len, F = c.feature_dim, n = c.num_blocks;
  const int64_t g = (c.height / 8) * (c.width / 8);
  const int64_t conv_hh = 9 * h * h + h;
  const int64_t enc = (9 * h * C + h) + L * h * g + n * conv_hh + (9 * C * h + C);
  const int64_t dec = (9 * h * C + h) + 2 * conv_hh + n * conv_hh + (F * h * g + F) + (L * F + L);
  return enc + dec;
}

double psnr_oracle(const Tensor& a, const Tensor& b) {
  double se = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  return 10.0 * std::log10(1.0 / (se / static_cast<double>(a.numel())));
}

}  // namespace

TEST_CASE("config validation names the field") {
  ModelConfig ok;
  CHECK_NOTHROW(ok.validate());
  auto fails_on = [](ModelConfig c, const char* field) {
    try {
      c.validate();
    } catch (const std::invalid_argument& e) {
      return std::string(e.what()).find(std::string("'") + field + "'") != std::string::npos;
    }
    return false;
  };
  ModelConfig c;
  c.height = 12;
  CHECK(fails_on(c, "height"));
  c = ok;
  c.width = 20;
  CHECK(fails_on(c, "width"));
  c = ok;
  c.channels = 2;
  CHECK(fails_on(c, "channels"));
  c = ok;
  c.message_len = 0;
  CHECK(fails_on(c, "message_len"));
  c = ok;
  c.feature_dim = c.message_len - 1;
  CHECK(fails_on(c, "feature_dim"));
  c = ok;
  c.embed_strength = -0.1;
  CHECK(fails_on(c, "embed_strength"));
  c = ok;
  c.hidden_channels = 0;
  CHECK(fails_on(c, "hidden_channels"));
  CHECK_THROWS_AS(init(c, 1), std::invalid_argument);
}

TEST_CASE("config json round trip") {
  ModelConfig c = tiny_config();
  c.embed_strength = 0.0375;
  CHECK(ModelConfig::from_json(c.to_json()) == c);
}

TEST_CASE("init is deterministic and seed dependent") {
  ModelConfig c = tiny_config();
  c.num_blocks = 2;
  const ParamSet a = init(c, 42), b = init(c, 42), d = init(c, 43);
  REQUIRE(a.size() == b.size());
  bool any_diff = false;
  const auto va = a.vars(), vb = b.vars(), vd = d.vars();
  for (size_t i = 0; i < va.size(); ++i) {
    CHECK(bitwise_equal(va[i].value(), vb[i].value()));
    if (!bitwise_equal(va[i].value(), vd[i].value())) any_diff = true;
  }
  CHECK(any_diff);
  CHECK(a.names() == d.names());
}

TEST_CASE("parameter count matches closed form") {
  for (int64_t blocks : {0, 1, 2, 3}) {
    ModelConfig c;
    c.num_blocks = blocks;
    CHECK(init(c, 0).numel() == expected_param_count(c));
  }
  // 2-block config written out by hand: C=3, h=4, L=6, F=8, 16x24 image (g=6)
  ModelConfig c;
  c.height = 16;
  c.width = 24;
  c.hidden_channels = 4;
  c.message_len = 6;
  c.feature_dim = 8;
  c.num_blocks = 2;
  // enc: 112 + 144 + 2*148 + 111 = 663; dec: 112 + 296 + 296 + 200 + 54 = 958
  CHECK(init(c, 0).numel() == 663 + 958);
}

TEST_CASE("init: fan-in scaled weights and zero biases") {
  ModelConfig c;
  const ParamSet p = init(c, 5);
  for (const auto& group : {p.encoder, p.decoder}) {
    for (const auto& np : group) {
      const Tensor& t = np.value.value();
      if (np.name.ends_with(".b")) {
        for (double v : t.data()) REQUIRE(v == 0.0);
        continue;
      }
      const int64_t fan_in = np.name == "enc.msg.w" ? t.dim(0) : t.numel() / t.dim(0);
      double ss = 0.0;
      for (double v : t.data()) ss += v * v;
      const double sd = std::sqrt(ss / static_cast<double>(t.numel()));
      const double target = std::sqrt(2.0 / static_cast<double>(fan_in));
      // loose: small tensors have few samples
      CHECK(sd == doctest::Approx(target).epsilon(t.numel() > 500 ? 0.1 : 0.5));
    }
  }
}

TEST_CASE("encode: shapes, zero strength and rejection") {
  ModelConfig c = tiny_config();
  const ParamSet p = init(c, 1);
  auto ds = data::synth_images(10, {16, 16}, 3);
  const auto cover = ds.range(0, 4);
  const auto msg = data::sample_messages(4, c.message_len, 9);
  const auto wm = encode(c, p, cover, msg);
  CHECK(wm.pixels.shape() == cover.pixels.shape());
  for (double v : wm.pixels.data()) REQUIRE((v >= 0.0 && v <= 1.0));

  ModelConfig zero = c;
  zero.embed_strength = 0.0;
  CHECK(bitwise_equal(encode(zero, p, cover, msg).pixels, cover.pixels));

  CHECK_THROWS_AS(encode(c, p, cover, data::sample_messages(4, c.message_len + 1, 9)), std::invalid_argument);
  CHECK_THROWS_AS(encode(c, p, cover, data::sample_messages(3, c.message_len, 9)), std::invalid_argument);
  CHECK_THROWS_AS(decode(c, p, data::synth_images(10, {24, 16}, 3).range(0, 2)), std::invalid_argument);
}

TEST_CASE("decode: feature tap feeds the head") {
  ModelConfig c = tiny_config();
  const ParamSet p = init(c, 11);
  // nonzero head bias so the check covers it
  auto decoder = p.decoder;
  for (auto& np : decoder) {
    if (np.name == "dec.head.b") np.value = Var(testing::random_tensor(np.value.shape(), 4));
  }
  const ParamSet q{p.encoder, decoder};
  const auto img = data::synth_images(10, {16, 16}, 7).range(0, 3);
  const auto out = decode(c, q, img);
  REQUIRE(out.features.shape() == Shape{3, c.feature_dim});
  REQUIRE(out.logits.shape() == Shape{3, c.message_len});
  const Tensor& w = q.get("dec.head.w").value();
  const Tensor& b = q.get("dec.head.b").value();
  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t l = 0; l < c.message_len; ++l) {
      double s = b[l];
      for (int64_t k = 0; k < c.feature_dim; ++k) s += w[l * c.feature_dim + k] * out.features[i * c.feature_dim + k];
      CHECK(out.logits[i * c.message_len + l] == doctest::Approx(s).epsilon(1e-12));
    }
  }
}

TEST_CASE("gradient check of message loss through encode and decode") {
  // 8x8 inputs, 1 block, L=4
  ModelConfig c = tiny_config();
  c.height = 8;
  c.width = 8;
  const ConvModel net(c);
  const ParamSet base = init(c, 3);
  // inputs kept away from the clamp boundaries
  const Tensor cover = testing::random_tensor({2, 3, 8, 8}, 17, 0.2, 0.8);
  const Tensor bits({2, 4}, std::vector<double>{1, 0, 0, 1, 1, 1, 0, 0});

  auto loss_of = [&](const ParamSet& p) {
    const Var wm = net.encode(p, Var(cover), bits);
    return losses::message_loss(net.decode(p, wm).logits, bits);
  };
  const ParamSet leaves = base.as_leaves();
  const auto vars = leaves.vars();
  const auto grads = ad::grad(loss_of(leaves), vars);
  const auto names = base.names();

  for (size_t i = 0; i < vars.size(); ++i) {
    auto f = [&](const Tensor& t) {
      ad::GradModeGuard off(false);
      std::vector<Var> probe = base.vars();
      probe[i] = Var(t);
      return loss_of(base.with_vars(probe)).value().item();
    };
    const Tensor fd = testing::finite_difference(f, vars[i].value(), 1e-6);
    INFO("parameter " << names[i]);
    CHECK(testing::relative_error(grads[i].value(), fd) < 1e-3);
  }
}

TEST_CASE("untrained decoder is at chance") {
  ModelConfig c;
  const ParamSet p = init(c, 77);
  auto ds = data::synth_images(1000, {c.height, c.width}, 12);
  int64_t correct = 0, total = 0;
  const ConvModel net(c);
  for (int64_t first = 0; first < 1000; first += 100) {
    // images from the full pool regardless of split
    std::vector<int64_t> pos;
    const auto train = ds.with_split(data::Split::Train);
    for (int64_t k = 0; k < 100; ++k) pos.push_back((first + k) % train.size());
    const auto cover = train.gather(pos);
    const auto msg = data::sample_messages(100, c.message_len, 1000 + static_cast<uint64_t>(first));
    const auto out = decode(c, p, encode(c, p, cover, msg));
    for (int64_t i = 0; i < out.logits.numel(); ++i) {
      correct += (out.logits[i] > 0.0) == (msg.bits[i] > 0.5);
      ++total;
    }
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(total);
  CHECK(acc > 0.45);
  CHECK(acc < 0.55);
}

TEST_CASE("PSNR falls as embed strength doubles") {
  ModelConfig c;
  const ParamSet p = init(c, 8);
  auto ds = data::synth_images(500, {c.height, c.width}, 21);
  double prev = 1e9;
  for (double s : {0.02, 0.04, 0.08}) {
    ModelConfig cs = c;
    cs.embed_strength = s;
    double sum = 0.0;
    int64_t count = 0;
    for (auto split : {data::Split::Train, data::Split::Val, data::Split::Test}) {
      const auto view = ds.with_split(split);
      for (int64_t first = 0; first < view.size(); first += 50) {
        const int64_t n = std::min<int64_t>(50, view.size() - first);
        const auto cover = view.range(first, n);
        const auto wm = encode(cs, p, cover, data::sample_messages(n, c.message_len, 5 + first));
        for (int64_t i = 0; i < n; ++i) {
          const int64_t per = cover.pixels.numel() / n;
          Tensor a({per}), b({per});
          std::copy_n(cover.pixels.data().begin() + i * per, per, a.data().begin());
          std::copy_n(wm.pixels.data().begin() + i * per, per, b.data().begin());
          sum += psnr_oracle(a, b);
          ++count;
        }
      }
    }
    REQUIRE(count == 500);
    const double mean = sum / static_cast<double>(count);
    MESSAGE("strength " << s << " mean PSNR " << mean);
    CHECK(mean < prev);
    prev = mean;
  }
}

TEST_CASE("step_params examples") {
  const ModelConfig c = tiny_config();
  const ParamSet p = init(c, 2);
  std::vector<Var> g;
  for (const auto& v : p.vars()) g.push_back(Var(testing::random_tensor(v.shape(), 99)));

  const ParamSet same = step_params(p, g, 0.0);
  for (size_t i = 0; i < g.size(); ++i) CHECK(bitwise_equal(same.vars()[i].value(), p.vars()[i].value()));

  ParamSet scalar{{{"theta", Var(Tensor::scalar(2.0))}}, {}};
  const ParamSet stepped = step_params(scalar, {Var(Tensor::scalar(3.0))}, 0.1);
  CHECK(stepped.get("theta").value().item() == doctest::Approx(1.7).epsilon(1e-15));
  CHECK(scalar.get("theta").value().item() == 2.0);

  // two steps with constant grads equal one step with the summed grads
  std::vector<Var> g2;
  for (const auto& v : p.vars()) g2.push_back(Var(testing::random_tensor(v.shape(), 100)));
  std::vector<Var> gsum;
  for (size_t i = 0; i < g.size(); ++i) gsum.push_back(ad::add(g[i], g2[i]));
  const ParamSet two = step_params(step_params(p, g, 0.05), g2, 0.05);
  const ParamSet one = step_params(p, gsum, 0.05);
  for (size_t i = 0; i < g.size(); ++i) {
    const Tensor& a = two.vars()[i].value();
    const Tensor& b = one.vars()[i].value();
    for (int64_t k = 0; k < a.numel(); ++k) REQUIRE(a[k] == doctest::Approx(b[k]).epsilon(1e-12));
  }

  std::vector<Var> short_grads(g.begin(), g.end() - 1);
  CHECK_THROWS_AS(step_params(p, short_grads, 0.1), std::invalid_argument);
  std::vector<Var> bad = g;
  bad[0] = Var(Tensor({1}));
  CHECK_THROWS_AS(step_params(p, bad, 0.1), std::invalid_argument);
}

TEST_CASE("step_params stays differentiable in params and grads") {
  // theta' = theta - a*g with g = theta^2: d theta'/d theta = 1 - 2a*theta
  Var theta(Tensor::scalar(1.5), true);
  Var g = ad::mul(theta, theta);
  ParamSet p{{{"t", theta}}, {}};
  const ParamSet q = step_params(p, {g}, 0.1);
  const Var d = ad::grad(q.get("t"), std::span<const Var>(&theta, 1))[0];
  CHECK(d.value().item() == doctest::Approx(1.0 - 2.0 * 0.1 * 1.5).epsilon(1e-14));
}

TEST_CASE("checkpoint round trip") {
  const ModelConfig c = tiny_config();
  Checkpoint ck;
  ck.model = c.to_json();
  ck.params = init(c, 31);
  ck.optimizer.push_back({"adam.m.enc.in.w", Var(testing::random_tensor({3, 3, 3, 3}, 1))});
  ck.step = 1234;
  ck.meta = {{"strategy", "metafc"}, {"val_acc", 0.987}};

  const auto dir = std::filesystem::temp_directory_path() / "metafc_test_model";
  std::filesystem::create_directories(dir);
  const auto path = dir / "ck.bin";
  save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);

  CHECK(ModelConfig::from_json(back.model) == c);
  CHECK(back.step == 1234);
  CHECK(back.meta == ck.meta);
  REQUIRE(back.params.names() == ck.params.names());
  for (size_t i = 0; i < ck.params.size(); ++i) {
    CHECK(bitwise_equal(back.params.vars()[i].value(), ck.params.vars()[i].value()));
  }
  REQUIRE(back.optimizer.size() == 1);
  CHECK(back.optimizer[0].name == "adam.m.enc.in.w");
  CHECK(bitwise_equal(back.optimizer[0].value.value(), ck.optimizer[0].value.value()));

  // corrupted files are rejected
  {
    std::ofstream junk(dir / "junk.bin", std::ios::binary);
    junk << "not a checkpoint";
  }
  CHECK_THROWS(load_checkpoint(dir / "junk.bin"));
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  CHECK_THROWS(load_checkpoint(path));
  std::filesystem::remove_all(dir);
}
