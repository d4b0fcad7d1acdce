#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <unistd.h>

#include <gtest/gtest.h>

#include "utc/checkpoint.hpp"
#include "utc/config.hpp"
#include "utc/eval.hpp"
#include "utc/optim.hpp"
#include "utc/train.hpp"

using namespace utc;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
  RunConfig c;
  c.d_model = 16;
  c.d_ff = 32;
  c.d_kv = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.max_len = 48;
  c.batch_size = 8;
  c.lr_schedule = "constant";
  c.learning_rate = 1e-3;
  c.log_every = 0;
  c.checkpoint_every = 0;
  return c;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("utc_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<LabeledExample> toy_data(std::size_t n) {
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    LabeledExample ex;
    const bool pos = i % 2 == 0;
    ex.text = pos ? "you are an idiot " + std::to_string(i) : "have a lovely day " + std::to_string(i);
    ex.labels["toxicity"] = pos ? 1.0 : 0.0;
    out.push_back(ex);
  }
  return out;
}

template <class T>
bool params_equal(const ParamStore<T>& a, const ParamStore<T>& b) {
  if (a.names() != b.names()) return false;
  for (const auto& n : a.names())
    if (a.at(n).value.data != b.at(n).value.data || a.at(n).value.shape != b.at(n).value.shape) return false;
  return true;
}

}  // namespace

TEST(Config, ParsesKeyValueWithComments) {
  std::istringstream in("# run\nd_model = 32\nattributes = toxicity, insult\nuse_gbst=false  # no gbst\n\nseed = 7\n");
  auto c = RunConfig::parse(in);
  EXPECT_EQ(c.d_model, 32u);
  EXPECT_EQ(c.attributes, (std::vector<std::string>{"toxicity", "insult"}));
  EXPECT_FALSE(c.use_gbst);
  EXPECT_EQ(c.seed, 7u);
}

TEST(Config, RoundTripsThroughText) {
  auto c = small_config();
  c.corpus_weights = {};
  c.learning_rate = 0.1 + 0.2;
  std::istringstream in(c.to_string());
  auto d = RunConfig::parse(in);
  EXPECT_EQ(c.to_string(), d.to_string());
  EXPECT_EQ(d.learning_rate, c.learning_rate);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  std::istringstream a("dmodel = 3\n");
  EXPECT_THROW(RunConfig::parse(a), std::invalid_argument);
  std::istringstream b("d_model = -4\n");
  EXPECT_THROW(RunConfig::parse(b), std::invalid_argument);
  std::istringstream c("lr_schedule = cosine\n");
  EXPECT_THROW(RunConfig::parse(c), std::invalid_argument);
  std::istringstream d("d_model\n");
  EXPECT_THROW(RunConfig::parse(d), std::invalid_argument);
}

TEST(Schedule, InverseSqrtAndConstant) {
  EXPECT_DOUBLE_EQ(optim::learning_rate("inverse_sqrt", 1, 0, 1000), 1.0 / std::sqrt(1000.0));
  EXPECT_DOUBLE_EQ(optim::learning_rate("inverse_sqrt", 1000, 0, 1000), 1.0 / std::sqrt(1000.0));
  EXPECT_DOUBLE_EQ(optim::learning_rate("inverse_sqrt", 4000, 0, 1000), 1.0 / 63.245553203367585);
  EXPECT_DOUBLE_EQ(optim::learning_rate("inverse_sqrt", 4, 0, 0), 0.5);
  EXPECT_DOUBLE_EQ(optim::learning_rate("constant", 123, 1e-3, 1000), 1e-3);
  EXPECT_THROW(optim::learning_rate("cosine", 1, 1, 1), std::invalid_argument);
}

TEST(Adam, FirstStepMovesEachCoordinateByLr) {
  ParamStore<double> s;
  auto t = Tensor<double>::matrix(1, 3);
  s.add("w", t);
  s.at("w").grad = {2.0, -0.5, 0.0};
  optim::Adam<double> adam;
  adam.step(s, 0.1);
  EXPECT_NEAR(s.at("w").value.data[0], -0.1, 1e-6);
  EXPECT_NEAR(s.at("w").value.data[1], 0.1, 1e-6);
  EXPECT_EQ(s.at("w").value.data[2], 0.0);
}

TEST(Adam, ClipGlobalNorm) {
  ParamStore<double> s;
  s.add("a", Tensor<double>::matrix(1, 2));
  s.add("b", Tensor<double>::matrix(1, 1));
  s.at("a").grad = {3.0, 0.0};
  s.at("b").grad = {4.0};
  EXPECT_DOUBLE_EQ(optim::clip_grad_norm(s, 1.0), 5.0);
  EXPECT_NEAR(s.at("a").grad[0], 0.6, 1e-12);
  EXPECT_NEAR(s.at("b").grad[0], 0.8, 1e-12);
}

TEST(Checkpoint, RoundTripIsBitExactInDouble) {
  auto dir = scratch("ckpt64");
  auto cfg = small_config();
  UtcModel<double> m(cfg.architecture(), 3);
  m.attach_regression_head({"toxicity", "insult"}, 4);
  checkpoint::Metadata meta;
  meta.step = 42;
  meta.config = cfg.to_map();
  meta.metrics["loss"] = 0.5;
  checkpoint::save((dir / "m").string(), m, meta);
  checkpoint::Metadata back;
  auto l = checkpoint::load<double>((dir / "m").string(), &back);
  EXPECT_TRUE(params_equal(m.params(), l.params()));
  EXPECT_EQ(back.step, 42u);
  EXPECT_EQ(back.config, meta.config);
  EXPECT_EQ(back.metrics.at("loss"), 0.5);
  EXPECT_EQ(l.arch().attributes, m.arch().attributes);
  EXPECT_EQ(l.score_text("hello"), m.score_text("hello"));
  EXPECT_FALSE(fs::exists(dir / "m.json.tmp"));
}

TEST(Checkpoint, PayloadIsLittleEndianWithIndexedOffsets) {
  auto dir = scratch("ckptle");
  UtcModel<float> m(small_config().architecture(), 5);
  checkpoint::save((dir / "m").string(), m);
  auto manifest = checkpoint::read_manifest((dir / "m").string());
  EXPECT_EQ(manifest["dtype"], "f32");
  EXPECT_EQ(manifest["byte_order"], "little");
  std::ifstream bin(dir / "m.bin", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  std::uint64_t expect_offset = 0;
  for (const auto& e : manifest["parameters"]) {
    EXPECT_EQ(e["offset"].get<std::uint64_t>(), expect_offset);
    const auto& p = m.params().at(e["name"].get<std::string>());
    const std::uint64_t off = e["offset"];
    std::uint32_t u = 0;
    for (int k = 3; k >= 0; --k) u = (u << 8) | bytes[off + k];
    float f;
    std::memcpy(&f, &u, 4);
    EXPECT_EQ(f, p.value.data[0]) << e["name"];
    expect_offset += e["count"].get<std::uint64_t>() * 4;
  }
  EXPECT_EQ(expect_offset, bytes.size());
}

TEST(Checkpoint, ConvertsPrecisionAndRejectsTruncation) {
  auto dir = scratch("ckptconv");
  UtcModel<double> m(small_config().architecture(), 6);
  checkpoint::save((dir / "m").string(), m);
  auto f = checkpoint::load<float>((dir / "m").string());
  for (const auto& n : m.params().names())
    for (std::size_t i = 0; i < m.params().at(n).value.size(); ++i)
      EXPECT_EQ(f.params().at(n).value.data[i], static_cast<float>(m.params().at(n).value.data[i]));
  fs::resize_file(dir / "m.bin", fs::file_size(dir / "m.bin") - 8);
  EXPECT_THROW(checkpoint::load<double>((dir / "m").string()), std::runtime_error);
}

TEST(Model, RemovingDecoderKeepsEncoderWeights) {
  UtcModel<double> m(small_config().architecture(), 8);
  const auto before = m.params();
  m.remove_decoder();
  EXPECT_FALSE(m.arch().has_decoder());
  std::size_t kept = 0;
  for (const auto& n : before.names()) {
    if (n.rfind("dec.", 0) == 0) {
      EXPECT_FALSE(m.params().contains(n)) << n;
    } else {
      ASSERT_TRUE(m.params().contains(n)) << n;
      EXPECT_EQ(m.params().at(n).value.data, before.at(n).value.data) << n;
      ++kept;
    }
  }
  EXPECT_GT(kept, 0u);
  EXPECT_LT(kept, before.names().size());
}

TEST(Train, SeededRunsAreIdentical) {
  auto cfg = small_config();
  cfg.max_steps = 4;
  cfg.dropout = 0.1;
  cfg.seed = 11;
  auto data = toy_data(16);
  auto go = [&] {
    UtcModel<double> m(cfg.architecture(), cfg.seed);
    m.remove_decoder();
    m.attach_regression_head({"toxicity"}, cfg.seed);
    auto r = train::finetune(m, data, cfg);
    std::vector<double> losses;
    for (const auto& rec : r.log) losses.push_back(rec.loss);
    return std::make_pair(losses, m.params());
  };
  auto [a, pa] = go();
  auto [b, pb] = go();
  ASSERT_EQ(a.size(), 4u);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(params_equal(pa, pb));
}

TEST(Train, DivergenceKeepsLastGoodParameters) {
  auto cfg = small_config();
  cfg.max_steps = 6;
  cfg.checkpoint_every = 1;
  auto data = toy_data(8);
  UtcModel<double> m(cfg.architecture(), 1);
  m.remove_decoder();
  m.attach_regression_head({"toxicity"}, 1);
  std::vector<ByteSequence> in;
  std::vector<heads::AttributeLabels> lab;
  for (const auto& ex : data) {
    in.push_back(encode_text(ex.text, cfg.max_len, true));
    lab.push_back(train::labels_for(ex, {"toxicity"}));
  }
  std::size_t step_seen = 0;
  train::ExampleLoss<double> loss = [&](Binding<double>& p, transformer::ForwardContext<double>& ctx, std::size_t i) {
    auto l = m.regression_loss(p, in[i], lab[i], ctx);
    return step_seen == 3 ? ad::scale(l, std::numeric_limits<double>::quiet_NaN()) : l;
  };
  ParamStore<double> last_saved;
  std::size_t last_step = 0;
  train::Hooks<double> hooks;
  hooks.on_checkpoint = [&](std::size_t s, const UtcModel<double>& mm) {
    last_saved = mm.params();
    last_step = s;
  };
  auto batches = [&](std::size_t s) {
    step_seen = s;
    return std::vector<std::size_t>{0, 1, 2, 3};
  };
  auto r = train::run(m, cfg, batches, loss, hooks);
  EXPECT_TRUE(r.diverged);
  EXPECT_EQ(r.steps_completed, 2u);
  EXPECT_EQ(last_step, 2u);
  EXPECT_TRUE(params_equal(last_saved, m.params()));
  EXPECT_NE(r.message.find("step 3"), std::string::npos);
}

TEST(Train, ShuffledBatchesCoverEachEpoch) {
  auto f = train::shuffled_batches(10, 4, 3);
  std::vector<int> seen(10, 0);
  for (std::size_t s = 1; s <= 5; ++s)
    for (auto i : f(s)) ++seen[i];
  for (int c : seen) EXPECT_EQ(c, 2);
  EXPECT_EQ(f(2), train::shuffled_batches(10, 4, 3)(2));
}

TEST(Train, OverfitsTinyDataset) {
  auto cfg = small_config();
  cfg.max_steps = 150;
  cfg.batch_size = 16;
  cfg.n_dec_layers = 0;
  auto data = toy_data(16);
  UtcModel<float> m(cfg.architecture(), 2);
  m.attach_regression_head({"toxicity"}, 2);
  auto r = train::finetune(m, data, cfg);
  ASSERT_FALSE(r.diverged);
  EXPECT_LT(r.log.back().loss, 0.05);
  std::vector<double> s;
  std::vector<int> y;
  for (const auto& ex : data) {
    s.push_back(m.score_text(ex.text)[0]);
    y.push_back(ex.labels.at("toxicity") > 0.5);
  }
  EXPECT_EQ(eval::auc_roc(s, y).value(), 1.0);
}

TEST(Train, PretrainStepReducesDenoisingLoss) {
  auto cfg = small_config();
  cfg.max_steps = 30;
  cfg.batch_size = 4;
  cfg.learning_rate = 3e-3;
  cfg.mean_span_len = 3;
  pretrain::Corpus c;
  c.name = "toy";
  c.docs = {"the cat sat on the mat and the dog sat on the log", "a quick brown fox jumps over the lazy dog"};
  pretrain::CorpusMixture mix({c});
  UtcModel<float> m(cfg.architecture(), 9);
  auto r = train::pretrain(m, mix, cfg);
  ASSERT_EQ(r.log.size(), 30u);
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) first += r.log[i].loss, last += r.log[25 + i].loss;
  EXPECT_LT(last, first);
}

TEST(Score, BatchedMatchesSingle) {
  UtcModel<double> m(small_config().architecture(), 12);
  m.attach_regression_head({"toxicity", "insult"}, 12);
  std::vector<std::string> texts{"a", "", "some longer text with bytes \xc3\xa9", std::string(200, 'x')};
  auto batch = train::score_texts(m, texts);
  for (std::size_t i = 0; i < texts.size(); ++i) EXPECT_EQ(batch[i], m.score_text(texts[i]));
  for (auto v : batch[3]) EXPECT_TRUE(v > 0 && v < 1);
}
