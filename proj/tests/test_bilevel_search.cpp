#include <filesystem>
#include <fstream>
#include <type_traits>

#include "test_util.hpp"

using namespace maenas;
namespace fs = std::filesystem;

// search entry points take unlabeled images only
static_assert(!std::is_invocable_v<decltype(&run_search), SearchState&, const LabeledSet&, const SearchOptions&>);
static_assert(!std::is_invocable_v<decltype(&weight_step), SearchState&, const LabeledSet&, double>);
static_assert(!std::is_constructible_v<ImageSet, LabeledSet>);

namespace {

SearchConfig tiny_search(uint64_t seed = 3) {
    SearchConfig c;
    c.epochs = 2;
    c.batch_size = 4;
    c.max_steps_per_epoch = 3;
    c.seed = seed;
    return c;
}

std::vector<Tensor> weight_values(SearchState& s) {
    std::vector<Tensor> v;
    for (const auto& [_, p] : s.model().params().params()) v.push_back(p.value());
    return v;
}

std::vector<Tensor> alpha_values(const SearchState& s) {
    std::vector<Tensor> v;
    for (const auto& [_, a] : s.arch().alpha) v.push_back(a.value());
    return v;
}

bool bit_equal(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].shape() != b[i].shape() || std::memcmp(a[i].data(), b[i].data(), a[i].numel() * sizeof(float)) != 0)
            return false;
    return true;
}

double train_loss_now(SearchState& s, const Tensor& batch) {
    NoGradGuard ng;
    return s.model()
        .forward(batch, step_masks(s, batch, kTrainStream), detail::detached_weights(s.arch()), ForwardContext{})
        .loss.value()[0];
}

double val_loss_now(SearchState& s, const Tensor& batch) {
    NoGradGuard ng;
    return s.model()
        .forward(batch, step_masks(s, batch, kValStream), mixture_weights(s.arch()), ForwardContext{})
        .loss.value()[0];
}

Tensor batch_of(const ImageSet& d, int from, int n) {
    std::vector<int> idx;
    for (int i = from; i < from + n; ++i) idx.push_back(i);
    return d.batch(idx);
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("maenas_bilevel_" + name);
    fs::remove_all(p);
    return p;
}

} // namespace

TEST(SearchConfig, DefaultsAndValidation) {
    SearchConfig c;
    EXPECT_DOUBLE_EQ(c.mask_ratio, 0.5);
    EXPECT_EQ(c.patch_size, 4);
    EXPECT_DOUBLE_EQ(c.split_fraction, 0.5);
    EXPECT_EQ(c.order, SearchOrder::first);
    c.split_fraction = 1.0;
    c.mask_ratio = 1.5;
    EXPECT_EQ(c.problems().size(), 2u);
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_EQ(order_from_name("second"), SearchOrder::second);
    EXPECT_THROW(order_from_name("third"), std::invalid_argument);
}

TEST(SearchSplit, DisjointAndCovering) {
    for (double f : {0.5, 0.3, 0.8}) {
        SearchConfig c;
        c.split_fraction = f;
        auto s = search_split(101, c);
        std::vector<int> all(s.train.begin(), s.train.end());
        all.insert(all.end(), s.val.begin(), s.val.end());
        std::sort(all.begin(), all.end());
        ASSERT_EQ(all.size(), 101u);
        for (int i = 0; i < 101; ++i) EXPECT_EQ(all[i], i);
    }
}

TEST(WeightStep, ZeroLearningRateLeavesWeights) {
    SearchState s(maenas::testing::tiny_autoencoder(), tiny_search());
    auto d = maenas::testing::synthetic_images(4, 16, 1);
    const auto before = weight_values(s);
    weight_step(s, d.images, 0.0);
    EXPECT_TRUE(bit_equal(before, weight_values(s)));
}

TEST(WeightStep, TinyStepDescendsAndKeepsAlpha) {
    SearchState s(maenas::testing::tiny_autoencoder(), tiny_search());
    auto d = maenas::testing::synthetic_images(4, 16, 2);
    const auto alpha = alpha_values(s);
    const double before = train_loss_now(s, d.images);
    const double reported = weight_step(s, d.images, 1e-3);
    EXPECT_NEAR(reported, before, 1e-6);
    EXPECT_LE(train_loss_now(s, d.images), before);
    EXPECT_TRUE(bit_equal(alpha, alpha_values(s)));
}

TEST(AlphaStep, ZeroLearningRateLeavesAlpha) {
    auto cfg = tiny_search();
    cfg.alpha_lr = 0;
    SearchState s(maenas::testing::tiny_autoencoder(), cfg);
    auto d = maenas::testing::synthetic_images(4, 16, 3);
    const auto alpha = alpha_values(s);
    alpha_step(s, d.images);
    EXPECT_TRUE(bit_equal(alpha, alpha_values(s)));
}

TEST(AlphaStep, FirstOrderDescendsAndNeverTouchesWeights) {
    auto cfg = tiny_search();
    cfg.alpha_lr = 1e-3;
    SearchState s(maenas::testing::tiny_autoencoder(), cfg);
    auto d = maenas::testing::synthetic_images(4, 16, 4);
    const auto w = weight_values(s);
    const auto alpha = alpha_values(s);
    const double before = val_loss_now(s, d.images);
    alpha_step(s, d.images);
    EXPECT_LE(val_loss_now(s, d.images), before);
    EXPECT_FALSE(bit_equal(alpha, alpha_values(s)));
    EXPECT_TRUE(bit_equal(w, weight_values(s)));
    for (const auto& [name, p] : s.model().params().params()) {
        if (!p.has_grad()) continue;
        for (float g : p.grad().values()) ASSERT_EQ(g, 0.f) << name;
    }
    for (const CellSpec* spec : s.space().cells())
        for (int e = 0; e < spec->num_edges(); ++e) {
            double sum = 0;
            for (double x : edge_weights(s.arch(), *spec, e)) sum += x;
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
}

TEST(AlphaStep, SecondOrderWithZeroXiEqualsFirstOrder) {
    auto first = tiny_search();
    first.alpha_lr = 1e-2;
    auto second = first;
    second.order = SearchOrder::second;
    SearchState a(maenas::testing::tiny_autoencoder(), first);
    SearchState b(maenas::testing::tiny_autoencoder(), second);
    auto d = maenas::testing::synthetic_images(8, 16, 5);
    const Tensor vb = batch_of(d, 0, 4), tb = batch_of(d, 4, 4);
    alpha_step(a, vb);
    alpha_step(b, vb, &tb, 0.0);
    const auto x = alpha_values(a), y = alpha_values(b);
    for (size_t i = 0; i < x.size(); ++i) EXPECT_LT(max_abs_diff(x[i], y[i]), 1e-6);
}

TEST(AlphaStep, SecondOrderRestoresWeightsAndMovesAlpha) {
    auto cfg = tiny_search();
    cfg.order = SearchOrder::second;
    cfg.alpha_lr = 1e-2;
    SearchState s(maenas::testing::tiny_autoencoder(), cfg);
    auto d = maenas::testing::synthetic_images(8, 16, 6);
    const Tensor vb = batch_of(d, 0, 4), tb = batch_of(d, 4, 4);
    const auto w = weight_values(s);
    const auto alpha = alpha_values(s);
    EXPECT_THROW(alpha_step(s, vb), std::invalid_argument);
    alpha_step(s, vb, &tb, 0.025);
    EXPECT_TRUE(bit_equal(w, weight_values(s)));
    EXPECT_FALSE(bit_equal(alpha, alpha_values(s)));
    EXPECT_TRUE(s.arch().all_finite());
}

TEST(AlphaStep, SecondOrderGradientDiffersFromFirstOrderWhenXiPositive) {
    auto first = tiny_search();
    first.alpha_lr = 1e-2;
    auto second = first;
    second.order = SearchOrder::second;
    SearchState a(maenas::testing::tiny_autoencoder(), first);
    SearchState b(maenas::testing::tiny_autoencoder(), second);
    auto d = maenas::testing::synthetic_images(8, 16, 7);
    const Tensor vb = batch_of(d, 0, 4), tb = batch_of(d, 4, 4);
    alpha_step(a, vb);
    alpha_step(b, vb, &tb, 0.5);
    EXPECT_FALSE(bit_equal(alpha_values(a), alpha_values(b)));
}

TEST(Steps, NonFiniteLossAborts) {
    SearchState s(maenas::testing::tiny_autoencoder(), tiny_search());
    auto d = maenas::testing::synthetic_images(4, 16, 8);
    Var p = s.model().params().params().front().second;
    p.mutable_value().fill(std::numeric_limits<float>::infinity());
    EXPECT_THROW(weight_step(s, d.images, 0.01), std::runtime_error);
}

TEST(RunSearch, ReproducibleFromConfigAndSeed) {
    auto d = maenas::testing::synthetic_images(32, 16, 9);
    SearchState a(maenas::testing::tiny_autoencoder(), tiny_search(21));
    SearchState b(maenas::testing::tiny_autoencoder(), tiny_search(21));
    auto ra = run_search(a, d);
    auto rb = run_search(b, d);
    ASSERT_TRUE(ra.completed);
    EXPECT_EQ(genotype_to_string(ra.genotype), genotype_to_string(rb.genotype));
    ASSERT_EQ(ra.metrics.size(), 6u);
    for (size_t i = 0; i < ra.metrics.size(); ++i) EXPECT_EQ(ra.metrics[i].to_json(), rb.metrics[i].to_json());
    EXPECT_TRUE(bit_equal(alpha_values(a), alpha_values(b)));
    EXPECT_EQ(a.history.size(), 3u);
}

TEST(RunSearch, MetricLogFields) {
    auto d = maenas::testing::synthetic_images(32, 16, 10);
    SearchState s(maenas::testing::tiny_autoencoder(), tiny_search());
    const auto dir = scratch("metrics");
    SearchOptions opt;
    opt.metrics_path = dir / "metrics.jsonl";
    run_search(s, d, opt);
    std::ifstream in(opt.metrics_path);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        for (const char* k : {"step", "epoch", "train_loss", "val_loss", "skip_count_snapshot", "lr"})
            EXPECT_TRUE(j.contains(k)) << k;
        EXPECT_EQ(j.at("step"), n);
        ++n;
    }
    EXPECT_EQ(n, 6);
    fs::remove_all(dir);
}

TEST(RunSearch, CosineScheduleFromInitialToMinimum) {
    auto d = maenas::testing::synthetic_images(32, 16, 11);
    auto cfg = tiny_search();
    cfg.epochs = 3;
    cfg.max_steps_per_epoch = 1;
    SearchState s(maenas::testing::tiny_autoencoder(), cfg);
    auto r = run_search(s, d);
    EXPECT_DOUBLE_EQ(r.metrics[0].lr, cfg.w_lr);
    EXPECT_NEAR(r.metrics[1].lr, cfg.w_lr_min + 0.5 * (cfg.w_lr - cfg.w_lr_min) * (1 + std::cos(M_PI / 3)), 1e-12);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    auto d = maenas::testing::synthetic_images(32, 16, 12);
    SearchState s(maenas::testing::tiny_autoencoder(), tiny_search());
    SearchOptions opt;
    opt.stop_after_step = 4;
    run_search(s, d, opt);
    const auto dir = scratch("roundtrip");
    save_checkpoint(s, dir);
    SearchState t(maenas::testing::tiny_autoencoder(), tiny_search());
    load_checkpoint(t, dir);
    EXPECT_EQ(t.step, 4);
    auto ts = detail::state_tensors(s), tt = detail::state_tensors(t);
    ASSERT_EQ(ts.size(), tt.size());
    for (size_t i = 0; i < ts.size(); ++i) {
        EXPECT_EQ(ts[i].first, tt[i].first);
        EXPECT_EQ(std::memcmp(ts[i].second->data(), tt[i].second->data(), ts[i].second->numel() * sizeof(float)), 0)
            << ts[i].first;
    }
    EXPECT_EQ(s.arch_optimizer().steps(), t.arch_optimizer().steps());
    EXPECT_EQ(s.history.size(), t.history.size());
    fs::remove_all(dir);
}

TEST(Checkpoint, ResumeContinuesTheTrajectory) {
    auto d = maenas::testing::synthetic_images(32, 16, 13);
    SearchState full(maenas::testing::tiny_autoencoder(), tiny_search(5));
    auto ref = run_search(full, d);

    const auto dir = scratch("resume");
    SearchState first(maenas::testing::tiny_autoencoder(), tiny_search(5));
    SearchOptions opt;
    opt.checkpoint_dir = dir;
    opt.checkpoint_every = 1;
    opt.stop_after_step = 2;
    auto part = run_search(first, d, opt);
    EXPECT_FALSE(part.completed);

    SearchState resumed(maenas::testing::tiny_autoencoder(), tiny_search(5));
    load_checkpoint(resumed, dir);
    ASSERT_EQ(resumed.step, 2);
    opt.stop_after_step = -1;
    auto rest = run_search(resumed, d, opt);
    ASSERT_TRUE(rest.completed);
    ASSERT_EQ(rest.metrics.size(), 4u);
    for (size_t i = 0; i < rest.metrics.size(); ++i)
        EXPECT_EQ(rest.metrics[i].to_json(), ref.metrics[i + 2].to_json()) << "step " << i + 2;
    EXPECT_TRUE(bit_equal(alpha_values(full), alpha_values(resumed)));
    EXPECT_TRUE(bit_equal(weight_values(full), weight_values(resumed)));
    EXPECT_EQ(genotype_to_string(ref.genotype), genotype_to_string(rest.genotype));
    fs::remove_all(dir);
}

TEST(Checkpoint, VersionMismatchRejected) {
    SearchState s(maenas::testing::tiny_autoencoder(), tiny_search());
    const auto dir = scratch("version");
    save_checkpoint(s, dir);
    auto meta = nlohmann::json::parse(read_text(dir / "state.json"));
    meta["schema_version"] = 99;
    atomic_write(dir / "state.json", meta.dump());
    EXPECT_THROW(load_checkpoint(s, dir), CheckpointError);
    fs::remove_all(dir);
}

TEST(Checkpoint, CorruptBlobReportsHashMismatch) {
    SearchState s(maenas::testing::tiny_autoencoder(), tiny_search());
    const auto dir = scratch("corrupt");
    save_checkpoint(s, dir);
    std::string blob = read_text(dir / "state.bin");
    blob[blob.size() / 2] ^= 0x5a;
    atomic_write(dir / "state.bin", blob);
    try {
        load_checkpoint(s, dir);
        FAIL();
    } catch (const CheckpointError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("hash mismatch"), std::string::npos) << msg;
        EXPECT_NE(msg.find("expected"), std::string::npos) << msg;
    }
    fs::remove_all(dir);
}

TEST(Checkpoint, ConfigHashMismatchRejected) {
    SearchState s(maenas::testing::tiny_autoencoder(), tiny_search());
    s.config_hash = "aaaa";
    const auto dir = scratch("hash");
    save_checkpoint(s, dir);
    SearchState t(maenas::testing::tiny_autoencoder(), tiny_search());
    t.config_hash = "bbbb";
    EXPECT_THROW(load_checkpoint(t, dir), CheckpointError);
    fs::remove_all(dir);
}

TEST(Checkpoint, DivergenceKeepsLastGoodCheckpoint) {
    auto d = maenas::testing::synthetic_images(32, 16, 14);
    SearchState s(maenas::testing::tiny_autoencoder(), tiny_search());
    const auto dir = scratch("diverge");
    SearchOptions opt;
    opt.checkpoint_dir = dir;
    opt.checkpoint_every = 1;
    opt.stop_after_step = 2;
    run_search(s, d, opt);
    Var p = s.model().params().params().front().second;
    p.mutable_value().fill(std::nanf(""));
    opt.stop_after_step = -1;
    EXPECT_THROW(run_search(s, d, opt), std::runtime_error);
    SearchState t(maenas::testing::tiny_autoencoder(), tiny_search());
    load_checkpoint(t, dir);
    EXPECT_EQ(t.step, 2);
    EXPECT_TRUE(t.model().params().all_finite());
    fs::remove_all(dir);
}
