#include <gtest/gtest.h>

#include <numeric>
#include <random>
#include <set>

#include "diffmorph/gradcheck.hpp"
#include "diffmorph/nets.hpp"

using namespace diffmorph;
using DTensor = BasicTensor<double>;

namespace {

ArchConfig tiny_arch() {
    ArchConfig a;
    a.score_channels = {8, 8};
    a.deform_channels = {8, 8};
    a.embed_dim = 8;
    a.groups = 4;
    return a;
}

template <class T>
void perturb_all(Model<T>& model, std::uint64_t seed, double sd) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sd);
    for (auto& [name, p] : model.params().entries())
        for (auto& v : p.mutable_data()) v += static_cast<T>(n(rng));
}

}  // namespace

TEST(ScoreNet, ShapeContract) {
    Model<float> model(ArchConfig{}, 0);
    std::mt19937_64 rng(1);
    auto m = Tensor::randn({1, 1, 32, 32}, rng), f = Tensor::randn({1, 1, 32, 32}, rng),
         x = Tensor::randn({1, 1, 32, 32}, rng);
    auto e = score_forward(model, m, f, x, {17});
    EXPECT_EQ(e.shape(), (Shape{1, 1, 32, 32}));
    for (float v : e.vec()) EXPECT_TRUE(std::isfinite(v));
    auto field = deform_forward(model, m, e);
    EXPECT_EQ(field.shape(), (Shape{1, 2, 32, 32}));
}

TEST(ScoreNet, DeterministicForSeed) {
    Model<float> a(tiny_arch(), 7), b(tiny_arch(), 7), c(tiny_arch(), 8);
    std::mt19937_64 rng(2);
    auto m = Tensor::randn({2, 1, 8, 8}, rng), f = Tensor::randn({2, 1, 8, 8}, rng), x = Tensor::randn({2, 1, 8, 8}, rng);
    auto ea = score_forward(a, m, f, x, {1, 2});
    EXPECT_EQ(ea.vec(), score_forward(b, m, f, x, {1, 2}).vec());
    EXPECT_NE(ea.vec(), score_forward(c, m, f, x, {1, 2}).vec());
}

TEST(ScoreNet, BatchInvariance) {
    Model<float> model(ArchConfig{}, 3);
    std::mt19937_64 rng(3);
    auto m = Tensor::randn({3, 1, 16, 16}, rng), f = Tensor::randn({3, 1, 16, 16}, rng),
         x = Tensor::randn({3, 1, 16, 16}, rng);
    const std::vector<int> t{5, 700, 1999};
    auto batched = score_forward(model, m, f, x, t);
    for (std::size_t b = 0; b < 3; ++b) {
        auto single = score_forward(model, narrow(m, 0, b, 1), narrow(f, 0, b, 1), narrow(x, 0, b, 1), {t[b]});
        for (std::size_t i = 0; i < single.numel(); ++i) EXPECT_NEAR(single[i], batched[b * 256 + i], 1e-6);
    }
}

TEST(ScoreNet, ShapeErrors) {
    Model<float> model(ArchConfig{}, 0);
    Tensor a({1, 1, 16, 16}), odd({1, 1, 12, 12});
    EXPECT_THROW(score_forward(model, a, Tensor({1, 1, 16, 8}), a, {0}), ShapeError);
    EXPECT_THROW(score_forward(model, odd, odd, odd, {0}), ShapeError);
    EXPECT_THROW(score_forward(model, a, a, a, {0, 1}), ShapeError);
    EXPECT_THROW(score_forward(model, Tensor({1, 2, 16, 16}), Tensor({1, 2, 16, 16}), Tensor({1, 2, 16, 16}), {0}),
                 ShapeError);
}

TEST(Embedding, DistinctAcrossTrainingRange) {
    auto e = sinusoidal_embedding<double>([] {
        std::vector<int> t(2001);
        std::iota(t.begin(), t.end(), 0);
        return t;
    }(), 64);
    std::set<std::vector<double>> seen;
    for (std::size_t i = 0; i <= 2000; ++i) seen.insert(std::vector<double>(e.vec().begin() + i * 64, e.vec().begin() + (i + 1) * 64));
    EXPECT_EQ(seen.size(), 2001u);
    EXPECT_EQ(e[0], 0.0);    // sin(0)
    EXPECT_EQ(e[32], 1.0);   // cos(0)
}

TEST(DeformNet, UntrainedModelIsIdentity) {
    Model<float> model(ArchConfig{}, 5);
    std::mt19937_64 rng(5);
    auto m = Tensor::randn({1, 1, 32, 32}, rng), f = Tensor::randn({1, 1, 32, 32}, rng);
    auto reg = register_pair(model, m, f);
    for (float v : reg.field.vec()) EXPECT_EQ(v, 0.0f);
    EXPECT_EQ(reg.warped.vec(), m.vec());
}

TEST(Latent, EtaScaling) {
    Model<float> model(tiny_arch(), 6);
    std::mt19937_64 rng(6);
    auto m = Tensor::randn({1, 1, 8, 8}, rng), f = Tensor::randn({1, 1, 8, 8}, rng);
    auto zero = latent_at_eta(model, m, f, 0.0);
    for (float v : zero.vec()) EXPECT_EQ(v, 0.0f);
    auto full = latent_at_eta(model, m, f, 1.0), half = latent_at_eta(model, m, f, 0.5),
         quarter = latent_at_eta(model, m, f, 0.25);
    for (std::size_t i = 0; i < full.numel(); ++i) {
        EXPECT_NEAR(half[i], 0.5f * full[i], 1e-6);
        EXPECT_NEAR(2 * quarter[i], half[i], 1e-6);
    }
    EXPECT_THROW(latent_at_eta(model, m, f, -0.1), std::invalid_argument);
    EXPECT_THROW(latent_at_eta(model, m, f, 1.5), std::invalid_argument);
}

TEST(Arch, Validation) {
    ArchConfig a;
    EXPECT_NO_THROW(a.validate());
    a.score_channels = {12, 24};
    EXPECT_THROW(a.validate(), std::invalid_argument);
    a = {};
    a.embed_dim = 7;
    EXPECT_THROW(a.validate(), std::invalid_argument);
    a = {};
    a.deform_channels = {};
    EXPECT_THROW(a.validate(), std::invalid_argument);
    EXPECT_THROW(Model<float>(a, 0), std::invalid_argument);
}

TEST(Model, LoadParametersRejectsMismatch) {
    Model<float> a(tiny_arch(), 1);
    ArchConfig wide = tiny_arch();
    wide.score_channels = {16, 16};
    Model<float> b(wide, 1);
    std::vector<std::pair<std::string, Tensor>> named(b.params().entries().begin(), b.params().entries().end());
    EXPECT_THROW(a.load_parameters(named), ModelMismatch);
    named.assign(a.params().entries().begin(), a.params().entries().end() - 1);
    EXPECT_THROW(a.load_parameters(named), ModelMismatch);
}

TEST(Model, ParameterCountOfDefaultArchitecture) {
    Model<float> model(ArchConfig{}, 0);
    EXPECT_GT(model.params().parameter_count(), 1'000'000u);
    EXPECT_LT(model.params().parameter_count(), 2'000'000u);
}

// Parameter-slice checks through the full networks in double precision.
TEST(NetsGrad, ScoreNetParameterSlices) {
    for (int seed = 0; seed < 5; ++seed) {
        Model<double> model(tiny_arch(), static_cast<std::uint64_t>(seed));
        perturb_all(model, 100 + seed, 0.05);
        std::mt19937_64 rng(seed);
        DTensor m = DTensor::randn({1, 1, 8, 8}, rng), f = DTensor::randn({1, 1, 8, 8}, rng),
                x = DTensor::randn({1, 1, 8, 8}, rng), w = DTensor::randn({1, 1, 8, 8}, rng);
        auto loss = [&] { return sum(mul(score_forward(model, m, f, x, {11}), w)); };
        for (const char* name : {"score.conv_in.w", "score.enc0.res.conv1.w", "score.time1.w", "score.attn.q.w",
                                 "score.conv_out.w", "score.norm_out.gamma"}) {
            DTensor* p = model.params().find(name);
            ASSERT_NE(p, nullptr) << name;
            std::vector<std::size_t> idx;
            for (std::size_t i = 0; i < std::min<std::size_t>(p->numel(), 6); ++i) idx.push_back((i * 7919) % p->numel());
            EXPECT_LT(grad_check_slice<double>(loss, *p, idx, 1e-4), 1e-3) << name << " seed " << seed;
        }
    }
}

TEST(NetsGrad, DeformNetParameterSlices) {
    for (int seed = 0; seed < 5; ++seed) {
        Model<double> model(tiny_arch(), static_cast<std::uint64_t>(seed));
        perturb_all(model, 200 + seed, 0.05);
        std::mt19937_64 rng(seed);
        DTensor m = DTensor::randn({1, 1, 8, 8}, rng), e = DTensor::randn({1, 1, 8, 8}, rng),
                w = DTensor::randn({1, 2, 8, 8}, rng);
        auto loss = [&] { return sum(mul(deform_forward(model, m, e), w)); };
        for (const char* name : {"deform.enc0.w", "deform.enc1.w", "deform.dec0.up.w", "deform.refine.w", "deform.flow.w"}) {
            DTensor* p = model.params().find(name);
            ASSERT_NE(p, nullptr) << name;
            std::vector<std::size_t> idx;
            for (std::size_t i = 0; i < std::min<std::size_t>(p->numel(), 6); ++i) idx.push_back((i * 7919) % p->numel());
            EXPECT_LT(grad_check_slice<double>(loss, *p, idx, 1e-4), 1e-3) << name << " seed " << seed;
        }
    }
}
