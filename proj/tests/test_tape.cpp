#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "tfids/rng.hpp"
#include "tfids/tape.hpp"

using namespace tfids;
using namespace tfids::ad;
using tfids::testing::fd_grad_rel_err;
using tfids::testing::finite_diff_grad;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, float lo = -1.5f, float hi = 1.5f) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

} // namespace

TEST_CASE("forward op values") {
    Tape tape;

    SUBCASE("softmax of zeros is uniform") {
        Var x = tape.constant(Tensor({1, 3}, {0.0f, 0.0f, 0.0f}));
        Var y = tape.softmax_lastdim(x);
        for (int j = 0; j < 3; ++j) CHECK(y.value()[j] == doctest::Approx(1.0 / 3.0));
    }

    SUBCASE("layer_norm of a constant row is zero") {
        Var x = tape.constant(Tensor({1, 4}, {5.0f, 5.0f, 5.0f, 5.0f}));
        Var g = tape.constant(Tensor::full({4}, 1.0f));
        Var b = tape.constant(Tensor({4}));
        Var y = tape.layer_norm_lastdim(x, g, b);
        for (int j = 0; j < 4; ++j) CHECK(y.value()[j] == doctest::Approx(0.0));
    }

    SUBCASE("matmul by identity is identity") {
        Var a = tape.constant(Tensor({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f}));
        Var eye = tape.constant(Tensor({2, 2}, {1.0f, 0.0f, 0.0f, 1.0f}));
        Var y = tape.matmul(a, eye);
        for (int i = 0; i < 4; ++i) CHECK(y.value()[i] == doctest::Approx(a.value()[i]));
    }

    SUBCASE("shape mismatch names both shapes") {
        Var a = tape.constant(Tensor({2, 3}));
        Var b = tape.constant(Tensor({2, 3}));
        CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("(2,3)"), NumericError);
    }
}

TEST_CASE("d/dx x^2 at x=3 is 6") {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(3.0f), true);
    Var y = tape.mul(x, x);
    tape.backward(y);
    CHECK(tape.grad(x)[0] == doctest::Approx(6.0));
}

TEST_CASE("per-op gradients match central finite differences") {
    Rng rng(42);
    // Every differentiable op, random shapes up to 8x8, 100+ cases total.
    int cases = 0;
    for (int trial = 0; trial < 12; ++trial) {
        const int m = static_cast<int>(rng.uniform_int(2, 8));
        const int k = static_cast<int>(rng.uniform_int(2, 8));
        const int n = static_cast<int>(rng.uniform_int(2, 8));

        struct OpCase {
            const char* name;
            std::function<Var(Tape&, Var)> apply;
            Tensor input;
        };
        Rng data_rng(1000 + static_cast<std::uint64_t>(trial));
        Tensor mat = random_tensor({m, k}, data_rng);
        Tensor rhs = random_tensor({k, n}, data_rng);
        Tensor bias = random_tensor({k}, data_rng);
        Tensor gamma = random_tensor({k}, data_rng, 0.5f, 1.5f);
        Tensor beta = random_tensor({k}, data_rng);
        Tensor other = random_tensor({m, k}, data_rng);
        Tensor pos = random_tensor({m, k}, data_rng, 0.05f, 2.0f);
        Tensor bmat_a = random_tensor({2, m, k}, data_rng);
        Tensor bmat_b = random_tensor({2, k, n}, data_rng);
        Tensor threed = random_tensor({2, m, k}, data_rng);

        std::vector<OpCase> ops;
        ops.push_back({"matmul", [&](Tape& t, Var x) { return t.matmul(x, t.constant(rhs)); }, mat});
        ops.push_back({"matmul_rhs", [&](Tape& t, Var x) { return t.matmul(t.constant(mat), x); }, rhs});
        ops.push_back({"bmm", [&](Tape& t, Var x) { return t.bmm(x, t.constant(bmat_b)); }, bmat_a});
        ops.push_back({"transpose", [&](Tape& t, Var x) { return t.transpose_last(x); }, mat});
        ops.push_back({"reshape", [&](Tape& t, Var x) { return t.reshape(x, {k, m}); }, mat});
        ops.push_back({"add", [&](Tape& t, Var x) { return t.add(x, t.constant(other)); }, mat});
        ops.push_back({"sub", [&](Tape& t, Var x) { return t.sub(t.constant(other), x); }, mat});
        ops.push_back({"add_rowvec", [&](Tape& t, Var x) { return t.add_rowvec(x, t.constant(bias)); }, mat});
        ops.push_back({"mul", [&](Tape& t, Var x) { return t.mul(x, t.constant(other)); }, mat});
        ops.push_back({"affine", [&](Tape& t, Var x) { return t.affine(x, 1.7f, -0.3f); }, mat});
        ops.push_back({"relu", [&](Tape& t, Var x) { return t.relu(x); }, mat});
        ops.push_back({"gelu", [&](Tape& t, Var x) { return t.gelu(x); }, mat});
        ops.push_back({"sigmoid", [&](Tape& t, Var x) { return t.sigmoid(x); }, mat});
        ops.push_back({"log", [&](Tape& t, Var x) { return t.log_clamped(x); }, pos});
        ops.push_back({"softmax", [&](Tape& t, Var x) { return t.softmax_lastdim(x); }, mat});
        ops.push_back({"layer_norm",
                       [&](Tape& t, Var x) {
                           return t.layer_norm_lastdim(x, t.constant(gamma), t.constant(beta));
                       },
                       mat});
        ops.push_back({"layer_norm_gamma",
                       [&](Tape& t, Var x) {
                           return t.layer_norm_lastdim(t.constant(mat), x, t.constant(beta));
                       },
                       gamma});
        ops.push_back({"concat",
                       [&](Tape& t, Var x) { return t.concat_lastdim(x, t.constant(other)); },
                       mat});
        ops.push_back({"select_step", [&](Tape& t, Var x) { return t.select_step(x, 1); }, threed});
        ops.push_back({"mean_axis1", [&](Tape& t, Var x) { return t.mean_axis1(x); }, threed});

        for (auto& oc : ops) {
            // Reduce through a fixed random weighting so the scalar output
            // exercises all entries of the op output.
            Rng wrng(7);
            auto run = [&](const Tensor& x, Tape& t, Var& out_loss) {
                Var xv = t.leaf(x, true);
                Var y = oc.apply(t, xv);
                Tensor w(y.value().shape());
                Rng local(7);
                for (std::int64_t i = 0; i < w.size(); ++i) w[i] = local.uniform(-1.0f, 1.0f);
                Var loss = t.sum_all(t.mul(y, t.constant(w)));
                out_loss = loss;
                return xv;
            };
            auto fwd = [&](const Tensor& x) {
                Tape t;
                Var loss;
                run(x, t, loss);
                return static_cast<double>(loss.value().item());
            };
            Tape t;
            Var loss;
            Var xv = run(oc.input, t, loss);
            t.backward(loss);
            const double err =
                tfids::testing::max_rel_err(t.grad(xv), finite_diff_grad(fwd, oc.input));
            INFO("op=" << oc.name << " trial=" << trial);
            CHECK(err < 1e-2);
            ++cases;
        }

        // embedding: check a couple of table gradients by FD too
        {
            Tensor table = random_tensor({5, k}, data_rng);
            std::vector<int> idx = {0, 3, 3, 1};
            auto fwd = [&](const Tensor& x) {
                Tape t;
                Var tab = t.leaf(x, true);
                Var e = t.embedding(tab, idx);
                Tensor w(e.value().shape());
                Rng local(7);
                for (std::int64_t i = 0; i < w.size(); ++i) w[i] = local.uniform(-1.0f, 1.0f);
                return static_cast<double>(t.sum_all(t.mul(e, t.constant(w))).value().item());
            };
            Tape t;
            Var tab = t.leaf(table, true);
            Var e = t.embedding(tab, idx);
            Tensor w(e.value().shape());
            Rng local(7);
            for (std::int64_t i = 0; i < w.size(); ++i) w[i] = local.uniform(-1.0f, 1.0f);
            Var loss = t.sum_all(t.mul(e, t.constant(w)));
            t.backward(loss);
            const double err =
                tfids::testing::max_rel_err(t.grad(tab), finite_diff_grad(fwd, table));
            CHECK(err < 1e-2);
            ++cases;
        }
    }
    CHECK(cases >= 100);
}

TEST_CASE("sigmoid-WBCE pipeline gradient vs finite differences") {
    // 100 random scalar logits through sigmoid + weighted BCE.
    Rng rng(7);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        Tensor z({1}, {rng.uniform(-2.5f, 2.5f)});
        const float y = rng.bernoulli(0.5f) ? 1.0f : 0.0f;
        const float w1 = rng.uniform(0.5f, 4.0f);
        const float w0 = rng.uniform(0.5f, 4.0f);
        auto build = [&](Tape& t, Var zv) {
            Var s = t.sigmoid(zv);
            Var log_s = t.log_clamped(s);
            Var log_1ms = t.log_clamped(t.affine(s, -1.0f, 1.0f));
            Var term = t.add(t.affine(log_s, w1 * y, 0.0f), t.affine(log_1ms, w0 * (1.0f - y), 0.0f));
            return t.affine(term, -1.0f, 0.0f);
        };
        auto fwd = [&](const Tensor& x) {
            Tape t;
            return static_cast<double>(build(t, t.leaf(x, true)).value().item());
        };
        Tape t;
        Var zv = t.leaf(z, true);
        Var loss = build(t, zv);
        t.backward(loss);
        worst = std::max(worst, tfids::testing::max_rel_err(t.grad(zv), finite_diff_grad(fwd, z)));
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("gradient linearity: grad of summed losses equals sum of grads") {
    Rng rng(11);
    Tensor x0 = random_tensor({4, 3}, rng);
    auto loss_a = [](Tape& t, Var x) { return t.mean_all(t.mul(x, x)); };
    auto loss_b = [](Tape& t, Var x) { return t.mean_all(t.gelu(x)); };

    Tape ta;
    Var xa = ta.leaf(x0, true);
    ta.backward(loss_a(ta, xa));
    Tensor ga = ta.grad(xa);

    Tape tb;
    Var xb = tb.leaf(x0, true);
    tb.backward(loss_b(tb, xb));
    Tensor gb = tb.grad(xb);

    Tape tc;
    Var xc = tc.leaf(x0, true);
    tc.backward(tc.add(loss_a(tc, xc), loss_b(tc, xc)));
    Tensor gc = tc.grad(xc);

    for (std::int64_t i = 0; i < gc.size(); ++i) {
        CHECK(std::fabs(gc[i] - (ga[i] + gb[i])) < 1e-6);
    }
}

TEST_CASE("softmax rows sum to one, layer_norm rows have zero mean") {
    Rng rng(19);
    for (int trial = 0; trial < 20; ++trial) {
        const int r = static_cast<int>(rng.uniform_int(1, 8));
        const int c = static_cast<int>(rng.uniform_int(2, 8));
        Tensor x = random_tensor({r, c}, rng, -4.0f, 4.0f);
        Tape t;
        Var xv = t.constant(x);
        Var sm = t.softmax_lastdim(xv);
        Var ln = t.layer_norm_lastdim(xv, t.constant(Tensor::full({c}, 1.0f)),
                                      t.constant(Tensor({c})));
        for (int i = 0; i < r; ++i) {
            double sum = 0.0, mean = 0.0;
            for (int j = 0; j < c; ++j) {
                sum += sm.value().at2(i, j);
                mean += ln.value().at2(i, j);
            }
            CHECK(std::fabs(sum - 1.0) < 1e-6);
            CHECK(std::fabs(mean / c) < 1e-5);
        }
    }
}

TEST_CASE("two identical forward+backward passes give bit-identical gradients") {
    Rng rng(3);
    Tensor x = random_tensor({6, 5}, rng);
    Tensor w = random_tensor({5, 4}, rng);
    auto run = [&]() {
        Tape t;
        Var xv = t.leaf(x, true);
        Var wv = t.leaf(w, true);
        Var h = t.gelu(t.matmul(xv, wv));
        Var loss = t.mean_all(t.mul(h, h));
        t.backward(loss);
        return std::pair<Tensor, Tensor>(t.grad(xv), t.grad(wv));
    };
    auto [gx1, gw1] = run();
    auto [gx2, gw2] = run();
    CHECK(std::memcmp(gx1.data(), gx2.data(), sizeof(float) * gx1.size()) == 0);
    CHECK(std::memcmp(gw1.data(), gw2.data(), sizeof(float) * gw1.size()) == 0);
}

TEST_CASE("backward contract") {
    SUBCASE("non-scalar loss is rejected") {
        Tape t;
        Var x = t.leaf(Tensor({2, 2}), true);
        CHECK_THROWS_AS(t.backward(x), NumericError);
    }
    SUBCASE("tape replays backward exactly once") {
        Tape t;
        Var x = t.leaf(Tensor::scalar(2.0f), true);
        Var y = t.mul(x, x);
        t.backward(y);
        CHECK_THROWS_AS(t.backward(y), std::logic_error);
    }
    SUBCASE("off-path leaves receive zero gradients") {
        Tape t;
        Var x = t.leaf(Tensor::scalar(2.0f), true);
        Var unused = t.leaf(Tensor({3}, {1.0f, 2.0f, 3.0f}), true);
        Var y = t.mul(x, x);
        std::vector<Tensor> grads = t.gradients(y, {x, unused});
        CHECK(grads[0][0] == doctest::Approx(4.0));
        for (int i = 0; i < 3; ++i) CHECK(grads[1][i] == 0.0f);
    }
    SUBCASE("dropout rate 0 is the identity") {
        Tape t;
        Rng rng(1);
        Var x = t.leaf(Tensor({2}, {1.0f, -2.0f}), true);
        Var y = t.dropout(x, 0.0f, rng);
        CHECK(y.id() == x.id());
    }
}
