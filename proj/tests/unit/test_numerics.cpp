#include "helpers.hpp"

#include "mose/gradcheck.hpp"
#include "mose/ops.hpp"
#include "mose/parameters.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace mose;
using test::dot;
using test::fd_error;
using test::random_matrix;
using test::random_tensor;

TEST_CASE("tensor offsets are row-major and reshape keeps the sequence")
{
	Tensor<double> t({2, 3, 4});
	for (Index i = 0; i < t.size(); ++i)
		t[i] = static_cast<double>(i);
	CHECK(t.offset(1, 2, 3) == 1 * 12 + 2 * 4 + 3);
	CHECK(t(1, 0, 2) == 14.0);
	const auto r = t.reshaped({4, 6});
	CHECK(std::equal(r.values().begin(), r.values().end(), t.values().begin()));
	CHECK(shape_size(t.shape()) == t.size());
	CHECK_THROWS_AS(t.reshaped({5, 5}), InvalidArgument);
	CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>(3)), InvalidArgument);
	CHECK_THROWS_AS(Tensor<double>({2, -1}), InvalidArgument);
	t[5] = std::nan("");
	CHECK_THROWS_AS(t.check_finite("t"), NumericError);
}

TEST_CASE("trunc_normal_init is bounded, reproducible and centered")
{
	Rng a(11), b(11);
	const auto small = trunc_normal_init<double>({4}, 0.02, a);
	for (double v : small.values())
		CHECK(std::abs(v) <= 0.04);
	CHECK(small == trunc_normal_init<double>({4}, 0.02, b));

	Rng c(3);
	const auto big = trunc_normal_init<double>({10000}, 0.02, c);
	CHECK(std::abs(big.flat().mean()) < 3 * 0.02 / 100);
	CHECK_THROWS_AS(trunc_normal_init<double>({3}, 0.0, c), InvalidArgument);
}

TEST_CASE("rng split streams are independent of draw order")
{
	Rng root(5);
	Rng x = root.split("weights");
	root.next_u64();
	Rng y = root.split("weights");
	CHECK(x.next_u64() == y.next_u64());
	CHECK(root.split("a").next_u64() != root.split("b").next_u64());
	for (int i = 0; i < 1000; ++i)
		CHECK(root.below(7) < 7);
}

TEST_CASE("parameter set keeps insertion order and unique names")
{
	ParameterSet<double> p;
	p.add("z", Tensor<double>({2, 3}));
	p.add("a", Tensor<double>({4}));
	CHECK(p.entry(0).name == "z");
	CHECK(p.entry(1).name == "a");
	CHECK(p.grad(0).shape() == p.value(0).shape());
	CHECK(p.scalar_count() == 10);
	CHECK_THROWS_AS(p.add("z", Tensor<double>({1})), InvalidArgument);
	CHECK_THROWS_AS(p.assign("a", Tensor<double>({5})), InvalidArgument);
	CHECK_THROWS_AS(p.index_of("missing"), InvalidArgument);
}

TEST_CASE("grad_check is exact on a quadratic and flags a sign flip")
{
	ParameterSet<double> p;
	Rng rng(2);
	auto w = random_tensor<double>({3, 4}, rng);
	for (auto &v : w.values())
		v += v >= 0 ? 1.0 : -1.0; // |2w| >= 2 keeps the flip error at its ceiling
	p.add("w", w);

	const Objective<double> f = [](ParameterSet<double> &q, bool with_grad) {
		if (with_grad)
			q.grad(0).flat() += 2.0 * q.value(0).flat();
		return q.value(0).flat().squaredNorm();
	};
	const auto good = grad_check(f, p);
	CHECK(good.max_error < 1e-8);
	CHECK(good.probes == 12);

	const Objective<double> flipped = [](ParameterSet<double> &q, bool with_grad) {
		if (with_grad)
			q.grad(0).flat() -= 2.0 * q.value(0).flat();
		return q.value(0).flat().squaredNorm();
	};
	const auto bad = grad_check(flipped, p);
	CHECK(bad.max_error == doctest::Approx(2.0).epsilon(1e-6));
	CHECK(bad.worst_entry == "w");

	GradCheckOptions few;
	few.max_probes_per_entry = 5;
	CHECK(grad_check(f, p, few).probes == 5);
}

TEST_CASE("linear layer gradients match central differences")
{
	Rng rng(4);
	const auto x = random_matrix(5, 3, rng);
	auto w = random_tensor<double>({4, 3}, rng);
	auto b = random_tensor<double>({4}, rng);
	const auto dy = random_matrix(5, 4, rng);

	Tensor<double> dw({4, 3}), db({4});
	const auto dx = linear_backward(x, w, dy, dw, &db);
	CHECK(fd_error([&](const MatrixR<double> &xx) { return dot(dy, linear_forward(xx, w, &b)); }, x, dx) < 1e-8);
	CHECK(fd_error(
			  [&](const MatrixR<double> &ww) {
				  Tensor<double> wt({4, 3}, std::vector<double>(ww.data(), ww.data() + ww.size()));
				  return dot(dy, linear_forward(x, wt, &b));
			  },
			  w.matrix(), dw.matrix()) < 1e-8);
	CHECK(fd_error(
			  [&](const MatrixR<double> &bb) {
				  Tensor<double> bt({4}, std::vector<double>(bb.data(), bb.data() + bb.size()));
				  return dot(dy, linear_forward(x, w, &bt));
			  },
			  b.matrix(1, 4), db.matrix(1, 4)) < 1e-8);
}

TEST_CASE("f32 linear gradient within the single-precision tolerance")
{
	Rng rng(14);
	const MatrixR<float> x = random_matrix<float>(4, 3, rng);
	const auto w = random_tensor<float>({2, 3}, rng);
	const MatrixR<float> dy = random_matrix<float>(4, 2, rng);
	Tensor<float> dw({2, 3});
	const MatrixR<float> dx = linear_backward(x, w, dy, dw, static_cast<Tensor<float> *>(nullptr));
	const float eps = 1e-3f;
	double worst = 0.0;
	for (Index i = 0; i < x.size(); ++i)
	{
		MatrixR<float> up = x, down = x;
		up.data()[i] += eps;
		down.data()[i] -= eps;
		const float num = ((dy.array() * linear_forward(up, w, static_cast<const Tensor<float> *>(nullptr)).array()).sum() -
						   (dy.array() * linear_forward(down, w, static_cast<const Tensor<float> *>(nullptr)).array()).sum()) /
						  (2 * eps);
		worst = std::max(worst, std::abs(static_cast<double>(dx.data()[i] - num)) / std::max(1.0, std::abs(static_cast<double>(num))));
	}
	CHECK(worst < 1e-3);
}

TEST_CASE("layer norm normalizes tokens and its backward matches")
{
	Rng rng(5);
	const auto x = random_matrix(6, 5, rng, 3.0);
	auto gamma = random_tensor<double>({5}, rng);
	auto beta = random_tensor<double>({5}, rng);
	LayerNormCache<double> cache;
	const Tensor<double> ones = Tensor<double>::filled({5}, 1.0), zeros({5});
	const auto plain = layer_norm_forward(x, ones, zeros, cache);
	for (Index r = 0; r < 6; ++r)
	{
		CHECK(std::abs(plain.row(r).mean()) < 1e-12);
		CHECK(plain.row(r).squaredNorm() / 5 == doctest::Approx(1.0).epsilon(1e-4));
	}

	const auto dy = random_matrix(6, 5, rng);
	layer_norm_forward(x, gamma, beta, cache);
	Tensor<double> dgamma({5}), dbeta({5});
	const auto dx = layer_norm_backward(cache, gamma, dy, dgamma, dbeta);
	auto f = [&](const MatrixR<double> &xx) {
		LayerNormCache<double> c;
		return dot(dy, layer_norm_forward(xx, gamma, beta, c));
	};
	CHECK(fd_error(f, x, dx) < 1e-7);
	CHECK(fd_error(
			  [&](const MatrixR<double> &g) {
				  LayerNormCache<double> c;
				  Tensor<double> gt({5}, std::vector<double>(g.data(), g.data() + 5));
				  return dot(dy, layer_norm_forward(x, gt, beta, c));
			  },
			  gamma.matrix(1, 5), dgamma.matrix(1, 5)) < 1e-8);
	CHECK((dbeta.matrix(1, 5) - dy.colwise().sum()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gelu is the exact erf form")
{
	MatrixR<double> x(1, 5);
	x << -3.0, -0.5, 0.0, 0.7, 2.5;
	const auto y = gelu(x);
	for (Index i = 0; i < 5; ++i)
		CHECK(y(0, i) == doctest::Approx(0.5 * x(0, i) * (1.0 + std::erf(x(0, i) / std::sqrt(2.0)))).epsilon(1e-14));
	Rng rng(6);
	const auto xr = random_matrix(4, 4, rng, 2.0), dy = random_matrix(4, 4, rng);
	CHECK(fd_error([&](const MatrixR<double> &xx) { return dot(dy, gelu(xx)); }, xr, gelu_backward(xr, dy)) < 1e-8);
}

TEST_CASE("conv3x3 matches a direct sum and its backward")
{
	Rng rng(7);
	const Index h = 5, w = 4, cin = 3, cout = 2;
	const auto x = random_matrix(h * w, cin, rng);
	const auto k = random_tensor<double>({cout, cin, 3, 3}, rng);
	const auto b = random_tensor<double>({cout}, rng);
	const auto y = conv3x3_forward(x, h, w, k, b);
	for (Index yy = 0; yy < h; ++yy)
		for (Index xx = 0; xx < w; ++xx)
			for (Index o = 0; o < cout; ++o)
			{
				double acc = b[o];
				for (Index ci = 0; ci < cin; ++ci)
					for (Index dy = -1; dy <= 1; ++dy)
						for (Index dx = -1; dx <= 1; ++dx)
						{
							const Index sy = yy + dy, sx = xx + dx;
							if (sy >= 0 && sy < h && sx >= 0 && sx < w)
								acc += k(o, ci, dy + 1, dx + 1) * x(sy * w + sx, ci);
						}
				CHECK(y(yy * w + xx, o) == doctest::Approx(acc).epsilon(1e-12));
			}

	const auto g = random_matrix(h * w, cout, rng);
	Tensor<double> dk(k.shape()), db({cout});
	const auto dx = conv3x3_backward(x, h, w, k, g, dk, db);
	CHECK(fd_error([&](const MatrixR<double> &xx) { return dot(g, conv3x3_forward(xx, h, w, k, b)); }, x, dx) < 1e-8);
	CHECK(fd_error(
			  [&](const MatrixR<double> &kk) {
				  Tensor<double> kt(k.shape(), std::vector<double>(kk.data(), kk.data() + kk.size()));
				  return dot(g, conv3x3_forward(x, h, w, kt, b));
			  },
			  k.matrix(), dk.matrix()) < 1e-8);
	CHECK((db.matrix(1, cout) - g.colwise().sum()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("reflect padding and cropping")
{
	CHECK(reflect_index(0, 4) == 0);
	CHECK(reflect_index(4, 4) == 2);
	CHECK(reflect_index(5, 4) == 1);
	CHECK(reflect_index(-1, 4) == 1);
	CHECK(reflect_index(3, 1) == 0);

	Rng rng(8);
	const Index h = 3, w = 5;
	const auto x = random_matrix(h * w, 2, rng);
	const auto padded = pad_reflect(x, h, w, 6, 8);
	CHECK(padded.rows() == 48);
	CHECK(padded.row(3 * 8 + 5) == x.row(1 * w + 3));
	CHECK(crop(padded, 6, 8, h, w) == x);

	// crop_backward is the adjoint of crop.
	const auto big = random_matrix(6 * 8, 2, rng), small = random_matrix(h * w, 2, rng);
	CHECK(dot(crop(big, 6, 8, h, w), small) == doctest::Approx(dot(big, crop_backward(small, 6, 8, h, w))).epsilon(1e-12));
}

TEST_CASE("depth_to_space rearranges without loss")
{
	// B x 4 x 1 x 1 -> B x 1 x 2 x 2
	Tensor<double> x({2, 4, 1, 1}, {1, 2, 3, 4, 5, 6, 7, 8});
	const auto y = depth_to_space(x, 2);
	CHECK(y.shape() == Shape{2, 1, 2, 2});
	CHECK(y(0, 0, 0, 1) == 2.0);
	CHECK(y(1, 0, 1, 0) == 7.0);

	Rng rng(9);
	const auto t = random_matrix(6, 8, rng);
	const auto s = depth_to_space(t, 2, 3, 2);
	CHECK(s.rows() == 24);
	CHECK(s.cols() == 2);
	std::vector<double> a(t.data(), t.data() + t.size()), b(s.data(), s.data() + s.size());
	std::sort(a.begin(), a.end());
	std::sort(b.begin(), b.end());
	CHECK(a == b);
	CHECK(space_to_depth(s, 2, 3, 2) == t);

	// r = 4 equals two r = 2 stages in shape.
	const auto t16 = random_matrix(4, 32, rng);
	const auto once = depth_to_space(t16, 2, 2, 4);
	const auto twice = depth_to_space(depth_to_space(t16, 2, 2, 2), 4, 4, 2);
	CHECK(once.rows() == twice.rows());
	CHECK(once.cols() == twice.cols());
	CHECK_THROWS_AS(depth_to_space(t, 2, 3, 3), InvalidArgument);
}

TEST_CASE("planes and tokens are transposes")
{
	Rng rng(10);
	const auto p = random_tensor<double>({3, 2, 4}, rng);
	const auto tok = planes_to_tokens(p.data(), 3, 2, 4);
	CHECK(tok(1 * 4 + 2, 2) == p(2, 1, 2));
	Tensor<double> back({3, 2, 4});
	tokens_to_planes(tok, back.data());
	CHECK(back == p);
}
