#include "helpers.hpp"

#include "mose/attention.hpp"
#include "mose/gradcheck.hpp"
#include "mose/model.hpp"

#include <doctest.h>

#include <set>

using namespace mose;
using test::dot;
using test::fd_error;
using test::random_matrix;
using test::random_tensor;

namespace
{
	AttentionConfig small_cfg(bool rpe, bool lepe, bool logcpb, bool cosine = true)
	{
		AttentionConfig c;
		c.channels = 8;
		c.heads = 2;
		c.window = 4;
		c.pe_rpe = rpe;
		c.pe_lepe = lepe;
		c.pe_logcpb = logcpb;
		c.cpb_hidden = 6;
		c.cosine = cosine;
		return c;
	}

	void jitter(ParameterSet<double> &p, Rng &rng, double std)
	{
		for (auto &e : p)
			for (auto &v : e.value.values())
				v += (e.name.ends_with(".tau") ? 0.1 : 1.0) * std * rng.normal();
	}
} // namespace

TEST_CASE("window partition and reverse")
{
	Rng rng(1);
	const auto one = random_tensor<double>({1, 8, 8, 3}, rng);
	CHECK(window_partition(one, 8).shape() == Shape{1, 64, 3});

	const auto x = random_tensor<double>({2, 16, 16, 3}, rng);
	const auto win = window_partition(x, 8);
	CHECK(win.shape() == Shape{8, 64, 3});
	CHECK(window_reverse(win, 8, 16, 16) == x);
	// Window 1 of example 0 starts at column 8.
	CHECK(win(1, 0, 2) == x(0, 0, 8, 2));
	CHECK(win(1, 9, 0) == x(0, 1, 9, 0));

	const auto flat = Tensor<double>::filled({1, 16, 16, 2}, 0.25);
	for (double v : window_partition(flat, 8).values())
		CHECK(v == 0.25);
	CHECK_THROWS_AS(window_partition(x, 5), InvalidArgument);
}

TEST_CASE("cyclic shift is an exact, sum-preserving roll")
{
	Rng rng(2);
	const auto x = random_tensor<double>({2, 8, 12, 3}, rng);
	CHECK(cyclic_shift(x, 0) == x);
	const auto s = cyclic_shift(x, 3);
	CHECK(cyclic_unshift(s, 3) == x);
	CHECK(s(1, 0, 0, 2) == x(1, 3, 3, 2));
	CHECK(s(0, 7, 11, 1) == x(0, 2, 2, 1));
	CHECK(s.flat().sum() == doctest::Approx(x.flat().sum()).epsilon(1e-12));
}

TEST_CASE("window_order agrees with shift then partition")
{
	Rng rng(3);
	const Index h = 16, w = 24, m = 8, c = 3;
	const auto x = random_tensor<double>({1, h, w, c}, rng);
	const MatrixR<double> grid = x.matrix(h * w, c);
	for (Index shift : {Index{0}, Index{4}})
	{
		const auto order = window_order(h, w, m, shift);
		const auto ref = window_partition(cyclic_shift(x, shift), m);
		const MatrixR<double> gathered = gather_rows(grid, order);
		CHECK(gathered == ref.matrix(h * w, c));
		CHECK(scatter_rows(gathered, order) == grid);
	}
}

TEST_CASE("shifted window mask")
{
	const auto mask = shifted_window_mask<double>(16, 16, 8, 4);
	CHECK(mask.shape() == Shape{4, 64, 64});
	std::set<double> values(mask.values().begin(), mask.values().end());
	CHECK(values == std::set<double>{kMaskLogit, 0.0});
	// The top-left window never straddles a seam.
	for (Index i = 0; i < 64 * 64; ++i)
		CHECK(mask[i] == 0.0);
	// Symmetric, zero diagonal.
	for (Index k = 0; k < 4; ++k)
		for (Index i = 0; i < 64; ++i)
		{
			CHECK(mask(k, i, i) == 0.0);
			for (Index j = 0; j < 64; ++j)
				CHECK(mask(k, i, j) == mask(k, j, i));
		}
	// Last window mixes all four regions: token (0,0) and token (7,7) differ.
	CHECK(mask(3, 0, 63) == kMaskLogit);
}

TEST_CASE("relative position table tying")
{
	const auto idx2 = relative_position_index(2);
	CHECK(idx2.size() == 16);
	CHECK(std::set<Index>(idx2.begin(), idx2.end()).size() == 9);

	const Index m = 4, t = m * m;
	Rng rng(4);
	const auto table = random_tensor<double>({(2 * m - 1) * (2 * m - 1), 2}, rng);
	const auto bias = rpe_gather(table, m);
	CHECK(bias.shape() == Shape{2, t, t});
	// Pairs with equal offset share their bias.
	auto at = [&](Index h, Index y1, Index x1, Index y2, Index x2) { return bias(h, y1 * m + x1, y2 * m + x2); };
	CHECK(at(0, 0, 0, 1, 2) == at(0, 2, 1, 3, 3));
	CHECK(at(1, 3, 3, 0, 1) == at(1, 3, 2, 0, 0));
	CHECK(at(0, 0, 0, 1, 2) != at(0, 1, 2, 0, 0));

	const auto flat = rpe_gather(Tensor<double>::filled({(2 * m - 1) * (2 * m - 1), 2}, 0.5), m);
	for (double v : flat.values())
		CHECK(v == 0.5);
}

TEST_CASE("log-spaced CPB coordinates and bias")
{
	const Index m = 8, side = 2 * m - 1;
	const auto coords = logcpb_coords<double>(m);
	CHECK(coords.shape() == Shape{side * side, 2});
	// Row (dy + M - 1) * side + (dx + M - 1); (+d, 0) mirrors (-d, 0).
	for (Index d = 1; d < m; ++d)
	{
		const Index plus = (d + m - 1) * side + (m - 1), minus = (-d + m - 1) * side + (m - 1);
		CHECK(coords(plus, 0) == doctest::Approx(-coords(minus, 0)).epsilon(1e-15));
		CHECK(coords(plus, 0) > 0);
		CHECK(coords(plus, 1) == 0.0);
	}
	CHECK(coords((m - 1) * side + (m - 1), 0) == 0.0);
	// Largest offset maps to sign * log2(9) / log2(8).
	CHECK(coords(side * side - 1, 1) == doctest::Approx(std::log2(9.0) / 3.0).epsilon(1e-12));

	Tensor<double> w1({5, 2}), b1({5}), w2({3, 5});
	const auto zero = logcpb_bias(w1, b1, w2, m);
	CHECK(zero.shape() == Shape{3, 64, 64});
	for (double v : zero.values())
		CHECK(v == 0.0);
}

TEST_CASE("uniform attention averages the window")
{
	auto cfg = small_cfg(false, false, false, false);
	ParameterSet<double> p;
	Rng rng(5);
	WindowAttention<double> layer(cfg, "a", p, rng);
	// q = k = 0, v = x, proj = identity.
	auto &qkv = p.value("a.qkv.weight");
	qkv.set_zero();
	for (Index i = 0; i < 8; ++i)
		qkv(16 + i, i) = 1.0;
	auto &proj = p.value("a.proj.weight");
	proj.set_zero();
	for (Index i = 0; i < 8; ++i)
		proj(i, i) = 1.0;

	const auto x = random_matrix(32, 8, rng);
	const auto y = layer.forward(p, x, nullptr, nullptr);
	for (Index w = 0; w < 2; ++w)
	{
		const RowVectorX<double> mean = x.middleRows(w * 16, 16).colwise().mean();
		for (Index r = 0; r < 16; ++r)
			CHECK((y.row(w * 16 + r) - mean).cwiseAbs().maxCoeff() < 1e-12);
	}
}

TEST_CASE("softmax rows sum to one")
{
	auto cfg = small_cfg(true, true, true);
	ParameterSet<double> p;
	Rng rng(6);
	WindowAttention<double> layer(cfg, "a", p, rng);
	jitter(p, rng, 0.3);
	const auto mask = shifted_window_mask<double>(8, 8, 4, 2);
	typename WindowAttention<double>::Cache cache;
	layer.forward(p, random_matrix(64, 8, rng), &mask, &cache);
	CHECK(cache.attn.rows() == 4 * 2 * 16);
	CHECK((cache.attn.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
	CHECK(cache.attn.minCoeff() >= 0.0);
}

TEST_CASE("zero LePE and zero CPB net add nothing")
{
	Rng rng(7);
	const auto x = random_matrix(32, 8, rng);

	ParameterSet<double> pa, pb;
	Rng ra(9), rb(9);
	WindowAttention<double> plain(small_cfg(true, false, false), "a", pa, ra);
	WindowAttention<double> lepe(small_cfg(true, true, false), "a", pb, rb);
	CHECK(pb.value("a.lepe").flat().cwiseAbs().maxCoeff() == 0.0);
	CHECK(plain.forward(pa, x, nullptr, nullptr) == lepe.forward(pb, x, nullptr, nullptr));

	ParameterSet<double> pc;
	Rng rc(9);
	WindowAttention<double> cpb(small_cfg(true, false, true), "a", pc, rc);
	pc.value("a.cpb.fc2.weight").set_zero();
	CHECK(plain.forward(pa, x, nullptr, nullptr) == cpb.forward(pc, x, nullptr, nullptr));
}

TEST_CASE("token permutation equivariance without positional terms")
{
	Rng rng(8);
	ParameterSet<double> p;
	WindowAttention<double> layer(small_cfg(false, false, false), "a", p, rng);
	jitter(p, rng, 0.3);
	const auto x = random_matrix(32, 8, rng);
	std::vector<Index> perm(32);
	for (Index w = 0; w < 2; ++w)
		for (Index i = 0; i < 16; ++i)
			perm[static_cast<std::size_t>(w * 16 + i)] = w * 16 + (i * 5 + 3) % 16; // within-window shuffle
	const auto y = layer.forward(p, x, nullptr, nullptr);
	const auto yp = layer.forward(p, gather_rows(x, perm), nullptr, nullptr);
	CHECK((yp - gather_rows(y, perm)).cwiseAbs().maxCoeff() < 1e-6);

	// Relative position bias breaks it.
	ParameterSet<double> q;
	Rng r2(8);
	WindowAttention<double> biased(small_cfg(true, false, false), "a", q, r2);
	jitter(q, r2, 0.3);
	const auto z = biased.forward(q, x, nullptr, nullptr);
	const auto zp = biased.forward(q, gather_rows(x, perm), nullptr, nullptr);
	CHECK((zp - gather_rows(z, perm)).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("attention gradients match central differences")
{
	for (bool cosine : {true, false})
	{
		CAPTURE(cosine);
		ParameterSet<double> p;
		Rng rng(10);
		WindowAttention<double> layer(small_cfg(true, true, true, cosine), "a", p, rng);
		jitter(p, rng, 0.2);
		const auto mask = shifted_window_mask<double>(8, 8, 4, 2);
		const auto x = random_matrix(64, 8, rng);
		const auto dy = random_matrix(64, 8, rng);

		const Objective<double> f = [&](ParameterSet<double> &q, bool with_grad) {
			typename WindowAttention<double>::Cache cache;
			const auto y = layer.forward(q, x, &mask, with_grad ? &cache : nullptr);
			if (with_grad)
				layer.backward(q, cache, &mask, dy);
			return dot(dy, y);
		};
		const auto report = grad_check(f, p);
		CAPTURE(report.worst_entry);
		CHECK(report.max_error < 1e-6);

		typename WindowAttention<double>::Cache cache;
		layer.forward(p, x, &mask, &cache);
		const auto dx = layer.backward(p, cache, &mask, dy);
		CHECK(fd_error([&](const MatrixR<double> &xx) { return dot(dy, layer.forward(p, xx, &mask, nullptr)); }, x, dx) < 1e-6);
	}
}

TEST_CASE("attention config validation")
{
	auto c = small_cfg(true, true, false);
	c.heads = 3;
	CHECK_THROWS_AS(c.validate(), InvalidArgument);
	c = small_cfg(true, true, false);
	c.shift = 1;
	CHECK_THROWS_AS(c.validate(), InvalidArgument);
	c.shift = 2;
	CHECK_NOTHROW(c.validate());
	c = small_cfg(false, false, false);
	CHECK_NOTHROW(c.validate());
}
