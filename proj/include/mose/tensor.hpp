#pragma once

#include "mose/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mose
{
	using Index = Eigen::Index;
	using Shape = std::vector<Index>;

	template <typename Scalar>
	using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
	template <typename Scalar>
	using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
	template <typename Scalar>
	using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

	inline Index shape_size(const Shape &shape)
	{
		return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
	}

	std::string shape_string(const Shape &shape);

	/// Dense row-major N-d array. Element (i,j,k) of shape (A,B,C) lives at i*B*C + j*C + k.
	template <typename Scalar>
	class Tensor
	{
	public:
		using value_type = Scalar;

		Tensor() = default;

		explicit Tensor(Shape shape)
			: shape_(std::move(shape)), data_(static_cast<std::size_t>(checked_size(shape_)), Scalar(0))
		{
		}

		Tensor(Shape shape, std::vector<Scalar> data)
			: shape_(std::move(shape)), data_(std::move(data))
		{
			if (static_cast<Index>(data_.size()) != checked_size(shape_))
				throw InvalidArgument("tensor data size " + std::to_string(data_.size()) + " does not match shape " + shape_string(shape_));
		}

		static Tensor filled(Shape shape, Scalar value)
		{
			Tensor t(std::move(shape));
			std::fill(t.data_.begin(), t.data_.end(), value);
			return t;
		}

		const Shape &shape() const { return shape_; }
		Index rank() const { return static_cast<Index>(shape_.size()); }
		Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
		Index size() const { return static_cast<Index>(data_.size()); }
		bool empty() const { return data_.empty(); }

		Scalar *data() { return data_.data(); }
		const Scalar *data() const { return data_.data(); }
		std::span<Scalar> values() { return data_; }
		std::span<const Scalar> values() const { return data_; }

		Scalar &operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
		const Scalar &operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

		template <typename... Ix>
		Scalar &operator()(Ix... ix) { return data_[static_cast<std::size_t>(offset(ix...))]; }
		template <typename... Ix>
		const Scalar &operator()(Ix... ix) const { return data_[static_cast<std::size_t>(offset(ix...))]; }

		template <typename... Ix>
		Index offset(Ix... ix) const
		{
			const Index idx[] = {static_cast<Index>(ix)...};
			Index off = 0;
			for (std::size_t a = 0; a < sizeof...(Ix); ++a)
				off = off * shape_[a] + idx[a];
			return off;
		}

		/// View of the data as a rows x cols row-major matrix.
		Eigen::Map<MatrixR<Scalar>> matrix(Index rows, Index cols)
		{
			check_view(rows, cols);
			return {data_.data(), rows, cols};
		}
		Eigen::Map<const MatrixR<Scalar>> matrix(Index rows, Index cols) const
		{
			check_view(rows, cols);
			return {data_.data(), rows, cols};
		}

		/// Last axis as columns, everything else flattened into rows.
		Eigen::Map<MatrixR<Scalar>> matrix() { return matrix(size() / cols_of_last(), cols_of_last()); }
		Eigen::Map<const MatrixR<Scalar>> matrix() const { return matrix(size() / cols_of_last(), cols_of_last()); }

		Eigen::Map<VectorX<Scalar>> flat() { return {data_.data(), size()}; }
		Eigen::Map<const VectorX<Scalar>> flat() const { return {data_.data(), size()}; }

		Tensor reshaped(Shape shape) const
		{
			if (checked_size(shape) != size())
				throw InvalidArgument("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
			return Tensor(std::move(shape), data_);
		}

		template <typename Other>
		Tensor<Other> cast() const
		{
			std::vector<Other> out(data_.size());
			std::transform(data_.begin(), data_.end(), out.begin(), [](Scalar v) { return static_cast<Other>(v); });
			return Tensor<Other>(shape_, std::move(out));
		}

		void set_zero() { std::fill(data_.begin(), data_.end(), Scalar(0)); }

		bool all_finite() const { return flat().allFinite(); }

		void check_finite(std::string_view what) const
		{
			if (!all_finite())
				throw NumericError("non-finite value in " + std::string(what));
		}

		bool operator==(const Tensor &other) const { return shape_ == other.shape_ && data_ == other.data_; }

	private:
		static Index checked_size(const Shape &shape)
		{
			for (Index e : shape)
				if (e < 0)
					throw InvalidArgument("negative extent in shape " + shape_string(shape));
			return shape_size(shape);
		}

		Index cols_of_last() const { return shape_.empty() ? 1 : std::max<Index>(shape_.back(), 1); }

		void check_view(Index rows, Index cols) const
		{
			if (rows * cols != size())
				throw InvalidArgument("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) + " of tensor " + shape_string(shape_));
		}

		Shape shape_;
		std::vector<Scalar> data_;
	};

	template <typename Scalar>
	void require_shape(const Tensor<Scalar> &t, const Shape &expected, std::string_view what)
	{
		if (t.shape() != expected)
			throw InvalidArgument(std::string(what) + ": expected shape " + shape_string(expected) + ", got " + shape_string(t.shape()));
	}

	template <typename Scalar>
	void require_rank(const Tensor<Scalar> &t, Index rank, std::string_view what)
	{
		if (t.rank() != rank)
			throw InvalidArgument(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " + shape_string(t.shape()));
	}
} // namespace mose
