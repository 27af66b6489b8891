#pragma once

#include "mose/tensor.hpp"

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

namespace mose
{
	/// Named parameter tables with gradient accumulators, iterated in insertion order.
	template <typename Scalar>
	class ParameterSet
	{
	public:
		struct Entry
		{
			std::string name;
			Tensor<Scalar> value;
			Tensor<Scalar> grad;
		};

		std::size_t add(std::string name, Tensor<Scalar> value)
		{
			if (index_.count(name))
				throw InvalidArgument("duplicate parameter name '" + name + "'");
			Tensor<Scalar> grad(value.shape());
			index_.emplace(name, entries_.size());
			entries_.push_back({std::move(name), std::move(value), std::move(grad)});
			return entries_.size() - 1;
		}

		std::size_t size() const { return entries_.size(); }
		bool contains(const std::string &name) const { return index_.count(name) != 0; }

		std::size_t index_of(const std::string &name) const
		{
			auto it = index_.find(name);
			if (it == index_.end())
				throw InvalidArgument("unknown parameter '" + name + "'");
			return it->second;
		}

		const Entry &entry(std::size_t i) const { return entries_.at(i); }
		Entry &entry(std::size_t i) { return entries_.at(i); }

		const Tensor<Scalar> &value(std::size_t i) const { return entries_[i].value; }
		Tensor<Scalar> &value(std::size_t i) { return entries_[i].value; }
		Tensor<Scalar> &grad(std::size_t i) { return entries_[i].grad; }
		const Tensor<Scalar> &grad(std::size_t i) const { return entries_[i].grad; }

		const Tensor<Scalar> &value(const std::string &name) const { return value(index_of(name)); }
		Tensor<Scalar> &value(const std::string &name) { return value(index_of(name)); }
		Tensor<Scalar> &grad(const std::string &name) { return grad(index_of(name)); }
		const Tensor<Scalar> &grad(const std::string &name) const { return grad(index_of(name)); }

		/// Replace a value, keeping the registered shape.
		void assign(std::size_t i, Tensor<Scalar> value)
		{
			require_shape(value, entries_[i].value.shape(), entries_[i].name);
			entries_[i].value = std::move(value);
		}
		void assign(const std::string &name, Tensor<Scalar> value) { assign(index_of(name), std::move(value)); }

		void zero_grad()
		{
			for (auto &e : entries_)
				e.grad.set_zero();
		}

		/// Adds other's gradients into ours. Both sets must share the same layout.
		void accumulate_grad(const ParameterSet &other)
		{
			if (other.size() != size())
				throw InvalidArgument("accumulate_grad: parameter layouts differ");
			for (std::size_t i = 0; i < entries_.size(); ++i)
				entries_[i].grad.flat() += other.entries_[i].grad.flat();
		}

		Index scalar_count() const
		{
			Index n = 0;
			for (const auto &e : entries_)
				n += e.value.size();
			return n;
		}

		template <typename Other>
		ParameterSet<Other> cast() const
		{
			ParameterSet<Other> out;
			for (const auto &e : entries_)
				out.add(e.name, e.value.template cast<Other>());
			return out;
		}

		auto begin() const { return entries_.begin(); }
		auto end() const { return entries_.end(); }
		auto begin() { return entries_.begin(); }
		auto end() { return entries_.end(); }

	private:
		std::vector<Entry> entries_;
		std::unordered_map<std::string, std::size_t> index_;
	};
} // namespace mose
