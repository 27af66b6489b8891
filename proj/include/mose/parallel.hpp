#pragma once

#include "mose/tensor.hpp"

#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mose
{
	/// Default worker count: MOSE_THREADS if set, else hardware concurrency.
	int default_threads();

	/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index runs
	/// exactly once; callers write results into per-index slots and reduce in
	/// index order afterwards, so output never depends on scheduling.
	/// The first exception thrown by any fn is rethrown on the caller.
	template <typename Fn>
	void parallel_for(Index n, int threads, Fn &&fn)
	{
		if (n <= 0)
			return;
		const Index workers = std::min<Index>(std::max(threads, 1), n);
		if (workers == 1)
		{
			for (Index i = 0; i < n; ++i)
				fn(i);
			return;
		}
		std::exception_ptr error;
		std::mutex error_mutex;
		std::vector<std::jthread> pool;
		pool.reserve(static_cast<std::size_t>(workers));
		for (Index w = 0; w < workers; ++w)
		{
			pool.emplace_back([&, w] {
				for (Index i = w; i < n; i += workers)
				{
					try
					{
						fn(i);
					}
					catch (...)
					{
						std::lock_guard lock(error_mutex);
						if (!error)
							error = std::current_exception();
						return;
					}
				}
			});
		}
		pool.clear();
		if (error)
			std::rethrow_exception(error);
	}
} // namespace mose
