#include "mose/parallel.hpp"

#include <cstdlib>
#include <string>

namespace mose
{
	int default_threads()
	{
		if (const char *env = std::getenv("MOSE_THREADS"); env && *env)
		{
			try
			{
				const int n = std::stoi(env);
				if (n > 0)
					return n;
			}
			catch (const std::exception &)
			{
			}
			throw InvalidArgument(std::string("MOSE_THREADS must be a positive integer, got '") + env + "'");
		}
		const unsigned hw = std::thread::hardware_concurrency();
		return hw == 0 ? 1 : static_cast<int>(hw);
	}
} // namespace mose
