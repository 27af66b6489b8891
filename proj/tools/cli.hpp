#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mose::cli
{
	enum ExitCode : int
	{
		kOk = 0,
		kUsage = 1,
		kData = 2,
		kNumeric = 3,
	};

	/// Runs one `mose` command line. args excludes the program name.
	/// Never throws; failures are reported on err and mapped to an ExitCode.
	int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

	/// MOSE_THREADS wins over the flag; a flag of 0 means all available cores.
	int resolve_threads(int flag);
} // namespace mose::cli
