#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mose
{
	/// Bad arguments, inconsistent shapes or configuration. CLI exit code 1.
	class InvalidArgument : public std::invalid_argument
	{
	public:
		using std::invalid_argument::invalid_argument;
	};

	/// Unreadable, malformed or inconsistent input data. CLI exit code 2.
	class DataError : public std::runtime_error
	{
	public:
		using std::runtime_error::runtime_error;
	};

	/// Binary format violation at a known byte offset.
	class FormatError : public DataError
	{
	public:
		FormatError(const std::string &what, std::uint64_t offset)
			: DataError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset)
		{
		}

		std::uint64_t offset() const { return offset_; }

	private:
		std::uint64_t offset_;
	};

	/// NaN/Inf in a value that must be finite. CLI exit code 3.
	class NumericError : public std::runtime_error
	{
	public:
		using std::runtime_error::runtime_error;
	};
} // namespace mose
