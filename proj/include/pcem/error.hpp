#ifndef PCEM_ERROR_HPP
#define PCEM_ERROR_HPP

#include <stdexcept>
#include <string>

namespace pcem {

// Input data does not satisfy a structural requirement (parse failure,
// non-contiguous intervals, no observed counts, ...).
class data_error : public std::runtime_error
{
public:
    explicit data_error(const std::string& what) : std::runtime_error(what) {}
};

// A numerical routine could not produce a usable answer.
class numerical_error : public std::runtime_error
{
public:
    explicit numerical_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pcem

#endif  // PCEM_ERROR_HPP
