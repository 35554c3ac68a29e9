#include "nflr/error.hpp"

namespace nflr {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::out_of_range: return "out-of-range error";
    case ErrorKind::domain: return "domain error";
    case ErrorKind::config: return "config error";
    case ErrorKind::validation: return "validation error";
    case ErrorKind::insufficient_data: return "insufficient-data error";
    case ErrorKind::unrecoverable_mask: return "unrecoverable-mask error";
    case ErrorKind::empty_grid: return "empty-grid error";
    case ErrorKind::undefined_statistic: return "undefined-statistic error";
    case ErrorKind::convergence: return "convergence error";
    case ErrorKind::integrity: return "integrity error";
    case ErrorKind::io: return "I/O error";
    case ErrorKind::precondition: return "precondition failed";
    }
    return "error";
}

}  // namespace nflr
