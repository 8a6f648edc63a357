#ifndef METAVD_GRADCHECK_HPP
#define METAVD_GRADCHECK_HPP

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace metavd {

// Central-difference derivative of f at x along coordinate i.
double central_difference(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                          size_t i, double h);

// |a - n| / max(|a|, |n|, floor): relative error with an absolute floor for
// near-zero gradients.
double grad_rel_error(double analytic, double numeric, double floor_value);

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    size_t coords_checked = 0;
    double tolerance = 0.0;
    bool pass = false;
};

// Full-ELBO gradient (theta and log-alpha paths, frozen noise) against
// central differences over `configs` random small networks.
GradCheckResult check_elbo_gradients(uint64_t seed, size_t configs, double tolerance);

// Closed-form KL gradient against central differences.
GradCheckResult check_kl_gradient(uint64_t seed, size_t points, double tolerance);

// Hypernetwork psi and embedding update directions against finite
// differences of the scalar <h_psi(e), delta_alpha>.
GradCheckResult check_hypernet_updates(uint64_t seed, double tolerance);

std::vector<GradCheckResult> run_all_gradchecks(uint64_t seed);

} // namespace metavd

#endif
