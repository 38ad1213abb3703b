#ifndef GJN_H
#define GJN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum GjnStatus {
  GJN_STATUS_OK = 0,
  GJN_STATUS_NULL_POINTER = 1,
  GJN_STATUS_INVALID_UTF8 = 2,
  GJN_STATUS_PARSE = 3,
  GJN_STATUS_BUFFER_TOO_SMALL = 4,
  GJN_STATUS_INVALID_ROUTING = 10,
  GJN_STATUS_NON_CONVERGENT_ROUTING = 11,
  GJN_STATUS_INVALID_DISTRIBUTION = 12,
  GJN_STATUS_DIMENSION_MISMATCH = 13,
  GJN_STATUS_DEGENERATE_MEMBER = 14,
  GJN_STATUS_NOT_CRITICAL = 15,
  GJN_STATUS_UNSTABLE = 16,
  GJN_STATUS_UNSTABLE_RBM = 17,
  GJN_STATUS_NO_PRODUCT_FORM = 18,
  GJN_STATUS_INVALID_COVARIANCE = 19,
  GJN_STATUS_NON_CONVERGENCE = 20,
  GJN_STATUS_INFEASIBLE_VISITS = 21,
  GJN_STATUS_HORIZON_TOO_LONG = 22,
  GJN_STATUS_NO_CERTIFICATE = 23,
  GJN_STATUS_THETA_TOO_LARGE = 24,
  GJN_STATUS_INVALID_CERTIFICATE = 25,
  GJN_STATUS_TAIL_CONDITION_FAILED = 26,
  GJN_STATUS_THRESHOLD_BELOW_K = 27,
  GJN_STATUS_OUT_OF_REGION = 28,
  GJN_STATUS_INVALID_ARGUMENT = 29,
  GJN_STATUS_CONFIG = 30,
  GJN_STATUS_IO = 31,
  GJN_STATUS_PANIC = 99,
} GjnStatus;

// A validated queueing network.
typedef struct GjnNetwork GjnNetwork;

// Parameters of a reflected Brownian motion.
typedef struct GjnRbm GjnRbm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null if none.
// The pointer is valid until the next failing call on the same thread.
const char *gjn_last_error_message(void);

// Static name of a status code.
const char *gjn_status_str(enum GjnStatus status);

// Parses a network from TOML with `routing` and `[[stations]]` tables.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a valid pointer.
enum GjnStatus gjn_network_from_toml(const char *text, struct GjnNetwork **out);

// # Safety
// `net` must come from this library and not be freed twice. Null is ignored.
void gjn_network_free(struct GjnNetwork *net);

// # Safety
// `net` must be a live handle and `out` a valid pointer.
enum GjnStatus gjn_network_num_stations(const struct GjnNetwork *net, size_t *out);

// Total arrival rates and traffic intensities. Either output may be null.
//
// # Safety
// Non-null outputs must hold `len` doubles.
enum GjnStatus gjn_network_traffic(const struct GjnNetwork *net,
                                   double *lambda_out,
                                   double *rho_out,
                                   size_t len);

// Upper bound w'z / min mu_j (1 - rho_j) on the fluid drain time from `z`.
//
// # Safety
// `z` must hold `len` doubles and `out` be a valid pointer.
enum GjnStatus gjn_drain_time_bound(const struct GjnNetwork *net,
                                    const double *z,
                                    size_t len,
                                    double *out);

// Member `n` of the heavy-traffic sequence over a critically loaded base,
// with arrival rates scaled by (1 - kappa0_j / sqrt(n)).
//
// # Safety
// `kappa0` must hold `len` doubles and `out` be a valid pointer.
enum GjnStatus gjn_heavy_traffic_member(const struct GjnNetwork *base,
                                        const double *kappa0,
                                        size_t len,
                                        uint64_t n,
                                        struct GjnNetwork **out);

// Limiting RBM of the heavy-traffic sequence over a critical base.
//
// # Safety
// `kappa0` must hold `len` doubles and `out` be a valid pointer.
enum GjnStatus gjn_rbm_from_heavy_traffic(const struct GjnNetwork *base,
                                          const double *kappa0,
                                          size_t len,
                                          struct GjnRbm **out);

// RBM from explicit drift, covariance and routing (both `dim` x `dim`).
//
// # Safety
// `beta` must hold `dim` doubles, `gamma` and `routing` `dim * dim`.
enum GjnStatus gjn_rbm_new(const double *beta,
                           const double *gamma,
                           const double *routing,
                           size_t dim,
                           struct GjnRbm **out);

// # Safety
// `rbm` must come from this library and not be freed twice. Null is ignored.
void gjn_rbm_free(struct GjnRbm *rbm);

// # Safety
// `rbm` must be a live handle and `out` a valid pointer.
enum GjnStatus gjn_rbm_dim(const struct GjnRbm *rbm, size_t *out);

// # Safety
// `out` must hold `len` doubles.
enum GjnStatus gjn_rbm_drift(const struct GjnRbm *rbm, double *out, size_t len);

// Covariance matrix, row-major.
//
// # Safety
// `out` must hold `len` doubles.
enum GjnStatus gjn_rbm_covariance(const struct GjnRbm *rbm, double *out, size_t len);

// Exponential rates of the product-form stationary law. Fails with
// `NoProductForm` when the skew-symmetry condition does not hold.
//
// # Safety
// `out` must hold `len` doubles.
enum GjnStatus gjn_rbm_product_form_rates(const struct GjnRbm *rbm, double *out, size_t len);

// Approximately stationary RBM samples with default warmup, spacing and
// step, written row-major as `n_samples` rows of `dim` values.
//
// # Safety
// `out` must hold `len` doubles.
enum GjnStatus gjn_rbm_stationary_sample(const struct GjnRbm *rbm,
                                         size_t n_samples,
                                         uint64_t seed,
                                         double *out,
                                         size_t len);

// Reflects a piecewise-constant path of `n_points` rows of `dim` values.
// `y_out` and `q_out` (either may be null) receive the regulator and the
// reflected path in the same layout.
//
// # Safety
// `times` must hold `n_points` doubles, `values` and non-null outputs
// `n_points * dim`, and `routing` `dim * dim`.
enum GjnStatus gjn_reflect(const double *times,
                           const double *values,
                           size_t n_points,
                           size_t dim,
                           const double *routing,
                           double *y_out,
                           double *q_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GJN_H */
