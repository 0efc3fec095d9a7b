#ifndef FEDCMI_H
#define FEDCMI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FedcmiStatus {
  FEDCMI_STATUS_OK = 0,
  FEDCMI_STATUS_NULL_ARGUMENT = 1,
  FEDCMI_STATUS_INVALID_UTF8 = 2,
  FEDCMI_STATUS_PARAMETER = 3,
  FEDCMI_STATUS_STRUCTURAL = 4,
  FEDCMI_STATUS_DOMAIN = 5,
  FEDCMI_STATUS_CAPABILITY = 6,
  FEDCMI_STATUS_CONFIG = 7,
  FEDCMI_STATUS_IO = 8,
  FEDCMI_STATUS_NOT_FOUND = 9,
  FEDCMI_STATUS_PANIC = 10,
} FedcmiStatus;

/*
 Opaque experiment configuration.
 */
typedef struct FedcmiConfig FedcmiConfig;

/*
 Opaque experiment report.
 */
typedef struct FedcmiReport FedcmiReport;

/*
 Mean gaps over all repetitions and the standard error of each.
 */
typedef struct FedcmiGaps {
  double participation;
  double out_of_sample;
  double total;
  double empirical_risk;
  double participation_stderr;
  double out_of_sample_stderr;
  double total_stderr;
  size_t repetitions;
} FedcmiGaps;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *fedcmi_last_error(void);

/*
 # Safety
 `s` must be NULL or a string returned by this library.
 */
void fedcmi_string_free(char *s);

/*
 # Safety
 `json` must be a NUL-terminated string and `out` writable.
 */
enum FedcmiStatus fedcmi_config_from_json(const char *json, struct FedcmiConfig **out);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum FedcmiStatus fedcmi_config_from_path(const char *path, struct FedcmiConfig **out);

/*
 # Safety
 `config` must be a live handle.
 */
enum FedcmiStatus fedcmi_config_set_seed(struct FedcmiConfig *config, uint64_t seed);

/*
 # Safety
 `config` must be NULL or a handle not yet freed.
 */
void fedcmi_config_free(struct FedcmiConfig *config);

/*
 Runs the experiment. `workers == 0` uses the global thread pool.

 # Safety
 `config` must be a live handle and `out` writable.
 */
enum FedcmiStatus fedcmi_run(const struct FedcmiConfig *config,
                             size_t workers,
                             struct FedcmiReport **out);

/*
 # Safety
 `report` must be a live handle and `out` writable.
 */
enum FedcmiStatus fedcmi_report_gaps(const struct FedcmiReport *report, struct FedcmiGaps *out);

/*
 Looks up a bound by name. `holds` receives 1, 0, or -1 when the check
 does not apply. Returns `NOT_FOUND` for bounds that were not evaluated.

 # Safety
 `report` must be a live handle, `name` a NUL-terminated string, `value`
 writable; `holds` may be NULL.
 */
enum FedcmiStatus fedcmi_report_bound(const struct FedcmiReport *report,
                                      const char *name,
                                      double *value,
                                      int32_t *holds);

/*
 Serializes the report. Release the string with [`fedcmi_string_free`].

 # Safety
 `report` must be a live handle and `out` writable.
 */
enum FedcmiStatus fedcmi_report_to_json(const struct FedcmiReport *report, char **out);

/*
 Writes report.json and metrics.csv into `dir`.

 # Safety
 `report` must be a live handle and `dir` a NUL-terminated string.
 */
enum FedcmiStatus fedcmi_report_write(const struct FedcmiReport *report, const char *dir);

/*
 # Safety
 `report` must be NULL or a handle not yet freed.
 */
void fedcmi_report_free(struct FedcmiReport *report);

/*
 Plug-in mutual information (nats) of paired discrete samples.

 # Safety
 `x` and `y` must point to `len` values each.
 */
enum FedcmiStatus fedcmi_plugin_mi(const uint32_t *x, const uint32_t *y, size_t len, double *out);

/*
 Plug-in conditional mutual information I(X;Y|Z) in nats.

 # Safety
 `x`, `y` and `z` must point to `len` values each.
 */
enum FedcmiStatus fedcmi_plugin_cmi(const uint32_t *x,
                                    const uint32_t *y,
                                    const uint32_t *z,
                                    size_t len,
                                    double *out);

/*
 # Safety
 `out` must be writable.
 */
enum FedcmiStatus fedcmi_solve_c_max(double c, double tol, double *out);

/*
 # Safety
 `eps_local` must point to `k` values.
 */
enum FedcmiStatus fedcmi_dp_bound(double eps_global,
                                  const double *eps_local,
                                  size_t k,
                                  size_t n,
                                  double *out);

/*
 # Safety
 `out` must be writable.
 */
enum FedcmiStatus fedcmi_comm_constraint_bound(uint32_t bits,
                                               double sigma,
                                               size_t k,
                                               size_t n,
                                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDCMI_H */
